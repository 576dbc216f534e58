//! The intrinsic metric `d_theta` and the diagnostics built on it.
//!
//! `d_theta(x, y)` is the shortest-path distance for the edge weight
//! `(1 ^ (theta(e+) ^ theta(e-)) / omega(e))^(1/2)`, computed exactly with
//! Dijkstra's algorithm. The module also certifies the dual (Lipschitz)
//! characterization of the metric, reports its comparison with the graph
//! distance, and builds the greedy paths and record statistics used to probe
//! the optimality of that comparison in layered environments.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calculus::{m_p_statistic, EdgeField};
use crate::environment::{Environment, LayeredField, SpeedMeasure};
use crate::error::{Error, Result};
use crate::lattice::{Boundary, LatticeGraph};
use crate::stats::loglog_slope;

/// `(1 ^ (theta(e+) ^ theta(e-)) / omega(e))^(1/2)`, a value in `(0, 1]`.
#[inline]
pub fn chemical_weight(omega: f64, theta_plus: f64, theta_minus: f64) -> f64 {
    (theta_plus.min(theta_minus) / omega).min(1.0).sqrt()
}

pub fn chemical_edge_weight(env: &Environment, theta: &SpeedMeasure, e: usize) -> Result<f64> {
    let edge = env.graph().edge(e)?;
    Ok(chemical_weight(
        env.conductance(e),
        theta.at(edge.plus),
        theta.at(edge.minus),
    ))
}

pub fn chemical_weights(env: &Environment, theta: &SpeedMeasure) -> EdgeField {
    EdgeField(
        env.graph()
            .edges()
            .iter()
            .zip(env.conductances())
            .map(|(e, &w)| chemical_weight(w, theta.at(e.plus), theta.at(e.minus)))
            .collect(),
    )
}

/// Intrinsic distances from one source vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricField {
    pub source: usize,
    pub distances: Vec<f64>,
}

impl MetricField {
    #[inline]
    pub fn at(&self, y: usize) -> f64 {
        self.distances[y]
    }
}

#[derive(Copy, Clone, PartialEq)]
struct HeapEntry {
    dist: f64,
    vertex: usize,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.vertex.cmp(&self.vertex))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Single-source shortest paths for nonnegative edge weights.
pub fn dijkstra(graph: &LatticeGraph, weights: &[f64], source: usize) -> Result<Vec<f64>> {
    graph.check_vertex(source)?;
    graph.check_len("edge weights", weights.len(), graph.num_edges())?;
    let mut dist = vec![f64::INFINITY; graph.num_vertices()];
    let mut heap = BinaryHeap::new();
    dist[source] = 0.0;
    heap.push(HeapEntry {
        dist: 0.0,
        vertex: source,
    });
    while let Some(HeapEntry { dist: d, vertex: v }) = heap.pop() {
        if d > dist[v] {
            continue;
        }
        for inc in graph.neighbors(v) {
            let nd = d + weights[inc.edge];
            if nd < dist[inc.neighbor] {
                dist[inc.neighbor] = nd;
                heap.push(HeapEntry {
                    dist: nd,
                    vertex: inc.neighbor,
                });
            }
        }
    }
    Ok(dist)
}

pub fn intrinsic_distance_field(
    env: &Environment,
    theta: &SpeedMeasure,
    x: usize,
) -> Result<MetricField> {
    let weights = chemical_weights(env, theta);
    Ok(MetricField {
        source: x,
        distances: dijkstra(env.graph(), &weights, x)?,
    })
}

/// Distance fields from every vertex (row `x` is the field from `x`).
pub fn intrinsic_distance_matrix(env: &Environment, theta: &SpeedMeasure) -> Vec<Vec<f64>> {
    let weights = chemical_weights(env, theta);
    (0..env.graph().num_vertices())
        .into_par_iter()
        .map(|x| dijkstra(env.graph(), &weights, x).expect("valid source"))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EdgeViolation {
    pub edge: usize,
    /// `|nabla psi(e)| - 1`
    pub gradient_excess: f64,
    /// `dGamma(psi,psi)(e) - theta(e+) ^ theta(e-)`
    pub energy_excess: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeasibilityReport {
    pub feasible: bool,
    /// Offending edges, worst first.
    pub violations: Vec<EdgeViolation>,
    pub max_gradient: f64,
    /// `max_e dGamma(psi,psi)(e) / (theta(e+) ^ theta(e-))`
    pub max_energy_ratio: f64,
}

/// Checks `|nabla psi| <= 1` and `omega (nabla psi)^2 <= theta(e+) ^ theta(e-)`
/// on every edge, allowing a relative slack `tol` for rounding.
pub fn certify_feasible(
    env: &Environment,
    theta: &SpeedMeasure,
    psi: &[f64],
    tol: f64,
) -> Result<FeasibilityReport> {
    let graph = env.graph();
    graph.check_vertex_fn("psi", psi)?;
    let mut violations = Vec::new();
    let mut max_gradient = 0.0f64;
    let mut max_energy_ratio = 0.0f64;
    for (id, (e, &w)) in graph.edges().iter().zip(env.conductances()).enumerate() {
        let grad = (psi[e.plus] - psi[e.minus]).abs();
        let energy = w * grad * grad;
        let cap = theta.at(e.plus).min(theta.at(e.minus));
        max_gradient = max_gradient.max(grad);
        max_energy_ratio = max_energy_ratio.max(energy / cap);
        let gradient_excess = grad - 1.0;
        let energy_excess = energy - cap;
        if gradient_excess > tol || energy_excess > tol * cap {
            violations.push(EdgeViolation {
                edge: id,
                gradient_excess,
                energy_excess,
            });
        }
    }
    violations.sort_by(|a, b| {
        let ka = a.gradient_excess.max(a.energy_excess);
        let kb = b.gradient_excess.max(b.energy_excess);
        kb.total_cmp(&ka)
    });
    Ok(FeasibilityReport {
        feasible: violations.is_empty(),
        violations,
        max_gradient,
        max_energy_ratio,
    })
}

/// Gap between the path infimum and the potential supremum for the pair
/// `(x, y)`: the infimum is read from the field rooted at `y`, the supremum
/// from the certificate `psi = d_theta(x, .)`.
pub fn duality_gap_from_fields(from_x: &MetricField, from_y: &MetricField) -> f64 {
    let x = from_x.source;
    let y = from_y.source;
    let inf = from_y.at(x);
    let sup = from_x.at(y) - from_x.at(x);
    (inf - sup).abs()
}

pub fn duality_gap(env: &Environment, theta: &SpeedMeasure, x: usize, y: usize) -> Result<f64> {
    let fx = intrinsic_distance_field(env, theta, x)?;
    let fy = intrinsic_distance_field(env, theta, y)?;
    Ok(duality_gap_from_fields(&fx, &fy))
}

/// `1 - (d - 1) / (2p)`
pub fn comparison_exponent(d: usize, p: f64) -> f64 {
    1.0 - (d as f64 - 1.0) / (2.0 * p)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LowerBoundRow {
    pub radius: usize,
    /// `min { d_theta(x,y) : d(x,y) = radius }`
    pub min_intrinsic: f64,
    pub argmin: usize,
    /// `min_intrinsic / radius^exponent`
    pub ratio: f64,
    pub m_p: f64,
    pub clipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LowerBoundReport {
    pub source: usize,
    pub p: f64,
    pub exponent: f64,
    pub rows: Vec<LowerBoundRow>,
    /// Minimum ratio over the reported radii.
    pub c_hat: f64,
    /// `max ratio / min ratio`
    pub spread: f64,
}

pub fn lower_bound_report(
    env: &Environment,
    theta: &SpeedMeasure,
    x: usize,
    p: f64,
    radii: &[usize],
) -> Result<LowerBoundReport> {
    let graph = env.graph();
    let d = graph.dim();
    let threshold = (d as f64 - 1.0) / 2.0;
    if !(p > threshold) {
        return Err(Error::Precondition(format!(
            "p = {p} must exceed (d-1)/2 = {threshold}"
        )));
    }
    if radii.is_empty() {
        return Err(Error::Empty("radius list"));
    }
    let field = intrinsic_distance_field(env, theta, x)?;
    let hops = graph.bfs_distances(x)?;
    let m_p = m_p_statistic(env, theta, x, radii, p)?;
    let exponent = comparison_exponent(d, p);
    let rows = radii
        .iter()
        .zip(&m_p)
        .map(|(&r, mp)| {
            let (argmin, min_intrinsic) = hops
                .iter()
                .enumerate()
                .filter(|(_, &h)| h == r)
                .map(|(y, _)| (y, field.at(y)))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .ok_or_else(|| {
                    Error::Precondition(format!("no vertex at graph distance {r} from {x}"))
                })?;
            Ok(LowerBoundRow {
                radius: r,
                min_intrinsic,
                argmin,
                ratio: min_intrinsic / (r as f64).powf(exponent),
                m_p: mp.value,
                clipped: mp.clipped,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let c_hat = rows.iter().map(|r| r.ratio).fold(f64::INFINITY, f64::min);
    let max = rows.iter().map(|r| r.ratio).fold(0.0, f64::max);
    Ok(LowerBoundReport {
        source: x,
        p,
        exponent,
        rows,
        c_hat,
        spread: max / c_hat,
    })
}

/// Source of conductances on (a region of) `Z^d`, addressed by the lower
/// endpoint `x` and direction of the edge `{x, x + e_axis}`.
pub trait ConductanceField {
    fn dim(&self) -> usize;

    /// `None` when the edge does not exist in the field's domain.
    fn forward_conductance(&self, x: &[i64], axis: usize) -> Option<f64>;

    /// Largest conductance among edges `{x, x + e_i}` whose upper endpoint
    /// `x + e_i` lies in the cube `center + [-half, half]^d`. Ties go to the
    /// lexicographically smallest `(x, i)`.
    fn box_argmax_edge(&self, center: &[i64], half: usize) -> Result<BoxArgmax> {
        let d = self.dim();
        let h = half as i64;
        let mut best: Option<BoxArgmax> = None;
        // upper endpoints y range over the cube; x = y - e_i
        let mut y: Vec<i64> = center.iter().map(|c| c - h).collect();
        loop {
            for axis in 0..d {
                let mut x = y.clone();
                x[axis] -= 1;
                let w = self
                    .forward_conductance(&x, axis)
                    .ok_or(Error::BoxTooSmall { half_width: half })?;
                let better = match &best {
                    None => true,
                    Some(b) => w > b.value || (w == b.value && (&x, axis) < (&b.lower, b.axis)),
                };
                if better {
                    best = Some(BoxArgmax {
                        lower: x,
                        axis,
                        value: w,
                    });
                }
            }
            // odometer over the cube
            let mut k = d;
            loop {
                if k == 0 {
                    return Ok(best.expect("cube is nonempty"));
                }
                k -= 1;
                y[k] += 1;
                if y[k] <= center[k] + h {
                    break;
                }
                y[k] = center[k] - h;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoxArgmax {
    /// Lower endpoint `x` of the edge `{x, x + e_axis}`.
    pub lower: Vec<i64>,
    pub axis: usize,
    pub value: f64,
}

impl ConductanceField for Environment {
    fn dim(&self) -> usize {
        self.graph().dim()
    }

    fn forward_conductance(&self, x: &[i64], axis: usize) -> Option<f64> {
        let g = self.graph();
        if x.len() != g.dim() || x.iter().zip(g.extents()).any(|(&c, &n)| c < 0 || c >= n as i64)
        {
            return None;
        }
        let coords: Vec<usize> = x.iter().map(|&c| c as usize).collect();
        let v = g.index(&coords).ok()?;
        let w = g.step_forward(v, axis)?;
        g.edge_between(v, w).map(|e| self.conductance(e))
    }

    fn box_argmax_edge(&self, center: &[i64], half: usize) -> Result<BoxArgmax> {
        let g = self.graph();
        let h = half as i64;
        let fits = center.len() == g.dim()
            && center.iter().zip(g.extents()).all(|(&c, &n)| match g.boundary() {
                Boundary::Box => c - h >= 1 && c + h < n as i64,
                Boundary::Torus => c >= 0 && c < n as i64 && (2 * half + 2) <= n,
            });
        if !fits {
            return Err(Error::BoxTooSmall { half_width: half });
        }
        // lattice coordinates are used modulo the extents on a torus
        let wrapped = TorusView(self);
        let base = ConductanceFieldDefault(&wrapped);
        base.box_argmax_edge(center, half)
    }
}

struct TorusView<'a>(&'a Environment);

impl ConductanceField for TorusView<'_> {
    fn dim(&self) -> usize {
        self.0.graph().dim()
    }

    fn forward_conductance(&self, x: &[i64], axis: usize) -> Option<f64> {
        let g = self.0.graph();
        if g.boundary() == Boundary::Torus {
            let wrapped: Vec<i64> = x
                .iter()
                .zip(g.extents())
                .map(|(&c, &n)| c.rem_euclid(n as i64))
                .collect();
            self.0.forward_conductance(&wrapped, axis)
        } else {
            self.0.forward_conductance(x, axis)
        }
    }
}

/// Forces the trait's default `box_argmax_edge` on a wrapped field.
struct ConductanceFieldDefault<'a, F: ConductanceField>(&'a F);

impl<F: ConductanceField> ConductanceField for ConductanceFieldDefault<'_, F> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn forward_conductance(&self, x: &[i64], axis: usize) -> Option<f64> {
        self.0.forward_conductance(x, axis)
    }
}

impl ConductanceField for LayeredField {
    fn dim(&self) -> usize {
        self.d
    }

    fn forward_conductance(&self, x: &[i64], axis: usize) -> Option<f64> {
        (x.len() == self.d && axis < self.d).then(|| self.line_value(axis, x))
    }

    /// One draw per line meeting the cube; the smallest edge on a line is the
    /// one with `x[axis] = center[axis] - half - 1`.
    fn box_argmax_edge(&self, center: &[i64], half: usize) -> Result<BoxArgmax> {
        let d = self.d;
        let h = half as i64;
        let mut best: Option<BoxArgmax> = None;
        for axis in 0..d {
            let mut x: Vec<i64> = center.iter().map(|c| c - h).collect();
            x[axis] = center[axis] - h - 1;
            loop {
                let w = self.line_value(axis, &x);
                let better = match &best {
                    None => true,
                    Some(b) => w > b.value || (w == b.value && (&x, axis) < (&b.lower, b.axis)),
                };
                if better {
                    best = Some(BoxArgmax {
                        lower: x.clone(),
                        axis,
                        value: w,
                    });
                }
                // odometer over the coordinates other than `axis`
                let mut k = d;
                let done = loop {
                    if k == 0 {
                        break true;
                    }
                    k -= 1;
                    if k == axis {
                        continue;
                    }
                    x[k] += 1;
                    if x[k] <= center[k] + h {
                        break false;
                    }
                    x[k] = center[k] - h;
                };
                if done {
                    break;
                }
            }
        }
        Ok(best.expect("at least one line"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GreedyVariant {
    /// First step restricted to axes `1..d-1`, later steps to all axes.
    FirstStepRestricted,
    Unrestricted,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GreedyPathReport {
    pub variant: GreedyVariant,
    pub start: Vec<i64>,
    /// Direction of every step.
    pub axes: Vec<usize>,
    /// `omega({x_n, x_{n+1}})` for `n = 0..=L`.
    pub conductances: Vec<f64>,
    pub running_max: Vec<f64>,
    pub record_times: Vec<usize>,
    /// `sum_{n=0}^{L} omega({x_n, x_{n+1}})^(-1/2)`
    pub inverse_sqrt_sum: f64,
}

impl GreedyPathReport {
    /// Vertex `x_n` of the path.
    pub fn vertex(&self, n: usize) -> Vec<i64> {
        let mut x = self.start.clone();
        for &a in &self.axes[..n] {
            x[a] += 1;
        }
        x
    }

    pub fn end(&self) -> Vec<i64> {
        self.vertex(self.axes.len())
    }
}

/// Nearest-neighbour path from `x0` that always steps along the axis of
/// largest forward conductance (ties to the smallest axis). It takes `L + 1`
/// steps so that the sum over `n = 0..=L` is available.
pub fn greedy_path<F: ConductanceField + ?Sized>(
    field: &F,
    x0: &[i64],
    l: usize,
    variant: GreedyVariant,
) -> Result<GreedyPathReport> {
    let d = field.dim();
    if x0.len() != d {
        return Err(Error::LengthMismatch {
            what: "start vertex",
            expected: d,
            got: x0.len(),
        });
    }
    if d < 2 && variant == GreedyVariant::FirstStepRestricted {
        return Err(Error::Precondition(
            "first-step-restricted paths need d >= 2".into(),
        ));
    }
    let steps = l + 1;
    let mut x = x0.to_vec();
    let mut axes = Vec::with_capacity(steps);
    let mut conductances = Vec::with_capacity(steps);
    for n in 0..steps {
        let allowed = if n == 0 && variant == GreedyVariant::FirstStepRestricted {
            d - 1
        } else {
            d
        };
        let mut best: Option<(usize, f64)> = None;
        for axis in 0..allowed {
            let w = field
                .forward_conductance(&x, axis)
                .ok_or(Error::PathExitsGraph {
                    step: n,
                    axis,
                    required: (x0[axis] as usize).saturating_add(steps + 1),
                })?;
            if best.is_none_or(|(_, bw)| w > bw) {
                best = Some((axis, w));
            }
        }
        let (axis, w) = best.expect("at least one axis");
        axes.push(axis);
        conductances.push(w);
        x[axis] += 1;
    }
    let records = record_stats(&conductances)?;
    let inverse_sqrt_sum = conductances.iter().map(|w| w.sqrt().recip()).sum();
    Ok(GreedyPathReport {
        variant,
        start: x0.to_vec(),
        axes,
        conductances,
        running_max: records.running_max,
        record_times: records.record_times,
        inverse_sqrt_sum,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecordStats {
    /// `M_n = max_{k <= n} values[k]`
    pub running_max: Vec<f64>,
    /// Indices where the running maximum strictly increases; starts at 0.
    pub record_times: Vec<usize>,
}

impl RecordStats {
    /// `N(L) = #{k : l_k <= L}`
    pub fn count_upto(&self, l: usize) -> usize {
        self.record_times.partition_point(|&t| t <= l)
    }
}

pub fn record_stats(values: &[f64]) -> Result<RecordStats> {
    let first = *values.first().ok_or(Error::Empty("record sequence"))?;
    let mut running_max = Vec::with_capacity(values.len());
    let mut record_times = vec![0];
    let mut m = first;
    running_max.push(m);
    for (j, &v) in values.iter().enumerate().skip(1) {
        if v > m {
            m = v;
            record_times.push(j);
        }
        running_max.push(m);
    }
    Ok(RecordStats {
        running_max,
        record_times,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathSumReport {
    /// `(L, sum_{n=0}^{L} omega_n^(-1/2))` on the requested grid.
    pub sums: Vec<(usize, f64)>,
    pub sum: f64,
    /// `1 - (d-1)/(2 alpha)`
    pub bound_exponent: f64,
    pub loglog_slope: f64,
}

/// Partial sums of `omega^(-1/2)` along a path's conductances on a grid of
/// `L` values, and their fitted log-log slope.
pub fn path_sum_check(
    conductances: &[f64],
    d: usize,
    alpha: f64,
    grid: &[usize],
) -> Result<PathSumReport> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidParameter(format!("alpha = {alpha} must be positive")));
    }
    if grid.len() < 2 {
        return Err(Error::Precondition("need at least two L values".into()));
    }
    if let Some(&l) = grid.iter().find(|&&l| l + 1 > conductances.len() || l == 0) {
        return Err(Error::Precondition(format!(
            "L = {l} outside the path (length {})",
            conductances.len()
        )));
    }
    let mut prefix = Vec::with_capacity(conductances.len());
    let mut acc = 0.0;
    for w in conductances {
        acc += w.sqrt().recip();
        prefix.push(acc);
    }
    let sums: Vec<(usize, f64)> = grid.iter().map(|&l| (l, prefix[l])).collect();
    let xs: Vec<f64> = sums.iter().map(|&(l, _)| l as f64).collect();
    let ys: Vec<f64> = sums.iter().map(|&(_, s)| s).collect();
    Ok(PathSumReport {
        sum: sums.last().unwrap().1,
        sums,
        bound_exponent: 1.0 - (d as f64 - 1.0) / (2.0 * alpha),
        loglog_slope: loglog_slope(&xs, &ys),
    })
}
