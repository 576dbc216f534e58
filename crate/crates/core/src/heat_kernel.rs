//! Heat kernels of the walk with generator `L`.
//!
//! Transients are computed by uniformization: with `Lambda = max mu/theta`
//! and the stochastic jump matrix `P = I + L/Lambda`,
//! `exp(tL) = sum_k e^{-Lambda t} (Lambda t)^k / k! P^k`. Truncating the
//! Poisson series leaves a nonnegative remainder whose mass is bounded in
//! closed form, so every result carries a certified error. Long horizons are
//! split into segments with `Lambda t <= 1000`.
//!
//! The module also provides an event-driven Monte Carlo walker, the
//! Carne-Varopoulos function `F(s)`, the tilted a-priori estimate and the
//! fitting and out-of-sample verification of Gaussian-type envelopes.

use rand::Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calculus::davies_tilt_h;
use crate::environment::{stream_rng, Environment, SpeedMeasure};
use crate::error::{Error, Result};
use crate::metric::MetricField;

/// Largest `Lambda * t` handled by one Poisson series.
pub const MAX_SEGMENT_RATE: f64 = 1e3;

/// Truncation orders beyond this are reported as unreachable.
pub const MAX_ORDER: usize = 1_000_000;

/// The stochastic matrix `P = I + L/Lambda` in compressed rows.
#[derive(Debug, Clone)]
pub struct JumpOperator {
    lambda: f64,
    diag: Vec<f64>,
    offsets: Vec<usize>,
    targets: Vec<usize>,
    rates: Vec<f64>,
    max_row: usize,
}

impl JumpOperator {
    pub fn new(env: &Environment, theta: &SpeedMeasure) -> Result<Self> {
        let graph = env.graph();
        graph.check_vertex_fn("speed measure", theta)?;
        let mu = env.mu();
        let q: Vec<f64> = mu.iter().zip(theta.values()).map(|(m, t)| m / t).collect();
        let lambda = q.iter().copied().fold(0.0, f64::max);
        let omega = env.conductances();
        let mut offsets = Vec::with_capacity(q.len() + 1);
        let mut targets = Vec::with_capacity(2 * graph.num_edges());
        let mut rates = Vec::with_capacity(2 * graph.num_edges());
        offsets.push(0);
        for x in 0..q.len() {
            for inc in graph.neighbors(x) {
                targets.push(inc.neighbor);
                rates.push(omega[inc.edge] / (theta.at(x) * lambda));
            }
            offsets.push(targets.len());
        }
        Ok(Self {
            lambda,
            diag: q.iter().map(|qx| 1.0 - qx / lambda).collect(),
            offsets,
            targets,
            rates,
            max_row: graph.max_degree() + 1,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    /// `out = P f`
    pub fn apply(&self, f: &[f64], out: &mut [f64]) {
        for (x, o) in out.iter_mut().enumerate() {
            let (a, b) = (self.offsets[x], self.offsets[x + 1]);
            let mut s = self.diag[x] * f[x];
            for k in a..b {
                s += self.rates[k] * f[self.targets[k]];
            }
            *o = s;
        }
    }

    /// `out = g P` (a row vector times `P`).
    pub fn apply_transpose(&self, g: &[f64], out: &mut [f64]) {
        for (o, (d, gy)) in out.iter_mut().zip(self.diag.iter().zip(g)) {
            *o = d * gy;
        }
        for (x, &gx) in g.iter().enumerate() {
            if gx != 0.0 {
                for k in self.offsets[x]..self.offsets[x + 1] {
                    out[self.targets[k]] += gx * self.rates[k];
                }
            }
        }
    }
}

/// Poisson weights `e^{-a} a^k / k!` for `k = 0..=K`, with `K` the smallest
/// order whose tail bound `w_{K+1} / (1 - a/(K+2))` falls below `target`.
/// Returns the weights and the tail bound.
///
/// The order is found in log space; the weights themselves come from the
/// ratio recurrence anchored at the mode and normalized over a range whose
/// remaining mass is below `e^-70`, which keeps their sum accurate to a few
/// ulps per term even for `a` near 1000.
pub fn poisson_weights(a: f64, target: f64) -> Result<(Vec<f64>, f64)> {
    if a == 0.0 {
        return Ok((vec![1.0], 0.0));
    }
    let order = |ln_target: f64| -> Result<(usize, f64)> {
        let ln_a = a.ln();
        let mut log_w = -a;
        let mut k = 0usize;
        loop {
            let next = log_w + ln_a - ((k + 1) as f64).ln();
            let denom = 1.0 - a / (k + 2) as f64;
            if denom > 0.0 {
                let log_bound = next - denom.ln();
                if log_bound < ln_target {
                    return Ok((k, log_bound));
                }
            }
            if k + 1 >= MAX_ORDER {
                return Err(Error::ToleranceUnreachable {
                    tol: target,
                    budget: MAX_ORDER,
                });
            }
            log_w = next;
            k += 1;
        }
    };
    let (k_max, log_bound) = order(target.ln())?;
    let (r, _) = order(target.ln().min(-70.0))?;
    let mode = (a.floor() as usize).min(r);
    let mut v = vec![0.0; r + 1];
    v[mode] = 1.0;
    for k in mode..r {
        v[k + 1] = v[k] * a / (k + 1) as f64;
    }
    for k in (1..=mode).rev() {
        v[k - 1] = v[k] * k as f64 / a;
    }
    let total: f64 = v.iter().sum();
    let weights = v[..=k_max].iter().map(|x| x / total).collect();
    // slack for the rounding of the log-space bound
    Ok((weights, log_bound.exp() * (1.0 + 1e-9) + (-70f64).exp()))
}

/// Result of evolving a vector through a time grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evolution {
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    pub lambda: f64,
    /// Largest truncation order used in any segment.
    pub order: usize,
    pub segments: usize,
    /// Certified bound on the discarded Poisson tail, in the sup norm of the
    /// backward solution or the total mass of the forward one.
    pub truncation_error: f64,
    /// Allowance for floating-point rounding in the series.
    pub rounding_allowance: f64,
}

impl Evolution {
    pub fn error_bound(&self) -> f64 {
        self.truncation_error + self.rounding_allowance
    }
}

fn check_times(times: &[f64]) -> Result<()> {
    if times.is_empty() {
        return Err(Error::Empty("time grid"));
    }
    let ok = times.iter().all(|t| t.is_finite() && *t >= 0.0)
        && times.windows(2).all(|w| w[0] <= w[1]);
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidTimeGrid)
    }
}

fn segment_count(lambda: f64, dt: f64) -> usize {
    if dt == 0.0 {
        0
    } else if lambda * dt > MAX_SEGMENT_RATE {
        (lambda * dt / MAX_SEGMENT_RATE).ceil() as usize
    } else {
        1
    }
}

fn evolve(
    op: &JumpOperator,
    init: Vec<f64>,
    times: &[f64],
    tol: f64,
    scale: f64,
    transpose: bool,
) -> Result<Evolution> {
    check_times(times)?;
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(Error::InvalidParameter(format!("tolerance {tol} must be positive")));
    }
    let lambda = op.lambda();
    let mut prev = 0.0;
    let plan: Vec<(f64, usize)> = times
        .iter()
        .map(|&t| {
            let dt = t - prev;
            prev = t;
            (dt, segment_count(lambda, dt))
        })
        .collect();
    let segments: usize = plan.iter().map(|p| p.1).sum();
    let seg_tol = tol / segments.max(1) as f64;

    let n = init.len();
    let mut u = init;
    let mut cur = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut acc = vec![0.0; n];
    let mut values = Vec::with_capacity(times.len());
    let mut order = 0;
    let mut truncation_error = 0.0;
    let mut rounding_allowance = 0.0;
    for &(dt, m) in &plan {
        for _ in 0..m {
            if scale == 0.0 {
                break;
            }
            let a = lambda * dt / m as f64;
            let (weights, tail) = poisson_weights(a, seg_tol / scale)?;
            let k_max = weights.len() - 1;
            order = order.max(k_max);
            truncation_error += tail * scale;
            rounding_allowance +=
                (k_max + 2) as f64 * (op.max_row + 2) as f64 * f64::EPSILON * scale;
            cur.copy_from_slice(&u);
            for (s, c) in acc.iter_mut().zip(&cur) {
                *s = weights[0] * c;
            }
            for w in &weights[1..] {
                if transpose {
                    op.apply_transpose(&cur, &mut next);
                } else {
                    op.apply(&cur, &mut next);
                }
                std::mem::swap(&mut cur, &mut next);
                for (s, c) in acc.iter_mut().zip(&cur) {
                    *s += w * c;
                }
            }
            std::mem::swap(&mut u, &mut acc);
        }
        values.push(u.clone());
    }
    Ok(Evolution {
        times: times.to_vec(),
        values,
        lambda,
        order,
        segments,
        truncation_error,
        rounding_allowance,
    })
}

/// Solves `d/dt u = L u`, `u(0) = f`, at every time of the grid.
pub fn solve_cauchy(
    env: &Environment,
    theta: &SpeedMeasure,
    f: &[f64],
    times: &[f64],
    tol: f64,
) -> Result<Evolution> {
    env.graph().check_vertex_fn("initial condition", f)?;
    let op = JumpOperator::new(env, theta)?;
    let scale = f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    evolve(&op, f.to_vec(), times, tol, scale, false)
}

/// Transition probabilities `P_{x0}[X_t = y]` on a time grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeatKernelField {
    pub source: usize,
    pub times: Vec<f64>,
    /// `probs[i][y] = P_{x0}[X_{t_i} = y]`
    pub probs: Vec<Vec<f64>>,
    pub theta: Vec<f64>,
    pub lambda: f64,
    pub order: usize,
    /// Certified bound on the total-variation error of every row.
    pub error: f64,
}

impl HeatKernelField {
    /// `p(t_i, x0, y) = P_{x0}[X_{t_i} = y] / theta(y)`
    #[inline]
    pub fn density(&self, i: usize, y: usize) -> f64 {
        self.probs[i][y] / self.theta[y]
    }

    pub fn mass(&self, i: usize) -> f64 {
        self.probs[i].iter().sum()
    }

    /// Writes `t,y,probability,density` rows.
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t,y,probability,density")?;
        for (i, t) in self.times.iter().enumerate() {
            for y in 0..self.theta.len() {
                writeln!(out, "{t:?},{y},{:?},{:?}", self.probs[i][y], self.density(i, y))?;
            }
        }
        Ok(())
    }
}

/// Evolves the point mass at `x0` forward in time.
pub fn heat_kernel_field(
    env: &Environment,
    theta: &SpeedMeasure,
    x0: usize,
    times: &[f64],
    tol: f64,
) -> Result<HeatKernelField> {
    env.graph().check_vertex(x0)?;
    let op = JumpOperator::new(env, theta)?;
    let mut init = vec![0.0; env.graph().num_vertices()];
    init[x0] = 1.0;
    let ev = evolve(&op, init, times, tol, 1.0, true)?;
    Ok(HeatKernelField {
        source: x0,
        error: ev.error_bound(),
        times: ev.times,
        probs: ev.values,
        theta: theta.values().to_vec(),
        lambda: ev.lambda,
        order: ev.order,
    })
}

/// Fields from every source, computed in parallel.
pub fn heat_kernel_all(
    env: &Environment,
    theta: &SpeedMeasure,
    times: &[f64],
    tol: f64,
) -> Result<Vec<HeatKernelField>> {
    (0..env.graph().num_vertices())
        .into_par_iter()
        .map(|x| heat_kernel_field(env, theta, x, times, tol))
        .collect()
}

/// Empirical occupation frequencies of independent walkers.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WalkerStats {
    pub source: usize,
    pub n_walkers: usize,
    pub seed: u64,
    pub times: Vec<f64>,
    pub counts: Vec<Vec<u64>>,
    pub frequencies: Vec<Vec<f64>>,
    /// `sqrt(f (1 - f) / n)` per cell.
    pub standard_errors: Vec<Vec<f64>>,
}

struct WalkTables {
    hold_rate: Vec<f64>,
    mu: Vec<f64>,
}

impl WalkTables {
    fn new(env: &Environment, theta: &SpeedMeasure) -> Self {
        let mu = env.mu();
        let hold_rate = mu.iter().zip(theta.values()).map(|(m, t)| m / t).collect();
        Self { hold_rate, mu }
    }

    fn next_vertex<R: Rng>(&self, env: &Environment, x: usize, rng: &mut R) -> usize {
        let omega = env.conductances();
        let nbrs = env.graph().neighbors(x);
        let mut u = rng.random::<f64>() * self.mu[x];
        for inc in &nbrs[..nbrs.len() - 1] {
            u -= omega[inc.edge];
            if u < 0.0 {
                return inc.neighbor;
            }
        }
        nbrs[nbrs.len() - 1].neighbor
    }
}

/// One jump of a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct JumpRecord {
    pub time: f64,
    pub from: usize,
    pub to: usize,
    /// Rate of the exponential holding time spent at `from`.
    pub holding_rate: f64,
}

/// A single trajectory up to `t_end`, drawn from stream `stream` of `seed`.
pub fn mc_trajectory(
    env: &Environment,
    theta: &SpeedMeasure,
    x0: usize,
    t_end: f64,
    seed: u64,
    stream: u64,
) -> Result<Vec<JumpRecord>> {
    env.graph().check_vertex(x0)?;
    env.graph().check_vertex_fn("speed measure", theta)?;
    let tables = WalkTables::new(env, theta);
    let mut rng = stream_rng(seed, stream);
    let mut x = x0;
    let mut clock = 0.0;
    let mut log = Vec::new();
    loop {
        let rate = tables.hold_rate[x];
        let hold: f64 = rng.sample::<f64, _>(Exp1) / rate;
        if clock + hold > t_end {
            return Ok(log);
        }
        clock += hold;
        let y = tables.next_vertex(env, x, &mut rng);
        log.push(JumpRecord {
            time: clock,
            from: x,
            to: y,
            holding_rate: rate,
        });
        x = y;
    }
}

/// Simulates `n_walkers` independent walks from `x0` and records their
/// positions at `observe_times` (all `<= t_end`). Walker `i` uses stream `i`
/// of `seed`, so results do not depend on the thread count.
pub fn mc_walk(
    env: &Environment,
    theta: &SpeedMeasure,
    x0: usize,
    t_end: f64,
    n_walkers: usize,
    seed: u64,
    observe_times: &[f64],
) -> Result<WalkerStats> {
    let graph = env.graph();
    graph.check_vertex(x0)?;
    graph.check_vertex_fn("speed measure", theta)?;
    if n_walkers == 0 {
        return Err(Error::InvalidParameter("at least one walker is required".into()));
    }
    let times: Vec<f64> = if observe_times.is_empty() {
        vec![t_end]
    } else {
        observe_times.to_vec()
    };
    check_times(&times)?;
    if times.last().is_some_and(|&t| t > t_end) {
        return Err(Error::InvalidParameter(format!(
            "observation time beyond t_end = {t_end}"
        )));
    }
    let tables = WalkTables::new(env, theta);
    let n = graph.num_vertices();
    let nt = times.len();
    let flat = (0..n_walkers)
        .into_par_iter()
        .fold(
            || vec![0u64; nt * n],
            |mut acc, w| {
                let mut rng = stream_rng(seed, w as u64);
                let mut x = x0;
                let mut clock = 0.0;
                let mut next_jump = clock + rng.sample::<f64, _>(Exp1) / tables.hold_rate[x];
                for (i, &t) in times.iter().enumerate() {
                    while next_jump <= t {
                        clock = next_jump;
                        x = tables.next_vertex(env, x, &mut rng);
                        next_jump = clock + rng.sample::<f64, _>(Exp1) / tables.hold_rate[x];
                    }
                    acc[i * n + x] += 1;
                }
                acc
            },
        )
        .reduce(
            || vec![0u64; nt * n],
            |mut a, b| {
                a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
                a
            },
        );
    let counts: Vec<Vec<u64>> = flat.chunks(n).map(|c| c.to_vec()).collect();
    let nw = n_walkers as f64;
    let frequencies: Vec<Vec<f64>> = counts
        .iter()
        .map(|row| row.iter().map(|&c| c as f64 / nw).collect())
        .collect();
    let standard_errors = frequencies
        .iter()
        .map(|row| row.iter().map(|f| (f * (1.0 - f) / nw).sqrt()).collect())
        .collect();
    Ok(WalkerStats {
        source: x0,
        n_walkers,
        seed,
        times,
        counts,
        frequencies,
        standard_errors,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McComparison {
    /// Cells with expected count at least the threshold.
    pub cells: usize,
    /// Cells where `|frequency - probability| <= 3 SE`.
    pub agree: usize,
    pub fraction: f64,
    pub worst_z: f64,
}

/// Compares walker frequencies with exact probabilities; the standard error
/// of a cell is `sqrt(p (1 - p) / n)` with `p` the exact probability.
pub fn compare_mc_exact(
    stats: &WalkerStats,
    field: &HeatKernelField,
    min_expected: f64,
) -> Result<McComparison> {
    if stats.times != field.times {
        return Err(Error::Precondition("walker and kernel time grids differ".into()));
    }
    let nw = stats.n_walkers as f64;
    let (mut cells, mut agree, mut worst_z) = (0, 0, 0.0f64);
    for (freqs, probs) in stats.frequencies.iter().zip(&field.probs) {
        for (f, &p) in freqs.iter().zip(probs) {
            if p * nw < min_expected {
                continue;
            }
            cells += 1;
            let se = (p * (1.0 - p) / nw).sqrt();
            let z = (f - p).abs() / se;
            worst_z = worst_z.max(z);
            if z <= 3.0 {
                agree += 1;
            }
        }
    }
    if cells == 0 {
        return Err(Error::Empty("cells above the expected-count threshold"));
    }
    Ok(McComparison {
        cells,
        agree,
        fraction: agree as f64 / cells as f64,
        worst_z,
    })
}

fn check_s(s: f64) -> Result<()> {
    if s > 0.0 && s.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("F(s) needs s > 0, got {s}")))
    }
}

/// `F(s) = inf_{lambda > 0} (-lambda + (cosh(lambda) - 1)/s)
///       = (sqrt(1+s^2) - 1)/s - asinh(s)`.
pub fn carne_f(s: f64) -> Result<f64> {
    check_s(s)?;
    let root = s.hypot(1.0);
    Ok(s / (root + 1.0) - s.asinh())
}

/// The defining infimum, minimized by golden-section search on `(0, 50]`.
pub fn carne_f_numeric(s: f64) -> Result<f64> {
    check_s(s)?;
    let g = |l: f64| -l + 2.0 * (0.5 * l).sinh().powi(2) / s;
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (0.0f64, 50.0f64);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut gc, mut gd) = (g(c), g(d));
    for _ in 0..200 {
        if b - a <= 1e-15 * (1.0 + c.abs()) {
            break;
        }
        if gc < gd {
            b = d;
            d = c;
            gd = gc;
            c = b - inv_phi * (b - a);
            gc = g(c);
        } else {
            a = c;
            c = d;
            gc = gd;
            d = a + inv_phi * (b - a);
            gd = g(d);
        }
    }
    Ok(g(c).min(g(d)).min(g(0.5 * (a + b))))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CarneBounds {
    pub s: f64,
    pub value: f64,
    /// `F(s) <= -s/20`, applicable when `s <= 3`.
    pub small_s: Option<bool>,
    /// `F(s) <= 1 - ln(2s)`, applicable when `s >= e`.
    pub large_s: Option<bool>,
}

impl CarneBounds {
    pub fn holds(&self) -> bool {
        self.small_s.unwrap_or(true) && self.large_s.unwrap_or(true)
    }
}

pub fn carne_f_bounds(s: f64) -> Result<CarneBounds> {
    let value = carne_f(s)?;
    Ok(CarneBounds {
        s,
        value,
        small_s: (s <= 3.0).then(|| value <= -s / 20.0),
        large_s: (s >= std::f64::consts::E).then(|| value <= 1.0 - (2.0 * s).ln()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AprioriReport {
    pub h: f64,
    /// `||phi f||_{2,theta}`
    pub initial_norm: f64,
    pub times: Vec<f64>,
    /// `e^{h t} ||phi f|| - ||phi u_t||` at each time.
    pub margins: Vec<f64>,
    pub solver_error: f64,
}

impl AprioriReport {
    pub fn min_relative_margin(&self) -> f64 {
        self.margins.iter().fold(f64::INFINITY, |m, v| m.min(*v)) / self.initial_norm
    }
}

fn theta_norm(v: &[f64], theta: &[f64]) -> f64 {
    v.iter().zip(theta).map(|(x, t)| x * x * t).sum::<f64>().sqrt()
}

/// Evaluates the tilted growth bound `||phi u_t|| <= e^{h(phi) t} ||phi f||`.
pub fn apriori_check(
    env: &Environment,
    theta: &SpeedMeasure,
    phi: &[f64],
    f: &[f64],
    times: &[f64],
    tol: f64,
) -> Result<AprioriReport> {
    let h = davies_tilt_h(env, theta, phi)?;
    let sol = solve_cauchy(env, theta, f, times, tol)?;
    let tilt = |u: &[f64]| -> Vec<f64> { u.iter().zip(phi).map(|(a, b)| a * b).collect() };
    let initial_norm = theta_norm(&tilt(f), theta);
    let margins = sol
        .times
        .iter()
        .zip(&sol.values)
        .map(|(t, u)| (h * t).exp() * initial_norm - theta_norm(&tilt(u), theta))
        .collect();
    Ok(AprioriReport {
        h,
        initial_norm,
        times: sol.times.clone(),
        margins,
        solver_error: sol.error_bound(),
    })
}

/// `psi(z) = -lambda min(d_theta(x,z), d_theta(x,y))` for the field rooted at `x`.
pub fn canonical_tilt(field: &MetricField, y: usize, lambda: f64) -> Vec<f64> {
    let cap = field.at(y);
    field
        .distances
        .iter()
        .map(|&d| -lambda * d.min(cap))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TiltScanRow {
    pub lambda: f64,
    pub h: f64,
    pub min_relative_margin: f64,
}

/// Runs the a-priori check for the canonical tilt at each `lambda`.
#[allow(clippy::too_many_arguments)]
pub fn tilt_scan(
    env: &Environment,
    theta: &SpeedMeasure,
    field: &MetricField,
    y: usize,
    f: &[f64],
    lambdas: &[f64],
    times: &[f64],
    tol: f64,
) -> Result<Vec<TiltScanRow>> {
    lambdas
        .iter()
        .map(|&lambda| {
            let phi: Vec<f64> = canonical_tilt(field, y, lambda)
                .into_iter()
                .map(f64::exp)
                .collect();
            let rep = apriori_check(env, theta, &phi, f, times, tol)?;
            Ok(TiltScanRow {
                lambda,
                h: rep.h,
                min_relative_margin: rep.min_relative_margin(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// `d_theta <= c1 t`: Gaussian decay.
    Near,
    /// `d_theta >= c5 t`: Poisson-type decay.
    Far,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Near => "near",
            Regime::Far => "far",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeParams {
    pub d: usize,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub c5: f64,
    pub gamma: f64,
}

impl EnvelopeParams {
    pub fn holds_regime(&self, regime: Regime, t: f64, d_intrinsic: f64) -> bool {
        match regime {
            Regime::Near => d_intrinsic <= self.c1 * t,
            Regime::Far => d_intrinsic >= self.c5 * t,
        }
    }

    /// The regime of `(t, d_intrinsic)`, preferring `Near` when both apply.
    pub fn classify(&self, t: f64, d_intrinsic: f64) -> Result<Regime> {
        if self.holds_regime(Regime::Near, t, d_intrinsic) {
            Ok(Regime::Near)
        } else if self.holds_regime(Regime::Far, t, d_intrinsic) {
            Ok(Regime::Far)
        } else {
            Err(Error::GapRegime {
                t,
                distance: d_intrinsic,
            })
        }
    }
}

fn far_exponent(t: f64, d_intrinsic: f64) -> f64 {
    d_intrinsic * (d_intrinsic / t).ln().max(1.0)
}

/// The envelope `c2 t^{-d/2} (1 + d/sqrt t)^gamma exp(-E)` with
/// `E = c3 d_theta^2 / t` (near) or `E = c4 d_theta (1 v ln(d_theta/t))` (far).
pub fn envelope_value(
    params: &EnvelopeParams,
    regime: Regime,
    t: f64,
    d_graph: f64,
    d_intrinsic: f64,
) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::InvalidParameter(format!("time {t} must be positive")));
    }
    if !params.holds_regime(regime, t, d_intrinsic) {
        let actual = params.classify(t, d_intrinsic)?;
        return Err(Error::RegimeMismatch {
            requested: regime.name(),
            actual: actual.name(),
            t,
            distance: d_intrinsic,
        });
    }
    let prefactor =
        params.c2 * t.powf(-(params.d as f64) / 2.0) * (1.0 + d_graph / t.sqrt()).powf(params.gamma);
    let exponent = match regime {
        Regime::Near => params.c3 * d_intrinsic * d_intrinsic / t,
        Regime::Far => params.c4 * far_exponent(t, d_intrinsic),
    };
    Ok(prefactor * (-exponent).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Split {
    /// Fit on vertices of the source's parity, test on the rest.
    Checkerboard,
    /// Independent fair coin per sample.
    Random { seed: u64 },
}

/// How the shape parameters `(rate, gamma)` are chosen; `c2` is always the
/// smallest constant keeping the envelope above the fit set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitObjective {
    /// Minimize the mean of `ln(envelope / p)` over the fit set.
    MeanLogGap,
    /// Minimize the maximum of `ln(envelope / p)` over the fit set.
    MaxLogGap,
    /// Minimize `c2`.
    MinPrefactor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub objective: FitObjective,
    pub c1: f64,
    pub c5: f64,
    pub split: Split,
    pub regimes: Vec<Regime>,
    /// Times below this are left out of both sets.
    pub t_min: f64,
    pub gamma_grid: Vec<f64>,
    pub rate_grid: Vec<f64>,
}

impl FitConfig {
    pub fn new(c1: f64, c5: f64, split: Split, regimes: Vec<Regime>) -> Self {
        Self {
            objective: FitObjective::MeanLogGap,
            c1,
            c5,
            split,
            regimes,
            t_min: 0.0,
            gamma_grid: (0..=80).map(|i| i as f64 * 0.05).collect(),
            rate_grid: std::iter::once(0.0)
                .chain(crate::stats::log_grid(1e-3, 4.0, 80))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnvelopeSample {
    /// `time_index * |V| + y`
    pub index: usize,
    pub t: f64,
    pub y: usize,
    pub d_graph: f64,
    pub d_intrinsic: f64,
    pub density: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegimeFit {
    pub regime: Regime,
    pub params: EnvelopeParams,
    pub fit_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    /// Mean of `ln(envelope / p)` over the fit set.
    pub mean_log_gap: f64,
    pub violations: Vec<EnvelopeSample>,
    /// `max p / envelope` over the test set.
    pub worst_test_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnvelopeReport {
    pub source: usize,
    pub config: FitConfig,
    pub fits: Vec<RegimeFit>,
    /// Samples in neither regime.
    pub gap_count: usize,
    /// Samples left out because the computed density is zero.
    pub unresolved: usize,
}

impl EnvelopeReport {
    pub fn total_violations(&self) -> usize {
        self.fits.iter().map(|f| f.violations.len()).sum()
    }
}

fn in_fit_set(split: Split, parity: bool, index: usize) -> bool {
    match split {
        Split::Checkerboard => parity,
        Split::Random { seed } => stream_rng(seed, index as u64).random::<bool>(),
    }
}

/// Fits `(c2, rate, gamma)` per requested regime on the fit half of the
/// `(t, y)` samples and checks the envelope on the held-out half.
///
/// For each `(rate, gamma)` on the grid, `c2` is the smallest value with
/// `envelope >= p` on the fit set; the pair scoring best under
/// `config.objective` wins.
pub fn envelope_fit_and_verify(
    field: &HeatKernelField,
    metric: &MetricField,
    graph_distances: &[usize],
    d: usize,
    config: &FitConfig,
) -> Result<EnvelopeReport> {
    if metric.source != field.source {
        return Err(Error::Precondition(format!(
            "metric rooted at {} but kernel at {}",
            metric.source, field.source
        )));
    }
    let n = field.theta.len();
    if metric.distances.len() != n || graph_distances.len() != n {
        return Err(Error::LengthMismatch {
            what: "distance field",
            expected: n,
            got: metric.distances.len().min(graph_distances.len()),
        });
    }
    let base = EnvelopeParams {
        d,
        c1: config.c1,
        c2: 1.0,
        c3: 0.0,
        c4: 0.0,
        c5: config.c5,
        gamma: 0.0,
    };
    let parity_of = |y: usize| graph_distances[y].is_multiple_of(2);
    let mut by_regime: Vec<(Vec<EnvelopeSample>, Vec<EnvelopeSample>)> =
        config.regimes.iter().map(|_| (Vec::new(), Vec::new())).collect();
    let (mut gap_count, mut unresolved) = (0, 0);
    for (i, &t) in field.times.iter().enumerate() {
        if t <= 0.0 || t < config.t_min {
            continue;
        }
        for y in 0..n {
            let density = field.density(i, y);
            let sample = EnvelopeSample {
                index: i * n + y,
                t,
                y,
                d_graph: graph_distances[y] as f64,
                d_intrinsic: metric.at(y),
                density,
            };
            let regime = match base.classify(t, sample.d_intrinsic) {
                Ok(_) => config
                    .regimes
                    .iter()
                    .position(|&r| base.holds_regime(r, t, sample.d_intrinsic)),
                Err(_) => {
                    gap_count += 1;
                    continue;
                }
            };
            let Some(slot) = regime else { continue };
            if !(density > 0.0) {
                unresolved += 1;
                continue;
            }
            let (fit, test) = &mut by_regime[slot];
            if in_fit_set(config.split, parity_of(y), sample.index) {
                fit.push(sample);
            } else {
                test.push(sample);
            }
        }
    }
    let fits = config
        .regimes
        .iter()
        .zip(by_regime)
        .map(|(&regime, (fit, test))| fit_regime(&base, regime, &fit, &test, config))
        .collect::<Result<Vec<_>>>()?;
    Ok(EnvelopeReport {
        source: field.source,
        config: config.clone(),
        fits,
        gap_count,
        unresolved,
    })
}

fn fit_regime(
    base: &EnvelopeParams,
    regime: Regime,
    fit: &[EnvelopeSample],
    test: &[EnvelopeSample],
    config: &FitConfig,
) -> Result<RegimeFit> {
    if fit.is_empty() || test.is_empty() {
        return Err(Error::Empty(match regime {
            Regime::Near => "near-regime samples in the fit or test set",
            Regime::Far => "far-regime samples in the fit or test set",
        }));
    }
    let half_d = base.d as f64 / 2.0;
    // ln(envelope/p) = ln c2 + gamma * lg - rate * q - lp
    let features = |s: &EnvelopeSample| {
        let lp = s.density.ln() + half_d * s.t.ln();
        let lg = (1.0 + s.d_graph / s.t.sqrt()).ln();
        let q = match regime {
            Regime::Near => s.d_intrinsic * s.d_intrinsic / s.t,
            Regime::Far => far_exponent(s.t, s.d_intrinsic),
        };
        (lp, lg, q)
    };
    let feats: Vec<(f64, f64, f64)> = fit.iter().map(features).collect();
    let m = feats.len() as f64;
    let mut best: Option<(f64, f64, f64, f64, f64)> = None;
    for &gamma in &config.gamma_grid {
        for &rate in &config.rate_grid {
            let mut ln_c2 = f64::NEG_INFINITY;
            let mut mean_rest = 0.0;
            let mut max_rest = f64::NEG_INFINITY;
            for &(lp, lg, q) in &feats {
                let rest = gamma * lg - rate * q - lp;
                ln_c2 = ln_c2.max(-rest);
                mean_rest += rest;
                max_rest = max_rest.max(rest);
            }
            let mean_gap = ln_c2 + mean_rest / m;
            let score = match config.objective {
                FitObjective::MeanLogGap => mean_gap,
                FitObjective::MaxLogGap => ln_c2 + max_rest,
                FitObjective::MinPrefactor => ln_c2,
            };
            if best.is_none_or(|b| score < b.0) {
                best = Some((score, ln_c2, rate, gamma, mean_gap));
            }
        }
    }
    let (_, ln_c2, rate, gamma, mean_log_gap) = best.ok_or(Error::Empty("fit grid"))?;
    let mut params = EnvelopeParams {
        c2: ln_c2.exp(),
        gamma,
        ..*base
    };
    match regime {
        Regime::Near => params.c3 = rate,
        Regime::Far => params.c4 = rate,
    }
    let mut violations = Vec::new();
    let mut worst_test_ratio = 0.0f64;
    for s in test {
        let env = envelope_value(&params, regime, s.t, s.d_graph, s.d_intrinsic)?;
        let ratio = s.density / env;
        worst_test_ratio = worst_test_ratio.max(ratio);
        if s.density > env {
            violations.push(*s);
        }
    }
    Ok(RegimeFit {
        regime,
        params,
        fit_indices: fit.iter().map(|s| s.index).collect(),
        test_indices: test.iter().map(|s| s.index).collect(),
        mean_log_gap,
        violations,
        worst_test_ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::{Distribution, EnvSpec};
    use crate::lattice::{Boundary, LatticeGraph};
    use crate::metric::intrinsic_distance_field;
    use crate::oracle::{dense_expm, two_state_transition};
    use std::sync::Arc;

    fn two_state(omega: f64) -> Environment {
        let g = Arc::new(LatticeGraph::new(1, &[2], Boundary::Box).unwrap());
        Environment::constant(g, omega).unwrap()
    }

    fn random_env(extents: &[usize], seed: u64) -> Environment {
        let g = Arc::new(LatticeGraph::new(extents.len(), extents, Boundary::Torus).unwrap());
        Environment::iid(g, Distribution::Pareto { alpha: 4.0, scale: 1.0 }, seed).unwrap()
    }

    #[test]
    fn two_state_closed_form() {
        let env = two_state(1.0);
        let theta = SpeedMeasure::vsrw(&env);
        let times = [0.0, 0.1, 1.0, 10.0];
        let sol = solve_cauchy(&env, &theta, &[1.0, 0.0], &times, 1e-10).unwrap();
        for (t, u) in times.iter().zip(&sol.values) {
            // u(t, v1) = P_{v1}[X_t = v0]
            assert!((u[1] - two_state_transition(1.0, *t)).abs() < 1e-10);
        }
        assert_eq!(sol.values[0], vec![1.0, 0.0]);
        assert!(sol.truncation_error <= 1e-10);
        let field = heat_kernel_field(&env, &theta, 0, &[1.0], 1e-10).unwrap();
        assert!((field.density(0, 1) - 0.4323323583816936).abs() < 1e-10);
    }

    #[test]
    fn constants_are_preserved() {
        let env = random_env(&[5, 5], 1);
        let theta = SpeedMeasure::vsrw(&env);
        let sol = solve_cauchy(&env, &theta, &[1.0; 25], &[0.5, 3.0], 1e-12).unwrap();
        for u in &sol.values {
            assert!(u.iter().all(|v| (v - 1.0).abs() <= sol.error_bound()));
        }
    }

    #[test]
    fn long_horizons_are_split() {
        let env = two_state(1.0);
        let theta = SpeedMeasure::vsrw(&env);
        let sol = solve_cauchy(&env, &theta, &[1.0, 0.0], &[4500.0], 1e-10).unwrap();
        assert_eq!(sol.segments, 5);
        assert!((sol.values[0][1] - 0.5).abs() < 1e-10);
    }

    #[test]
    fn grid_and_tolerance_errors() {
        let env = two_state(1.0);
        let theta = SpeedMeasure::vsrw(&env);
        let f = [1.0, 0.0];
        assert_eq!(
            solve_cauchy(&env, &theta, &f, &[1.0, 0.5], 1e-8),
            Err(Error::InvalidTimeGrid)
        );
        assert_eq!(
            solve_cauchy(&env, &theta, &f, &[-1.0], 1e-8),
            Err(Error::InvalidTimeGrid)
        );
        assert!(matches!(
            solve_cauchy(&env, &theta, &f, &[1.0], 0.0),
            Err(Error::InvalidParameter(_))
        ));
        assert!(matches!(
            poisson_weights(10.0, 0.0),
            Err(Error::ToleranceUnreachable { .. })
        ));
    }

    #[test]
    fn poisson_tail_bound_is_valid() {
        for a in [0.3, 5.0, 80.0, 999.0] {
            let (w, tail) = poisson_weights(a, 1e-12).unwrap();
            let head: f64 = w.iter().sum();
            assert!(tail < 1e-12);
            assert!((1.0 - head) <= tail + 1e-12);
        }
    }

    #[test]
    fn matches_dense_exponential() {
        let env = random_env(&[3, 3], 2);
        let theta = SpeedMeasure::custom(&env, (0..9).map(|i| 0.5 + i as f64 * 0.25).collect()).unwrap();
        let n = 9;
        let mut q = vec![0.0; n * n];
        for (e, w) in env.graph().edges().iter().zip(env.conductances()) {
            q[e.plus * n + e.minus] += w / theta.at(e.plus);
            q[e.minus * n + e.plus] += w / theta.at(e.minus);
            q[e.plus * n + e.plus] -= w / theta.at(e.plus);
            q[e.minus * n + e.minus] -= w / theta.at(e.minus);
        }
        let t = 0.7;
        let dense = dense_expm(&q, n, t);
        let field = heat_kernel_field(&env, &theta, 4, &[t], 1e-13).unwrap();
        for y in 0..n {
            assert!((field.probs[0][y] - dense[4 * n + y]).abs() < 1e-11);
        }
        let sol = solve_cauchy(&env, &theta, &(0..9).map(|i| i as f64).collect::<Vec<_>>(), &[t], 1e-13).unwrap();
        for x in 0..n {
            let expected: f64 = (0..n).map(|y| dense[x * n + y] * y as f64).sum();
            assert!((sol.values[0][x] - expected).abs() < 1e-10);
        }
    }

    #[test]
    fn reversibility_on_small_torus() {
        let env = random_env(&[4, 4], 3);
        let theta = SpeedMeasure::csrw(&env);
        let all = heat_kernel_all(&env, &theta, &[0.5, 2.0], 1e-12).unwrap();
        for i in 0..2 {
            for x in 0..16 {
                for y in 0..16 {
                    let tol = all[x].error * (1.0 / theta.at(x) + 1.0 / theta.at(y));
                    assert!((all[x].density(i, y) - all[y].density(i, x)).abs() <= tol);
                }
            }
        }
    }

    #[test]
    fn walkers_at_time_zero_stay_put() {
        let env = random_env(&[4, 4], 4);
        let theta = SpeedMeasure::vsrw(&env);
        let stats = mc_walk(&env, &theta, 5, 0.0, 1000, 1, &[]).unwrap();
        assert_eq!(stats.counts[0][5], 1000);
        assert!(mc_walk(&env, &theta, 5, 1.0, 0, 1, &[]).is_err());
        assert!(mc_walk(&env, &theta, 5, 1.0, 10, 1, &[2.0]).is_err());
    }

    #[test]
    fn walkers_are_reproducible_and_normalized() {
        let env = random_env(&[4, 4], 5);
        let theta = SpeedMeasure::vsrw(&env);
        let a = mc_walk(&env, &theta, 0, 2.0, 5000, 9, &[1.0, 2.0]).unwrap();
        let b = mc_walk(&env, &theta, 0, 2.0, 5000, 9, &[1.0, 2.0]).unwrap();
        assert_eq!(a, b);
        for row in &a.frequencies {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn csrw_holds_at_unit_rate() {
        let env = random_env(&[6, 6], 6);
        let theta = SpeedMeasure::csrw(&env);
        let log = mc_trajectory(&env, &theta, 0, 200.0, 3, 0).unwrap();
        assert!(log.len() > 50);
        assert!(log.iter().all(|j| j.holding_rate == 1.0));
        assert!(log.windows(2).all(|w| w[0].to == w[1].from && w[0].time < w[1].time));
    }

    #[test]
    fn carne_values() {
        let f1 = carne_f(1.0).unwrap();
        let expected = (2f64.sqrt() - 1.0) - (1.0 + 2f64.sqrt()).ln();
        assert!((f1 - expected).abs() < 1e-15);
        assert!((f1 + 0.467160).abs() < 1e-6);
        assert!((carne_f_numeric(1.0).unwrap() - f1).abs() < 1e-10);
        for s in [0.1, 0.5, 1.0, 2.0, 3.0] {
            assert_eq!(carne_f_bounds(s).unwrap().small_s, Some(true));
        }
        let tiny = carne_f(1e-4).unwrap();
        assert!(tiny < 0.0 && tiny > -1e-3);
        assert!(carne_f(0.0).is_err() && carne_f_numeric(-1.0).is_err());
    }

    #[test]
    fn apriori_margins() {
        let env = random_env(&[4, 4], 7);
        let theta = SpeedMeasure::vsrw(&env);
        let f: Vec<f64> = (0..16).map(|i| (i % 3) as f64).collect();
        let rep = apriori_check(&env, &theta, &[1.0; 16], &f, &[0.0, 1.0, 4.0], 1e-12).unwrap();
        assert_eq!(rep.h, 0.0);
        assert_eq!(rep.margins[0], 0.0);
        assert!(rep.margins.iter().all(|&m| m >= -1e-10));
        let field = intrinsic_distance_field(&env, &theta, 0).unwrap();
        let scan = tilt_scan(&env, &theta, &field, 10, &f, &[0.5, 1.0], &[0.0, 2.0], 1e-12).unwrap();
        assert!(scan.iter().all(|r| r.min_relative_margin >= -1e-10 && r.h > 0.0));
    }

    #[test]
    fn canonical_tilt_is_lipschitz() {
        let env = random_env(&[5, 5], 8);
        let theta = SpeedMeasure::vsrw(&env);
        let field = intrinsic_distance_field(&env, &theta, 0).unwrap();
        let psi = canonical_tilt(&field, 12, 1.0);
        let rep = crate::metric::certify_feasible(&env, &theta, &psi, 1e-12).unwrap();
        assert!(rep.feasible);
        assert!(psi.iter().all(|&p| p >= -field.at(12) - 1e-12));
    }

    fn params() -> EnvelopeParams {
        EnvelopeParams {
            d: 2,
            c1: 1.0,
            c2: 3.0,
            c3: 0.2,
            c4: 0.5,
            c5: 2.0,
            gamma: 1.5,
        }
    }

    #[test]
    fn envelope_examples() {
        let p = params();
        let v = envelope_value(&p, Regime::Near, 4.0, 6.0, 0.0).unwrap();
        assert!((v - 3.0 / 4.0 * 4f64.powf(1.5)).abs() < 1e-12);
        let doubled = EnvelopeParams { c2: 6.0, ..p };
        let w = envelope_value(&doubled, Regime::Near, 4.0, 6.0, 2.0).unwrap();
        assert!((w - 2.0 * envelope_value(&p, Regime::Near, 4.0, 6.0, 2.0).unwrap()).abs() < 1e-12);
        assert_eq!(
            envelope_value(&p, Regime::Near, 1.0, 1.5, 1.5),
            Err(Error::GapRegime { t: 1.0, distance: 1.5 })
        );
        assert!(matches!(
            envelope_value(&p, Regime::Far, 4.0, 2.0, 1.0),
            Err(Error::RegimeMismatch { actual: "near", .. })
        ));
        let t = 2.0;
        let mut last = f64::INFINITY;
        for k in 0..50 {
            let d = std::f64::consts::E * t + k as f64 * 0.3;
            let v = envelope_value(&p, Regime::Far, t, 10.0, d).unwrap();
            assert!(v <= last);
            last = v;
        }
    }

    #[test]
    fn envelope_fit_on_small_torus() {
        let g = Arc::new(LatticeGraph::new(2, &[16, 16], Boundary::Torus).unwrap());
        let env = Environment::from_spec(
            g.clone(),
            &EnvSpec::Iid { dist: Distribution::Uniform { a: 1.0, b: 2.0 }, seed: 1 },
        )
        .unwrap();
        let theta = SpeedMeasure::vsrw(&env);
        let times = [1.0, 2.0, 4.0];
        let field = heat_kernel_field(&env, &theta, 0, &times, 1e-14).unwrap();
        let metric = intrinsic_distance_field(&env, &theta, 0).unwrap();
        let hops = g.bfs_distances(0).unwrap();
        let cfg = FitConfig::new(0.5, 2.0, Split::Checkerboard, vec![Regime::Near, Regime::Far]);
        let rep = envelope_fit_and_verify(&field, &metric, &hops, 2, &cfg).unwrap();
        for fit in &rep.fits {
            assert!(fit.fit_indices.iter().all(|i| !fit.test_indices.contains(i)));
            assert!(fit.params.c2 > 0.0);
        }
        let again = envelope_fit_and_verify(&field, &metric, &hops, 2, &cfg).unwrap();
        assert_eq!(rep, again);
        let bad = FitConfig::new(0.0, 1e9, Split::Checkerboard, vec![Regime::Far]);
        assert!(matches!(
            envelope_fit_and_verify(&field, &metric, &hops, 2, &bad),
            Err(Error::Empty(_))
        ));
    }
}
