//! Discrete calculus on a weighted lattice: gradient and its adjoint, the
//! carré du champ, the Dirichlet form, the generator `L_theta` and its tilted
//! version, the Davies functional `h_theta(phi)`, and the averaged norms used
//! by the integrability assumption.
//!
//! Vertex functions are plain slices indexed by vertex; edge functions are
//! [`EdgeField`]s indexed by edge id with the graph's fixed orientation.

use std::fmt;
use std::ops::Deref;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::environment::{Environment, SpeedMeasure};
use crate::error::{Error, Result};
use crate::lattice::LatticeGraph;

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeField(pub Vec<f64>);

impl Deref for EdgeField {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Exponent in `[1, inf]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Exponent {
    Finite(f64),
    Infinity,
}

impl Exponent {
    pub fn new(p: f64) -> Self {
        if p.is_infinite() {
            Exponent::Infinity
        } else {
            Exponent::Finite(p)
        }
    }

    /// `1/p` with `1/inf = 0`.
    pub fn reciprocal(self) -> f64 {
        match self {
            Exponent::Finite(p) => 1.0 / p,
            Exponent::Infinity => 0.0,
        }
    }

    pub fn value(self) -> f64 {
        match self {
            Exponent::Finite(p) => p,
            Exponent::Infinity => f64::INFINITY,
        }
    }
}

impl fmt::Display for Exponent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Exponent::Finite(p) => write!(f, "{p}"),
            Exponent::Infinity => f.write_str("inf"),
        }
    }
}

impl Serialize for Exponent {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Exponent::Finite(p) => s.serialize_f64(*p),
            Exponent::Infinity => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Exponent {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(p) => Ok(Exponent::new(p)),
            Raw::Text(t) if matches!(t.as_str(), "inf" | "infinity" | "Infinity") => {
                Ok(Exponent::Infinity)
            }
            Raw::Text(t) => Err(serde::de::Error::custom(format!("bad exponent {t:?}"))),
        }
    }
}

/// `nabla f(e) = f(e+) - f(e-)`
pub fn gradient(graph: &LatticeGraph, f: &[f64]) -> Result<EdgeField> {
    graph.check_vertex_fn("vertex function", f)?;
    Ok(EdgeField(
        graph.edges().iter().map(|e| f[e.plus] - f[e.minus]).collect(),
    ))
}

/// Adjoint of [`gradient`] for counting measure on vertices and edges.
pub fn adjoint(graph: &LatticeGraph, field: &[f64]) -> Result<Vec<f64>> {
    graph.check_len("edge field", field.len(), graph.num_edges())?;
    let mut out = vec![0.0; graph.num_vertices()];
    for (e, &v) in graph.edges().iter().zip(field) {
        out[e.plus] += v;
        out[e.minus] -= v;
    }
    Ok(out)
}

/// `(f)_avg(e) = (f(e+) + f(e-)) / 2`
pub fn edge_average(graph: &LatticeGraph, f: &[f64]) -> Result<EdgeField> {
    graph.check_vertex_fn("vertex function", f)?;
    Ok(EdgeField(
        graph
            .edges()
            .iter()
            .map(|e| 0.5 * (f[e.plus] + f[e.minus]))
            .collect(),
    ))
}

/// `dGamma(f,g) = omega * nabla f * nabla g`, edgewise.
pub fn carre_du_champ(env: &Environment, f: &[f64], g: &[f64]) -> Result<EdgeField> {
    let graph = env.graph();
    graph.check_vertex_fn("f", f)?;
    graph.check_vertex_fn("g", g)?;
    Ok(EdgeField(
        graph
            .edges()
            .iter()
            .zip(env.conductances())
            .map(|(e, &w)| w * (f[e.plus] - f[e.minus]) * (g[e.plus] - g[e.minus]))
            .collect(),
    ))
}

/// `E(f,g) = <nabla f, omega nabla g>_E`
pub fn dirichlet_form(env: &Environment, f: &[f64], g: &[f64]) -> Result<f64> {
    Ok(carre_du_champ(env, f, g)?.iter().sum())
}

/// `(L f)(x) = theta(x)^-1 sum_{y~x} omega(x,y) (f(y) - f(x))`
pub fn generator_apply(env: &Environment, theta: &SpeedMeasure, f: &[f64]) -> Result<Vec<f64>> {
    let graph = env.graph();
    graph.check_vertex_fn("f", f)?;
    graph.check_vertex_fn("speed measure", theta)?;
    let mut out = vec![0.0; f.len()];
    generator_apply_into(env, theta, f, &mut out);
    Ok(out)
}

pub(crate) fn generator_apply_into(env: &Environment, theta: &[f64], f: &[f64], out: &mut [f64]) {
    let graph = env.graph();
    let omega = env.conductances();
    for (x, o) in out.iter_mut().enumerate() {
        let fx = f[x];
        let s: f64 = graph
            .neighbors(x)
            .iter()
            .map(|inc| omega[inc.edge] * (f[inc.neighbor] - fx))
            .sum();
        *o = s / theta[x];
    }
}

fn check_positive(what: &'static str, f: &[f64]) -> Result<()> {
    match f
        .iter()
        .enumerate()
        .find(|(_, &v)| !(v > 0.0 && v.is_finite()))
    {
        Some((index, value)) => Err(Error::Precondition(format!(
            "{what} must be positive: value {value} at {index}"
        ))),
        None => Ok(()),
    }
}

/// `(L_phi g)(x) = phi(x) (L (g / phi))(x)`
pub fn tilted_generator_apply(
    env: &Environment,
    theta: &SpeedMeasure,
    phi: &[f64],
    g: &[f64],
) -> Result<Vec<f64>> {
    env.graph().check_vertex_fn("phi", phi)?;
    env.graph().check_vertex_fn("g", g)?;
    check_positive("phi", phi)?;
    let graph = env.graph();
    let omega = env.conductances();
    Ok((0..graph.num_vertices())
        .map(|x| {
            let base = g[x] / phi[x];
            let s: f64 = graph
                .neighbors(x)
                .iter()
                .map(|inc| omega[inc.edge] * (g[inc.neighbor] / phi[inc.neighbor] - base))
                .sum();
            phi[x] * s / theta.at(x)
        })
        .collect())
}

/// `h(phi) = max_x (2 theta(x))^-1 sum_{y~x} |dGamma(phi, 1/phi)({x,y})|`
pub fn davies_tilt_h(env: &Environment, theta: &SpeedMeasure, phi: &[f64]) -> Result<f64> {
    env.graph().check_vertex_fn("phi", phi)?;
    check_positive("phi", phi)?;
    let inv: Vec<f64> = phi.iter().map(|p| 1.0 / p).collect();
    let gamma = carre_du_champ(env, phi, &inv)?;
    let graph = env.graph();
    Ok((0..graph.num_vertices())
        .map(|x| {
            let s: f64 = graph
                .neighbors(x)
                .iter()
                .map(|inc| gamma[inc.edge].abs())
                .sum();
            s / (2.0 * theta.at(x))
        })
        .fold(0.0, f64::max))
}

/// `h(e^psi) = max_x sum_{y~x} omega(x,y)/theta(x) (cosh(nabla psi) - 1)`,
/// evaluated with `cosh(a) - 1 = 2 sinh(a/2)^2`.
pub fn davies_tilt_h_exp(env: &Environment, theta: &SpeedMeasure, psi: &[f64]) -> Result<f64> {
    let graph = env.graph();
    graph.check_vertex_fn("psi", psi)?;
    let omega = env.conductances();
    Ok((0..graph.num_vertices())
        .map(|x| {
            let s: f64 = graph
                .neighbors(x)
                .iter()
                .map(|inc| {
                    let half = 0.5 * (psi[x] - psi[inc.neighbor]);
                    omega[inc.edge] * 2.0 * half.sinh().powi(2)
                })
                .sum();
            s / theta.at(x)
        })
        .fold(0.0, f64::max))
}

/// `||f||_{p,B,phi} = (|B|^-1 sum_{x in B} |f|^p phi)^{1/p}`; for `p = inf`
/// the maximum of `|f|` over `B`, ignoring `phi`.
pub fn weighted_norm(f: &[f64], p: Exponent, ball: &[usize], phi: Option<&[f64]>) -> Result<f64> {
    if ball.is_empty() {
        return Err(Error::Empty("norm over an empty vertex set"));
    }
    match p {
        Exponent::Infinity => Ok(ball.iter().map(|&x| f[x].abs()).fold(0.0, f64::max)),
        Exponent::Finite(p) => {
            if !(p >= 1.0) {
                return Err(Error::InvalidParameter(format!("norm exponent {p} < 1")));
            }
            let sum: f64 = match phi {
                Some(w) => ball.iter().map(|&x| f[x].abs().powf(p) * w[x]).sum(),
                None => ball.iter().map(|&x| f[x].abs().powf(p)).sum(),
            };
            Ok((sum / ball.len() as f64).powf(1.0 / p))
        }
    }
}

/// Time samples of a space-time function on a common grid.
#[derive(Debug, Clone, Copy)]
pub struct TimeSeries<'a> {
    pub times: &'a [f64],
    pub values: &'a [Vec<f64>],
}

/// Space-time averaged norm over `I x B`: the time integral uses the
/// trapezoid rule on the sample grid (with linear interpolation of the
/// integrand at interval ends that fall between samples); `p' = inf` takes
/// the supremum over grid points in `I`.
pub fn spacetime_norm(
    u: TimeSeries<'_>,
    p: Exponent,
    p_time: Exponent,
    interval: (f64, f64),
    ball: &[usize],
    theta: Option<&[f64]>,
) -> Result<f64> {
    let (a, b) = interval;
    let times = u.times;
    if times.is_empty() || times.len() != u.values.len() {
        return Err(Error::InvalidTimeGrid);
    }
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidTimeGrid);
    }
    if !(b > a) || a < times[0] || b > *times.last().unwrap() {
        return Err(Error::GridDoesNotCover {
            start: a,
            end: b,
            grid_start: times[0],
            grid_end: *times.last().unwrap(),
        });
    }
    let norms: Vec<f64> = u
        .values
        .iter()
        .map(|ut| weighted_norm(ut, p, ball, theta))
        .collect::<Result<_>>()?;

    match p_time {
        Exponent::Infinity => {
            let mut sup = 0.0f64;
            for (i, &t) in times.iter().enumerate() {
                if t >= a && t <= b {
                    sup = sup.max(norms[i]);
                }
            }
            Ok(sup)
        }
        Exponent::Finite(q) => {
            let g: Vec<f64> = norms.iter().map(|n| n.powf(q)).collect();
            let interp = |t: f64| -> f64 {
                let k = times.partition_point(|&s| s <= t).clamp(1, times.len() - 1);
                let (t0, t1) = (times[k - 1], times[k]);
                let w = (t - t0) / (t1 - t0);
                g[k - 1] * (1.0 - w) + g[k] * w
            };
            let mut knots = vec![(a, interp(a))];
            for (i, &t) in times.iter().enumerate() {
                if t > a && t < b {
                    knots.push((t, g[i]));
                }
            }
            knots.push((b, interp(b)));
            let integral: f64 = knots
                .windows(2)
                .map(|w| 0.5 * (w[1].0 - w[0].0) * (w[0].1 + w[1].1))
                .sum();
            Ok((integral / (b - a)).powf(1.0 / q))
        }
    }
}

/// Exponents `p, q, r` and the Sobolev dimension `d'`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormSpec {
    pub p: Exponent,
    pub q: Exponent,
    pub r: Exponent,
    pub d_prime: f64,
}

impl NormSpec {
    pub fn new(p: f64, q: f64, r: f64, d_prime: f64) -> Result<Self> {
        let spec = Self {
            p: Exponent::new(p),
            q: Exponent::new(q),
            r: Exponent::new(r),
            d_prime,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, e) in [("p", self.p), ("q", self.q), ("r", self.r)] {
            if let Exponent::Finite(v) = e {
                if !(v > 1.0) {
                    return Err(Error::InvalidParameter(format!(
                        "{name} = {v} must lie in (1, inf]"
                    )));
                }
            }
        }
        if !(self.d_prime >= 2.0) {
            return Err(Error::InvalidParameter(format!(
                "d' = {} must be >= 2",
                self.d_prime
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CondPqr {
    pub holds: bool,
    pub lhs: f64,
    pub rhs: f64,
}

/// `1/r + (1/p)(r-1)/r + 1/q < 2/d'`
pub fn cond_pqr(spec: &NormSpec) -> CondPqr {
    let inv_r = spec.r.reciprocal();
    let lhs = inv_r + spec.p.reciprocal() * (1.0 - inv_r) + spec.q.reciprocal();
    let rhs = 2.0 / spec.d_prime;
    CondPqr {
        holds: lhs < rhs,
        lhs,
        rhs,
    }
}

/// The four norm factors of the integrability assumption on `B(x, n)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionReport {
    pub center: usize,
    pub radius: usize,
    pub spec: NormSpec,
    /// `||1 v mu/theta||_{p,B,theta}`
    pub mu_factor: f64,
    /// `||1 v nu||_{q,B}`
    pub nu_factor: f64,
    /// `||1 v theta||_{r,B}`
    pub theta_factor: f64,
    /// `||1 v 1/theta||_{q,B}`
    pub inv_theta_factor: f64,
    pub product: f64,
    pub c_int: f64,
    pub cond_pqr: CondPqr,
    pub clipped: bool,
    pub pass: bool,
    /// User-supplied radius thresholds `N1..N4`.
    pub thresholds: [usize; 4],
}

impl AssumptionReport {
    pub fn recomputed_product(&self) -> f64 {
        self.mu_factor * self.nu_factor * self.theta_factor * self.inv_theta_factor
    }
}

pub fn integrability_product(
    env: &Environment,
    theta: &SpeedMeasure,
    x: usize,
    n: usize,
    spec: &NormSpec,
    c_int: f64,
    thresholds: [usize; 4],
) -> Result<AssumptionReport> {
    spec.validate()?;
    if !(c_int >= 1.0) {
        return Err(Error::InvalidParameter(format!("C_int = {c_int} must be >= 1")));
    }
    let ball = env.graph().ball(x, n)?;
    let (mu, nu) = (env.mu(), env.nu());
    let th = theta.values();
    let floor = |v: f64| v.max(1.0);
    let m: Vec<f64> = mu.iter().zip(th).map(|(m, t)| floor(m / t)).collect();
    let nu1: Vec<f64> = nu.iter().map(|&v| floor(v)).collect();
    let th1: Vec<f64> = th.iter().map(|&v| floor(v)).collect();
    let inv1: Vec<f64> = th.iter().map(|&v| floor(1.0 / v)).collect();

    let mu_factor = weighted_norm(&m, spec.p, &ball.vertices, Some(th))?;
    let nu_factor = weighted_norm(&nu1, spec.q, &ball.vertices, None)?;
    let theta_factor = weighted_norm(&th1, spec.r, &ball.vertices, None)?;
    let inv_theta_factor = weighted_norm(&inv1, spec.q, &ball.vertices, None)?;
    let product = mu_factor * nu_factor * theta_factor * inv_theta_factor;
    Ok(AssumptionReport {
        center: x,
        radius: n,
        spec: *spec,
        mu_factor,
        nu_factor,
        theta_factor,
        inv_theta_factor,
        product,
        c_int,
        cond_pqr: cond_pqr(spec),
        clipped: ball.clipped,
        pass: product <= c_int,
        thresholds,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MpPoint {
    pub radius: usize,
    pub value: f64,
    pub clipped: bool,
}

/// Finite-radius proxies `||1 v mu/theta||_{p,B(x,n)}` (unweighted) for each
/// requested radius.
pub fn m_p_statistic(
    env: &Environment,
    theta: &SpeedMeasure,
    x: usize,
    radii: &[usize],
    p: f64,
) -> Result<Vec<MpPoint>> {
    if !(p >= 1.0) {
        return Err(Error::InvalidParameter(format!("p = {p} must be >= 1")));
    }
    let graph = env.graph();
    graph.check_vertex(x)?;
    let mu = env.mu();
    let m: Vec<f64> = mu.iter().zip(theta.values()).map(|(m, t)| (m / t).max(1.0)).collect();
    let dist = graph.bfs_distances(x)?;
    let mut order: Vec<usize> = (0..graph.num_vertices()).collect();
    order.sort_by_key(|&v| dist[v]);
    radii
        .iter()
        .map(|&r| {
            let end = order.partition_point(|&v| dist[v] <= r);
            let value = weighted_norm(&m, Exponent::new(p), &order[..end], None)?;
            Ok(MpPoint {
                radius: r,
                value,
                clipped: graph.ball_clipped(x, r),
            })
        })
        .collect()
}
