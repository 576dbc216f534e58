//! Conductance fields, the vertex measures `mu` and `nu`, and speed measures.
//!
//! Random fields are drawn from addressable ChaCha streams: an i.i.d. field
//! uses one stream per edge index, a layered field one stream per line. A
//! draw therefore never depends on the order in which edges are visited,
//! which is what lets [`LayeredField`] evaluate the same environment lazily
//! on all of `Z^d`.

use std::io::{BufRead, Write};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, LogNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::LatticeGraph;

/// Law of a single i.i.d. conductance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distribution {
    /// `P[Y > r] = (r/scale)^(-alpha)` for `r >= scale`.
    Pareto { alpha: f64, scale: f64 },
    Uniform { a: f64, b: f64 },
    /// `exp(N(m, s^2))`
    Lognormal { m: f64, s: f64 },
}

impl Distribution {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Distribution::Pareto { alpha, scale } => {
                alpha > 0.0 && scale > 0.0 && alpha.is_finite() && scale.is_finite()
            }
            Distribution::Uniform { a, b } => a > 0.0 && b >= a && b.is_finite(),
            Distribution::Lognormal { m, s } => m.is_finite() && s >= 0.0 && s.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "invalid conductance law {self:?}"
            )))
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            Distribution::Pareto { alpha, scale } => pareto_inverse(open_unit(rng), alpha, scale),
            Distribution::Uniform { a, b } => a + (b - a) * rng.random::<f64>(),
            Distribution::Lognormal { m, s } => LogNormal::new(m, s)
                .expect("validated lognormal parameters")
                .sample(rng),
        }
    }

    /// Analytic mean, when finite.
    pub fn mean(&self) -> Option<f64> {
        match *self {
            Distribution::Pareto { alpha, scale } if alpha > 1.0 => {
                Some(alpha * scale / (alpha - 1.0))
            }
            Distribution::Pareto { .. } => None,
            Distribution::Uniform { a, b } => Some(0.5 * (a + b)),
            Distribution::Lognormal { m, s } => Some((m + 0.5 * s * s).exp()),
        }
    }
}

/// Uniform draw on `(0, 1]`.
#[inline]
fn open_unit<R: Rng>(rng: &mut R) -> f64 {
    1.0 - rng.random::<f64>()
}

/// Inverse-transform Pareto: `u in (0,1]` maps to `scale * u^(-1/alpha)`.
#[inline]
pub fn pareto_inverse(u: f64, alpha: f64, scale: f64) -> f64 {
    scale * u.powf(-1.0 / alpha)
}

/// Independent ChaCha stream `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream key of the line in direction `axis` through `x` (key ignores `x[axis]`).
fn line_key(axis: usize, x: &[i64]) -> u64 {
    let mut h = splitmix(axis as u64 ^ 0x6c61_7965_7265_6400);
    for (i, &c) in x.iter().enumerate() {
        if i != axis {
            h = splitmix(h ^ c as u64);
        }
    }
    h
}

/// Parameters of the layered environment: one heavy-tailed value per line,
/// `Y ~ 1 v Pareto(alpha0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayeredSpec {
    pub alpha0: f64,
    pub seed: u64,
}

impl LayeredSpec {
    pub fn validate(&self) -> Result<()> {
        if self.alpha0 > 0.0 && self.alpha0.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "alpha0 must be positive, got {}",
                self.alpha0
            )))
        }
    }
}

/// Layered environment evaluated lazily on the whole of `Z^d`.
///
/// The edge `{x, x + e_i}` carries `Y(i, x with coordinate i removed)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayeredField {
    pub d: usize,
    pub spec: LayeredSpec,
}

impl LayeredField {
    pub fn new(d: usize, spec: LayeredSpec) -> Result<Self> {
        spec.validate()?;
        if d < 2 {
            return Err(Error::Precondition(
                "layered environments need d >= 2".into(),
            ));
        }
        Ok(Self { d, spec })
    }

    /// Conductance of the edge `{x, x + e_axis}`.
    pub fn line_value(&self, axis: usize, x: &[i64]) -> f64 {
        let mut rng = stream_rng(self.spec.seed, line_key(axis, x));
        pareto_inverse(open_unit(&mut rng), self.spec.alpha0, 1.0).max(1.0)
    }
}

/// How a conductance field was produced. Together with the graph spec this
/// determines the field bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EnvSpec {
    Constant { value: f64 },
    Iid { dist: Distribution, seed: u64 },
    Layered { alpha0: f64, seed: u64 },
    /// Loaded from an edge CSV; `source` is informational.
    Imported { source: String },
}

impl EnvSpec {
    pub fn seed(&self) -> Option<u64> {
        match self {
            EnvSpec::Iid { seed, .. } | EnvSpec::Layered { seed, .. } => Some(*seed),
            _ => None,
        }
    }

    pub fn with_seed(&self, seed: u64) -> EnvSpec {
        match self.clone() {
            EnvSpec::Iid { dist, .. } => EnvSpec::Iid { dist, seed },
            EnvSpec::Layered { alpha0, .. } => EnvSpec::Layered { alpha0, seed },
            other => other,
        }
    }
}

/// Positive conductances on the edges of a lattice.
#[derive(Debug, Clone)]
pub struct Environment {
    graph: Arc<LatticeGraph>,
    omega: Vec<f64>,
    spec: EnvSpec,
}

impl Environment {
    pub fn from_spec(graph: Arc<LatticeGraph>, spec: &EnvSpec) -> Result<Self> {
        match spec {
            EnvSpec::Constant { value } => Self::constant(graph, *value),
            EnvSpec::Iid { dist, seed } => Self::iid(graph, *dist, *seed),
            EnvSpec::Layered { alpha0, seed } => Self::layered(
                graph,
                LayeredSpec {
                    alpha0: *alpha0,
                    seed: *seed,
                },
            ),
            EnvSpec::Imported { .. } => Err(Error::InvalidParameter(
                "imported environments are loaded from CSV".into(),
            )),
        }
    }

    pub fn constant(graph: Arc<LatticeGraph>, c: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "constant conductance must be positive, got {c}"
            )));
        }
        let omega = vec![c; graph.num_edges()];
        Ok(Self {
            graph,
            omega,
            spec: EnvSpec::Constant { value: c },
        })
    }

    pub fn iid(graph: Arc<LatticeGraph>, dist: Distribution, seed: u64) -> Result<Self> {
        dist.validate()?;
        let omega: Vec<f64> = (0..graph.num_edges())
            .into_par_iter()
            .map(|e| dist.sample(&mut stream_rng(seed, e as u64)))
            .collect();
        Self::from_conductances(graph, omega, EnvSpec::Iid { dist, seed })
    }

    pub fn layered(graph: Arc<LatticeGraph>, spec: LayeredSpec) -> Result<Self> {
        let field = LayeredField::new(graph.dim(), spec)?;
        let omega: Vec<f64> = graph
            .edges()
            .par_iter()
            .map(|e| {
                let x: Vec<i64> = graph.coords(e.plus).iter().map(|&c| c as i64).collect();
                field.line_value(e.axis, &x)
            })
            .collect();
        Self::from_conductances(
            graph,
            omega,
            EnvSpec::Layered {
                alpha0: spec.alpha0,
                seed: spec.seed,
            },
        )
    }

    pub fn from_conductances(graph: Arc<LatticeGraph>, omega: Vec<f64>, spec: EnvSpec) -> Result<Self> {
        graph.check_len("conductances", omega.len(), graph.num_edges())?;
        if let Some((index, &value)) = omega
            .iter()
            .enumerate()
            .find(|(_, &w)| !(w > 0.0 && w.is_finite()))
        {
            return Err(Error::NonPositive { index, value });
        }
        Ok(Self { graph, omega, spec })
    }

    pub fn graph(&self) -> &LatticeGraph {
        &self.graph
    }

    pub fn graph_arc(&self) -> &Arc<LatticeGraph> {
        &self.graph
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    #[inline]
    pub fn conductance(&self, e: usize) -> f64 {
        self.omega[e]
    }

    pub fn conductances(&self) -> &[f64] {
        &self.omega
    }

    /// Copy with edge `e` set to `value`.
    pub fn with_conductance(&self, e: usize, value: f64) -> Result<Self> {
        self.graph.edge(e)?;
        let mut omega = self.omega.clone();
        omega[e] = value;
        Self::from_conductances(self.graph.clone(), omega, self.spec.clone())
    }

    /// Copy with every conductance multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        let omega = self.omega.iter().map(|w| w * c).collect();
        Self::from_conductances(self.graph.clone(), omega, self.spec.clone())
    }

    /// `mu(x) = sum_{y~x} omega(x,y)`
    pub fn mu(&self) -> Vec<f64> {
        (0..self.graph.num_vertices())
            .map(|x| {
                self.graph
                    .neighbors(x)
                    .iter()
                    .map(|inc| self.omega[inc.edge])
                    .sum()
            })
            .collect()
    }

    /// `nu(x) = sum_{y~x} 1/omega(x,y)`
    pub fn nu(&self) -> Vec<f64> {
        (0..self.graph.num_vertices())
            .map(|x| {
                self.graph
                    .neighbors(x)
                    .iter()
                    .map(|inc| 1.0 / self.omega[inc.edge])
                    .sum()
            })
            .collect()
    }

    /// Writes `edge_id,e_plus,e_minus,omega` rows. Values use the shortest
    /// representation that parses back to the same `f64`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "edge_id,e_plus,e_minus,omega")?;
        for (id, (e, w)) in self.graph.edges().iter().zip(&self.omega).enumerate() {
            writeln!(out, "{id},{},{},{w:?}", e.plus, e.minus)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(graph: Arc<LatticeGraph>, input: R, source: &str) -> Result<Self> {
        let mut omega = vec![f64::NAN; graph.num_edges()];
        let mut lines = input.lines();
        match lines.next() {
            Some(Ok(h)) if h.trim() == "edge_id,e_plus,e_minus,omega" => {}
            other => {
                return Err(Error::Import(format!("bad header: {other:?}")));
            }
        }
        let mut rows = 0usize;
        for (lineno, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::Import(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.trim().split(',').collect();
            let bad = || Error::Import(format!("line {}: malformed row {line:?}", lineno + 2));
            if fields.len() != 4 {
                return Err(bad());
            }
            let id: usize = fields[0].parse().map_err(|_| bad())?;
            let plus: usize = fields[1].parse().map_err(|_| bad())?;
            let minus: usize = fields[2].parse().map_err(|_| bad())?;
            let w: f64 = fields[3].parse().map_err(|_| bad())?;
            let e = graph
                .edge(id)
                .map_err(|_| Error::Import(format!("edge {id} not in graph")))?;
            if (e.plus, e.minus) != (plus, minus) {
                return Err(Error::Import(format!(
                    "edge {id}: endpoints ({plus},{minus}) differ from graph ({},{})",
                    e.plus, e.minus
                )));
            }
            if !omega[id].is_nan() {
                return Err(Error::Import(format!("edge {id} listed twice")));
            }
            omega[id] = w;
            rows += 1;
        }
        if rows != graph.num_edges() {
            return Err(Error::Import(format!(
                "expected {} edges, found {rows}",
                graph.num_edges()
            )));
        }
        Self::from_conductances(
            graph,
            omega,
            EnvSpec::Imported {
                source: source.to_string(),
            },
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpeedKind {
    /// `theta = mu`, unit-rate holding times.
    Csrw,
    /// `theta = 1`
    Vsrw,
    Custom,
}

/// Positive vertex measure driving the time change of the walk.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedMeasure {
    pub kind: SpeedKind,
    values: Vec<f64>,
}

impl SpeedMeasure {
    pub fn new(env: &Environment, kind: SpeedKind, custom: Option<Vec<f64>>) -> Result<Self> {
        let n = env.graph().num_vertices();
        let values = match kind {
            SpeedKind::Csrw => env.mu(),
            SpeedKind::Vsrw => vec![1.0; n],
            SpeedKind::Custom => {
                let theta = custom.ok_or_else(|| {
                    Error::InvalidParameter("custom speed measure needs values".into())
                })?;
                env.graph().check_len("speed measure", theta.len(), n)?;
                theta
            }
        };
        if let Some((index, &value)) = values
            .iter()
            .enumerate()
            .find(|(_, &t)| !(t > 0.0 && t.is_finite()))
        {
            return Err(Error::NonPositive { index, value });
        }
        Ok(Self { kind, values })
    }

    pub fn csrw(env: &Environment) -> Self {
        Self::new(env, SpeedKind::Csrw, None).expect("mu is positive")
    }

    pub fn vsrw(env: &Environment) -> Self {
        Self::new(env, SpeedKind::Vsrw, None).expect("counting measure is positive")
    }

    pub fn custom(env: &Environment, theta: Vec<f64>) -> Result<Self> {
        Self::new(env, SpeedKind::Custom, Some(theta))
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn at(&self, x: usize) -> f64 {
        self.values[x]
    }
}

impl std::ops::Deref for SpeedMeasure {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.values
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::Boundary;

    fn torus(n: usize) -> Arc<LatticeGraph> {
        Arc::new(LatticeGraph::new(2, &[n, n], Boundary::Torus).unwrap())
    }

    #[test]
    fn constant_measures() {
        let g = Arc::new(LatticeGraph::new(2, &[5, 5], Boundary::Box).unwrap());
        let x = g.index(&[2, 2]).unwrap();
        let one = Environment::constant(g.clone(), 1.0).unwrap();
        assert!(one.conductances().iter().all(|&w| w == 1.0));
        assert_eq!((one.mu()[x], one.nu()[x]), (4.0, 4.0));
        let two = Environment::constant(g.clone(), 2.0).unwrap();
        assert_eq!((two.mu()[x], two.nu()[x]), (8.0, 2.0));
        assert!(Environment::constant(g.clone(), 0.0).is_err());
        assert!(Environment::constant(g, -1.0).is_err());
    }

    #[test]
    fn replay_is_exact() {
        let g = torus(12);
        let dist = Distribution::Pareto {
            alpha: 4.0,
            scale: 1.0,
        };
        let a = Environment::iid(g.clone(), dist, 7).unwrap();
        let b = Environment::from_spec(g.clone(), a.spec()).unwrap();
        assert_eq!(a.conductances(), b.conductances());
        let c = Environment::iid(g, dist, 8).unwrap();
        assert_ne!(a.conductances(), c.conductances());
    }

    #[test]
    fn degenerate_uniform() {
        let env =
            Environment::iid(torus(5), Distribution::Uniform { a: 1.0, b: 1.0 }, 3).unwrap();
        assert!(env.conductances().iter().all(|&w| w == 1.0));
    }

    #[test]
    fn invalid_laws_rejected() {
        let g = torus(5);
        for dist in [
            Distribution::Pareto {
                alpha: 0.0,
                scale: 1.0,
            },
            Distribution::Pareto {
                alpha: 2.0,
                scale: -1.0,
            },
            Distribution::Uniform { a: 0.0, b: 1.0 },
            Distribution::Uniform { a: 2.0, b: 1.0 },
            Distribution::Lognormal { m: 0.0, s: -1.0 },
        ] {
            assert!(Environment::iid(g.clone(), dist, 1).is_err(), "{dist:?}");
        }
    }

    #[test]
    fn layered_constant_along_lines() {
        let g = Arc::new(LatticeGraph::new(2, &[20, 30], Boundary::Box).unwrap());
        let env = Environment::layered(
            g.clone(),
            LayeredSpec {
                alpha0: 2.0,
                seed: 42,
            },
        )
        .unwrap();
        let mut per_line = std::collections::HashMap::new();
        for (e, &w) in g.edges().iter().zip(env.conductances()) {
            assert!(w >= 1.0);
            let c = g.coords(e.plus);
            let key = (e.axis, c[1 - e.axis]);
            let entry = per_line.entry(key).or_insert((w, w));
            entry.0 = entry.0.min(w);
            entry.1 = entry.1.max(w);
        }
        assert!(per_line.values().all(|(lo, hi)| lo == hi));
        // distinct draws = sum over axes of the number of lines in that direction
        let distinct: std::collections::HashSet<u64> =
            env.conductances().iter().map(|w| w.to_bits()).collect();
        assert_eq!(per_line.len(), 30 + 20);
        assert_eq!(distinct.len(), per_line.len());
    }

    #[test]
    fn layered_torus_wrap_edge_matches_line() {
        let g = torus(6);
        let env = Environment::layered(g.clone(), LayeredSpec { alpha0: 1.5, seed: 9 }).unwrap();
        let a = g.index(&[5, 2]).unwrap();
        let b = g.index(&[0, 2]).unwrap();
        let c = g.index(&[1, 2]).unwrap();
        let wrap = g.edge_between(a, b).unwrap();
        let inner = g.edge_between(b, c).unwrap();
        assert_eq!(env.conductance(wrap), env.conductance(inner));
    }

    #[test]
    fn layered_rejects_one_dimension() {
        let g = Arc::new(LatticeGraph::new(1, &[10], Boundary::Box).unwrap());
        assert!(Environment::layered(g, LayeredSpec { alpha0: 2.0, seed: 1 }).is_err());
    }

    #[test]
    fn lazy_field_agrees_with_materialized() {
        let g = Arc::new(LatticeGraph::new(3, &[4, 5, 6], Boundary::Box).unwrap());
        let spec = LayeredSpec { alpha0: 2.5, seed: 5 };
        let env = Environment::layered(g.clone(), spec).unwrap();
        let lazy = LayeredField::new(3, spec).unwrap();
        for (e, &w) in g.edges().iter().zip(env.conductances()) {
            let x: Vec<i64> = g.coords(e.plus).iter().map(|&c| c as i64).collect();
            assert_eq!(lazy.line_value(e.axis, &x), w);
        }
    }

    #[test]
    fn scaling_of_measures() {
        let env = Environment::iid(
            torus(6),
            Distribution::Lognormal { m: 0.0, s: 1.0 },
            11,
        )
        .unwrap();
        let scaled = env.scaled(3.0).unwrap();
        for ((m, ms), (n, ns)) in env
            .mu()
            .iter()
            .zip(scaled.mu())
            .zip(env.nu().iter().zip(scaled.nu()))
        {
            assert!((ms - 3.0 * m).abs() <= 1e-12 * ms);
            assert!((ns - n / 3.0).abs() <= 1e-12 * n);
        }
    }

    #[test]
    fn mu_nu_cauchy_schwarz() {
        let env = Environment::iid(
            torus(32),
            Distribution::Pareto {
                alpha: 1.5,
                scale: 1.0,
            },
            3,
        )
        .unwrap();
        let (mu, nu) = (env.mu(), env.nu());
        for x in 0..1000 {
            let deg = env.graph().degree(x) as f64;
            assert!(mu[x] * nu[x] >= deg * deg * (1.0 - 1e-12));
        }
    }

    #[test]
    fn speed_measures() {
        let g = Arc::new(LatticeGraph::new(2, &[5, 5], Boundary::Box).unwrap());
        let x = g.index(&[2, 2]).unwrap();
        let env = Environment::constant(g, 1.0).unwrap();
        assert_eq!(SpeedMeasure::csrw(&env).at(x), 4.0);
        assert!(SpeedMeasure::vsrw(&env).iter().all(|&t| t == 1.0));
        let nu = env.nu();
        let custom = SpeedMeasure::custom(&env, nu.clone()).unwrap();
        assert_eq!(custom.values(), &nu[..]);
        let mut bad = nu;
        bad[3] = 0.0;
        assert!(matches!(
            SpeedMeasure::custom(&env, bad),
            Err(Error::NonPositive { index: 3, .. })
        ));
    }

    #[test]
    fn csv_roundtrip() {
        let g = torus(7);
        let env = Environment::iid(
            g.clone(),
            Distribution::Lognormal { m: 0.3, s: 2.0 },
            21,
        )
        .unwrap();
        let mut buf = Vec::new();
        env.write_csv(&mut buf).unwrap();
        let back = Environment::read_csv(g.clone(), &buf[..], "mem").unwrap();
        assert_eq!(back.conductances(), env.conductances());

        let text = String::from_utf8(buf).unwrap();
        let truncated: String = text.lines().take(5).collect::<Vec<_>>().join("\n");
        assert!(Environment::read_csv(g, truncated.as_bytes(), "mem").is_err());
    }

    #[test]
    fn env_spec_json_shapes() {
        let layered: EnvSpec =
            serde_json::from_str(r#"{"kind":"layered","alpha0":2.0,"seed":42}"#).unwrap();
        assert_eq!(
            layered,
            EnvSpec::Layered {
                alpha0: 2.0,
                seed: 42
            }
        );
        let iid: EnvSpec = serde_json::from_str(
            r#"{"kind":"iid","dist":{"pareto":{"alpha":4,"scale":1}},"seed":7}"#,
        )
        .unwrap();
        assert_eq!(
            iid,
            EnvSpec::Iid {
                dist: Distribution::Pareto {
                    alpha: 4.0,
                    scale: 1.0
                },
                seed: 7
            }
        );
    }
}
