use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use rcm_lab::acceptance;
use rcm_lab::environment::{EnvSpec, Environment, LayeredField, LayeredSpec, SpeedMeasure};
use rcm_lab::heat_kernel::{envelope_fit_and_verify, heat_kernel_field};
use rcm_lab::lattice::LatticeGraph;
use rcm_lab::metric::{
    greedy_path, intrinsic_distance_field, lower_bound_report, path_sum_check, ConductanceField,
    GreedyPathReport,
};
use rcm_lab::stats::mean;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::CliError;

/// Output directory; every file written through it is reported on stdout.
pub struct Outputs {
    dir: PathBuf,
}

impl Outputs {
    pub fn new(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(|source| CliError::Io {
            context: format!("creating {}", dir.display()),
            source,
        })?;
        Ok(Self {
            dir: dir.to_path_buf(),
        })
    }

    fn write_bytes(&self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(name);
        let io = |source| CliError::Io {
            context: format!("writing {}", path.display()),
            source,
        };
        let mut out = BufWriter::new(File::create(&path).map_err(io)?);
        out.write_all(bytes).map_err(io)?;
        out.flush().map_err(io)?;
        println!("wrote {}", path.display());
        Ok(())
    }

    fn write_with(
        &self,
        name: &str,
        f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>,
    ) -> Result<Vec<u8>, CliError> {
        let mut buf = Vec::new();
        f(&mut buf).map_err(|source| CliError::Io {
            context: format!("formatting {name}"),
            source,
        })?;
        self.write_bytes(name, &buf)?;
        Ok(buf)
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), CliError> {
        let mut bytes = serde_json::to_vec_pretty(value).expect("outputs serialize");
        bytes.push(b'\n');
        self.write_bytes(name, &bytes)
    }
}

#[derive(Serialize)]
struct Provenance<'a> {
    command: &'static str,
    version: &'static str,
    config_hash: String,
    seed: Option<u64>,
    config: &'a ExperimentConfig,
}

/// JSON sidecar: provenance fields followed by the command's own fields.
#[derive(Serialize)]
struct Sidecar<'a, T: Serialize> {
    #[serde(flatten)]
    provenance: Provenance<'a>,
    #[serde(flatten)]
    body: T,
}

fn sidecar<'a, T: Serialize>(command: &'static str, cfg: &'a ExperimentConfig, body: T) -> Sidecar<'a, T> {
    Sidecar {
        provenance: Provenance {
            command,
            version: env!("CARGO_PKG_VERSION"),
            config_hash: cfg.hash(),
            seed: cfg.environment.seed(),
            config: cfg,
        },
        body,
    }
}

fn build_graph(cfg: &ExperimentConfig) -> Result<Arc<LatticeGraph>, CliError> {
    Ok(Arc::new(cfg.graph_spec()?.build()?))
}

fn build_env(cfg: &ExperimentConfig, spec: &EnvSpec) -> Result<Environment, CliError> {
    let graph = build_graph(cfg)?;
    match spec {
        EnvSpec::Imported { source } => {
            let file = File::open(source).map_err(|e| CliError::Io {
                context: format!("opening {source}"),
                source: e,
            })?;
            Ok(Environment::read_csv(graph, BufReader::new(file), source)?)
        }
        other => Ok(Environment::from_spec(graph, other)?),
    }
}

fn build_speed(cfg: &ExperimentConfig, env: &Environment) -> Result<SpeedMeasure, CliError> {
    Ok(SpeedMeasure::new(env, cfg.speed, cfg.theta.clone())?)
}

#[derive(Serialize)]
struct GenBody {
    vertices: usize,
    edges: usize,
    csv: &'static str,
    csv_sha256: String,
    omega_min: f64,
    omega_max: f64,
    omega_mean: f64,
}

/// Writes `environment.csv` and `environment.json`.
pub fn gen(cfg: &ExperimentConfig, out: &Outputs) -> Result<(), CliError> {
    let env = build_env(cfg, &cfg.environment)?;
    let csv = out.write_with("environment.csv", |buf| env.write_csv(buf))?;
    let omega = env.conductances();
    let body = GenBody {
        vertices: env.graph().num_vertices(),
        edges: env.graph().num_edges(),
        csv: "environment.csv",
        csv_sha256: hex::encode(Sha256::digest(&csv)),
        omega_min: omega.iter().copied().fold(f64::INFINITY, f64::min),
        omega_max: omega.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        omega_mean: mean(omega),
    };
    out.write_json("environment.json", &sidecar("gen", cfg, body))
}

#[derive(Serialize)]
struct DistBody<T: Serialize> {
    source: usize,
    metric_csv: &'static str,
    lower_bound_csv: &'static str,
    lower_bound: T,
}

/// Writes `metric.csv`, `lower_bound.csv` and `dist.json`.
pub fn dist(cfg: &ExperimentConfig, out: &Outputs) -> Result<(), CliError> {
    let params = cfg
        .dist
        .as_ref()
        .ok_or_else(|| CliError::Usage("config needs a \"dist\" section with p and radii".into()))?;
    if params.radii.is_empty() {
        return Err(CliError::Usage("dist.radii is empty".into()));
    }
    let env = build_env(cfg, &cfg.environment)?;
    let theta = build_speed(cfg, &env)?;
    let metric = intrinsic_distance_field(&env, &theta, cfg.source)?;
    let hops = env.graph().bfs_distances(cfg.source)?;
    let report = lower_bound_report(&env, &theta, cfg.source, params.p, &params.radii)?;
    out.write_with("metric.csv", |buf| {
        writeln!(buf, "vertex,graph_dist,intrinsic_dist")?;
        for (y, (h, d)) in hops.iter().zip(&metric.distances).enumerate() {
            writeln!(buf, "{y},{h},{d:?}")?;
        }
        Ok(())
    })?;
    out.write_with("lower_bound.csv", |buf| {
        writeln!(buf, "radius,min_intrinsic,argmin,ratio,exponent,m_p,clipped")?;
        for r in &report.rows {
            writeln!(
                buf,
                "{},{:?},{},{:?},{:?},{:?},{}",
                r.radius, r.min_intrinsic, r.argmin, r.ratio, report.exponent, r.m_p, r.clipped
            )?;
        }
        Ok(())
    })?;
    let body = DistBody {
        source: cfg.source,
        metric_csv: "metric.csv",
        lower_bound_csv: "lower_bound.csv",
        lower_bound: &report,
    };
    out.write_json("dist.json", &sidecar("dist", cfg, body))
}

#[derive(Serialize)]
struct HkeBody {
    source: usize,
    heat_kernel_csv: &'static str,
    envelope_json: Option<&'static str>,
    lambda: f64,
    order: usize,
    error_bound: f64,
    /// `(t, sum_y P[X_t = y])`
    mass: Vec<(f64, f64)>,
}

/// Writes `heat_kernel.csv`, `hke.json` and, when configured, `envelope.json`.
pub fn hke(cfg: &ExperimentConfig, out: &Outputs) -> Result<(), CliError> {
    let params = cfg
        .hke
        .as_ref()
        .ok_or_else(|| CliError::Usage("config needs an \"hke\" section with times".into()))?;
    let env = build_env(cfg, &cfg.environment)?;
    let theta = build_speed(cfg, &env)?;
    let field = heat_kernel_field(&env, &theta, cfg.source, &params.times, cfg.tol)?;
    out.write_with("heat_kernel.csv", |buf| field.write_csv(buf))?;
    if let Some(section) = &params.envelope {
        let metric = intrinsic_distance_field(&env, &theta, cfg.source)?;
        let hops = env.graph().bfs_distances(cfg.source)?;
        let report = envelope_fit_and_verify(
            &field,
            &metric,
            &hops,
            env.graph().dim(),
            &section.fit_config(),
        )?;
        out.write_json("envelope.json", &sidecar("hke", cfg, &report))?;
    }
    let body = HkeBody {
        source: cfg.source,
        heat_kernel_csv: "heat_kernel.csv",
        envelope_json: params.envelope.as_ref().map(|_| "envelope.json"),
        lambda: field.lambda,
        order: field.order,
        error_bound: field.error,
        mass: (0..field.times.len())
            .map(|i| (field.times[i], field.mass(i)))
            .collect(),
    };
    out.write_json("hke.json", &sidecar("hke", cfg, body))
}

/// Constant conductance on all of `Z^d`.
struct ConstantField {
    d: usize,
    value: f64,
}

impl ConductanceField for ConstantField {
    fn dim(&self) -> usize {
        self.d
    }

    fn forward_conductance(&self, _x: &[i64], axis: usize) -> Option<f64> {
        (axis < self.d).then_some(self.value)
    }
}

#[derive(Serialize)]
struct PathRun {
    seed: Option<u64>,
    end: Vec<i64>,
    /// `(L, sum_{n=0}^{L} omega_n^(-1/2))`
    sums: Vec<(usize, f64)>,
    loglog_slope: f64,
    /// `(L, number of records of the running maximum up to L)`
    records: Vec<(usize, usize)>,
}

#[derive(Serialize)]
struct OptimalityBody {
    variant: rcm_lab::metric::GreedyVariant,
    d: usize,
    alpha: f64,
    /// `1 - (d-1)/(2 alpha)`
    bound_exponent: f64,
    mean_slope: f64,
    runs: Vec<PathRun>,
}

/// Writes `greedy.json`.
pub fn optimality(cfg: &ExperimentConfig, out: &Outputs) -> Result<(), CliError> {
    let params = cfg.optimality.as_ref().ok_or_else(|| {
        CliError::Usage("config needs an \"optimality\" section with lengths".into())
    })?;
    let mut lengths = params.lengths.clone();
    lengths.sort_unstable();
    lengths.dedup();
    if lengths.len() < 2 {
        return Err(CliError::Usage(
            "optimality.lengths needs at least two distinct values".into(),
        ));
    }
    let l_max = *lengths.last().unwrap();
    let alpha = match (&params.alpha, &cfg.environment) {
        (Some(a), _) => *a,
        (None, EnvSpec::Layered { alpha0, .. }) => *alpha0,
        _ => {
            return Err(CliError::Usage(
                "optimality.alpha is required unless the environment is layered".into(),
            ))
        }
    };
    let d = match &cfg.environment {
        EnvSpec::Layered { .. } | EnvSpec::Constant { .. } => params.d,
        _ => cfg.graph_spec()?.d,
    };
    let start = params.start.clone().unwrap_or_else(|| vec![0; d]);
    let seeds: Vec<Option<u64>> = match (cfg.environment.seed(), &params.seeds) {
        (Some(_), Some(list)) => list.iter().map(|&s| Some(s)).collect(),
        (seed, _) => vec![seed],
    };
    let run = |seed: Option<u64>| -> Result<PathRun, CliError> {
        let spec = match seed {
            Some(s) => cfg.environment.with_seed(s),
            None => cfg.environment.clone(),
        };
        let path: GreedyPathReport = match spec {
            EnvSpec::Layered { alpha0, seed } => {
                let field = LayeredField::new(d, LayeredSpec { alpha0, seed })?;
                greedy_path(&field, &start, l_max, params.variant)?
            }
            EnvSpec::Constant { value } => {
                let field = ConstantField { d, value };
                greedy_path(&field, &start, l_max, params.variant)?
            }
            other => {
                let env = build_env(cfg, &other)?;
                greedy_path(&env, &start, l_max, params.variant)?
            }
        };
        let sums = path_sum_check(&path.conductances, d, alpha, &lengths)?;
        let records = lengths
            .iter()
            .map(|&l| (l, path.record_times.partition_point(|&t| t <= l)))
            .collect();
        Ok(PathRun {
            seed,
            end: path.end(),
            sums: sums.sums,
            loglog_slope: sums.loglog_slope,
            records,
        })
    };
    let runs = seeds
        .into_par_iter()
        .map(run)
        .collect::<Result<Vec<_>, _>>()?;
    let slopes: Vec<f64> = runs.iter().map(|r| r.loglog_slope).collect();
    let body = OptimalityBody {
        variant: params.variant,
        d,
        alpha,
        bound_exponent: 1.0 - (d as f64 - 1.0) / (2.0 * alpha),
        mean_slope: mean(&slopes),
        runs,
    };
    out.write_json("greedy.json", &sidecar("optimality", cfg, body))
}

/// Runs the acceptance suite, printing one line per criterion.
pub fn verify(out: Option<&Outputs>) -> Result<(), CliError> {
    let criteria = acceptance::criteria();
    let mut outcomes = Vec::with_capacity(criteria.len());
    for c in &criteria {
        let o = c.run();
        println!("{}", o.line());
        outcomes.push(o);
    }
    let failed = outcomes.iter().filter(|o| !o.pass).count();
    println!("{} passed, {failed} failed", outcomes.len() - failed);
    if let Some(out) = out {
        out.write_json("acceptance.json", &outcomes)?;
    }
    if failed > 0 {
        return Err(CliError::Verification {
            failed,
            total: outcomes.len(),
        });
    }
    Ok(())
}
