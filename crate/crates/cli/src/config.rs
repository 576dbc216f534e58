use std::path::{Path, PathBuf};

use rcm_lab::environment::{EnvSpec, SpeedKind};
use rcm_lab::heat_kernel::{FitConfig, FitObjective, Regime, Split};
use rcm_lab::lattice::GraphSpec;
use rcm_lab::metric::GreedyVariant;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// One experiment, read from a JSON file. Output paths are not part of the
/// hashed content, so the same experiment written to two directories carries
/// the same hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub graph: Option<GraphSpec>,
    pub environment: EnvSpec,
    #[serde(default = "default_speed")]
    pub speed: SpeedKind,
    /// Vertex values of a custom speed measure.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<Vec<f64>>,
    /// Source vertex index for `dist` and `hke`.
    #[serde(default)]
    pub source: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dist: Option<DistParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hke: Option<HkeParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimality: Option<OptimalityParams>,
    #[serde(default, skip_serializing)]
    pub out_dir: Option<PathBuf>,
}

fn default_speed() -> SpeedKind {
    SpeedKind::Vsrw
}

fn default_tol() -> f64 {
    1e-12
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistParams {
    pub p: f64,
    pub radii: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HkeParams {
    pub times: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub envelope: Option<EnvelopeSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvelopeSection {
    pub c1: f64,
    pub c5: f64,
    #[serde(default = "default_split")]
    pub split: Split,
    #[serde(default = "default_regimes")]
    pub regimes: Vec<Regime>,
    #[serde(default = "default_objective")]
    pub objective: FitObjective,
    #[serde(default)]
    pub t_min: f64,
}

fn default_split() -> Split {
    Split::Checkerboard
}

fn default_regimes() -> Vec<Regime> {
    vec![Regime::Near, Regime::Far]
}

fn default_objective() -> FitObjective {
    FitObjective::MeanLogGap
}

impl EnvelopeSection {
    pub fn fit_config(&self) -> FitConfig {
        let mut cfg = FitConfig::new(self.c1, self.c5, self.split, self.regimes.clone());
        cfg.objective = self.objective;
        cfg.t_min = self.t_min;
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimalityParams {
    /// Path lengths `L`; the path is as long as the largest.
    pub lengths: Vec<usize>,
    /// Tail exponent for the comparison slope; defaults to `alpha0` of a
    /// layered environment.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// Environment seeds to repeat the path over.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
    #[serde(default = "default_variant")]
    pub variant: GreedyVariant,
    /// Starting vertex; the origin (or vertex 0 of a finite graph) by default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<Vec<i64>>,
    /// Lattice dimension for lazily evaluated environments.
    #[serde(default = "default_dim")]
    pub d: usize,
}

fn default_variant() -> GreedyVariant {
    GreedyVariant::FirstStepRestricted
}

fn default_dim() -> usize {
    2
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
            context: format!("reading {}", path.display()),
            source,
        })?;
        let mut cfg: Self = serde_json::from_str(&text).map_err(|e| CliError::Config {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        // Imported environments are resolved against the config's directory.
        if let EnvSpec::Imported { source } = &cfg.environment {
            let p = Path::new(source);
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    cfg.environment = EnvSpec::Imported {
                        source: dir.join(p).display().to_string(),
                    };
                }
            }
        }
        Ok(cfg)
    }

    /// Applies command-line overrides. A seed replaces the environment seed
    /// and any seed list.
    pub fn apply_overrides(&mut self, seed: Option<u64>, tol: Option<f64>) {
        if let Some(seed) = seed {
            self.environment = self.environment.with_seed(seed);
            if let Some(opt) = &mut self.optimality {
                if opt.seeds.is_some() {
                    opt.seeds = Some(vec![seed]);
                }
            }
        }
        if let Some(tol) = tol {
            self.tol = tol;
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(CliError::Usage(format!("tol must be positive, got {}", self.tol)));
        }
        Ok(())
    }

    pub fn graph_spec(&self) -> Result<&GraphSpec, CliError> {
        self.graph
            .as_ref()
            .ok_or_else(|| CliError::Usage("config needs a \"graph\" section".into()))
    }

    /// Lowercase hex SHA-256 of the serialized config.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}
