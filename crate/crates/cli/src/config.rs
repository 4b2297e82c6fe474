//! Strict JSON configuration for every subcommand.

use std::path::{Path, PathBuf};

use omtps::action::{LatentGuessOptions, OmParams, OptimConfig};
use omtps::committor::{CommittorTrainConfig, GridSpec, RegionSpec};
use omtps::fields::FieldSpec;
use omtps::langevin::SimConfig;
use omtps::score::{FlowSchedule, NoiseScheduleDDPM, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const CONFIG_VERSION: u32 = 1;

fn current_version() -> u32 {
    CONFIG_VERSION
}

/// Parses a top-level config, which must carry `"version"`.
pub fn parse<T: DeserializeOwned>(text: &str) -> Result<T, CliError> {
    let raw: serde_json::Value = serde_json::from_str(text).map_err(|e| CliError::config(format!("invalid JSON: {e}")))?;
    match raw.get("version") {
        None => return Err(CliError::config("missing field `version`")),
        Some(v) if v.as_u64() != Some(CONFIG_VERSION as u64) => {
            return Err(CliError::config(format!("unsupported config version {v}, expected {CONFIG_VERSION}")))
        }
        _ => {}
    }
    serde_json::from_value(raw).map_err(|e| CliError::config(e.to_string()))
}

/// An input file, optionally pinned to a digest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InputRef {
    Path(String),
    Pinned { path: String, sha256: String },
}

impl InputRef {
    pub fn resolve(&self, base: &Path) -> PathBuf {
        let p = match self {
            InputRef::Path(p) | InputRef::Pinned { path: p, .. } => Path::new(p),
        };
        if p.is_absolute() { p.to_owned() } else { base.join(p) }
    }

    pub fn pinned(&self) -> Option<&str> {
        match self {
            InputRef::Pinned { sha256, .. } => Some(sha256),
            InputRef::Path(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitSpec {
    /// Replica `r` starts at `points[r % len]`.
    Points { points: Vec<Vec<f64>> },
    /// Replicas start at points drawn uniformly from a saved path.
    Path { path: InputRef },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    #[serde(default = "current_version")]
    pub version: u32,
    pub field: FieldSpec,
    pub sim: SimConfig,
    pub init: InitSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Ddpm {
        #[serde(default)]
        schedule: NoiseScheduleDDPM,
    },
    Flow {
        #[serde(default)]
        schedule: FlowSchedule,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainCmdConfig {
    #[serde(default = "current_version")]
    pub version: u32,
    pub dataset: InputRef,
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DriftSpec {
    Analytic { field: FieldSpec },
    /// Score of a trained model at latent time `tau`.
    Learned { checkpoint: InputRef, tau: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GuessSpec {
    /// Straight line with Gaussian noise of scale `noise` on interior points.
    Straight {
        #[serde(default)]
        noise: f64,
    },
    /// Linear interpolation in the latent space of the learned model.
    Latent {
        tau_initial: f64,
        #[serde(default)]
        options: LatentGuessOptions,
    },
    /// Repeated duplication and truncated-action minimization.
    Unwrap { initial_points: usize, stages: usize, optim: OptimConfig },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplePathConfig {
    #[serde(default = "current_version")]
    pub version: u32,
    pub drift: DriftSpec,
    /// Potential used to report barrier energies; defaults to the analytic drift.
    #[serde(default)]
    pub energy: Option<FieldSpec>,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
    pub segments: usize,
    pub params: OmParams,
    pub optim: OptimConfig,
    /// Sweep over diffusivities, overriding `params.d`.
    #[serde(default)]
    pub diffusivities: Option<Vec<f64>>,
    #[serde(default = "one")]
    pub replicates: usize,
    #[serde(default = "default_guess")]
    pub guess: GuessSpec,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

fn default_guess() -> GuessSpec {
    GuessSpec::Straight { noise: 0.0 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeuralSpec {
    /// Path whose points seed the unbiased sampling runs.
    pub path: InputRef,
    pub seeding: SimConfig,
    pub n_sims: usize,
    #[serde(default = "default_bins")]
    pub bins: [usize; 2],
    #[serde(default)]
    pub train: CommittorTrainConfig,
}

fn default_bins() -> [usize; 2] {
    [100, 100]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommittorCmdConfig {
    #[serde(default = "current_version")]
    pub version: u32,
    pub field: FieldSpec,
    pub kt: f64,
    pub gamma: f64,
    /// Defaults to radius-2 disks around the two deepest Müller-Brown minima.
    #[serde(default)]
    pub regions: Option<RegionSpec>,
    /// Defaults to a 200 × 200 lattice over the Müller-Brown box.
    #[serde(default)]
    pub grid: Option<GridSpec>,
    #[serde(default)]
    pub neural: Option<NeuralSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratedSpec {
    /// Saved paths, each subsampled to `len` points.
    Paths { files: Vec<InputRef> },
    /// Fresh bridge draws from the fitted model itself.
    Bridge { n: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MsmEvalConfig {
    #[serde(default = "current_version")]
    pub version: u32,
    pub reference: InputRef,
    pub generated: GeneratedSpec,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "one")]
    pub lag: usize,
    #[serde(default = "default_k")]
    pub len: usize,
    #[serde(default = "default_bridges")]
    pub n_reference: usize,
    /// Start and end configurations; default to the first generated path's
    /// endpoints.
    #[serde(default)]
    pub start: Option<Vec<f64>>,
    #[serde(default)]
    pub end: Option<Vec<f64>>,
    #[serde(default = "default_kmeans_iter")]
    pub kmeans_iterations: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_k() -> usize {
    20
}
fn default_bridges() -> usize {
    1000
}
fn default_kmeans_iter() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExportSpec {
    Potential { field: FieldSpec, bounds: [f64; 4], nx: usize, ny: usize },
    Path { path: InputRef },
    Committor { grid: InputRef },
    Samples {
        trajectories: InputRef,
        #[serde(default = "one")]
        stride: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportConfig {
    #[serde(default = "current_version")]
    pub version: u32,
    pub exports: Vec<ExportSpec>,
}

/// Stages run in order; relative input paths resolve against the output
/// directory so later stages can name earlier outputs such as
/// `simulate/trajectories.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecipeConfig {
    pub version: u32,
    #[serde(default)]
    pub simulate: Option<SimulateConfig>,
    #[serde(default)]
    pub train: Option<TrainCmdConfig>,
    #[serde(default)]
    pub sample_path: Option<SamplePathConfig>,
    #[serde(default)]
    pub committor: Option<CommittorCmdConfig>,
    #[serde(default)]
    pub msm_eval: Option<MsmEvalConfig>,
    #[serde(default)]
    pub export_plot: Option<ExportConfig>,
}
