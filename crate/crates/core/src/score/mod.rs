//! Small DDPM and flow-matching score models.
//!
//! Models act in data coordinates. Internally the data are shifted and scaled
//! by one isotropic factor before reaching the network, and scores are mapped
//! back with the chain rule.

mod checkpoint;
mod model;
mod sample;
mod schedule;
mod train;

use thiserror::Error;

pub use checkpoint::{CheckpointHeader, CHECKPOINT_VERSION};
pub use model::{ScoreField, ScoreModel, Variant};
pub use schedule::{flow_score_from_velocity, FlowSchedule, NoiseScheduleDDPM};
pub use train::{ddpm_train, flow_train, LrSchedule, TrainConfig, TrainReport};

use crate::nn::NnError;

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("latent time {tau} outside {range}")]
    TauOutOfRange { tau: f64, range: String },
    #[error("flow score conversion is singular at τ = {0}")]
    SingularFlow(f64),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training data is empty")]
    EmptyData,
    #[error("point has dimension {got}, model expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("loss became non-finite ({loss}) at step {step}")]
    Divergent { step: usize, loss: f64 },
    #[error("non-finite state during {stage} at step {step}")]
    NonFinite { stage: &'static str, step: usize },
    #[error("{0} is not available for this model variant")]
    Unsupported(&'static str),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Network(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
