use omtps::action::ActionError;
use omtps::committor::CommittorError;
use omtps::fields::FieldError;
use omtps::io::IoError;
use omtps::langevin::SimError;
use omtps::msm::MsmError;
use omtps::score::ScoreError;
use thiserror::Error;

/// Failure classes, each with its own process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("stale artifact: {0}")]
    Stale(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Stale(_) => 4,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        match e {
            IoError::Stale { .. } => CliError::Stale(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<FieldError> for CliError {
    fn from(e: FieldError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Io(io) => io.into(),
            SimError::NonFinite { .. } | SimError::OutOfBounds { .. } => CliError::Numerical(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<ScoreError> for CliError {
    fn from(e: ScoreError) -> Self {
        match e {
            ScoreError::Divergent { .. } | ScoreError::NonFinite { .. } | ScoreError::SingularFlow(_) => {
                CliError::Numerical(e.to_string())
            }
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<ActionError> for CliError {
    fn from(e: ActionError) -> Self {
        match e {
            ActionError::Io(io) => io.into(),
            ActionError::Score(s) => s.into(),
            ActionError::NonFinite { .. } | ActionError::Stage { .. } | ActionError::AtPoint { .. } => {
                CliError::Numerical(e.to_string())
            }
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<CommittorError> for CliError {
    fn from(e: CommittorError) -> Self {
        match e {
            CommittorError::Io(io) => io.into(),
            CommittorError::Sim(s) => s.into(),
            CommittorError::NoConvergence { .. }
            | CommittorError::Divergent { .. }
            | CommittorError::Weights(_)
            | CommittorError::OutsideGrid { .. } => CliError::Numerical(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<MsmError> for CliError {
    fn from(e: MsmError) -> Self {
        match e {
            MsmError::Io(io) => io.into(),
            MsmError::Unreachable { .. } | MsmError::ZeroProbability { .. } => CliError::Numerical(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}
