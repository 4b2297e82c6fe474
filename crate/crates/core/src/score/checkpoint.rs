use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ScoreError, ScoreModel, Variant};
use crate::nn::{Activation, Mlp};

pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON header preceding the parameter blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model: Variant,
    pub widths: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
    pub n_freq: usize,
    pub shift: Vec<f64>,
    pub scale: f64,
    pub seed: u64,
    pub train_digest: String,
    pub ode_steps: usize,
    pub n_params: usize,
}

impl ScoreModel {
    pub fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            format_version: CHECKPOINT_VERSION,
            model: self.variant.clone(),
            widths: self.net.widths().to_vec(),
            hidden_activation: self.net.hidden_activation(),
            output_activation: self.net.output_activation(),
            n_freq: self.n_freq,
            shift: self.shift.clone(),
            scale: self.scale,
            seed: self.seed,
            train_digest: self.train_digest.clone(),
            ode_steps: self.ode_steps,
            n_params: self.net.params().len(),
        }
    }

    /// Layout: header length as little-endian u64, header JSON, then the
    /// parameters as little-endian f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header()).expect("header serializes");
        let mut out = Vec::with_capacity(8 + header.len() + 8 * self.net.params().len());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for p in self.net.params() {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ScoreError> {
        let bad = |m: String| ScoreError::Checkpoint(m);
        if bytes.len() < 8 {
            return Err(bad("truncated length prefix".into()));
        }
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let hend = 8usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header".into()))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[8..hend]).map_err(|e| bad(format!("header: {e}")))?;
        if header.format_version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported format version {}", header.format_version)));
        }
        let blob = &bytes[hend..];
        if blob.len() != 8 * header.n_params {
            return Err(bad(format!("expected {} parameter bytes, found {}", 8 * header.n_params, blob.len())));
        }
        let params = blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let net = Mlp::from_params(&header.widths, header.hidden_activation, header.output_activation, params)?;
        let mut model = ScoreModel::new(header.model, net, header.n_freq, header.shift, header.scale)?;
        model.seed = header.seed;
        model.train_digest = header.train_digest;
        model.ode_steps = header.ode_steps;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ScoreError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScoreError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
