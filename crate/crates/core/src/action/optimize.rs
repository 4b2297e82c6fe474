use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{evaluate, ActionError, EndpointMode, OmParams, Path};
use crate::fields::DriftField;
use crate::nn::Adam;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    GradientDescent,
    #[default]
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub steps: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    /// Relative action change over `window` iterations that counts as
    /// converged.
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_window")]
    pub window: usize,
    /// Latent time of the generative drift, when one is used.
    #[serde(default)]
    pub tau_opt: Option<f64>,
    /// Latent time for the initial guess, when one is generated.
    #[serde(default)]
    pub tau_initial: Option<f64>,
}

fn default_tolerance() -> f64 {
    1e-6
}
fn default_window() -> usize {
    25
}

impl OptimConfig {
    pub fn new(steps: usize, learning_rate: f64, optimizer: OptimizerKind) -> Self {
        OptimConfig {
            steps,
            learning_rate,
            optimizer,
            tolerance: default_tolerance(),
            window: default_window(),
            tau_opt: None,
            tau_initial: None,
        }
    }

    fn validate(&self) -> Result<(), ActionError> {
        if !(self.learning_rate > 0.0) {
            return Err(ActionError::Params(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.window == 0 {
            return Err(ActionError::Params("convergence window must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimResult {
    /// Iterate with the lowest action seen.
    pub path: Path,
    pub best_action: f64,
    /// Action before each update, then the final iterate's action.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub rescaled: bool,
}

/// Optimization stopped at a non-finite action; `partial` holds the best
/// finite iterate.
#[derive(Debug, Error)]
#[error("optimization failed at iteration {iteration}: {source}")]
pub struct OptimFailure {
    pub iteration: usize,
    pub source: ActionError,
    pub partial: Option<OptimResult>,
}

/// Minimizes the action by first-order updates on all movable points.
///
/// Stops after `steps` updates or once the relative action change across the
/// convergence window drops below the tolerance.
pub fn optimize_path(
    initial: &Path,
    field: &(impl DriftField + ?Sized),
    params: &OmParams,
    cfg: &OptimConfig,
) -> Result<OptimResult, OptimFailure> {
    let fail = |iteration, source, partial| OptimFailure { iteration, source, partial };
    cfg.validate().map_err(|e| fail(0, e, None))?;
    let l = initial.segments();
    let anchors = (initial.point_vec(0), initial.point_vec(l));
    let anchor_ref = Some((anchors.0.as_slice(), anchors.1.as_slice()));
    let free_ends = matches!(params.endpoints, EndpointMode::Spring { .. });
    let mut path = initial.clone();
    let mut adam = Adam::new(path.points().len());
    let mut best: Option<(f64, Path)> = None;
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    let mut converged = false;
    let mut iterations = 0;

    for it in 0..=cfg.steps {
        let last = it == cfg.steps;
        let (value, grad) = match evaluate(&path, field, params, anchor_ref, !last, it as u64) {
            Ok(v) => v,
            Err(e) => return Err(fail(it, e, partial(best, trace, it, params))),
        };
        let s = value.total;
        if !s.is_finite() {
            return Err(fail(it, ActionError::NonFinite { index: usize::MAX }, partial(best, trace, it, params)));
        }
        trace.push(s);
        if best.as_ref().is_none_or(|(b, _)| s < *b) {
            best = Some((s, path.clone()));
        }
        if last {
            break;
        }
        if it >= cfg.window {
            let prev = trace[it - cfg.window];
            if (s - prev).abs() <= cfg.tolerance * prev.abs().max(f64::MIN_POSITIVE) {
                converged = true;
                break;
            }
        }
        let grad = grad.expect("gradient requested");
        let lr = cfg.learning_rate;
        let (lo, hi) = if free_ends { (0, l) } else { (1, l - 1) };
        if lo <= hi {
            let k = path.dim();
            let pts = path.points_mut();
            match cfg.optimizer {
                OptimizerKind::GradientDescent => {
                    for i in lo..=hi {
                        for c in 0..k {
                            pts[(i, c)] -= lr * grad[(i, c)];
                        }
                    }
                }
                OptimizerKind::Adam => {
                    let flat = pts.as_slice_mut().expect("standard layout");
                    let g = grad.as_slice().expect("standard layout");
                    let range = lo * k..(hi + 1) * k;
                    adam.step_range(flat, g, lr, range);
                }
            }
        }
        iterations = it + 1;
    }
    let (best_action, path) = best.expect("at least one evaluation");
    Ok(OptimResult { path, best_action, trace, iterations, converged, rescaled: params.rescaled() })
}

fn partial(best: Option<(f64, Path)>, trace: Vec<f64>, it: usize, params: &OmParams) -> Option<OptimResult> {
    best.map(|(best_action, path)| OptimResult {
        path,
        best_action,
        trace,
        iterations: it,
        converged: false,
        rescaled: params.rescaled(),
    })
}
