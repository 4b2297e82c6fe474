//! Discretized Onsager-Machlup action
//!
//! `S = (1/2D)[A + B + C]` with
//! `A = Σ_{i<L} ‖x⁽ⁱ⁺¹⁾ − x⁽ⁱ⁾‖²/(2Δt)`,
//! `B = (Δt/2) Σ_{0<i<L} Σ_c Φ_c(x⁽ⁱ⁾)²/ζ_c²` and
//! `C = DΔt Σ_{0<i<L} Σ_c ∂_c Φ_c(x⁽ⁱ⁾)/ζ_c`.
//! The truncated action drops `C`; at `D = 0` only the truncated action is
//! defined and the prefactor is dropped (reported as rescaled).

mod guess;
mod kabsch;
mod optimize;

use std::path::Path as FsPath;

use ndarray::{Array2, ArrayView1};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fields::{DriftField, FieldError};
use crate::io::{self, IoError};
use crate::rng;
use crate::score::ScoreError;

pub use guess::{initial_guess_latent, initial_guess_unwrap, LatentGuessOptions, UnwrapStage};
pub use kabsch::{kabsch_align, KabschResult};
pub use optimize::{optimize_path, OptimConfig, OptimFailure, OptimResult, OptimizerKind};

#[derive(Debug, Error)]
pub enum ActionError {
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error("path has dimension {got}, drift field has {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite drift or divergence at path point {index}")]
    NonFinite { index: usize },
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error("stage {stage}: {source}")]
    Stage { stage: usize, source: Box<OptimFailure> },
    #[error("path point {index}: {source}")]
    AtPoint { index: usize, source: ScoreError },
    #[error(transparent)]
    Io(#[from] IoError),
}

/// Ordered points `x⁽⁰⁾..x⁽ᴸ⁾` with a timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    points: Array2<f64>,
    pub dt: f64,
}

impl Path {
    pub fn new(points: Array2<f64>, dt: f64) -> Result<Self, ActionError> {
        if points.nrows() < 2 {
            return Err(ActionError::Params(format!("a path needs at least 2 points, got {}", points.nrows())));
        }
        if points.ncols() == 0 {
            return Err(ActionError::Params("points have zero dimension".into()));
        }
        if !(dt > 0.0) {
            return Err(ActionError::Params(format!("timestep must be positive, got {dt}")));
        }
        if let Some(i) = points.rows().into_iter().position(|r| r.iter().any(|v| !v.is_finite())) {
            return Err(ActionError::NonFinite { index: i });
        }
        Ok(Path { points, dt })
    }

    pub fn from_rows(rows: &[Vec<f64>], dt: f64) -> Result<Self, ActionError> {
        let k = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != k) {
            return Err(ActionError::Params("rows have different lengths".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Path::new(Array2::from_shape_vec((rows.len(), k), flat).expect("rectangular"), dt)
    }

    /// `L + 1` evenly spaced points from `x0` to `xl`.
    pub fn straight_line(x0: &[f64], xl: &[f64], l: usize, dt: f64) -> Result<Self, ActionError> {
        if x0.len() != xl.len() {
            return Err(ActionError::Params("endpoints differ in dimension".into()));
        }
        let rows: Vec<Vec<f64>> = (0..=l)
            .map(|i| {
                let s = i as f64 / l as f64;
                x0.iter().zip(xl).map(|(a, b)| (1.0 - s) * a + s * b).collect()
            })
            .collect();
        Path::from_rows(&rows, dt)
    }

    /// Number of segments `L`.
    pub fn segments(&self) -> usize {
        self.points.nrows() - 1
    }
    pub fn n_points(&self) -> usize {
        self.points.nrows()
    }
    pub fn dim(&self) -> usize {
        self.points.ncols()
    }
    pub fn points(&self) -> &Array2<f64> {
        &self.points
    }
    pub fn point(&self, i: usize) -> ArrayView1<'_, f64> {
        self.points.row(i)
    }
    pub fn point_vec(&self, i: usize) -> Vec<f64> {
        self.points.row(i).to_vec()
    }
    pub(crate) fn points_mut(&mut self) -> &mut Array2<f64> {
        &mut self.points
    }

    pub fn reversed(&self) -> Path {
        let mut p = self.points.clone();
        p.invert_axis(ndarray::Axis(0));
        Path { points: p.as_standard_layout().to_owned(), dt: self.dt }
    }

    /// Maximum of `energy` over the points, with its index.
    pub fn max_by(&self, energy: impl Fn(&[f64]) -> f64) -> (usize, f64) {
        self.points
            .rows()
            .into_iter()
            .map(|r| energy(r.as_slice().expect("standard layout")))
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, e)| if e > best.1 { (i, e) } else { best })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionVariant {
    #[default]
    Full,
    Truncated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    #[default]
    Gaussian,
    Rademacher,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum DivergenceMode {
    #[default]
    Analytic,
    Hutchinson {
        n_probes: usize,
        seed: u64,
        #[serde(default)]
        probe: ProbeKind,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum EndpointMode {
    /// Endpoint gradient rows are zeroed.
    #[default]
    Pinned,
    /// Endpoints move freely under a harmonic restraint to their initial
    /// positions.
    Spring { constant: f64 },
}

/// Friction `ζ`, either shared or per coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Zeta {
    Scalar(f64),
    PerCoordinate(Vec<f64>),
}

impl Zeta {
    fn get(&self, c: usize) -> f64 {
        match self {
            Zeta::Scalar(z) => *z,
            Zeta::PerCoordinate(v) => v[c],
        }
    }

    /// `ζ_c = γ·m_c` for per-particle masses repeated over `d` spatial axes.
    pub fn from_masses(gamma: f64, masses: &[f64], spatial_dim: usize) -> Self {
        Zeta::PerCoordinate(masses.iter().flat_map(|m| std::iter::repeat_n(gamma * m, spatial_dim)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OmParams {
    pub dt: f64,
    pub zeta: Zeta,
    pub d: f64,
    #[serde(default)]
    pub variant: ActionVariant,
    #[serde(default)]
    pub divergence: DivergenceMode,
    #[serde(default)]
    pub endpoints: EndpointMode,
}

impl OmParams {
    pub fn new(dt: f64, zeta: f64, d: f64, variant: ActionVariant) -> Self {
        OmParams {
            dt,
            zeta: Zeta::Scalar(zeta),
            d,
            variant,
            divergence: DivergenceMode::Analytic,
            endpoints: EndpointMode::Pinned,
        }
    }

    /// The latent denoise-noise preset: `ζ = 1`, `D = 1`, `Δt = β_τ`.
    pub fn latent(beta: f64, variant: ActionVariant) -> Self {
        OmParams::new(beta, 1.0, 1.0, variant)
    }

    pub fn validate(&self, dim: usize) -> Result<(), ActionError> {
        let fail = |m: String| Err(ActionError::Params(m));
        if !(self.dt > 0.0) {
            return fail(format!("dt must be positive, got {}", self.dt));
        }
        match &self.zeta {
            Zeta::Scalar(z) if !(*z > 0.0) => return fail(format!("zeta must be positive, got {z}")),
            Zeta::PerCoordinate(v) if v.len() != dim => {
                return fail(format!("zeta has {} entries for dimension {dim}", v.len()))
            }
            Zeta::PerCoordinate(v) if v.iter().any(|z| !(*z > 0.0)) => return fail("zeta entries must be positive".into()),
            _ => {}
        }
        if !(self.d >= 0.0) || !self.d.is_finite() {
            return fail(format!("diffusivity must be finite and nonnegative, got {}", self.d));
        }
        if self.d == 0.0 && self.variant == ActionVariant::Full {
            return fail("the full action is undefined at D = 0; use the truncated action".into());
        }
        if let DivergenceMode::Hutchinson { n_probes: 0, .. } = self.divergence {
            return fail("Hutchinson needs at least one probe".into());
        }
        if let EndpointMode::Spring { constant } = self.endpoints {
            if !(constant > 0.0) {
                return fail("spring constant must be positive".into());
            }
        }
        Ok(())
    }

    /// True when the reported action is `A + B` without the `1/2D` prefactor.
    pub fn rescaled(&self) -> bool {
        self.d == 0.0
    }

    fn prefactor(&self) -> f64 {
        if self.d == 0.0 { 1.0 } else { 1.0 / (2.0 * self.d) }
    }
}

/// Action value with its unscaled parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionValue {
    pub total: f64,
    pub kinetic: f64,
    pub drift: f64,
    pub divergence: f64,
    pub spring: f64,
    pub rescaled: bool,
}

fn check(path: &Path, field: &(impl DriftField + ?Sized), params: &OmParams) -> Result<(), ActionError> {
    if path.dim() != field.dim() {
        return Err(ActionError::Dimension { expected: field.dim(), got: path.dim() });
    }
    params.validate(path.dim())
}

/// Hutchinson probe vector.
fn probe<R: Rng + ?Sized>(kind: ProbeKind, k: usize, rng: &mut R) -> Vec<f64> {
    match kind {
        ProbeKind::Gaussian => rng::normal_vec(rng, k),
        ProbeKind::Rademacher => (0..k).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect(),
    }
}

/// Per-probe values `vᵀ(∂Φ/∂x)v`.
pub fn hutchinson_samples<R: Rng + ?Sized>(
    field: &(impl DriftField + ?Sized),
    x: &[f64],
    n_probes: usize,
    kind: ProbeKind,
    rng: &mut R,
) -> Result<Vec<f64>, ActionError> {
    if n_probes == 0 {
        return Err(ActionError::Params("Hutchinson needs at least one probe".into()));
    }
    if x.len() != field.dim() {
        return Err(ActionError::Dimension { expected: field.dim(), got: x.len() });
    }
    (0..n_probes)
        .map(|_| {
            let v = probe(kind, x.len(), rng);
            Ok(field.jacobian_form(x, &v, &v)?.0)
        })
        .collect()
}

/// Stochastic divergence estimate `(1/N) Σ vⱼᵀ(∂Φ/∂x)vⱼ` with Gaussian probes.
pub fn hutchinson_divergence<R: Rng + ?Sized>(
    field: &(impl DriftField + ?Sized),
    x: &[f64],
    n_probes: usize,
    rng: &mut R,
) -> Result<f64, ActionError> {
    let s = hutchinson_samples(field, x, n_probes, ProbeKind::Gaussian, rng)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

/// Weighted divergence `Σ_c w_c ∂_cΦ_c` and its gradient, exact or estimated.
fn divergence_term<R: Rng + ?Sized>(
    field: &(impl DriftField + ?Sized),
    x: &[f64],
    weights: &[f64],
    mode: DivergenceMode,
    rng: &mut R,
) -> Result<(f64, Vec<f64>), ActionError> {
    match mode {
        DivergenceMode::Analytic => Ok(field.weighted_divergence(x, weights)?),
        DivergenceMode::Hutchinson { n_probes, probe: kind, .. } => {
            let k = x.len();
            let mut value = 0.0;
            let mut grad = vec![0.0; k];
            for _ in 0..n_probes {
                let v = probe(kind, k, rng);
                let u: Vec<f64> = v.iter().zip(weights).map(|(a, w)| a * w).collect();
                let (q, g) = field.jacobian_form(x, &u, &v)?;
                value += q;
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            let n = n_probes as f64;
            Ok((value / n, grad.into_iter().map(|g| g / n).collect()))
        }
    }
}

/// Action and (optionally) its gradient. `round` selects the Hutchinson
/// probe stream so that repeated calls draw fresh probes reproducibly.
pub fn evaluate(
    path: &Path,
    field: &(impl DriftField + ?Sized),
    params: &OmParams,
    anchors: Option<(&[f64], &[f64])>,
    with_gradient: bool,
    round: u64,
) -> Result<(ActionValue, Option<Array2<f64>>), ActionError> {
    check(path, field, params)?;
    let l = path.segments();
    let k = path.dim();
    let dt = params.dt;
    let pts = path.points();
    let inv_z2: Vec<f64> = (0..k).map(|c| 1.0 / params.zeta.get(c).powi(2)).collect();
    let inv_z: Vec<f64> = (0..k).map(|c| 1.0 / params.zeta.get(c)).collect();
    let full = params.variant == ActionVariant::Full;

    let kinetic: f64 = (0..l)
        .map(|i| {
            let d = &pts.row(i + 1) - &pts.row(i);
            d.dot(&d)
        })
        .sum::<f64>()
        / (2.0 * dt);

    struct Interior {
        b: f64,
        c: f64,
        grad: Vec<f64>,
    }
    let interior: Vec<Interior> = (1..l)
        .into_par_iter()
        .map(|i| {
            let x = pts.row(i).to_vec();
            let phi = field.drift(&x);
            let b = 0.5 * dt * phi.iter().zip(&inv_z2).map(|(p, w)| p * p * w).sum::<f64>();
            if !b.is_finite() {
                return Err(ActionError::NonFinite { index: i });
            }
            let mut grad = vec![0.0; k];
            if with_gradient {
                let w: Vec<f64> = phi.iter().zip(&inv_z2).map(|(p, w)| p * w).collect();
                for (g, v) in grad.iter_mut().zip(field.drift_vjp(&x, &w)) {
                    *g += dt * v;
                }
            }
            let mut c = 0.0;
            if full {
                let seed = match params.divergence {
                    DivergenceMode::Hutchinson { seed, .. } => seed,
                    DivergenceMode::Analytic => 0,
                };
                let mut prng = rng::stream(seed ^ round.wrapping_mul(0x9E37_79B9_7F4A_7C15), i as u64);
                let (div, dg) = divergence_term(field, &x, &inv_z, params.divergence, &mut prng)?;
                c = params.d * dt * div;
                if !c.is_finite() {
                    return Err(ActionError::NonFinite { index: i });
                }
                if with_gradient {
                    for (g, v) in grad.iter_mut().zip(dg) {
                        *g += params.d * dt * v;
                    }
                }
            }
            Ok(Interior { b, c, grad })
        })
        .collect::<Result<_, _>>()?;

    let drift_sum: f64 = interior.iter().map(|t| t.b).sum();
    let div_sum: f64 = interior.iter().map(|t| t.c).sum();
    let mut spring = 0.0;
    let spring_k = match params.endpoints {
        EndpointMode::Spring { constant } => Some(constant),
        EndpointMode::Pinned => None,
    };
    if let (Some(ks), Some((a, b))) = (spring_k, anchors) {
        let d0: f64 = pts.row(0).iter().zip(a).map(|(x, y)| (x - y).powi(2)).sum();
        let dl: f64 = pts.row(l).iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
        spring = ks * (d0 + dl);
    }
    let pre = params.prefactor();
    let total = pre * (kinetic + drift_sum + div_sum) + spring;
    let value = ActionValue { total, kinetic, drift: drift_sum, divergence: div_sum, spring, rescaled: params.rescaled() };
    if !with_gradient {
        return Ok((value, None));
    }

    let mut grad = Array2::zeros((l + 1, k));
    for i in 0..=l {
        for c in 0..k {
            let mut g = 0.0;
            if i > 0 {
                g += pts[(i, c)] - pts[(i - 1, c)];
            }
            if i < l {
                g += pts[(i, c)] - pts[(i + 1, c)];
            }
            grad[(i, c)] = g / dt;
        }
    }
    for (t, i) in interior.iter().zip(1..l) {
        for c in 0..k {
            grad[(i, c)] += t.grad[c];
        }
    }
    grad *= pre;
    match (spring_k, anchors) {
        (Some(ks), Some((a, b))) => {
            for c in 0..k {
                grad[(0, c)] += 2.0 * ks * (pts[(0, c)] - a[c]);
                grad[(l, c)] += 2.0 * ks * (pts[(l, c)] - b[c]);
            }
        }
        _ => {
            grad.row_mut(0).fill(0.0);
            grad.row_mut(l).fill(0.0);
        }
    }
    Ok((value, Some(grad)))
}

/// Action value (fresh-probe round 0 for stochastic divergence).
pub fn om_action(path: &Path, field: &(impl DriftField + ?Sized), params: &OmParams) -> Result<f64, ActionError> {
    Ok(evaluate(path, field, params, None, false, 0)?.0.total)
}

/// Gradient of the action with pinned endpoint rows zeroed.
pub fn action_gradient(
    path: &Path,
    field: &(impl DriftField + ?Sized),
    params: &OmParams,
) -> Result<Array2<f64>, ActionError> {
    Ok(evaluate(path, field, params, None, true, 0)?.1.expect("gradient requested"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathSidecar {
    pub dt: f64,
    pub dim: usize,
    pub n_points: usize,
    pub params: Option<OmParams>,
    pub optim: Option<OptimConfig>,
    pub action_trace: Vec<f64>,
    pub rescaled: bool,
    pub seed: Option<u64>,
    pub csv_sha256: String,
}

/// Writes `index,x0..` rows plus a JSON sidecar next to the CSV.
pub fn write_path(
    path: &Path,
    csv: &FsPath,
    params: Option<&OmParams>,
    optim: Option<&OptimConfig>,
    trace: &[f64],
    seed: Option<u64>,
) -> Result<PathSidecar, ActionError> {
    let mut header = vec!["index".to_string()];
    header.extend((0..path.dim()).map(|c| format!("x{c}")));
    let rows = path.points().rows().into_iter().enumerate().map(|(i, r)| {
        let mut v = vec![i as f64];
        v.extend(r.iter());
        v
    });
    let digest = io::write_csv(csv, Some(&header), rows)?;
    let side = PathSidecar {
        dt: path.dt,
        dim: path.dim(),
        n_points: path.n_points(),
        params: params.cloned(),
        optim: optim.cloned(),
        action_trace: trace.to_vec(),
        rescaled: params.is_some_and(|p| p.rescaled()),
        seed,
        csv_sha256: digest,
    };
    io::write_json(&csv.with_extension("json"), &side)?;
    Ok(side)
}

pub fn read_path(csv: &FsPath) -> Result<(Path, PathSidecar), ActionError> {
    let side: PathSidecar = io::read_json(&csv.with_extension("json"))?;
    let bytes = io::read_verified(csv, &side.csv_sha256)?;
    let rows = io::parse_csv_at(csv, &bytes, Some(side.dim + 1), true)?;
    let pts: Vec<Vec<f64>> = rows.into_iter().map(|r| r[1..].to_vec()).collect();
    Ok((Path::from_rows(&pts, side.dt)?, side))
}

#[cfg(test)]
mod tests;
