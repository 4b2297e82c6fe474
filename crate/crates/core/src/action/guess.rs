use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{kabsch_align, optimize_path, ActionError, ActionVariant, OmParams, OptimConfig, Path};
use crate::fields::DriftField;
use crate::score::ScoreModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatentGuessOptions {
    /// Spatial dimension of each particle for rigid alignment of the end
    /// configuration onto the start; `None` skips alignment.
    pub align_particle_dim: Option<usize>,
    /// Decode the interpolated latents back to data space.
    pub decode: bool,
    /// Overwrite the decoded endpoints with the given endpoints.
    pub repin: bool,
    pub dt: f64,
}

impl Default for LatentGuessOptions {
    fn default() -> Self {
        LatentGuessOptions { align_particle_dim: None, decode: true, repin: true, dt: 1.0 }
    }
}

/// Encodes both endpoints to `tau_initial`, interpolates linearly in latent
/// space and decodes every point.
pub fn initial_guess_latent<R: Rng + ?Sized>(
    model: &ScoreModel,
    x0: &[f64],
    xl: &[f64],
    tau_initial: f64,
    l: usize,
    opts: &LatentGuessOptions,
    rng: &mut R,
) -> Result<Path, ActionError> {
    let k = model.dim();
    if x0.len() != k || xl.len() != k {
        return Err(ActionError::Dimension { expected: k, got: if x0.len() != k { x0.len() } else { xl.len() } });
    }
    if l == 0 {
        return Err(ActionError::Params("path needs at least one segment".into()));
    }
    let mut end = xl.to_vec();
    if let Some(d) = opts.align_particle_dim {
        if d == 0 || k % d != 0 {
            return Err(ActionError::Params(format!("dimension {k} is not a multiple of particle dimension {d}")));
        }
        let reference = Array2::from_shape_vec((k / d, d), x0.to_vec()).expect("divisible");
        let moving = Array2::from_shape_vec((k / d, d), end.clone()).expect("divisible");
        end = kabsch_align(&reference, &moving)?.aligned.into_raw_vec_and_offset().0;
    }
    let ends = Array2::from_shape_vec((2, k), [x0, end.as_slice()].concat()).expect("two rows");
    let z = model.encode_batch(ends.view(), tau_initial, rng)?;
    let mut latent = Array2::zeros((l + 1, k));
    for i in 0..=l {
        let s = i as f64 / l as f64;
        for c in 0..k {
            latent[(i, c)] = (1.0 - s) * z[(0, c)] + s * z[(1, c)];
        }
    }
    let mut pts = if opts.decode { model.decode_batch(latent.view(), tau_initial, rng)? } else { latent };
    if opts.repin {
        pts.row_mut(0).assign(&ndarray::ArrayView1::from(x0));
        pts.row_mut(l).assign(&ndarray::ArrayView1::from(end.as_slice()));
    }
    Path::new(pts, opts.dt)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnwrapStage {
    pub n_points: usize,
    pub action_before: f64,
    pub action_after: f64,
}

/// Iterative unwrapping: start from `l1` points split between the two
/// endpoints, then `n` times duplicate every point and minimize the
/// truncated action. The result has `l1·2ⁿ` points.
pub fn initial_guess_unwrap(
    x0: &[f64],
    xl: &[f64],
    l1: usize,
    n: usize,
    field: &(impl DriftField + ?Sized),
    params: &OmParams,
    cfg: &OptimConfig,
) -> Result<(Path, Vec<UnwrapStage>), ActionError> {
    if l1 < 2 || l1 % 2 != 0 {
        return Err(ActionError::Params(format!("initial length must be even and at least 2, got {l1}")));
    }
    if x0.len() != xl.len() {
        return Err(ActionError::Params("endpoints differ in dimension".into()));
    }
    let rows: Vec<Vec<f64>> = (0..l1).map(|i| if i < l1 / 2 { x0.to_vec() } else { xl.to_vec() }).collect();
    let mut path = Path::from_rows(&rows, params.dt)?;
    let mut truncated = params.clone();
    truncated.variant = ActionVariant::Truncated;
    let mut stages = Vec::with_capacity(n);
    for stage in 0..n {
        let mut doubled = Array2::zeros((2 * path.n_points(), path.dim()));
        for (i, r) in path.points().rows().into_iter().enumerate() {
            doubled.row_mut(2 * i).assign(&r);
            doubled.row_mut(2 * i + 1).assign(&r);
        }
        path = Path::new(doubled, params.dt)?;
        let res = optimize_path(&path, field, &truncated, cfg)
            .map_err(|e| ActionError::Stage { stage, source: Box::new(e) })?;
        stages.push(UnwrapStage {
            n_points: path.n_points(),
            action_before: res.trace[0],
            action_after: res.best_action,
        });
        path = res.path;
    }
    Ok((path, stages))
}
