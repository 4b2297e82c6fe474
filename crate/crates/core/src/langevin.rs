//! Euler-Maruyama integration of overdamped Langevin dynamics
//! `dx = (1/ζ)Φ(x) dt + √(2D) dW` with `ζ = γ·m` and `D = k_BT/ζ`.

use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fields::DriftField;
use crate::io::{self, IoError};
use crate::rng;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("no initial states given")]
    NoInitialStates,
    #[error("initial state has dimension {got}, field has {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite drift or state at replica {replica}, step {step}: {state:?}")]
    NonFinite { replica: usize, step: usize, state: Vec<f64> },
    #[error("state norm {norm:.3e} exceeded bound at replica {replica}, step {step}")]
    OutOfBounds { replica: usize, step: usize, norm: f64 },
    #[error("dataset is empty")]
    Empty,
    #[error(transparent)]
    Io(#[from] IoError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub dt: f64,
    pub gamma: f64,
    #[serde(default = "one")]
    pub mass: f64,
    pub kt: f64,
    pub steps: usize,
    /// Replica count used when initial states are drawn by the caller.
    #[serde(default = "one_usize")]
    pub replicas: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one_usize")]
    pub stride: usize,
    /// Abort when ‖x‖ exceeds this value.
    #[serde(default = "default_bound")]
    pub bound: f64,
}

fn one() -> f64 {
    1.0
}
fn one_usize() -> usize {
    1
}
fn default_bound() -> f64 {
    1e6
}

impl SimConfig {
    pub fn new(dt: f64, gamma: f64, kt: f64, steps: usize) -> Self {
        SimConfig { dt, gamma, mass: 1.0, kt, steps, replicas: 1, seed: 0, stride: 1, bound: default_bound() }
    }

    pub fn zeta(&self) -> f64 {
        self.gamma * self.mass
    }

    pub fn diffusivity(&self) -> f64 {
        self.kt / self.zeta()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let fail = |m: String| Err(SimError::Config(m));
        if !(self.dt > 0.0) {
            return fail(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.gamma > 0.0) {
            return fail(format!("gamma must be positive, got {}", self.gamma));
        }
        if !(self.mass > 0.0) {
            return fail(format!("mass must be positive, got {}", self.mass));
        }
        if !(self.kt >= 0.0) {
            return fail(format!("kt must be nonnegative, got {}", self.kt));
        }
        if self.stride == 0 {
            return fail("stride must be positive".into());
        }
        if !self.diffusivity().is_finite() || !self.zeta().is_finite() {
            return fail("derived ζ or D is not finite".into());
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        io::digest_json(self)
    }
}

/// Saved states of one replica, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub replica: usize,
    pub dim: usize,
    pub stride: usize,
    pub config_digest: String,
    states: Vec<f64>,
}

impl Trajectory {
    pub fn new(replica: usize, dim: usize, stride: usize, config_digest: String, states: Vec<f64>) -> Self {
        assert_eq!(states.len() % dim, 0);
        Trajectory { replica, dim, stride, config_digest, states }
    }

    pub fn len(&self) -> usize {
        self.states.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn states(&self) -> impl Iterator<Item = &[f64]> {
        self.states.chunks_exact(self.dim)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.states
    }
}

/// One step `x' = x + (Δt/ζ)Φ(x) + √(2DΔt)·z`.
pub fn em_step<F, R>(field: &F, state: &[f64], cfg: &SimConfig, rng: &mut R) -> Result<Vec<f64>, SimError>
where
    F: DriftField + ?Sized,
    R: Rng + ?Sized,
{
    let mut next = state.to_vec();
    step_in_place(field, &mut next, cfg.dt / cfg.zeta(), (2.0 * cfg.diffusivity() * cfg.dt).sqrt(), rng)
        .map_err(|s| SimError::NonFinite { replica: 0, step: 0, state: s })?;
    Ok(next)
}

fn step_in_place<F, R>(field: &F, x: &mut [f64], mobility_dt: f64, noise: f64, rng: &mut R) -> Result<(), Vec<f64>>
where
    F: DriftField + ?Sized,
    R: Rng + ?Sized,
{
    let phi = field.drift(x);
    if phi.iter().any(|v| !v.is_finite()) {
        return Err(x.to_vec());
    }
    for (xi, f) in x.iter_mut().zip(&phi) {
        *xi += mobility_dt * f;
        if noise > 0.0 {
            *xi += noise * rng::normal(rng);
        }
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(x.to_vec());
    }
    Ok(())
}

/// Runs one replica per initial state; replica `r` draws from the stream
/// `seed ^ r`.
pub fn simulate<F>(field: &F, inits: &[Vec<f64>], cfg: &SimConfig) -> Result<Vec<Trajectory>, SimError>
where
    F: DriftField + ?Sized,
{
    cfg.validate()?;
    if inits.is_empty() {
        return Err(SimError::NoInitialStates);
    }
    let k = field.dim();
    if let Some(bad) = inits.iter().find(|x| x.len() != k) {
        return Err(SimError::Dimension { expected: k, got: bad.len() });
    }
    let digest = cfg.digest();
    let mdt = cfg.dt / cfg.zeta();
    let noise = (2.0 * cfg.diffusivity() * cfg.dt).sqrt();
    inits
        .par_iter()
        .enumerate()
        .map(|(r, x0)| {
            let mut rng = rng::stream(cfg.seed, r as u64);
            let mut x = x0.clone();
            let mut states = Vec::with_capacity((cfg.steps / cfg.stride + 1) * k);
            states.extend_from_slice(&x);
            for step in 1..=cfg.steps {
                step_in_place(field, &mut x, mdt, noise, &mut rng)
                    .map_err(|state| SimError::NonFinite { replica: r, step, state })?;
                let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > cfg.bound {
                    return Err(SimError::OutOfBounds { replica: r, step, norm });
                }
                if step % cfg.stride == 0 {
                    states.extend_from_slice(&x);
                }
            }
            Ok(Trajectory::new(r, k, cfg.stride, digest.clone(), states))
        })
        .collect()
}

/// All saved states, replica by replica, as rows.
pub fn pool(trajs: &[Trajectory]) -> Result<Array2<f64>, SimError> {
    let k = trajs.first().ok_or(SimError::Empty)?.dim;
    let flat: Vec<f64> = trajs.iter().flat_map(|t| t.as_flat().iter().copied()).collect();
    if flat.is_empty() {
        return Err(SimError::Empty);
    }
    Ok(Array2::from_shape_vec((flat.len() / k, k), flat).expect("rows of equal width"))
}

/// Splits pooled states into train/validation sets with `round(n·fraction)`
/// training rows. Without a seed the split keeps the pooled order; with one,
/// rows are permuted first.
pub fn split_dataset(
    trajs: &[Trajectory],
    fraction: f64,
    shuffle_seed: Option<u64>,
) -> Result<(Array2<f64>, Array2<f64>), SimError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(SimError::Config(format!("split fraction must lie in (0,1), got {fraction}")));
    }
    let data = pool(trajs)?;
    let n = data.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut rng::stream(seed, 0x5911));
    }
    let n_train = ((n as f64) * fraction).round() as usize;
    let pick = |idx: &[usize]| data.select(ndarray::Axis(0), idx);
    Ok((pick(&order[..n_train]), pick(&order[n_train..])))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySidecar {
    pub config: SimConfig,
    pub config_digest: String,
    pub dim: usize,
    pub n_replicas: usize,
    pub generator: String,
    pub csv_sha256: String,
}

/// Writes `<stem>.csv` (columns `replica,step,x0..`) and `<stem>.json`.
pub fn write_trajectories(trajs: &[Trajectory], cfg: &SimConfig, csv_path: &Path) -> Result<TrajectorySidecar, SimError> {
    let k = trajs.first().ok_or(SimError::Empty)?.dim;
    let mut header = vec!["replica".to_string(), "step".to_string()];
    header.extend((0..k).map(|c| format!("x{c}")));
    let mut text = header.join(",");
    text.push('\n');
    for t in trajs {
        for (i, s) in t.states().enumerate() {
            text.push_str(&format!("{},{}", t.replica, i * t.stride));
            for v in s {
                text.push(',');
                text.push_str(&io::fmt_f64(*v));
            }
            text.push('\n');
        }
    }
    io::write_bytes(csv_path, text.as_bytes())?;
    let sidecar = TrajectorySidecar {
        config: cfg.clone(),
        config_digest: cfg.digest(),
        dim: k,
        n_replicas: trajs.len(),
        generator: rng::GENERATOR.into(),
        csv_sha256: io::sha256_hex(text.as_bytes()),
    };
    io::write_json(&csv_path.with_extension("json"), &sidecar)?;
    Ok(sidecar)
}

/// Reads trajectories written by [`write_trajectories`], verifying the CSV
/// digest against the sidecar.
pub fn read_trajectories(csv_path: &Path) -> Result<(Vec<Trajectory>, TrajectorySidecar), SimError> {
    let sidecar: TrajectorySidecar = io::read_json(&csv_path.with_extension("json"))?;
    let bytes = io::read_verified(csv_path, &sidecar.csv_sha256)?;
    let rows = io::parse_csv(&bytes, sidecar.dim + 2)?;
    let mut trajs: Vec<Trajectory> = Vec::new();
    let mut current: Option<(usize, Vec<f64>)> = None;
    for row in rows {
        let r = row[0] as usize;
        match current.as_mut() {
            Some((cr, states)) if *cr == r => states.extend_from_slice(&row[2..]),
            _ => {
                if let Some((cr, states)) = current.take() {
                    trajs.push(Trajectory::new(cr, sidecar.dim, sidecar.config.stride, sidecar.config_digest.clone(), states));
                }
                current = Some((r, row[2..].to_vec()));
            }
        }
    }
    if let Some((cr, states)) = current {
        trajs.push(Trajectory::new(cr, sidecar.dim, sidecar.config.stride, sidecar.config_digest.clone(), states));
    }
    Ok((trajs, sidecar))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{ClosureField, Quadratic};

    #[test]
    fn noiseless_zero_drift_is_stationary() {
        let f = ClosureField::new(2, |_x: &[f64]| vec![0.0, 0.0]);
        let cfg = SimConfig::new(0.1, 1.0, 0.0, 1);
        let mut rng = rng::seeded(0);
        assert_eq!(em_step(&f, &[0.3, -0.2], &cfg, &mut rng).unwrap(), vec![0.3, -0.2]);
    }

    #[test]
    fn deterministic_euler_step() {
        let f = Quadratic::isotropic(2, 1.0);
        let cfg = SimConfig::new(0.1, 1.0, 0.0, 1);
        let mut rng = rng::seeded(0);
        let x = em_step(&f, &[1.0, 0.0], &cfg, &mut rng).unwrap();
        assert!((x[0] - 0.9).abs() < 1e-15 && x[1] == 0.0);
    }

    #[test]
    fn harmonic_variance_matches_kt() {
        let f = Quadratic::isotropic(1, 1.0);
        let mut cfg = SimConfig::new(0.01, 1.0, 0.7, 2_000_000);
        cfg.seed = 5;
        let t = simulate(&f, &[vec![0.0]], &cfg).unwrap();
        let xs: Vec<f64> = t[0].states().skip(1000).map(|s| s[0]).collect();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        // Euler-Maruyama bias is O(Δt): exact discrete variance is kT/(1 − Δt/2)
        assert!((var / 0.7 - 1.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn zero_steps_keep_initial_states() {
        let f = Quadratic::isotropic(2, 1.0);
        let cfg = SimConfig::new(0.01, 1.0, 1.0, 0);
        let inits = vec![vec![1.0, 2.0], vec![-1.0, 0.5]];
        let t = simulate(&f, &inits, &cfg).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t[0].len(), 1);
        assert_eq!(t[1].state(0), &[-1.0, 0.5]);
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let f = Quadratic::isotropic(2, 1.0);
        let mut cfg = SimConfig::new(0.01, 1.0, 1.0, 100);
        cfg.seed = 99;
        cfg.stride = 10;
        let inits = vec![vec![1.0, 2.0]; 4];
        let a = simulate(&f, &inits, &cfg).unwrap();
        let b = simulate(&f, &inits, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].len(), 11);
        assert_ne!(a[0].as_flat(), a[1].as_flat());
    }

    #[test]
    fn bound_guard_aborts() {
        let f = ClosureField::new(1, |x: &[f64]| vec![10.0 * x[0]]);
        let mut cfg = SimConfig::new(1.0, 1.0, 0.0, 100);
        cfg.bound = 1e3;
        let err = simulate(&f, &[vec![1.0]], &cfg).unwrap_err();
        assert!(matches!(err, SimError::OutOfBounds { replica: 0, .. }));
    }

    #[test]
    fn non_finite_drift_is_reported() {
        let f = ClosureField::new(1, |x: &[f64]| vec![if x[0] > 0.5 { f64::NAN } else { 1.0 }]);
        let cfg = SimConfig::new(0.1, 1.0, 0.0, 100);
        let err = simulate(&f, &[vec![0.0]], &cfg).unwrap_err();
        assert!(matches!(err, SimError::NonFinite { step: 7, .. }), "{err}");
    }

    #[test]
    fn split_sizes_and_conservation() {
        let t = Trajectory::new(0, 1, 1, String::new(), (0..10).map(f64::from).collect());
        let (a, b) = split_dataset(std::slice::from_ref(&t), 0.8, None).unwrap();
        assert_eq!((a.nrows(), b.nrows()), (8, 2));
        assert_eq!(a[(0, 0)], 0.0);
        let (a, b) = split_dataset(std::slice::from_ref(&t), 0.3, Some(4)).unwrap();
        let mut all: Vec<f64> = a.iter().chain(b.iter()).copied().collect();
        all.sort_by(f64::total_cmp);
        assert_eq!(all, (0..10).map(f64::from).collect::<Vec<_>>());
        let one = Trajectory::new(0, 1, 1, String::new(), vec![3.0]);
        let (a, b) = split_dataset(&[one], 0.5, None).unwrap();
        assert_eq!((a.nrows(), b.nrows()), (1, 0));
        assert!(split_dataset(&[], 0.5, None).is_err());
        assert!(split_dataset(&[t], 1.0, None).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let f = Quadratic::isotropic(2, 1.0);
        let mut cfg = SimConfig::new(0.01, 1.0, 1.0, 20);
        cfg.stride = 5;
        let t = simulate(&f, &[vec![1.0, 2.0], vec![0.0, 0.0]], &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("traj.csv");
        write_trajectories(&t, &cfg, &p).unwrap();
        let (back, side) = read_trajectories(&p).unwrap();
        assert_eq!(back, t);
        assert_eq!(side.config, cfg);
    }
}
