//! Markov state models on clustered trajectories, endpoint-conditioned
//! bridge sampling and the path-quality metrics built on them.

use std::collections::HashSet;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::Path as OmPath;
use crate::io::{self, IoError};
use crate::rng;

#[derive(Debug, Error)]
pub enum MsmError {
    #[error("need at least {k} distinct points, found {distinct}")]
    TooFewPoints { distinct: usize, k: usize },
    #[error("invalid state count {0}; need at least 2")]
    InvalidK(usize),
    #[error("no transitions at lag {lag}")]
    NoTransitions { lag: usize },
    #[error("state {state} out of range for {k} states")]
    StateOutOfRange { state: usize, k: usize },
    #[error("state {end} is unreachable from {start} in {steps} steps")]
    Unreachable { start: usize, end: usize, steps: usize },
    #[error("transition {t} of the path has zero probability")]
    ZeroProbability { t: usize },
    #[error("invalid path: {0}")]
    InvalidPath(String),
    #[error("no paths given")]
    EmptyPaths,
    #[error("invalid distribution: {0}")]
    Distribution(String),
    #[error("invalid model: {0}")]
    Model(String),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// Nearest-center assignment in raw coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub centers: Array2<f64>,
}

impl Clustering {
    pub fn k(&self) -> usize {
        self.centers.nrows()
    }

    pub fn dim(&self) -> usize {
        self.centers.ncols()
    }

    pub fn assign(&self, x: &[f64]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (c, row) in self.centers.rows().into_iter().enumerate() {
            let d: f64 = row.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum();
            if d < best.0 {
                best = (d, c);
            }
        }
        best.1
    }

    pub fn assign_all(&self, points: ArrayView2<f64>) -> Vec<usize> {
        (0..points.nrows()).into_par_iter().map(|i| self.assign(&points.row(i).to_vec())).collect()
    }

    /// Sum of squared distances to the assigned centers.
    pub fn inertia(&self, points: ArrayView2<f64>) -> f64 {
        (0..points.nrows())
            .into_par_iter()
            .map(|i| {
                let x = points.row(i).to_vec();
                let c = self.centers.row(self.assign(&x));
                c.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
            })
            .sum()
    }

    pub fn digest(&self) -> String {
        io::digest_json(&self.centers.rows().into_iter().map(|r| r.to_vec()).collect::<Vec<_>>())
    }
}

fn count_distinct(points: &ArrayView2<f64>, at_least: usize) -> usize {
    let mut seen = HashSet::new();
    for r in points.rows() {
        seen.insert(r.iter().map(|v| v.to_bits()).collect::<Vec<u64>>());
        if seen.len() >= at_least {
            break;
        }
    }
    seen.len()
}

/// Lloyd iterations from a greedy farthest-point start whose first center
/// is drawn with `seed`. Returns the clustering and the inertia after each
/// iteration.
pub fn fit_clusters(
    points: ArrayView2<f64>,
    k: usize,
    seed: u64,
    max_iter: usize,
) -> Result<(Clustering, Vec<f64>), MsmError> {
    if k < 2 {
        return Err(MsmError::InvalidK(k));
    }
    let distinct = count_distinct(&points, k);
    if distinct < k {
        return Err(MsmError::TooFewPoints { distinct, k });
    }
    let n = points.nrows();
    let dim = points.ncols();
    let mut r = rng::stream(seed, 0);
    let first = r.random_range(0..n);
    let mut centers = Array2::zeros((k, dim));
    centers.row_mut(0).assign(&points.row(first));
    let mut nearest: Vec<f64> = points
        .rows()
        .into_iter()
        .map(|p| p.iter().zip(centers.row(0)).map(|(a, b)| (a - b).powi(2)).sum())
        .collect();
    for c in 1..k {
        let (far, _) = nearest
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, d)| if *d > acc.1 { (i, *d) } else { acc });
        centers.row_mut(c).assign(&points.row(far));
        for (d, p) in nearest.iter_mut().zip(points.rows()) {
            let dn: f64 = p.iter().zip(centers.row(c)).map(|(a, b)| (a - b).powi(2)).sum();
            *d = d.min(dn);
        }
    }

    let mut clustering = Clustering { centers };
    let mut labels = clustering.assign_all(points);
    let mut trace = Vec::new();
    for _ in 0..max_iter {
        let mut sums = Array2::<f64>::zeros((k, dim));
        let mut counts = vec![0usize; k];
        for (p, &l) in points.rows().into_iter().zip(&labels) {
            counts[l] += 1;
            for c in 0..dim {
                sums[(l, c)] += p[c];
            }
        }
        for l in 0..k {
            // an emptied cluster keeps its previous center
            if counts[l] > 0 {
                for c in 0..dim {
                    clustering.centers[(l, c)] = sums[(l, c)] / counts[l] as f64;
                }
            }
        }
        let next = clustering.assign_all(points);
        trace.push(clustering.inertia(points));
        if next == labels {
            break;
        }
        labels = next;
    }
    Ok((clustering, trace))
}

/// Row-stochastic transition matrix at a fixed lag.
#[derive(Debug, Clone, PartialEq)]
pub struct Msm {
    pub transition: Array2<f64>,
    pub lag: usize,
    pub clustering: Option<Clustering>,
}

impl Msm {
    /// Validates a hand-built matrix: square, nonnegative, rows summing to 1.
    pub fn from_matrix(transition: Array2<f64>, lag: usize) -> Result<Self, MsmError> {
        let k = transition.nrows();
        if k < 2 || transition.ncols() != k {
            return Err(MsmError::Model(format!("matrix must be square with k ≥ 2, got {:?}", transition.dim())));
        }
        for (i, row) in transition.rows().into_iter().enumerate() {
            if row.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return Err(MsmError::Model(format!("row {i} has a negative or non-finite entry")));
            }
            let s: f64 = row.sum();
            if (s - 1.0).abs() > 1e-12 {
                return Err(MsmError::Model(format!("row {i} sums to {s}")));
            }
        }
        Ok(Msm { transition, lag, clustering: None })
    }

    pub fn k(&self) -> usize {
        self.transition.nrows()
    }

    /// `T^0, T^1, …, T^max`.
    pub fn powers(&self, max: usize) -> Vec<Array2<f64>> {
        let mut out = vec![Array2::eye(self.k())];
        for p in 1..=max {
            let next = out[p - 1].dot(&self.transition);
            out.push(next);
        }
        out
    }

    fn check_state(&self, s: usize) -> Result<(), MsmError> {
        if s >= self.k() {
            return Err(MsmError::StateOutOfRange { state: s, k: self.k() });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), MsmError> {
        let file = MsmFile {
            format_version: 1,
            lag: self.lag,
            transition: self.transition.rows().into_iter().map(|r| r.to_vec()).collect(),
            centers: self.clustering.as_ref().map(|c| c.centers.rows().into_iter().map(|r| r.to_vec()).collect()),
        };
        Ok(io::write_json(path, &file)?)
    }

    pub fn load(path: &Path) -> Result<Self, MsmError> {
        let f: MsmFile = io::read_json(path)?;
        if f.format_version != 1 {
            return Err(MsmError::Model(format!("unsupported format version {}", f.format_version)));
        }
        let k = f.transition.len();
        let flat: Vec<f64> = f.transition.into_iter().flatten().collect();
        let t = Array2::from_shape_vec((k, flat.len() / k.max(1)), flat)
            .map_err(|e| MsmError::Model(e.to_string()))?;
        let mut msm = Msm::from_matrix(t, f.lag)?;
        if let Some(rows) = f.centers {
            let dim = rows.first().map_or(0, Vec::len);
            let flat: Vec<f64> = rows.into_iter().flatten().collect();
            let centers = Array2::from_shape_vec((k, dim), flat).map_err(|e| MsmError::Model(e.to_string()))?;
            msm.clustering = Some(Clustering { centers });
        }
        Ok(msm)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MsmFile {
    format_version: u32,
    lag: usize,
    transition: Vec<Vec<f64>>,
    centers: Option<Vec<Vec<f64>>>,
}

/// Counts `s_t → s_{t+lag}` over all trajectories and row-normalizes.
/// Rows without counts become absorbing.
pub fn fit_msm(trajs: &[Vec<usize>], k: usize, lag: usize) -> Result<Msm, MsmError> {
    if k < 2 {
        return Err(MsmError::InvalidK(k));
    }
    if lag == 0 {
        return Err(MsmError::Model("lag must be positive".into()));
    }
    let mut counts = Array2::<f64>::zeros((k, k));
    let mut total = 0usize;
    for traj in trajs {
        for &s in traj {
            if s >= k {
                return Err(MsmError::StateOutOfRange { state: s, k });
            }
        }
        for t in 0..traj.len().saturating_sub(lag) {
            counts[(traj[t], traj[t + lag])] += 1.0;
            total += 1;
        }
    }
    if total == 0 {
        return Err(MsmError::NoTransitions { lag });
    }
    for i in 0..k {
        let s: f64 = counts.row(i).sum();
        if s == 0.0 {
            log::warn!("state {i} has no outgoing transitions; making it absorbing");
            counts[(i, i)] = 1.0;
        } else {
            counts.row_mut(i).mapv_inplace(|v| v / s);
        }
    }
    Ok(Msm { transition: counts, lag, clustering: None })
}

/// Clusters nothing itself: assigns every trajectory state and fits at `lag`.
pub fn fit_msm_continuous(trajs: &[ArrayView2<f64>], clustering: &Clustering, lag: usize) -> Result<Msm, MsmError> {
    let discrete: Vec<Vec<usize>> = trajs.iter().map(|t| clustering.assign_all(*t)).collect();
    let mut msm = fit_msm(&discrete, clustering.k(), lag)?;
    msm.clustering = Some(clustering.clone());
    Ok(msm)
}

/// Distribution of `s_{t+1}` given `s_t = state` for a bridge that ends in
/// `end` at position `len − 1` (positions counted from 0):
/// `T_{s,j} T^{(L−t−2)}_{j,end} / T^{(L−t−1)}_{s,end}`.
pub fn bridge_kernel(
    powers: &[Array2<f64>],
    t: usize,
    state: usize,
    end: usize,
    len: usize,
) -> Result<Vec<f64>, MsmError> {
    let tm = &powers[1];
    let remaining = len - 1 - t;
    let z = powers[remaining][(state, end)];
    if !(z > 0.0) {
        return Err(MsmError::Unreachable { start: state, end, steps: remaining });
    }
    Ok((0..tm.ncols()).map(|j| tm[(state, j)] * powers[remaining - 1][(j, end)] / z).collect())
}

fn check_bridge(msm: &Msm, start: usize, end: usize, len: usize) -> Result<Vec<Array2<f64>>, MsmError> {
    msm.check_state(start)?;
    msm.check_state(end)?;
    if len < 2 {
        return Err(MsmError::InvalidPath(format!("bridge length {len} is below 2")));
    }
    let powers = msm.powers(len - 1);
    if !(powers[len - 1][(start, end)] > 0.0) {
        return Err(MsmError::Unreachable { start, end, steps: len - 1 });
    }
    Ok(powers)
}

/// `n` state sequences of length `len` from `start` to `end`, drawn from the
/// chain conditioned on its endpoints. Path `i` uses stream `seed ^ i`.
pub fn sample_bridge(
    msm: &Msm,
    start: usize,
    end: usize,
    len: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>, MsmError> {
    let powers = check_bridge(msm, start, end, len)?;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, i as u64);
            let mut path = Vec::with_capacity(len);
            path.push(start);
            for t in 0..len - 1 {
                let probs = bridge_kernel(&powers, t, path[t], end, len)?;
                let u: f64 = r.random();
                let mut acc = 0.0;
                let mut next = None;
                for (j, p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc && *p > 0.0 {
                        next = Some(j);
                        break;
                    }
                }
                // round-off can leave acc just below u; fall back to the last supported state
                let next = next.unwrap_or_else(|| probs.iter().rposition(|p| *p > 0.0).expect("kernel has support"));
                path.push(next);
            }
            Ok(path)
        })
        .collect()
}

/// Mean negative log-likelihood per transition of `path` under the chain
/// conditioned to end in `end`.
pub fn path_nll(msm: &Msm, path: &[usize], end: usize) -> Result<f64, MsmError> {
    let len = path.len();
    if len < 2 {
        return Err(MsmError::InvalidPath("need at least two states".into()));
    }
    for &s in path {
        msm.check_state(s)?;
    }
    msm.check_state(end)?;
    let powers = msm.powers(len - 1);
    let mut total = 0.0;
    for t in 0..len - 1 {
        let (a, b) = (path[t], path[t + 1]);
        let remaining = len - 1 - t;
        let num = msm.transition[(a, b)] * powers[remaining - 1][(b, end)];
        let den = powers[remaining][(a, end)];
        if !(num > 0.0) || !(den > 0.0) {
            return Err(MsmError::ZeroProbability { t });
        }
        total -= (num / den).ln();
    }
    Ok(total / (len - 1) as f64)
}

/// Whether every consecutive transition has positive probability.
pub fn is_valid(msm: &Msm, path: &[usize]) -> bool {
    path.iter().all(|s| *s < msm.k()) && path.windows(2).all(|w| msm.transition[(w[0], w[1])] > 0.0)
}

pub fn fraction_valid(msm: &Msm, paths: &[Vec<usize>]) -> Result<f64, MsmError> {
    if paths.is_empty() {
        return Err(MsmError::EmptyPaths);
    }
    Ok(paths.iter().filter(|p| is_valid(msm, p)).count() as f64 / paths.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogBase {
    Nats,
    Bits,
}

fn check_distribution(p: &[f64], name: &str) -> Result<(), MsmError> {
    if p.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(MsmError::Distribution(format!("{name} has a negative or non-finite entry")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(MsmError::Distribution(format!("{name} sums to {s}")));
    }
    Ok(())
}

/// Jensen-Shannon divergence with `0·log 0 = 0`.
pub fn jsd_with_base(p: &[f64], q: &[f64], base: LogBase) -> Result<f64, MsmError> {
    if p.len() != q.len() || p.is_empty() {
        return Err(MsmError::Distribution(format!("support sizes differ: {} vs {}", p.len(), q.len())));
    }
    check_distribution(p, "p")?;
    check_distribution(q, "q")?;
    let kl = |a: &[f64], m: &[f64]| -> f64 {
        a.iter().zip(m).filter(|(a, _)| **a > 0.0).map(|(a, m)| a * (a / m).ln()).sum()
    };
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    let nats = (0.5 * kl(p, &m) + 0.5 * kl(q, &m)).clamp(0.0, std::f64::consts::LN_2);
    Ok(match base {
        LogBase::Nats => nats,
        LogBase::Bits => nats / std::f64::consts::LN_2,
    })
}

pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64, MsmError> {
    jsd_with_base(p, q, LogBase::Nats)
}

/// Normalized histogram of all states visited by `paths`.
pub fn state_distribution(paths: &[Vec<usize>], k: usize) -> Result<Vec<f64>, MsmError> {
    let mut counts = vec![0.0; k];
    let mut total = 0.0;
    for p in paths {
        for &s in p {
            if s >= k {
                return Err(MsmError::StateOutOfRange { state: s, k });
            }
            counts[s] += 1.0;
            total += 1.0;
        }
    }
    if total == 0.0 {
        return Err(MsmError::EmptyPaths);
    }
    Ok(counts.into_iter().map(|c| c / total).collect())
}

/// Evenly spaced subsample of `len` points, each assigned to its nearest
/// center. The first and last points are always kept.
pub fn discretize_paths(paths: &[OmPath], clustering: &Clustering, len: usize) -> Result<Vec<Vec<usize>>, MsmError> {
    paths
        .iter()
        .map(|p| {
            let n = p.n_points();
            if len > n || len < 2 {
                return Err(MsmError::InvalidPath(format!("cannot subsample {n} points to {len}")));
            }
            Ok((0..len)
                .map(|i| {
                    let idx = ((i * (n - 1)) as f64 / (len - 1) as f64).round() as usize;
                    clustering.assign(&p.point_vec(idx))
                })
                .collect())
        })
        .collect()
}

/// Metrics for a set of generated paths against reference bridges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathMetrics {
    pub jsd: f64,
    pub jsd_bits: f64,
    pub fraction_valid: f64,
    /// Mean over valid paths; `None` when no path is valid.
    pub mean_nll: Option<f64>,
    pub n_paths: usize,
    pub n_valid: usize,
}

/// JSD of state-visitation distributions, valid fraction, and conditioned
/// NLL with each path scored against its own final state.
pub fn path_metrics(msm: &Msm, generated: &[Vec<usize>], reference: &[Vec<usize>]) -> Result<PathMetrics, MsmError> {
    let k = msm.k();
    let p = state_distribution(generated, k)?;
    let q = state_distribution(reference, k)?;
    let fv = fraction_valid(msm, generated)?;
    let nlls: Vec<f64> = generated
        .iter()
        .filter(|g| is_valid(msm, g))
        .filter_map(|g| path_nll(msm, g, *g.last().expect("paths are nonempty")).ok())
        .collect();
    let mean_nll = (!nlls.is_empty()).then(|| nlls.iter().sum::<f64>() / nlls.len() as f64);
    Ok(PathMetrics {
        jsd: jsd(&p, &q)?,
        jsd_bits: jsd_with_base(&p, &q, LogBase::Bits)?,
        fraction_valid: fv,
        mean_nll,
        n_paths: generated.len(),
        n_valid: nlls.len(),
    })
}
