//! Committor functions between two regions: a finite-difference solution of
//! the backward Kolmogorov equation on 2D grids, a neural committor trained
//! by minimizing the Dirichlet functional, and rate estimates from either.

use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::Path as OmPath;
use crate::fields::{DriftField, MuellerBrown};
use crate::io::{self, IoError};
use crate::langevin::{self, SimConfig, SimError};
use crate::nn::{cosine_lr, Activation, Adam, Mlp, NnError};
use crate::rng;

#[derive(Debug, Error)]
pub enum CommittorError {
    #[error("invalid regions: {0}")]
    Regions(String),
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("the field has no scalar potential")]
    NoPotential,
    #[error("linear solve stopped at relative residual {residual:.3e} after {iterations} iterations")]
    NoConvergence { residual: f64, iterations: usize },
    #[error("point {point:?} lies outside the grid")]
    OutsideGrid { point: Vec<f64> },
    #[error("point has dimension {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("no samples")]
    EmptySamples,
    #[error("invalid weights: {0}")]
    Weights(String),
    #[error("committor training diverged at step {step} (loss {loss})")]
    Divergent { step: usize, loss: f64 },
    #[error(transparent)]
    Network(#[from] NnError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// Closed region of configuration space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)]
pub enum Region {
    Disk { center: Vec<f64>, radius: f64 },
    Rect { min: Vec<f64>, max: Vec<f64> },
}

impl Region {
    pub fn dim(&self) -> usize {
        match self {
            Region::Disk { center, .. } => center.len(),
            Region::Rect { min, .. } => min.len(),
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            Region::Disk { center, radius } => {
                center.iter().zip(x).map(|(c, v)| (v - c).powi(2)).sum::<f64>() <= radius * radius
            }
            Region::Rect { min, max } => x.iter().zip(min.iter().zip(max)).all(|(v, (a, b))| *v >= *a && *v <= *b),
        }
    }

    fn validate(&self) -> Result<(), CommittorError> {
        match self {
            Region::Disk { center, radius } => {
                if center.is_empty() || !(*radius > 0.0) || center.iter().any(|c| !c.is_finite()) {
                    return Err(CommittorError::Regions(format!("bad disk {center:?} radius {radius}")));
                }
            }
            Region::Rect { min, max } => {
                if min.is_empty() || min.len() != max.len() || min.iter().zip(max).any(|(a, b)| !(a < b)) {
                    return Err(CommittorError::Regions(format!("bad rectangle {min:?}..{max:?}")));
                }
            }
        }
        Ok(())
    }
}

fn rect_distance(p: &[f64], min: &[f64], max: &[f64]) -> f64 {
    p.iter().zip(min.iter().zip(max)).map(|(v, (a, b))| (v - v.clamp(*a, *b)).powi(2)).sum::<f64>().sqrt()
}

fn intersects(a: &Region, b: &Region) -> bool {
    match (a, b) {
        (Region::Disk { center: c1, radius: r1 }, Region::Disk { center: c2, radius: r2 }) => {
            c1.iter().zip(c2).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt() <= r1 + r2
        }
        (Region::Rect { min: a0, max: a1 }, Region::Rect { min: b0, max: b1 }) => {
            (0..a0.len()).all(|c| a0[c] <= b1[c] && b0[c] <= a1[c])
        }
        (Region::Disk { center, radius }, Region::Rect { min, max })
        | (Region::Rect { min, max }, Region::Disk { center, radius }) => rect_distance(center, min, max) <= *radius,
    }
}

/// Reactant region `a` (committor 0) and product region `b` (committor 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionSpec {
    pub a: Region,
    pub b: Region,
}

impl RegionSpec {
    pub fn new(a: Region, b: Region) -> Result<Self, CommittorError> {
        let spec = RegionSpec { a, b };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), CommittorError> {
        self.a.validate()?;
        self.b.validate()?;
        if self.a.dim() != self.b.dim() {
            return Err(CommittorError::Regions("regions differ in dimension".into()));
        }
        if intersects(&self.a, &self.b) {
            return Err(CommittorError::Regions("regions A and B overlap".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.a.dim()
    }

    /// Disks around the two deepest Müller-Brown minima; A is the global one.
    pub fn mueller_brown(radius: f64) -> Result<Self, CommittorError> {
        let cp = MuellerBrown::default_critical_points();
        let disk = |i: usize| Region::Disk { center: cp.minima[i].position.to_vec(), radius };
        RegionSpec::new(disk(0), disk(1))
    }
}

/// Uniform node lattice over `[x0, x1] × [y0, y1]`, boundaries included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub bounds: [f64; 4],
    pub nx: usize,
    pub ny: usize,
}

impl GridSpec {
    pub fn new(bounds: [f64; 4], nx: usize, ny: usize) -> Result<Self, CommittorError> {
        let g = GridSpec { bounds, nx, ny };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), CommittorError> {
        let [x0, x1, y0, y1] = self.bounds;
        if !(x0 < x1 && y0 < y1) || self.bounds.iter().any(|b| !b.is_finite()) {
            return Err(CommittorError::Grid(format!("bad bounds {:?}", self.bounds)));
        }
        if self.nx < 3 || self.ny < 3 {
            return Err(CommittorError::Grid("need at least 3 nodes per axis".into()));
        }
        Ok(())
    }

    /// `n × n` nodes over the critical-point box padded by 10%.
    pub fn mueller_brown(n: usize) -> Result<Self, CommittorError> {
        GridSpec::new(MuellerBrown::default_critical_points().bounding_box(0.1), n, n)
    }

    pub fn hx(&self) -> f64 {
        (self.bounds[1] - self.bounds[0]) / (self.nx - 1) as f64
    }

    pub fn hy(&self) -> f64 {
        (self.bounds[3] - self.bounds[2]) / (self.ny - 1) as f64
    }

    pub fn node(&self, i: usize, j: usize) -> [f64; 2] {
        [self.bounds[0] + i as f64 * self.hx(), self.bounds[2] + j as f64 * self.hy()]
    }

    fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    /// Cell containing `x` and the fractional offsets inside it.
    fn locate(&self, x: &[f64]) -> Result<(usize, usize, f64, f64), CommittorError> {
        if x.len() != 2 {
            return Err(CommittorError::Dimension { expected: 2, got: x.len() });
        }
        let [x0, x1, y0, y1] = self.bounds;
        if !(x[0] >= x0 && x[0] <= x1 && x[1] >= y0 && x[1] <= y1) {
            return Err(CommittorError::OutsideGrid { point: x.to_vec() });
        }
        let fx = (x[0] - x0) / self.hx();
        let fy = (x[1] - y0) / self.hy();
        let i = (fx.floor() as usize).min(self.nx - 2);
        let j = (fy.floor() as usize).min(self.ny - 2);
        Ok((i, j, fx - i as f64, fy - j as f64))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Free,
    A,
    B,
}

/// Anything that maps configurations to a committor value with a gradient.
pub trait Committor {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> Result<f64, CommittorError>;
    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>, CommittorError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommittorGrid {
    pub spec: GridSpec,
    pub regions: RegionSpec,
    pub kt: f64,
    /// Node values, row-major with x varying fastest.
    pub values: Vec<f64>,
    pub kinds: Vec<NodeKind>,
    /// Boltzmann average of `|∇q|²` over the grid box, from the discrete
    /// Dirichlet form.
    pub mean_sq_gradient: f64,
    pub residual: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { tolerance: 1e-10, max_iterations: 200_000 }
    }
}

fn potential_at(field: &(impl DriftField + ?Sized), x: &[f64]) -> Result<f64, CommittorError> {
    field.potential(x).ok_or(CommittorError::NoPotential)
}

/// Solves `∇·(e^{−U/k_BT}∇q) = 0` with `q = 0` on A, `q = 1` on B and
/// reflecting outer walls, using a conservative five-point stencil with edge
/// weights evaluated at midpoints.
pub fn solve_bke_grid(
    field: &(impl DriftField + ?Sized),
    regions: &RegionSpec,
    spec: &GridSpec,
    kt: f64,
    solver: &SolverConfig,
) -> Result<CommittorGrid, CommittorError> {
    spec.validate()?;
    regions.validate()?;
    if field.dim() != 2 || regions.dim() != 2 {
        return Err(CommittorError::Dimension { expected: 2, got: field.dim() });
    }
    if !(kt > 0.0) {
        return Err(CommittorError::Config(format!("k_BT must be positive, got {kt}")));
    }
    let (nx, ny) = (spec.nx, spec.ny);
    let (hx, hy) = (spec.hx(), spec.hy());
    let n = nx * ny;

    let mut kinds = vec![NodeKind::Free; n];
    let mut node_u = vec![0.0; n];
    for j in 0..ny {
        for i in 0..nx {
            let p = spec.node(i, j);
            let idx = spec.index(i, j);
            node_u[idx] = potential_at(field, &p)?;
            kinds[idx] = if regions.a.contains(&p) {
                NodeKind::A
            } else if regions.b.contains(&p) {
                NodeKind::B
            } else {
                NodeKind::Free
            };
        }
    }
    if !kinds.contains(&NodeKind::A) || !kinds.contains(&NodeKind::B) {
        return Err(CommittorError::Regions("both regions must contain grid nodes".into()));
    }

    // edge weights, shifted by the lowest potential to keep exponents bounded
    let mut ex = vec![0.0; (nx - 1) * ny];
    let mut ey = vec![0.0; nx * (ny - 1)];
    for j in 0..ny {
        for i in 0..nx - 1 {
            let p = spec.node(i, j);
            ex[j * (nx - 1) + i] = potential_at(field, &[p[0] + 0.5 * hx, p[1]])?;
        }
    }
    for j in 0..ny - 1 {
        for i in 0..nx {
            let p = spec.node(i, j);
            ey[j * nx + i] = potential_at(field, &[p[0], p[1] + 0.5 * hy])?;
        }
    }
    let u_min = node_u.iter().chain(&ex).chain(&ey).copied().fold(f64::INFINITY, f64::min);
    if !u_min.is_finite() {
        return Err(CommittorError::Config("potential is not finite on the grid".into()));
    }
    let boltz = |u: f64| (-(u - u_min) / kt).exp();
    let wx: Vec<f64> = ex.iter().map(|u| boltz(*u) / (hx * hx)).collect();
    let wy: Vec<f64> = ey.iter().map(|u| boltz(*u) / (hy * hy)).collect();

    // compressed operator on the free nodes
    let mut unknown = vec![usize::MAX; n];
    let mut free = Vec::new();
    for (idx, k) in kinds.iter().enumerate() {
        if *k == NodeKind::Free {
            unknown[idx] = free.len();
            free.push(idx);
        }
    }
    let m = free.len();
    let mut diag = vec![0.0; m];
    let mut rhs = vec![0.0; m];
    let mut nbr_start = Vec::with_capacity(m + 1);
    let mut nbr: Vec<(usize, f64)> = Vec::with_capacity(4 * m);
    for (row, &idx) in free.iter().enumerate() {
        nbr_start.push(nbr.len());
        let (i, j) = (idx % nx, idx / nx);
        let mut links = Vec::with_capacity(4);
        if i > 0 {
            links.push((spec.index(i - 1, j), wx[j * (nx - 1) + i - 1]));
        }
        if i + 1 < nx {
            links.push((spec.index(i + 1, j), wx[j * (nx - 1) + i]));
        }
        if j > 0 {
            links.push((spec.index(i, j - 1), wy[(j - 1) * nx + i]));
        }
        if j + 1 < ny {
            links.push((spec.index(i, j + 1), wy[j * nx + i]));
        }
        for (q, w) in links {
            diag[row] += w;
            match kinds[q] {
                NodeKind::Free => nbr.push((unknown[q], w)),
                NodeKind::B => rhs[row] += w,
                NodeKind::A => {}
            }
        }
    }
    nbr_start.push(nbr.len());

    let apply = |x: &[f64], out: &mut [f64]| {
        for r in 0..m {
            let mut s = diag[r] * x[r];
            for &(c, w) in &nbr[nbr_start[r]..nbr_start[r + 1]] {
                s -= w * x[c];
            }
            out[r] = s;
        }
    };
    let (sol, residual, iterations) = pcg(m, &apply, &diag, &rhs, solver)?;

    let mut values: Vec<f64> = kinds.iter().map(|k| if *k == NodeKind::B { 1.0 } else { 0.0 }).collect();
    for (row, &idx) in free.iter().enumerate() {
        // the discrete maximum principle holds exactly; clamp round-off only
        values[idx] = sol[row].clamp(0.0, 1.0);
    }

    // trapezoid quadrature: boundary rows of edges and nodes carry half weight
    let half = |k: usize, n: usize| if k == 0 || k == n - 1 { 0.5 } else { 1.0 };
    let mut form = 0.0;
    for j in 0..ny {
        for i in 0..nx - 1 {
            let d = values[spec.index(i + 1, j)] - values[spec.index(i, j)];
            form += half(j, ny) * wx[j * (nx - 1) + i] * d * d;
        }
    }
    for j in 0..ny - 1 {
        for i in 0..nx {
            let d = values[spec.index(i, j + 1)] - values[spec.index(i, j)];
            form += half(i, nx) * wy[j * nx + i] * d * d;
        }
    }
    let mut z = 0.0;
    for j in 0..ny {
        for i in 0..nx {
            z += half(i, nx) * half(j, ny) * boltz(node_u[spec.index(i, j)]);
        }
    }
    let mean_sq_gradient = form / z;

    Ok(CommittorGrid {
        spec: spec.clone(),
        regions: regions.clone(),
        kt,
        values,
        kinds,
        mean_sq_gradient,
        residual,
        iterations,
    })
}

/// Jacobi-preconditioned conjugate gradients. The reported residual is
/// relative and measured in the diagonally scaled system.
fn pcg(
    m: usize,
    apply: &dyn Fn(&[f64], &mut [f64]),
    diag: &[f64],
    b: &[f64],
    cfg: &SolverConfig,
) -> Result<(Vec<f64>, f64, usize), CommittorError> {
    let inv: Vec<f64> = diag.iter().map(|d| 1.0 / d).collect();
    let scaled_norm = |r: &[f64]| r.iter().zip(&inv).map(|(r, i)| r * r * i).sum::<f64>().sqrt();
    let b_norm = scaled_norm(b);
    let mut x: Vec<f64> = (0..m).map(|r| b[r] * inv[r]).collect();
    let mut ax = vec![0.0; m];
    apply(&x, &mut ax);
    let mut r: Vec<f64> = (0..m).map(|i| b[i] - ax[i]).collect();
    if b_norm == 0.0 {
        return Ok((vec![0.0; m], 0.0, 0));
    }
    let mut z: Vec<f64> = r.iter().zip(&inv).map(|(r, i)| r * i).collect();
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    let mut ap = vec![0.0; m];
    let mut res = scaled_norm(&r) / b_norm;
    let mut it = 0;
    while res > cfg.tolerance && it < cfg.max_iterations {
        apply(&p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        let alpha = rz / pap;
        for i in 0..m {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        it += 1;
        // refresh the residual periodically to limit drift
        if it % 500 == 0 {
            apply(&x, &mut ax);
            for i in 0..m {
                r[i] = b[i] - ax[i];
            }
        }
        for i in 0..m {
            z[i] = r[i] * inv[i];
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..m {
            p[i] = z[i] + beta * p[i];
        }
        res = scaled_norm(&r) / b_norm;
    }
    apply(&x, &mut ax);
    let true_res = scaled_norm(&(0..m).map(|i| b[i] - ax[i]).collect::<Vec<_>>()) / b_norm;
    if !(true_res < 1e-8) {
        return Err(CommittorError::NoConvergence { residual: true_res, iterations: it });
    }
    log::debug!("bke solve: {it} iterations, residual {true_res:.3e}");
    Ok((x, true_res, it))
}

impl CommittorGrid {
    pub fn value_at(&self, i: usize, j: usize) -> f64 {
        self.values[self.spec.index(i, j)]
    }

    /// `(k_BT/γ)⟨|∇q|²⟩` under the Boltzmann density restricted to the box.
    pub fn rate(&self, gamma: f64) -> f64 {
        self.kt / gamma * self.mean_sq_gradient
    }

    /// Writes the node values as a CSV matrix (one row per y node) plus a
    /// JSON sidecar next to it.
    pub fn save(&self, csv_path: &Path) -> Result<GridSidecar, CommittorError> {
        let rows = (0..self.spec.ny).map(|j| (0..self.spec.nx).map(|i| self.value_at(i, j)).collect::<Vec<_>>());
        let sha = io::write_csv(csv_path, None, rows)?;
        let side = GridSidecar {
            grid: self.spec.clone(),
            regions: self.regions.clone(),
            kt: self.kt,
            mean_sq_gradient: self.mean_sq_gradient,
            residual: self.residual,
            iterations: self.iterations,
            csv_sha256: sha,
        };
        io::write_json(&sidecar_path(csv_path), &side)?;
        Ok(side)
    }

    pub fn load(csv_path: &Path) -> Result<Self, CommittorError> {
        let side: GridSidecar = io::read_json(&sidecar_path(csv_path))?;
        side.grid.validate()?;
        side.regions.validate()?;
        let bytes = io::read_verified(csv_path, &side.csv_sha256)?;
        let rows = io::parse_csv_at(csv_path, &bytes, Some(side.grid.nx), false)?;
        if rows.len() != side.grid.ny {
            return Err(CommittorError::Grid(format!("expected {} rows, found {}", side.grid.ny, rows.len())));
        }
        let values: Vec<f64> = rows.into_iter().flatten().collect();
        let mut kinds = Vec::with_capacity(values.len());
        for j in 0..side.grid.ny {
            for i in 0..side.grid.nx {
                let p = side.grid.node(i, j);
                kinds.push(if side.regions.a.contains(&p) {
                    NodeKind::A
                } else if side.regions.b.contains(&p) {
                    NodeKind::B
                } else {
                    NodeKind::Free
                });
            }
        }
        Ok(CommittorGrid {
            spec: side.grid,
            regions: side.regions,
            kt: side.kt,
            values,
            kinds,
            mean_sq_gradient: side.mean_sq_gradient,
            residual: side.residual,
            iterations: side.iterations,
        })
    }
}

fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSidecar {
    pub grid: GridSpec,
    pub regions: RegionSpec,
    pub kt: f64,
    pub mean_sq_gradient: f64,
    pub residual: f64,
    pub iterations: usize,
    pub csv_sha256: String,
}

impl Committor for CommittorGrid {
    fn dim(&self) -> usize {
        2
    }

    /// Bilinear interpolation of the node values.
    fn value(&self, x: &[f64]) -> Result<f64, CommittorError> {
        let (i, j, fx, fy) = self.spec.locate(x)?;
        let q = |a, b| self.value_at(a, b);
        Ok((1.0 - fx) * (1.0 - fy) * q(i, j)
            + fx * (1.0 - fy) * q(i + 1, j)
            + (1.0 - fx) * fy * q(i, j + 1)
            + fx * fy * q(i + 1, j + 1))
    }

    /// Gradient of the bilinear interpolant: differences across the cell.
    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>, CommittorError> {
        let (i, j, fx, fy) = self.spec.locate(x)?;
        let q = |a, b| self.value_at(a, b);
        let gx = ((1.0 - fy) * (q(i + 1, j) - q(i, j)) + fy * (q(i + 1, j + 1) - q(i, j + 1))) / self.spec.hx();
        let gy = ((1.0 - fx) * (q(i, j + 1) - q(i, j)) + fx * (q(i + 1, j + 1) - q(i + 1, j))) / self.spec.hy();
        Ok(vec![gx, gy])
    }
}

/// Points with normalized nonnegative weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSamples {
    pub points: Array2<f64>,
    pub weights: Vec<f64>,
}

impl WeightedSamples {
    /// Normalizes `weights` to unit sum.
    pub fn new(points: Array2<f64>, weights: Vec<f64>) -> Result<Self, CommittorError> {
        if points.nrows() == 0 {
            return Err(CommittorError::EmptySamples);
        }
        if weights.len() != points.nrows() {
            return Err(CommittorError::Weights(format!("{} weights for {} points", weights.len(), points.nrows())));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(CommittorError::Weights("weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(CommittorError::Weights("total weight is zero".into()));
        }
        let weights = weights.into_iter().map(|w| w / total).collect();
        Ok(WeightedSamples { points, weights })
    }

    pub fn uniform(points: Array2<f64>) -> Result<Self, CommittorError> {
        let n = points.nrows();
        WeightedSamples::new(points, vec![1.0; n])
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Kish effective sample size.
    pub fn effective_size(&self) -> f64 {
        1.0 / self.weights.iter().map(|w| w * w).sum::<f64>()
    }
}

/// Importance weights `w_i ∝ e^{−U(x_i)/k_BT} / p̂(x_i)` where `p̂` is a
/// histogram density over the samples' bounding box with one pseudo-count
/// per bin. Only 2D samples are supported.
pub fn reweight(
    samples: ArrayView2<f64>,
    field: &(impl DriftField + ?Sized),
    kt: f64,
    bins: (usize, usize),
) -> Result<WeightedSamples, CommittorError> {
    let n = samples.nrows();
    if n == 0 {
        return Err(CommittorError::EmptySamples);
    }
    if samples.ncols() != 2 {
        return Err(CommittorError::Dimension { expected: 2, got: samples.ncols() });
    }
    if bins.0 == 0 || bins.1 == 0 || !(kt > 0.0) {
        return Err(CommittorError::Config("bins and k_BT must be positive".into()));
    }
    let lo = [0, 1].map(|c| samples.column(c).iter().copied().fold(f64::INFINITY, f64::min));
    let hi = [0, 1].map(|c| samples.column(c).iter().copied().fold(f64::NEG_INFINITY, f64::max));
    let bin_of = |v: f64, c: usize, nb: usize| -> usize {
        let span = hi[c] - lo[c];
        if span <= 0.0 {
            return 0;
        }
        (((v - lo[c]) / span * nb as f64) as usize).min(nb - 1)
    };
    let mut counts = vec![0usize; bins.0 * bins.1];
    let mut cell = Vec::with_capacity(n);
    for row in samples.rows() {
        let b = bin_of(row[1], 1, bins.1) * bins.0 + bin_of(row[0], 0, bins.0);
        counts[b] += 1;
        cell.push(b);
    }
    // bin area is shared by all bins and cancels after normalization
    let mut logw = Vec::with_capacity(n);
    for (row, b) in samples.rows().into_iter().zip(&cell) {
        let u = potential_at(field, &[row[0], row[1]])?;
        logw.push(-u / kt - ((counts[*b] + 1) as f64).ln());
    }
    let top = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return Err(CommittorError::Weights("non-finite log weights".into()));
    }
    let w = logw.iter().map(|l| (l - top).exp()).collect();
    WeightedSamples::new(samples.to_owned(), w)
}

/// `(k_BT/γ) Σ_i w_i |∇q(x_i)|²`.
pub fn estimate_rate(
    committor: &(impl Committor + ?Sized),
    samples: &WeightedSamples,
    kt: f64,
    gamma: f64,
) -> Result<f64, CommittorError> {
    if samples.is_empty() {
        return Err(CommittorError::EmptySamples);
    }
    if !(kt > 0.0 && gamma > 0.0) {
        return Err(CommittorError::Config("k_BT and γ must be positive".into()));
    }
    let mut acc = 0.0;
    for (row, w) in samples.points.rows().into_iter().zip(&samples.weights) {
        let x = row.to_vec();
        let g = committor.gradient(&x)?;
        acc += w * g.iter().map(|v| v * v).sum::<f64>();
    }
    Ok(kt / gamma * acc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CommittorTrainConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Average the gradient term over samples outside A and B only.
    pub exclude_regions: bool,
    pub lambda_a: f64,
    pub lambda_b: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Cosine decay of the learning rate over all steps.
    pub cosine: bool,
    pub seed: u64,
}

impl Default for CommittorTrainConfig {
    fn default() -> Self {
        CommittorTrainConfig {
            hidden: vec![64; 4],
            activation: Activation::Sigmoid,
            exclude_regions: true,
            lambda_a: 20.0,
            lambda_b: 20.0,
            steps: 2000,
            batch_size: 4096,
            learning_rate: 1e-4,
            cosine: true,
            seed: 0,
        }
    }
}

impl CommittorTrainConfig {
    pub fn validate(&self) -> Result<(), CommittorError> {
        if self.batch_size == 0 || !(self.learning_rate > 0.0) || self.lambda_a < 0.0 || self.lambda_b < 0.0 {
            return Err(CommittorError::Config("batch size, learning rate and penalties must be positive".into()));
        }
        Ok(())
    }
}

/// Feed-forward committor with sigmoid output over standardized inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralCommittor {
    pub net: Mlp,
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
    pub regions: RegionSpec,
    pub lambda_a: f64,
    pub lambda_b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NeuralCommittorFile {
    format_version: u32,
    widths: Vec<usize>,
    shift: Vec<f64>,
    scale: Vec<f64>,
    regions: RegionSpec,
    lambda_a: f64,
    lambda_b: f64,
    #[serde(default = "tanh")]
    activation: Activation,
    params: Vec<f64>,
}

fn tanh() -> Activation {
    Activation::Tanh
}

impl NeuralCommittor {
    fn normalized(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(self.shift.iter().zip(&self.scale)).map(|(v, (m, s))| (v - m) / s).collect()
    }

    fn check(&self, x: &[f64]) -> Result<(), CommittorError> {
        if x.len() != self.shift.len() {
            return Err(CommittorError::Dimension { expected: self.shift.len(), got: x.len() });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), CommittorError> {
        let file = NeuralCommittorFile {
            format_version: 1,
            widths: self.net.widths().to_vec(),
            shift: self.shift.clone(),
            scale: self.scale.clone(),
            regions: self.regions.clone(),
            lambda_a: self.lambda_a,
            lambda_b: self.lambda_b,
            activation: self.net.hidden_activation(),
            params: self.net.params().to_vec(),
        };
        Ok(io::write_json(path, &file)?)
    }

    pub fn load(path: &Path) -> Result<Self, CommittorError> {
        let f: NeuralCommittorFile = io::read_json(path)?;
        if f.format_version != 1 {
            return Err(CommittorError::Config(format!("unsupported format version {}", f.format_version)));
        }
        let net = Mlp::from_params(&f.widths, f.activation, Activation::Sigmoid, f.params)?;
        Ok(NeuralCommittor {
            net,
            shift: f.shift,
            scale: f.scale,
            regions: f.regions,
            lambda_a: f.lambda_a,
            lambda_b: f.lambda_b,
        })
    }
}

impl Committor for NeuralCommittor {
    fn dim(&self) -> usize {
        self.shift.len()
    }

    fn value(&self, x: &[f64]) -> Result<f64, CommittorError> {
        self.check(x)?;
        let xn = self.normalized(x);
        let v = ArrayView2::from_shape((1, xn.len()), &xn).expect("single row");
        Ok(self.net.forward(v)?[(0, 0)])
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>, CommittorError> {
        self.check(x)?;
        let xn = self.normalized(x);
        let v = ArrayView2::from_shape((1, xn.len()), &xn).expect("single row");
        let tape = self.net.tape(v, None)?;
        let seed = Array2::ones((1, 1));
        let (xb, _) = self.net.backward(&tape, Some(seed.view()), None, None, true);
        let xb = xb.expect("input adjoint requested");
        Ok((0..xn.len()).map(|c| xb[(0, c)] / self.scale[c]).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommittorTrainReport {
    pub losses: Vec<f64>,
    pub n_a: usize,
    pub n_b: usize,
}

/// Minimizes `½⟨|∇q|²⟩ + λ_A·½⟨q²⟩_A + λ_B·½⟨(1−q)²⟩_B` over uniformly drawn
/// minibatches, each term a weighted mean within the batch. Parameter
/// gradients of the Dirichlet term use one tangent pass per coordinate.
pub fn train_committor(
    samples: &WeightedSamples,
    regions: &RegionSpec,
    cfg: &CommittorTrainConfig,
) -> Result<(NeuralCommittor, CommittorTrainReport), CommittorError> {
    cfg.validate()?;
    regions.validate()?;
    let n = samples.len();
    if n == 0 {
        return Err(CommittorError::EmptySamples);
    }
    let k = samples.points.ncols();
    if k != regions.dim() {
        return Err(CommittorError::Dimension { expected: regions.dim(), got: k });
    }
    let pts = &samples.points;
    let shift: Vec<f64> = (0..k).map(|c| pts.column(c).mean().unwrap_or(0.0)).collect();
    let scale: Vec<f64> = (0..k)
        .map(|c| {
            let sd = pts.column(c).std(0.0);
            if sd > 1e-12 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    let label: Vec<NodeKind> = pts
        .rows()
        .into_iter()
        .map(|r| {
            let x = r.to_vec();
            if regions.a.contains(&x) {
                NodeKind::A
            } else if regions.b.contains(&x) {
                NodeKind::B
            } else {
                NodeKind::Free
            }
        })
        .collect();
    let n_a = label.iter().filter(|l| **l == NodeKind::A).count();
    let n_b = label.iter().filter(|l| **l == NodeKind::B).count();
    if n_a == 0 || n_b == 0 {
        log::warn!("committor training without samples in {}", if n_a == 0 { "A" } else { "B" });
    }

    let mut widths = vec![k];
    widths.extend(&cfg.hidden);
    widths.push(1);
    let mut init = rng::stream(cfg.seed, 0xc0);
    let net = Mlp::new(&widths, cfg.activation, Activation::Sigmoid, 1.0, &mut init)?;
    let mut model = NeuralCommittor {
        net,
        shift,
        scale,
        regions: regions.clone(),
        lambda_a: cfg.lambda_a,
        lambda_b: cfg.lambda_b,
    };
    let np = model.net.params().len();
    let mut adam = Adam::new(np);
    let mut grad = vec![0.0; np];
    let mut rng = rng::stream(cfg.seed, 0xc1);
    let b = cfg.batch_size.min(n);
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut input = Array2::zeros((k * b, k));
    let mut tangent = Array2::zeros((k * b, k));
    for c in 0..k {
        for i in 0..b {
            tangent[(c * b + i, c)] = 1.0 / model.scale[c];
        }
    }
    let mut idx = vec![0usize; b];
    for step in 0..cfg.steps {
        for slot in idx.iter_mut() {
            *slot = if b == n { 0 } else { rng.random_range(0..n) };
        }
        if b == n {
            idx.iter_mut().enumerate().for_each(|(i, s)| *s = i);
        }
        for (i, &s) in idx.iter().enumerate() {
            for c in 0..k {
                let v = (pts[(s, c)] - model.shift[c]) / model.scale[c];
                for copy in 0..k {
                    input[(copy * b + i, c)] = v;
                }
            }
        }
        let w: Vec<f64> = idx.iter().map(|&s| samples.weights[s]).collect();
        let wt: f64 = w.iter().sum();
        let wa: f64 = idx.iter().zip(&w).filter(|(s, _)| label[**s] == NodeKind::A).map(|(_, w)| w).sum();
        let wb: f64 = idx.iter().zip(&w).filter(|(s, _)| label[**s] == NodeKind::B).map(|(_, w)| w).sum();
        let wd = if cfg.exclude_regions { wt - wa - wb } else { wt };
        if !(wt > 0.0) {
            continue;
        }

        let tape = model.net.tape(input.view(), Some(tangent.view()))?;
        let q = tape.output();
        let qd = tape.output_tangent().expect("tangent tape");
        let mut hbar = Array2::zeros((k * b, 1));
        let mut hdbar = Array2::zeros((k * b, 1));
        let mut loss = 0.0;
        for (i, &s) in idx.iter().enumerate() {
            let free = !cfg.exclude_regions || label[s] == NodeKind::Free;
            let a = if free && wd > 0.0 { w[i] / wd } else { 0.0 };
            for c in 0..k {
                let g = qd[(c * b + i, 0)];
                loss += 0.5 * a * g * g;
                hdbar[(c * b + i, 0)] = a * g;
            }
            let qi = q[(i, 0)];
            match label[s] {
                NodeKind::A if wa > 0.0 => {
                    let beta = cfg.lambda_a * w[i] / wa;
                    loss += 0.5 * beta * qi * qi;
                    hbar[(i, 0)] = beta * qi;
                }
                NodeKind::B if wb > 0.0 => {
                    let beta = cfg.lambda_b * w[i] / wb;
                    loss += 0.5 * beta * (1.0 - qi).powi(2);
                    hbar[(i, 0)] = -beta * (1.0 - qi);
                }
                _ => {}
            }
        }
        if !loss.is_finite() {
            return Err(CommittorError::Divergent { step, loss });
        }
        losses.push(loss);
        grad.iter_mut().for_each(|g| *g = 0.0);
        model.net.backward(&tape, Some(hbar.view()), Some(hdbar.view()), Some(&mut grad), false);
        let lr = if cfg.cosine { cosine_lr(cfg.learning_rate, step, cfg.steps) } else { cfg.learning_rate };
        adam.step(model.net.params_mut(), &grad, lr);
    }
    Ok((model, CommittorTrainReport { losses, n_a, n_b }))
}

/// Runs `n_sims` unbiased trajectories started from path points drawn
/// uniformly at random and pools every saved state. With zero steps the path
/// points themselves are returned.
pub fn seed_sampling_from_path(
    path: &OmPath,
    field: &(impl DriftField + ?Sized),
    sim: &SimConfig,
    n_sims: usize,
) -> Result<Array2<f64>, CommittorError> {
    if path.n_points() == 0 {
        return Err(CommittorError::EmptySamples);
    }
    if sim.steps == 0 {
        return Ok(path.points().to_owned());
    }
    if n_sims == 0 {
        return Err(CommittorError::Config("need at least one simulation".into()));
    }
    let mut rng = rng::stream(sim.seed, u64::MAX);
    let inits: Vec<Vec<f64>> =
        (0..n_sims).map(|_| path.point_vec(rng.random_range(0..path.n_points()))).collect();
    let trajs = langevin::simulate(field, &inits, sim)?;
    Ok(langevin::pool(&trajs)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{DoubleWell, LinearPotential, Quadratic};

    fn strip(n: usize) -> (RegionSpec, GridSpec) {
        let regions = RegionSpec::new(
            Region::Rect { min: vec![-0.01, -0.01], max: vec![0.001, 1.01] },
            Region::Rect { min: vec![0.999, -0.01], max: vec![1.01, 1.01] },
        )
        .unwrap();
        (regions, GridSpec::new([0.0, 1.0, 0.0, 1.0], n, n).unwrap())
    }

    #[test]
    fn flat_strip_is_linear() {
        let flat = LinearPotential::new(vec![0.0, 0.0]);
        let (regions, grid) = strip(41);
        let q = solve_bke_grid(&flat, &regions, &grid, 1.0, &SolverConfig::default()).unwrap();
        for j in 0..41 {
            for i in 0..41 {
                let x = grid.node(i, j)[0];
                assert!((q.value_at(i, j) - x).abs() < 1e-6);
            }
        }
        assert!(q.residual < 1e-8);
        // width 1: ⟨|∇q|²⟩ = 1
        assert!((q.mean_sq_gradient - 1.0).abs() < 1e-6);
        assert!((q.rate(2.0) - 0.5).abs() < 1e-6);
        let g = q.gradient(&[0.37, 0.6]).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-6 && g[1].abs() < 1e-6);
        assert!((q.value(&[0.37, 0.6]).unwrap() - 0.37).abs() < 1e-6);
        assert!(matches!(q.value(&[1.5, 0.0]), Err(CommittorError::OutsideGrid { .. })));
    }

    #[test]
    fn symmetric_double_well_is_half_on_the_mirror_line() {
        let dw = DoubleWell::new(2, 1.0, 1.0).unwrap();
        let regions = RegionSpec::new(
            Region::Disk { center: vec![-1.0, 0.0], radius: 0.23 },
            Region::Disk { center: vec![1.0, 0.0], radius: 0.23 },
        )
        .unwrap();
        let grid = GridSpec::new([-1.5, 1.5, -1.0, 1.0], 61, 41).unwrap();
        let q = solve_bke_grid(&dw, &regions, &grid, 0.5, &SolverConfig::default()).unwrap();
        for j in 0..41 {
            assert!((q.value_at(30, j) - 0.5).abs() < 1e-3);
        }
        assert!(q.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn overlapping_regions_rejected() {
        let d = |x: f64, r: f64| Region::Disk { center: vec![x, 0.0], radius: r };
        assert!(RegionSpec::new(d(0.0, 1.0), d(1.5, 1.0)).is_err());
        assert!(RegionSpec::new(d(0.0, 1.0), d(2.5, 1.0)).is_ok());
        let r = Region::Rect { min: vec![0.5, -1.0], max: vec![1.0, 1.0] };
        assert!(RegionSpec::new(d(0.0, 0.6), r.clone()).is_err());
        assert!(RegionSpec::new(d(0.0, 0.4), r).is_ok());
    }

    #[test]
    fn regions_without_nodes_rejected() {
        let flat = LinearPotential::new(vec![0.0, 0.0]);
        let regions = RegionSpec::new(
            Region::Disk { center: vec![5.0, 5.0], radius: 0.1 },
            Region::Disk { center: vec![0.5, 0.5], radius: 0.2 },
        )
        .unwrap();
        let grid = GridSpec::new([0.0, 1.0, 0.0, 1.0], 11, 11).unwrap();
        assert!(solve_bke_grid(&flat, &regions, &grid, 1.0, &SolverConfig::default()).is_err());
    }

    #[test]
    fn grid_round_trip() {
        let flat = LinearPotential::new(vec![0.3, 0.0]);
        let (regions, grid) = strip(11);
        let q = solve_bke_grid(&flat, &regions, &grid, 1.0, &SolverConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.csv");
        q.save(&p).unwrap();
        let back = CommittorGrid::load(&p).unwrap();
        assert_eq!(back, q);
    }

    #[test]
    fn reweight_edge_cases() {
        let q = Quadratic::isotropic(2, 1.0);
        let one = Array2::from_shape_vec((3, 2), vec![0.5, 0.5, 0.5, 0.5, 0.5, 0.5]).unwrap();
        let w = reweight(one.view(), &q, 1.0, (10, 10)).unwrap();
        assert!(w.weights.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        let single = Array2::from_shape_vec((1, 2), vec![0.1, 0.2]).unwrap();
        assert_eq!(reweight(single.view(), &q, 1.0, (5, 5)).unwrap().weights, vec![1.0]);
        assert!(reweight(Array2::zeros((0, 2)).view(), &q, 1.0, (5, 5)).is_err());
    }

    #[test]
    fn constant_committor_has_zero_rate() {
        let flat = LinearPotential::new(vec![0.0, 0.0]);
        let (regions, grid) = strip(11);
        let mut q = solve_bke_grid(&flat, &regions, &grid, 1.0, &SolverConfig::default()).unwrap();
        q.values.iter_mut().for_each(|v| *v = 0.5);
        let s = WeightedSamples::uniform(Array2::from_shape_vec((2, 2), vec![0.2, 0.2, 0.7, 0.9]).unwrap()).unwrap();
        assert_eq!(estimate_rate(&q, &s, 1.0, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn neural_input_gradient_matches_fd() {
        let (regions, _) = strip(5);
        let mut r = rng::seeded(1);
        let net = Mlp::new(&[2, 8, 8, 1], Activation::Tanh, Activation::Sigmoid, 1.0, &mut r).unwrap();
        let c = NeuralCommittor { net, shift: vec![0.5, 0.5], scale: vec![0.3, 0.2], regions, lambda_a: 1.0, lambda_b: 1.0 };
        let x = [0.4, 0.7];
        let g = c.gradient(&x).unwrap();
        for k in 0..2 {
            let mut p = x.to_vec();
            p[k] += 1e-6;
            let up = c.value(&p).unwrap();
            p[k] -= 2e-6;
            let dn = c.value(&p).unwrap();
            assert!((g[k] - (up - dn) / 2e-6).abs() < 1e-7);
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        c.save(&p).unwrap();
        assert_eq!(NeuralCommittor::load(&p).unwrap(), c);
    }
}
