use std::fmt;
use std::sync::Arc;

use super::{AnalyticPotential, DriftField, FieldError};

/// Separable quadratic well `φ = ½ Σ k_c (x_c − c_c)²`.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadratic {
    center: Vec<f64>,
    stiffness: Vec<f64>,
}

impl Quadratic {
    pub fn new(center: Vec<f64>, stiffness: Vec<f64>) -> Result<Self, FieldError> {
        if center.is_empty() || center.len() != stiffness.len() {
            return Err(FieldError::Invalid(format!(
                "center has {} coordinates, stiffness has {}",
                center.len(),
                stiffness.len()
            )));
        }
        if stiffness.iter().any(|k| !k.is_finite()) || center.iter().any(|c| !c.is_finite()) {
            return Err(FieldError::Invalid("non-finite quadratic parameters".into()));
        }
        Ok(Quadratic { center, stiffness })
    }

    pub fn isotropic(dim: usize, k: f64) -> Self {
        Quadratic { center: vec![0.0; dim], stiffness: vec![k; dim] }
    }
}

impl AnalyticPotential for Quadratic {
    fn dim(&self) -> usize {
        self.center.len()
    }
    fn value(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(&self.center)
            .zip(&self.stiffness)
            .map(|((x, c), k)| 0.5 * k * (x - c) * (x - c))
            .sum()
    }
    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.center).zip(&self.stiffness).map(|((x, c), k)| k * (x - c)).collect()
    }
    fn hessian(&self, _x: &[f64]) -> Vec<f64> {
        let k = self.center.len();
        let mut h = vec![0.0; k * k];
        for (i, s) in self.stiffness.iter().enumerate() {
            h[i * k + i] = *s;
        }
        h
    }
    fn third_contract(&self, _x: &[f64], _u: &[f64], _v: &[f64]) -> Vec<f64> {
        vec![0.0; self.center.len()]
    }
}

/// Linear potential `φ = g·x`, a constant drift `−g`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPotential {
    gradient: Vec<f64>,
}

impl LinearPotential {
    pub fn new(gradient: Vec<f64>) -> Self {
        LinearPotential { gradient }
    }
}

impl AnalyticPotential for LinearPotential {
    fn dim(&self) -> usize {
        self.gradient.len()
    }
    fn value(&self, x: &[f64]) -> f64 {
        x.iter().zip(&self.gradient).map(|(a, b)| a * b).sum()
    }
    fn gradient(&self, _x: &[f64]) -> Vec<f64> {
        self.gradient.clone()
    }
    fn hessian(&self, _x: &[f64]) -> Vec<f64> {
        vec![0.0; self.gradient.len().pow(2)]
    }
    fn third_contract(&self, _x: &[f64], _u: &[f64], _v: &[f64]) -> Vec<f64> {
        vec![0.0; self.gradient.len()]
    }
}

/// Double well along the first axis with harmonic transverse directions:
/// `φ = h (x₀² − 1)² + ½ κ Σ_{c≥1} x_c²`.
#[derive(Debug, Clone, PartialEq)]
pub struct DoubleWell {
    dim: usize,
    barrier: f64,
    transverse: f64,
}

impl DoubleWell {
    pub fn new(dim: usize, barrier: f64, transverse: f64) -> Result<Self, FieldError> {
        if dim == 0 || !(barrier > 0.0) || !(transverse >= 0.0) {
            return Err(FieldError::Invalid(format!(
                "double well needs dim ≥ 1, barrier > 0, stiffness ≥ 0 (got {dim}, {barrier}, {transverse})"
            )));
        }
        Ok(DoubleWell { dim, barrier, transverse })
    }
}

impl AnalyticPotential for DoubleWell {
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, x: &[f64]) -> f64 {
        let w = x[0] * x[0] - 1.0;
        self.barrier * w * w + 0.5 * self.transverse * x[1..].iter().map(|c| c * c).sum::<f64>()
    }
    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g: Vec<f64> = x.iter().map(|c| self.transverse * c).collect();
        g[0] = 4.0 * self.barrier * x[0] * (x[0] * x[0] - 1.0);
        g
    }
    fn hessian(&self, x: &[f64]) -> Vec<f64> {
        let k = self.dim;
        let mut h = vec![0.0; k * k];
        for i in 1..k {
            h[i * k + i] = self.transverse;
        }
        h[0] = self.barrier * (12.0 * x[0] * x[0] - 4.0);
        h
    }
    fn third_contract(&self, x: &[f64], u: &[f64], v: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; self.dim];
        t[0] = 24.0 * self.barrier * x[0] * u[0] * v[0];
        t
    }
}

/// Linear drift `Φ(x) = M x` with a row-major matrix `M`. Not a gradient field
/// unless `M` is symmetric, so it carries no potential.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearDrift {
    dim: usize,
    matrix: Vec<f64>,
}

impl LinearDrift {
    pub fn new(dim: usize, matrix: Vec<f64>) -> Result<Self, FieldError> {
        if matrix.len() != dim * dim {
            return Err(FieldError::Invalid(format!("matrix must have {} entries", dim * dim)));
        }
        Ok(LinearDrift { dim, matrix })
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let k = diag.len();
        let mut matrix = vec![0.0; k * k];
        for (i, d) in diag.iter().enumerate() {
            matrix[i * k + i] = *d;
        }
        LinearDrift { dim: k, matrix }
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.matrix[i * self.dim + i]).sum()
    }
}

impl DriftField for LinearDrift {
    fn dim(&self) -> usize {
        self.dim
    }
    fn drift(&self, x: &[f64]) -> Vec<f64> {
        let k = self.dim;
        (0..k).map(|a| (0..k).map(|b| self.matrix[a * k + b] * x[b]).sum()).collect()
    }
    fn drift_vjp(&self, _x: &[f64], w: &[f64]) -> Vec<f64> {
        let k = self.dim;
        (0..k).map(|m| (0..k).map(|a| w[a] * self.matrix[a * k + m]).sum()).collect()
    }
    fn jacobian_form(&self, _x: &[f64], u: &[f64], v: &[f64]) -> Result<(f64, Vec<f64>), FieldError> {
        let mv = self.drift(v);
        Ok((u.iter().zip(&mv).map(|(a, b)| a * b).sum(), vec![0.0; self.dim]))
    }
    fn has_exact_divergence(&self) -> bool {
        true
    }
}

type DriftFn = dyn Fn(&[f64]) -> Vec<f64> + Send + Sync;

/// Drift given only as a function. Jacobian products fall back to central
/// differences and there is no exact divergence.
#[derive(Clone)]
pub struct ClosureField {
    dim: usize,
    f: Arc<DriftFn>,
}

impl fmt::Debug for ClosureField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ClosureField").field("dim", &self.dim).finish_non_exhaustive()
    }
}

impl ClosureField {
    pub fn new(dim: usize, f: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static) -> Self {
        ClosureField { dim, f: Arc::new(f) }
    }
}

impl DriftField for ClosureField {
    fn dim(&self) -> usize {
        self.dim
    }
    fn drift(&self, x: &[f64]) -> Vec<f64> {
        (self.f)(x)
    }
    fn drift_vjp(&self, x: &[f64], w: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        let mut p = x.to_vec();
        (0..self.dim)
            .map(|m| {
                let x0 = p[m];
                p[m] = x0 + h;
                let fp = (self.f)(&p);
                p[m] = x0 - h;
                let fm = (self.f)(&p);
                p[m] = x0;
                w.iter().zip(fp.iter().zip(&fm)).map(|(w, (a, b))| w * (a - b)).sum::<f64>() / (2.0 * h)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_drift_trace_and_products() {
        let f = LinearDrift::new(2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(f.trace(), 5.0);
        assert_eq!(f.drift(&[1.0, 1.0]), vec![3.0, 7.0]);
        assert_eq!(f.drift_vjp(&[0.0, 0.0], &[1.0, 0.0]), vec![1.0, 2.0]);
        assert_eq!(crate::fields::divergence(&f, &[0.3, 0.1]).unwrap(), 5.0);
    }

    #[test]
    fn closure_vjp_is_close_to_exact() {
        let f = ClosureField::new(2, |x: &[f64]| vec![x[0] * x[1], x[1] * x[1]]);
        let g = f.drift_vjp(&[1.0, 2.0], &[1.0, 1.0]);
        assert!((g[0] - 2.0).abs() < 1e-6 && (g[1] - 5.0).abs() < 1e-6);
    }

    #[test]
    fn double_well_stationary_points() {
        let w = DoubleWell::new(1, 1.0, 0.0).unwrap();
        assert_eq!(w.gradient(&[1.0]), vec![0.0]);
        assert_eq!(w.gradient(&[0.0]), vec![0.0]);
        assert_eq!(w.value(&[0.0]), 1.0);
    }
}
