//! Drift providers for overdamped Langevin dynamics.
//!
//! A [`DriftField`] exposes the drift `Φ(x) = −∇φ(x)` together with the
//! Jacobian products the action gradient needs. Analytic potentials implement
//! [`AnalyticPotential`] and get the drift contract for free; learned score
//! fields implement [`DriftField`] directly and have no scalar potential.

mod mixture;
mod mueller_brown;
mod simple;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use mixture::{mixture_noised_score, GaussianMixture};
pub use mueller_brown::{CriticalPoints, GaussianTerm, MuellerBrown, StationaryPoint};
pub use simple::{ClosureField, DoubleWell, LinearDrift, LinearPotential, Quadratic};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldError {
    #[error("dimension mismatch: field has dimension {expected}, point has {got}")]
    Dimension { expected: usize, got: usize },
    #[error("field does not provide {0}")]
    Unsupported(&'static str),
    #[error("invalid field parameters: {0}")]
    Invalid(String),
}

/// Drift provider contract.
///
/// Implementations must be pure: every method may be called concurrently.
pub trait DriftField: Sync {
    fn dim(&self) -> usize;

    /// Scalar potential φ, when the field has one.
    fn potential(&self, _x: &[f64]) -> Option<f64> {
        None
    }

    fn drift(&self, x: &[f64]) -> Vec<f64>;

    /// Vector-Jacobian product `wᵀ ∂Φ/∂x`.
    fn drift_vjp(&self, x: &[f64], w: &[f64]) -> Vec<f64>;

    /// The bilinear form `uᵀ (∂Φ/∂x) v` and its gradient with respect to `x`.
    fn jacobian_form(
        &self,
        _x: &[f64],
        _u: &[f64],
        _v: &[f64],
    ) -> Result<(f64, Vec<f64>), FieldError> {
        Err(FieldError::Unsupported("Jacobian-vector products"))
    }

    /// Whether [`DriftField::weighted_divergence`] is available in closed form.
    fn has_exact_divergence(&self) -> bool {
        false
    }

    /// `Σ_c w_c ∂Φ_c/∂x_c` and its gradient with respect to `x`.
    ///
    /// Unit weights give the divergence. The default sums exact Jacobian forms
    /// over the coordinate basis.
    fn weighted_divergence(
        &self,
        x: &[f64],
        weights: &[f64],
    ) -> Result<(f64, Vec<f64>), FieldError> {
        if !self.has_exact_divergence() {
            return Err(FieldError::Unsupported("an exact divergence"));
        }
        let k = self.dim();
        let mut value = 0.0;
        let mut grad = vec![0.0; k];
        let mut e = vec![0.0; k];
        for c in 0..k {
            if weights[c] == 0.0 {
                continue;
            }
            e[c] = 1.0;
            let (q, g) = self.jacobian_form(x, &e, &e)?;
            e[c] = 0.0;
            value += weights[c] * q;
            for (acc, gi) in grad.iter_mut().zip(&g) {
                *acc += weights[c] * gi;
            }
        }
        Ok((value, grad))
    }
}

/// A potential with analytic derivatives up to third order.
pub trait AnalyticPotential: Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> Vec<f64>;
    /// Row-major `k × k` Hessian.
    fn hessian(&self, x: &[f64]) -> Vec<f64>;
    /// `Σ_ab u_a v_b ∂³φ/∂x_a∂x_b∂x_m` for every `m`.
    fn third_contract(&self, x: &[f64], u: &[f64], v: &[f64]) -> Vec<f64>;

    fn laplacian(&self, x: &[f64]) -> f64 {
        let k = self.dim();
        let h = self.hessian(x);
        (0..k).map(|i| h[i * k + i]).sum()
    }
}

impl<P: AnalyticPotential> DriftField for P {
    fn dim(&self) -> usize {
        AnalyticPotential::dim(self)
    }

    fn potential(&self, x: &[f64]) -> Option<f64> {
        Some(self.value(x))
    }

    fn drift(&self, x: &[f64]) -> Vec<f64> {
        self.gradient(x).into_iter().map(|g| -g).collect()
    }

    fn drift_vjp(&self, x: &[f64], w: &[f64]) -> Vec<f64> {
        let k = AnalyticPotential::dim(self);
        let h = self.hessian(x);
        (0..k)
            .map(|m| -(0..k).map(|a| w[a] * h[a * k + m]).sum::<f64>())
            .collect()
    }

    fn jacobian_form(&self, x: &[f64], u: &[f64], v: &[f64]) -> Result<(f64, Vec<f64>), FieldError> {
        let k = AnalyticPotential::dim(self);
        let h = self.hessian(x);
        let mut q = 0.0;
        for a in 0..k {
            for b in 0..k {
                q -= u[a] * h[a * k + b] * v[b];
            }
        }
        let g = self.third_contract(x, u, v).into_iter().map(|t| -t).collect();
        Ok((q, g))
    }

    fn has_exact_divergence(&self) -> bool {
        true
    }
}

fn check_dim(field: &(impl DriftField + ?Sized), x: &[f64]) -> Result<(), FieldError> {
    if x.len() != field.dim() {
        return Err(FieldError::Dimension { expected: field.dim(), got: x.len() });
    }
    Ok(())
}

/// Drift at `x`, with a dimension check.
pub fn drift(field: &(impl DriftField + ?Sized), x: &[f64]) -> Result<Vec<f64>, FieldError> {
    check_dim(field, x)?;
    Ok(field.drift(x))
}

/// Exact divergence `∇·Φ(x)`; fails for fields without analytic second
/// derivatives, which must go through the Hutchinson estimator instead.
pub fn divergence(field: &(impl DriftField + ?Sized), x: &[f64]) -> Result<f64, FieldError> {
    check_dim(field, x)?;
    let ones = vec![1.0; field.dim()];
    Ok(field.weighted_divergence(x, &ones)?.0)
}

/// Müller-Brown energy at a 2D point.
pub fn mb_potential(point: [f64; 2]) -> f64 {
    MuellerBrown::default().value(&point)
}

/// Label set for the units of a system. The numerics are unit-agnostic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnitSystem {
    pub length: String,
    pub energy: String,
    pub time: String,
}

impl Default for UnitSystem {
    fn default() -> Self {
        UnitSystem {
            length: "dimensionless".into(),
            energy: "dimensionless".into(),
            time: "dimensionless".into(),
        }
    }
}

/// JSON description of an analytic field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldSpec {
    MuellerBrown {
        #[serde(default)]
        terms: Option<Vec<GaussianTerm>>,
    },
    GaussianMixture {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        variance: f64,
    },
    Quadratic {
        center: Vec<f64>,
        stiffness: Vec<f64>,
    },
    Linear {
        gradient: Vec<f64>,
    },
    DoubleWell {
        dim: usize,
        barrier: f64,
        #[serde(default = "default_transverse")]
        transverse_stiffness: f64,
    },
}

fn default_transverse() -> f64 {
    1.0
}

/// A field built from a [`FieldSpec`].
#[derive(Debug, Clone)]
pub enum AnyField {
    MuellerBrown(MuellerBrown),
    GaussianMixture(GaussianMixture),
    Quadratic(Quadratic),
    Linear(LinearPotential),
    DoubleWell(DoubleWell),
}

impl FieldSpec {
    pub fn build(&self) -> Result<AnyField, FieldError> {
        Ok(match self {
            FieldSpec::MuellerBrown { terms: None } => AnyField::MuellerBrown(MuellerBrown::default()),
            FieldSpec::MuellerBrown { terms: Some(t) } => {
                let terms: [GaussianTerm; 4] = t.clone().try_into().map_err(|t: Vec<_>| {
                    FieldError::Invalid(format!("Müller-Brown needs exactly 4 terms, got {}", t.len()))
                })?;
                AnyField::MuellerBrown(MuellerBrown::new(terms))
            }
            FieldSpec::GaussianMixture { weights, means, variance } => {
                AnyField::GaussianMixture(GaussianMixture::new(weights.clone(), means.clone(), *variance)?)
            }
            FieldSpec::Quadratic { center, stiffness } => {
                AnyField::Quadratic(Quadratic::new(center.clone(), stiffness.clone())?)
            }
            FieldSpec::Linear { gradient } => AnyField::Linear(LinearPotential::new(gradient.clone())),
            FieldSpec::DoubleWell { dim, barrier, transverse_stiffness } => {
                AnyField::DoubleWell(DoubleWell::new(*dim, *barrier, *transverse_stiffness)?)
            }
        })
    }

    pub fn from_json(text: &str) -> Result<AnyField, FieldError> {
        let spec: FieldSpec =
            serde_json::from_str(text).map_err(|e| FieldError::Invalid(e.to_string()))?;
        spec.build()
    }
}

macro_rules! dispatch {
    ($self:ident, $f:ident => $body:expr) => {
        match $self {
            AnyField::MuellerBrown($f) => $body,
            AnyField::GaussianMixture($f) => $body,
            AnyField::Quadratic($f) => $body,
            AnyField::Linear($f) => $body,
            AnyField::DoubleWell($f) => $body,
        }
    };
}

impl AnalyticPotential for AnyField {
    fn dim(&self) -> usize {
        dispatch!(self, f => AnalyticPotential::dim(f))
    }
    fn value(&self, x: &[f64]) -> f64 {
        dispatch!(self, f => f.value(x))
    }
    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        dispatch!(self, f => f.gradient(x))
    }
    fn hessian(&self, x: &[f64]) -> Vec<f64> {
        dispatch!(self, f => f.hessian(x))
    }
    fn third_contract(&self, x: &[f64], u: &[f64], v: &[f64]) -> Vec<f64> {
        dispatch!(self, f => f.third_contract(x, u, v))
    }
}
