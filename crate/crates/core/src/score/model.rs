use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::{FlowSchedule, NoiseScheduleDDPM, ScoreError};
use crate::fields::{DriftField, FieldError};
use crate::nn::{time_embedding, Mlp};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum Variant {
    Ddpm { schedule: NoiseScheduleDDPM },
    Flow { schedule: FlowSchedule },
}

/// Network plus schedule. For DDPM the network predicts the added noise `ε`;
/// for flow matching it predicts the velocity `u`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreModel {
    pub(crate) variant: Variant,
    pub(crate) net: Mlp,
    pub(crate) n_freq: usize,
    pub(crate) shift: Vec<f64>,
    pub(crate) scale: f64,
    pub(crate) seed: u64,
    pub(crate) train_digest: String,
    /// Euler steps per unit time for flow encode/decode.
    pub ode_steps: usize,
}

impl ScoreModel {
    pub fn new(
        variant: Variant,
        net: Mlp,
        n_freq: usize,
        shift: Vec<f64>,
        scale: f64,
    ) -> Result<Self, ScoreError> {
        let k = shift.len();
        if net.input_width() != k + 2 * n_freq || net.output_width() != k {
            return Err(ScoreError::Config(format!(
                "network widths {:?} do not fit dimension {k} with {n_freq} frequencies",
                net.widths()
            )));
        }
        if !(scale > 0.0) {
            return Err(ScoreError::Config(format!("data scale must be positive, got {scale}")));
        }
        Ok(ScoreModel { variant, net, n_freq, shift, scale, seed: 0, train_digest: String::new(), ode_steps: 100 })
    }

    pub fn variant(&self) -> &Variant {
        &self.variant
    }
    pub fn net(&self) -> &Mlp {
        &self.net
    }
    pub fn dim(&self) -> usize {
        self.shift.len()
    }
    pub fn shift(&self) -> &[f64] {
        &self.shift
    }
    pub fn scale(&self) -> f64 {
        self.scale
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn train_digest(&self) -> &str {
        &self.train_digest
    }

    /// Embedding argument: `τ/T` for DDPM, `τ` for flows.
    pub(crate) fn time_feature(&self, tau: f64) -> f64 {
        match &self.variant {
            Variant::Ddpm { schedule } => tau / schedule.steps() as f64,
            Variant::Flow { .. } => tau,
        }
    }

    pub(crate) fn normalize(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut out = x.to_owned();
        for mut row in out.rows_mut() {
            for (v, m) in row.iter_mut().zip(&self.shift) {
                *v = (*v - m) / self.scale;
            }
        }
        out
    }

    pub(crate) fn denormalize(&self, xn: ArrayView2<f64>) -> Array2<f64> {
        let mut out = xn.to_owned();
        for mut row in out.rows_mut() {
            for (v, m) in row.iter_mut().zip(&self.shift) {
                *v = *v * self.scale + m;
            }
        }
        out
    }

    /// Network input `[x_n, embed(τ)]` for normalized coordinates.
    pub(crate) fn net_input(&self, xn: ArrayView2<f64>, tau: f64) -> Array2<f64> {
        let k = self.dim();
        let mut input = Array2::zeros((xn.nrows(), k + 2 * self.n_freq));
        let mut emb = vec![0.0; 2 * self.n_freq];
        time_embedding(self.time_feature(tau), self.n_freq, &mut emb);
        for (mut row, x) in input.rows_mut().into_iter().zip(xn.rows()) {
            for c in 0..k {
                row[c] = x[c];
            }
            for (j, e) in emb.iter().enumerate() {
                row[k + j] = *e;
            }
        }
        input
    }

    fn check_points(&self, x: &ArrayView2<f64>) -> Result<(), ScoreError> {
        if x.ncols() != self.dim() {
            return Err(ScoreError::Dimension { expected: self.dim(), got: x.ncols() });
        }
        Ok(())
    }

    /// Raw network output (ε or u, in normalized units) at data points.
    pub fn predict(&self, x: ArrayView2<f64>, tau: f64) -> Result<Array2<f64>, ScoreError> {
        self.check_points(&x)?;
        self.check_time(tau, false)?;
        let xn = self.normalize(x);
        Ok(self.net.forward(self.net_input(xn.view(), tau).view())?)
    }

    pub(crate) fn predict_normalized(&self, xn: ArrayView2<f64>, tau: f64) -> Array2<f64> {
        self.net.forward(self.net_input(xn, tau).view()).expect("input widths are consistent")
    }

    /// Validates τ; `for_score` additionally excludes the points where the
    /// score is undefined (DDPM τ = 0, flow τ ∈ {0, 1}).
    pub(crate) fn check_time(&self, tau: f64, for_score: bool) -> Result<(), ScoreError> {
        match &self.variant {
            Variant::Ddpm { schedule } => {
                schedule.check(tau, if for_score { 1 } else { 0 })?;
            }
            Variant::Flow { schedule } => {
                if for_score {
                    schedule.score_coefficients(tau)?;
                } else if !(0.0..=1.0).contains(&tau) {
                    return Err(ScoreError::TauOutOfRange { tau, range: "[0, 1]".into() });
                }
            }
        }
        Ok(())
    }

    /// `(a, b)` with normalized-space score `a·x_n + b·net(x_n)`.
    pub(crate) fn score_coefficients(&self, tau: f64) -> Result<(f64, f64), ScoreError> {
        match &self.variant {
            Variant::Ddpm { schedule } => {
                let t = schedule.check(tau, 1)?;
                Ok((0.0, -1.0 / (1.0 - schedule.alpha_bar(t)).sqrt()))
            }
            Variant::Flow { schedule } => schedule.score_coefficients(tau),
        }
    }

    /// Scores `∇log p_τ` at data points, one row per point.
    pub fn score_batch(&self, x: ArrayView2<f64>, tau: f64) -> Result<Array2<f64>, ScoreError> {
        self.check_points(&x)?;
        let (a, b) = self.score_coefficients(tau)?;
        let xn = self.normalize(x);
        let out = self.predict_normalized(xn.view(), tau);
        Ok((&xn * a + &out * b) / self.scale)
    }

    pub fn score(&self, x: &[f64], tau: f64) -> Result<Vec<f64>, ScoreError> {
        let v = ArrayView2::from_shape((1, x.len()), x).map_err(|_| ScoreError::Dimension {
            expected: self.dim(),
            got: x.len(),
        })?;
        Ok(self.score_batch(v, tau)?.into_raw_vec_and_offset().0)
    }

    /// The score at fixed τ as a drift field.
    pub fn field(&self, tau: f64) -> Result<ScoreField<'_>, ScoreError> {
        let (a, b) = self.score_coefficients(tau)?;
        Ok(ScoreField { model: self, tau, a, b })
    }
}

/// Score of a model at a fixed latent time. Jacobian products are exact
/// (automatic differentiation through the network), so the exact divergence
/// is available as the trace of the input Jacobian.
#[derive(Debug, Clone)]
pub struct ScoreField<'a> {
    model: &'a ScoreModel,
    tau: f64,
    a: f64,
    b: f64,
}

impl ScoreField<'_> {
    pub fn tau(&self) -> f64 {
        self.tau
    }

    fn input(&self, x: &[f64]) -> Array2<f64> {
        let v = ArrayView2::from_shape((1, x.len()), x).expect("single row");
        let xn = self.model.normalize(v);
        self.model.net_input(xn.view(), self.tau)
    }
}

impl DriftField for ScoreField<'_> {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn drift(&self, x: &[f64]) -> Vec<f64> {
        let input = self.input(x);
        let out = self.model.net.forward(input.view()).expect("consistent widths");
        let s = self.model.scale;
        (0..x.len()).map(|c| (self.a * input[(0, c)] + self.b * out[(0, c)]) / s).collect()
    }

    fn drift_vjp(&self, x: &[f64], w: &[f64]) -> Vec<f64> {
        let input = self.input(x);
        let tape = self.model.net.tape(input.view(), None).expect("consistent widths");
        let wv = ArrayView2::from_shape((1, w.len()), w).expect("single row");
        let (xb, _) = self.model.net.backward(&tape, Some(wv), None, None, true);
        let xb = xb.expect("input adjoint requested");
        let s2 = self.model.scale * self.model.scale;
        (0..x.len()).map(|c| (self.a * w[c] + self.b * xb[(0, c)]) / s2).collect()
    }

    fn jacobian_form(&self, x: &[f64], u: &[f64], v: &[f64]) -> Result<(f64, Vec<f64>), FieldError> {
        let k = x.len();
        let input = self.input(x);
        let mut tangent = Array2::zeros(input.raw_dim());
        for c in 0..k {
            tangent[(0, c)] = v[c];
        }
        let tape = self.model.net.tape(input.view(), Some(tangent.view())).expect("consistent widths");
        let nv = tape.output_tangent().expect("tangent tape");
        let unv: f64 = (0..k).map(|c| u[c] * nv[(0, c)]).sum();
        let uv: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
        let s = self.model.scale;
        let value = (self.a * uv + self.b * unv) / (s * s);
        let uv_seed = ArrayView2::from_shape((1, k), u).expect("single row");
        let (xb, _) = self.model.net.backward(&tape, None, Some(uv_seed), None, true);
        let xb = xb.expect("input adjoint requested");
        let grad = (0..k).map(|c| self.b * xb[(0, c)] / (s * s * s)).collect();
        Ok((value, grad))
    }

    fn has_exact_divergence(&self) -> bool {
        true
    }

    fn weighted_divergence(&self, x: &[f64], weights: &[f64]) -> Result<(f64, Vec<f64>), FieldError> {
        let k = x.len();
        let row = self.input(x);
        let width = row.ncols();
        let mut input = Array2::zeros((k, width));
        let mut tangent = Array2::zeros((k, width));
        let mut seed = Array2::zeros((k, k));
        for c in 0..k {
            input.row_mut(c).assign(&row.row(0));
            tangent[(c, c)] = 1.0;
            seed[(c, c)] = weights[c];
        }
        let tape = self.model.net.tape(input.view(), Some(tangent.view())).expect("consistent widths");
        let nt = tape.output_tangent().expect("tangent tape");
        let s = self.model.scale;
        let value: f64 = (0..k).map(|c| weights[c] * (self.a + self.b * nt[(c, c)])).sum::<f64>() / (s * s);
        let (xb, _) = self.model.net.backward(&tape, None, Some(seed.view()), None, true);
        let xb = xb.expect("input adjoint requested");
        let summed = xb.slice(s![.., 0..k]).sum_axis(ndarray::Axis(0));
        let grad = summed.iter().map(|g| self.b * g / (s * s * s)).collect();
        Ok((value, grad))
    }
}
