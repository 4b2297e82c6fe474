use super::{AnalyticPotential, FieldError};
use crate::score::NoiseScheduleDDPM;

/// Isotropic Gaussian mixture `p = Σ w_i N(μ_i, σ² I)`, viewed as the field
/// `φ = −log p` so that its drift is the score `∇log p`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variance: f64,
    log_weights: Vec<f64>,
}

struct Eval {
    log_p: f64,
    resp: Vec<f64>,
    /// per-component scores `−(x − μ_i)/σ²`
    comp: Vec<Vec<f64>>,
    score: Vec<f64>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variance: f64) -> Result<Self, FieldError> {
        if weights.is_empty() || weights.len() != means.len() {
            return Err(FieldError::Invalid(format!(
                "{} weights for {} means",
                weights.len(),
                means.len()
            )));
        }
        let k = means[0].len();
        if k == 0 || means.iter().any(|m| m.len() != k) {
            return Err(FieldError::Invalid("means must share a nonzero dimension".into()));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(FieldError::Invalid("weights must be nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(FieldError::Invalid(format!("weights sum to {total}, expected 1")));
        }
        if !(variance > 0.0) || !variance.is_finite() {
            return Err(FieldError::Invalid(format!("degenerate variance {variance}")));
        }
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        Ok(GaussianMixture { weights, means, variance, log_weights })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }
    pub fn variance(&self) -> f64 {
        self.variance
    }

    /// Marginal of `a·x + b·z` with `x` from this mixture and `z ~ N(0, I)`.
    pub fn affine_noised(&self, a: f64, b: f64) -> Result<Self, FieldError> {
        let variance = a * a * self.variance + b * b;
        if !(variance > 0.0) {
            return Err(FieldError::Invalid(format!("degenerate noised variance {variance}")));
        }
        let means = self.means.iter().map(|m| m.iter().map(|c| a * c).collect()).collect();
        GaussianMixture::new(self.weights.clone(), means, variance)
    }

    /// DDPM forward marginal at cumulative signal level `ᾱ`: means `√ᾱ μ_i`,
    /// variance `ᾱσ² + 1 − ᾱ`.
    pub fn noised(&self, alpha_bar: f64) -> Result<Self, FieldError> {
        let variance = alpha_bar * self.variance + (1.0 - alpha_bar);
        if !(variance > 0.0) {
            return Err(FieldError::Invalid(format!("degenerate noised variance {variance}")));
        }
        let s = alpha_bar.sqrt();
        let means = self.means.iter().map(|m| m.iter().map(|c| s * c).collect()).collect();
        GaussianMixture::new(self.weights.clone(), means, variance)
    }

    /// Score `∇log p(x)`.
    pub fn score(&self, x: &[f64]) -> Vec<f64> {
        self.eval(x).score
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        self.eval(x).log_p
    }

    fn eval(&self, x: &[f64]) -> Eval {
        let k = x.len();
        let s2 = self.variance;
        let mut logs = Vec::with_capacity(self.means.len());
        let mut comp = Vec::with_capacity(self.means.len());
        for (m, lw) in self.means.iter().zip(&self.log_weights) {
            let g: Vec<f64> = x.iter().zip(m).map(|(a, b)| -(a - b) / s2).collect();
            let d2: f64 = x.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum();
            logs.push(lw - 0.5 * d2 / s2);
            comp.push(g);
        }
        let mx = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logs.iter().map(|l| (l - mx).exp()).sum();
        let resp: Vec<f64> = logs.iter().map(|l| (l - mx).exp() / z).collect();
        let mut score = vec![0.0; k];
        for (r, g) in resp.iter().zip(&comp) {
            for (s, gi) in score.iter_mut().zip(g) {
                *s += r * gi;
            }
        }
        let log_norm = -0.5 * k as f64 * (2.0 * std::f64::consts::PI * s2).ln();
        Eval { log_p: mx + z.ln() + log_norm, resp, comp, score }
    }

    /// Hessian of `log p`: `Σ r_i g_i g_iᵀ − s sᵀ − I/σ²`.
    fn log_hessian(&self, e: &Eval) -> Vec<f64> {
        let k = e.score.len();
        let mut h = vec![0.0; k * k];
        for (r, g) in e.resp.iter().zip(&e.comp) {
            for a in 0..k {
                for b in 0..k {
                    h[a * k + b] += r * g[a] * g[b];
                }
            }
        }
        for a in 0..k {
            for b in 0..k {
                h[a * k + b] -= e.score[a] * e.score[b];
            }
            h[a * k + a] -= 1.0 / self.variance;
        }
        h
    }
}

impl AnalyticPotential for GaussianMixture {
    fn dim(&self) -> usize {
        self.means[0].len()
    }
    fn value(&self, x: &[f64]) -> f64 {
        -self.eval(x).log_p
    }
    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        self.eval(x).score.into_iter().map(|s| -s).collect()
    }
    fn hessian(&self, x: &[f64]) -> Vec<f64> {
        let e = self.eval(x);
        self.log_hessian(&e).into_iter().map(|h| -h).collect()
    }
    fn third_contract(&self, x: &[f64], u: &[f64], v: &[f64]) -> Vec<f64> {
        let e = self.eval(x);
        let k = x.len();
        let h = self.log_hessian(&e);
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
        let hu: Vec<f64> = (0..k).map(|m| (0..k).map(|a| h[m * k + a] * u[a]).sum()).collect();
        let hv: Vec<f64> = (0..k).map(|m| (0..k).map(|a| h[m * k + a] * v[a]).sum()).collect();
        let (su, sv) = (dot(&e.score, u), dot(&e.score, v));
        let mut out = vec![0.0; k];
        for (r, g) in e.resp.iter().zip(&e.comp) {
            let c = r * dot(g, u) * dot(g, v);
            for m in 0..k {
                out[m] += c * (g[m] - e.score[m]);
            }
        }
        for m in 0..k {
            out[m] -= (u[m] * sv + v[m] * su) / self.variance + hu[m] * sv + su * hv[m];
        }
        // third derivative of φ = −log p
        out.into_iter().map(|t| -t).collect()
    }
}

/// Exact score of the DDPM-noised mixture at step `tau`.
pub fn mixture_noised_score(
    mix: &GaussianMixture,
    point: &[f64],
    tau: usize,
    schedule: &NoiseScheduleDDPM,
) -> Result<Vec<f64>, FieldError> {
    if tau > schedule.steps() {
        return Err(FieldError::Invalid(format!(
            "step {tau} outside 0..={}",
            schedule.steps()
        )));
    }
    if point.len() != AnalyticPotential::dim(mix) {
        return Err(FieldError::Dimension { expected: AnalyticPotential::dim(mix), got: point.len() });
    }
    Ok(mix.noised(schedule.alpha_bar(tau))?.score(point))
}
