use ndarray::{Array2, ArrayView2};
use rand::Rng;

use super::{ScoreError, ScoreModel, Variant};
use crate::rng;

fn all_finite(x: &Array2<f64>) -> bool {
    x.iter().all(|v| v.is_finite())
}

impl ScoreModel {
    fn row<'a>(&self, x: &'a [f64]) -> Result<ArrayView2<'a, f64>, ScoreError> {
        if x.len() != self.dim() {
            return Err(ScoreError::Dimension { expected: self.dim(), got: x.len() });
        }
        Ok(ArrayView2::from_shape((1, x.len()), x).expect("single row"))
    }

    /// Maps data points to latent time τ. DDPM noising is stochastic; flow
    /// encoding integrates the learned velocity backwards from τ = 1.
    pub fn encode_batch<R: Rng + ?Sized>(
        &self,
        x: ArrayView2<f64>,
        tau: f64,
        rng: &mut R,
    ) -> Result<Array2<f64>, ScoreError> {
        self.check_time(tau, false)?;
        if x.ncols() != self.dim() {
            return Err(ScoreError::Dimension { expected: self.dim(), got: x.ncols() });
        }
        if let Variant::Ddpm { schedule } = &self.variant {
            if schedule.alpha_bar(tau as usize) == 1.0 {
                return Ok(x.to_owned());
            }
        }
        let mut xn = self.normalize(x);
        match &self.variant {
            Variant::Ddpm { schedule } => {
                let ab = schedule.alpha_bar(tau as usize);
                let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
                if sn > 0.0 {
                    for v in xn.iter_mut() {
                        let z: f64 = rng::normal(rng);
                        *v = sa * *v + sn * z;
                    }
                }
            }
            Variant::Flow { .. } => {
                let n = self.euler_steps(1.0 - tau);
                let h = (1.0 - tau) / n as f64;
                for i in 0..n {
                    let t = 1.0 - i as f64 * h;
                    let u = self.predict_normalized(xn.view(), t);
                    xn = xn - &u * h;
                    if !all_finite(&xn) {
                        return Err(ScoreError::NonFinite { stage: "encode", step: i });
                    }
                }
            }
        }
        Ok(self.denormalize(xn.view()))
    }

    /// Maps latent points at τ back to data. DDPM runs the ancestral sampler
    /// from τ down to 1; flow decoding integrates the velocity up to τ = 1.
    pub fn decode_batch<R: Rng + ?Sized>(
        &self,
        z: ArrayView2<f64>,
        tau: f64,
        rng: &mut R,
    ) -> Result<Array2<f64>, ScoreError> {
        self.check_time(tau, false)?;
        if z.ncols() != self.dim() {
            return Err(ScoreError::Dimension { expected: self.dim(), got: z.ncols() });
        }
        let mut xn = self.normalize(z);
        match &self.variant {
            Variant::Ddpm { schedule } => {
                for t in (1..=tau as usize).rev() {
                    let eps = self.predict_normalized(xn.view(), t as f64);
                    let (b, a, ab) = (schedule.beta(t), schedule.alpha(t), schedule.alpha_bar(t));
                    let c = b / (1.0 - ab).sqrt();
                    let sa = a.sqrt();
                    let sb = b.sqrt();
                    for (v, e) in xn.iter_mut().zip(eps.iter()) {
                        *v = (*v - c * e) / sa;
                        if t > 1 {
                            *v += sb * rng::normal(rng);
                        }
                    }
                    if !all_finite(&xn) {
                        return Err(ScoreError::NonFinite { stage: "decode", step: t });
                    }
                }
            }
            Variant::Flow { .. } => {
                let n = self.euler_steps(1.0 - tau);
                let h = (1.0 - tau) / n as f64;
                for i in 0..n {
                    let t = tau + i as f64 * h;
                    let u = self.predict_normalized(xn.view(), t);
                    xn = xn + &u * h;
                    if !all_finite(&xn) {
                        return Err(ScoreError::NonFinite { stage: "decode", step: i });
                    }
                }
            }
        }
        Ok(self.denormalize(xn.view()))
    }

    fn euler_steps(&self, span: f64) -> usize {
        ((self.ode_steps as f64 * span).ceil() as usize).max(usize::from(span > 0.0))
    }

    pub fn encode<R: Rng + ?Sized>(&self, x: &[f64], tau: f64, rng: &mut R) -> Result<Vec<f64>, ScoreError> {
        Ok(self.encode_batch(self.row(x)?, tau, rng)?.into_raw_vec_and_offset().0)
    }

    pub fn decode<R: Rng + ?Sized>(&self, z: &[f64], tau: f64, rng: &mut R) -> Result<Vec<f64>, ScoreError> {
        Ok(self.decode_batch(self.row(z)?, tau, rng)?.into_raw_vec_and_offset().0)
    }

    /// One combined denoise-then-noise step at fixed τ:
    /// `x + β√(1−ᾱ_{τ−1})/√(1−ᾱ_τ) · s_θ(x, τ) + √(2β − β²) · z`.
    pub fn latent_sde_step<R: Rng + ?Sized>(&self, x: &[f64], tau: f64, rng: &mut R) -> Result<Vec<f64>, ScoreError> {
        let Variant::Ddpm { schedule } = &self.variant else {
            return Err(ScoreError::Unsupported("the denoise-noise latent step"));
        };
        let t = schedule.check(tau, 1)?;
        let (b, ab, ab_prev) = (schedule.beta(t), schedule.alpha_bar(t), schedule.alpha_bar(t - 1));
        let c = b * (1.0 - ab_prev).sqrt() / (1.0 - ab).sqrt();
        let noise = (2.0 * b - b * b).sqrt();
        let s = self.score(x, tau)?;
        // the step is defined in normalized coordinates
        let sc = self.scale;
        Ok(x.iter()
            .zip(&s)
            .map(|(x, s)| x + c * sc * sc * s + sc * noise * rng::normal(rng))
            .collect())
    }
}
