use serde::{Deserialize, Serialize};

use super::ScoreError;

/// Discrete DDPM noise schedule with a linear β ramp over steps `1..=T`.
///
/// `alpha_bar(0) = 1` by convention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleSpec", into = "ScheduleSpec")]
pub struct NoiseScheduleDDPM {
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScheduleSpec {
    steps: usize,
    beta_start: f64,
    beta_end: f64,
}

impl TryFrom<ScheduleSpec> for NoiseScheduleDDPM {
    type Error = ScoreError;
    fn try_from(s: ScheduleSpec) -> Result<Self, ScoreError> {
        NoiseScheduleDDPM::linear(s.steps, s.beta_start, s.beta_end)
    }
}

impl From<NoiseScheduleDDPM> for ScheduleSpec {
    fn from(s: NoiseScheduleDDPM) -> Self {
        ScheduleSpec { steps: s.steps, beta_start: s.beta_start, beta_end: s.beta_end }
    }
}

impl Default for NoiseScheduleDDPM {
    fn default() -> Self {
        NoiseScheduleDDPM::linear(1000, 1e-4, 0.02).expect("default schedule is valid")
    }
}

impl NoiseScheduleDDPM {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self, ScoreError> {
        let ok = |b: f64| b > 0.0 && b < 1.0;
        if steps == 0 || !ok(beta_start) || !ok(beta_end) {
            return Err(ScoreError::Config(format!(
                "schedule needs steps ≥ 1 and β in (0,1), got {steps}, {beta_start}, {beta_end}"
            )));
        }
        let mut betas = vec![0.0; steps + 1];
        let mut alpha_bars = vec![1.0; steps + 1];
        for t in 1..=steps {
            let f = if steps > 1 { (t - 1) as f64 / (steps - 1) as f64 } else { 0.0 };
            betas[t] = beta_start + (beta_end - beta_start) * f;
            alpha_bars[t] = alpha_bars[t - 1] * (1.0 - betas[t]);
        }
        Ok(NoiseScheduleDDPM { steps, beta_start, beta_end, betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }
    pub fn beta_start(&self) -> f64 {
        self.beta_start
    }
    pub fn beta_end(&self) -> f64 {
        self.beta_end
    }

    /// `β_τ` for `1 ≤ τ ≤ T` (zero at `τ = 0`).
    pub fn beta(&self, tau: usize) -> f64 {
        self.betas[tau]
    }
    pub fn alpha(&self, tau: usize) -> f64 {
        1.0 - self.betas[tau]
    }
    pub fn alpha_bar(&self, tau: usize) -> f64 {
        self.alpha_bars[tau]
    }

    /// Validates a step index against `lo..=T`.
    pub fn check(&self, tau: f64, lo: usize) -> Result<usize, ScoreError> {
        if tau.fract() != 0.0 || tau < lo as f64 || tau > self.steps as f64 {
            return Err(ScoreError::TauOutOfRange {
                tau,
                range: format!("integers {lo}..={}", self.steps),
            });
        }
        Ok(tau as usize)
    }
}

/// Interpolant `x_τ = α_τ x₁ + σ_τ x₀` between noise `x₀` and data `x₁`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowSchedule {
    /// `α = τ`, `σ = 1 − τ`
    #[default]
    Linear,
    /// `α = sin(πτ/2)`, `σ = cos(πτ/2)`
    Cosine,
}

impl FlowSchedule {
    pub fn alpha(self, t: f64) -> f64 {
        match self {
            FlowSchedule::Linear => t,
            FlowSchedule::Cosine => {
                if t == 1.0 { 1.0 } else { (std::f64::consts::FRAC_PI_2 * t).sin() }
            }
        }
    }
    pub fn sigma(self, t: f64) -> f64 {
        match self {
            FlowSchedule::Linear => 1.0 - t,
            FlowSchedule::Cosine => {
                if t == 1.0 { 0.0 } else { (std::f64::consts::FRAC_PI_2 * t).cos() }
            }
        }
    }
    pub fn alpha_dot(self, t: f64) -> f64 {
        match self {
            FlowSchedule::Linear => 1.0,
            FlowSchedule::Cosine => std::f64::consts::FRAC_PI_2 * (std::f64::consts::FRAC_PI_2 * t).cos(),
        }
    }
    pub fn sigma_dot(self, t: f64) -> f64 {
        match self {
            FlowSchedule::Linear => -1.0,
            FlowSchedule::Cosine => -std::f64::consts::FRAC_PI_2 * (std::f64::consts::FRAC_PI_2 * t).sin(),
        }
    }

    /// Coefficients `(a, b)` with `score = a·x + b·u`, from
    /// `score = α/(σ̇σα − α̇σ²) · ((α̇/α)x − u)`.
    pub fn score_coefficients(self, t: f64) -> Result<(f64, f64), ScoreError> {
        if !(t > 0.0 && t < 1.0) {
            return Err(ScoreError::TauOutOfRange { tau: t, range: "the open interval (0, 1)".into() });
        }
        let (a, s, ad, sd) = (self.alpha(t), self.sigma(t), self.alpha_dot(t), self.sigma_dot(t));
        let den = sd * s * a - ad * s * s;
        if den == 0.0 || !den.is_finite() || a == 0.0 {
            return Err(ScoreError::SingularFlow(t));
        }
        Ok((ad / den, -a / den))
    }
}

/// Converts a velocity `u` at `(x, τ)` to a score.
pub fn flow_score_from_velocity(
    schedule: FlowSchedule,
    x: &[f64],
    tau: f64,
    u: &[f64],
) -> Result<Vec<f64>, ScoreError> {
    let (a, s, ad, sd) = (schedule.alpha(tau), schedule.sigma(tau), schedule.alpha_dot(tau), schedule.sigma_dot(tau));
    schedule.score_coefficients(tau)?;
    let den = sd * s * a - ad * s * s;
    Ok(x.iter().zip(u).map(|(x, u)| a / den * (ad / a * x - u)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_bar_is_strictly_decreasing_from_one() {
        let s = NoiseScheduleDDPM::default();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert_eq!(s.steps(), 1000);
        assert_eq!(s.beta(1), 1e-4);
        assert!((s.beta(1000) - 0.02).abs() < 1e-15);
        for t in 1..=1000 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
        }
        assert!(s.alpha_bar(1000) < 1e-4);
    }

    #[test]
    fn rejects_bad_schedules_and_steps() {
        assert!(NoiseScheduleDDPM::linear(0, 0.1, 0.2).is_err());
        assert!(NoiseScheduleDDPM::linear(10, 0.0, 0.2).is_err());
        assert!(NoiseScheduleDDPM::linear(10, 0.1, 1.0).is_err());
        let s = NoiseScheduleDDPM::default();
        assert!(s.check(0.0, 1).is_err());
        assert!(s.check(1001.0, 1).is_err());
        assert!(s.check(2.5, 1).is_err());
        assert_eq!(s.check(8.0, 1).unwrap(), 8);
    }

    #[test]
    fn schedule_json_round_trip() {
        let s = NoiseScheduleDDPM::linear(50, 1e-3, 0.05).unwrap();
        let j = serde_json::to_string(&s).unwrap();
        assert_eq!(j, r#"{"steps":50,"beta_start":0.001,"beta_end":0.05}"#);
        let back: NoiseScheduleDDPM = serde_json::from_str(&j).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn flow_boundaries_and_derivatives() {
        for f in [FlowSchedule::Linear, FlowSchedule::Cosine] {
            assert_eq!(f.alpha(0.0), 0.0);
            assert_eq!(f.sigma(1.0), 0.0);
            assert_eq!(f.alpha(1.0), 1.0);
            assert_eq!(f.sigma(0.0), 1.0);
            for t in [0.1, 0.5, 0.9] {
                let h = 1e-6;
                assert!((f.alpha_dot(t) - (f.alpha(t + h) - f.alpha(t - h)) / (2.0 * h)).abs() < 1e-8);
                assert!((f.sigma_dot(t) - (f.sigma(t + h) - f.sigma(t - h)) / (2.0 * h)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn linear_flow_score_form() {
        let x = [0.4, -1.0];
        let u = [0.2, 0.3];
        let t = 0.3;
        let s = flow_score_from_velocity(FlowSchedule::Linear, &x, t, &u).unwrap();
        for c in 0..2 {
            assert!((s[c] + (x[c] - t * u[c]) / (1.0 - t)).abs() < 1e-14);
        }
    }

    #[test]
    fn velocity_along_x_over_alpha_gives_zero_score() {
        let x = [1.3, 0.7];
        let t = 0.6;
        let f = FlowSchedule::Cosine;
        let u: Vec<f64> = x.iter().map(|x| f.alpha_dot(t) / f.alpha(t) * x).collect();
        let s = flow_score_from_velocity(f, &x, t, &u).unwrap();
        assert!(s.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn singular_endpoints_reported() {
        assert!(matches!(
            flow_score_from_velocity(FlowSchedule::Linear, &[0.0], 1.0, &[0.0]),
            Err(ScoreError::TauOutOfRange { .. })
        ));
        assert!(flow_score_from_velocity(FlowSchedule::Linear, &[0.0], 0.0, &[0.0]).is_err());
    }
}
