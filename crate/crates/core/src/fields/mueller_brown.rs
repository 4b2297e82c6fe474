use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use super::AnalyticPotential;

/// One term `A·exp(a(x−x0)² + b(x−x0)(y−y0) + c(y−y0)²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianTerm {
    pub amplitude: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub x0: f64,
    pub y0: f64,
}

impl GaussianTerm {
    const fn new(amplitude: f64, a: f64, b: f64, c: f64, x0: f64, y0: f64) -> Self {
        GaussianTerm { amplitude, a, b, c, x0, y0 }
    }

    /// Returns (f, ∇q) where f is the term value and q its exponent.
    #[inline]
    fn eval(&self, x: &[f64]) -> (f64, [f64; 2]) {
        let dx = x[0] - self.x0;
        let dy = x[1] - self.y0;
        let q = self.a * dx * dx + self.b * dx * dy + self.c * dy * dy;
        let f = self.amplitude * q.exp();
        (f, [2.0 * self.a * dx + self.b * dy, self.b * dx + 2.0 * self.c * dy])
    }

    #[inline]
    fn exponent_hessian(&self) -> [[f64; 2]; 2] {
        [[2.0 * self.a, self.b], [self.b, 2.0 * self.c]]
    }
}

/// Rescaled Müller-Brown surface with four Gaussian terms.
///
/// The positive fourth term has a positive-definite exponent, so the surface
/// is unbounded above far from the wells. It is evaluated as written.
#[derive(Debug, Clone, PartialEq)]
pub struct MuellerBrown {
    pub terms: [GaussianTerm; 4],
}

impl Default for MuellerBrown {
    fn default() -> Self {
        MuellerBrown {
            terms: [
                GaussianTerm::new(-17.3, -0.0039, 0.0, -0.0391, 48.0, 8.0),
                GaussianTerm::new(-8.7, -0.0039, 0.0, -0.0391, 32.0, 16.0),
                GaussianTerm::new(-14.7, -0.0254, 0.043, -0.0254, 24.0, 32.0),
                GaussianTerm::new(1.3, 0.00273, 0.0023, 0.00273, 16.0, 24.0),
            ],
        }
    }
}

/// A stationary point with its energy and Hessian index (number of negative
/// eigenvalues).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StationaryPoint {
    pub position: [f64; 2],
    pub energy: f64,
    pub index: usize,
}

/// Minima sorted by energy (deepest first) and first-order saddles sorted by
/// energy (lowest first).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalPoints {
    pub minima: Vec<StationaryPoint>,
    pub saddles: Vec<StationaryPoint>,
}

impl CriticalPoints {
    /// Axis-aligned box around all critical points, padded by `fraction` of
    /// its extent on each side: `[xmin, xmax, ymin, ymax]`.
    pub fn bounding_box(&self, fraction: f64) -> [f64; 4] {
        let pts = self.minima.iter().chain(&self.saddles).map(|p| p.position);
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for [x, y] in pts {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        let px = fraction * (x1 - x0);
        let py = fraction * (y1 - y0);
        [x0 - px, x1 + px, y0 - py, y1 + py]
    }
}

impl MuellerBrown {
    pub fn new(terms: [GaussianTerm; 4]) -> Self {
        MuellerBrown { terms }
    }

    /// Critical points of the default surface, located numerically once and
    /// cached for the life of the process.
    pub fn default_critical_points() -> &'static CriticalPoints {
        static CACHE: OnceLock<CriticalPoints> = OnceLock::new();
        CACHE.get_or_init(|| MuellerBrown::default().locate_critical_points())
    }

    /// Minima by damped gradient descent from each Gaussian center; saddles by
    /// Newton iteration on ∇U = 0 from a lattice of starts spanning the minima.
    pub fn locate_critical_points(&self) -> CriticalPoints {
        let mut minima: Vec<StationaryPoint> = Vec::new();
        for t in &self.terms {
            if let Some(p) = self.descend([t.x0, t.y0]) {
                push_unique(&mut minima, self.classify(p));
            }
        }
        minima.retain(|m| m.index == 0);
        minima.sort_by(|a, b| a.energy.total_cmp(&b.energy));

        let mut saddles = Vec::new();
        if !minima.is_empty() {
            let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
            for m in &minima {
                x0 = x0.min(m.position[0]);
                x1 = x1.max(m.position[0]);
                y0 = y0.min(m.position[1]);
                y1 = y1.max(m.position[1]);
            }
            // saddles may sit outside the box spanned by the minima
            let (px, py) = (0.5 * (x1 - x0), 0.5 * (y1 - y0));
            (x0, x1, y0, y1) = (x0 - px, x1 + px, y0 - py, y1 + py);
            let n = 40;
            for i in 0..=n {
                for j in 0..=n {
                    let start = [
                        x0 + (x1 - x0) * i as f64 / n as f64,
                        y0 + (y1 - y0) * j as f64 / n as f64,
                    ];
                    if let Some(p) = self.newton(start) {
                        let inside = p[0] >= x0 && p[0] <= x1 && p[1] >= y0 && p[1] <= y1;
                        let s = self.classify(p);
                        if inside && s.index == 1 {
                            push_unique(&mut saddles, s);
                        }
                    }
                }
            }
        }
        saddles.sort_by(|a, b| a.energy.total_cmp(&b.energy));
        CriticalPoints { minima, saddles }
    }

    fn classify(&self, p: [f64; 2]) -> StationaryPoint {
        let h = self.hessian(&p);
        let (tr, det) = (h[0] + h[3], h[0] * h[3] - h[1] * h[2]);
        let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
        let index = [tr / 2.0 - disc, tr / 2.0 + disc].iter().filter(|&&l| l < 0.0).count();
        StationaryPoint { position: p, energy: self.value(&p), index }
    }

    fn descend(&self, start: [f64; 2]) -> Option<[f64; 2]> {
        let mut x = start;
        let mut step = 1.0;
        let mut e = self.value(&x);
        for _ in 0..200_000 {
            let g = self.gradient(&x);
            let gn = (g[0] * g[0] + g[1] * g[1]).sqrt();
            if gn < 1e-12 {
                break;
            }
            let trial = [x[0] - step * g[0], x[1] - step * g[1]];
            let et = self.value(&trial);
            if et <= e {
                x = trial;
                e = et;
                step *= 1.2;
            } else {
                step *= 0.5;
                if step < 1e-16 {
                    break;
                }
            }
        }
        // polish with Newton; the Hessian is positive definite near a minimum
        let polished = self.newton(x).unwrap_or(x);
        let g = self.gradient(&polished);
        ((g[0] * g[0] + g[1] * g[1]).sqrt() < 1e-8).then_some(polished)
    }

    fn newton(&self, start: [f64; 2]) -> Option<[f64; 2]> {
        let mut x = start;
        for _ in 0..100 {
            let g = self.gradient(&x);
            if (g[0] * g[0] + g[1] * g[1]).sqrt() < 1e-12 {
                return Some(x);
            }
            let h = self.hessian(&x);
            let det = h[0] * h[3] - h[1] * h[2];
            if det.abs() < 1e-300 {
                return None;
            }
            let mut dx = [(h[3] * g[0] - h[1] * g[1]) / det, (-h[2] * g[0] + h[0] * g[1]) / det];
            let n = (dx[0] * dx[0] + dx[1] * dx[1]).sqrt();
            if n > 2.0 {
                dx = [dx[0] * 2.0 / n, dx[1] * 2.0 / n];
            }
            x = [x[0] - dx[0], x[1] - dx[1]];
            if !x[0].is_finite() || !x[1].is_finite() {
                return None;
            }
        }
        let g = self.gradient(&x);
        ((g[0] * g[0] + g[1] * g[1]).sqrt() < 1e-9).then_some(x)
    }
}

fn push_unique(list: &mut Vec<StationaryPoint>, p: StationaryPoint) {
    let dup = list.iter().any(|q| {
        let d = ((q.position[0] - p.position[0]).powi(2) + (q.position[1] - p.position[1]).powi(2)).sqrt();
        d < 1e-4
    });
    if !dup {
        list.push(p);
    }
}

impl AnalyticPotential for MuellerBrown {
    fn dim(&self) -> usize {
        2
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|t| t.eval(x).0).sum()
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; 2];
        for t in &self.terms {
            let (f, gq) = t.eval(x);
            g[0] += f * gq[0];
            g[1] += f * gq[1];
        }
        g
    }

    fn hessian(&self, x: &[f64]) -> Vec<f64> {
        let mut h = vec![0.0; 4];
        for t in &self.terms {
            let (f, g) = t.eval(x);
            let hq = t.exponent_hessian();
            for a in 0..2 {
                for b in 0..2 {
                    h[a * 2 + b] += f * (g[a] * g[b] + hq[a][b]);
                }
            }
        }
        h
    }

    fn third_contract(&self, x: &[f64], u: &[f64], v: &[f64]) -> Vec<f64> {
        // ∂³(A e^q)/∂a∂b∂m = f (q_a q_b q_m + q_ab q_m + q_am q_b + q_bm q_a)
        let mut out = vec![0.0; 2];
        for t in &self.terms {
            let (f, g) = t.eval(x);
            let hq = t.exponent_hessian();
            let gu = g[0] * u[0] + g[1] * u[1];
            let gv = g[0] * v[0] + g[1] * v[1];
            let hu = [hq[0][0] * u[0] + hq[0][1] * u[1], hq[1][0] * u[0] + hq[1][1] * u[1]];
            let hv = [hq[0][0] * v[0] + hq[0][1] * v[1], hq[1][0] * v[0] + hq[1][1] * v[1]];
            let uhv = u[0] * hv[0] + u[1] * hv[1];
            for m in 0..2 {
                out[m] += f * (gu * gv * g[m] + uhv * g[m] + hu[m] * gv + hv[m] * gu);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent transcription of the four-term formula.
    fn oracle(x: f64, y: f64) -> f64 {
        -17.3 * (-0.0039 * (x - 48.0).powi(2) - 0.0391 * (y - 8.0).powi(2)).exp()
            - 8.7 * (-0.0039 * (x - 32.0).powi(2) - 0.0391 * (y - 16.0).powi(2)).exp()
            - 14.7
                * (-0.0254 * (x - 24.0).powi(2) + 0.043 * (x - 24.0) * (y - 32.0)
                    - 0.0254 * (y - 32.0).powi(2))
                .exp()
            + 1.3
                * (0.00273 * (x - 16.0).powi(2) + 0.0023 * (x - 16.0) * (y - 24.0)
                    + 0.00273 * (y - 24.0).powi(2))
                .exp()
    }

    #[test]
    fn default_coefficients() {
        let mb = MuellerBrown::default();
        let amps: Vec<f64> = mb.terms.iter().map(|t| t.amplitude).collect();
        assert_eq!(amps, vec![-17.3, -8.7, -14.7, 1.3]);
        let centers: Vec<(f64, f64)> = mb.terms.iter().map(|t| (t.x0, t.y0)).collect();
        assert_eq!(centers, vec![(48.0, 8.0), (32.0, 16.0), (24.0, 32.0), (16.0, 24.0)]);
    }

    #[test]
    fn potential_matches_direct_formula() {
        let mb = MuellerBrown::default();
        for (x, y) in [(32.0, 16.0), (48.0, 8.0), (24.0, 32.0), (0.0, 0.0), (35.5, 12.25)] {
            let v = mb.value(&[x, y]);
            assert!((v - oracle(x, y)).abs() < 1e-12 * (1.0 + v.abs()));
        }
        // frozen from the direct-formula oracle
        assert!((oracle(32.0, 16.0) - -6.902021406733132).abs() < 1e-12);
        assert!((crate::fields::mb_potential([48.0, 8.0]) - -17.3 - (oracle(48.0, 8.0) + 17.3)).abs() < 1e-12);
    }

    #[test]
    fn first_center_decomposition() {
        // the −17.3 term contributes exactly −17.3 at its own center
        let mb = MuellerBrown::default();
        let rest: f64 = mb.terms[1..].iter().map(|t| t.eval(&[48.0, 8.0]).0).sum();
        assert!((mb.value(&[48.0, 8.0]) - (-17.3 + rest)).abs() < 1e-12);
        assert!((rest - 12.923606303850779).abs() < 1e-9);
    }

    #[test]
    fn far_field_behaviour() {
        let mb = MuellerBrown::default();
        // negative terms decay while the positive term grows without bound
        assert!(mb.value(&[200.0, 200.0]) > 1e3);
        let neg: f64 = mb.terms[..3].iter().map(|t| t.eval(&[200.0, 200.0]).0).sum();
        assert!(neg.abs() < 1e-30);
    }

    #[test]
    fn three_minima_with_vanishing_gradient() {
        let cp = MuellerBrown::default_critical_points();
        assert_eq!(cp.minima.len(), 3);
        let mb = MuellerBrown::default();
        for m in &cp.minima {
            let g = mb.gradient(&m.position);
            assert!((g[0].powi(2) + g[1].powi(2)).sqrt() < 1e-6);
            let d = crate::fields::drift(&mb, &m.position).unwrap();
            assert!(d.iter().all(|c| c.abs() < 1e-6));
        }
        assert!(cp.minima[0].energy < cp.minima[1].energy);
        assert_eq!(cp.saddles.len(), 2);
        assert!(cp.saddles.iter().all(|s| s.index == 1));
    }
}
