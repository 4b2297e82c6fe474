//! Small dense networks in 64-bit floats.
//!
//! [`Mlp::tape`] runs a forward pass that optionally carries a tangent
//! (forward-mode directional derivative with respect to the input), and
//! [`Mlp::backward`] runs a reverse sweep over both the primal and tangent
//! outputs. Together they give parameter gradients for plain regression,
//! input vector-Jacobian products, `vᵀJv` with its input gradient, and
//! parameter gradients of losses on input gradients (committor training).

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("network needs at least an input and an output width")]
    TooFewLayers,
    #[error("expected {expected} parameters, got {got}")]
    ParamCount { expected: usize, got: usize },
    #[error("input has {got} columns, network expects {expected}")]
    InputWidth { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// tanh approximation of GELU
    Gelu,
    Tanh,
    Sigmoid,
    Identity,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // √(2/π)
const GELU_K: f64 = 0.044715;

impl Activation {
    /// Value, first and second derivative.
    #[inline]
    pub fn eval(self, x: f64) -> (f64, f64, f64) {
        match self {
            Activation::Gelu => {
                let u = GELU_C * (x + GELU_K * x * x * x);
                let du = GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                let ddu = GELU_C * 6.0 * GELU_K * x;
                let t = u.tanh();
                let sech2 = 1.0 - t * t;
                let f = 0.5 * x * (1.0 + t);
                let d1 = 0.5 * (1.0 + t) + 0.5 * x * sech2 * du;
                let d2 = sech2 * du + 0.5 * x * (sech2 * ddu - 2.0 * t * sech2 * du * du);
                (f, d1, d2)
            }
            Activation::Tanh => {
                let t = x.tanh();
                let d = 1.0 - t * t;
                (t, d, -2.0 * t * d)
            }
            Activation::Sigmoid => {
                let s = if x >= 0.0 { 1.0 / (1.0 + (-x).exp()) } else { let e = x.exp(); e / (1.0 + e) };
                let d = s * (1.0 - s);
                (s, d, d * (1.0 - 2.0 * s))
            }
            Activation::Identity => (x, 1.0, 0.0),
        }
    }

    /// Value and first derivative.
    #[inline]
    fn value_slope(self, x: f64) -> (f64, f64) {
        match self {
            Activation::Gelu => {
                let u = GELU_C * (x + GELU_K * x * x * x);
                let t = u.tanh();
                let d1 = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                (0.5 * x * (1.0 + t), d1)
            }
            _ => {
                let (f, d1, _) = self.eval(x);
                (f, d1)
            }
        }
    }

    #[inline]
    fn value(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => self.eval(x).0,
            Activation::Identity => x,
        }
    }
}

/// Fully connected network; parameters live in one flat vector laid out layer
/// by layer as (row-major `in × out` weights, then `out` biases).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    hidden: Activation,
    output: Activation,
    params: Vec<f64>,
}

/// Intermediate values of a forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    /// layer inputs `h_0 .. h_n` (the last is the network output)
    h: Vec<Array2<f64>>,
    /// activation slopes at each layer's pre-activation
    d1: Vec<Array2<f64>>,
    /// activation curvatures, kept only for tangent tapes
    d2: Option<Vec<Array2<f64>>>,
    hdot: Option<Vec<Array2<f64>>>,
    predot: Option<Vec<Array2<f64>>>,
}

impl Tape {
    pub fn output(&self) -> &Array2<f64> {
        self.h.last().expect("tape has an output")
    }

    /// Directional derivative of the output along the input tangent.
    pub fn output_tangent(&self) -> Option<&Array2<f64>> {
        self.hdot.as_ref().and_then(|v| v.last())
    }
}

pub fn param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Mlp {
    /// Weights drawn `N(0, 1/fan_in)`; the last layer is further scaled by
    /// `out_scale` and all biases start at zero.
    pub fn new<R: Rng + ?Sized>(
        widths: &[usize],
        hidden: Activation,
        output: Activation,
        out_scale: f64,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        if widths.len() < 2 {
            return Err(NnError::TooFewLayers);
        }
        let mut params = Vec::with_capacity(param_count(widths));
        let n = widths.len() - 1;
        for (l, w) in widths.windows(2).enumerate() {
            let scale = (1.0 / w[0] as f64).sqrt() * if l + 1 == n { out_scale } else { 1.0 };
            for _ in 0..w[0] * w[1] {
                let z: f64 = StandardNormal.sample(rng);
                params.push(scale * z);
            }
            params.extend(std::iter::repeat_n(0.0, w[1]));
        }
        Ok(Mlp { widths: widths.to_vec(), hidden, output, params })
    }

    pub fn from_params(
        widths: &[usize],
        hidden: Activation,
        output: Activation,
        params: Vec<f64>,
    ) -> Result<Self, NnError> {
        if widths.len() < 2 {
            return Err(NnError::TooFewLayers);
        }
        let expected = param_count(widths);
        if params.len() != expected {
            return Err(NnError::ParamCount { expected, got: params.len() });
        }
        Ok(Mlp { widths: widths.to_vec(), hidden, output, params })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }
    pub fn hidden_activation(&self) -> Activation {
        self.hidden
    }
    pub fn output_activation(&self) -> Activation {
        self.output
    }
    pub fn params(&self) -> &[f64] {
        &self.params
    }
    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }
    pub fn input_width(&self) -> usize {
        self.widths[0]
    }
    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }
    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    fn offsets(&self, l: usize) -> (usize, usize) {
        let start: usize = param_count(&self.widths[..=l]);
        (start, start + self.widths[l] * self.widths[l + 1])
    }

    fn weight(&self, l: usize) -> ArrayView2<'_, f64> {
        let (w0, w1) = self.offsets(l);
        ArrayView2::from_shape((self.widths[l], self.widths[l + 1]), &self.params[w0..w1]).unwrap()
    }

    fn bias(&self, l: usize) -> &[f64] {
        let (_, b0) = self.offsets(l);
        &self.params[b0..b0 + self.widths[l + 1]]
    }

    fn act(&self, l: usize) -> Activation {
        if l + 1 == self.n_layers() { self.output } else { self.hidden }
    }

    fn check(&self, x: &ArrayView2<f64>) -> Result<(), NnError> {
        if x.ncols() != self.widths[0] {
            return Err(NnError::InputWidth { expected: self.widths[0], got: x.ncols() });
        }
        Ok(())
    }

    /// Plain forward pass, one row per sample.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, NnError> {
        self.check(&x)?;
        let mut h = x.to_owned();
        for l in 0..self.n_layers() {
            let mut a = h.dot(&self.weight(l));
            let b = self.bias(l);
            let act = self.act(l);
            for mut row in a.rows_mut() {
                for (v, bi) in row.iter_mut().zip(b) {
                    *v = act.value(*v + bi);
                }
            }
            h = a;
        }
        Ok(h)
    }

    /// Forward pass keeping intermediates, optionally pushing an input tangent.
    pub fn tape(&self, x: ArrayView2<f64>, xdot: Option<ArrayView2<f64>>) -> Result<Tape, NnError> {
        self.check(&x)?;
        if let Some(t) = &xdot {
            self.check(t)?;
        }
        let n = self.n_layers();
        let mut h = Vec::with_capacity(n + 1);
        let mut d1s = Vec::with_capacity(n);
        let mut d2s: Option<Vec<Array2<f64>>> = xdot.as_ref().map(|_| Vec::with_capacity(n));
        let mut hdot: Option<Vec<Array2<f64>>> = xdot.map(|t| vec![t.to_owned()]);
        let mut predot: Option<Vec<Array2<f64>>> = hdot.as_ref().map(|_| Vec::with_capacity(n));
        h.push(x.to_owned());
        for l in 0..n {
            let w = self.weight(l);
            let mut a = h[l].dot(&w);
            for mut row in a.rows_mut() {
                for (v, bi) in row.iter_mut().zip(self.bias(l)) {
                    *v += bi;
                }
            }
            let act = self.act(l);
            let mut d1 = Array2::zeros(a.raw_dim());
            if let (Some(hd), Some(pd), Some(d2s)) = (hdot.as_mut(), predot.as_mut(), d2s.as_mut()) {
                let ad = hd[l].dot(&w);
                let mut outd = Array2::zeros(a.raw_dim());
                let mut d2 = Array2::zeros(a.raw_dim());
                ndarray::Zip::from(&mut a).and(&mut outd).and(&mut d1).and(&mut d2).and(&ad).for_each(
                    |a, od, g1, g2, &ad| {
                        let (f, s1, s2) = act.eval(*a);
                        *a = f;
                        *od = s1 * ad;
                        *g1 = s1;
                        *g2 = s2;
                    },
                );
                hd.push(outd);
                pd.push(ad);
                d2s.push(d2);
            } else {
                ndarray::Zip::from(&mut a).and(&mut d1).for_each(|a, g1| {
                    let (f, s1) = act.value_slope(*a);
                    *a = f;
                    *g1 = s1;
                });
            }
            h.push(a);
            d1s.push(d1);
        }
        Ok(Tape { h, d1: d1s, d2: d2s, hdot, predot })
    }

    /// Reverse sweep.
    ///
    /// `hbar` seeds the output and `hdotbar` seeds the output tangent (ignored
    /// when the tape carries no tangent). Parameter gradients are *added* into
    /// `param_grad` when given. Returns the input adjoint and, for tangent
    /// tapes, the adjoint of the input tangent.
    pub fn backward(
        &self,
        tape: &Tape,
        hbar: Option<ArrayView2<f64>>,
        hdotbar: Option<ArrayView2<f64>>,
        mut param_grad: Option<&mut [f64]>,
        need_input: bool,
    ) -> (Option<Array2<f64>>, Option<Array2<f64>>) {
        let n = self.n_layers();
        let rows = tape.h[0].nrows();
        let out_w = self.output_width();
        let mut hb = match hbar {
            Some(v) => v.to_owned(),
            None => Array2::zeros((rows, out_w)),
        };
        let tangent = tape.hdot.is_some();
        let mut hdb: Option<Array2<f64>> = if tangent {
            Some(match hdotbar {
                Some(v) => v.to_owned(),
                None => Array2::zeros((rows, out_w)),
            })
        } else {
            None
        };
        for l in (0..n).rev() {
            let d1 = &tape.d1[l];
            let mut abar = Array2::zeros(d1.raw_dim());
            let mut adbar: Option<Array2<f64>> = None;
            match (&hdb, &tape.predot, &tape.d2) {
                (Some(hdb), Some(pd), Some(d2)) => {
                    let ad = &pd[l];
                    let mut adb = Array2::zeros(d1.raw_dim());
                    ndarray::Zip::from(&mut abar)
                        .and(d1)
                        .and(&d2[l])
                        .and(ad)
                        .and(&hb)
                        .and(hdb)
                        .for_each(|ab, &s1, &s2, &ad, &hb, &hdb| {
                            *ab = s1 * hb + s2 * ad * hdb;
                        });
                    ndarray::Zip::from(&mut adb).and(d1).and(hdb).for_each(|adb, &s1, &hdb| {
                        *adb = s1 * hdb;
                    });
                    adbar = Some(adb);
                }
                _ => {
                    ndarray::Zip::from(&mut abar).and(d1).and(&hb).for_each(|ab, &s1, &hb| {
                        *ab = s1 * hb;
                    });
                }
            }
            if let Some(g) = param_grad.as_deref_mut() {
                let (w0, w1) = self.offsets(l);
                let (wg, rest) = g[w0..].split_at_mut(w1 - w0);
                let mut wg = ArrayViewMut2::from_shape((self.widths[l], self.widths[l + 1]), wg).unwrap();
                general_mat_mul(1.0, &tape.h[l].t(), &abar, 1.0, &mut wg);
                if let (Some(adb), Some(hd)) = (&adbar, &tape.hdot) {
                    general_mat_mul(1.0, &hd[l].t(), adb, 1.0, &mut wg);
                }
                let bsum = abar.sum_axis(Axis(0));
                for (gb, s) in rest[..self.widths[l + 1]].iter_mut().zip(bsum.iter()) {
                    *gb += s;
                }
            }
            if l == 0 && !need_input {
                return (None, None);
            }
            let w = self.weight(l);
            hb = abar.dot(&w.t());
            if let Some(adb) = adbar {
                hdb = Some(adb.dot(&w.t()));
            }
        }
        (Some(hb), hdb)
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.step_range(params, grad, lr, 0..params.len());
    }

    /// Updates only `params[range]`; moments outside the range stay untouched.
    pub fn step_range(&mut self, params: &mut [f64], grad: &[f64], lr: f64, range: std::ops::Range<usize>) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in range {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

/// Cosine decay from `base` to 0 over `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    0.5 * base * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

/// Sinusoidal features `[sin(ω_j t), cos(ω_j t)]` with `ω_j` log-spaced
/// between 1 and 1000.
pub fn time_embedding(t: f64, n_freq: usize, out: &mut [f64]) {
    for j in 0..n_freq {
        let w = if n_freq > 1 { 1000f64.powf(j as f64 / (n_freq - 1) as f64) } else { 1.0 };
        out[2 * j] = (w * t).sin();
        out[2 * j + 1] = (w * t).cos();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn net(hidden: Activation, output: Activation) -> Mlp {
        let mut rng = crate::rng::seeded(3);
        Mlp::new(&[3, 5, 4, 2], hidden, output, 1.0, &mut rng).unwrap()
    }

    fn rand_mat(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = crate::rng::seeded(seed);
        Array2::from_shape_vec((rows, cols), crate::rng::normal_vec(&mut rng, rows * cols)).unwrap()
    }

    #[test]
    fn activation_derivatives_match_fd() {
        for act in [Activation::Gelu, Activation::Tanh, Activation::Sigmoid, Activation::Identity] {
            for x in [-3.0, -0.7, 0.0, 0.4, 2.5] {
                let h = 1e-5;
                let (_, d1, d2) = act.eval(x);
                let fd1 = (act.eval(x + h).0 - act.eval(x - h).0) / (2.0 * h);
                let fd2 = (act.eval(x + h).1 - act.eval(x - h).1) / (2.0 * h);
                assert!((d1 - fd1).abs() < 1e-8, "{act:?} {x}");
                assert!((d2 - fd2).abs() < 1e-8, "{act:?} {x}");
                assert_eq!(act.eval(x).0, act.value(x));
            }
        }
    }

    /// loss = Σ out ⊙ r  +  Σ tangent ⊙ s, so hbar = r and hdotbar = s.
    fn scalar(m: &Mlp, x: &Array2<f64>, xd: &Array2<f64>, r: &Array2<f64>, s: &Array2<f64>) -> f64 {
        let t = m.tape(x.view(), Some(xd.view())).unwrap();
        (t.output() * r).sum() + (t.output_tangent().unwrap() * s).sum()
    }

    #[test]
    fn reverse_over_tangent_matches_fd_on_all_parameters() {
        for (hid, out) in [(Activation::Gelu, Activation::Identity), (Activation::Tanh, Activation::Sigmoid)] {
            let mut m = net(hid, out);
            let x = rand_mat(6, 3, 1);
            let xd = rand_mat(6, 3, 2);
            let r = rand_mat(6, 2, 4);
            let s = rand_mat(6, 2, 5);
            let tape = m.tape(x.view(), Some(xd.view())).unwrap();
            let mut g = vec![0.0; m.params().len()];
            let (xb, xdb) = m.backward(&tape, Some(r.view()), Some(s.view()), Some(&mut g), true);
            let h = 1e-6;
            for i in 0..g.len() {
                let p0 = m.params()[i];
                m.params_mut()[i] = p0 + h;
                let fp = scalar(&m, &x, &xd, &r, &s);
                m.params_mut()[i] = p0 - h;
                let fm = scalar(&m, &x, &xd, &r, &s);
                m.params_mut()[i] = p0;
                let fd = (fp - fm) / (2.0 * h);
                assert!((g[i] - fd).abs() <= 1e-4 * g[i].abs().max(1e-3), "param {i}: {} vs {fd}", g[i]);
            }
            let xb = xb.unwrap();
            let xdb = xdb.unwrap();
            for idx in [(0, 0), (3, 2), (5, 1)] {
                let mut xp = x.clone();
                xp[idx] += h;
                let mut xm = x.clone();
                xm[idx] -= h;
                let fd = (scalar(&m, &xp, &xd, &r, &s) - scalar(&m, &xm, &xd, &r, &s)) / (2.0 * h);
                assert!((xb[idx] - fd).abs() < 1e-6 * (1.0 + fd.abs()));
                // the loss is linear in the tangent
                let mut dp = xd.clone();
                dp[idx] += 1.0;
                let fd = scalar(&m, &x, &dp, &r, &s) - scalar(&m, &x, &xd, &r, &s);
                assert!((xdb[idx] - fd).abs() < 1e-9 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn plain_forward_matches_tape() {
        let m = net(Activation::Gelu, Activation::Identity);
        let x = rand_mat(4, 3, 9);
        let a = m.forward(x.view()).unwrap();
        let t = m.tape(x.view(), None).unwrap();
        assert_eq!(&a, t.output());
    }

    #[test]
    fn param_round_trip_and_errors() {
        let m = net(Activation::Gelu, Activation::Identity);
        let n = Mlp::from_params(m.widths(), m.hidden_activation(), m.output_activation(), m.params().to_vec()).unwrap();
        assert_eq!(m, n);
        assert!(Mlp::from_params(&[2, 2], Activation::Tanh, Activation::Tanh, vec![0.0; 3]).is_err());
        assert!(m.forward(Array2::zeros((1, 2)).view()).is_err());
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut opt = Adam::new(2);
        for _ in 0..2000 {
            let g = vec![2.0 * p[0], 4.0 * p[1]];
            opt.step(&mut p, &g, 0.05);
        }
        assert!(p.iter().all(|v| v.abs() < 1e-3));
    }
}
