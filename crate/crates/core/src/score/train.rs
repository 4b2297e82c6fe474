use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{FlowSchedule, NoiseScheduleDDPM, ScoreError, ScoreModel, Variant};
use crate::nn::{cosine_lr, Activation, Adam, Mlp};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Overrides `epochs` when set.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    pub ema_decay: Option<f64>,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub n_freq: usize,
    /// Shift and scale data to zero mean and unit isotropic variance.
    pub normalize: bool,
    /// Scale of the initial output layer relative to a standard draw.
    pub out_init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            max_steps: None,
            batch_size: 4096,
            learning_rate: 1e-3,
            lr_schedule: LrSchedule::Constant,
            seed: 0,
            ema_decay: None,
            hidden: vec![256, 256],
            activation: Activation::Gelu,
            n_freq: 8,
            normalize: true,
            out_init_scale: 1e-2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ScoreError> {
        let bad = |m: &str| Err(ScoreError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.epochs == 0 && self.max_steps.is_none() {
            return bad("epochs must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return bad("ema_decay must lie in [0, 1)");
            }
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    /// Mean training loss per epoch (or per block of steps).
    pub epoch_losses: Vec<f64>,
    pub initial_loss: f64,
}

pub fn ddpm_train(
    data: ArrayView2<f64>,
    schedule: &NoiseScheduleDDPM,
    cfg: &TrainConfig,
) -> Result<(ScoreModel, TrainReport), ScoreError> {
    train(data, Variant::Ddpm { schedule: schedule.clone() }, cfg)
}

pub fn flow_train(
    data: ArrayView2<f64>,
    schedule: FlowSchedule,
    cfg: &TrainConfig,
) -> Result<(ScoreModel, TrainReport), ScoreError> {
    train(data, Variant::Flow { schedule }, cfg)
}

fn normalization(data: &ArrayView2<f64>, enabled: bool) -> (Vec<f64>, f64) {
    let k = data.ncols();
    if !enabled {
        return (vec![0.0; k], 1.0);
    }
    let n = data.nrows() as f64;
    let mean: Vec<f64> = (0..k).map(|c| data.column(c).sum() / n).collect();
    let var: f64 = (0..k)
        .map(|c| data.column(c).iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>() / n)
        .sum::<f64>()
        / k as f64;
    let scale = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
    (mean, scale)
}

fn train(data: ArrayView2<f64>, variant: Variant, cfg: &TrainConfig) -> Result<(ScoreModel, TrainReport), ScoreError> {
    cfg.validate()?;
    let n = data.nrows();
    let k = data.ncols();
    if n == 0 || k == 0 {
        return Err(ScoreError::EmptyData);
    }
    let (shift, scale) = normalization(&data, cfg.normalize);
    let mut widths = vec![k + 2 * cfg.n_freq];
    widths.extend(&cfg.hidden);
    widths.push(k);
    let mut init_rng = rng::stream(cfg.seed, 0x1417);
    let net = Mlp::new(&widths, cfg.activation, Activation::Identity, cfg.out_init_scale, &mut init_rng)?;
    let mut model = ScoreModel::new(variant, net, cfg.n_freq, shift, scale)?;
    model.seed = cfg.seed;
    model.train_digest = cfg.digest();
    let xn = model.normalize(data);

    let batch = cfg.batch_size.min(n);
    let steps_per_epoch = n.div_ceil(batch);
    let total = cfg.max_steps.unwrap_or(cfg.epochs * steps_per_epoch);
    let mut rng = rng::stream(cfg.seed, 0x7261);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let n_params = model.net.params().len();
    let mut adam = Adam::new(n_params);
    let mut grad = vec![0.0; n_params];
    let mut ema = cfg.ema_decay.map(|_| model.net.params().to_vec());
    let mut epoch_losses = Vec::new();
    let mut acc = (0.0, 0usize);
    let mut initial_loss = f64::NAN;

    let mut xb = Array2::zeros((batch, k));
    for step in 0..total {
        if cursor + batch > n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        for (r, &i) in order[cursor..cursor + batch].iter().enumerate() {
            xb.row_mut(r).assign(&xn.row(i));
        }
        cursor += batch;
        let (input, target) = noised_batch(&model, &xb, &mut rng);
        let tape = model.net.tape(input.view(), None)?;
        let diff = tape.output() - &target;
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / batch as f64;
        if !loss.is_finite() {
            return Err(ScoreError::Divergent { step, loss });
        }
        if step == 0 {
            initial_loss = loss;
        }
        let seed = diff * (2.0 / batch as f64);
        grad.iter_mut().for_each(|g| *g = 0.0);
        model.net.backward(&tape, Some(seed.view()), None, Some(&mut grad), false);
        let lr = match cfg.lr_schedule {
            LrSchedule::Constant => cfg.learning_rate,
            LrSchedule::Cosine => cosine_lr(cfg.learning_rate, step, total),
        };
        adam.step(model.net.params_mut(), &grad, lr);
        if let (Some(e), Some(d)) = (ema.as_mut(), cfg.ema_decay) {
            for (e, p) in e.iter_mut().zip(model.net.params()) {
                *e = d * *e + (1.0 - d) * p;
            }
        }
        acc.0 += loss;
        acc.1 += 1;
        if acc.1 == steps_per_epoch || step + 1 == total {
            epoch_losses.push(acc.0 / acc.1 as f64);
            log::debug!("epoch {} loss {:.6}", epoch_losses.len(), acc.0 / acc.1 as f64);
            acc = (0.0, 0);
        }
    }
    if let Some(e) = ema {
        model.net.params_mut().copy_from_slice(&e);
    }
    Ok((model, TrainReport { steps: total, epoch_losses, initial_loss }))
}

/// Network inputs and regression targets for one batch of normalized data.
fn noised_batch<R: Rng>(model: &ScoreModel, x: &Array2<f64>, rng: &mut R) -> (Array2<f64>, Array2<f64>) {
    let (b, k) = x.dim();
    let width = model.net.input_width();
    let mut input = Array2::zeros((b, width));
    let mut target = Array2::zeros((b, k));
    let mut z = vec![0.0; k];
    let mut emb = vec![0.0; 2 * model.n_freq];
    for r in 0..b {
        rng::fill_normal(rng, &mut z);
        let tau = match &model.variant {
            Variant::Ddpm { schedule } => {
                let t = rng.random_range(1..=schedule.steps());
                let ab = schedule.alpha_bar(t);
                let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
                for c in 0..k {
                    input[(r, c)] = sa * x[(r, c)] + sn * z[c];
                    target[(r, c)] = z[c];
                }
                t as f64
            }
            Variant::Flow { schedule } => {
                let t: f64 = rng.random();
                let (a, s, ad, sd) = (schedule.alpha(t), schedule.sigma(t), schedule.alpha_dot(t), schedule.sigma_dot(t));
                for c in 0..k {
                    input[(r, c)] = a * x[(r, c)] + s * z[c];
                    target[(r, c)] = ad * x[(r, c)] + sd * z[c];
                }
                t
            }
        };
        time_embedding_into(model, tau, &mut emb);
        for (j, e) in emb.iter().enumerate() {
            input[(r, k + j)] = *e;
        }
    }
    (input, target)
}

fn time_embedding_into(model: &ScoreModel, tau: f64, out: &mut [f64]) {
    crate::nn::time_embedding(model.time_feature(tau), model.n_freq, out);
}
