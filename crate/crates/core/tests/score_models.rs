use ndarray::{Array2, Axis};
use omtps::fields::{mixture_noised_score, DriftField, GaussianMixture};
use omtps::nn::{Activation, Mlp};
use omtps::rng;
use omtps::score::{
    ddpm_train, flow_score_from_velocity, flow_train, FlowSchedule, NoiseScheduleDDPM, ScoreError, ScoreModel,
    LrSchedule, TrainConfig, Variant,
};

fn small_cfg(steps: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        max_steps: Some(steps),
        batch_size: 512,
        learning_rate: 2e-3,
        lr_schedule: LrSchedule::Cosine,
        hidden: vec![64, 64],
        normalize: false,
        seed,
        ..TrainConfig::default()
    }
}

fn random_model(variant: Variant, seed: u64, out_scale: f64) -> ScoreModel {
    let mut r = rng::seeded(seed);
    let net = Mlp::new(&[2 + 8, 16, 16, 2], Activation::Gelu, Activation::Identity, out_scale, &mut r).unwrap();
    ScoreModel::new(variant, net, 4, vec![0.5, -0.5], 2.0).unwrap()
}

fn ddpm() -> Variant {
    Variant::Ddpm { schedule: NoiseScheduleDDPM::default() }
}

fn gaussian_data(n: usize, mean: &[f64], seed: u64) -> Array2<f64> {
    let mut r = rng::seeded(seed);
    Array2::from_shape_fn((n, mean.len()), |(_, c)| mean[c] + rng::normal(&mut r))
}

fn relative_l2(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let num: f64 = (a - b).iter().map(|v| v * v).sum();
    let den: f64 = b.iter().map(|v| v * v).sum();
    (num / den).sqrt()
}

#[test]
fn initial_loss_is_close_to_dimension() {
    let data = gaussian_data(4096, &[0.0, 0.0, 0.0], 1);
    let cfg = TrainConfig { max_steps: Some(1), batch_size: 4096, hidden: vec![32], ..TrainConfig::default() };
    let (_, report) = ddpm_train(data.view(), &NoiseScheduleDDPM::default(), &cfg).unwrap();
    assert!((report.initial_loss - 3.0).abs() < 0.15, "{}", report.initial_loss);
}

#[test]
fn ddpm_delta_dataset_learns_posterior_noise() {
    let mu = [1.0, -2.0];
    let data = Array2::from_shape_fn((2048, 2), |(_, c)| mu[c]);
    let sched = NoiseScheduleDDPM::default();
    let (model, _) = ddpm_train(data.view(), &sched, &small_cfg(10_000, 3)).unwrap();
    let mut r = rng::seeded(99);
    let mut pred = Array2::zeros((500, 2));
    let mut want = Array2::zeros((500, 2));
    for i in 0..500 {
        let tau = 1 + (i * 997) % 1000;
        let ab = sched.alpha_bar(tau);
        let z = [rng::normal(&mut r), rng::normal(&mut r)];
        let x: Vec<f64> = (0..2).map(|c| ab.sqrt() * mu[c] + (1.0 - ab).sqrt() * z[c]).collect();
        let eps = model.predict(Array2::from_shape_vec((1, 2), x.clone()).unwrap().view(), tau as f64).unwrap();
        for c in 0..2 {
            pred[(i, c)] = eps[(0, c)];
            want[(i, c)] = (x[c] - ab.sqrt() * mu[c]) / (1.0 - ab).sqrt();
        }
    }
    let err = relative_l2(&pred, &want);
    assert!(err < 0.05, "relative error {err}");

    // one ancestral step from τ = 1 stays within the posterior width
    let b1 = sched.beta(1);
    let z = model.encode(&mu, 1.0, &mut r).unwrap();
    let x = model.decode(&z, 1.0, &mut r).unwrap();
    assert!(x.iter().zip(&mu).all(|(a, b)| (a - b).abs() < 3.0 * b1.sqrt()));
}

#[test]
fn ddpm_mixture_score_is_aligned_with_oracle() {
    let mix = GaussianMixture::new(vec![0.5, 0.5], vec![vec![2.0, 1.0], vec![-2.0, -1.0]], 0.25).unwrap();
    let mut r = rng::seeded(5);
    let n = 8192;
    let mut data = Array2::zeros((n, 2));
    for i in 0..n {
        let m = &mix.means()[i % 2];
        for c in 0..2 {
            data[(i, c)] = m[c] + 0.5 * rng::normal(&mut r);
        }
    }
    let sched = NoiseScheduleDDPM::default();
    let (model, _) = ddpm_train(data.view(), &sched, &small_cfg(4000, 7)).unwrap();
    for tau in [20usize, 100, 400] {
        let mut cos = 0.0;
        let m = 400;
        for i in 0..m {
            let x0 = data.row(i).to_vec();
            let x = model.encode(&x0, tau as f64, &mut r).unwrap();
            let got = model.score(&x, tau as f64).unwrap();
            let want = mixture_noised_score(&mix, &x, tau, &sched).unwrap();
            let dot: f64 = got.iter().zip(&want).map(|(a, b)| a * b).sum();
            let na: f64 = got.iter().map(|a| a * a).sum::<f64>().sqrt();
            let nb: f64 = want.iter().map(|a| a * a).sum::<f64>().sqrt();
            cos += dot / (na * nb);
        }
        cos /= m as f64;
        assert!(cos > 0.95, "τ = {tau}: mean cosine {cos}");
    }
}

#[test]
fn ddpm_score_errors_outside_range() {
    let model = random_model(ddpm(), 0, 1.0);
    assert!(matches!(model.score(&[0.0, 0.0], 0.0), Err(ScoreError::TauOutOfRange { .. })));
    assert!(model.score(&[0.0, 0.0], 1001.0).is_err());
    assert!(model.score(&[0.0, 0.0], 2.5).is_err());
    assert!(model.score(&[0.0, 0.0], 1000.0).is_ok());
}

#[test]
fn zero_network_gives_zero_score() {
    let model = random_model(ddpm(), 0, 0.0);
    assert!(model.predict(Array2::zeros((1, 2)).view(), 3.0).unwrap().iter().all(|v| *v == 0.0));
    assert_eq!(model.score(&[0.5, -0.5], 10.0).unwrap(), vec![0.0, 0.0]);
}

#[test]
fn ddpm_encode_identity_and_variance() {
    let model = random_model(ddpm(), 0, 1.0);
    let mut r = rng::seeded(3);
    assert_eq!(model.encode(&[0.3, 0.9], 0.0, &mut r).unwrap(), vec![0.3, 0.9]);
    let tau = 200.0;
    let ab = NoiseScheduleDDPM::default().alpha_bar(200);
    let x = Array2::from_shape_fn((10_000, 2), |(_, c)| [0.3, 0.9][c]);
    let z = model.encode_batch(x.view(), tau, &mut r).unwrap();
    let var = z.var_axis(Axis(0), 1.0);
    // noise is added in normalized units, so data-space variance carries the scale
    let want = (1.0 - ab) * model.scale() * model.scale();
    for v in var.iter() {
        assert!((v / want - 1.0).abs() < 0.05, "{v} vs {want}");
    }
}

#[test]
fn latent_step_with_zero_score_is_pure_noise() {
    let model = random_model(ddpm(), 0, 0.0);
    let sched = NoiseScheduleDDPM::default();
    let mut r = rng::seeded(4);
    let tau = 300usize;
    let b = sched.beta(tau);
    let want = (2.0 * b - b * b) * model.scale() * model.scale();
    let x = [0.1, 0.2];
    let n = 10_000;
    let mut acc = [0.0; 2];
    for _ in 0..n {
        let y = model.latent_sde_step(&x, tau as f64, &mut r).unwrap();
        for c in 0..2 {
            acc[c] += (y[c] - x[c]).powi(2);
        }
    }
    for a in acc {
        assert!((a / n as f64 / want - 1.0).abs() < 0.05);
    }
    assert!(model.latent_sde_step(&x, 0.0, &mut r).is_err());
    let flow = random_model(Variant::Flow { schedule: FlowSchedule::Linear }, 0, 0.0);
    assert!(matches!(flow.latent_sde_step(&x, 0.5, &mut r), Err(ScoreError::Unsupported(_))));
}

#[test]
fn latent_step_shrinks_with_beta() {
    let mut moves = Vec::new();
    for scale in [1.0, 0.5] {
        let sched = NoiseScheduleDDPM::linear(1000, 1e-4 * scale, 0.02 * scale).unwrap();
        let model = random_model(Variant::Ddpm { schedule: sched }, 2, 1.0);
        let mut r = rng::seeded(11);
        let mut acc = 0.0;
        for _ in 0..4000 {
            let y = model.latent_sde_step(&[0.2, -0.1], 500.0, &mut r).unwrap();
            acc += (y[0] - 0.2).powi(2) + (y[1] + 0.1).powi(2);
        }
        moves.push(acc);
    }
    let ratio = moves[1] / moves[0];
    assert!((0.4..0.6).contains(&ratio), "{ratio}");
}

#[test]
fn gaussian_velocity_converts_to_exact_score() {
    let mu = [0.7, -1.2];
    let x = [0.3, 0.4];
    for sched in [FlowSchedule::Linear, FlowSchedule::Cosine] {
        for t in [0.05, 0.3, 0.5, 0.77, 0.95] {
            let (a, s, ad, sd) = (sched.alpha(t), sched.sigma(t), sched.alpha_dot(t), sched.sigma_dot(t));
            let v = a * a + s * s;
            let r: Vec<f64> = (0..2).map(|c| x[c] - a * mu[c]).collect();
            let u: Vec<f64> = (0..2).map(|c| ad * mu[c] + (ad * a + sd * s) * r[c] / v).collect();
            let got = flow_score_from_velocity(sched, &x, t, &u).unwrap();
            for c in 0..2 {
                let want = -r[c] / v;
                assert!((got[c] - want).abs() <= 1e-10 * want.abs(), "{sched:?} t={t}: {} vs {want}", got[c]);
            }
        }
    }
}

fn flow_gaussian_model() -> ScoreModel {
    let data = gaussian_data(200_000, &[0.0, 0.0], 21);
    let cfg = TrainConfig { batch_size: 1024, ..small_cfg(8000, 13) };
    flow_train(data.view(), FlowSchedule::Linear, &cfg).unwrap().0
}

#[test]
fn flow_gaussian_velocity_decode_and_round_trip() {
    let model = flow_gaussian_model();
    let mut r = rng::seeded(8);
    let mut pred = Array2::zeros((400, 2));
    let mut want = Array2::zeros((400, 2));
    for i in 0..400 {
        let t = 0.05 + 0.9 * (i as f64 + 0.5) / 400.0;
        let x = [rng::normal(&mut r), rng::normal(&mut r)];
        let u = model.predict(Array2::from_shape_vec((1, 2), x.to_vec()).unwrap().view(), t).unwrap();
        let v = t * t + (1.0 - t) * (1.0 - t);
        for c in 0..2 {
            pred[(i, c)] = u[(0, c)];
            want[(i, c)] = (2.0 * t - 1.0) * x[c] / v;
        }
    }
    let err = relative_l2(&pred, &want);
    assert!(err < 0.05, "velocity error {err}");

    let z = gaussian_data(10_000, &[0.0, 0.0], 31);
    let samples = model.decode_batch(z.view(), 0.0, &mut r).unwrap();
    let mean = samples.mean_axis(Axis(0)).unwrap();
    let centered = &samples - &mean;
    let cov = centered.t().dot(&centered) / (samples.nrows() - 1) as f64;
    assert!(mean.iter().all(|m| m.abs() < 0.05), "{mean}");
    assert!((cov[(0, 0)] - 1.0).abs() < 0.05 && (cov[(1, 1)] - 1.0).abs() < 0.05, "{cov}");
    assert!(cov[(0, 1)].abs() < 0.05);

    let x = [0.8, -0.4];
    let lat = model.encode(&x, 0.5, &mut r).unwrap();
    let back = model.decode(&lat, 0.5, &mut r).unwrap();
    assert!(x.iter().zip(&back).all(|(a, b)| (a - b).abs() < 0.02), "{back:?}");
    assert!(model.encode(&x, 1.5, &mut r).is_err());
    assert!(model.score(&x, 1.0).is_err());
    assert!(model.score(&x, 0.0).is_err());
}

#[test]
fn flow_delta_dataset_velocity() {
    let mu = [2.0, 1.0];
    let data = Array2::from_shape_fn((2048, 2), |(_, c)| mu[c]);
    let cfg = small_cfg(4000, 17);
    let (model, _) = flow_train(data.view(), FlowSchedule::Linear, &cfg).unwrap();
    let mut r = rng::seeded(41);
    let mut pred = Array2::zeros((300, 2));
    let mut want = Array2::zeros((300, 2));
    for i in 0..300 {
        let t = 0.9 * (i as f64 + 0.5) / 300.0;
        let x: Vec<f64> = (0..2).map(|c| t * mu[c] + (1.0 - t) * rng::normal(&mut r)).collect();
        let u = model.predict(Array2::from_shape_vec((1, 2), x.clone()).unwrap().view(), t).unwrap();
        for c in 0..2 {
            pred[(i, c)] = u[(0, c)];
            want[(i, c)] = (mu[c] - x[c]) / (1.0 - t);
        }
    }
    let err = relative_l2(&pred, &want);
    assert!(err < 0.05, "velocity error {err}");
}

#[test]
fn training_is_deterministic_and_permutation_invariant_in_loss() {
    let data = gaussian_data(1024, &[1.0, 2.0], 2);
    let cfg = TrainConfig { max_steps: Some(20), batch_size: 128, hidden: vec![16], ..TrainConfig::default() };
    let (a, ra) = ddpm_train(data.view(), &NoiseScheduleDDPM::default(), &cfg).unwrap();
    let (b, rb) = ddpm_train(data.view(), &NoiseScheduleDDPM::default(), &cfg).unwrap();
    assert_eq!(a.net().params(), b.net().params());
    assert_eq!(ra, rb);
    let cfg2 = TrainConfig { seed: 1, ..cfg };
    let (c, _) = ddpm_train(data.view(), &NoiseScheduleDDPM::default(), &cfg2).unwrap();
    assert_ne!(a.net().params(), c.net().params());
}

#[test]
fn training_rejects_bad_input() {
    let empty = Array2::<f64>::zeros((0, 2));
    assert!(matches!(
        ddpm_train(empty.view(), &NoiseScheduleDDPM::default(), &TrainConfig::default()),
        Err(ScoreError::EmptyData)
    ));
    let data = gaussian_data(10, &[0.0], 0);
    let bad = TrainConfig { learning_rate: 0.0, ..TrainConfig::default() };
    assert!(matches!(flow_train(data.view(), FlowSchedule::Linear, &bad), Err(ScoreError::Config(_))));
    let huge = TrainConfig { learning_rate: 1e200, max_steps: Some(50), batch_size: 10, hidden: vec![8], ..TrainConfig::default() };
    assert!(matches!(
        ddpm_train(data.view(), &NoiseScheduleDDPM::default(), &huge),
        Err(ScoreError::Divergent { .. })
    ));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut model = random_model(Variant::Flow { schedule: FlowSchedule::Cosine }, 5, 1.0);
    model.ode_steps = 37;
    let bytes = model.to_bytes();
    let back = ScoreModel::from_bytes(&bytes).unwrap();
    assert_eq!(back, model);
    assert_eq!(back.to_bytes(), bytes);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    model.save(&path).unwrap();
    assert_eq!(ScoreModel::load(&path).unwrap(), model);
    assert!(ScoreModel::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    assert!(ScoreModel::from_bytes(&bytes[..4]).is_err());
}

#[test]
fn score_field_derivatives_match_finite_differences() {
    for variant in [ddpm(), Variant::Flow { schedule: FlowSchedule::Linear }] {
        let model = random_model(variant.clone(), 9, 1.0);
        let tau = if matches!(variant, Variant::Ddpm { .. }) { 40.0 } else { 0.4 };
        let f = model.field(tau).unwrap();
        let x = [0.3, -0.8];
        let w = [0.7, 1.9];
        let h = 1e-5;
        let jac = |x: &[f64]| -> [[f64; 2]; 2] {
            let mut j = [[0.0; 2]; 2];
            for c in 0..2 {
                let mut p = x.to_vec();
                p[c] += h;
                let fp = f.drift(&p);
                p[c] -= 2.0 * h;
                let fm = f.drift(&p);
                for r in 0..2 {
                    j[r][c] = (fp[r] - fm[r]) / (2.0 * h);
                }
            }
            j
        };
        let j = jac(&x);
        let (div, grad) = f.weighted_divergence(&x, &w).unwrap();
        let fd_div = w[0] * j[0][0] + w[1] * j[1][1];
        assert!((div - fd_div).abs() < 1e-7 * (1.0 + fd_div.abs()));
        for c in 0..2 {
            let mut p = x.to_vec();
            p[c] += h;
            let dp = f.weighted_divergence(&p, &w).unwrap().0;
            p[c] -= 2.0 * h;
            let dm = f.weighted_divergence(&p, &w).unwrap().0;
            assert!((grad[c] - (dp - dm) / (2.0 * h)).abs() < 1e-6 * (1.0 + grad[c].abs()));
        }
        let vjp = f.drift_vjp(&x, &w);
        for c in 0..2 {
            let fd = w[0] * j[0][c] + w[1] * j[1][c];
            assert!((vjp[c] - fd).abs() < 1e-7 * (1.0 + fd.abs()));
        }
        let (form, _) = f.jacobian_form(&x, &w, &[1.0, -0.5]).unwrap();
        let fd_form = (0..2).map(|r| w[r] * (j[r][0] - 0.5 * j[r][1])).sum::<f64>();
        assert!((form - fd_form).abs() < 1e-7 * (1.0 + fd_form.abs()));
    }
}
