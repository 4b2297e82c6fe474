use ndarray::{array, Array2};

use super::*;
use crate::fields::{AnalyticPotential, DoubleWell, LinearDrift, MuellerBrown, Quadratic};

fn mb_path(l: usize, seed: u64) -> Path {
    let mut rng = rng::seeded(seed);
    let mut p = Path::straight_line(&[23.0, 31.0], &[42.0, 8.5], l, 0.01).unwrap();
    for i in 1..l {
        for c in 0..2 {
            p.points_mut()[(i, c)] += 2.0 * rng::normal(&mut rng);
        }
    }
    p
}

#[test]
fn constant_path_at_critical_point_has_zero_truncated_action() {
    let q = Quadratic::isotropic(2, 1.0);
    let p = Path::from_rows(&vec![vec![0.0, 0.0]; 6], 0.1).unwrap();
    let params = OmParams::new(0.1, 1.0, 1.0, ActionVariant::Truncated);
    assert_eq!(om_action(&p, &q, &params).unwrap(), 0.0);
}

#[test]
fn two_point_free_particle() {
    let f = LinearDrift::diagonal(&[0.0, 0.0]);
    let p = Path::from_rows(&[vec![0.0, 0.0], vec![1.0, 2.0]], 1.0).unwrap();
    let params = OmParams::new(1.0, 1.0, 1.0, ActionVariant::Full);
    assert!((om_action(&p, &f, &params).unwrap() - 5.0 / 4.0).abs() < 1e-15);
}

#[test]
fn quadratic_well_full_action_matches_term_by_term_sum() {
    // independent summation of the three terms for φ = x²/2 on x_i = 1 − i/4
    let l = 4;
    let xs: Vec<f64> = (0..=l).map(|i| 1.0 - i as f64 / l as f64).collect();
    let (dt, zeta, d) = (1.0, 1.0, 1.0);
    let mut a = 0.0;
    for i in 0..l {
        a += (xs[i + 1] - xs[i]).powi(2) / (2.0 * dt);
    }
    let mut b = 0.0;
    let mut c = 0.0;
    for x in &xs[1..l] {
        let force = -x;
        b += dt / (2.0 * zeta * zeta) * force * force;
        c += d * dt / zeta * -1.0;
    }
    let oracle = (a + b + c) / (2.0 * d);
    assert!((oracle - -1.21875).abs() < 1e-15);
    let p = Path::from_rows(&xs.iter().map(|x| vec![*x]).collect::<Vec<_>>(), dt).unwrap();
    let params = OmParams::new(dt, zeta, d, ActionVariant::Full);
    let s = om_action(&p, &Quadratic::isotropic(1, 1.0), &params).unwrap();
    assert!((s - oracle).abs() < 1e-14);
}

#[test]
fn full_action_rejected_at_zero_diffusivity() {
    let p = Path::straight_line(&[0.0], &[1.0], 3, 0.1).unwrap();
    let params = OmParams::new(0.1, 1.0, 0.0, ActionVariant::Full);
    assert!(matches!(om_action(&p, &Quadratic::isotropic(1, 1.0), &params), Err(ActionError::Params(_))));
    let mut t = params.clone();
    t.variant = ActionVariant::Truncated;
    let (v, _) = evaluate(&p, &Quadratic::isotropic(1, 1.0), &t, None, false, 0).unwrap();
    assert!(v.rescaled);
}

fn fd_check(path: &Path, field: &(impl DriftField + ?Sized), params: &OmParams, tol: f64) {
    let g = action_gradient(path, field, params).unwrap();
    let l = path.segments();
    for i in 1..l {
        for c in 0..path.dim() {
            let h = 1e-5 * (1.0 + path.point(i)[c].abs());
            let mut p = path.clone();
            p.points_mut()[(i, c)] += h;
            let sp = om_action(&p, field, params).unwrap();
            p.points_mut()[(i, c)] -= 2.0 * h;
            let sm = om_action(&p, field, params).unwrap();
            let fd = (sp - sm) / (2.0 * h);
            let err = (g[(i, c)] - fd).abs() / g[(i, c)].abs().max(1e-2);
            assert!(err < tol, "point {i} coord {c}: {} vs {fd}", g[(i, c)]);
        }
    }
    assert!(g.row(0).iter().chain(g.row(l).iter()).all(|v| *v == 0.0));
}

#[test]
fn gradient_matches_finite_differences() {
    let mb = MuellerBrown::default();
    for (variant, d) in [(ActionVariant::Truncated, 0.0), (ActionVariant::Full, 1.0), (ActionVariant::Full, 4.0)] {
        let params = OmParams::new(0.01, 0.01, d, variant);
        fd_check(&mb_path(12, 3), &mb, &params, 1e-6);
    }
    let mut per = OmParams::new(0.05, 1.0, 0.5, ActionVariant::Full);
    per.zeta = Zeta::PerCoordinate(vec![0.5, 2.0]);
    fd_check(&mb_path(8, 4), &mb, &per, 1e-6);
    let dw = DoubleWell::new(3, 1.0, 0.5).unwrap();
    let p = Path::from_rows(&[vec![-1.0, 0.2, 0.1], vec![-0.3, 0.5, 0.0], vec![0.4, -0.2, 0.3], vec![1.0, 0.0, 0.0]], 0.1).unwrap();
    fd_check(&p, &dw, &OmParams::new(0.1, 1.0, 1.0, ActionVariant::Full), 1e-6);
}

#[test]
fn spring_mode_moves_endpoints() {
    let q = Quadratic::isotropic(1, 1.0);
    let p = Path::straight_line(&[1.0], &[-1.0], 4, 0.1).unwrap();
    let mut params = OmParams::new(0.1, 1.0, 1.0, ActionVariant::Truncated);
    params.endpoints = EndpointMode::Spring { constant: 10.0 };
    let res = optimize_path(&p, &q, &params, &OptimConfig::new(50, 0.01, OptimizerKind::Adam)).unwrap();
    assert_ne!(res.path.point(0)[0], 1.0);
    assert!((res.path.point(0)[0] - 1.0).abs() < 0.5);
}

#[test]
fn zero_steps_return_initial_path() {
    let mb = MuellerBrown::default();
    let p = mb_path(10, 1);
    let params = OmParams::new(0.01, 0.01, 0.0, ActionVariant::Truncated);
    let res = optimize_path(&p, &mb, &params, &OptimConfig::new(0, 0.2, OptimizerKind::Adam)).unwrap();
    assert_eq!(res.path, p);
    assert_eq!(res.trace, vec![om_action(&p, &mb, &params).unwrap()]);
}

#[test]
fn optimized_quadratic_path_is_stationary() {
    let q = Quadratic::new(vec![0.0, 0.0], vec![1.0, 3.0]).unwrap();
    let p = Path::straight_line(&[1.0, -1.0], &[-1.0, 2.0], 10, 0.2).unwrap();
    let params = OmParams::new(0.2, 1.0, 0.5, ActionVariant::Full);
    let mut cfg = OptimConfig::new(20_000, 0.05, OptimizerKind::GradientDescent);
    cfg.tolerance = 0.0;
    let res = optimize_path(&p, &q, &params, &cfg).unwrap();
    let g = action_gradient(&res.path, &q, &params).unwrap();
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(norm < 1e-6, "{norm}");
    assert_eq!(res.path.point(0), p.point(0));
}

#[test]
fn hutchinson_linear_drift_mean_within_three_standard_errors() {
    let f = LinearDrift::diagonal(&[1.0, -2.0, 0.5, 3.0]);
    let mut rng = rng::seeded(8);
    let s = hutchinson_samples(&f, &[0.1, 0.2, 0.3, 0.4], 10_000, ProbeKind::Gaussian, &mut rng).unwrap();
    let n = s.len() as f64;
    let mean = s.iter().sum::<f64>() / n;
    let se = (s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
    assert!((mean - f.trace()).abs() < 3.0 * se, "{mean} vs {}", f.trace());
}

#[test]
fn hutchinson_scalar_jacobian() {
    let c = 1.7;
    let f = LinearDrift::diagonal(&[c; 3]);
    let mut rng = rng::seeded(2);
    let est = hutchinson_divergence(&f, &[0.0; 3], 10_000, &mut rng).unwrap();
    assert!((est / (3.0 * c) - 1.0).abs() < 0.02);
    let mut rng = rng::seeded(2);
    let v = rng::normal_vec(&mut rng, 3);
    let mut rng = rng::seeded(2);
    let one = hutchinson_divergence(&f, &[0.0; 3], 1, &mut rng).unwrap();
    assert!((one - c * v.iter().map(|x| x * x).sum::<f64>()).abs() < 1e-12);
}

#[test]
fn hutchinson_rejects_fields_without_jacobian_products() {
    let f = crate::fields::ClosureField::new(1, |x: &[f64]| vec![-x[0]]);
    let mut rng = rng::seeded(0);
    assert!(hutchinson_divergence(&f, &[0.0], 1, &mut rng).is_err());
    assert!(hutchinson_divergence(&f, &[0.0], 0, &mut rng).is_err());
}

#[test]
fn hutchinson_gradient_is_unbiased() {
    let mb = MuellerBrown::default();
    let p = mb_path(4, 7);
    let exact = OmParams::new(0.01, 0.01, 1.0, ActionVariant::Full);
    let g_exact = action_gradient(&p, &mb, &exact).unwrap();
    let mut stoch = exact.clone();
    stoch.divergence = DivergenceMode::Hutchinson { n_probes: 1, seed: 11, probe: ProbeKind::Gaussian };
    let rounds = 10_000;
    let mut samples = Vec::with_capacity(rounds);
    for r in 0..rounds {
        samples.push(evaluate(&p, &mb, &stoch, None, true, r as u64).unwrap().1.unwrap());
    }
    for i in 1..p.segments() {
        for c in 0..2 {
            let xs: Vec<f64> = samples.iter().map(|g| g[(i, c)]).collect();
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let se = (xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
            assert!((mean - g_exact[(i, c)]).abs() < 3.0 * se + 1e-12, "{i},{c}: {mean} vs {}", g_exact[(i, c)]);
        }
    }
}

#[test]
fn unwrap_without_stages_is_two_blocks() {
    let f = DoubleWell::new(1, 1.0, 0.0).unwrap();
    let params = OmParams::new(0.1, 1.0, 0.0, ActionVariant::Truncated);
    let (p, stages) = initial_guess_unwrap(&[-1.0], &[1.0], 4, 0, &f, &params, &OptimConfig::new(10, 0.1, OptimizerKind::Adam)).unwrap();
    assert!(stages.is_empty());
    assert_eq!(p.points(), &array![[-1.0], [-1.0], [1.0], [1.0]]);
    assert!(initial_guess_unwrap(&[-1.0], &[1.0], 3, 0, &f, &params, &OptimConfig::new(1, 0.1, OptimizerKind::Adam)).is_err());
}

#[test]
fn unwrap_double_well_crosses_saddle_monotonically() {
    let f = DoubleWell::new(1, 1.0, 0.0).unwrap();
    let params = OmParams::new(0.1, 1.0, 0.0, ActionVariant::Truncated);
    let cfg = OptimConfig::new(2000, 0.02, OptimizerKind::Adam);
    let (p, stages) = initial_guess_unwrap(&[-1.0], &[1.0], 4, 3, &f, &params, &cfg).unwrap();
    assert_eq!(p.n_points(), 32);
    let xs: Vec<f64> = (0..32).map(|i| p.point(i)[0]).collect();
    assert!(xs.windows(2).all(|w| w[1] >= w[0]), "{xs:?}");
    assert!(xs[0] < 0.0 && xs[31] > 0.0);
    for s in &stages {
        assert!(s.action_after <= s.action_before);
    }
}

#[test]
fn straight_latent_guess_without_noise() {
    let mut rng = rng::seeded(1);
    let net = crate::nn::Mlp::new(&[2 + 4, 8, 2], crate::nn::Activation::Gelu, crate::nn::Activation::Identity, 1.0, &mut rng).unwrap();
    let model = crate::score::ScoreModel::new(
        crate::score::Variant::Ddpm { schedule: crate::score::NoiseScheduleDDPM::default() },
        net,
        2,
        vec![0.0, 0.0],
        1.0,
    )
    .unwrap();
    let opts = LatentGuessOptions { repin: false, ..Default::default() };
    let p = initial_guess_latent(&model, &[0.0, 1.0], &[4.0, -3.0], 0.0, 4, &opts, &mut rng).unwrap();
    let line = Path::straight_line(&[0.0, 1.0], &[4.0, -3.0], 4, 1.0).unwrap();
    assert!((p.points() - line.points()).iter().all(|v| v.abs() < 1e-15));
    let opts = LatentGuessOptions::default();
    let p = initial_guess_latent(&model, &[0.0, 1.0], &[4.0, -3.0], 8.0, 6, &opts, &mut rng).unwrap();
    assert_eq!(p.point_vec(0), vec![0.0, 1.0]);
    assert_eq!(p.point_vec(6), vec![4.0, -3.0]);
}

#[test]
fn path_csv_round_trip() {
    let p = mb_path(7, 9);
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("p.csv");
    let params = OmParams::new(0.01, 0.01, 0.0, ActionVariant::Truncated);
    write_path(&p, &csv, Some(&params), None, &[1.0, 0.5], Some(3)).unwrap();
    let (back, side) = read_path(&csv).unwrap();
    assert_eq!(back, p);
    assert!(side.rescaled);
    assert_eq!(side.params, Some(params));
}

#[test]
fn max_energy_point() {
    let mb = MuellerBrown::default();
    let p = Path::new(Array2::from_shape_vec((3, 2), vec![23.0, 31.0, 30.0, 20.0, 42.0, 8.5]).unwrap(), 1.0).unwrap();
    let (i, e) = p.max_by(|x| mb.value(x));
    assert_eq!(i, 1);
    assert_eq!(e, mb.value(&[30.0, 20.0]));
}
