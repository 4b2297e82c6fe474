use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use omtps::action::{
    initial_guess_latent, initial_guess_unwrap, optimize_path, read_path, write_path, ActionVariant, OmParams, Path as OmPath,
};
use omtps::committor::{
    estimate_rate, reweight, seed_sampling_from_path, solve_bke_grid, train_committor, CommittorGrid, GridSpec,
    RegionSpec, SolverConfig,
};
use omtps::fields::{AnyField, DriftField, FieldSpec};
use omtps::io::{self, Artifact, RunManifest};
use omtps::langevin::{pool, read_trajectories, simulate, write_trajectories};
use omtps::msm::{discretize_paths, fit_clusters, fit_msm, path_metrics, sample_bridge, PathMetrics};
use omtps::rng;
use omtps::score::{ddpm_train, flow_train, ScoreModel};
use rand::Rng;
use serde::Serialize;

use crate::config::*;
use crate::error::CliError;

/// Per-run state: where outputs go, how relative inputs resolve, and the
/// artifacts touched so far.
pub struct Ctx {
    pub out: PathBuf,
    pub base: PathBuf,
    pub seed: Option<u64>,
    inputs: Vec<Artifact>,
    outputs: Vec<Artifact>,
}

impl Ctx {
    pub fn new(out: PathBuf, base: PathBuf, seed: Option<u64>) -> Result<Self, CliError> {
        fs::create_dir_all(&out).map_err(|e| CliError::config(format!("{}: {e}", out.display())))?;
        Ok(Ctx { out, base, seed, inputs: Vec::new(), outputs: Vec::new() })
    }

    /// Resolves an input and checks it against a pinned digest or, failing
    /// that, against the manifest of the run that produced it.
    fn input(&mut self, r: &InputRef) -> Result<PathBuf, CliError> {
        let path = r.resolve(&self.base);
        if !path.is_file() {
            return Err(CliError::config(format!("input {} does not exist", path.display())));
        }
        let art = Artifact::of(&path)?;
        let recorded = match r.pinned() {
            Some(d) => Some(d.to_string()),
            None => recorded_digest(&path),
        };
        if let Some(expected) = recorded {
            if expected != art.sha256 {
                return Err(CliError::Stale(format!(
                    "{} has digest {} but {expected} was recorded",
                    path.display(),
                    art.sha256
                )));
            }
        }
        self.inputs.push(art);
        Ok(path)
    }

    /// Also registers the JSON sidecar that travels with a CSV.
    fn input_with_sidecar(&mut self, r: &InputRef) -> Result<PathBuf, CliError> {
        let path = self.input(r)?;
        let side = path.with_extension("json");
        if side.is_file() {
            self.inputs.push(Artifact::of(&side)?);
        }
        Ok(path)
    }

    fn out_path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn output(&mut self, path: &Path) -> Result<(), CliError> {
        self.outputs.push(Artifact::of(path)?);
        Ok(())
    }

    fn output_with_sidecar(&mut self, path: &Path) -> Result<(), CliError> {
        self.output(path)?;
        self.output(&path.with_extension("json"))
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let p = self.out_path(name);
        io::write_json(&p, value)?;
        self.output(&p)
    }

    fn seed_or(&self, configured: u64) -> u64 {
        self.seed.unwrap_or(configured)
    }

    pub fn finish(self, subcommand: &str, config_text: &str, seed: u64, started: Instant) -> Result<(), CliError> {
        let manifest = RunManifest {
            subcommand: subcommand.into(),
            config_sha256: io::sha256_hex(config_text.as_bytes()),
            seed,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            inputs: self.inputs,
            outputs: self.outputs,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        io::write_json(&self.out.join("manifest.json"), &manifest)?;
        Ok(())
    }
}

/// Digest recorded for `path` by a manifest in the same directory, if any.
fn recorded_digest(path: &Path) -> Option<String> {
    let manifest: RunManifest = io::read_json(&path.parent()?.join("manifest.json")).ok()?;
    let name = path.file_name()?;
    manifest.outputs.into_iter().find(|a| Path::new(&a.path).file_name() == Some(name)).map(|a| a.sha256)
}

fn check_version(v: u32) -> Result<(), CliError> {
    if v != CONFIG_VERSION {
        return Err(CliError::config(format!("unsupported config version {v}, expected {CONFIG_VERSION}")));
    }
    Ok(())
}

pub fn run_simulate(cfg: &SimulateConfig, ctx: &mut Ctx) -> Result<u64, CliError> {
    check_version(cfg.version)?;
    let field = cfg.field.build()?;
    let mut sim = cfg.sim.clone();
    sim.seed = ctx.seed_or(sim.seed);
    let inits: Vec<Vec<f64>> = match &cfg.init {
        InitSpec::Points { points } => {
            if points.is_empty() {
                return Err(CliError::config("init.points is empty"));
            }
            (0..sim.replicas).map(|r| points[r % points.len()].clone()).collect()
        }
        InitSpec::Path { path } => {
            let p = ctx.input_with_sidecar(path)?;
            let (path, _) = read_path(&p)?;
            let mut r = rng::stream(sim.seed, u64::MAX - 1);
            (0..sim.replicas).map(|_| path.point_vec(r.random_range(0..path.n_points()))).collect()
        }
    };
    let trajs = simulate(&field, &inits, &sim)?;
    let csv = ctx.out_path("trajectories.csv");
    write_trajectories(&trajs, &sim, &csv)?;
    ctx.output_with_sidecar(&csv)?;
    log::info!("simulated {} replicas of {} steps", trajs.len(), sim.steps);
    Ok(sim.seed)
}

#[derive(Serialize)]
struct TrainSummary {
    n_train: usize,
    steps: usize,
    initial_loss: f64,
    epoch_losses: Vec<f64>,
}

pub fn run_train(cfg: &TrainCmdConfig, ctx: &mut Ctx) -> Result<u64, CliError> {
    check_version(cfg.version)?;
    let p = ctx.input_with_sidecar(&cfg.dataset)?;
    let (trajs, _) = read_trajectories(&p)?;
    let data = pool(&trajs)?;
    let mut train = cfg.train.clone();
    train.seed = ctx.seed_or(train.seed);
    let (model, report) = match &cfg.model {
        ModelSpec::Ddpm { schedule } => ddpm_train(data.view(), schedule, &train)?,
        ModelSpec::Flow { schedule } => flow_train(data.view(), *schedule, &train)?,
    };
    let ckpt = ctx.out_path("model.ckpt");
    model.save(&ckpt)?;
    ctx.output(&ckpt)?;
    ctx.write_json(
        "train_report.json",
        &TrainSummary {
            n_train: data.nrows(),
            steps: report.steps,
            initial_loss: report.initial_loss,
            epoch_losses: report.epoch_losses,
        },
    )?;
    Ok(train.seed)
}

#[derive(Serialize)]
struct PathEntry {
    replicate: usize,
    d: f64,
    file: String,
    best_action: f64,
    iterations: usize,
    converged: bool,
    rescaled: bool,
    max_energy: Option<f64>,
    max_index: Option<usize>,
}

pub fn run_sample_path(cfg: &SamplePathConfig, ctx: &mut Ctx) -> Result<u64, CliError> {
    check_version(cfg.version)?;
    let seed = ctx.seed_or(cfg.seed);
    let energy = cfg.energy.as_ref().map(FieldSpec::build).transpose()?;
    match &cfg.drift {
        DriftSpec::Analytic { field } => {
            let f = field.build()?;
            let energy = energy.unwrap_or_else(|| f.clone());
            sample_paths(cfg, ctx, &f, None, Some(&energy), seed)?;
        }
        DriftSpec::Learned { checkpoint, tau } => {
            let p = ctx.input(checkpoint)?;
            let model = ScoreModel::load(&p)?;
            let f = model.field(*tau)?;
            sample_paths(cfg, ctx, &f, Some(&model), energy.as_ref(), seed)?;
        }
    }
    Ok(seed)
}

fn sample_paths(
    cfg: &SamplePathConfig,
    ctx: &mut Ctx,
    field: &(impl DriftField + ?Sized),
    model: Option<&ScoreModel>,
    energy: Option<&AnyField>,
    seed: u64,
) -> Result<(), CliError> {
    if cfg.start.len() != field.dim() || cfg.end.len() != field.dim() {
        return Err(CliError::config(format!("start and end must have dimension {}", field.dim())));
    }
    if cfg.segments == 0 || cfg.replicates == 0 {
        return Err(CliError::config("segments and replicates must be positive"));
    }
    let ds = cfg.diffusivities.clone().unwrap_or_else(|| vec![cfg.params.d]);
    let mut entries = Vec::new();
    for r in 0..cfg.replicates {
        let mut prng = rng::stream(seed, r as u64);
        let initial = initial_guess(cfg, field, model, &mut prng)?;
        for (j, d) in ds.iter().enumerate() {
            let mut params = OmParams { d: *d, ..cfg.params.clone() };
            // a sweep through D = 0 has no full action there; use the zero-temperature limit
            if *d == 0.0 && cfg.diffusivities.is_some() {
                params.variant = ActionVariant::Truncated;
            }
            params.validate(field.dim())?;
            let res = optimize_path(&initial, field, &params, &cfg.optim).map_err(|e| {
                CliError::Numerical(format!("replicate {r}, D = {d}: {e}"))
            })?;
            let name = format!("path_r{r}_d{j}.csv");
            let csv = ctx.out_path(&name);
            write_path(&res.path, &csv, Some(&params), Some(&cfg.optim), &res.trace, Some(seed))?;
            ctx.output_with_sidecar(&csv)?;
            let peak = energy.map(|e| res.path.max_by(|x| e.potential(x).unwrap_or(f64::NAN)));
            entries.push(PathEntry {
                replicate: r,
                d: *d,
                file: name,
                best_action: res.best_action,
                iterations: res.iterations,
                converged: res.converged,
                rescaled: res.rescaled,
                max_energy: peak.map(|p| p.1),
                max_index: peak.map(|p| p.0),
            });
        }
    }
    ctx.write_json("paths.json", &entries)
}

fn initial_guess(
    cfg: &SamplePathConfig,
    field: &(impl DriftField + ?Sized),
    model: Option<&ScoreModel>,
    prng: &mut rng::StreamRng,
) -> Result<OmPath, CliError> {
    let dt = cfg.params.dt;
    Ok(match &cfg.guess {
        GuessSpec::Straight { noise } => {
            let base = OmPath::straight_line(&cfg.start, &cfg.end, cfg.segments, dt)?;
            let mut pts = base.points().clone();
            if *noise > 0.0 {
                let k = pts.ncols();
                for i in 1..cfg.segments {
                    let z = rng::normal_vec(prng, k);
                    for c in 0..k {
                        pts[(i, c)] += noise * z[c];
                    }
                }
            }
            OmPath::new(pts, dt)?
        }
        GuessSpec::Latent { tau_initial, options } => {
            let model = model.ok_or_else(|| CliError::config("a latent guess needs a learned drift"))?;
            let opts = omtps::action::LatentGuessOptions { dt, ..options.clone() };
            initial_guess_latent(model, &cfg.start, &cfg.end, *tau_initial, cfg.segments, &opts, prng)?
        }
        GuessSpec::Unwrap { initial_points, stages, optim } => {
            initial_guess_unwrap(&cfg.start, &cfg.end, *initial_points, *stages, field, &cfg.params, optim)?.0
        }
    })
}

#[derive(Serialize)]
struct CommittorReport {
    grid_rate: f64,
    grid_residual: f64,
    grid_iterations: usize,
    neural_rate: Option<f64>,
    neural_over_grid: Option<f64>,
    n_samples: Option<usize>,
    effective_sample_size: Option<f64>,
    n_in_a: Option<usize>,
    n_in_b: Option<usize>,
}

pub fn run_committor(cfg: &CommittorCmdConfig, ctx: &mut Ctx) -> Result<u64, CliError> {
    check_version(cfg.version)?;
    let field = cfg.field.build()?;
    let is_mb = matches!(cfg.field, FieldSpec::MuellerBrown { .. });
    let regions = match (&cfg.regions, is_mb) {
        (Some(r), _) => r.clone(),
        (None, true) => RegionSpec::mueller_brown(2.0)?,
        (None, false) => return Err(CliError::config("missing field `regions` (required for non Müller-Brown fields)")),
    };
    let spec = match (&cfg.grid, is_mb) {
        (Some(g), _) => g.clone(),
        (None, true) => GridSpec::mueller_brown(200)?,
        (None, false) => return Err(CliError::config("missing field `grid` (required for non Müller-Brown fields)")),
    };
    let grid = solve_bke_grid(&field, &regions, &spec, cfg.kt, &SolverConfig::default())?;
    let csv = ctx.out_path("committor_grid.csv");
    grid.save(&csv)?;
    ctx.output_with_sidecar(&csv)?;
    let grid_rate = grid.rate(cfg.gamma);
    let mut report = CommittorReport {
        grid_rate,
        grid_residual: grid.residual,
        grid_iterations: grid.iterations,
        neural_rate: None,
        neural_over_grid: None,
        n_samples: None,
        effective_sample_size: None,
        n_in_a: None,
        n_in_b: None,
    };
    let mut seed = 0;
    if let Some(n) = &cfg.neural {
        let p = ctx.input_with_sidecar(&n.path)?;
        let (path, _) = read_path(&p)?;
        let mut sim = n.seeding.clone();
        sim.seed = ctx.seed_or(sim.seed);
        seed = sim.seed;
        let samples = seed_sampling_from_path(&path, &field, &sim, n.n_sims)?;
        let weighted = reweight(samples.view(), &field, cfg.kt, (n.bins[0], n.bins[1]))?;
        let mut train = n.train.clone();
        train.seed = ctx.seed_or(train.seed);
        let (model, tr) = train_committor(&weighted, &regions, &train)?;
        let rate = estimate_rate(&model, &weighted, cfg.kt, cfg.gamma)?;
        let mp = ctx.out_path("committor_neural.json");
        model.save(&mp)?;
        ctx.output(&mp)?;
        report.neural_rate = Some(rate);
        report.neural_over_grid = Some(rate / grid_rate);
        report.n_samples = Some(weighted.len());
        report.effective_sample_size = Some(weighted.effective_size());
        report.n_in_a = Some(tr.n_a);
        report.n_in_b = Some(tr.n_b);
    }
    ctx.write_json("rate_report.json", &report)?;
    Ok(seed)
}

#[derive(Serialize)]
struct MsmReport {
    start_state: usize,
    end_state: usize,
    #[serde(flatten)]
    metrics: PathMetrics,
}

pub fn run_msm_eval(cfg: &MsmEvalConfig, ctx: &mut Ctx) -> Result<u64, CliError> {
    check_version(cfg.version)?;
    let seed = ctx.seed_or(cfg.seed);
    let p = ctx.input_with_sidecar(&cfg.reference)?;
    let (trajs, _) = read_trajectories(&p)?;
    let points = pool(&trajs)?;
    let (clustering, _) = fit_clusters(points.view(), cfg.k, seed, cfg.kmeans_iterations)?;
    let discrete: Vec<Vec<usize>> = trajs
        .iter()
        .map(|t| {
            let view = ArrayView2::from_shape((t.len(), t.dim), t.as_flat()).expect("trajectory shape");
            clustering.assign_all(view)
        })
        .collect();
    let mut msm = fit_msm(&discrete, cfg.k, cfg.lag)?;
    msm.clustering = Some(clustering.clone());
    let mp = ctx.out_path("msm.json");
    msm.save(&mp)?;
    ctx.output(&mp)?;

    let mut paths = Vec::new();
    if let GeneratedSpec::Paths { files } = &cfg.generated {
        if files.is_empty() {
            return Err(CliError::config("generated.files is empty"));
        }
        for f in files {
            let p = ctx.input_with_sidecar(f)?;
            paths.push(read_path(&p)?.0);
        }
    }
    let endpoint = |given: &Option<Vec<f64>>, last: bool, name: &str| -> Result<usize, CliError> {
        let x = match (given, paths.first()) {
            (Some(x), _) => x.clone(),
            (None, Some(p)) => p.point_vec(if last { p.n_points() - 1 } else { 0 }),
            (None, None) => return Err(CliError::config(format!("missing field `{name}`"))),
        };
        if x.len() != clustering.dim() {
            return Err(CliError::config(format!("`{name}` must have dimension {}", clustering.dim())));
        }
        Ok(clustering.assign(&x))
    };
    let s0 = endpoint(&cfg.start, false, "start")?;
    let s1 = endpoint(&cfg.end, true, "end")?;
    let generated = match &cfg.generated {
        GeneratedSpec::Paths { .. } => discretize_paths(&paths, &clustering, cfg.len)?,
        GeneratedSpec::Bridge { n, seed: bseed } => sample_bridge(&msm, s0, s1, cfg.len, *n, ctx.seed_or(*bseed) ^ 0x9e37)?,
    };
    let reference = sample_bridge(&msm, s0, s1, cfg.len, cfg.n_reference, seed)?;
    let metrics = path_metrics(&msm, &generated, &reference)?;
    ctx.write_json("metrics.json", &MsmReport { start_state: s0, end_state: s1, metrics })?;
    Ok(seed)
}

pub fn run_export(cfg: &ExportConfig, ctx: &mut Ctx) -> Result<u64, CliError> {
    check_version(cfg.version)?;
    for (n, spec) in cfg.exports.iter().enumerate() {
        let (name, header, rows): (String, Vec<String>, Vec<Vec<f64>>) = match spec {
            ExportSpec::Potential { field, bounds, nx, ny } => {
                if *nx < 2 || *ny < 2 {
                    return Err(CliError::config("potential export needs nx, ny ≥ 2"));
                }
                let f = field.build()?;
                let mut rows = Vec::with_capacity(nx * ny);
                for j in 0..*ny {
                    for i in 0..*nx {
                        let x = bounds[0] + (bounds[1] - bounds[0]) * i as f64 / (*nx - 1) as f64;
                        let y = bounds[2] + (bounds[3] - bounds[2]) * j as f64 / (*ny - 1) as f64;
                        let u = f.potential(&[x, y]).ok_or_else(|| CliError::config("field is not two-dimensional"))?;
                        rows.push(vec![x, y, u]);
                    }
                }
                (format!("potential_{n}.csv"), vec!["x".into(), "y".into(), "u".into()], rows)
            }
            ExportSpec::Path { path } => {
                let p = ctx.input_with_sidecar(path)?;
                let (path, _) = read_path(&p)?;
                let mut header = vec!["index".to_string()];
                header.extend((0..path.dim()).map(|c| format!("x{c}")));
                let rows = (0..path.n_points())
                    .map(|i| std::iter::once(i as f64).chain(path.point_vec(i)).collect())
                    .collect();
                (format!("path_{n}.csv"), header, rows)
            }
            ExportSpec::Committor { grid } => {
                let p = ctx.input_with_sidecar(grid)?;
                let g = CommittorGrid::load(&p)?;
                let mut rows = Vec::with_capacity(g.values.len());
                for j in 0..g.spec.ny {
                    for i in 0..g.spec.nx {
                        let [x, y] = g.spec.node(i, j);
                        rows.push(vec![i as f64, j as f64, x, y, g.value_at(i, j)]);
                    }
                }
                let header = ["i", "j", "x", "y", "q"].map(String::from).to_vec();
                (format!("committor_{n}.csv"), header, rows)
            }
            ExportSpec::Samples { trajectories, stride } => {
                if *stride == 0 {
                    return Err(CliError::config("stride must be positive"));
                }
                let p = ctx.input_with_sidecar(trajectories)?;
                let data: Array2<f64> = pool(&read_trajectories(&p)?.0)?;
                let header = (0..data.ncols()).map(|c| format!("x{c}")).collect();
                let rows = data.rows().into_iter().step_by(*stride).map(|r| r.to_vec()).collect();
                (format!("samples_{n}.csv"), header, rows)
            }
        };
        let path = ctx.out_path(&name);
        io::write_csv(&path, Some(&header), rows)?;
        ctx.output(&path)?;
    }
    Ok(ctx.seed.unwrap_or(0))
}
