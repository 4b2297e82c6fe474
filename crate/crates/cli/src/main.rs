//! Command-line driver for the transition path sampling pipeline.

mod commands;
mod config;
mod error;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use commands::Ctx;
use config::{parse, RecipeConfig};
use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "omtps", version, about = "Onsager-Machlup transition path sampling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 picks the number of cores.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Run overdamped Langevin replicas and save trajectories.
    Simulate,
    /// Train a DDPM or flow-matching score model on saved trajectories.
    Train,
    /// Minimize the action between two configurations.
    SamplePath,
    /// Solve the grid committor and optionally train a neural committor.
    Committor,
    /// Score paths against a Markov state model.
    MsmEval,
    /// Write plain CSV tables for plotting.
    ExportPlot,
    /// Run several stages from one file.
    Recipe,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Train => "train",
            Command::SamplePath => "sample-path",
            Command::Committor => "committor",
            Command::MsmEval => "msm-eval",
            Command::ExportPlot => "export-plot",
            Command::Recipe => "recipe",
        }
    }
}

fn stage(name: &str, text: &str, out: &Path, base: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let started = Instant::now();
    let mut ctx = Ctx::new(out.to_owned(), base.to_owned(), seed)?;
    let used = match name {
        "simulate" => commands::run_simulate(&parse_stage(text)?, &mut ctx)?,
        "train" => commands::run_train(&parse_stage(text)?, &mut ctx)?,
        "sample-path" => commands::run_sample_path(&parse_stage(text)?, &mut ctx)?,
        "committor" => commands::run_committor(&parse_stage(text)?, &mut ctx)?,
        "msm-eval" => commands::run_msm_eval(&parse_stage(text)?, &mut ctx)?,
        "export-plot" => commands::run_export(&parse_stage(text)?, &mut ctx)?,
        other => unreachable!("unknown stage {other}"),
    };
    ctx.finish(name, text, used, started)?;
    log::info!("{name} finished in {:.2} s", started.elapsed().as_secs_f64());
    Ok(())
}

fn parse_stage<T: serde::de::DeserializeOwned>(text: &str) -> Result<T, CliError> {
    serde_json::from_str(text).map_err(|e| CliError::config(e.to_string()))
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let path = cli.config.as_ref().ok_or_else(|| CliError::config("missing --config <path>"))?;
    let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    let cwd = PathBuf::from(".");
    if let Command::Recipe = cli.command {
        let recipe: RecipeConfig = parse(&text)?;
        let stages: [(&str, Option<serde_json::Value>); 6] = [
            ("simulate", recipe.simulate.as_ref().map(to_value)),
            ("train", recipe.train.as_ref().map(to_value)),
            ("sample-path", recipe.sample_path.as_ref().map(to_value)),
            ("committor", recipe.committor.as_ref().map(to_value)),
            ("msm-eval", recipe.msm_eval.as_ref().map(to_value)),
            ("export-plot", recipe.export_plot.as_ref().map(to_value)),
        ];
        for (name, section) in stages {
            if let Some(v) = section {
                log::info!("recipe stage {name}");
                let stage_text = serde_json::to_string(&v).expect("config serializes");
                stage(name, &stage_text, &cli.out.join(name), &cli.out, cli.seed)?;
            }
        }
        return Ok(());
    }
    // top-level configs must be versioned; the stage parser then applies the schema
    let _: serde_json::Value = parse(&text)?;
    stage(cli.command.name(), &text, &cli.out, &cwd, cli.seed)
}

fn to_value<T: serde::Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config serializes")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        log::warn!("thread pool already configured: {e}");
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
