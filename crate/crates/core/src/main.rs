use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nkd_lab::experiment::{run_command, Command, ExperimentConfig, Settings};
use nkd_lab::verify::{run_verify, VerifyOptions};
use nkd_lab::{Error, Result};

/// Knowledge-distillation loss lab.
///
/// Exit codes: 0 success, 1 verification failure, 2 configuration error,
/// 3 numeric failure during training.
#[derive(Debug, Parser)]
#[command(name = "nkd", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Check loss identities, normalization and gradients on random cases.
    Verify(VerifyArgs),
    /// Train the teacher and write its checkpoint and logit cache.
    TrainTeacher(ExpArgs),
    /// Train the student with cross-entropy (or label smoothing).
    TrainBaseline(ExpArgs),
    /// Distill the student from a trained teacher, per `distill.modes`.
    Distill(ExpArgs),
    /// Teacher-free training under the chosen weight strategies.
    Tfnkd(ExpArgs),
    /// Distillation over a grid of temperatures.
    SweepTemp(ExpArgs),
}

#[derive(Debug, Args)]
struct VerifyArgs {
    /// Random cases per grid cell and per gradient check.
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Config file; checked for validity, but the suite needs no settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Test hook: scale the decomposed KD value by 1.01 so the suite fails.
    #[arg(long, hide = true)]
    inject_bug: bool,
}

#[derive(Debug, Args)]
struct ExpArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; repeatable, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Comma-separated seeds (`seeds`).
    #[arg(long)]
    seeds: Option<String>,
    /// Output directory (`out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training epochs (`train.epochs`).
    #[arg(long)]
    epochs: Option<usize>,
    /// Teacher checkpoint (`teacher.checkpoint`).
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Label smoothing for the trained model (`teacher.alpha_ls` or
    /// `student.alpha_ls`).
    #[arg(long)]
    alpha_ls: Option<f64>,
    /// Distillation modes (`distill.modes`).
    #[arg(long)]
    modes: Option<String>,
    /// Weight strategies or `all` (`tfnkd.strategies`).
    #[arg(long)]
    strategies: Option<String>,
    /// Temperatures for sweep-temp (`sweep.lambdas`).
    #[arg(long)]
    lambdas: Option<String>,
    /// Single-seed run: keep only the first seed.
    #[arg(long)]
    quick: bool,
    /// Train independent seeds on separate threads.
    #[arg(long)]
    parallel: bool,
}

impl ExpArgs {
    fn settings(&self, command: Command) -> Result<Settings> {
        let mut s = Settings::default();
        if let Some(path) = &self.config {
            s.apply_file(path)?;
        }
        let path_str = |p: &PathBuf| p.display().to_string();
        if let Some(v) = &self.seeds {
            s.set("seeds", v)?;
        }
        if let Some(v) = &self.out {
            s.set("out_dir", &path_str(v))?;
        }
        if let Some(v) = self.epochs {
            s.set("train.epochs", &v.to_string())?;
        }
        if let Some(v) = &self.teacher {
            s.set("teacher.checkpoint", &path_str(v))?;
        }
        if let Some(v) = self.alpha_ls {
            let key = if command == Command::TrainTeacher {
                "teacher.alpha_ls"
            } else {
                "student.alpha_ls"
            };
            s.set(key, &v.to_string())?;
        }
        if let Some(v) = &self.modes {
            s.set("distill.modes", v)?;
        }
        if let Some(v) = &self.strategies {
            s.set("tfnkd.strategies", v)?;
        }
        if let Some(v) = &self.lambdas {
            s.set("sweep.lambdas", v)?;
        }
        if self.parallel {
            s.set("parallel", "true")?;
        }
        for pair in &self.set {
            s.set_pair(pair)?;
        }
        if self.quick {
            let first = s
                .get("seeds")
                .split(',')
                .next()
                .unwrap_or("0")
                .trim()
                .to_string();
            s.set("seeds", &first)?;
        }
        Ok(s)
    }
}

fn verify(args: &VerifyArgs) -> Result<()> {
    if let Some(path) = &args.config {
        let mut s = Settings::default();
        s.apply_file(path)?;
        ExperimentConfig::from_settings(&s)?;
    }
    let report = run_verify(&VerifyOptions {
        trials: args.trials,
        seed: args.seed,
        kd_decomposition_scale: if args.inject_bug { 1.01 } else { 1.0 },
    })?;
    for check in &report.checks {
        println!("{check}");
    }
    let failed = report.checks.iter().filter(|c| !c.passed()).count();
    if failed > 0 {
        return Err(Error::Verification(format!(
            "{failed} of {} checks failed",
            report.checks.len()
        )));
    }
    println!("all {} checks passed", report.checks.len());
    Ok(())
}

fn experiment(command: Command, args: &ExpArgs) -> Result<()> {
    let config = ExperimentConfig::from_settings(&args.settings(command)?)?;
    let report = run_command(command, &config)?;
    print!("{report}");
    println!("reports written to {}", config.out_dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Cmd::Verify(a) => verify(a),
        Cmd::TrainTeacher(a) => experiment(Command::TrainTeacher, a),
        Cmd::TrainBaseline(a) => experiment(Command::TrainBaseline, a),
        Cmd::Distill(a) => experiment(Command::Distill, a),
        Cmd::Tfnkd(a) => experiment(Command::TfNkd, a),
        Cmd::SweepTemp(a) => experiment(Command::SweepTemp, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
