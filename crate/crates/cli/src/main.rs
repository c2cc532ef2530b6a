mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;
use error::CliError;

#[derive(Parser)]
#[command(
    name = "xdistill",
    version,
    about = "Few-shot compression of small CNNs by layer-wise distillation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed list with one seed (the teacher seed for train-teacher).
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the teacher and save it as teacher.xdnc.
    TrainTeacher(Common),
    /// Compress the teacher once per seed and summarize.
    Compress(Common),
    /// Held-out top-1/top-5, parameters and FLOPs of a saved model.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// Check the error-propagation bound for a saved student.
    VerifyBounds {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// Compress with cross connections on every subset of positions.
    AblateCrossLayers(Common),
    /// Grid over the mixing weight (cross) or both soft weights (soft).
    Sweep(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::TrainTeacher(c)
            | Command::Compress(c)
            | Command::AblateCrossLayers(c)
            | Command::Sweep(c) => c,
            Command::Evaluate { common, .. } | Command::VerifyBounds { common, .. } => common,
        }
    }
}

fn load_config(cmd: &Command) -> Result<RunConfig, CliError> {
    let common = cmd.common();
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        match cmd {
            Command::TrainTeacher(_) => cfg.teacher.seed = seed,
            _ => cfg.experiment.seeds = vec![seed],
        }
    }
    if let Some(out) = &common.out {
        cfg.output.dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cmd: Command) -> Result<(), CliError> {
    let cfg = load_config(&cmd)?;
    match &cmd {
        Command::TrainTeacher(_) => commands::train_teacher_cmd(&cfg),
        Command::Compress(_) => commands::compress_cmd(&cfg),
        Command::Evaluate { model, .. } => commands::evaluate_cmd(&cfg, model),
        Command::VerifyBounds { model, .. } => commands::verify_bounds_cmd(&cfg, model),
        Command::AblateCrossLayers(_) => commands::ablate_cmd(&cfg),
        Command::Sweep(_) => commands::sweep_cmd(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ");
            eprintln!("{}", CliError::new("usage", first));
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::FAILURE
        }
    }
}
