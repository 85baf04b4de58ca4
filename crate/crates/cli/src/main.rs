use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod settings;

use settings::Settings;

/// Bad user input: exit code 1.
#[derive(Debug)]
pub struct InputError(pub String);

impl fmt::Display for InputError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

#[derive(Parser, Debug)]
#[command(name = "distillmatch", version, about = "Synthetic visible/infrared matching: data, training, matching, evaluation")]
pub struct Cli {
    /// Print a single JSON document on stdout instead of text.
    #[arg(long, global = true)]
    pub json: bool,
    /// key=value file supplying defaults for any flag.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Worker threads for match and eval.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData(GenDataArgs),
    /// Train a model on freshly generated pairs.
    Train(TrainArgs),
    /// Match pairs with a checkpoint.
    Match(MatchArgs),
    /// Score match files against dataset ground truth.
    Eval(EvalArgs),
    /// Distillation losses between student and teacher on a probe batch.
    DistillCheck(DistillCheckArgs),
    /// Quick internal consistency checks.
    Selftest(SelftestArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    /// `64` or `HxW`.
    #[arg(long)]
    pub dims: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated list of checker, noise, blobs.
    #[arg(long)]
    pub texture: Option<String>,
    /// homography or pose.
    #[arg(long)]
    pub mode: Option<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub dims: Option<String>,
    #[arg(long)]
    pub width_factor: Option<f64>,
}

#[derive(Args, Debug)]
pub struct MatchArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// A single pair directory.
    #[arg(long, conflicts_with = "dataset")]
    pub pair: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Match the visible image against itself.
    #[arg(long)]
    pub identity: bool,
    /// Write DMM1 binary files instead of text.
    #[arg(long)]
    pub binary: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub matches: PathBuf,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// homography, pose or ncm.
    #[arg(long)]
    pub metric: Option<String>,
    /// Comma-separated thresholds (pixels or degrees).
    #[arg(long)]
    pub thresholds: Option<String>,
    /// Directory for report.json and errors.svg.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DistillCheckArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub dims: Option<String>,
    /// Compare the teacher with itself.
    #[arg(long)]
    pub teacher_only: bool,
}

#[derive(Args, Debug)]
pub struct SelftestArgs {
    #[arg(long)]
    pub seed: Option<u64>,
}

/// 1 for bad input, 2 for anything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    use distillmatch::Error as E;
    for cause in err.chain() {
        if cause.is::<InputError>() || cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Config(_) | E::Dimension(_) | E::Format(_) | E::Io(_) | E::Json(_) | E::Degenerate(_) => 1,
                E::Tensor(_) | E::Estimation(_) | E::NonFinite(_) => 2,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let outcome = Settings::load(cli.config.as_deref()).and_then(|s| commands::run(&cli, &s));
    match outcome {
        Ok(out) => {
            println!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code = exit_code(&e);
            if cli.json {
                println!("{}", serde_json::json!({ "error": format!("{e:#}"), "exit_code": code }));
            } else {
                eprintln!("error: {e:#}");
            }
            ExitCode::from(code)
        }
    }
}
