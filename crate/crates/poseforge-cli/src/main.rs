//! `poseforge`: synthetic-scene generation, pose solving, silhouette
//! refinement, pseudo-label iteration, metric evaluation, and gradient
//! checking for the pose-estimation toolkit.
//!
//! Exit codes: 0 success, 1 expected error (JSON on stderr), 2 panic.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use poseforge_cli::commands::{
    cmd_eval, cmd_gen, cmd_gradcheck, cmd_pseudolabel, cmd_refine, cmd_solve, CommandContext,
};
use poseforge_cli::config::{RunConfig, ToleranceProfile};
use poseforge_cli::CliError;

const DEFAULTS_HELP: &str = "Named defaults (override via --config JSON):
  keypoints per object          8
  pseudo-label confidence       0.7   (p >= 0.7 foreground, p <= 0.3 background)
  bbox expansion maximum        15%
  pseudo-label rounds           5
  normalized crop size          64 px
  smooth-L1 transition scale    0.1 x object scale
  recall threshold              0.1 x model diameter
  TTA scales                    0.75, 1.0, 1.25 (each with horizontal flip)
  loss weights (lambda1/2)      1.0 / 1.0

Environment: POSEFORGE_LOG={off,error,info,debug} controls stderr logging.";

#[derive(Parser)]
#[command(
    name = "poseforge",
    version,
    about = "Pose-estimation toolkit: fixtures, solving, refinement, labels, metrics",
    after_help = DEFAULTS_HELP
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON run configuration (per-command sections; all fields optional).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Base RNG seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "poseforge-out")]
    out: PathBuf,

    /// Fixture directory to read (defaults to <out>/fixtures).
    #[arg(long, global = true, value_name = "DIR")]
    fixtures: Option<PathBuf>,

    /// Worker threads; results are independent of this by construction.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Gradient-check tolerance profile.
    #[arg(long, global = true, value_name = "default|strict")]
    tolerance_profile: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scene fixtures (mesh, pose, mask, fields).
    Gen,
    /// Solve poses from fixture keypoints and report errors vs ground truth.
    Solve,
    /// Refine perturbed poses by silhouette alignment; trace CSV + SVG.
    Refine,
    /// Iterate trinary pseudo-labels with a simulated improving segmenter.
    Pseudolabel,
    /// Evaluate predicted poses: matched-distance metrics and recall.
    Eval,
    /// Check every analytic gradient against central finite differences.
    Gradcheck,
}

fn run() -> Result<(), CliError> {
    // Keep exit code 2 reserved for panics: help/version exit 0, usage
    // errors exit 1 like any other expected error.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(CliError::Config(e.to_string())),
    };
    let mut config = RunConfig::load(cli.config.as_ref())?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(threads) = cli.threads {
        if threads == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        config.threads = threads;
    }
    if let Some(profile) = cli.tolerance_profile.as_deref() {
        config.tolerance_profile = ToleranceProfile::parse(profile)?;
    }
    let ctx = CommandContext {
        config,
        out_dir: cli.out,
        fixtures_dir: cli.fixtures,
    };
    match cli.command {
        Command::Gen => cmd_gen(&ctx),
        Command::Solve => cmd_solve(&ctx),
        Command::Refine => cmd_refine(&ctx),
        Command::Pseudolabel => cmd_pseudolabel(&ctx),
        Command::Eval => cmd_eval(&ctx),
        Command::Gradcheck => cmd_gradcheck(&ctx),
    }
}

fn main() -> ExitCode {
    match std::panic::catch_unwind(run) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(err)) => {
            eprintln!("{}", err.to_json());
            ExitCode::from(1)
        }
        // The default panic hook has already printed the message.
        Err(_) => ExitCode::from(2),
    }
}
