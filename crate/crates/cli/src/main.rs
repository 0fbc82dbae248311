use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use xgap_cli::config::PipelineConfig;
use xgap_cli::error::Result;
use xgap_cli::stages::{run_stage, Stage};

/// Adversarial-example detection pipeline: train a digit classifier, attack
/// it, attribute its decisions, and train detectors on the attributions.
#[derive(Parser)]
#[command(name = "xgap", version, arg_required_else_help = true)]
struct Args {
    /// Pipeline stage to run, or `all` for the full sequence.
    #[arg(value_parser = parse_stage)]
    stage: StageArg,

    /// Path to the pipeline config JSON.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,

    /// Dotted-key config overrides, e.g. `--set attack.epsilon=0.2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,

    /// Artifact directory; overrides `paths.workdir` from the config.
    #[arg(long, value_name = "DIR")]
    workdir: Option<PathBuf>,
}

#[derive(Clone, Copy)]
enum StageArg {
    One(Stage),
    All,
}

fn parse_stage(raw: &str) -> std::result::Result<StageArg, String> {
    if raw == "all" {
        return Ok(StageArg::All);
    }
    Stage::from_name(raw).map(StageArg::One).ok_or_else(|| {
        let names: Vec<&str> = Stage::ALL.iter().map(|s| s.name()).collect();
        format!("unknown stage {raw:?}; expected one of {} or all", names.join(", "))
    })
}

fn run(args: &Args) -> Result<()> {
    xgap_cli::init_thread_pool()?;
    let cfg = PipelineConfig::load(&args.config, &args.sets, args.workdir.as_deref())?;
    match args.stage {
        StageArg::One(stage) => run_stage(stage, &cfg),
        StageArg::All => {
            for stage in Stage::ALL {
                eprintln!("[xgap] running {}", stage.name());
                run_stage(stage, &cfg)?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("xgap: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
