//! Thin CLI over the library harness. Exit codes: 0 success, 1 config
//! error, 2 runtime failure.

use clap::{Parser, Subcommand};
use metalab::error::Error;
use metalab::harness::{self, Config, ExperimentKind};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "metalab", about = "desk-scale meta-learning lab")]
struct Cli {
    /// config file (line-oriented key = value with [section] headers)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// replace the config's seed list with a single seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// output directory override
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// start from a named preset instead of defaults
    #[arg(long, global = true)]
    preset: Option<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// meta-train and evaluate each configured variant
    Train,
    /// paired-episode accuracy comparison across variants
    Eval,
    /// layer-freezing sweep on a trained model
    FreezeEval,
    /// pre/post-adaptation representational similarity
    Repsim,
    /// 2D-navigation meta-RL track
    Rl,
    /// wall-clock benchmark of training and inference
    Bench,
    /// aggregate artifacts of a finished run directory
    Report,
    /// print a named preset as a config file
    Preset { name: String },
}

fn base_config(cli: &Cli) -> Result<Config, Error> {
    let mut cfg = match (&cli.config, &cli.preset) {
        (Some(path), _) => harness::parse_config(&std::fs::read_to_string(path)?)?,
        (None, Some(name)) => harness::preset(name)?,
        (None, None) => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), Error> {
    let kind = match cli.cmd {
        Cmd::Train => ExperimentKind::Train,
        Cmd::Eval => ExperimentKind::Parity,
        Cmd::FreezeEval => ExperimentKind::Freezing,
        Cmd::Repsim => ExperimentKind::PrePost,
        Cmd::Rl => ExperimentKind::Rl,
        Cmd::Bench => ExperimentKind::Timing,
        Cmd::Report => {
            let dir = match (&cli.out, base_config(cli)) {
                (Some(out), _) => out.clone(),
                (None, Ok(cfg)) => cfg.out_dir,
                (None, Err(e)) => return Err(e),
            };
            let report = harness::emit_report(&dir)?;
            for line in &report.lines {
                println!("{line}");
            }
            println!("series: {}", report.series_path.display());
            return Ok(());
        }
        Cmd::Preset { ref name } => {
            print!("{}", harness::serialize_config(&harness::preset(name)?));
            return Ok(());
        }
    };
    let mut cfg = base_config(cli)?;
    cfg.kind = kind;
    let art = harness::run_experiment(&cfg)?;
    println!("run complete: {}", art.out_dir.display());
    println!("summary: {}", art.summary.display());
    for p in &art.metrics {
        println!("metrics: {}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ (Error::InvalidConfig(_) | Error::ConfigParse { .. })) => {
            eprintln!("config error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
