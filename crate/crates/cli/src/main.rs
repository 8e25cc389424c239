// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use tablelab::pipeline::{self, RunConfig, RunDir, Stage};
use tablelab::LabError;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    Gen,
    Train,
    Eval,
    PatchMap,
    Stage1,
    Stage2,
    Stage3,
    Steer,
    Compose,
    Noise,
    Multicell,
    Report,
    All,
}

/// Train a small table-reading transformer and dissect it.
#[derive(Debug, Parser)]
#[command(name = "tablelab", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// JSON run config; the desk preset when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory; every file is written below it.
    #[arg(long, env = "TABLELAB_OUT", default_value = "runs/default")]
    out: PathBuf,
    /// Worker threads (0 = all cores).
    #[arg(long, env = "TABLELAB_THREADS")]
    threads: Option<usize>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn exit_code(e: &LabError) -> u8 {
    match e {
        LabError::Config { .. } => 2,
        LabError::Prerequisite { .. } => 3,
        LabError::Numerical(_) => 4,
        _ => 1,
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, LabError> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| LabError::Config { field: "--config".into(), reason: format!("{}: {e}", p.display()) })?;
            RunConfig::from_json(&text)?
        }
        None => RunConfig::desk(),
    };
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), LabError> {
    let cfg = load_config(cli)?;
    let dir = RunDir::new(&cli.out);
    let stage = match cli.command {
        Command::All => {
            pipeline::run_all(&cfg, &dir, |s| log::info!("stage {s}"))?;
            for v in pipeline::acceptance::evaluate(&dir) {
                println!("{}", v.line());
            }
            return Ok(());
        }
        Command::Gen => Stage::Gen,
        Command::Train => Stage::Train,
        Command::Eval => Stage::Eval,
        Command::PatchMap => Stage::PatchMap,
        Command::Stage1 => Stage::Stage1,
        Command::Stage2 => Stage::Stage2,
        Command::Stage3 => Stage::Stage3,
        Command::Steer => Stage::Steer,
        Command::Compose => Stage::Compose,
        Command::Noise => Stage::Noise,
        Command::Multicell => Stage::Multicell,
        Command::Report => Stage::Report,
    };
    log::info!("stage {stage}");
    pipeline::run_stage(&cfg, &dir, stage)?;
    println!("{}: ok ({})", stage, dir.path(stage.dir()).display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
