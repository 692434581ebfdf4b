use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use mtreg::cli_io::{run_experiment, ExperimentConfig, Stage};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    Synth,
    Pretrain,
    Adapt,
    Eval,
    PlotData,
}

impl From<Command> for Stage {
    fn from(c: Command) -> Self {
        match c {
            Command::Synth => Stage::Synth,
            Command::Pretrain => Stage::Pretrain,
            Command::Adapt => Stage::Adapt,
            Command::Eval => Stage::Eval,
            Command::PlotData => Stage::PlotData,
        }
    }
}

/// Point cloud registration with Mean Teacher domain adaptation.
#[derive(Debug, Parser)]
#[command(name = "reg", version)]
struct Args {
    /// Stage to run.
    #[arg(value_enum, required_unless_present = "print_config")]
    command: Option<Command>,
    /// TOML run configuration. Omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for data, initialization and training streams.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root of the run.
    #[arg(long, env = "REG_OUT_DIR")]
    out: Option<PathBuf>,
    /// Print the effective configuration (all defaults filled in) and exit.
    #[arg(long)]
    print_config: bool,
}

fn run(args: Args) -> mtreg::Result<()> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None if args.print_config => ExperimentConfig::default(),
        None => return Err(mtreg::Error::Config("--config is required".into())),
    };
    if let Some(seed) = args.seed {
        cfg.set_seed(seed);
    }
    if let Some(out) = args.out {
        cfg.out_dir = out;
    }
    if args.print_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let Some(command) = args.command else {
        return Ok(());
    };
    let outputs = run_experiment(&cfg, command.into(), &mut |line| eprintln!("{line}"))?;
    for p in outputs {
        println!("{}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
