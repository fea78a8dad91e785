use std::path::PathBuf;
use std::process::ExitCode;

use catd::harness::{run_command, Command, ExperimentConfig};
use catd::CatdError;
use clap::{Parser, ValueEnum};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Cmd {
    Synth,
    TrainVae,
    TrainDiffusion,
    Generate,
    Superres,
    BandAblation,
    CabAblation,
    Evaluate,
    Report,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Synth => Command::Synth,
            Cmd::TrainVae => Command::TrainVae,
            Cmd::TrainDiffusion => Command::TrainDiffusion,
            Cmd::Generate => Command::Generate,
            Cmd::Superres => Command::Superres,
            Cmd::BandAblation => Command::BandAblation,
            Cmd::CabAblation => Command::CabAblation,
            Cmd::Evaluate => Command::Evaluate,
            Cmd::Report => Command::Report,
        }
    }
}

/// EEG-conditioned BOLD diffusion experiments on synthetic sessions.
///
/// The seed in the config can be overridden with the CATD_SEED environment
/// variable. Exit codes: 2 invalid config or input, 3 missing upstream
/// artifact, 4 numeric divergence.
#[derive(Parser, Debug)]
#[command(name = "catd", version)]
struct Args {
    command: Cmd,
    /// JSON experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override a dotted config path, e.g. `--set train.steps=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn run(args: &Args) -> Result<PathBuf, CatdError> {
    let cfg = ExperimentConfig::load(&args.config, &args.overrides)?;
    run_command(&cfg, args.command.into())?;
    Ok(cfg.output_dir)
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let command = Command::from(args.command);
    match run(&args) {
        Ok(dir) => {
            println!("{command}: done ({})", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("catd {command}: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
