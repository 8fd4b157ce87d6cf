use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use wfr_cli::{parse_config, run, CliError, Command, Invocation, RunConfig};

#[derive(Parser)]
#[command(name = "wfr", version, about = "Dynamic unbalanced transport on the cone")]
struct Args {
    #[command(subcommand)]
    command: Cmd,
    /// JSON run config; defaults apply when omitted.
    #[arg(long, global = true, env = "WFR_CONFIG")]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, env = "WFR_OUT", default_value = "wfr-out")]
    out: PathBuf,
    /// Worker threads for the parallel sections.
    #[arg(long, global = true, env = "WFR_THREADS")]
    threads: Option<usize>,
    /// Overrides the config seed.
    #[arg(long, global = true, env = "WFR_SEED")]
    seed: Option<u64>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Flat and cone distances between two atoms.
    Dist,
    /// Energy of a curve.
    Energy,
    /// Characteristic curves of a velocity/growth field.
    Simulate,
    /// Superposition lift of a grid solution.
    Lift,
    /// Sparse dynamic inversion.
    Solve,
    /// Extremality test of a curve.
    CheckExtremal,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Dist => Command::Dist,
            Cmd::Energy => Command::Energy,
            Cmd::Simulate => Command::Simulate,
            Cmd::Lift => Command::Lift,
            Cmd::Solve => Command::Solve,
            Cmd::CheckExtremal => Command::CheckExtremal,
        }
    }
}

fn load(args: &Args) -> Result<(RunConfig, PathBuf), CliError> {
    let Some(path) = &args.config else {
        return Ok((RunConfig::default(), PathBuf::from(".")));
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Input {
        path: path.clone(),
        message: e.to_string(),
    })?;
    let base = path.parent().map(PathBuf::from).unwrap_or_default();
    Ok((parse_config(&text)?, base))
}

fn main() -> ExitCode {
    let args = Args::parse();
    let result = load(&args).and_then(|(mut config, base_dir)| {
        if let Some(seed) = args.seed {
            config.seed = seed;
        }
        run(&Invocation {
            command: args.command.into(),
            config,
            base_dir,
            out: args.out.clone(),
            threads: args.threads,
        })
    });
    match result {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
