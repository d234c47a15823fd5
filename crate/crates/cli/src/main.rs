use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use folirec_cli::{emit_report, resolve_out_path, run_experiment, validate_config, Format, Subcommand};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    Recon,
    Holonomy,
    AlgebraCheck,
    Toric,
    Impute,
    Radon,
}

impl From<Command> for Subcommand {
    fn from(c: Command) -> Self {
        match c {
            Command::Recon => Subcommand::Recon,
            Command::Holonomy => Subcommand::Holonomy,
            Command::AlgebraCheck => Subcommand::AlgebraCheck,
            Command::Toric => Subcommand::Toric,
            Command::Impute => Subcommand::Impute,
            Command::Radon => Subcommand::Radon,
        }
    }
}

/// Run one reconstruction experiment from a JSON config and write a JSON
/// report plus a CSV of its series.
#[derive(Debug, Parser)]
#[command(name = "folirec", version)]
struct Args {
    command: Command,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let raw = match std::fs::read_to_string(&args.config) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("{}: {e}", args.config.display());
            return ExitCode::from(2);
        }
    };
    let cfg = match validate_config(Some(args.command.into()), &raw) {
        Ok(c) => c,
        Err(errors) => {
            for e in errors {
                eprintln!("{e}");
            }
            return ExitCode::from(2);
        }
    };
    let out = resolve_out_path(args.out.as_deref(), &cfg);
    let (report, err) = run_experiment(&cfg);
    if let Err(e) = emit_report(&report, &out, &[Format::Json, Format::Csv]) {
        eprintln!("{e}");
        return ExitCode::from(3);
    }
    match err {
        None => ExitCode::SUCCESS,
        Some(e) => {
            eprintln!("{}: {e}", cfg.subcommand.name());
            ExitCode::from(3)
        }
    }
}
