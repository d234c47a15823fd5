//! Library side of the `folirec` experiment runner: configuration
//! validation, the per-subcommand pipelines and report serialisation.

pub mod commands;
pub mod config;
pub mod report;

use std::path::{Path, PathBuf};

pub use config::{validate_config, ConfigError, ExperimentConfig, Params, Subcommand};
pub use report::{emit_report, Format, Report};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("i/o error: {0}")]
    Io(String),
    #[error("csv error: {0}")]
    Csv(String),
    #[error("invalid configuration")]
    Config(Vec<ConfigError>),
}

/// Runs the configured experiment. The report is always returned; the error
/// is the first module failure, already recorded under `errors`.
pub fn run_experiment(cfg: &ExperimentConfig) -> (Report, Option<folirec_core::Error>) {
    let mut report = Report::new(cfg.echo());
    let seed = cfg.seed;
    let result = match &cfg.params {
        Params::Recon(p) => commands::recon(p, seed, &mut report),
        Params::Holonomy(p) => commands::holonomy(p, seed, &mut report),
        Params::AlgebraCheck(p) => commands::algebra_check(p, seed, &mut report),
        Params::Toric(p) => commands::toric(p, seed, &mut report),
        Params::Impute(p) => commands::impute(p, seed, &mut report),
        Params::Radon(p) => commands::radon(p, seed, &mut report),
    };
    match result {
        Ok(()) => (report, None),
        Err(e) => {
            report.error(cfg.subcommand.name(), &e);
            (report, Some(e))
        }
    }
}

/// Output path: `--out` wins, then `out_path` from the config, then
/// `<subcommand>_report.json` in the working directory.
pub fn resolve_out_path(cli: Option<&Path>, cfg: &ExperimentConfig) -> PathBuf {
    cli.map(Path::to_path_buf)
        .or_else(|| cfg.out_path.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(format!("{}_report.json", cfg.subcommand.name().replace('-', "_"))))
}
