//! `storyforge`: offline builds, threshold evaluation and the HTTP service.

mod build;
mod eval;
mod serve;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;
use storyforge_core::config::ServiceConfig;

#[derive(Debug, Parser)]
#[command(name = "storyforge", version, about = "Turn a story into a 3D pop-up book")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the whole pipeline on one story and write the bundle.
    Build(build::BuildArgs),
    /// Share of plausible models above each similarity threshold.
    EvalThresholds(eval::EvalArgs),
    /// Serve the /v1 HTTP API.
    Serve(serve::ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReviewPolicy {
    KeepAll,
    RemoveAll,
    Interactive,
}

/// Failure with its exit code: 1 at runtime, 2 for bad usage or input.
#[derive(Debug)]
pub struct CliError {
    code: u8,
    kind: String,
    message: String,
}

impl CliError {
    pub fn usage(kind: &str, message: impl std::fmt::Display) -> Self {
        Self {
            code: 2,
            kind: kind.to_owned(),
            message: message.to_string(),
        }
    }

    pub fn runtime(kind: &str, message: impl std::fmt::Display) -> Self {
        Self {
            code: 1,
            kind: kind.to_owned(),
            message: message.to_string(),
        }
    }
}

impl From<storyforge_core::pipeline::PipelineError> for CliError {
    fn from(e: storyforge_core::pipeline::PipelineError) -> Self {
        use storyforge_core::pipeline::PipelineError as P;
        match e {
            P::EmptyStory => Self::usage(e.kind(), &e),
            P::Config(_) => Self::usage(e.kind(), &e),
            _ => Self::runtime(e.kind(), &e),
        }
    }
}

/// Config file (if any) with environment overrides applied.
pub fn load_config(path: Option<&PathBuf>, offline: bool) -> Result<ServiceConfig, CliError> {
    let mut config = match path {
        Some(p) => ServiceConfig::load(p).map_err(|e| CliError::usage("Config", e))?,
        None if offline => ServiceConfig::offline(),
        None => ServiceConfig::default(),
    };
    config
        .apply_env(|k| std::env::var(k).ok())
        .map_err(|e| CliError::usage("Config", e))?;
    Ok(config)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let default_level = match cli.command {
        Command::Serve(_) => "info",
        _ => "warn",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(default_level))
        .init();
    let result = match cli.command {
        Command::Build(args) => build::run(args),
        Command::EvalThresholds(args) => eval::run(args),
        Command::Serve(args) => serve::run(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!(
                "{}",
                json!({ "error": { "kind": e.kind, "message": e.message } })
            );
            ExitCode::from(e.code)
        }
    }
}
