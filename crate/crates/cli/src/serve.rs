use std::net::SocketAddr;
use std::path::PathBuf;

use clap::Args;
use storyforge_core::pipeline::PipelineService;

use crate::{CliError, load_config};

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    /// Overrides `data_dir` from the config and `STORYFORGE_DATA_DIR`.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Provider config (TOML).
    #[arg(long, alias = "providers")]
    config: Option<PathBuf>,
}

pub fn run(args: ServeArgs) -> Result<(), CliError> {
    let config = load_config(args.config.as_ref(), false)?;
    let data_dir = args
        .data_dir
        .or_else(|| config.data_dir.clone())
        .ok_or_else(|| CliError::usage("Config", "no data directory: pass --data-dir"))?;
    let listener = std::net::TcpListener::bind(args.addr)
        .map_err(|e| CliError::runtime("Bind", format!("cannot listen on {}: {e}", args.addr)))?;
    listener
        .set_nonblocking(true)
        .map_err(|e| CliError::runtime("Bind", e))?;
    let service = PipelineService::from_config(&config, Some(&data_dir), true)?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::runtime("Runtime", e))?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::from_std(listener)
            .map_err(|e| CliError::runtime("Bind", e))?;
        storyforge_server::serve(listener, service, storyforge_server::shutdown_signal())
            .await
            .map_err(|e| CliError::runtime("Serve", e))
    })
}
