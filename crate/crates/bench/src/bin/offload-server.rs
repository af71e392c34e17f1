use std::path::PathBuf;
use std::sync::Arc;

use clap::Parser;
use offload_bench::workloads::catalog;
use offload_core::appserver::{AppServer, ServerConfig};
use offload_core::clock::{clock_for, ClockMode};
use offload_core::vmpool::{PoolConfig, VmPool};

#[derive(Parser)]
#[command(name = "offload-server", about = "Serve offloaded bench workloads over TCP")]
struct Cli {
    #[arg(long, default_value = "127.0.0.1:7878")]
    listen: String,
    /// Pool configuration (TOML).
    #[arg(long)]
    pool: Option<PathBuf>,
    /// Refuse every bundle transfer.
    #[arg(long)]
    restricted: bool,
    /// Persist installed bundles here.
    #[arg(long)]
    registry: Option<PathBuf>,
    #[arg(long, default_value = "wall")]
    clock: ClockMode,
    #[arg(long, default_value = "info")]
    log: tracing::Level,
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    tracing_subscriber::fmt().with_max_level(cli.log).init();
    let pool_config = match &cli.pool {
        Some(p) => PoolConfig::load(p)?,
        None => PoolConfig::default(),
    };
    let clock = clock_for(cli.clock);
    let pool = Arc::new(VmPool::new(&pool_config, clock.clone())?);
    let server = AppServer::new(
        catalog(),
        pool,
        clock,
        ServerConfig {
            restricted: cli.restricted,
            registry_dir: cli.registry,
            ..ServerConfig::default()
        },
    )?;
    tracing::info!(addr = %cli.listen, "listening");
    server.listen(&cli.listen)?;
    Ok(())
}
