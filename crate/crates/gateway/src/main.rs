use std::net::SocketAddr;

use clap::Parser;

use auditchain_core::sim::{SimConfig, SimNetwork};
use auditchain_gateway::{router, AppState};

#[derive(Parser, Debug)]
#[command(name = "auditchain-gateway", about = "Serve the audit API for one node of a simulated network")]
struct Cli {
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    /// Nodes in the simulated network.
    #[arg(long, default_value_t = 4)]
    nodes: usize,
    /// Node this gateway is attached to.
    #[arg(long, default_value_t = 1)]
    node: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cli = Cli::parse();
    let network = SimNetwork::new(SimConfig { rng_seed: cli.seed, ..SimConfig::with_nodes(cli.nodes) })?;
    let app = router(AppState::new(network, cli.node)?);
    let listener = tokio::net::TcpListener::bind(cli.addr).await?;
    eprintln!("listening on {} (node {} of {})", listener.local_addr()?, cli.node, cli.nodes);
    axum::serve(listener, app).await?;
    Ok(())
}
