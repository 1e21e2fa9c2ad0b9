//! `telemon-server`: serves the /v1 API over plain TCP.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Parser, ValueEnum};
use telemon_core::api::{ClockMode, Service};
use telemon_core::datastore::Datastore;
use telemon_core::platform::{Platform, PlatformConfig};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Clock {
    System,
    /// Time comes from the `x-sim-now` request header (fleet runs).
    Simulated,
}

#[derive(Debug, Parser)]
#[command(version, about = "Study management and telemetry ingestion server")]
struct Args {
    #[arg(long, default_value = "127.0.0.1:8080")]
    bind: SocketAddr,
    /// Datastore root directory.
    #[arg(long, default_value = "telemon-data")]
    data: PathBuf,
    /// Admin bearer credential.
    #[arg(long, env = "TELEMON_ADMIN_TOKEN", hide_env_values = true)]
    admin_token: String,
    #[arg(long, value_enum, default_value = "system")]
    clock: Clock,
    /// Address embedded in QR payloads; defaults to http://<bind>.
    #[arg(long)]
    server_address: Option<String>,
    /// Fixes token secrets and message ids.
    #[arg(long)]
    seed: Option<u64>,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    let args = Args::parse();
    if args.admin_token.is_empty() {
        bail!("the admin credential must not be empty");
    }
    let store = Datastore::open(&args.data).with_context(|| format!("opening datastore {}", args.data.display()))?;
    for id in store.damaged_datasets() {
        eprintln!("warning: dataset {id} has a damaged commit log; run fsck");
    }
    let platform = Platform::new(
        store,
        PlatformConfig {
            server_address: args.server_address.unwrap_or_else(|| format!("http://{}", args.bind)),
            auth_hint: None,
            rng_seed: args.seed,
        },
    );
    let clock = match args.clock {
        Clock::System => ClockMode::System,
        Clock::Simulated => ClockMode::Simulated,
    };
    let service = Arc::new(Service::new(Arc::new(platform), args.admin_token, clock));
    let listener = tokio::net::TcpListener::bind(args.bind)
        .await
        .with_context(|| format!("binding {}", args.bind))?;
    eprintln!("listening on {}", listener.local_addr()?);
    telemon_cli::serve(listener, service, async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await?;
    Ok(())
}
