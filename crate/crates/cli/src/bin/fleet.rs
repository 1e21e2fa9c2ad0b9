//! `fleet`: drives a simulated device fleet against a running server.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use telemon_cli::HttpTransport;
use telemon_core::sim::{run_fleet, FleetOptions, Scenario};

#[derive(Debug, Parser)]
#[command(version, about = "Simulated smartphone fleet")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a scenario and write the event log as NDJSON.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// `host:port` or base URL of a server started with `--clock simulated`.
        #[arg(long)]
        server: String,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Simulated seconds per wall second; omit to run unpaced.
        #[arg(long)]
        speedup: Option<f64>,
        #[arg(long, env = "TELEMON_ADMIN_TOKEN", hide_env_values = true)]
        admin_token: String,
        /// Event log destination; stdout when absent.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Parse a scenario and list the devices it expands to.
    Check {
        #[arg(long)]
        scenario: PathBuf,
    },
}

fn load(path: &PathBuf) -> anyhow::Result<Scenario> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Scenario::from_json(&text)?)
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Check { scenario } => {
            let s = load(&scenario)?;
            for d in s.resolved_devices()? {
                println!("{} crashes={} wifi_off={}", d.name, d.crashes.len(), d.wifi_off.len());
            }
            Ok(())
        }
        Command::Run {
            scenario,
            server,
            seed,
            speedup,
            admin_token,
            log,
        } => {
            if speedup.is_some_and(|x| !(x.is_finite() && x > 0.0)) {
                bail!("--speedup must be a positive number");
            }
            let s = load(&scenario)?;
            let transport = Arc::new(HttpTransport::new(&server)?);
            let opts = FleetOptions {
                admin_credential: admin_token,
                speedup,
                seed,
            };
            let report = run_fleet(&s, transport, &opts)?;
            let mut out: Box<dyn Write> = match &log {
                Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
                None => Box::new(std::io::stdout().lock()),
            };
            out.write_all(report.event_log_text().as_bytes())?;
            out.flush()?;
            let generated: usize = report.devices.iter().map(|d| d.generated.len()).sum();
            let crashes: u32 = report.devices.iter().map(|d| d.crashes).sum();
            eprintln!(
                "study {}: {} devices, {generated} batches, {crashes} crashes, {:.0}x speedup",
                report.study_id,
                report.devices.len(),
                report.effective_speedup()
            );
            for row in &report.final_qc.rows {
                eprintln!("  {} flags={:?} status={:?}", row.token_id, row.flags, row.status_code);
            }
            Ok(())
        }
    }
}
