//! Standalone relay daemon.
//!
//! Exit codes: 0 after a clean shutdown, 1 on a runtime failure, 2 on a bad
//! config.

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Duration;

use clap::Parser;
use stripewire::forwarder::daemon::{self, DaemonConfig, DaemonOutcome};
use tracing::{error, info};
use tracing_subscriber::EnvFilter;

static SHUTDOWN: AtomicBool = AtomicBool::new(false);

#[derive(Debug, Parser)]
#[command(about = "Relay frames between two sets of channels")]
struct Args {
    /// Path to the key = value config file.
    #[arg(long)]
    config: PathBuf,
    /// Seconds between counter log lines; overrides the config file.
    #[arg(long)]
    log_interval: Option<f64>,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    let args = Args::parse();

    let text = match std::fs::read_to_string(&args.config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("forwarder: cannot read {}: {e}", args.config.display());
            return ExitCode::from(2);
        }
    };
    let mut config: DaemonConfig = match text.parse() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("forwarder: {}: {e}", args.config.display());
            return ExitCode::from(2);
        }
    };
    if let Some(secs) = args.log_interval {
        if !(secs.is_finite() && secs > 0.0) {
            eprintln!("forwarder: --log-interval must be positive");
            return ExitCode::from(2);
        }
        config.log_interval = Duration::from_secs_f64(secs);
    }

    if let Err(e) = ctrlc::set_handler(|| SHUTDOWN.store(true, Ordering::Release)) {
        error!(error = %e, "cannot install signal handler");
        return ExitCode::from(1);
    }

    match daemon::run(&config, &SHUTDOWN) {
        Ok(DaemonOutcome::Interrupted) => {
            info!("shut down on interrupt");
            ExitCode::SUCCESS
        }
        Ok(DaemonOutcome::PeerClosed(report)) => {
            info!(
                a_to_b_bytes = report.a_to_b.bytes,
                b_to_a_bytes = report.b_to_a.bytes,
                closed_by = ?report.closed_by,
                "peer closed, relay finished"
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            error!(error = %e, "relay failed");
            ExitCode::from(1)
        }
    }
}
