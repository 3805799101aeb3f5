//! Throughput sweep between two hosts.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use stripewire::bench::{self, BenchPlan, BenchRole, LARGE_SIZES};
use tracing::error;
use tracing_subscriber::EnvFilter;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Role {
    Initiator,
    Responder,
}

#[derive(Debug, Parser)]
#[command(about = "Measure two-way exchange throughput over striped channels")]
struct Args {
    #[arg(long, value_enum)]
    role: Role,
    /// Host the initiator dials. Ignored by the responder.
    #[arg(long, default_value = "127.0.0.1")]
    peer: String,
    /// Channel i of a cell uses port base-port + i.
    #[arg(long)]
    base_port: u16,
    #[arg(long, value_delimiter = ',', default_values_t = bench::DEFAULT_STREAM_COUNTS)]
    streams: Vec<usize>,
    /// Message sizes in bytes; accepts K, M, G (decimal) and KiB, MiB, GiB suffixes.
    #[arg(long, value_delimiter = ',', value_parser = parse_size)]
    sizes: Option<Vec<usize>>,
    #[arg(long, default_value_t = bench::DEFAULT_ITERATIONS)]
    iterations: usize,
    #[arg(long, default_value_t = bench::DEFAULT_WARMUP)]
    warmup: usize,
    /// Use the large 8/64/512 MiB sweep instead of the desk-scale sizes.
    #[arg(long, alias = "paper-sizes", conflicts_with = "sizes")]
    large_sizes: bool,
    #[arg(long)]
    out: PathBuf,
    /// Also write every timed sample here.
    #[arg(long)]
    samples_out: Option<PathBuf>,
    #[arg(long)]
    send_buffer: Option<usize>,
    #[arg(long)]
    recv_buffer: Option<usize>,
    #[arg(long, default_value_t = 30_000)]
    timeout_ms: u64,
}

fn parse_size(s: &str) -> Result<usize, String> {
    let s = s.trim();
    let split = s.find(|c: char| !c.is_ascii_digit()).unwrap_or(s.len());
    let (num, unit) = s.split_at(split);
    let n: usize = num.parse().map_err(|_| format!("bad size {s:?}"))?;
    let mult: usize = match unit.trim() {
        "" | "B" => 1,
        "K" | "KB" => 1_000,
        "M" | "MB" => 1_000_000,
        "G" | "GB" => 1_000_000_000,
        "KiB" => 1 << 10,
        "MiB" => 1 << 20,
        "GiB" => 1 << 30,
        u => return Err(format!("unknown size unit {u:?}")),
    };
    n.checked_mul(mult)
        .ok_or_else(|| format!("size {s:?} overflows"))
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    let args = Args::parse();

    let role = match args.role {
        Role::Initiator => BenchRole::Initiator,
        Role::Responder => BenchRole::Responder,
    };
    let mut plan = BenchPlan::new(role, args.peer, args.base_port);
    plan.stream_counts = args.streams;
    if args.large_sizes {
        plan.msg_sizes = LARGE_SIZES.to_vec();
    } else if let Some(sizes) = args.sizes {
        plan.msg_sizes = sizes;
    }
    plan.iterations = args.iterations;
    plan.warmup_iterations = args.warmup;
    plan.send_buffer_bytes = args.send_buffer;
    plan.recv_buffer_bytes = args.recv_buffer;
    plan.connect_timeout_ms = args.timeout_ms;
    if let Err(e) = plan.validate() {
        eprintln!("bench: {e}");
        return ExitCode::from(2);
    }

    let results = match bench::run_benchmark(&plan) {
        Ok(r) => r,
        Err(e) => {
            error!(error = %e, "benchmark aborted");
            return ExitCode::from(1);
        }
    };
    let mut written = bench::emit_csv(&results, &args.out);
    if let (Ok(()), Some(path)) = (&written, &args.samples_out) {
        written = bench::emit_samples_csv(&results, path);
    }
    match written {
        Ok(()) if results.iter().all(|r| r.outcome.is_ok()) => ExitCode::SUCCESS,
        Ok(()) => {
            error!("some cells failed");
            ExitCode::from(1)
        }
        Err(e) => {
            error!(error = %e, "cannot write results");
            ExitCode::from(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::parse_size;

    #[test]
    fn sizes() {
        assert_eq!(parse_size("1024"), Ok(1024));
        assert_eq!(parse_size("8MiB"), Ok(8 << 20));
        assert_eq!(parse_size("512MB"), Ok(512_000_000));
        assert!(parse_size("3 parsecs").is_err());
    }
}
