//! Throughput benchmark harness.
//!
//! A run sweeps every (message size, stream count) cell. For each cell both
//! peers open a path of `streams` channels, run a few untimed warmup
//! exchanges and then `iterations` timed two-way exchanges with
//! [`Mpw::send_recv_into`]. Each exchange yields one throughput sample
//!
//! ```text
//! gbps = 2 * msg_bytes * 8 / seconds / 1e9
//! ```
//!
//! counting both directions of the full-duplex exchange (halve it for a
//! one-directional figure). A cell reports the mean and standard error of its
//! samples.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path as FsPath;
use std::time::{Duration, Instant};

use thiserror::Error;
use tracing::{info, warn};

use crate::api::{self, Mpw};
use crate::config::{ChannelConfig, Path};
use crate::stats::{BenchRecord, InsufficientSamples};

pub const DEFAULT_STREAM_COUNTS: [usize; 8] = [1, 2, 4, 8, 16, 32, 64, 124];
pub const MAX_STREAMS: usize = 128;
const MIB: usize = 1 << 20;
/// Desk-scale message sizes.
pub const DESK_SIZES: [usize; 3] = [MIB, 8 * MIB, 64 * MIB];
/// The large-scale sweep: 8, 64 and 512 MiB.
pub const LARGE_SIZES: [usize; 3] = [8 * MIB, 64 * MIB, 512 * MIB];
pub const DEFAULT_ITERATIONS: usize = 100;
pub const DEFAULT_WARMUP: usize = 5;

pub const CSV_HEADER: &str = "streams,msg_bytes,iterations,mean_gbps,stderr_gbps,status";
pub const SAMPLES_HEADER: &str = "streams,msg_bytes,iteration,gbps";

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error(transparent)]
    InsufficientSamples(#[from] InsufficientSamples),
    #[error("peer runs a different plan (local hash {local:016x}, remote {remote:016x})")]
    PlanMismatch { local: u64, remote: u64 },
    #[error("transfer failed: {0}")]
    Transfer(#[from] api::Error),
    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchRole {
    /// Dials the peer.
    Initiator,
    /// Listens for the initiator.
    Responder,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchPlan {
    pub role: BenchRole,
    pub peer_host: String,
    pub base_port: u16,
    pub stream_counts: Vec<usize>,
    pub msg_sizes: Vec<usize>,
    pub iterations: usize,
    pub warmup_iterations: usize,
    pub send_buffer_bytes: Option<usize>,
    pub recv_buffer_bytes: Option<usize>,
    pub connect_timeout_ms: u64,
}

impl BenchPlan {
    pub fn new(role: BenchRole, peer_host: impl Into<String>, base_port: u16) -> BenchPlan {
        BenchPlan {
            role,
            peer_host: peer_host.into(),
            base_port,
            stream_counts: DEFAULT_STREAM_COUNTS.to_vec(),
            msg_sizes: DESK_SIZES.to_vec(),
            iterations: DEFAULT_ITERATIONS,
            warmup_iterations: DEFAULT_WARMUP,
            send_buffer_bytes: None,
            recv_buffer_bytes: None,
            connect_timeout_ms: 30_000,
        }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        if self.iterations < 2 {
            return Err(InsufficientSamples(self.iterations).into());
        }
        if self.stream_counts.is_empty() || self.msg_sizes.is_empty() {
            return Err(BenchError::InvalidPlan(
                "need at least one stream count and one message size".into(),
            ));
        }
        if let Some(&n) = self
            .stream_counts
            .iter()
            .find(|&&n| n == 0 || n > MAX_STREAMS)
        {
            return Err(BenchError::InvalidPlan(format!(
                "stream count {n} outside 1..={MAX_STREAMS}"
            )));
        }
        if self.msg_sizes.contains(&0) {
            return Err(BenchError::InvalidPlan(
                "message sizes must be positive".into(),
            ));
        }
        let top = *self.stream_counts.iter().max().unwrap();
        if self.base_port == 0 || self.base_port as usize + top - 1 > u16::MAX as usize {
            return Err(BenchError::InvalidPlan(format!(
                "ports {}..{} out of range",
                self.base_port,
                self.base_port as usize + top
            )));
        }
        Ok(())
    }

    /// Cells in output order: size-major, streams-minor.
    pub fn cells(&self) -> Vec<(usize, usize)> {
        let mut sizes = self.msg_sizes.clone();
        let mut streams = self.stream_counts.clone();
        sizes.sort_unstable();
        sizes.dedup();
        streams.sort_unstable();
        streams.dedup();
        sizes
            .iter()
            .flat_map(|&size| streams.iter().map(move |&s| (s, size)))
            .collect()
    }

    /// FNV-1a over the parameters both peers must agree on.
    pub fn hash(&self) -> u64 {
        let mut canon = String::new();
        let _ = write!(
            canon,
            "streams={:?};sizes={:?};iters={};warmup={}",
            self.stream_counts, self.msg_sizes, self.iterations, self.warmup_iterations
        );
        canon.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
        })
    }

    fn channel_configs(&self, streams: usize) -> Vec<ChannelConfig> {
        (0..streams)
            .map(|i| {
                let port = self.base_port + i as u16;
                let c = match self.role {
                    BenchRole::Initiator => ChannelConfig::connect(self.peer_host.clone(), port),
                    BenchRole::Responder => ChannelConfig::accept(port),
                };
                c.with_buffers(self.send_buffer_bytes, self.recv_buffer_bytes)
                    .with_timeout_ms(self.connect_timeout_ms)
            })
            .collect()
    }
}

/// Outcome of one cell of the sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub streams: usize,
    pub msg_bytes: usize,
    pub iterations: usize,
    pub outcome: Result<CellStats, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellStats {
    pub record: BenchRecord,
    /// Round trip of the barrier that starts the cell.
    pub barrier_rtt: Duration,
}

/// One throughput sample in Gbit/s for a two-way exchange of `msg_bytes`.
pub fn exchange_gbps(msg_bytes: usize, elapsed: Duration) -> f64 {
    2.0 * msg_bytes as f64 * 8.0 / elapsed.as_secs_f64() / 1e9
}

/// Ping-style round trip over the first channel of `path`. After one
/// synchronising barrier, two back-to-back barriers take one full round trip
/// regardless of how far apart the peers entered. Both peers must call this.
pub fn barrier_round_trip(mpw: &Mpw, path: &Path) -> Result<Duration, api::Error> {
    mpw.barrier(path)?;
    let t = Instant::now();
    mpw.barrier(path)?;
    mpw.barrier(path)?;
    Ok(t.elapsed())
}

/// Benchmark one cell over an already open path. Both peers must call this
/// with the same arguments.
pub fn run_cell(
    mpw: &Mpw,
    path: &Path,
    msg_bytes: usize,
    iterations: usize,
    warmup: usize,
) -> Result<CellStats, BenchError> {
    if iterations < 2 {
        return Err(InsufficientSamples(iterations).into());
    }
    let send: Vec<u8> = (0..msg_bytes).map(|i| (i % 251) as u8).collect();
    let mut recv = vec![0u8; msg_bytes];

    let barrier_rtt = barrier_round_trip(mpw, path)?;

    for _ in 0..warmup {
        mpw.send_recv_into(&send, &mut recv, path)?;
    }
    let mut samples = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let t = Instant::now();
        mpw.send_recv_into(&send, &mut recv, path)?;
        samples.push(exchange_gbps(msg_bytes, t.elapsed()));
    }
    let record = BenchRecord::from_samples(path.width(), msg_bytes, samples)?;
    Ok(CellStats {
        record,
        barrier_rtt,
    })
}

/// Exchange plan hashes over the path; both sides learn of a mismatch.
fn verify_plan(mpw: &Mpw, path: &Path, plan: &BenchPlan) -> Result<(), BenchError> {
    let local = plan.hash();
    let got = mpw.p_send_recv(
        &[&local.to_be_bytes()],
        &[8],
        &Path::new([path.first()]).map_err(api::Error::from)?,
    )?;
    let remote = u64::from_be_bytes(got[0].as_slice().try_into().expect("8 bytes"));
    if remote != local {
        return Err(BenchError::PlanMismatch { local, remote });
    }
    Ok(())
}

/// Run the whole sweep against a peer over TCP. A transfer failure marks its
/// cell failed and the sweep moves on; a plan mismatch aborts.
pub fn run_benchmark(plan: &BenchPlan) -> Result<Vec<CellResult>, BenchError> {
    plan.validate()?;
    let mut results = Vec::new();
    for (streams, msg_bytes) in plan.cells() {
        info!(streams, msg_bytes, "cell start");
        let outcome = (|| {
            let mpw = Mpw::init(plan.channel_configs(streams))?;
            let path = mpw.all_channels();
            verify_plan(&mpw, &path, plan)?;
            let stats = run_cell(
                &mpw,
                &path,
                msg_bytes,
                plan.iterations,
                plan.warmup_iterations,
            );
            mpw.finalize();
            stats
        })();
        let outcome = match outcome {
            Ok(stats) => {
                info!(
                    streams,
                    msg_bytes,
                    mean_gbps = stats.record.mean_gbps,
                    stderr_gbps = stats.record.stderr_gbps,
                    rtt_ms = stats.barrier_rtt.as_secs_f64() * 1e3,
                    "cell done"
                );
                Ok(stats)
            }
            Err(e @ BenchError::PlanMismatch { .. }) => return Err(e),
            Err(e) => {
                warn!(streams, msg_bytes, error = %e, "cell failed");
                Err(e.to_string())
            }
        };
        results.push(CellResult {
            streams,
            msg_bytes,
            iterations: plan.iterations,
            outcome,
        });
    }
    Ok(results)
}

fn sorted(results: &[CellResult]) -> Vec<&CellResult> {
    let mut rows: Vec<&CellResult> = results.iter().collect();
    rows.sort_by_key(|r| (r.msg_bytes, r.streams));
    rows
}

/// Render results as CSV: one row per cell, size-major then streams-minor.
/// Failed cells have empty statistics and status `failed`.
pub fn render_csv(results: &[CellResult]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in sorted(results) {
        let _ = match &r.outcome {
            Ok(s) => writeln!(
                out,
                "{},{},{},{},{},ok",
                r.streams, r.msg_bytes, r.iterations, s.record.mean_gbps, s.record.stderr_gbps
            ),
            Err(_) => writeln!(
                out,
                "{},{},{},,,failed",
                r.streams, r.msg_bytes, r.iterations
            ),
        };
    }
    out
}

pub fn emit_csv(results: &[CellResult], path: &FsPath) -> Result<(), BenchError> {
    if results.is_empty() {
        return Err(BenchError::InvalidPlan("no results to write".into()));
    }
    fs::write(path, render_csv(results))?;
    Ok(())
}

/// Raw per-exchange samples, for recomputing the statistics elsewhere.
pub fn render_samples_csv(results: &[CellResult]) -> String {
    let mut out = String::from(SAMPLES_HEADER);
    out.push('\n');
    for r in sorted(results) {
        if let Ok(s) = &r.outcome {
            for (i, g) in s.record.samples_gbps.iter().enumerate() {
                let _ = writeln!(out, "{},{},{},{}", r.streams, r.msg_bytes, i, g);
            }
        }
    }
    out
}

pub fn emit_samples_csv(results: &[CellResult], path: &FsPath) -> Result<(), BenchError> {
    fs::write(path, render_samples_csv(results))?;
    Ok(())
}
