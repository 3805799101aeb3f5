//! The standalone forwarder: config file parsing and the run loop.
//!
//! The config is a flat `key = value` text file. Blank lines and lines
//! starting with `#` are ignored. Keys:
//!
//! | key                              | meaning                                        |
//! |----------------------------------|------------------------------------------------|
//! | `side_a.ports`, `side_b.ports`   | comma-separated ports, one channel each (required) |
//! | `side_X.host`                    | dial this host; absent means listen and accept |
//! | `side_X.send_buffer_bytes`       | socket send buffer per channel                 |
//! | `side_X.recv_buffer_bytes`       | socket receive buffer per channel              |
//! | `side_X.pace_bytes_per_sec`      | per-channel write pace                         |
//! | `side_X.connect_timeout_ms`      | dial/accept timeout (default 30000)            |
//! | `side_X.retry_backoff_ms`        | dial retry backoff (default 250)               |
//! | `side_X.first_index`             | handshake index of the side's first channel (default 0) |
//! | `log_interval_sec`               | counter log interval (default 10)              |
//! | `max_message_bytes`              | largest relayed message (default 1 GiB)        |

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;
use tracing::{info, warn};

use super::{RelayPair, RelayReport, DEFAULT_MAX_MESSAGE};
use crate::api::{Error, Mpw};
use crate::config::{ChannelConfig, Path};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SideConfig {
    pub host: Option<String>,
    pub ports: Vec<u16>,
    pub send_buffer_bytes: Option<usize>,
    pub recv_buffer_bytes: Option<usize>,
    pub pace_bytes_per_sec: Option<u64>,
    pub connect_timeout_ms: u64,
    pub retry_backoff_ms: u64,
    pub first_index: u64,
}

impl Default for SideConfig {
    fn default() -> Self {
        SideConfig {
            host: None,
            ports: Vec::new(),
            send_buffer_bytes: None,
            recv_buffer_bytes: None,
            pace_bytes_per_sec: None,
            connect_timeout_ms: crate::config::DEFAULT_CONNECT_TIMEOUT_MS,
            retry_backoff_ms: crate::config::DEFAULT_RETRY_BACKOFF_MS,
            first_index: 0,
        }
    }
}

impl SideConfig {
    pub fn channel_configs(&self) -> Vec<ChannelConfig> {
        self.ports
            .iter()
            .enumerate()
            .map(|(i, &port)| {
                let base = match &self.host {
                    Some(h) => ChannelConfig::connect(h.clone(), port),
                    None => ChannelConfig::accept(port),
                };
                let mut c = base
                    .with_buffers(self.send_buffer_bytes, self.recv_buffer_bytes)
                    .with_timeout_ms(self.connect_timeout_ms)
                    .with_backoff_ms(self.retry_backoff_ms)
                    .with_handshake_index(self.first_index + i as u64);
                c.pace_bytes_per_sec = self.pace_bytes_per_sec;
                c
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DaemonConfig {
    pub side_a: SideConfig,
    pub side_b: SideConfig,
    pub log_interval: Duration,
    pub max_message_bytes: u64,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub struct ConfigParseError {
    /// 1-based line number; 0 when the problem is a missing key.
    pub line: usize,
    pub key: String,
    pub message: String,
}

impl fmt::Display for ConfigParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.line == 0 {
            write!(f, "{}: {}", self.key, self.message)
        } else {
            write!(f, "line {}: {}: {}", self.line, self.key, self.message)
        }
    }
}

fn parse_num<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T, ConfigParseError> {
    value.parse().map_err(|_| ConfigParseError {
        line,
        key: key.to_string(),
        message: format!("invalid number {value:?}"),
    })
}

fn parse_positive<T: FromStr + PartialEq + Default>(
    line: usize,
    key: &str,
    value: &str,
) -> Result<T, ConfigParseError> {
    let n: T = parse_num(line, key, value)?;
    if n == T::default() {
        return Err(ConfigParseError {
            line,
            key: key.to_string(),
            message: "must be positive".to_string(),
        });
    }
    Ok(n)
}

impl FromStr for DaemonConfig {
    type Err = ConfigParseError;

    fn from_str(text: &str) -> Result<DaemonConfig, ConfigParseError> {
        let mut cfg = DaemonConfig {
            side_a: SideConfig::default(),
            side_b: SideConfig::default(),
            log_interval: Duration::from_secs(10),
            max_message_bytes: DEFAULT_MAX_MESSAGE,
        };
        let mut seen = HashSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let Some((key, value)) = trimmed.split_once('=') else {
                return Err(ConfigParseError {
                    line,
                    key: trimmed.to_string(),
                    message: "expected `key = value`".to_string(),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(ConfigParseError {
                    line,
                    key: key.to_string(),
                    message: "duplicate key".to_string(),
                });
            }
            let unknown = || ConfigParseError {
                line,
                key: key.to_string(),
                message: "unknown key".to_string(),
            };
            match key {
                "log_interval_sec" => {
                    cfg.log_interval = Duration::from_secs(parse_positive(line, key, value)?)
                }
                "max_message_bytes" => cfg.max_message_bytes = parse_positive(line, key, value)?,
                _ => {
                    let (side, field) = match key.split_once('.') {
                        Some(("side_a", f)) => (&mut cfg.side_a, f),
                        Some(("side_b", f)) => (&mut cfg.side_b, f),
                        _ => return Err(unknown()),
                    };
                    match field {
                        "host" if !value.is_empty() => side.host = Some(value.to_string()),
                        "host" => {
                            return Err(ConfigParseError {
                                line,
                                key: key.to_string(),
                                message: "empty host".to_string(),
                            })
                        }
                        "ports" => {
                            side.ports = value
                                .split(',')
                                .map(|p| parse_positive::<u16>(line, key, p.trim()))
                                .collect::<Result<_, _>>()?
                        }
                        "send_buffer_bytes" => {
                            side.send_buffer_bytes = Some(parse_positive(line, key, value)?)
                        }
                        "recv_buffer_bytes" => {
                            side.recv_buffer_bytes = Some(parse_positive(line, key, value)?)
                        }
                        "pace_bytes_per_sec" => {
                            side.pace_bytes_per_sec = Some(parse_positive(line, key, value)?)
                        }
                        "connect_timeout_ms" => {
                            side.connect_timeout_ms = parse_positive(line, key, value)?
                        }
                        "retry_backoff_ms" => {
                            side.retry_backoff_ms = parse_positive(line, key, value)?
                        }
                        "first_index" => side.first_index = parse_num(line, key, value)?,
                        _ => return Err(unknown()),
                    }
                }
            }
        }
        for (name, side) in [("side_a.ports", &cfg.side_a), ("side_b.ports", &cfg.side_b)] {
            if side.ports.is_empty() {
                return Err(ConfigParseError {
                    line: 0,
                    key: name.to_string(),
                    message: "missing required key".to_string(),
                });
            }
        }
        Ok(cfg)
    }
}

impl DaemonConfig {
    pub fn channel_configs(&self) -> Vec<ChannelConfig> {
        let mut all = self.side_a.channel_configs();
        all.extend(self.side_b.channel_configs());
        all
    }

    pub fn paths(&self) -> (Path, Path) {
        let na = self.side_a.ports.len();
        let nb = self.side_b.ports.len();
        (
            Path::of(0..na).expect("side a has ports"),
            Path::of(na..na + nb).expect("side b has ports"),
        )
    }
}

#[derive(Debug)]
pub enum DaemonOutcome {
    /// A peer closed its side and the relay wound down.
    PeerClosed(RelayReport),
    /// Stopped by the shutdown flag (e.g. SIGINT).
    Interrupted,
}

const POLL: Duration = Duration::from_millis(50);

/// Open both sides, relay until a side closes or `shutdown` is set, logging
/// per-direction counters every `log_interval`.
pub fn run(config: &DaemonConfig, shutdown: &AtomicBool) -> Result<DaemonOutcome, Error> {
    let mpw = match Mpw::init_cancellable(config.channel_configs(), shutdown) {
        Ok(m) => m,
        Err(_) if shutdown.load(Ordering::Acquire) => return Ok(DaemonOutcome::Interrupted),
        Err(e) => return Err(e),
    };
    let (a, b) = config.paths();
    let pair = RelayPair::new(a, b)?.with_max_message(config.max_message_bytes);
    let stats = pair.stats();
    info!(channels = mpw.num_channels(), "both sides open");

    thread::scope(|s| {
        let relay = s.spawn(|| pair.run(&mpw));
        let mut next_log = Instant::now() + config.log_interval;
        let mut interrupted = false;
        while !relay.is_finished() {
            if !interrupted && shutdown.load(Ordering::Acquire) {
                info!("interrupted, closing both sides");
                interrupted = true;
                mpw.finalize();
            }
            if Instant::now() >= next_log {
                let (ab, ba) = (stats.a_to_b.snapshot(), stats.b_to_a.snapshot());
                info!(
                    a_to_b_bytes = ab.bytes,
                    a_to_b_frames = ab.frames,
                    b_to_a_bytes = ba.bytes,
                    b_to_a_frames = ba.frames,
                    "relay counters"
                );
                next_log += config.log_interval;
            }
            thread::sleep(POLL);
        }
        let result = relay.join().expect("relay thread panicked");
        mpw.finalize();
        match result {
            _ if interrupted => Ok(DaemonOutcome::Interrupted),
            Ok(report) => Ok(DaemonOutcome::PeerClosed(report)),
            Err(e) => {
                warn!(error = %e, "relay failed");
                Err(e)
            }
        }
    })
}
