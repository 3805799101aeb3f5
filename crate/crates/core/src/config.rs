//! Channel descriptors and paths.

use std::collections::HashSet;
use std::fmt;
use std::time::Duration;

use thiserror::Error;

pub const DEFAULT_CONNECT_TIMEOUT_MS: u64 = 30_000;
pub const DEFAULT_RETRY_BACKOFF_MS: u64 = 250;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    /// Dial `peer_host:port`.
    Connect,
    /// Listen on `port` on all interfaces and accept one connection.
    Accept,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("port must be in 1..=65535")]
    InvalidPort,
    #[error("{0} must be positive when set")]
    NonPositive(&'static str),
    #[error("connect role requires a peer host")]
    MissingPeerHost,
    #[error("accept role listens on all interfaces and takes no peer host")]
    UnexpectedPeerHost,
    #[error("no channels configured")]
    Empty,
    #[error("path must name at least one channel")]
    EmptyPath,
    #[error("channel {0} appears more than once in the path")]
    DuplicateChannel(ChannelId),
}

/// Configuration of one channel endpoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelConfig {
    pub peer_host: Option<String>,
    pub port: u16,
    pub role: Role,
    pub send_buffer_bytes: Option<usize>,
    pub recv_buffer_bytes: Option<usize>,
    /// Absent means unpaced.
    pub pace_bytes_per_sec: Option<u64>,
    pub connect_timeout_ms: u64,
    pub retry_backoff_ms: u64,
    pub nodelay: bool,
    /// Index announced in the handshake. Defaults to the local channel id;
    /// set it when the two peers number their channels differently (e.g. a
    /// relay whose second side starts at a non-zero id).
    pub handshake_index: Option<u64>,
}

impl ChannelConfig {
    pub fn connect(host: impl Into<String>, port: u16) -> ChannelConfig {
        ChannelConfig {
            peer_host: Some(host.into()),
            role: Role::Connect,
            ..ChannelConfig::accept(port)
        }
    }

    pub fn accept(port: u16) -> ChannelConfig {
        ChannelConfig {
            peer_host: None,
            port,
            role: Role::Accept,
            send_buffer_bytes: None,
            recv_buffer_bytes: None,
            pace_bytes_per_sec: None,
            connect_timeout_ms: DEFAULT_CONNECT_TIMEOUT_MS,
            retry_backoff_ms: DEFAULT_RETRY_BACKOFF_MS,
            nodelay: true,
            handshake_index: None,
        }
    }

    pub fn with_buffers(mut self, send: Option<usize>, recv: Option<usize>) -> Self {
        self.send_buffer_bytes = send;
        self.recv_buffer_bytes = recv;
        self
    }

    pub fn with_pace(mut self, bytes_per_sec: u64) -> Self {
        self.pace_bytes_per_sec = Some(bytes_per_sec);
        self
    }

    pub fn with_timeout_ms(mut self, ms: u64) -> Self {
        self.connect_timeout_ms = ms;
        self
    }

    pub fn with_backoff_ms(mut self, ms: u64) -> Self {
        self.retry_backoff_ms = ms;
        self
    }

    pub fn with_handshake_index(mut self, index: u64) -> Self {
        self.handshake_index = Some(index);
        self
    }

    pub fn connect_timeout(&self) -> Duration {
        Duration::from_millis(self.connect_timeout_ms)
    }

    pub fn retry_backoff(&self) -> Duration {
        Duration::from_millis(self.retry_backoff_ms)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.port == 0 {
            return Err(ConfigError::InvalidPort);
        }
        if self.send_buffer_bytes == Some(0) {
            return Err(ConfigError::NonPositive("send_buffer_bytes"));
        }
        if self.recv_buffer_bytes == Some(0) {
            return Err(ConfigError::NonPositive("recv_buffer_bytes"));
        }
        if self.pace_bytes_per_sec == Some(0) {
            return Err(ConfigError::NonPositive("pace_bytes_per_sec"));
        }
        if self.connect_timeout_ms == 0 {
            return Err(ConfigError::NonPositive("connect_timeout_ms"));
        }
        if self.retry_backoff_ms == 0 {
            return Err(ConfigError::NonPositive("retry_backoff_ms"));
        }
        match (self.role, &self.peer_host) {
            (Role::Connect, None) => Err(ConfigError::MissingPeerHost),
            (Role::Accept, Some(_)) => Err(ConfigError::UnexpectedPeerHost),
            _ => Ok(()),
        }
    }
}

/// Dense channel index, assigned in declaration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ChannelId(pub usize);

impl fmt::Display for ChannelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// An ordered, duplicate-free, non-empty set of channels used together by one
/// operation.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Path(Vec<ChannelId>);

impl Path {
    pub fn new(channels: impl IntoIterator<Item = ChannelId>) -> Result<Path, ConfigError> {
        let channels: Vec<ChannelId> = channels.into_iter().collect();
        if channels.is_empty() {
            return Err(ConfigError::EmptyPath);
        }
        let mut seen = HashSet::with_capacity(channels.len());
        for &c in &channels {
            if !seen.insert(c) {
                return Err(ConfigError::DuplicateChannel(c));
            }
        }
        Ok(Path(channels))
    }

    /// Path over the channel indices `ids`.
    pub fn of(ids: impl IntoIterator<Item = usize>) -> Result<Path, ConfigError> {
        Path::new(ids.into_iter().map(ChannelId))
    }

    pub fn channels(&self) -> &[ChannelId] {
        &self.0
    }

    pub fn width(&self) -> usize {
        self.0.len()
    }

    pub fn first(&self) -> ChannelId {
        self.0[0]
    }

    pub fn overlaps(&self, other: &Path) -> bool {
        self.0.iter().any(|c| other.0.contains(c))
    }
}
