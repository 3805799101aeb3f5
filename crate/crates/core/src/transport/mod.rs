//! Channels: one framed, optionally paced, full-duplex stream per channel.
//!
//! A [`Channel`] owns a [`Link`] (a TCP socket, or an in-process link from
//! [`crate::testkit`]) and moves through `Configured -> Open -> Closed`, with
//! `Closed -> Open` allowed for reopening. At most one send and one receive
//! may be in flight on a channel at any time; a second concurrent send (or
//! receive) is rejected with [`ChannelError::Busy`].

mod link;
pub mod pacing;
mod tcp;

use std::io;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use thiserror::Error;
use tracing::{debug, warn};

pub(crate) use link::closed_error;
pub use link::{BufferSizes, Link, TcpLink};
use pacing::{pace_slice, TokenBucket};

use crate::config::{ChannelConfig, ChannelId, ConfigError, Role};
use crate::frame::{
    Frame, FrameError, FrameHeader, FrameKind, HEADER_LEN, HELLO_LEN, PROTOCOL_VERSION,
};

/// Writes up to this size go out as one header+payload buffer.
const COALESCE_LIMIT: usize = 64 * 1024;
const DRAIN_CHUNK: usize = 256 * 1024;
/// How long `close` waits for an in-flight write before giving up on the
/// close frame.
const CLOSE_WRITE_WAIT: Duration = Duration::from_millis(500);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelState {
    Configured,
    Open,
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Send,
    Recv,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HandshakeMismatch {
    #[error("protocol version: local {local}, remote {remote}")]
    Version { local: u8, remote: u8 },
    #[error("channel index: local {local}, remote {remote}")]
    Index { local: u64, remote: u64 },
    #[error("both ends claim the {0:?} role")]
    Role(Role),
    #[error("unknown role marker {0}")]
    BadRole(u8),
    #[error("expected a hello frame, got {0:?}")]
    NotHello(FrameKind),
}

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("channel is closed")]
    Closed,
    #[error("channel has not been opened")]
    NotOpen,
    #[error("channel is already open")]
    AlreadyOpen,
    #[error("another {0:?} is already in flight on this channel")]
    Busy(Direction),
    #[error("invalid channel config: {0}")]
    InvalidConfig(#[from] ConfigError),
    #[error("could not connect to {target} within {elapsed:?}")]
    ConnectTimeout { target: String, elapsed: Duration },
    #[error("open was cancelled")]
    Cancelled,
    #[error("port {0} is already in use")]
    AddressInUse(u16),
    #[error("handshake mismatch: {0}")]
    HandshakeMismatch(HandshakeMismatch),
    #[error("incoming payload of {actual} bytes exceeds the {limit} byte limit")]
    SizeLimitExceeded { actual: u64, limit: u64 },
    #[error("expected a {expected} byte chunk, peer sent {actual}")]
    StripeMismatch { expected: u64, actual: u64 },
    #[error("expected a {expected:?} frame, got {actual:?}")]
    UnexpectedFrame {
        expected: FrameKind,
        actual: FrameKind,
    },
    #[error("malformed frame header: {0}")]
    MalformedHeader(#[from] FrameError),
    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),
}

impl ChannelError {
    pub fn is_closed(&self) -> bool {
        matches!(self, ChannelError::Closed)
    }
}

/// Handshake message exchanged by both ends right after connecting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Hello {
    pub protocol_version: u8,
    pub channel_index: u64,
    pub role: Role,
}

const ROLE_CONNECT: u8 = 1;
const ROLE_ACCEPT: u8 = 2;

impl Hello {
    pub fn encode(&self) -> [u8; HELLO_LEN] {
        let mut out = [0u8; HELLO_LEN];
        out[0] = self.protocol_version;
        out[1..9].copy_from_slice(&self.channel_index.to_be_bytes());
        out[9] = match self.role {
            Role::Connect => ROLE_CONNECT,
            Role::Accept => ROLE_ACCEPT,
        };
        out
    }

    pub fn decode(bytes: &[u8; HELLO_LEN]) -> Result<Hello, HandshakeMismatch> {
        let role = match bytes[9] {
            ROLE_CONNECT => Role::Connect,
            ROLE_ACCEPT => Role::Accept,
            other => return Err(HandshakeMismatch::BadRole(other)),
        };
        Ok(Hello {
            protocol_version: bytes[0],
            channel_index: u64::from_be_bytes(bytes[1..9].try_into().unwrap()),
            role,
        })
    }

    /// Check a remote hello against ours.
    pub fn verify(&self, remote: &Hello) -> Result<(), HandshakeMismatch> {
        if self.protocol_version != remote.protocol_version {
            return Err(HandshakeMismatch::Version {
                local: self.protocol_version,
                remote: remote.protocol_version,
            });
        }
        if self.channel_index != remote.channel_index {
            return Err(HandshakeMismatch::Index {
                local: self.channel_index,
                remote: remote.channel_index,
            });
        }
        if self.role == remote.role {
            return Err(HandshakeMismatch::Role(self.role));
        }
        Ok(())
    }
}

/// One configured stream endpoint.
pub struct Channel {
    id: ChannelId,
    config: ChannelConfig,
    state: Mutex<ChannelState>,
    link: Option<Arc<dyn Link>>,
    pacer: Mutex<Option<TokenBucket>>,
    buffers: Option<BufferSizes>,
    sending: AtomicBool,
    receiving: AtomicBool,
}

impl std::fmt::Debug for Channel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Channel")
            .field("id", &self.id)
            .field("state", &*self.state.lock())
            .field("peer", &self.link.as_ref().map(|l| l.peer_description()))
            .finish()
    }
}

/// Open a channel over TCP per `config`.
pub fn open_channel(config: ChannelConfig, id: ChannelId) -> Result<Channel, ChannelError> {
    let mut channel = Channel::new(id, config)?;
    channel.open()?;
    Ok(channel)
}

impl Channel {
    pub fn new(id: ChannelId, config: ChannelConfig) -> Result<Channel, ChannelError> {
        config.validate()?;
        Ok(Channel {
            id,
            config,
            state: Mutex::new(ChannelState::Configured),
            link: None,
            pacer: Mutex::new(None),
            buffers: None,
            sending: AtomicBool::new(false),
            receiving: AtomicBool::new(false),
        })
    }

    pub fn id(&self) -> ChannelId {
        self.id
    }

    pub fn config(&self) -> &ChannelConfig {
        &self.config
    }

    pub fn state(&self) -> ChannelState {
        *self.state.lock()
    }

    pub fn is_open(&self) -> bool {
        self.state() == ChannelState::Open
    }

    /// Requested and granted socket buffer sizes of the current link.
    pub fn buffer_sizes(&self) -> Option<BufferSizes> {
        self.buffers
    }

    pub fn peer_description(&self) -> Option<String> {
        self.link.as_ref().map(|l| l.peer_description())
    }

    /// Replace the configuration of a channel that is not open.
    pub fn reconfigure(&mut self, config: ChannelConfig) -> Result<(), ChannelError> {
        if self.is_open() {
            return Err(ChannelError::AlreadyOpen);
        }
        config.validate()?;
        self.config = config;
        Ok(())
    }

    fn handshake_index(&self) -> u64 {
        self.config.handshake_index.unwrap_or(self.id.0 as u64)
    }

    /// Connect or accept over TCP as configured, then handshake.
    pub fn open(&mut self) -> Result<(), ChannelError> {
        self.open_cancellable(&AtomicBool::new(false))
    }

    /// [`Channel::open`] that gives up with [`ChannelError::Cancelled`] once
    /// `cancel` is set while still dialing or waiting for a connection.
    pub fn open_cancellable(&mut self, cancel: &AtomicBool) -> Result<(), ChannelError> {
        self.ensure_openable()?;
        let (stream, _) = match self.config.role {
            Role::Connect => tcp::dial(&self.config, cancel)?,
            Role::Accept => tcp::accept_one(&self.config, cancel)?,
        };
        self.attach(Arc::new(TcpLink::new(stream)))
    }

    /// Handshake over an already connected link and open the channel on it.
    pub fn open_with(&mut self, link: Arc<dyn Link>) -> Result<(), ChannelError> {
        self.ensure_openable()?;
        self.attach(link)
    }

    fn ensure_openable(&self) -> Result<(), ChannelError> {
        match self.state() {
            ChannelState::Open => Err(ChannelError::AlreadyOpen),
            _ => Ok(()),
        }
    }

    fn attach(&mut self, link: Arc<dyn Link>) -> Result<(), ChannelError> {
        let sizes =
            link.set_buffer_sizes(self.config.send_buffer_bytes, self.config.recv_buffer_bytes);
        let sizes = match sizes {
            Ok(s) => s,
            Err(e) => {
                link.close();
                return Err(ChannelError::Io(e));
            }
        };
        if let Err(e) = self.handshake(link.as_ref()) {
            link.close();
            return Err(e);
        }
        debug!(channel = %self.id, peer = %link.peer_description(), ?sizes, "channel open");
        self.buffers = Some(sizes);
        self.link = Some(link);
        *self.pacer.lock() = self.config.pace_bytes_per_sec.map(TokenBucket::for_pace);
        *self.state.lock() = ChannelState::Open;
        Ok(())
    }

    fn handshake(&self, link: &dyn Link) -> Result<(), ChannelError> {
        let local = Hello {
            protocol_version: PROTOCOL_VERSION,
            channel_index: self.handshake_index(),
            role: self.config.role,
        };
        let mut out = FrameHeader::new(FrameKind::Hello, HELLO_LEN as u64)?
            .to_bytes()
            .to_vec();
        out.extend_from_slice(&local.encode());
        link.write_all(&out)?;

        link.set_read_timeout(Some(self.config.connect_timeout()))?;
        let mut head = [0u8; HEADER_LEN];
        let read = link.read_exact(&mut head).map_err(|e| match e.kind() {
            io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => ChannelError::ConnectTimeout {
                target: link.peer_description(),
                elapsed: self.config.connect_timeout(),
            },
            io::ErrorKind::UnexpectedEof => ChannelError::Closed,
            _ => ChannelError::Io(e),
        });
        read?;
        let remote = match FrameHeader::parse(&head) {
            Ok(h) if h.kind == FrameKind::Hello => {
                let mut body = [0u8; HELLO_LEN];
                link.read_exact(&mut body)?;
                Hello::decode(&body).map_err(ChannelError::HandshakeMismatch)?
            }
            Ok(h) => {
                return Err(ChannelError::HandshakeMismatch(
                    HandshakeMismatch::NotHello(h.kind),
                ))
            }
            // A peer speaking another version fails here before we get to
            // compare hellos.
            Err(FrameError::VersionMismatch(v)) => {
                return Err(ChannelError::HandshakeMismatch(
                    HandshakeMismatch::Version {
                        local: PROTOCOL_VERSION,
                        remote: v,
                    },
                ))
            }
            Err(e) => return Err(e.into()),
        };
        link.set_read_timeout(None)?;
        local
            .verify(&remote)
            .map_err(ChannelError::HandshakeMismatch)
    }

    /// Best-effort close: send a `Close` frame if the channel is open and no
    /// send is in flight, then tear the link down. Idempotent; never fails.
    pub fn close(&self) {
        {
            let mut state = self.state.lock();
            if *state != ChannelState::Open {
                if *state == ChannelState::Configured {
                    *state = ChannelState::Closed;
                }
                return;
            }
            *state = ChannelState::Closed;
        }
        let Some(link) = &self.link else { return };
        // The pacer mutex is held for the duration of every frame write, so
        // taking it keeps the close frame from splitting an in-flight frame.
        match self.pacer.try_lock_for(CLOSE_WRITE_WAIT) {
            Some(_writer) => {
                let close = FrameHeader::new(FrameKind::Close, 0).unwrap().to_bytes();
                if let Err(e) = link.write_all(&close) {
                    debug!(channel = %self.id, error = %e, "could not send close frame");
                }
            }
            None => warn!(channel = %self.id, "write in progress, closing without close frame"),
        }
        link.close();
        debug!(channel = %self.id, "channel closed");
    }

    fn live_link(&self) -> Result<&Arc<dyn Link>, ChannelError> {
        match self.state() {
            ChannelState::Open => Ok(self.link.as_ref().expect("open channel has a link")),
            ChannelState::Closed => Err(ChannelError::Closed),
            ChannelState::Configured => Err(ChannelError::NotOpen),
        }
    }

    fn map_io(&self, e: io::Error) -> ChannelError {
        if self.state() == ChannelState::Closed {
            return ChannelError::Closed;
        }
        match e.kind() {
            io::ErrorKind::UnexpectedEof | io::ErrorKind::NotConnected => ChannelError::Closed,
            _ => ChannelError::Io(e),
        }
    }

    /// Claim the send side of the channel.
    pub fn sender(&self) -> Result<Sender<'_>, ChannelError> {
        let link = self.live_link()?;
        if self
            .sending
            .compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
            .is_err()
        {
            return Err(ChannelError::Busy(Direction::Send));
        }
        Ok(Sender {
            channel: self,
            link: link.as_ref(),
        })
    }

    /// Claim the receive side of the channel.
    pub fn receiver(&self) -> Result<Receiver<'_>, ChannelError> {
        let link = self.live_link()?;
        if self
            .receiving
            .compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
            .is_err()
        {
            return Err(ChannelError::Busy(Direction::Recv));
        }
        Ok(Receiver {
            channel: self,
            link: link.as_ref(),
        })
    }

    pub fn send_frame(&self, kind: FrameKind, payload: &[u8]) -> Result<(), ChannelError> {
        self.sender()?.send(kind, payload)
    }

    /// Receive one frame whose payload may be at most `max_payload` bytes.
    /// Oversized frames are drained from the stream before the error is
    /// returned, so the next frame remains readable.
    pub fn recv_frame(&self, max_payload: u64) -> Result<Frame, ChannelError> {
        let mut rx = self.receiver()?;
        let header = rx.header()?;
        if header.payload_len > max_payload {
            rx.drain(header.payload_len)?;
            return Err(ChannelError::SizeLimitExceeded {
                actual: header.payload_len,
                limit: max_payload,
            });
        }
        let mut payload = vec![0u8; header.payload_len as usize];
        rx.payload(&mut payload)?;
        Ok(Frame {
            kind: header.kind,
            payload,
        })
    }
}

impl Drop for Channel {
    fn drop(&mut self) {
        self.close();
    }
}

/// Exclusive handle on a channel's send side.
pub struct Sender<'a> {
    channel: &'a Channel,
    link: &'a dyn Link,
}

impl Sender<'_> {
    pub fn channel(&self) -> ChannelId {
        self.channel.id
    }

    pub fn send(&mut self, kind: FrameKind, payload: &[u8]) -> Result<(), ChannelError> {
        let header = FrameHeader::new(kind, payload.len() as u64)?.to_bytes();
        let mut pacer = self.channel.pacer.lock();
        if self.channel.state() != ChannelState::Open {
            return Err(ChannelError::Closed);
        }
        match pacer.as_mut() {
            Some(bucket) => self.send_paced(bucket, &header, payload),
            None if payload.len() <= COALESCE_LIMIT => {
                let mut buf = Vec::with_capacity(HEADER_LEN + payload.len());
                buf.extend_from_slice(&header);
                buf.extend_from_slice(payload);
                self.write(&buf)
            }
            None => {
                self.write(&header)?;
                self.write(payload)
            }
        }
    }

    pub fn send_data(&mut self, payload: &[u8]) -> Result<(), ChannelError> {
        self.send(FrameKind::Data, payload)
    }

    fn send_paced(
        &self,
        bucket: &mut TokenBucket,
        header: &[u8],
        payload: &[u8],
    ) -> Result<(), ChannelError> {
        let slice = pace_slice(bucket.rate()).min(bucket.capacity());
        // The header rides in the first slice.
        let first = payload.len().min(slice - header.len());
        let mut buf = Vec::with_capacity(header.len() + first);
        buf.extend_from_slice(header);
        buf.extend_from_slice(&payload[..first]);
        bucket.acquire(buf.len());
        self.write(&buf)?;
        for part in payload[first..].chunks(slice) {
            bucket.acquire(part.len());
            self.write(part)?;
        }
        Ok(())
    }

    fn write(&self, buf: &[u8]) -> Result<(), ChannelError> {
        self.link.write_all(buf).map_err(|e| self.channel.map_io(e))
    }
}

impl Drop for Sender<'_> {
    fn drop(&mut self) {
        self.channel.sending.store(false, Ordering::Release);
    }
}

/// Exclusive handle on a channel's receive side. Frames are read in two
/// steps, [`Receiver::header`] then the payload, so callers can decide where
/// the payload goes (or drain it) once the length is known.
pub struct Receiver<'a> {
    channel: &'a Channel,
    link: &'a dyn Link,
}

impl Receiver<'_> {
    pub fn channel(&self) -> ChannelId {
        self.channel.id
    }

    pub fn header(&mut self) -> Result<FrameHeader, ChannelError> {
        let mut head = [0u8; HEADER_LEN];
        self.read(&mut head)?;
        Ok(FrameHeader::parse(&head)?)
    }

    pub fn payload(&mut self, buf: &mut [u8]) -> Result<(), ChannelError> {
        self.read(buf)
    }

    /// Read and discard `len` payload bytes.
    pub fn drain(&mut self, mut len: u64) -> Result<(), ChannelError> {
        let mut scratch = vec![0u8; DRAIN_CHUNK.min(len as usize)];
        while len > 0 {
            let n = (len as usize).min(scratch.len());
            self.read(&mut scratch[..n])?;
            len -= n as u64;
        }
        Ok(())
    }

    /// Read the header of the next frame and insist it is `Data`. A `Close`
    /// frame from the peer surfaces as [`ChannelError::Closed`].
    pub fn data_header(&mut self) -> Result<u64, ChannelError> {
        let h = self.header()?;
        match h.kind {
            FrameKind::Data => Ok(h.payload_len),
            FrameKind::Close => Err(ChannelError::Closed),
            other => {
                self.drain(h.payload_len)?;
                Err(ChannelError::UnexpectedFrame {
                    expected: FrameKind::Data,
                    actual: other,
                })
            }
        }
    }

    /// Receive a `Data` frame whose payload must be exactly `buf.len()`
    /// bytes. A mis-sized frame is drained and reported.
    pub fn recv_exact(&mut self, buf: &mut [u8]) -> Result<(), ChannelError> {
        let len = self.data_header()?;
        if len != buf.len() as u64 {
            self.drain(len)?;
            return Err(ChannelError::StripeMismatch {
                expected: buf.len() as u64,
                actual: len,
            });
        }
        self.read(buf)
    }

    /// Wait for a `Barrier` frame.
    pub fn recv_barrier(&mut self) -> Result<(), ChannelError> {
        let h = self.header()?;
        match h.kind {
            FrameKind::Barrier => Ok(()),
            FrameKind::Close => Err(ChannelError::Closed),
            other => {
                self.drain(h.payload_len)?;
                Err(ChannelError::UnexpectedFrame {
                    expected: FrameKind::Barrier,
                    actual: other,
                })
            }
        }
    }

    fn read(&self, buf: &mut [u8]) -> Result<(), ChannelError> {
        self.link
            .read_exact(buf)
            .map_err(|e| self.channel.map_io(e))
    }
}

impl Drop for Receiver<'_> {
    fn drop(&mut self) {
        self.channel.receiving.store(false, Ordering::Release);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hello_layout() {
        let h = Hello {
            protocol_version: 1,
            channel_index: 0x0102,
            role: Role::Accept,
        };
        assert_eq!(h.encode(), [1, 0, 0, 0, 0, 0, 0, 1, 2, ROLE_ACCEPT]);
        assert_eq!(Hello::decode(&h.encode()).unwrap(), h);
        let mut bad = h.encode();
        bad[9] = 7;
        assert_eq!(Hello::decode(&bad), Err(HandshakeMismatch::BadRole(7)));
    }

    #[test]
    fn hello_verification() {
        let a = Hello {
            protocol_version: 1,
            channel_index: 3,
            role: Role::Connect,
        };
        let ok = Hello {
            role: Role::Accept,
            ..a
        };
        assert_eq!(a.verify(&ok), Ok(()));
        assert!(matches!(
            a.verify(&Hello {
                channel_index: 4,
                ..ok
            }),
            Err(HandshakeMismatch::Index {
                local: 3,
                remote: 4
            })
        ));
        assert!(matches!(
            a.verify(&Hello {
                protocol_version: 2,
                ..ok
            }),
            Err(HandshakeMismatch::Version { .. })
        ));
        assert_eq!(a.verify(&a), Err(HandshakeMismatch::Role(Role::Connect)));
    }

    #[test]
    fn unopened_channel_rejects_io() {
        let ch = Channel::new(ChannelId(0), ChannelConfig::accept(6000)).unwrap();
        assert!(matches!(
            ch.send_frame(FrameKind::Data, b"x"),
            Err(ChannelError::NotOpen)
        ));
        ch.close();
        assert!(matches!(ch.recv_frame(10), Err(ChannelError::Closed)));
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(matches!(
            Channel::new(ChannelId(0), ChannelConfig::accept(0)),
            Err(ChannelError::InvalidConfig(ConfigError::InvalidPort))
        ));
    }
}
