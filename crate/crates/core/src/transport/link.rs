//! The byte-stream abstraction a channel runs over.

use std::io::{self, Read, Write};
use std::net::{Shutdown, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Duration;

use socket2::SockRef;

/// Requested and OS-granted socket buffer sizes. The kernel may clamp or
/// double what was asked for.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BufferSizes {
    pub requested_send: Option<usize>,
    pub requested_recv: Option<usize>,
    pub granted_send: usize,
    pub granted_recv: usize,
}

/// A reliable, ordered, full-duplex byte stream.
///
/// One writer and one reader may use a link concurrently. `write_all`
/// transfers every byte or fails; `read_exact` fills the whole buffer or
/// fails. Once `close` has been called every operation fails.
pub trait Link: Send + Sync {
    fn write_all(&self, buf: &[u8]) -> io::Result<()>;

    fn read_exact(&self, buf: &mut [u8]) -> io::Result<()>;

    /// Tear the link down. Unblocks any reader or writer. Idempotent.
    fn close(&self);

    fn set_buffer_sizes(&self, send: Option<usize>, recv: Option<usize>)
        -> io::Result<BufferSizes>;

    fn peer_description(&self) -> String;

    /// Bound blocking reads; `None` restores blocking reads.
    fn set_read_timeout(&self, timeout: Option<Duration>) -> io::Result<()>;
}

pub(crate) fn closed_error() -> io::Error {
    io::Error::new(io::ErrorKind::NotConnected, "link closed")
}

/// A [`Link`] over a connected TCP socket.
#[derive(Debug)]
pub struct TcpLink {
    stream: TcpStream,
    peer: String,
    closed: AtomicBool,
}

impl TcpLink {
    pub fn new(stream: TcpStream) -> TcpLink {
        let peer = stream
            .peer_addr()
            .map(|a| a.to_string())
            .unwrap_or_else(|_| "<unknown>".to_string());
        TcpLink {
            stream,
            peer,
            closed: AtomicBool::new(false),
        }
    }

    pub fn stream(&self) -> &TcpStream {
        &self.stream
    }

    fn check_open(&self) -> io::Result<()> {
        if self.closed.load(Ordering::Acquire) {
            Err(closed_error())
        } else {
            Ok(())
        }
    }
}

impl Link for TcpLink {
    fn write_all(&self, buf: &[u8]) -> io::Result<()> {
        self.check_open()?;
        (&self.stream).write_all(buf).map_err(|e| {
            if self.closed.load(Ordering::Acquire) {
                closed_error()
            } else {
                e
            }
        })
    }

    fn read_exact(&self, buf: &mut [u8]) -> io::Result<()> {
        self.check_open()?;
        (&self.stream).read_exact(buf).map_err(|e| {
            if self.closed.load(Ordering::Acquire) {
                closed_error()
            } else {
                e
            }
        })
    }

    fn close(&self) {
        if !self.closed.swap(true, Ordering::AcqRel) {
            let _ = self.stream.shutdown(Shutdown::Both);
        }
    }

    fn set_buffer_sizes(
        &self,
        send: Option<usize>,
        recv: Option<usize>,
    ) -> io::Result<BufferSizes> {
        apply_buffer_sizes(SockRef::from(&self.stream), send, recv)
    }

    fn peer_description(&self) -> String {
        format!("tcp:{}", self.peer)
    }

    fn set_read_timeout(&self, timeout: Option<Duration>) -> io::Result<()> {
        self.stream.set_read_timeout(timeout)
    }
}

pub(crate) fn apply_buffer_sizes(
    sock: SockRef<'_>,
    send: Option<usize>,
    recv: Option<usize>,
) -> io::Result<BufferSizes> {
    if let Some(n) = send {
        sock.set_send_buffer_size(n)?;
    }
    if let Some(n) = recv {
        sock.set_recv_buffer_size(n)?;
    }
    Ok(BufferSizes {
        requested_send: send,
        requested_recv: recv,
        granted_send: sock.send_buffer_size()?,
        granted_recv: sock.recv_buffer_size()?,
    })
}
