//! Dialing and accepting TCP connections for channels.

use std::io;
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::thread;
use std::time::{Duration, Instant};

use socket2::{Domain, Protocol, SockRef, Socket, Type};
use tracing::debug;

use super::link::{apply_buffer_sizes, BufferSizes};
use super::ChannelError;
use crate::config::ChannelConfig;

/// Poll interval of the non-blocking accept loop.
const ACCEPT_POLL: Duration = Duration::from_millis(5);

/// Dial `peer_host:port`, retrying with a fixed backoff until the connect
/// timeout elapses. Socket buffers are set before the SYN so the window
/// scale option reflects them.
pub(crate) fn dial(
    config: &ChannelConfig,
    cancel: &AtomicBool,
) -> Result<(TcpStream, BufferSizes), ChannelError> {
    let host = config.peer_host.as_deref().unwrap_or_default();
    let start = Instant::now();
    let deadline = start + config.connect_timeout();
    let mut attempts = 0u32;
    loop {
        attempts += 1;
        if cancel.load(Ordering::Acquire) {
            return Err(ChannelError::Cancelled);
        }
        let now = Instant::now();
        if now >= deadline {
            break;
        }
        match resolve(host, config.port) {
            Ok(addrs) => {
                for addr in addrs {
                    let remaining = deadline.saturating_duration_since(Instant::now());
                    if remaining.is_zero() {
                        break;
                    }
                    match try_connect(config, addr, remaining) {
                        Ok(pair) => return Ok(pair),
                        Err(e) => debug!(%addr, attempt = attempts, error = %e, "connect failed"),
                    }
                }
            }
            Err(e) => debug!(host, error = %e, "resolve failed"),
        }
        let remaining = deadline.saturating_duration_since(Instant::now());
        if remaining.is_zero() {
            break;
        }
        thread::sleep(config.retry_backoff().min(remaining));
    }
    Err(ChannelError::ConnectTimeout {
        target: format!("{host}:{}", config.port),
        elapsed: start.elapsed(),
    })
}

fn resolve(host: &str, port: u16) -> io::Result<Vec<SocketAddr>> {
    Ok((host, port).to_socket_addrs()?.collect())
}

fn try_connect(
    config: &ChannelConfig,
    addr: SocketAddr,
    timeout: Duration,
) -> io::Result<(TcpStream, BufferSizes)> {
    let socket = Socket::new(Domain::for_address(addr), Type::STREAM, Some(Protocol::TCP))?;
    apply_buffer_sizes(
        SockRef::from(&socket),
        config.send_buffer_bytes,
        config.recv_buffer_bytes,
    )?;
    socket.connect_timeout(&addr.into(), timeout)?;
    socket.set_nodelay(config.nodelay)?;
    let stream: TcpStream = socket.into();
    let sizes = apply_buffer_sizes(
        SockRef::from(&stream),
        config.send_buffer_bytes,
        config.recv_buffer_bytes,
    )?;
    Ok((stream, sizes))
}

/// Listen on `port` (all interfaces) and accept a single connection before
/// the connect timeout elapses. The listener is dropped afterwards.
pub(crate) fn accept_one(
    config: &ChannelConfig,
    cancel: &AtomicBool,
) -> Result<(TcpStream, BufferSizes), ChannelError> {
    let start = Instant::now();
    let listener = bind_listener(config)?;
    let deadline = start + config.connect_timeout();
    listener.set_nonblocking(true).map_err(ChannelError::Io)?;
    let stream = loop {
        match listener.accept() {
            Ok((sock, _)) => break sock,
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                if cancel.load(Ordering::Acquire) {
                    return Err(ChannelError::Cancelled);
                }
                if Instant::now() >= deadline {
                    return Err(ChannelError::ConnectTimeout {
                        target: format!("accept on port {}", config.port),
                        elapsed: start.elapsed(),
                    });
                }
                thread::sleep(ACCEPT_POLL);
            }
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(ChannelError::Io(e)),
        }
    };
    stream.set_nonblocking(false).map_err(ChannelError::Io)?;
    stream
        .set_nodelay(config.nodelay)
        .map_err(ChannelError::Io)?;
    let stream: TcpStream = stream.into();
    let sizes = apply_buffer_sizes(
        SockRef::from(&stream),
        config.send_buffer_bytes,
        config.recv_buffer_bytes,
    )
    .map_err(ChannelError::Io)?;
    Ok((stream, sizes))
}

fn bind_listener(config: &ChannelConfig) -> Result<Socket, ChannelError> {
    let addr: SocketAddr = ([0, 0, 0, 0], config.port).into();
    let socket =
        Socket::new(Domain::IPV4, Type::STREAM, Some(Protocol::TCP)).map_err(ChannelError::Io)?;
    // Allows rebinding a port whose previous connection sits in TIME_WAIT
    // (channel reopen); a live listener on the port still fails the bind.
    socket.set_reuse_address(true).map_err(ChannelError::Io)?;
    // Accepted sockets inherit these, which matters for the receive window.
    apply_buffer_sizes(
        SockRef::from(&socket),
        config.send_buffer_bytes,
        config.recv_buffer_bytes,
    )
    .map_err(ChannelError::Io)?;
    socket.bind(&addr.into()).map_err(|e| match e.kind() {
        io::ErrorKind::AddrInUse => ChannelError::AddressInUse(config.port),
        _ => ChannelError::Io(e),
    })?;
    socket.listen(1).map_err(ChannelError::Io)?;
    Ok(socket)
}
