//! Collective message passing over paths of channels.
//!
//! Every operation resolves its [`Path`], claims the send and/or receive side
//! of each channel, then runs one worker thread per channel transfer and
//! joins them all before returning. Failures are reported per channel; there
//! is no retry at this layer.

use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;

use thiserror::Error;
use tracing::debug;

use crate::config::{ChannelConfig, ChannelId, ConfigError, Path};
use crate::frame::FrameKind;
use crate::stripe::stripe_layout;
use crate::transport::{Channel, ChannelError, Direction, Link, Receiver, Sender};

/// A transfer failure attributed to one channel.
#[derive(Debug)]
pub struct ChannelFailure {
    pub channel: ChannelId,
    pub direction: Direction,
    pub error: ChannelError,
}

impl fmt::Display for ChannelFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dir = match self.direction {
            Direction::Send => "send",
            Direction::Recv => "recv",
        };
        write!(f, "channel {} {dir}: {}", self.channel, self.error)
    }
}

fn list(failures: &[ChannelFailure]) -> String {
    failures
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(#[from] ConfigError),
    #[error("channel {channel} failed to open: {source}")]
    InitFailed {
        channel: ChannelId,
        #[source]
        source: ChannelError,
    },
    #[error("the instance has been finalized")]
    Finalized,
    #[error("no channel {0}")]
    UnknownChannel(ChannelId),
    #[error("send and receive paths share channels")]
    OverlappingPaths,
    #[error("{buffers} buffers given for {channels} channels")]
    ArityMismatch { buffers: usize, channels: usize },
    #[error("incoming message of {actual} bytes exceeds the {limit} byte limit")]
    SizeLimitExceeded { actual: u64, limit: u64 },
    #[error("{0}")]
    Channel(ChannelFailure),
    #[error("{} channels failed: {}", .0.len(), list(.0))]
    Collective(Vec<ChannelFailure>),
}

impl Error {
    /// Per-channel failures carried by this error, if any.
    pub fn failures(&self) -> &[ChannelFailure] {
        match self {
            Error::Channel(f) => std::slice::from_ref(f),
            Error::Collective(fs) => fs,
            _ => &[],
        }
    }

    /// True when any channel failed because it (or its peer) was closed.
    pub fn is_closed(&self) -> bool {
        self.failures().iter().any(|f| f.error.is_closed())
    }

    fn from_failures(mut failures: Vec<ChannelFailure>) -> Error {
        if failures.len() == 1 {
            Error::Channel(failures.pop().unwrap())
        } else {
            Error::Collective(failures)
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Run `f` on every item, one scoped thread per item, and collect results
/// in order. A single item runs on the calling thread.
pub(crate) fn par_map<I, T, F>(items: Vec<I>, f: F) -> Vec<T>
where
    I: Send,
    T: Send,
    F: Fn(I) -> T + Sync,
{
    if items.len() <= 1 {
        return items.into_iter().map(f).collect();
    }
    let f = &f;
    thread::scope(|s| {
        let handles: Vec<_> = items
            .into_iter()
            .map(|item| s.spawn(move || f(item)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|p| std::panic::resume_unwind(p)))
            .collect()
    })
}

type Outcome = (ChannelId, Direction, std::result::Result<(), ChannelError>);

fn check(outcomes: impl IntoIterator<Item = Outcome>) -> Result<()> {
    let failures: Vec<ChannelFailure> = outcomes
        .into_iter()
        .filter_map(|(channel, direction, r)| {
            r.err().map(|error| ChannelFailure {
                channel,
                direction,
                error,
            })
        })
        .collect();
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Error::from_failures(failures))
    }
}

/// One channel-side unit of work inside a collective.
enum Transfer<'c, 'b> {
    Send(Sender<'c>, &'b [u8]),
    Recv(Receiver<'c>, &'b mut [u8]),
}

impl Transfer<'_, '_> {
    fn run(self) -> Outcome {
        match self {
            Transfer::Send(mut tx, buf) => (tx.channel(), Direction::Send, tx.send_data(buf)),
            Transfer::Recv(mut rx, buf) => (rx.channel(), Direction::Recv, rx.recv_exact(buf)),
        }
    }
}

fn run_transfers(transfers: Vec<Transfer<'_, '_>>) -> Result<()> {
    check(par_map(transfers, Transfer::run))
}

/// A library instance: a table of channels plus lifecycle state.
pub struct Mpw {
    channels: Vec<Channel>,
    finalized: AtomicBool,
}

impl fmt::Debug for Mpw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Mpw")
            .field("channels", &self.channels)
            .field("finalized", &self.finalized.load(Ordering::Relaxed))
            .finish()
    }
}

impl Mpw {
    /// Open every configured channel concurrently over TCP. Channel `i` gets
    /// id `i`. If any channel fails, the others are abandoned and closed and
    /// the first failure is returned.
    pub fn init(configs: Vec<ChannelConfig>) -> Result<Mpw> {
        Mpw::init_cancellable(configs, &AtomicBool::new(false))
    }

    /// [`Mpw::init`] that can be abandoned from another thread by setting
    /// `cancel`.
    pub fn init_cancellable(configs: Vec<ChannelConfig>, cancel: &AtomicBool) -> Result<Mpw> {
        let channels = Mpw::configure(configs)?;
        Mpw::open_all(channels, cancel, |ch, cancel| ch.open_cancellable(cancel))
    }

    /// Like [`Mpw::init`] but over caller-supplied, already connected links
    /// (for example from [`crate::testkit`]). Only the handshake runs.
    pub fn from_links(links: Vec<(ChannelConfig, Arc<dyn Link>)>) -> Result<Mpw> {
        let (configs, links): (Vec<_>, Vec<_>) = links.into_iter().unzip();
        let channels = Mpw::configure(configs)?;
        let mut paired: Vec<_> = channels.into_iter().zip(links).collect();
        let results = par_map(paired.iter_mut().collect(), |(ch, link)| {
            ch.open_with(Arc::clone(link))
        });
        let channels = paired.into_iter().map(|(c, _)| c).collect();
        Mpw::finish_open(channels, results)
    }

    fn configure(configs: Vec<ChannelConfig>) -> Result<Vec<Channel>> {
        if configs.is_empty() {
            return Err(ConfigError::Empty.into());
        }
        configs
            .into_iter()
            .enumerate()
            .map(|(i, c)| {
                c.validate()?;
                Ok(Channel::new(ChannelId(i), c).expect("validated"))
            })
            .collect()
    }

    fn open_all<F>(mut channels: Vec<Channel>, external: &AtomicBool, open: F) -> Result<Mpw>
    where
        F: Fn(&mut Channel, &AtomicBool) -> std::result::Result<(), ChannelError> + Sync,
    {
        let cancel = AtomicBool::new(false);
        let done = AtomicBool::new(false);
        let results = thread::scope(|s| {
            // Forwards an external cancel request to the per-channel flag.
            s.spawn(|| {
                while !done.load(Ordering::Acquire) {
                    if external.load(Ordering::Acquire) {
                        cancel.store(true, Ordering::Release);
                        break;
                    }
                    thread::sleep(std::time::Duration::from_millis(10));
                }
            });
            let results = par_map(channels.iter_mut().collect(), |ch| {
                let r = open(ch, &cancel);
                if r.is_err() {
                    cancel.store(true, Ordering::Release);
                }
                r
            });
            done.store(true, Ordering::Release);
            results
        });
        Mpw::finish_open(channels, results)
    }

    fn finish_open(
        channels: Vec<Channel>,
        results: Vec<std::result::Result<(), ChannelError>>,
    ) -> Result<Mpw> {
        let failure = results
            .into_iter()
            .enumerate()
            .filter_map(|(i, r)| r.err().map(|e| (i, e)))
            // Channels abandoned because of another failure are not the cause.
            .min_by_key(|(i, e)| (matches!(e, ChannelError::Cancelled), *i));
        let mpw = Mpw {
            channels,
            finalized: AtomicBool::new(false),
        };
        match failure {
            None => Ok(mpw),
            Some((i, source)) => {
                mpw.finalize();
                Err(Error::InitFailed {
                    channel: ChannelId(i),
                    source,
                })
            }
        }
    }

    /// Close every channel. Idempotent; later operations fail with
    /// [`Error::Finalized`].
    pub fn finalize(&self) {
        if self.finalized.swap(true, Ordering::AcqRel) {
            return;
        }
        for ch in &self.channels {
            ch.close();
        }
        debug!(channels = self.channels.len(), "finalized");
    }

    pub fn is_finalized(&self) -> bool {
        self.finalized.load(Ordering::Acquire)
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn channel(&self, id: ChannelId) -> Option<&Channel> {
        self.channels.get(id.0)
    }

    /// Path over every channel of this instance, in id order.
    pub fn all_channels(&self) -> Path {
        Path::of(0..self.channels.len()).expect("an instance has at least one channel")
    }

    fn ensure_ready(&self) -> Result<()> {
        if self.is_finalized() {
            Err(Error::Finalized)
        } else {
            Ok(())
        }
    }

    fn resolve(&self, path: &Path) -> Result<Vec<&Channel>> {
        self.ensure_ready()?;
        path.channels()
            .iter()
            .map(|&id| self.channels.get(id.0).ok_or(Error::UnknownChannel(id)))
            .collect()
    }

    pub(crate) fn claim_senders(&self, path: &Path) -> Result<Vec<Sender<'_>>> {
        let chans = self.resolve(path)?;
        let claims = chans.iter().map(|c| (c.id(), c.sender()));
        collect_claims(claims, Direction::Send)
    }

    pub(crate) fn claim_receivers(&self, path: &Path) -> Result<Vec<Receiver<'_>>> {
        let chans = self.resolve(path)?;
        let claims = chans.iter().map(|c| (c.id(), c.receiver()));
        collect_claims(claims, Direction::Recv)
    }

    /// Exchange a barrier frame with the peer on the first channel of
    /// `path`. Returns once our barrier is sent and the peer's has arrived.
    pub fn barrier(&self, path: &Path) -> Result<()> {
        let first = Path::new([path.first()])?;
        let mut tx = self.claim_senders(&first)?.pop().unwrap();
        let mut rx = self.claim_receivers(&first)?.pop().unwrap();
        let channel = tx.channel();
        let fail = |direction, error| {
            Error::Channel(ChannelFailure {
                channel,
                direction,
                error,
            })
        };
        tx.send(FrameKind::Barrier, &[])
            .map_err(|e| fail(Direction::Send, e))?;
        rx.recv_barrier().map_err(|e| fail(Direction::Recv, e))
    }

    /// Stripe `buf` evenly over `path`, one data frame per channel.
    pub fn send(&self, buf: &[u8], path: &Path) -> Result<()> {
        let senders = self.claim_senders(path)?;
        let layout = stripe_layout(buf.len(), senders.len());
        let transfers = senders
            .into_iter()
            .zip(layout.split(buf))
            .map(|(tx, part)| Transfer::Send(tx, part))
            .collect();
        run_transfers(transfers)
    }

    /// Receive a message of `expected_len` bytes striped over `path`.
    pub fn recv(&self, expected_len: usize, path: &Path) -> Result<Vec<u8>> {
        let mut out = vec![0u8; expected_len];
        self.recv_into(&mut out, path)?;
        Ok(out)
    }

    /// Receive a striped message into `out`; its length is the expected
    /// message size and each channel's chunk is checked against the layout.
    pub fn recv_into(&self, out: &mut [u8], path: &Path) -> Result<()> {
        let receivers = self.claim_receivers(path)?;
        let layout = stripe_layout(out.len(), receivers.len());
        let transfers = receivers
            .into_iter()
            .zip(layout.split_mut(out))
            .map(|(rx, part)| Transfer::Recv(rx, part))
            .collect();
        run_transfers(transfers)
    }

    /// Full-duplex exchange: send `send_buf` and receive `recv_len` bytes on
    /// the same path at the same time.
    pub fn send_recv(&self, send_buf: &[u8], recv_len: usize, path: &Path) -> Result<Vec<u8>> {
        let mut out = vec![0u8; recv_len];
        self.send_recv_into(send_buf, &mut out, path)?;
        Ok(out)
    }

    pub fn send_recv_into(&self, send_buf: &[u8], out: &mut [u8], path: &Path) -> Result<()> {
        self.exchange(send_buf, path, out, path)
    }

    /// Send over `send_path` while receiving over `recv_path`; the two paths
    /// must not share channels.
    pub fn cycle(
        &self,
        send_buf: &[u8],
        send_path: &Path,
        recv_len: usize,
        recv_path: &Path,
    ) -> Result<Vec<u8>> {
        let mut out = vec![0u8; recv_len];
        self.cycle_into(send_buf, send_path, &mut out, recv_path)?;
        Ok(out)
    }

    pub fn cycle_into(
        &self,
        send_buf: &[u8],
        send_path: &Path,
        out: &mut [u8],
        recv_path: &Path,
    ) -> Result<()> {
        if send_path.overlaps(recv_path) {
            return Err(Error::OverlappingPaths);
        }
        self.exchange(send_buf, send_path, out, recv_path)
    }

    fn exchange(
        &self,
        send_buf: &[u8],
        send_path: &Path,
        out: &mut [u8],
        recv_path: &Path,
    ) -> Result<()> {
        let senders = self.claim_senders(send_path)?;
        let receivers = self.claim_receivers(recv_path)?;
        let send_layout = stripe_layout(send_buf.len(), senders.len());
        let recv_layout = stripe_layout(out.len(), receivers.len());
        let mut transfers: Vec<Transfer> = senders
            .into_iter()
            .zip(send_layout.split(send_buf))
            .map(|(tx, part)| Transfer::Send(tx, part))
            .collect();
        transfers.extend(
            receivers
                .into_iter()
                .zip(recv_layout.split_mut(out))
                .map(|(rx, part)| Transfer::Recv(rx, part)),
        );
        run_transfers(transfers)
    }

    /// Exchange where the receiver does not know the incoming size: chunk
    /// lengths come from the frame headers and the chunks are concatenated in
    /// path order. At most `max_recv` bytes are accepted.
    pub fn dsend_recv(&self, send_buf: &[u8], max_recv: usize, path: &Path) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.dsend_recv_into(send_buf, &mut out, max_recv, path)?;
        Ok(out)
    }

    /// [`Mpw::dsend_recv`] into a caller-owned buffer. `out` is cleared and
    /// resized to the incoming length; its capacity is kept, so a buffer
    /// reused across calls stops allocating once it has grown to the
    /// largest message seen.
    pub fn dsend_recv_into(
        &self,
        send_buf: &[u8],
        out: &mut Vec<u8>,
        max_recv: usize,
        path: &Path,
    ) -> Result<()> {
        let senders = self.claim_senders(path)?;
        let receivers = self.claim_receivers(path)?;
        let layout = stripe_layout(send_buf.len(), senders.len());
        let sends: Vec<Transfer> = senders
            .into_iter()
            .zip(layout.split(send_buf))
            .map(|(tx, part)| Transfer::Send(tx, part))
            .collect();
        thread::scope(|s| {
            let sending = s.spawn(|| par_map(sends, Transfer::run));
            let received = recv_unknown(receivers, out, max_recv);
            let sent = sending
                .join()
                .unwrap_or_else(|p| std::panic::resume_unwind(p));
            match (check(sent), received) {
                (Ok(()), r) => r,
                (Err(e), Ok(())) => Err(e),
                (Err(se), Err(re)) => {
                    let mut all: Vec<ChannelFailure> = Vec::new();
                    for e in [se, re] {
                        match e {
                            Error::Channel(f) => all.push(f),
                            Error::Collective(fs) => all.extend(fs),
                            other => return Err(other),
                        }
                    }
                    Err(Error::from_failures(all))
                }
            }
        })
    }

    /// Scatter: `bufs[i]` travels whole, as one frame, on channel `path[i]`.
    pub fn p_send(&self, bufs: &[&[u8]], path: &Path) -> Result<()> {
        check_arity(bufs.len(), path)?;
        let transfers = self
            .claim_senders(path)?
            .into_iter()
            .zip(bufs)
            .map(|(tx, b)| Transfer::Send(tx, b))
            .collect();
        run_transfers(transfers)
    }

    /// Gather: receive `lens[i]` bytes from channel `path[i]`.
    pub fn p_recv(&self, lens: &[usize], path: &Path) -> Result<Vec<Vec<u8>>> {
        check_arity(lens.len(), path)?;
        let mut outs: Vec<Vec<u8>> = lens.iter().map(|&n| vec![0u8; n]).collect();
        let transfers = self
            .claim_receivers(path)?
            .into_iter()
            .zip(outs.iter_mut())
            .map(|(rx, b)| Transfer::Recv(rx, b.as_mut_slice()))
            .collect();
        run_transfers(transfers)?;
        Ok(outs)
    }

    /// Per-channel full-duplex exchange.
    pub fn p_send_recv(
        &self,
        bufs: &[&[u8]],
        recv_lens: &[usize],
        path: &Path,
    ) -> Result<Vec<Vec<u8>>> {
        check_arity(bufs.len(), path)?;
        check_arity(recv_lens.len(), path)?;
        let senders = self.claim_senders(path)?;
        let receivers = self.claim_receivers(path)?;
        let mut outs: Vec<Vec<u8>> = recv_lens.iter().map(|&n| vec![0u8; n]).collect();
        let mut transfers: Vec<Transfer> = senders
            .into_iter()
            .zip(bufs)
            .map(|(tx, b)| Transfer::Send(tx, b))
            .collect();
        transfers.extend(
            receivers
                .into_iter()
                .zip(outs.iter_mut())
                .map(|(rx, b)| Transfer::Recv(rx, b.as_mut_slice())),
        );
        run_transfers(transfers)?;
        Ok(outs)
    }

    /// Close channel `id` if open and reopen it with `config`. The peer has
    /// to reopen its end as well.
    pub fn reopen_channel(&mut self, id: ChannelId, config: ChannelConfig) -> Result<()> {
        self.ensure_ready()?;
        let ch = self
            .channels
            .get_mut(id.0)
            .ok_or(Error::UnknownChannel(id))?;
        ch.close();
        ch.reconfigure(config).map_err(|source| Error::InitFailed {
            channel: id,
            source,
        })?;
        ch.open().map_err(|source| Error::InitFailed {
            channel: id,
            source,
        })
    }
}

impl Drop for Mpw {
    fn drop(&mut self) {
        self.finalize();
    }
}

fn check_arity(buffers: usize, path: &Path) -> Result<()> {
    if buffers != path.width() {
        return Err(Error::ArityMismatch {
            buffers,
            channels: path.width(),
        });
    }
    Ok(())
}

fn collect_claims<T>(
    claims: impl Iterator<Item = (ChannelId, std::result::Result<T, ChannelError>)>,
    direction: Direction,
) -> Result<Vec<T>> {
    let mut ok = Vec::new();
    let mut failures = Vec::new();
    for (channel, r) in claims {
        match r {
            Ok(t) => ok.push(t),
            Err(error) => failures.push(ChannelFailure {
                channel,
                direction,
                error,
            }),
        }
    }
    if failures.is_empty() {
        Ok(ok)
    } else {
        Err(Error::from_failures(failures))
    }
}

/// Receive one data frame of unknown length per channel, enforcing a total
/// of at most `max_recv` bytes. Headers are read first on every channel;
/// only when the total fits is `out` sized and filled. Otherwise every
/// announced payload is drained so the channels stay frame-aligned.
fn recv_unknown(receivers: Vec<Receiver<'_>>, out: &mut Vec<u8>, max_recv: usize) -> Result<()> {
    let mut receivers = receivers;
    let headers = par_map(receivers.iter_mut().collect(), |rx| {
        (rx.channel(), rx.data_header())
    });

    let mut failures = Vec::new();
    let mut lens = Vec::with_capacity(headers.len());
    for (channel, h) in headers {
        match h {
            Ok(len) => lens.push(Some(len)),
            Err(error) => {
                lens.push(None);
                failures.push(ChannelFailure {
                    channel,
                    direction: Direction::Recv,
                    error,
                });
            }
        }
    }
    let total: u64 = lens
        .iter()
        .flatten()
        .fold(0u64, |a, &b| a.saturating_add(b));
    let over_limit = total > max_recv as u64;

    if !failures.is_empty() || over_limit {
        let drained = par_map(
            receivers.iter_mut().zip(lens).collect(),
            |(rx, len)| -> Outcome {
                let r = match len {
                    Some(n) => rx.drain(n),
                    None => Ok(()),
                };
                (rx.channel(), Direction::Recv, r)
            },
        );
        if !failures.is_empty() {
            return Err(Error::from_failures(failures));
        }
        check(drained)?;
        return Err(Error::SizeLimitExceeded {
            actual: total,
            limit: max_recv as u64,
        });
    }

    out.clear();
    out.resize(total as usize, 0);
    let mut rest = out.as_mut_slice();
    let mut parts = Vec::with_capacity(receivers.len());
    for (rx, len) in receivers.iter_mut().zip(lens) {
        let (head, tail) = std::mem::take(&mut rest).split_at_mut(len.unwrap() as usize);
        parts.push((rx, head));
        rest = tail;
    }
    check(par_map(parts, |(rx, buf)| -> Outcome {
        (rx.channel(), Direction::Recv, rx.payload(buf))
    }))
}
