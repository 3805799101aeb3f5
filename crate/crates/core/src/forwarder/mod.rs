//! User-space relaying of frames between two paths.
//!
//! A relay runs two directional pumps. When both sides have the same width,
//! each channel of one side is paired with the channel at the same position
//! on the other side and frames are forwarded one by one; a striped message
//! keeps its layout. When the widths differ, each pump reassembles the
//! logical message (one data frame per source channel, lengths taken from
//! the headers) and stripes it again for the destination width.
//!
//! Barrier frames travel on the first channel of each side and are forwarded
//! unchanged. The relay ends as soon as either side closes; the remaining
//! channels are then closed.

pub mod daemon;

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{mpsc, Arc};
use std::thread;

use tracing::{debug, info};

use crate::api::{par_map, ChannelFailure, Error, Mpw};
use crate::config::{ChannelId, Path};
use crate::frame::FrameKind;
use crate::stripe::stripe_layout;
use crate::transport::{ChannelError, Direction, Receiver, Sender};

/// Default cap on a single relayed message.
pub const DEFAULT_MAX_MESSAGE: u64 = 1 << 30;

#[derive(Debug, Default)]
pub struct DirectionCounters {
    frames: AtomicU64,
    bytes: AtomicU64,
}

impl DirectionCounters {
    fn record(&self, frames: u64, bytes: u64) {
        self.frames.fetch_add(frames, Ordering::Relaxed);
        self.bytes.fetch_add(bytes, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> DirectionStats {
        DirectionStats {
            frames: self.frames.load(Ordering::Relaxed),
            bytes: self.bytes.load(Ordering::Relaxed),
        }
    }
}

/// Frames emitted and payload bytes carried in one direction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DirectionStats {
    pub frames: u64,
    pub bytes: u64,
}

/// Live counters of a relay, readable while it runs.
#[derive(Debug, Default)]
pub struct RelayStats {
    pub a_to_b: DirectionCounters,
    pub b_to_a: DirectionCounters,
    running: AtomicBool,
}

impl RelayStats {
    pub fn is_running(&self) -> bool {
        self.running.load(Ordering::Acquire)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    A,
    B,
}

impl Side {
    fn other(self) -> Side {
        match self {
            Side::A => Side::B,
            Side::B => Side::A,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelayReport {
    pub a_to_b: DirectionStats,
    pub b_to_a: DirectionStats,
    /// The side whose closing ended the relay, if the relay was not stopped
    /// from outside.
    pub closed_by: Option<Side>,
}

/// A configured relay between two disjoint paths.
#[derive(Debug)]
pub struct RelayPair {
    side_a: Path,
    side_b: Path,
    max_message: u64,
    stats: Arc<RelayStats>,
}

/// Forward all traffic between `side_a` and `side_b` until either side
/// closes.
pub fn relay(mpw: &Mpw, side_a: &Path, side_b: &Path) -> Result<RelayReport, Error> {
    RelayPair::new(side_a.clone(), side_b.clone())?.run(mpw)
}

/// How a single pump lane stopped.
enum LaneEnd {
    SourceClosed(Side),
    Failed(ChannelFailure),
}

impl RelayPair {
    pub fn new(side_a: Path, side_b: Path) -> Result<RelayPair, Error> {
        if side_a.overlaps(&side_b) {
            return Err(Error::OverlappingPaths);
        }
        Ok(RelayPair {
            side_a,
            side_b,
            max_message: DEFAULT_MAX_MESSAGE,
            stats: Arc::new(RelayStats::default()),
        })
    }

    pub fn with_max_message(mut self, bytes: u64) -> Self {
        self.max_message = bytes;
        self
    }

    pub fn stats(&self) -> Arc<RelayStats> {
        Arc::clone(&self.stats)
    }

    pub fn run(&self, mpw: &Mpw) -> Result<RelayReport, Error> {
        let a_rx = mpw.claim_receivers(&self.side_a)?;
        let a_tx = mpw.claim_senders(&self.side_a)?;
        let b_rx = mpw.claim_receivers(&self.side_b)?;
        let b_tx = mpw.claim_senders(&self.side_b)?;
        let stop = AtomicBool::new(false);
        self.stats.running.store(true, Ordering::Release);
        info!(a = ?self.side_a.channels(), b = ?self.side_b.channels(), "relay running");

        let ends = thread::scope(|s| {
            let (done_tx, done_rx) = mpsc::channel::<LaneEnd>();
            let mut lanes = 0;
            let pumps = [
                (a_rx, b_tx, Side::A, &self.stats.a_to_b),
                (b_rx, a_tx, Side::B, &self.stats.b_to_a),
            ];
            for (rx, tx, from, counters) in pumps {
                for lane in self.lanes(rx, tx) {
                    let done = done_tx.clone();
                    let stop = &stop;
                    lanes += 1;
                    s.spawn(move || {
                        let end = lane.run(from, counters, self.max_message, stop);
                        let _ = done.send(end);
                    });
                }
            }
            drop(done_tx);

            let mut ends = Vec::with_capacity(lanes);
            if let Ok(first) = done_rx.recv() {
                ends.push(first);
            }
            stop.store(true, Ordering::Release);
            for &id in self.side_a.channels().iter().chain(self.side_b.channels()) {
                if let Some(ch) = mpw.channel(id) {
                    ch.close();
                }
            }
            ends.extend(done_rx.iter());
            ends
        });
        self.stats.running.store(false, Ordering::Release);

        let report = RelayReport {
            a_to_b: self.stats.a_to_b.snapshot(),
            b_to_a: self.stats.b_to_a.snapshot(),
            closed_by: match ends.first() {
                Some(LaneEnd::SourceClosed(side)) => Some(*side),
                _ => None,
            },
        };
        debug!(?report, "relay finished");
        match ends.into_iter().next() {
            Some(LaneEnd::Failed(f)) => Err(Error::Channel(f)),
            _ => Ok(report),
        }
    }

    fn lanes<'c>(&self, rx: Vec<Receiver<'c>>, tx: Vec<Sender<'c>>) -> Vec<Lane<'c>> {
        if rx.len() == tx.len() {
            rx.into_iter()
                .zip(tx)
                .map(|(rx, tx)| Lane::Paired { rx, tx })
                .collect()
        } else {
            vec![Lane::Restripe { rx, tx }]
        }
    }
}

enum Lane<'c> {
    /// One source channel forwarded frame by frame to one destination.
    Paired { rx: Receiver<'c>, tx: Sender<'c> },
    /// Whole messages reassembled from all source channels and re-striped.
    Restripe {
        rx: Vec<Receiver<'c>>,
        tx: Vec<Sender<'c>>,
    },
}

fn failure(channel: ChannelId, direction: Direction, error: ChannelError) -> LaneEnd {
    LaneEnd::Failed(ChannelFailure {
        channel,
        direction,
        error,
    })
}

impl Lane<'_> {
    fn run(
        self,
        from: Side,
        counters: &DirectionCounters,
        max_message: u64,
        stop: &AtomicBool,
    ) -> LaneEnd {
        let end = match self {
            Lane::Paired { rx, tx } => pump_paired(rx, tx, from, counters, max_message),
            Lane::Restripe { rx, tx } => pump_restripe(rx, tx, from, counters, max_message),
        };
        match end {
            // Errors caused by our own shutdown are not failures.
            LaneEnd::Failed(_) if stop.load(Ordering::Acquire) => LaneEnd::SourceClosed(from),
            LaneEnd::Failed(f) if f.error.is_closed() => match f.direction {
                Direction::Recv => LaneEnd::SourceClosed(from),
                Direction::Send => LaneEnd::SourceClosed(from.other()),
            },
            other => other,
        }
    }
}

fn pump_paired(
    mut rx: Receiver<'_>,
    mut tx: Sender<'_>,
    from: Side,
    counters: &DirectionCounters,
    max_message: u64,
) -> LaneEnd {
    let src = rx.channel();
    let dst = tx.channel();
    let mut buf = Vec::new();
    loop {
        let header = match rx.header() {
            Ok(h) => h,
            Err(e) => return failure(src, Direction::Recv, e),
        };
        match header.kind {
            FrameKind::Close => return LaneEnd::SourceClosed(from),
            FrameKind::Data | FrameKind::Barrier => {}
            other => {
                let e = ChannelError::UnexpectedFrame {
                    expected: FrameKind::Data,
                    actual: other,
                };
                return failure(src, Direction::Recv, e);
            }
        }
        if header.payload_len > max_message {
            let e = ChannelError::SizeLimitExceeded {
                actual: header.payload_len,
                limit: max_message,
            };
            return failure(src, Direction::Recv, e);
        }
        buf.resize(header.payload_len as usize, 0);
        if let Err(e) = rx.payload(&mut buf) {
            return failure(src, Direction::Recv, e);
        }
        if let Err(e) = tx.send(header.kind, &buf) {
            return failure(dst, Direction::Send, e);
        }
        counters.record(1, header.payload_len);
    }
}

fn pump_restripe(
    mut rx: Vec<Receiver<'_>>,
    mut tx: Vec<Sender<'_>>,
    from: Side,
    counters: &DirectionCounters,
    max_message: u64,
) -> LaneEnd {
    let mut msg = Vec::new();
    loop {
        // The first channel decides what comes next: a barrier, a close, or
        // the first chunk of a message.
        let src0 = rx[0].channel();
        let header = match rx[0].header() {
            Ok(h) => h,
            Err(e) => return failure(src0, Direction::Recv, e),
        };
        match header.kind {
            FrameKind::Close => return LaneEnd::SourceClosed(from),
            FrameKind::Barrier => {
                if let Err(e) = tx[0].send(FrameKind::Barrier, &[]) {
                    return failure(tx[0].channel(), Direction::Send, e);
                }
                counters.record(1, 0);
                continue;
            }
            FrameKind::Data => {}
            other => {
                let e = ChannelError::UnexpectedFrame {
                    expected: FrameKind::Data,
                    actual: other,
                };
                return failure(src0, Direction::Recv, e);
            }
        }

        let (first, rest) = rx.split_at_mut(1);
        let rest_lens = par_map(rest.iter_mut().collect(), |r| {
            (r.channel(), r.data_header())
        });
        let mut lens = vec![header.payload_len];
        for (ch, len) in rest_lens {
            match len {
                Ok(n) => lens.push(n),
                Err(e) => return failure(ch, Direction::Recv, e),
            }
        }
        let total = lens.iter().fold(0u64, |a, &b| a.saturating_add(b));
        if total > max_message {
            let e = ChannelError::SizeLimitExceeded {
                actual: total,
                limit: max_message,
            };
            return failure(src0, Direction::Recv, e);
        }

        msg.clear();
        msg.resize(total as usize, 0);
        let mut slices = Vec::with_capacity(lens.len());
        let mut remaining = msg.as_mut_slice();
        for &len in &lens {
            let (head, tail) = std::mem::take(&mut remaining).split_at_mut(len as usize);
            slices.push(head);
            remaining = tail;
        }
        let jobs: Vec<_> = first
            .iter_mut()
            .chain(rest.iter_mut())
            .zip(slices)
            .collect();
        let reads = par_map(jobs, |(r, buf)| (r.channel(), r.payload(buf)));
        for (ch, r) in reads {
            if let Err(e) = r {
                return failure(ch, Direction::Recv, e);
            }
        }

        let layout = stripe_layout(msg.len(), tx.len());
        let jobs: Vec<_> = tx.iter_mut().zip(layout.split(&msg)).collect();
        let writes = par_map(jobs, |(t, part)| (t.channel(), t.send_data(part)));
        for (ch, r) in writes {
            if let Err(e) = r {
                return failure(ch, Direction::Send, e);
            }
        }
        counters.record(tx.len() as u64, total);
    }
}
