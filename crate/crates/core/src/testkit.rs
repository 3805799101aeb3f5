//! In-process links with injectable impairments.
//!
//! [`impaired_pair`] returns two connected [`Link`] endpoints backed by a
//! shared in-memory wire. Impairments act on the byte stream rather than on
//! packets: a fixed one-way latency, a bandwidth cap shared by both
//! directions of the pair, stalls scheduled at byte offsets, and a hard
//! disconnect after a byte budget. Payload content and ordering are
//! deterministic; only timing depends on the wall clock.

use std::collections::VecDeque;
use std::io;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use thiserror::Error;

use crate::api::{Error, Mpw};
use crate::config::{ChannelConfig, Path};
use crate::transport::{BufferSizes, Link};

/// Writes are cut into segments of this size so capped and delayed delivery
/// is progressive.
const SEGMENT: usize = 64 * 1024;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stall {
    /// Byte offset in the written stream (per direction) at which delivery
    /// pauses.
    pub at_byte: u64,
    pub duration: Duration,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImpairmentProfile {
    pub one_way_latency: Duration,
    /// Serialization rate of the pair, shared by both directions.
    pub per_stream_cap_bits_per_sec: Option<u64>,
    pub stall_schedule: Vec<Stall>,
    /// Total bytes (both directions) after which the pair is torn down.
    pub disconnect_after_bytes: Option<u64>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProfileError {
    #[error("latency must be a finite, non-negative number of milliseconds")]
    InvalidLatency,
    #[error("bandwidth cap must be positive")]
    ZeroCap,
    #[error("stall offsets must be strictly increasing")]
    UnorderedStalls,
}

impl ImpairmentProfile {
    pub fn plain() -> ImpairmentProfile {
        ImpairmentProfile::default()
    }

    pub fn with_latency_ms(mut self, ms: f64) -> Result<Self, ProfileError> {
        if !ms.is_finite() || ms < 0.0 {
            return Err(ProfileError::InvalidLatency);
        }
        self.one_way_latency = Duration::from_secs_f64(ms / 1000.0);
        Ok(self)
    }

    pub fn with_cap(mut self, bits_per_sec: u64) -> Self {
        self.per_stream_cap_bits_per_sec = Some(bits_per_sec);
        self
    }

    pub fn with_stall(mut self, at_byte: u64, duration: Duration) -> Self {
        self.stall_schedule.push(Stall { at_byte, duration });
        self
    }

    pub fn with_disconnect_after(mut self, bytes: u64) -> Self {
        self.disconnect_after_bytes = Some(bytes);
        self
    }

    pub fn validate(&self) -> Result<(), ProfileError> {
        if self.per_stream_cap_bits_per_sec == Some(0) {
            return Err(ProfileError::ZeroCap);
        }
        if self
            .stall_schedule
            .windows(2)
            .any(|w| w[0].at_byte >= w[1].at_byte)
        {
            return Err(ProfileError::UnorderedStalls);
        }
        Ok(())
    }
}

struct Segment {
    data: Vec<u8>,
    pos: usize,
    deliver_at: Instant,
}

#[derive(Default)]
struct Direction {
    queue: VecDeque<Segment>,
    written: u64,
    next_stall: usize,
    stalled_until: Option<Instant>,
    /// Writer side closed: reader drains what is queued, then sees EOF.
    writer_closed: bool,
    /// Reader side closed: further writes fail.
    reader_closed: bool,
}

struct WireState {
    dirs: [Direction; 2],
    link_free_at: Instant,
    total_written: u64,
    disconnected: bool,
}

struct Wire {
    profile: ImpairmentProfile,
    state: Mutex<WireState>,
    cond: Condvar,
}

/// One end of an in-process impaired link.
pub struct TestLink {
    wire: Arc<Wire>,
    side: usize,
    closed: AtomicBool,
    read_timeout: Mutex<Option<Duration>>,
}

/// Build two connected endpoints sharing one impaired wire.
///
/// # Panics
///
/// Panics if the profile does not validate.
pub fn impaired_pair(profile: ImpairmentProfile) -> (TestLink, TestLink) {
    profile.validate().expect("invalid impairment profile");
    let wire = Arc::new(Wire {
        profile,
        state: Mutex::new(WireState {
            dirs: [Direction::default(), Direction::default()],
            link_free_at: Instant::now(),
            total_written: 0,
            disconnected: false,
        }),
        cond: Condvar::new(),
    });
    let end = |side| TestLink {
        wire: Arc::clone(&wire),
        side,
        closed: AtomicBool::new(false),
        read_timeout: Mutex::new(None),
    };
    (end(0), end(1))
}

/// An unimpaired in-process pipe.
pub fn pipe() -> (TestLink, TestLink) {
    impaired_pair(ImpairmentProfile::plain())
}

fn serialization_time(bytes: usize, bits_per_sec: u64) -> Duration {
    Duration::from_secs_f64(bytes as f64 * 8.0 / bits_per_sec as f64)
}

impl TestLink {
    fn outbound(&self) -> usize {
        self.side
    }

    fn inbound(&self) -> usize {
        1 - self.side
    }

    fn disconnected_error() -> io::Error {
        io::Error::new(io::ErrorKind::UnexpectedEof, "emulated disconnect")
    }

    /// Queue one segment; returns when the emulated wire has finished
    /// serializing it.
    fn write_segment(&self, chunk: &[u8]) -> io::Result<()> {
        let profile = &self.wire.profile;
        let tx_end = {
            let mut st = self.wire.state.lock();
            if self.closed.load(Ordering::Acquire) {
                return Err(crate::transport::closed_error());
            }
            if st.disconnected {
                return Err(io::Error::new(
                    io::ErrorKind::NotConnected,
                    "emulated disconnect",
                ));
            }
            if st.dirs[self.outbound()].reader_closed {
                return Err(io::Error::new(io::ErrorKind::BrokenPipe, "peer closed"));
            }
            if let Some(limit) = profile.disconnect_after_bytes {
                if st.total_written + chunk.len() as u64 > limit {
                    st.disconnected = true;
                    for d in &mut st.dirs {
                        d.queue.clear();
                    }
                    self.wire.cond.notify_all();
                    return Err(io::Error::new(
                        io::ErrorKind::NotConnected,
                        "emulated disconnect",
                    ));
                }
            }
            let now = Instant::now();
            let link_free_at = st.link_free_at;
            let dir = &mut st.dirs[self.outbound()];
            let mut start = now.max(link_free_at);
            if let Some(until) = dir.stalled_until {
                start = start.max(until);
            }
            let end_offset = dir.written + chunk.len() as u64;
            while let Some(stall) = profile.stall_schedule.get(dir.next_stall) {
                if stall.at_byte >= end_offset {
                    break;
                }
                start += stall.duration;
                dir.stalled_until = Some(start);
                dir.next_stall += 1;
            }
            let tx_end = match profile.per_stream_cap_bits_per_sec {
                Some(cap) => start + serialization_time(chunk.len(), cap),
                None => start,
            };
            dir.written = end_offset;
            dir.queue.push_back(Segment {
                data: chunk.to_vec(),
                pos: 0,
                deliver_at: tx_end + profile.one_way_latency,
            });
            if profile.per_stream_cap_bits_per_sec.is_some() {
                st.link_free_at = tx_end;
            }
            st.total_written += chunk.len() as u64;
            self.wire.cond.notify_all();
            tx_end
        };
        let now = Instant::now();
        if tx_end > now {
            thread::sleep(tx_end - now);
        }
        Ok(())
    }
}

impl Link for TestLink {
    fn write_all(&self, buf: &[u8]) -> io::Result<()> {
        for chunk in buf.chunks(SEGMENT) {
            self.write_segment(chunk)?;
        }
        Ok(())
    }

    fn read_exact(&self, buf: &mut [u8]) -> io::Result<()> {
        let deadline = self.read_timeout.lock().map(|t| Instant::now() + t);
        let mut filled = 0;
        let mut st = self.wire.state.lock();
        while filled < buf.len() {
            if self.closed.load(Ordering::Acquire) {
                return Err(crate::transport::closed_error());
            }
            if st.disconnected {
                return Err(TestLink::disconnected_error());
            }
            let now = Instant::now();
            let dir = &mut st.dirs[self.inbound()];
            let wake_at = match dir.queue.front_mut() {
                Some(seg) if seg.deliver_at <= now => {
                    let n = (seg.data.len() - seg.pos).min(buf.len() - filled);
                    buf[filled..filled + n].copy_from_slice(&seg.data[seg.pos..seg.pos + n]);
                    seg.pos += n;
                    filled += n;
                    if seg.pos == seg.data.len() {
                        dir.queue.pop_front();
                    }
                    continue;
                }
                Some(seg) => Some(seg.deliver_at),
                None if dir.writer_closed => {
                    return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "peer closed"))
                }
                None => None,
            };
            let wake_at = match (wake_at, deadline) {
                (Some(w), Some(d)) => Some(w.min(d)),
                (w, d) => w.or(d),
            };
            match wake_at {
                Some(t) => {
                    if deadline.is_some_and(|d| d <= now) {
                        return Err(io::Error::new(io::ErrorKind::TimedOut, "read timed out"));
                    }
                    self.wire.cond.wait_until(&mut st, t);
                }
                None => self.wire.cond.wait(&mut st),
            }
        }
        Ok(())
    }

    fn close(&self) {
        if self.closed.swap(true, Ordering::AcqRel) {
            return;
        }
        let mut st = self.wire.state.lock();
        let (out, inb) = (self.outbound(), self.inbound());
        st.dirs[out].writer_closed = true;
        st.dirs[inb].reader_closed = true;
        st.dirs[inb].queue.clear();
        self.wire.cond.notify_all();
    }

    fn set_buffer_sizes(
        &self,
        send: Option<usize>,
        recv: Option<usize>,
    ) -> io::Result<BufferSizes> {
        Ok(BufferSizes {
            requested_send: send,
            requested_recv: recv,
            granted_send: send.unwrap_or(0),
            granted_recv: recv.unwrap_or(0),
        })
    }

    fn peer_description(&self) -> String {
        format!("testkit:{}", self.inbound())
    }

    fn set_read_timeout(&self, timeout: Option<Duration>) -> io::Result<()> {
        *self.read_timeout.lock() = timeout;
        Ok(())
    }
}

impl Drop for TestLink {
    fn drop(&mut self) {
        self.close();
    }
}

/// Configs used for the two ends of in-process channel `i`. The ports are
/// never bound; they only need to validate.
fn pair_configs(i: usize) -> (ChannelConfig, ChannelConfig) {
    let port = 1 + i as u16;
    (
        ChannelConfig::connect("testkit", port).with_timeout_ms(10_000),
        ChannelConfig::accept(port).with_timeout_ms(10_000),
    )
}

/// Two library instances joined by one impaired link per profile. Channel
/// `i` of the left instance talks to channel `i` of the right one.
pub fn mpw_pair(profiles: &[ImpairmentProfile]) -> Result<(Mpw, Mpw), Error> {
    let mut left = Vec::with_capacity(profiles.len());
    let mut right = Vec::with_capacity(profiles.len());
    for (i, p) in profiles.iter().enumerate() {
        let (a, b) = impaired_pair(p.clone());
        let (ca, cb) = pair_configs(i);
        left.push((ca, Arc::new(a) as Arc<dyn Link>));
        right.push((cb, Arc::new(b) as Arc<dyn Link>));
    }
    thread::scope(|s| {
        let l = s.spawn(|| Mpw::from_links(left));
        let r = Mpw::from_links(right);
        let l = l.join().expect("handshake thread panicked");
        Ok((l?, r?))
    })
}

/// [`mpw_pair`] with `n` identical profiles.
pub fn uniform_mpw_pair(n: usize, profile: &ImpairmentProfile) -> Result<(Mpw, Mpw), Error> {
    mpw_pair(&vec![profile.clone(); n])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingOutcome {
    pub streams: usize,
    pub msg_bytes: usize,
    pub elapsed: Duration,
    /// Both directions of the exchange counted: `2 * msg_bytes * 8 / elapsed`.
    pub aggregate_bits_per_sec: f64,
    /// Set for an empty message, where no rate can be measured.
    pub degenerate: bool,
}

/// Exchange `msg_bytes` in each direction over `n_streams` channels, each
/// an impaired link capped at `cap_bits_per_sec`, and report the aggregate
/// throughput.
pub fn capped_scaling_scenario(
    n_streams: usize,
    cap_bits_per_sec: u64,
    msg_bytes: usize,
) -> Result<ScalingOutcome, Error> {
    assert!(n_streams >= 1, "need at least one stream");
    let profile = ImpairmentProfile::plain().with_cap(cap_bits_per_sec);
    let (a, b) = uniform_mpw_pair(n_streams, &profile)?;
    let path = Path::of(0..n_streams)?;
    let out = vec![0x5a; msg_bytes];
    let back = vec![0xa5; msg_bytes];
    let start = Instant::now();
    thread::scope(|s| {
        let peer = s.spawn(|| b.send_recv(&back, msg_bytes, &path));
        let got = a.send_recv(&out, msg_bytes, &path)?;
        peer.join().expect("peer thread panicked")?;
        debug_assert_eq!(got, back);
        Ok::<_, Error>(())
    })?;
    let elapsed = start.elapsed();
    let degenerate = msg_bytes == 0;
    let aggregate_bits_per_sec = if degenerate {
        0.0
    } else {
        2.0 * msg_bytes as f64 * 8.0 / elapsed.as_secs_f64()
    };
    Ok(ScalingOutcome {
        streams: n_streams,
        msg_bytes,
        elapsed,
        aggregate_bits_per_sec,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_pipe_round_trip() {
        let (a, b) = pipe();
        a.write_all(b"hello world").unwrap();
        let mut buf = [0u8; 11];
        b.read_exact(&mut buf).unwrap();
        assert_eq!(&buf, b"hello world");
        b.write_all(b"back").unwrap();
        let mut buf = [0u8; 4];
        a.read_exact(&mut buf).unwrap();
        assert_eq!(&buf, b"back");
    }

    #[test]
    fn reads_span_segments() {
        let (a, b) = pipe();
        let data: Vec<u8> = (0..200_000u32).map(|i| (i % 251) as u8).collect();
        a.write_all(&data).unwrap();
        let mut got = vec![0u8; data.len()];
        b.read_exact(&mut got[..1000]).unwrap();
        b.read_exact(&mut got[1000..]).unwrap();
        assert_eq!(got, data);
    }

    #[test]
    fn latency_delays_delivery() {
        let p = ImpairmentProfile::plain().with_latency_ms(30.0).unwrap();
        let (a, b) = impaired_pair(p);
        let start = Instant::now();
        a.write_all(b"x").unwrap();
        let mut buf = [0u8; 1];
        b.read_exact(&mut buf).unwrap();
        assert!(start.elapsed() >= Duration::from_millis(30));
    }

    #[test]
    fn cap_limits_rate() {
        // 1 MB at 40 Mbit/s = 0.2 s
        let (a, b) = impaired_pair(ImpairmentProfile::plain().with_cap(40_000_000));
        let data = vec![1u8; 1_000_000];
        let start = Instant::now();
        let t = thread::spawn(move || {
            let mut buf = vec![0u8; 1_000_000];
            b.read_exact(&mut buf).unwrap();
        });
        a.write_all(&data).unwrap();
        t.join().unwrap();
        let el = start.elapsed().as_secs_f64();
        assert!((0.19..0.3).contains(&el), "{el}");
    }

    #[test]
    fn stall_pauses_delivery() {
        let p = ImpairmentProfile::plain().with_stall(100, Duration::from_millis(150));
        let (a, b) = impaired_pair(p);
        let start = Instant::now();
        a.write_all(&[0u8; 50]).unwrap();
        let mut buf = [0u8; 50];
        b.read_exact(&mut buf).unwrap();
        assert!(start.elapsed() < Duration::from_millis(100));
        a.write_all(&[0u8; 100]).unwrap();
        let mut buf = [0u8; 100];
        b.read_exact(&mut buf).unwrap();
        assert!(start.elapsed() >= Duration::from_millis(150));
    }

    #[test]
    fn close_lets_peer_drain_then_eof() {
        let (a, b) = pipe();
        a.write_all(b"last").unwrap();
        a.close();
        let mut buf = [0u8; 4];
        b.read_exact(&mut buf).unwrap();
        assert_eq!(
            b.read_exact(&mut buf).unwrap_err().kind(),
            io::ErrorKind::UnexpectedEof
        );
        assert_eq!(
            a.write_all(b"x").unwrap_err().kind(),
            io::ErrorKind::NotConnected
        );
        assert_eq!(
            b.write_all(b"x").unwrap_err().kind(),
            io::ErrorKind::BrokenPipe
        );
    }

    #[test]
    fn close_unblocks_local_reader() {
        let (a, _b) = pipe();
        let a = Arc::new(a);
        let reader = {
            let a = Arc::clone(&a);
            thread::spawn(move || {
                let mut buf = [0u8; 1];
                a.read_exact(&mut buf).unwrap_err().kind()
            })
        };
        thread::sleep(Duration::from_millis(50));
        a.close();
        assert_eq!(reader.join().unwrap(), io::ErrorKind::NotConnected);
    }

    #[test]
    fn disconnect_after_budget() {
        let (a, b) = impaired_pair(ImpairmentProfile::plain().with_disconnect_after(10));
        a.write_all(&[0u8; 8]).unwrap();
        assert!(a.write_all(&[0u8; 8]).is_err());
        let mut buf = [0u8; 1];
        assert_eq!(
            b.read_exact(&mut buf).unwrap_err().kind(),
            io::ErrorKind::UnexpectedEof
        );
    }

    #[test]
    fn read_timeout() {
        let (_a, b) = pipe();
        b.set_read_timeout(Some(Duration::from_millis(20))).unwrap();
        let mut buf = [0u8; 1];
        assert_eq!(
            b.read_exact(&mut buf).unwrap_err().kind(),
            io::ErrorKind::TimedOut
        );
    }

    #[test]
    fn profile_validation() {
        assert!(ImpairmentProfile::plain().with_latency_ms(-1.0).is_err());
        assert!(ImpairmentProfile::plain()
            .with_latency_ms(f64::NAN)
            .is_err());
        let p = ImpairmentProfile::plain()
            .with_stall(10, Duration::ZERO)
            .with_stall(10, Duration::ZERO);
        assert_eq!(p.validate(), Err(ProfileError::UnorderedStalls));
        assert_eq!(
            ImpairmentProfile::plain().with_cap(0).validate(),
            Err(ProfileError::ZeroCap)
        );
    }
}
