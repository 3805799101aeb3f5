//! Token bucket used to pace channel writes.

use std::thread;
use std::time::{Duration, Instant};

/// Smallest write slice issued by a paced channel.
pub const MIN_PACE_SLICE: usize = 64 * 1024;

/// Slice size for a given pace: `max(64 KiB, pace / 50)`, i.e. roughly 20 ms
/// worth of data per write.
pub fn pace_slice(bytes_per_sec: u64) -> usize {
    MIN_PACE_SLICE.max((bytes_per_sec / 50) as usize)
}

#[derive(Debug, Clone)]
pub struct TokenBucket {
    capacity: f64,
    rate: f64,
    tokens: f64,
    last_refill: Instant,
}

impl TokenBucket {
    /// A bucket holding `capacity` bytes, refilled at `bytes_per_sec`. Starts
    /// full.
    pub fn new(capacity: usize, bytes_per_sec: u64) -> TokenBucket {
        TokenBucket {
            capacity: capacity as f64,
            rate: bytes_per_sec as f64,
            tokens: capacity as f64,
            last_refill: Instant::now(),
        }
    }

    pub fn for_pace(bytes_per_sec: u64) -> TokenBucket {
        TokenBucket::new(pace_slice(bytes_per_sec), bytes_per_sec)
    }

    pub fn capacity(&self) -> usize {
        self.capacity as usize
    }

    pub fn rate(&self) -> u64 {
        self.rate as u64
    }

    fn refill(&mut self, now: Instant) {
        let elapsed = now
            .saturating_duration_since(self.last_refill)
            .as_secs_f64();
        self.tokens = (self.tokens + elapsed * self.rate).min(self.capacity);
        self.last_refill = now;
    }

    /// How long a caller must wait before `n` tokens are available.
    pub fn wait_time(&mut self, n: usize, now: Instant) -> Duration {
        self.refill(now);
        let missing = n as f64 - self.tokens;
        if missing <= 0.0 {
            Duration::ZERO
        } else {
            Duration::from_secs_f64(missing / self.rate)
        }
    }

    /// Block until `n` tokens are available, then take them. `n` must not
    /// exceed the capacity.
    pub fn acquire(&mut self, n: usize) {
        debug_assert!(n as f64 <= self.capacity);
        let wait = self.wait_time(n, Instant::now());
        if !wait.is_zero() {
            thread::sleep(wait);
            self.refill(Instant::now());
        }
        // Sleep overshoot only ever adds tokens; clamp float residue.
        self.tokens = (self.tokens - n as f64).max(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slice_sizes() {
        assert_eq!(pace_slice(1 << 20), 64 * 1024);
        assert_eq!(pace_slice(4 << 20), (4 << 20) / 50);
        assert_eq!(pace_slice(100 << 20), (100 << 20) / 50);
    }

    #[test]
    fn starts_full_then_waits() {
        let now = Instant::now();
        let mut b = TokenBucket::new(1000, 1000);
        assert_eq!(b.wait_time(1000, now), Duration::ZERO);
        b.tokens = 0.0;
        let w = b.wait_time(500, now);
        assert!((w.as_secs_f64() - 0.5).abs() < 1e-9);
    }

    #[test]
    fn refill_is_capped() {
        let mut b = TokenBucket::new(100, 1000);
        b.tokens = 0.0;
        let later = b.last_refill + Duration::from_secs(10);
        b.refill(later);
        assert_eq!(b.tokens, 100.0);
    }

    #[test]
    fn long_run_rate() {
        let mut b = TokenBucket::new(10_000, 200_000);
        let start = Instant::now();
        for _ in 0..10 {
            b.acquire(10_000);
        }
        // 100 kB at 200 kB/s, first 10 kB free.
        let el = start.elapsed().as_secs_f64();
        assert!((0.44..0.7).contains(&el), "{el}");
    }
}
