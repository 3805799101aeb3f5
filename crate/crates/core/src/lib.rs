//! Wide-area message passing over striped sets of parallel TCP streams.
//!
//! Applications that are each parallel on their own site are coupled through
//! *channels*: single TCP connections between two fixed ports. Channels are
//! grouped into [`Path`]s, and every collective operation on a path stripes
//! its message evenly over the path's channels and moves the pieces
//! concurrently, one thread per channel.
//!
//! ```no_run
//! use stripewire::{ChannelConfig, Mpw, Path};
//!
//! # fn main() -> Result<(), stripewire::Error> {
//! let mpw = Mpw::init(vec![
//!     ChannelConfig::connect("10.0.0.100", 6000),
//!     ChannelConfig::connect("123.45.67.89", 6001),
//!     ChannelConfig::connect("123.45.67.89", 6002),
//! ])?;
//! let lan = Path::of([0])?;
//! let wan = Path::of([1, 2])?;
//!
//! let local = mpw.recv(100, &lan)?;
//! let remote = mpw.send_recv(&local, 100, &wan)?;
//! mpw.send(&remote, &lan)?;
//! mpw.finalize();
//! # Ok(())
//! # }
//! ```
//!
//! Modules:
//! - [`frame`], [`stripe`], [`stats`], [`config`]: pure domain logic.
//! - [`transport`]: channel setup, handshake, framed and paced I/O.
//! - [`api`]: the collective operations ([`Mpw`]).
//! - [`forwarder`]: user-space relaying between paths.
//! - [`bench`]: throughput benchmark harness.
//! - [`testkit`]: in-process links with injectable impairments.

pub mod api;
pub mod bench;
pub mod config;
pub mod forwarder;
pub mod frame;
pub mod stats;
pub mod stripe;
pub mod testkit;
pub mod transport;

pub use api::{ChannelFailure, Error, Mpw};
pub use config::{ChannelConfig, ChannelId, ConfigError, Path, Role};
pub use frame::{decode_frame, encode_frame, Frame, FrameError, FrameKind};
pub use stats::{bench_stats, BenchRecord};
pub use stripe::{stripe_layout, StripeLayout};
pub use transport::{open_channel, Channel, ChannelError, ChannelState, Link};
