#![allow(dead_code)]

use std::net::TcpListener;
use std::sync::Arc;
use std::thread;

use rand::rngs::StdRng;
use rand::{Rng, RngCore, SeedableRng};
use stripewire::forwarder::{self, RelayReport};
use stripewire::testkit::{impaired_pair, ImpairmentProfile};
use stripewire::{ChannelConfig, Error, Link, Mpw, Path};

/// Distinct free TCP ports on loopback.
pub fn free_ports(n: usize) -> Vec<u16> {
    let listeners: Vec<TcpListener> = (0..n)
        .map(|_| TcpListener::bind("127.0.0.1:0").expect("bind ephemeral port"))
        .collect();
    listeners
        .iter()
        .map(|l| l.local_addr().unwrap().port())
        .collect()
}

/// First port the kernel hands out for outgoing connections.
fn ephemeral_start() -> u16 {
    std::fs::read_to_string("/proc/sys/net/ipv4/ip_local_port_range")
        .ok()
        .and_then(|s| s.split_whitespace().next()?.parse().ok())
        .unwrap_or(32_768)
}

/// `n` consecutive free ports, below the ephemeral range so that outgoing
/// connections never take one of them.
pub fn free_port_range(n: usize) -> u16 {
    let mut rng = rand::thread_rng();
    let top = ephemeral_start().max(20_000) - n as u16;
    loop {
        let base: u16 = rng.gen_range(10_000..top);
        let ok = (0..n as u16).all(|i| TcpListener::bind(("127.0.0.1", base + i)).is_ok());
        if ok {
            return base;
        }
    }
}

pub fn random_bytes(rng: &mut StdRng, len: usize) -> Vec<u8> {
    let mut v = vec![0u8; len];
    rng.fill_bytes(&mut v);
    v
}

pub fn rng(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}

/// Which kind of link joins two instances.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Wire {
    Tcp,
    Testkit,
}

/// Two instances joined by `n` channels; channel i of one talks to channel
/// i of the other.
pub fn mpw_pair(wire: Wire, n: usize) -> (Mpw, Mpw) {
    match wire {
        Wire::Tcp => {
            let ports = free_ports(n);
            let accept: Vec<_> = ports
                .iter()
                .map(|&p| ChannelConfig::accept(p).with_timeout_ms(10_000))
                .collect();
            let connect: Vec<_> = ports
                .iter()
                .map(|&p| ChannelConfig::connect("127.0.0.1", p).with_timeout_ms(10_000))
                .collect();
            thread::scope(|s| {
                let b = s.spawn(|| Mpw::init(accept));
                let a = Mpw::init(connect).expect("connect side");
                (a, b.join().unwrap().expect("accept side"))
            })
        }
        Wire::Testkit => {
            stripewire::testkit::uniform_mpw_pair(n, &ImpairmentProfile::plain()).unwrap()
        }
    }
}

/// Endpoints and relays of a chain of segments with the given widths.
/// Segment s joins node s (dialing) to node s+1 (accepting).
pub struct Chain {
    pub left: Mpw,
    pub right: Mpw,
    pub relays: Vec<(Mpw, Path, Path)>,
}

type NodeChannel = (ChannelConfig, Option<Arc<dyn Link>>);

enum NodeSpec {
    Tcp(Vec<ChannelConfig>),
    Links(Vec<(ChannelConfig, Arc<dyn Link>)>),
}

impl NodeSpec {
    fn open(self) -> Result<Mpw, Error> {
        match self {
            NodeSpec::Tcp(c) => Mpw::init(c),
            NodeSpec::Links(l) => Mpw::from_links(l),
        }
    }
}

pub fn chain(wire: Wire, widths: &[usize]) -> Chain {
    assert!(widths.len() >= 2, "a chain needs at least one relay");
    let nodes = widths.len() + 1;
    let mut specs: Vec<Vec<NodeChannel>> = (0..nodes).map(|_| Vec::new()).collect();
    for (s, &w) in widths.iter().enumerate() {
        let ports = match wire {
            Wire::Tcp => free_ports(w),
            Wire::Testkit => (1..=w as u16).collect(),
        };
        let mut right_side = Vec::new();
        for (j, &port) in ports.iter().enumerate() {
            let dial = ChannelConfig::connect("127.0.0.1", port)
                .with_timeout_ms(10_000)
                .with_handshake_index(j as u64);
            let listen = ChannelConfig::accept(port)
                .with_timeout_ms(10_000)
                .with_handshake_index(j as u64);
            match wire {
                Wire::Tcp => {
                    specs[s].push((dial, None));
                    right_side.push((listen, None));
                }
                Wire::Testkit => {
                    let (a, b) = impaired_pair(ImpairmentProfile::plain());
                    specs[s].push((dial, Some(Arc::new(a) as Arc<dyn Link>)));
                    right_side.push((listen, Some(Arc::new(b) as Arc<dyn Link>)));
                }
            }
        }
        // Nodes list their accepting segment before their dialing one.
        specs[s + 1].extend(right_side);
    }
    let specs: Vec<NodeSpec> = specs
        .into_iter()
        .map(|chans| match wire {
            Wire::Tcp => NodeSpec::Tcp(chans.into_iter().map(|(c, _)| c).collect()),
            Wire::Testkit => {
                NodeSpec::Links(chans.into_iter().map(|(c, l)| (c, l.unwrap())).collect())
            }
        })
        .collect();
    let mut mpws: Vec<Mpw> = thread::scope(|s| {
        let handles: Vec<_> = specs.into_iter().map(|n| s.spawn(|| n.open())).collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap().expect("chain node opens"))
            .collect()
    });
    let right = mpws.pop().unwrap();
    let mut rest = mpws.into_iter();
    let left = rest.next().unwrap();
    let relays = rest
        .enumerate()
        .map(|(r, m)| {
            let (wa, wb) = (widths[r], widths[r + 1]);
            (m, Path::of(0..wa).unwrap(), Path::of(wa..wa + wb).unwrap())
        })
        .collect();
    Chain {
        left,
        right,
        relays,
    }
}

/// Run every relay of a chain on its own thread.
pub fn spawn_relays(
    relays: Vec<(Mpw, Path, Path)>,
) -> Vec<thread::JoinHandle<Result<RelayReport, Error>>> {
    relays
        .into_iter()
        .map(|(m, a, b)| {
            thread::spawn(move || {
                let r = forwarder::relay(&m, &a, &b);
                m.finalize();
                r
            })
        })
        .collect()
}
