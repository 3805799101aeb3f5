mod common;

use std::thread;

use common::{mpw_pair, random_bytes, rng, Wire};
use proptest::prelude::*;
use stripewire::{ChannelError, Error, Mpw, Path};

fn both<R: Send>(
    a: &Mpw,
    b: &Mpw,
    fa: impl FnOnce(&Mpw) -> R + Send,
    fb: impl FnOnce(&Mpw) -> R + Send,
) -> (R, R) {
    thread::scope(|s| {
        let hb = s.spawn(|| fb(b));
        let ra = fa(a);
        (ra, hb.join().unwrap())
    })
}

fn send_recv_striped(wire: Wire) {
    let (a, b) = mpw_pair(wire, 4);
    let mut r = rng(1);
    for len in [0usize, 1, 3, 4, 5, 1000, 1 << 20] {
        let msg = random_bytes(&mut r, len);
        let p = a.all_channels();
        let (sent, got) = both(
            &a,
            &b,
            |a| a.send(&msg, &p).map(|_| Vec::new()),
            |b| b.recv(len, &p),
        );
        sent.unwrap();
        assert_eq!(got.unwrap(), msg);
    }
}

fn full_duplex_exchange(wire: Wire) {
    let (a, b) = mpw_pair(wire, 3);
    let mut r = rng(2);
    let x = random_bytes(&mut r, 777_777);
    let y = random_bytes(&mut r, 12_345);
    let p = Path::of([2, 0]).unwrap();
    let (ga, gb) = both(
        &a,
        &b,
        |a| a.send_recv(&x, y.len(), &p),
        |b| b.send_recv(&y, x.len(), &p),
    );
    assert_eq!(ga.unwrap(), y);
    assert_eq!(gb.unwrap(), x);
}

fn cycle_between_disjoint_paths(wire: Wire) {
    let (a, b) = mpw_pair(wire, 4);
    let up = Path::of([0, 1]).unwrap();
    let down = Path::of([2, 3]).unwrap();
    let x = vec![7u8; 5000];
    let y = vec![9u8; 300];
    let (ga, gb) = both(
        &a,
        &b,
        |a| a.cycle(&x, &up, y.len(), &down),
        |b| b.cycle(&y, &down, x.len(), &up),
    );
    assert_eq!(ga.unwrap(), y);
    assert_eq!(gb.unwrap(), x);
    let err = a.cycle(&x, &up, 1, &Path::of([1, 2]).unwrap()).unwrap_err();
    assert!(matches!(err, Error::OverlappingPaths), "{err}");
}

fn unknown_size_exchange(wire: Wire) {
    let (a, b) = mpw_pair(wire, 3);
    let p = a.all_channels();
    let x = vec![1u8; 100_001];
    let y = vec![2u8; 7];
    let (ga, gb) = both(
        &a,
        &b,
        |a| a.dsend_recv(&x, 1 << 20, &p),
        |b| b.dsend_recv(&y, 1 << 20, &p),
    );
    assert_eq!(ga.unwrap(), y);
    assert_eq!(gb.unwrap(), x);

    // The receive buffer keeps its capacity across calls.
    let mut out = Vec::new();
    let (ra, rb) = both(
        &a,
        &b,
        |a| a.dsend_recv(&[], 1 << 20, &p).map(|_| ()),
        |b| b.dsend_recv_into(&x, &mut out, 1 << 20, &p),
    );
    ra.unwrap();
    rb.unwrap();
    assert!(out.is_empty());

    // Over the limit: error, then the stream is still usable.
    let (ra, rb) = both(
        &a,
        &b,
        |a| a.dsend_recv(&x, 1 << 20, &p),
        |b| b.dsend_recv(&[], 1000, &p),
    );
    assert_eq!(ra.unwrap(), Vec::<u8>::new());
    assert!(
        matches!(
            rb,
            Err(Error::SizeLimitExceeded {
                actual: 100_001,
                limit: 1000
            })
        ),
        "{rb:?}"
    );
    let (ga, gb) = both(
        &a,
        &b,
        |a| a.dsend_recv(b"ping", 10, &p),
        |b| b.dsend_recv(b"pong", 10, &p),
    );
    assert_eq!(ga.unwrap(), b"pong");
    assert_eq!(gb.unwrap(), b"ping");
}

fn per_channel_buffers(wire: Wire) {
    let (a, b) = mpw_pair(wire, 3);
    let p = a.all_channels();
    let bufs: [&[u8]; 3] = [b"first", b"", &[5u8; 70_000]];
    let lens: Vec<usize> = bufs.iter().map(|b| b.len()).collect();
    let (sa, gb) = both(
        &a,
        &b,
        |a| a.p_send(&bufs, &p).map(|_| Vec::new()),
        |b| b.p_recv(&lens, &p),
    );
    sa.unwrap();
    let gb = gb.unwrap();
    assert_eq!(gb.iter().map(Vec::as_slice).collect::<Vec<_>>(), bufs);

    let back: [&[u8]; 3] = [b"x", b"yy", b"zzz"];
    let back_lens = [1, 2, 3];
    let (ga, gb) = both(
        &a,
        &b,
        |a| a.p_send_recv(&bufs, &back_lens, &p),
        |b| b.p_send_recv(&back, &lens, &p),
    );
    assert_eq!(ga.unwrap(), back.map(<[u8]>::to_vec));
    assert_eq!(gb.unwrap(), bufs.map(<[u8]>::to_vec));

    let err = a.p_send(&bufs[..2], &p).unwrap_err();
    assert!(
        matches!(
            err,
            Error::ArityMismatch {
                buffers: 2,
                channels: 3
            }
        ),
        "{err}"
    );
}

fn barrier_and_finalize(wire: Wire) {
    let (a, b) = mpw_pair(wire, 2);
    let p = a.all_channels();
    for _ in 0..3 {
        let (ra, rb) = both(&a, &b, |a| a.barrier(&p), |b| b.barrier(&p));
        ra.unwrap();
        rb.unwrap();
    }
    a.finalize();
    a.finalize();
    assert!(matches!(a.send(b"x", &p), Err(Error::Finalized)));
    let err = b.recv(1, &p).unwrap_err();
    assert!(err.is_closed(), "{err}");
}

fn length_mismatch_detected(wire: Wire) {
    let (a, b) = mpw_pair(wire, 2);
    let p = a.all_channels();
    let (sa, rb) = both(
        &a,
        &b,
        |a| a.send(&[0u8; 100], &p).map(|_| Vec::new()),
        |b| b.recv(99, &p),
    );
    sa.unwrap();
    let err = rb.unwrap_err();
    assert!(
        err.failures()
            .iter()
            .any(|f| matches!(f.error, ChannelError::StripeMismatch { .. })),
        "{err}"
    );
    // Both chunks were consumed, so the next message lines up.
    let (sa, rb) = both(
        &a,
        &b,
        |a| a.send(b"ok", &p).map(|_| Vec::new()),
        |b| b.recv(2, &p),
    );
    sa.unwrap();
    assert_eq!(rb.unwrap(), b"ok");
}

fn unknown_channel_rejected(wire: Wire) {
    let (a, _b) = mpw_pair(wire, 2);
    let err = a.send(b"x", &Path::of([5]).unwrap()).unwrap_err();
    assert!(
        matches!(err, Error::UnknownChannel(id) if id.0 == 5),
        "{err}"
    );
}

fn concurrent_use_of_a_channel_is_busy(wire: Wire) {
    let (a, b) = mpw_pair(wire, 1);
    let p = a.all_channels();
    thread::scope(|s| {
        let blocked = s.spawn(|| a.recv(10, &p));
        thread::sleep(std::time::Duration::from_millis(100));
        let err = a.recv(10, &p).unwrap_err();
        assert!(
            err.failures()
                .iter()
                .any(|f| matches!(f.error, ChannelError::Busy(_))),
            "{err}"
        );
        b.send(&[3u8; 10], &p).unwrap();
        assert_eq!(blocked.join().unwrap().unwrap(), [3u8; 10]);
    });
}

macro_rules! suite {
    ($modname:ident, $wire:expr) => {
        mod $modname {
            use super::*;

            #[test]
            fn send_recv() {
                send_recv_striped($wire);
            }
            #[test]
            fn send_recv_full_duplex() {
                full_duplex_exchange($wire);
            }
            #[test]
            fn cycle() {
                cycle_between_disjoint_paths($wire);
            }
            #[test]
            fn dsend_recv() {
                unknown_size_exchange($wire);
            }
            #[test]
            fn p_variants() {
                per_channel_buffers($wire);
            }
            #[test]
            fn barrier_finalize() {
                barrier_and_finalize($wire);
            }
            #[test]
            fn stripe_mismatch() {
                length_mismatch_detected($wire);
            }
            #[test]
            fn unknown_channel() {
                unknown_channel_rejected($wire);
            }
            #[test]
            fn busy() {
                concurrent_use_of_a_channel_is_busy($wire);
            }
        }
    };
}

suite!(tcp, Wire::Tcp);
suite!(testkit, Wire::Testkit);

#[test]
fn reopen_channel_after_peer_restart() {
    let ports = common::free_ports(2);
    let connect =
        |port| stripewire::ChannelConfig::connect("127.0.0.1", port).with_timeout_ms(5_000);
    let accept = |port| stripewire::ChannelConfig::accept(port).with_timeout_ms(5_000);
    let (mut a, b) = thread::scope(|s| {
        let h = s.spawn(|| Mpw::init(vec![accept(ports[0])]));
        let a = Mpw::init(vec![connect(ports[0])]).unwrap();
        (a, h.join().unwrap().unwrap())
    });
    b.finalize();
    let id = stripewire::ChannelId(0);
    let b2 = thread::scope(|s| {
        let h = s.spawn(|| Mpw::init(vec![accept(ports[1])]));
        a.reopen_channel(id, connect(ports[1])).unwrap();
        h.join().unwrap().unwrap()
    });
    let p = a.all_channels();
    let (sa, rb) = both(
        &a,
        &b2,
        |a| a.send(b"hi", &p).map(|_| Vec::new()),
        |b| b.recv(2, &p),
    );
    sa.unwrap();
    assert_eq!(rb.unwrap(), b"hi");
}

#[test]
fn init_failure_names_the_channel() {
    let port = common::free_ports(1)[0];
    let err = Mpw::init(vec![
        stripewire::ChannelConfig::connect("127.0.0.1", port).with_timeout_ms(200)
    ])
    .unwrap_err();
    assert!(
        matches!(&err, Error::InitFailed { channel, source: ChannelError::ConnectTimeout { .. } } if channel.0 == 0),
        "{err}"
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn round_trip_any_width_and_length(
        width in 1usize..=6,
        len in 0usize..100_000,
        seed in any::<u64>(),
    ) {
        let (a, b) = mpw_pair(Wire::Testkit, width);
        let mut r = rng(seed);
        let x = random_bytes(&mut r, len);
        let y = random_bytes(&mut r, len / 3);
        let p = a.all_channels();
        let (ga, gb) = both(
            &a,
            &b,
            |a| a.send_recv(&x, y.len(), &p),
            |b| b.send_recv(&y, x.len(), &p),
        );
        prop_assert_eq!(ga.unwrap(), y);
        prop_assert_eq!(gb.unwrap(), x);
    }
}
