mod common;

use std::io::Write;
use std::process::{Child, Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use common::free_ports;
use stripewire::{ChannelConfig, Mpw};
use tempfile::NamedTempFile;

const BIN: &str = env!("CARGO_BIN_EXE_forwarder");

fn config_file(text: &str) -> NamedTempFile {
    let mut f = NamedTempFile::new().unwrap();
    f.write_all(text.as_bytes()).unwrap();
    f
}

fn spawn_daemon(cfg: &NamedTempFile) -> Child {
    Command::new(BIN)
        .arg("--config")
        .arg(cfg.path())
        .arg("--log-interval")
        .arg("0.2")
        .stdout(Stdio::null())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap()
}

fn dial(port: u16) -> Mpw {
    Mpw::init(vec![
        ChannelConfig::connect("127.0.0.1", port).with_timeout_ms(10_000)
    ])
    .unwrap()
}

fn wait_exit(child: &mut Child, limit: Duration) -> Option<i32> {
    let t = Instant::now();
    while t.elapsed() < limit {
        if let Some(status) = child.try_wait().unwrap() {
            return status.code();
        }
        thread::sleep(Duration::from_millis(20));
    }
    let _ = child.kill();
    None
}

fn interrupt(child: &Child) {
    let ok = Command::new("kill")
        .args(["-INT", &child.id().to_string()])
        .status()
        .unwrap()
        .success();
    assert!(ok);
}

#[test]
fn echo_through_daemon() {
    let ports = free_ports(2);
    let cfg = config_file(&format!(
        "# one channel per side\nside_a.ports = {}\nside_b.ports = {}\n",
        ports[0], ports[1]
    ));
    let mut child = spawn_daemon(&cfg);
    let (a, b) = thread::scope(|s| {
        let b = s.spawn(|| dial(ports[1]));
        (dial(ports[0]), b.join().unwrap())
    });
    let p = a.all_channels();
    let msg: Vec<u8> = (0..100u8).collect();
    thread::scope(|s| {
        let echo = s.spawn(|| {
            let got = b.recv(msg.len(), &p).unwrap();
            b.send(&got, &p).unwrap();
        });
        a.send(&msg, &p).unwrap();
        assert_eq!(a.recv(msg.len(), &p).unwrap(), msg);
        echo.join().unwrap();
    });
    a.finalize();
    let err = b.recv(1, &p).unwrap_err();
    assert!(err.is_closed(), "{err}");
    assert_eq!(wait_exit(&mut child, Duration::from_secs(5)), Some(0));
}

#[test]
fn malformed_config_exits_2_naming_the_key() {
    let cfg = config_file("side_a.ports = 7000\nside_b.ports = 7001\nside_b.pace = fast\n");
    let out = Command::new(BIN)
        .arg("--config")
        .arg(cfg.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("side_b.pace"), "{stderr}");
    assert!(stderr.contains("line 3"), "{stderr}");

    let cfg =
        config_file("side_a.ports = 7000\nside_a.send_buffer_bytes = lots\nside_b.ports = 1\n");
    let out = Command::new(BIN)
        .arg("--config")
        .arg(cfg.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("side_a.send_buffer_bytes"));

    let out = Command::new(BIN)
        .args(["--config", "/nonexistent/forwarder.cfg"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sigint_while_idle_closes_both_sides() {
    let ports = free_ports(2);
    let cfg = config_file(&format!(
        "side_a.ports = {}\nside_b.ports = {}\n",
        ports[0], ports[1]
    ));
    let mut child = spawn_daemon(&cfg);
    let (a, b) = thread::scope(|s| {
        let b = s.spawn(|| dial(ports[1]));
        (dial(ports[0]), b.join().unwrap())
    });
    thread::sleep(Duration::from_millis(200));
    interrupt(&child);
    let p = a.all_channels();
    for side in [&a, &b] {
        let err = side.recv(1, &p).unwrap_err();
        assert!(err.is_closed(), "{err}");
    }
    assert_eq!(wait_exit(&mut child, Duration::from_secs(5)), Some(0));
}

#[test]
fn sigint_before_peers_connect_exits_cleanly() {
    let ports = free_ports(2);
    let cfg = config_file(&format!(
        "side_a.ports = {}\nside_b.ports = {}\n",
        ports[0], ports[1]
    ));
    let mut child = spawn_daemon(&cfg);
    thread::sleep(Duration::from_millis(300));
    interrupt(&child);
    assert_eq!(wait_exit(&mut child, Duration::from_secs(5)), Some(0));
}

#[test]
fn runtime_failure_exits_1() {
    let port = free_ports(1)[0];
    let cfg = config_file(&format!(
        "side_a.host = 127.0.0.1\nside_a.ports = {port}\nside_a.connect_timeout_ms = 200\nside_b.ports = {}\nside_b.connect_timeout_ms = 200\n",
        free_ports(1)[0]
    ));
    let mut child = spawn_daemon(&cfg);
    assert_eq!(wait_exit(&mut child, Duration::from_secs(5)), Some(1));
}
