//! The three-channel LAN/WAN exchange, run as three processes.
//!
//! - `node` dials one LAN channel and two WAN channels, receives a message
//!   from the LAN, exchanges it over the WAN and sends the reply back to the
//!   LAN.
//! - `lan` listens on the LAN port, sends its message and checks that the
//!   remote message comes back.
//! - `remote` listens on the WAN ports and exchanges messages with `node`.
//!
//! `lan` and `remote` exit 1 if the message they receive is not the one the
//! other end sent.

use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use stripewire::{ChannelConfig, Error, Mpw, Path};
use tracing::info;
use tracing_subscriber::EnvFilter;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Role {
    Lan,
    Node,
    Remote,
}

#[derive(Debug, Parser)]
#[command(about = "LAN receive, WAN exchange, LAN send")]
struct Args {
    #[arg(long, value_enum)]
    role: Role,
    #[arg(long, default_value = "127.0.0.1")]
    lan_host: String,
    #[arg(long, default_value = "127.0.0.1")]
    wan_host: String,
    #[arg(long, default_value_t = 6000)]
    lan_port: u16,
    #[arg(long, value_delimiter = ',', default_values_t = [6001u16, 6002])]
    wan_ports: Vec<u16>,
    #[arg(long, default_value_t = 100)]
    msg_size: usize,
    #[arg(long, default_value_t = 30_000)]
    timeout_ms: u64,
}

/// The message each endpoint sends, derived from its seed.
fn message(seed: u8, len: usize) -> Vec<u8> {
    (0..len)
        .map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed))
        .collect()
}

const LAN_SEED: u8 = 7;
const REMOTE_SEED: u8 = 201;

fn run(args: &Args) -> Result<bool, Error> {
    let size = args.msg_size;
    match args.role {
        Role::Node => {
            let mut configs = vec![ChannelConfig::connect(args.lan_host.clone(), args.lan_port)
                .with_timeout_ms(args.timeout_ms)
                .with_handshake_index(0)];
            for (i, &port) in args.wan_ports.iter().enumerate() {
                configs.push(
                    ChannelConfig::connect(args.wan_host.clone(), port)
                        .with_timeout_ms(args.timeout_ms)
                        .with_handshake_index(i as u64),
                );
            }
            let mpw = Mpw::init(configs)?;
            let lan = Path::of([0])?;
            let wan = Path::of(1..=args.wan_ports.len())?;
            let send_buf = mpw.recv(size, &lan)?;
            let recv_buf = mpw.send_recv(&send_buf, size, &wan)?;
            mpw.send(&recv_buf, &lan)?;
            mpw.finalize();
            info!(bytes = size, "forwarded");
            Ok(true)
        }
        Role::Lan => {
            let mpw = Mpw::init(vec![
                ChannelConfig::accept(args.lan_port).with_timeout_ms(args.timeout_ms)
            ])?;
            let lan = mpw.all_channels();
            mpw.send(&message(LAN_SEED, size), &lan)?;
            let got = mpw.recv(size, &lan)?;
            mpw.finalize();
            Ok(got == message(REMOTE_SEED, size))
        }
        Role::Remote => {
            let configs = args
                .wan_ports
                .iter()
                .map(|&p| ChannelConfig::accept(p).with_timeout_ms(args.timeout_ms))
                .collect();
            let mpw = Mpw::init(configs)?;
            let wan = mpw.all_channels();
            let got = mpw.send_recv(&message(REMOTE_SEED, size), size, &wan)?;
            mpw.finalize();
            Ok(got == message(LAN_SEED, size))
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    let args = Args::parse();
    if args.wan_ports.is_empty() {
        eprintln!("lan-wan-exchange: need at least one WAN port");
        return ExitCode::from(2);
    }
    match run(&args) {
        Ok(true) => {
            println!("{:?}: ok", args.role);
            ExitCode::SUCCESS
        }
        Ok(false) => {
            println!("{:?}: payload mismatch", args.role);
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("lan-wan-exchange: {e}");
            ExitCode::from(1)
        }
    }
}
