//! Monitor daemon for one simulated quantum control device. Listens on a TCP
//! port, executes pre-compiled payloads on the statevector backend, and
//! participates in quantum barriers until a SHUTDOWN arrives.

use clap::Parser;
use mpiq::monitor::{monitor_serve, MonitorConfig};

#[derive(Parser, Debug)]
#[command(name = "mpiq-monitor", about = "Quantum monitor daemon for one control device")]
struct Args {
    /// Address to listen on.
    #[arg(long)]
    ip: String,

    /// TCP port to listen on (0 picks a free one).
    #[arg(long)]
    port: u16,

    /// Device number, unique within this node.
    #[arg(long = "device-id")]
    device_id: u32,

    /// Qubit count of the simulated device (1..=26).
    #[arg(long = "qubits")]
    qubits: u16,

    /// Sampling seed; executions derive per-job seeds from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Extra per-execution compute delay in milliseconds.
    #[arg(long = "delay-ms", default_value_t = 0)]
    delay_ms: u64,
}

fn main() {
    let args = Args::parse();
    let config = MonitorConfig {
        ip: args.ip,
        port: args.port,
        device_id: args.device_id,
        qubit_count: args.qubits,
        seed: args.seed,
        delay_ms: args.delay_ms,
        register_local: false,
    };
    if let Err(e) = monitor_serve(config) {
        eprintln!("mpiq-monitor: {e}");
        std::process::exit(1);
    }
}
