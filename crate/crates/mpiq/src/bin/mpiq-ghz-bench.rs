//! GHZ circuit-cutting benchmark: serial versus parallel execution of a cut
//! GHZ workload over monitor daemons, with speedup reporting and CSV output.
//!
//! Without a configuration the harness self-hosts one in-process monitor per
//! node on loopback TCP ports. With `--qconfig` (or `MPIQ_QCONFIG` under the
//! launcher) it attaches to externally started monitors instead; in that case
//! `--delay-ms` only documents the delay the monitors were started with.

use std::path::PathBuf;

use clap::Parser;
use mpiq::bench::{compute_speedup, emit_results, run_parallel, run_serial, BenchResult};
use mpiq::ghz::cut_equal;
use mpiq::monitor::{spawn_monitor, MonitorConfig, MonitorHandle};
use mpiq::runtime::{init_from_config, InitOptions, QuantumNodeConfig};
use mpiq::util::{env_u64, mix64};

#[derive(Parser, Debug)]
#[command(name = "mpiq-ghz-bench", about = "Distributed GHZ cutting benchmark")]
struct Args {
    /// Total GHZ circuit size.
    #[arg(long)]
    qubits: u16,

    /// Number of fragments to cut into.
    #[arg(long)]
    fragments: u16,

    /// Number of quantum nodes to use.
    #[arg(long)]
    nodes: u32,

    /// Shots per fragment.
    #[arg(long)]
    shots: u32,

    /// Injected per-execution compute delay (self-hosted monitors only).
    #[arg(long = "delay-ms", default_value_t = 0)]
    delay_ms: u64,

    /// serial | parallel | both
    #[arg(long, default_value = "both")]
    mode: String,

    /// Write the result row(s) as CSV to this path.
    #[arg(long)]
    csv: Option<PathBuf>,

    #[arg(long, default_value_t = 0x4d50_4951)]
    seed: u64,

    /// Attach to monitors from this config instead of self-hosting.
    #[arg(long)]
    qconfig: Option<PathBuf>,
}

fn self_host(args: &Args, fragment_size: u16) -> mpiq::Result<(QuantumNodeConfig, Vec<MonitorHandle>)> {
    let mut handles = Vec::new();
    let mut devices = Vec::new();
    for i in 0..args.nodes {
        let handle = spawn_monitor(MonitorConfig {
            ip: "127.0.0.1".into(),
            port: 0,
            device_id: i,
            qubit_count: fragment_size,
            seed: mix64(&[args.seed, i as u64]),
            delay_ms: args.delay_ms,
            register_local: false,
        })?;
        let dev = handle.device();
        devices.push(mpiq::runtime::QuantumDevice {
            ip: dev.ip.clone(),
            port: dev.port,
            device_id: dev.device_id,
            qubit_count: fragment_size,
            backend: "statevector".into(),
        });
        handles.push(handle);
    }
    Ok((
        QuantumNodeConfig {
            devices,
            epsilon_sync_ms: 50,
        },
        handles,
    ))
}

fn run(args: &Args) -> mpiq::Result<bool> {
    // A launched multi-rank job runs the harness on rank 0 only.
    if env_u64("MPIQ_RANK", 0) != 0 {
        return Ok(true);
    }

    let plan = cut_equal(args.qubits, args.fragments)?;
    let fragment_size = plan.sizes[0];

    let config_path = args
        .qconfig
        .clone()
        .or_else(|| std::env::var("MPIQ_QCONFIG").ok().map(PathBuf::from));
    let (config, hosted) = match config_path {
        Some(path) => (mpiq::runtime::load_qnode_config(&path)?, Vec::new()),
        None => self_host(args, fragment_size)?,
    };

    let handle = init_from_config(
        config,
        InitOptions {
            seed: args.seed,
            owns_monitors: !hosted.is_empty(),
            ..InitOptions::default()
        },
    )?;

    let run_serial_mode = args.mode == "serial" || args.mode == "both";
    let run_parallel_mode = args.mode == "parallel" || args.mode == "both";
    if !run_serial_mode && !run_parallel_mode {
        return Err(mpiq::Error::Range(format!(
            "mode must be serial, parallel, or both; got {:?}",
            args.mode
        )));
    }

    let mut row = BenchResult {
        n_total: args.qubits,
        m_fragments: args.fragments,
        nodes: args.nodes,
        shots: args.shots,
        delay_ms: args.delay_ms,
        t_serial_s: None,
        t_parallel_s: None,
        speedup: None,
        valid: true,
    };

    if run_serial_mode {
        let device = handle.world().devices()[0].clone();
        let serial = run_serial(&handle, &device, &plan, args.shots)?;
        row.t_serial_s = Some(serial.seconds);
        row.valid &= serial.summary.is_valid();
        println!(
            "serial: {} fragments on one node in {:.3} s (valid: {})",
            args.fragments,
            serial.seconds,
            serial.summary.is_valid()
        );
    }
    if run_parallel_mode {
        let parallel = run_parallel(&handle, &plan, args.nodes, args.shots)?;
        row.t_parallel_s = Some(parallel.seconds);
        row.valid &= parallel.summary.is_valid();
        println!(
            "parallel: {} fragments on {} nodes in {:.3} s (valid: {}, P(0^n) = {:.4})",
            args.fragments,
            args.nodes,
            parallel.seconds,
            parallel.summary.is_valid(),
            parallel.summary.p_zero()
        );
    }
    if let (Some(ts), Some(tp)) = (row.t_serial_s, row.t_parallel_s) {
        let s = compute_speedup(ts, tp)?;
        row.speedup = Some(s);
        println!("speedup: {s:.2}");
    }

    if let Some(path) = &args.csv {
        emit_results(std::slice::from_ref(&row), path)?;
        println!("wrote {}", path.display());
    }

    let valid = row.valid;
    handle.finalize()?;
    for monitor in hosted {
        monitor.join();
    }
    Ok(valid)
}

fn main() {
    let args = Args::parse();
    match run(&args) {
        Ok(true) => {}
        Ok(false) => {
            eprintln!("mpiq-ghz-bench: validation failed (non-GHZ outcomes observed)");
            std::process::exit(1);
        }
        Err(e) => {
            eprintln!("mpiq-ghz-bench: {e}");
            std::process::exit(2);
        }
    }
}
