//! Multi-process launcher: one monitor process per configured device plus
//! `np` classical program processes, simulating a cluster on one host.

use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Child, Command};
use std::time::{Duration, Instant};

use crate::domain::DeviceIdentifier;
use crate::error::{Error, Result};
use crate::runtime::config::{load_qnode_config, QuantumNodeConfig};
use crate::transport::{open_channel, Envelope, Frame, MsgType};
use crate::util::mix64;

/// Exit codes of every child, in spawn order.
#[derive(Debug, Clone)]
pub struct LaunchReport {
    pub monitor_exits: Vec<(DeviceIdentifier, i32)>,
    pub program_exits: Vec<(u32, i32)>,
}

impl LaunchReport {
    /// Total number of children supervised.
    pub fn child_count(&self) -> usize {
        self.monitor_exits.len() + self.program_exits.len()
    }

    /// First nonzero exit code, if any; the launcher's own verdict.
    pub fn first_nonzero(&self) -> Option<i32> {
        self.program_exits
            .iter()
            .map(|(_, c)| *c)
            .chain(self.monitor_exits.iter().map(|(_, c)| *c))
            .find(|&c| c != 0)
    }
}

fn monitor_binary() -> Result<PathBuf> {
    if let Ok(path) = std::env::var("MPIQ_MONITOR_BIN") {
        return Ok(PathBuf::from(path));
    }
    let exe = std::env::current_exe()
        .map_err(|e| Error::Launch(format!("cannot locate own executable: {e}")))?;
    let dir = exe
        .parent()
        .ok_or_else(|| Error::Launch("executable has no parent directory".into()))?;
    let candidate = dir.join("mpiq-monitor");
    if candidate.exists() {
        return Ok(candidate);
    }
    Err(Error::Launch(format!(
        "monitor binary not found at {}; set MPIQ_MONITOR_BIN",
        candidate.display()
    )))
}

fn ensure_ports_free(config: &QuantumNodeConfig) -> Result<()> {
    for dev in &config.devices {
        TcpListener::bind((dev.ip.as_str(), dev.port)).map_err(|e| {
            Error::Launch(format!(
                "port {}:{} for device {} unavailable: {e}",
                dev.ip, dev.port, dev.device_id
            ))
        })?;
    }
    Ok(())
}

fn wait_for_monitors(config: &QuantumNodeConfig, timeout: Duration) -> Result<()> {
    let deadline = Instant::now() + timeout;
    for dev in &config.devices {
        loop {
            match open_channel(&dev.ip, dev.port, 200) {
                Ok(_) => break,
                Err(_) if Instant::now() < deadline => {
                    std::thread::sleep(Duration::from_millis(20))
                }
                Err(e) => {
                    return Err(Error::Launch(format!(
                        "monitor for device {} never came up: {e}",
                        dev.device_id
                    )))
                }
            }
        }
    }
    Ok(())
}

/// Reserve one free loopback port per classical rank.
fn reserve_rank_ports(np: u32) -> Result<Vec<(String, u16)>> {
    let mut addrs = Vec::new();
    let mut keepalive = Vec::new();
    for _ in 0..np {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let port = listener.local_addr()?.port();
        addrs.push(("127.0.0.1".to_string(), port));
        keepalive.push(listener);
    }
    drop(keepalive);
    Ok(addrs)
}

fn wait_child(child: &mut Child) -> i32 {
    match child.wait() {
        Ok(status) => status.code().unwrap_or(-1),
        Err(_) => -1,
    }
}

/// Ask one monitor to drain and exit; returns false when unreachable.
fn request_shutdown(ip: &str, port: u16) -> bool {
    match open_channel(ip, port, 500) {
        Ok(ch) => {
            let env = Envelope::new(MsgType::Shutdown, 0, 0, 0, 0);
            if ch.send_frame(Frame::new(env, Vec::new())).is_err() {
                return false;
            }
            // Wait for the drain acknowledgement, tolerating a close instead.
            matches!(ch.recv_frame(2000), Ok(_) | Err(Error::ChannelClosed(_)))
        }
        Err(_) => false,
    }
}

/// Spawn one monitor per configured device plus `np` classical processes
/// running `program`, wait for everything, and report per-child exit codes.
pub fn launch(np: u32, config_path: &Path, program: &[String], seed: u64) -> Result<LaunchReport> {
    if np == 0 {
        return Err(Error::Launch("np must be at least 1".into()));
    }
    if program.is_empty() {
        return Err(Error::Launch("no program given".into()));
    }
    let config = load_qnode_config(config_path)?;
    ensure_ports_free(&config)?;
    let monitor_bin = monitor_binary()?;

    let mut monitors: Vec<(DeviceIdentifier, Child)> = Vec::new();
    for (qrank, dev) in config.devices.iter().enumerate() {
        let child = Command::new(&monitor_bin)
            .arg("--ip")
            .arg(&dev.ip)
            .arg("--port")
            .arg(dev.port.to_string())
            .arg("--device-id")
            .arg(dev.device_id.to_string())
            .arg("--qubits")
            .arg(dev.qubit_count.to_string())
            .arg("--seed")
            .arg(mix64(&[seed, qrank as u64]).to_string())
            .spawn()
            .map_err(|e| Error::Launch(format!("spawning monitor: {e}")))?;
        monitors.push((dev.identifier(), child));
    }

    let startup = wait_for_monitors(&config, Duration::from_secs(10));
    if let Err(e) = startup {
        for (_, child) in &mut monitors {
            let _ = child.kill();
            let _ = child.wait();
        }
        return Err(e);
    }

    let rank_addrs = if np > 1 {
        reserve_rank_ports(np)?
    } else {
        Vec::new()
    };
    let addr_spec = rank_addrs
        .iter()
        .map(|(ip, port)| format!("{ip}:{port}"))
        .collect::<Vec<_>>()
        .join(",");

    let mut programs: Vec<(u32, Child)> = Vec::new();
    for rank in 0..np {
        let mut cmd = Command::new(&program[0]);
        cmd.args(&program[1..])
            .env("MPIQ_QCONFIG", config_path)
            .env("MPIQ_RANK", rank.to_string())
            .env("MPIQ_NP", np.to_string())
            .env("MPIQ_SEED", seed.to_string())
            .env("MPIQ_OWNS_MONITORS", "0");
        if !addr_spec.is_empty() {
            cmd.env("MPIQ_RANK_ADDRS", &addr_spec);
        }
        match cmd.spawn() {
            Ok(child) => programs.push((rank, child)),
            Err(e) => {
                for (_, child) in &mut programs {
                    let _ = child.kill();
                }
                for (_, child) in &mut monitors {
                    let _ = child.kill();
                }
                return Err(Error::Launch(format!("spawning rank {rank}: {e}")));
            }
        }
    }

    let program_exits: Vec<(u32, i32)> = programs
        .iter_mut()
        .map(|(rank, child)| (*rank, wait_child(child)))
        .collect();

    // Programs are done; drain the monitors. A monitor that no longer accepts
    // a shutdown is killed.
    for (dev, child) in &mut monitors {
        if !request_shutdown(&dev.ip, dev.port) {
            let _ = child.kill();
        }
    }
    let monitor_exits: Vec<(DeviceIdentifier, i32)> = monitors
        .iter_mut()
        .map(|(dev, child)| (dev.clone(), wait_child(child)))
        .collect();

    Ok(LaunchReport {
        monitor_exits,
        program_exits,
    })
}
