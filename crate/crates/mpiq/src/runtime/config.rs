//! Quantum-node configuration: a JSON document with a top-level `devices`
//! array and an `epsilon_sync_ms` release-skew budget.

use serde::{Deserialize, Serialize};

use crate::domain::DeviceIdentifier;
use crate::error::{Error, Result};
use crate::qsim::MAX_QUBITS;

/// One configured quantum control device.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantumDevice {
    pub ip: String,
    pub port: u16,
    pub device_id: u32,
    pub qubit_count: u16,
    #[serde(default = "default_backend")]
    pub backend: String,
}

fn default_backend() -> String {
    "statevector".into()
}

impl QuantumDevice {
    pub fn identifier(&self) -> DeviceIdentifier {
        DeviceIdentifier::new(self.ip.clone(), self.port, self.device_id)
    }
}

/// Validated quantum-node configuration for one launch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantumNodeConfig {
    pub devices: Vec<QuantumDevice>,
    #[serde(default = "default_epsilon")]
    pub epsilon_sync_ms: u64,
}

fn default_epsilon() -> u64 {
    50
}

impl QuantumNodeConfig {
    /// Check every config invariant, naming the offending device on failure.
    pub fn validate(&self) -> Result<()> {
        let mut identities = std::collections::HashSet::new();
        let mut listeners = std::collections::HashSet::new();
        for (i, dev) in self.devices.iter().enumerate() {
            if dev.qubit_count == 0 || dev.qubit_count > MAX_QUBITS {
                return Err(Error::Config(format!(
                    "devices[{i}]: qubit_count {} outside [1, {MAX_QUBITS}]",
                    dev.qubit_count
                )));
            }
            if dev.backend != "statevector" {
                return Err(Error::Config(format!(
                    "devices[{i}]: unsupported backend {:?}",
                    dev.backend
                )));
            }
            if !identities.insert((dev.ip.clone(), dev.device_id)) {
                return Err(Error::Config(format!(
                    "devices[{i}]: duplicate (ip, device_id) = ({}, {})",
                    dev.ip, dev.device_id
                )));
            }
            if !listeners.insert((dev.ip.clone(), dev.port)) {
                return Err(Error::Config(format!(
                    "devices[{i}]: listener {}:{} already claimed",
                    dev.ip, dev.port
                )));
            }
        }
        Ok(())
    }

    /// A loopback config of `n` devices on consecutive ports; used by tests
    /// and the self-hosted bench mode.
    pub fn loopback(n: u32, base_port: u16, qubit_count: u16) -> Self {
        Self {
            devices: (0..n)
                .map(|i| QuantumDevice {
                    ip: "127.0.0.1".into(),
                    port: base_port + i as u16,
                    device_id: i,
                    qubit_count,
                    backend: "statevector".into(),
                })
                .collect(),
            epsilon_sync_ms: 50,
        }
    }
}

/// Parse and validate configuration text. serde supplies line/column
/// positions for syntax problems; invariant violations name the field.
pub fn parse_qnode_config(text: &str) -> Result<QuantumNodeConfig> {
    let config: QuantumNodeConfig =
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

/// Serialize a config; `parse_qnode_config` of the output yields an equal
/// config.
pub fn serialize_qnode_config(config: &QuantumNodeConfig) -> String {
    serde_json::to_string_pretty(config).expect("config serialization cannot fail")
}

/// Read and parse a config file.
pub fn load_qnode_config(path: &std::path::Path) -> Result<QuantumNodeConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    parse_qnode_config(&text)
}
