//! Error types shared across the runtime.

use crate::domain::DeviceIdentifier;
use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("resource exhausted: {0}")]
    Resource(String),

    #[error("no classical slot can absorb the requested load of {demand}")]
    Allocation { demand: u32 },

    #[error("unknown address: {0}")]
    Address(String),

    #[error("payload of {len} bytes exceeds the {cap}-byte cap")]
    Size { len: u64, cap: u64 },

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("unsupported frame version {0}")]
    Version(u8),

    #[error("incomplete frame: have {have} bytes, need {need}")]
    IncompleteFrame { have: usize, need: usize },

    #[error("timed out after {0} ms")]
    Timeout(u64),

    #[error("connection to {0} refused")]
    Connect(String),

    #[error("channel to {0} is closed")]
    ChannelClosed(String),

    #[error("invalid runtime state: {0}")]
    State(String),

    #[error("initialization failed; unreachable monitors: {0:?}")]
    Init(Vec<DeviceIdentifier>),

    #[error("launch failed: {0}")]
    Launch(String),

    #[error("qubit index {index} out of range for a {qubit_count}-qubit device")]
    QubitRange { index: u16, qubit_count: u16 },

    #[error("payload of {actual} bytes exceeds max_len {max_len}; message preserved")]
    Truncation { actual: usize, max_len: usize },

    #[error("barrier flag {0} is not defined (only 0 and 2 are)")]
    Flag(u8),

    #[error("barrier timed out; absent participants: {0:?}")]
    BarrierTimeout(Vec<DeviceIdentifier>),

    #[error("barrier timed out; absent classical ranks: {0:?}")]
    BarrierTimeoutRanks(Vec<u32>),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("qubit mapping violation: {0}")]
    Mapping(String),

    #[error("payload integrity check failed: digest {got:#018x} does not match {want:#018x}")]
    Integrity { want: u64, got: u64 },

    #[error("malformed gate stream: {0}")]
    Decode(String),

    #[error("argument out of range: {0}")]
    Range(String),

    #[error("reconstruction failed at fragment {fragment}, shot {shot}: {reason}")]
    Reconstruction {
        fragment: usize,
        shot: usize,
        reason: String,
    },

    #[error("device {device} cannot hold a {needed}-qubit fragment ({available} qubits)")]
    Capacity {
        device: DeviceIdentifier,
        needed: u16,
        available: u16,
    },

    #[error("collective failed on targets {failed:?}: {reason}")]
    Collective {
        failed: Vec<DeviceIdentifier>,
        reason: String,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True when the error indicates that waiting longer might help.
    pub fn is_timeout(&self) -> bool {
        matches!(self, Error::Timeout(_))
    }
}
