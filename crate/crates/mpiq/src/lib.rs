//! MPI-Q style hybrid classical-quantum message-passing runtime.
//!
//! The library realizes a hybrid communication domain over classical ranks
//! and simulator-backed quantum monitor daemons: point-to-point waveform
//! transfer, collective operations, a two-mode barrier with software clock
//! alignment, and an end-to-end distributed GHZ circuit-cutting workload
//! used as the validation case.

pub mod bench;
pub mod collectives;
pub mod domain;
pub mod error;
pub mod ghz;
pub mod messaging;
pub mod monitor;
pub mod qsim;
pub mod runtime;
pub mod sync;
pub mod transport;
pub mod util;

pub use domain::{
    create_hybrid_domain, map_classical, map_quantum, resolve_qrank, ContextId, ContextRegistry,
    DeviceIdentifier, HybridDomain, ProcessGroup, Qrank, Rank, VirtualTopology,
};
pub use error::{Error, Result};
pub use messaging::{ShotTable, WaveformBlock};
pub use monitor::{monitor_serve, spawn_monitor, MonitorConfig, MonitorHandle};
pub use runtime::{
    init_from_config, launch, load_qnode_config, mpiq_init, parse_qnode_config, InitOptions,
    QuantumDevice, QuantumNodeConfig, RankTransport, Role, RuntimeHandle,
};
pub use sync::{estimate_clock_offset, BarrierFlag, ClockOffset, QuantumBarrierRelease, CC, QQ};
