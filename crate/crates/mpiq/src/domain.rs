//! The heterogeneous hybrid communication domain: process group, context,
//! virtual-processor topology, and the two virtual-to-physical mapping
//! mechanisms (random adaptive for classical slots, strict fixed binding for
//! quantum devices).

use std::collections::HashSet;
use std::fmt;
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::runtime::QuantumNodeConfig;

/// Classical rank within a domain.
pub type Rank = u32;
/// Quantum rank within a domain; a disjoint namespace from [`Rank`].
pub type Qrank = u32;

/// Default task capacity of a classical virtual-processor slot.
pub const DEFAULT_SLOT_CAPACITY: u32 = 16;

/// The {ip, device_id} tuple naming one quantum control device, plus the TCP
/// port its monitor listens on. The identity of a device is (ip, device_id);
/// the port is an attribute with one listener per device.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DeviceIdentifier {
    pub ip: String,
    pub port: u16,
    pub device_id: u32,
}

impl DeviceIdentifier {
    pub fn new(ip: impl Into<String>, port: u16, device_id: u32) -> Self {
        Self {
            ip: ip.into(),
            port,
            device_id,
        }
    }

    /// The (ip, device_id) identity tuple.
    pub fn key(&self) -> (String, u32) {
        (self.ip.clone(), self.device_id)
    }

    /// Socket address string for the device's monitor.
    pub fn addr(&self) -> String {
        format!("{}:{}", self.ip, self.port)
    }
}

impl fmt::Display for DeviceIdentifier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{{}:{}, device {}}}", self.ip, self.port, self.device_id)
    }
}

/// Communication context: the isolation tag carried by every frame.
/// Value 0 is reserved for the world domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ContextId(pub u32);

impl ContextId {
    pub const WORLD: ContextId = ContextId(0);
}

impl fmt::Display for ContextId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ctx{}", self.0)
    }
}

/// Allocates context ids for one launch. Ids are never reused, even after the
/// owning domain is destroyed, so a stale frame can never match a new domain.
#[derive(Debug)]
pub struct ContextRegistry {
    inner: Mutex<RegistryInner>,
}

#[derive(Debug)]
struct RegistryInner {
    next: u32,
    live: HashSet<u32>,
}

impl ContextRegistry {
    /// Fresh registry with the world context (0) pre-allocated.
    pub fn new() -> Self {
        let mut live = HashSet::new();
        live.insert(0);
        Self {
            inner: Mutex::new(RegistryInner { next: 1, live }),
        }
    }

    /// Smallest unused value > 0; strictly monotone within a launch.
    pub fn allocate(&self) -> Result<ContextId> {
        let mut inner = self.inner.lock().unwrap();
        if inner.next == u32::MAX {
            return Err(Error::Resource("context id space exhausted".into()));
        }
        let id = inner.next;
        inner.next += 1;
        inner.live.insert(id);
        Ok(ContextId(id))
    }

    /// Mark a context dead. Its value is not recycled.
    pub fn release(&self, ctx: ContextId) {
        self.inner.lock().unwrap().live.remove(&ctx.0);
    }

    pub fn exists(&self, ctx: ContextId) -> bool {
        self.inner.lock().unwrap().live.contains(&ctx.0)
    }
}

impl Default for ContextRegistry {
    fn default() -> Self {
        Self::new()
    }
}

/// The process group: dense, zero-based rank and qrank id spaces.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProcessGroup {
    pub classical_ranks: Vec<Rank>,
    pub quantum_qranks: Vec<Qrank>,
}

impl ProcessGroup {
    pub fn new(classical_count: u32, quantum_count: u32) -> Self {
        Self {
            classical_ranks: (0..classical_count).collect(),
            quantum_qranks: (0..quantum_count).collect(),
        }
    }
}

/// One classical virtual-processor slot. `capacity` bounds the abstract load
/// (concurrent task count) the slot will accept.
#[derive(Debug, Clone)]
pub struct ClassicalSlot {
    pub id: u32,
    pub capacity: u32,
}

/// One quantum virtual-processor entry: fixed binding to a device.
#[derive(Debug, Clone)]
pub struct QuantumVp {
    pub id: u32,
    pub device: DeviceIdentifier,
    pub qubit_count: u16,
}

/// Virtual-processor topology. Slot loads are the only mutable state in a
/// domain; they sit behind a single exclusive guard.
#[derive(Debug)]
pub struct VirtualTopology {
    pub classical_vps: Vec<ClassicalSlot>,
    pub quantum_vps: Vec<QuantumVp>,
    loads: Mutex<Vec<u32>>,
}

impl VirtualTopology {
    pub fn new(classical_vps: Vec<ClassicalSlot>, quantum_vps: Vec<QuantumVp>) -> Self {
        let loads = vec![0; classical_vps.len()];
        Self {
            classical_vps,
            quantum_vps,
            loads: Mutex::new(loads),
        }
    }

    /// Uniform slots: `count` slots of equal `capacity`.
    pub fn uniform_classical(count: u32, capacity: u32, quantum_vps: Vec<QuantumVp>) -> Self {
        let slots = (0..count).map(|id| ClassicalSlot { id, capacity }).collect();
        Self::new(slots, quantum_vps)
    }

    /// Current load of a slot, for tests and introspection.
    pub fn load_of(&self, slot_id: u32) -> Option<u32> {
        let idx = self
            .classical_vps
            .iter()
            .position(|s| s.id == slot_id)?;
        Some(self.loads.lock().unwrap()[idx])
    }

    /// Release previously mapped load, e.g. when a task completes.
    pub fn release_classical(&self, slot_id: u32, demand: u32) {
        if let Some(idx) = self.classical_vps.iter().position(|s| s.id == slot_id) {
            let mut loads = self.loads.lock().unwrap();
            loads[idx] = loads[idx].saturating_sub(demand);
        }
    }
}

/// Random adaptive allocation: probe candidate slots in a seeded random order
/// without replacement and claim the first one whose load fits.
pub fn map_classical(topology: &VirtualTopology, demand: u32, rng_seed: u64) -> Result<u32> {
    if topology.classical_vps.is_empty() {
        return Err(Error::Allocation { demand });
    }
    let mut order: Vec<usize> = (0..topology.classical_vps.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    order.shuffle(&mut rng);

    let mut loads = topology.loads.lock().unwrap();
    for idx in order {
        let slot = &topology.classical_vps[idx];
        if loads[idx].saturating_add(demand) <= slot.capacity {
            loads[idx] += demand;
            return Ok(slot.id);
        }
    }
    Err(Error::Allocation { demand })
}

/// The hybrid communication domain.
#[derive(Debug)]
pub struct HybridDomain {
    pub context: ContextId,
    pub group: ProcessGroup,
    pub topology: VirtualTopology,
    /// qrank -> device, in configuration-file order.
    q_map: Vec<DeviceIdentifier>,
    /// (ip, device_id) -> qrank; exact inverse of `q_map`.
    q_rev: std::collections::HashMap<(String, u32), Qrank>,
}

impl HybridDomain {
    /// The world domain for one launch: context 0, qranks assigned in
    /// configuration order.
    pub fn world(classical_count: u32, config: &QuantumNodeConfig) -> Result<Self> {
        Self::build(classical_count, config, ContextId::WORLD)
    }

    fn build(classical_count: u32, config: &QuantumNodeConfig, context: ContextId) -> Result<Self> {
        if classical_count == 0 {
            return Err(Error::Config("classical_count must be at least 1".into()));
        }
        let mut q_map = Vec::with_capacity(config.devices.len());
        let mut q_rev = std::collections::HashMap::new();
        let mut quantum_vps = Vec::with_capacity(config.devices.len());
        for (qrank, dev) in config.devices.iter().enumerate() {
            let ident = dev.identifier();
            if q_rev.insert(ident.key(), qrank as Qrank).is_some() {
                return Err(Error::Config(format!(
                    "duplicate device ({}, device_id {})",
                    ident.ip, ident.device_id
                )));
            }
            quantum_vps.push(QuantumVp {
                id: qrank as u32,
                device: ident.clone(),
                qubit_count: dev.qubit_count,
            });
            q_map.push(ident);
        }
        let group = ProcessGroup::new(classical_count, q_map.len() as u32);
        let topology =
            VirtualTopology::uniform_classical(classical_count, DEFAULT_SLOT_CAPACITY, quantum_vps);
        Ok(Self {
            context,
            group,
            topology,
            q_map,
            q_rev,
        })
    }

    pub fn quantum_count(&self) -> u32 {
        self.q_map.len() as u32
    }

    pub fn classical_count(&self) -> u32 {
        self.group.classical_ranks.len() as u32
    }

    /// All devices in qrank order.
    pub fn devices(&self) -> &[DeviceIdentifier] {
        &self.q_map
    }
}

/// Create a sub-domain with a freshly allocated context id.
pub fn create_hybrid_domain(
    classical_count: u32,
    config: &QuantumNodeConfig,
    parent_context: ContextId,
    registry: &ContextRegistry,
) -> Result<HybridDomain> {
    if !registry.exists(parent_context) {
        return Err(Error::State(format!(
            "parent context {parent_context} does not exist"
        )));
    }
    let context = registry.allocate()?;
    HybridDomain::build(classical_count, config, context)
}

/// Strict fixed mapping: qrank -> device. Pure lookup; never changes after
/// domain creation.
pub fn map_quantum(domain: &HybridDomain, qrank: Qrank) -> Result<&DeviceIdentifier> {
    domain
        .q_map
        .get(qrank as usize)
        .ok_or_else(|| Error::Address(format!("unknown qrank {qrank}")))
}

/// Inverse of [`map_quantum`]: device -> qrank.
pub fn resolve_qrank(domain: &HybridDomain, dev: &DeviceIdentifier) -> Result<Qrank> {
    domain
        .q_rev
        .get(&dev.key())
        .copied()
        .ok_or_else(|| Error::Address(format!("unregistered device {dev}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::{QuantumDevice, QuantumNodeConfig};

    fn config_with(n: u32) -> QuantumNodeConfig {
        QuantumNodeConfig {
            devices: (0..n)
                .map(|i| QuantumDevice {
                    ip: "127.0.0.1".into(),
                    port: 7000 + i as u16,
                    device_id: i,
                    qubit_count: 4,
                    backend: "statevector".into(),
                })
                .collect(),
            epsilon_sync_ms: 50,
        }
    }

    #[test]
    fn world_domain_counts_match_config() {
        let domain = HybridDomain::world(1, &config_with(10)).unwrap();
        assert_eq!(domain.group.classical_ranks, vec![0]);
        assert_eq!(domain.group.quantum_qranks, (0..10).collect::<Vec<_>>());
        assert_eq!(domain.quantum_count(), 10);
    }

    #[test]
    fn empty_quantum_side_is_valid() {
        let domain = HybridDomain::world(1, &config_with(0)).unwrap();
        assert!(domain.group.quantum_qranks.is_empty());
    }

    #[test]
    fn sequential_creates_get_distinct_monotone_contexts() {
        let registry = ContextRegistry::new();
        let cfg = config_with(2);
        // Replay the allocation log and assert values strictly increase.
        let mut seen = Vec::new();
        for _ in 0..5 {
            let d = create_hybrid_domain(1, &cfg, ContextId::WORLD, &registry).unwrap();
            seen.push(d.context.0);
        }
        for pair in seen.windows(2) {
            assert!(pair[0] < pair[1], "context ids must strictly increase");
        }
    }

    #[test]
    fn first_allocation_after_world_is_one_and_freed_ids_are_not_reused() {
        let registry = ContextRegistry::new();
        assert_eq!(registry.allocate().unwrap(), ContextId(1));
        let two = registry.allocate().unwrap();
        assert_eq!(two, ContextId(2));
        registry.release(ContextId(1));
        assert_eq!(registry.allocate().unwrap(), ContextId(3));
        assert!(registry.exists(ContextId::WORLD));
        assert!(!registry.exists(ContextId(1)));
    }

    #[test]
    fn create_rejects_missing_parent() {
        let registry = ContextRegistry::new();
        let err = create_hybrid_domain(1, &config_with(1), ContextId(99), &registry).unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }

    #[test]
    fn duplicate_device_rejected() {
        let mut cfg = config_with(2);
        cfg.devices[1].device_id = cfg.devices[0].device_id;
        cfg.devices[1].ip = cfg.devices[0].ip.clone();
        assert!(matches!(
            HybridDomain::world(1, &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn quantum_mapping_is_bijective_for_24_devices() {
        let domain = HybridDomain::world(1, &config_with(24)).unwrap();
        for qrank in 0..24 {
            let dev = map_quantum(&domain, qrank).unwrap();
            assert_eq!(resolve_qrank(&domain, dev).unwrap(), qrank);
        }
        for dev in domain.devices() {
            let q = resolve_qrank(&domain, dev).unwrap();
            assert_eq!(map_quantum(&domain, q).unwrap(), dev);
        }
    }

    #[test]
    fn config_order_defines_binding() {
        let domain = HybridDomain::world(1, &config_with(3)).unwrap();
        let first = map_quantum(&domain, 0).unwrap();
        assert_eq!(first.port, 7000);
        assert_eq!(first.device_id, 0);
    }

    #[test]
    fn out_of_range_qrank_and_unknown_device_fail() {
        let domain = HybridDomain::world(1, &config_with(4)).unwrap();
        assert!(matches!(map_quantum(&domain, 4), Err(Error::Address(_))));
        let stranger = DeviceIdentifier::new("127.0.0.1", 9999, 77);
        assert!(matches!(
            resolve_qrank(&domain, &stranger),
            Err(Error::Address(_))
        ));
    }

    #[test]
    fn single_fitting_slot_is_chosen() {
        let topo = VirtualTopology::uniform_classical(1, 4, vec![]);
        let slot = map_classical(&topo, 1, 1234).unwrap();
        assert_eq!(slot, 0);
        assert_eq!(topo.load_of(0), Some(1));
    }

    #[test]
    fn full_topology_yields_allocation_error() {
        let topo = VirtualTopology::uniform_classical(8, 1, vec![]);
        for seed in 0..8 {
            map_classical(&topo, 1, seed).unwrap();
        }
        assert!(matches!(
            map_classical(&topo, 1, 99),
            Err(Error::Allocation { demand: 1 })
        ));
    }

    #[test]
    fn fixed_seed_replays_identical_slot_sequence() {
        let run = || {
            let topo = VirtualTopology::uniform_classical(100, 4, vec![]);
            (0..200)
                .map(|i| map_classical(&topo, 1, 42 + i).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn different_seeds_reach_different_slots() {
        // At least two distinct outcomes over 100 seeds on a 10-slot topology.
        let mut outcomes = HashSet::new();
        for seed in 0..100 {
            let topo = VirtualTopology::uniform_classical(10, 4, vec![]);
            outcomes.insert(map_classical(&topo, 1, seed).unwrap());
        }
        assert!(outcomes.len() >= 2, "seeded probing collapsed to one slot");
    }

    #[test]
    fn capacity_is_never_exceeded() {
        let topo = VirtualTopology::uniform_classical(5, 3, vec![]);
        let mut granted = 0;
        for seed in 0..100 {
            if map_classical(&topo, 1, seed).is_ok() {
                granted += 1;
            }
        }
        assert_eq!(granted, 15);
        for slot in &topo.classical_vps {
            assert!(topo.load_of(slot.id).unwrap() <= slot.capacity);
        }
    }

    #[test]
    fn release_frees_capacity() {
        let topo = VirtualTopology::uniform_classical(1, 1, vec![]);
        let slot = map_classical(&topo, 1, 7).unwrap();
        assert!(map_classical(&topo, 1, 8).is_err());
        topo.release_classical(slot, 1);
        assert!(map_classical(&topo, 1, 9).is_ok());
    }
}
