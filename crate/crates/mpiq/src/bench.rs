//! Experiment harness: serial versus parallel execution of cut GHZ
//! workloads, speedup computation, and CSV emission for the granularity and
//! node-scalability sweeps.

use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::collectives::{build_send_q, FanoutMode};
use crate::domain::{DeviceIdentifier, Qrank};
use crate::error::{Error, Result};
use crate::ghz::{
    compile_fragment, compile_fragments, reconstruct, validate_ghz_output, CutPlan, GhzSummary,
};
use crate::messaging::ShotTable;
use crate::runtime::RuntimeHandle;

/// One measured benchmark row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub n_total: u16,
    pub m_fragments: u16,
    pub nodes: u32,
    pub shots: u32,
    pub delay_ms: u64,
    pub t_serial_s: Option<f64>,
    pub t_parallel_s: Option<f64>,
    pub speedup: Option<f64>,
    pub valid: bool,
}

/// S = T_serial / T_parallel.
pub fn compute_speedup(t_serial: f64, t_parallel: f64) -> Result<f64> {
    let positive = |t: f64| t.is_finite() && t > 0.0;
    if !positive(t_serial) || !positive(t_parallel) {
        return Err(Error::Range(format!(
            "speedup needs positive times, got ({t_serial}, {t_parallel})"
        )));
    }
    Ok(t_serial / t_parallel)
}

/// Outcome of a serial sweep: wall-clock seconds plus the fragment tables in
/// dispatch order.
#[derive(Debug)]
pub struct SerialRun {
    pub seconds: f64,
    pub tables: Vec<ShotTable>,
    pub summary: GhzSummary,
}

/// Execute all fragments of `plan` on one monitor, one after another
/// (send, execute, receive per fragment), wall-clocking the whole loop.
pub fn run_serial(
    handle: &RuntimeHandle,
    device: &DeviceIdentifier,
    plan: &CutPlan,
    shots: u32,
) -> Result<SerialRun> {
    let qrank = {
        let domain = handle.world();
        crate::domain::resolve_qrank(domain, device)?
    };
    let device_qubits = handle.world().topology.quantum_vps[qrank as usize].qubit_count;

    let start = Instant::now();
    let mut tables = Vec::with_capacity(plan.sizes.len());
    for (i, &size) in plan.sizes.iter().enumerate() {
        let block = compile_fragment(size, shots, device, device_qubits)?;
        handle.send_block(device, i as u32, &block)?;
        tables.push(handle.recv_shots(device, i as u32, usize::MAX)?);
    }
    let seconds = start.elapsed().as_secs_f64();
    let global = reconstruct(&tables)?;
    let summary = validate_ghz_output(&global, plan.n_total);
    Ok(SerialRun {
        seconds,
        tables,
        summary,
    })
}

/// Outcome of one parallel pipeline run.
#[derive(Debug)]
pub struct ParallelRun {
    pub seconds: f64,
    pub global: ShotTable,
    pub summary: GhzSummary,
}

/// The three-phase pipeline: scatter fragments, align execution with a
/// quantum barrier, then gather and reconstruct. The wall clock covers
/// scatter through reconstruction. Fragments beyond the node count are
/// assigned round-robin.
pub fn run_parallel(
    handle: &RuntimeHandle,
    plan: &CutPlan,
    nodes: u32,
    shots: u32,
) -> Result<ParallelRun> {
    if nodes == 0 {
        return Err(Error::Range("nodes must be at least 1".into()));
    }
    if nodes > handle.world().quantum_count() {
        return Err(Error::Range(format!(
            "{nodes} nodes requested, only {} configured",
            handle.world().quantum_count()
        )));
    }
    let m = plan.m_fragments as u32;
    let participants: Vec<Qrank> = (0..nodes.min(m)).collect();

    let start = Instant::now();
    let tables = if m <= nodes {
        // Phase 1: one fragment per node through scatter.
        let blocks = compile_fragments(plan, shots, handle.world())?;
        let send_q = build_send_q(plan.n_total, &plan.sizes)?;
        handle.scatter(&blocks, &send_q, 0, FanoutMode::Sequential)?;
        // Phase 2: aligned start.
        handle.quantum_barrier(&participants)?;
        // Phase 3: collect.
        let gathered = handle.gather(&participants, 0)?;
        if !gathered.complete {
            return Err(Error::Collective {
                failed: gathered.missing,
                reason: "gather incomplete".into(),
            });
        }
        gathered.tables
    } else {
        // Round-robin overflow: fragment i runs on node i % nodes under tag i.
        for (i, &size) in plan.sizes.iter().enumerate() {
            let qrank = (i as u32) % nodes;
            let device = crate::domain::map_quantum(handle.world(), qrank)?.clone();
            let device_qubits = handle.world().topology.quantum_vps[qrank as usize].qubit_count;
            let block = compile_fragment(size, shots, &device, device_qubits)?;
            handle.send_block(&device, i as u32, &block)?;
        }
        handle.quantum_barrier(&participants)?;
        let mut tables = Vec::with_capacity(plan.sizes.len());
        for i in 0..plan.sizes.len() {
            let qrank = (i as u32) % nodes;
            let device = crate::domain::map_quantum(handle.world(), qrank)?.clone();
            tables.push(handle.recv_shots(&device, i as u32, usize::MAX)?);
        }
        tables
    };

    let global = reconstruct(&tables)?;
    let seconds = start.elapsed().as_secs_f64();
    let summary = validate_ghz_output(&global, plan.n_total);
    Ok(ParallelRun {
        seconds,
        global,
        summary,
    })
}

/// Write rows as CSV with the fixed header
/// `n_total,m_fragments,nodes,shots,delay_ms,t_serial_s,t_parallel_s,speedup,valid`.
pub fn write_results<W: Write>(rows: &[BenchResult], writer: W) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::Range("no benchmark rows to emit".into()));
    }
    let mut csv_writer = csv::Writer::from_writer(writer);
    for row in rows {
        csv_writer
            .serialize(row)
            .map_err(|e| Error::Shape(format!("csv serialization: {e}")))?;
    }
    csv_writer
        .flush()
        .map_err(|e| Error::Shape(format!("csv flush: {e}")))?;
    Ok(())
}

/// Write rows to a file path.
pub fn emit_results(rows: &[BenchResult], path: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::Range("no benchmark rows to emit".into()));
    }
    let file = std::fs::File::create(path)?;
    write_results(rows, file)
}

/// Parse rows back; inverse of [`write_results`].
pub fn parse_results<R: Read>(reader: R) -> Result<Vec<BenchResult>> {
    let mut csv_reader = csv::Reader::from_reader(reader);
    csv_reader
        .deserialize()
        .map(|row| row.map_err(|e| Error::Shape(format!("csv parse: {e}"))))
        .collect()
}
