//! Equal-granularity GHZ circuit cutting, fragment compilation, and classical
//! reconstruction of global measurement statistics by parity alignment.
//!
//! Each fragment runs a local GHZ circuit on its own qubits; its measurement
//! is a fair coin over all-zeros/all-ones. Aligning every fragment's coin to
//! fragment 0's reproduces the global computational-basis distribution
//! exactly: all-equal strings with probability one half each.

use crate::domain::{map_quantum, DeviceIdentifier, HybridDomain};
use crate::error::{Error, Result};
use crate::messaging::{ShotTable, WaveformBlock};
use crate::qsim::build_ghz_circuit;

/// One equal-granularity cut of an `n_total`-qubit GHZ circuit into
/// `m_fragments` pieces of floor/ceil size, larger fragments first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CutPlan {
    pub n_total: u16,
    pub m_fragments: u16,
    pub sizes: Vec<u16>,
    /// Global qubit indices where an entangling edge was split; one per
    /// fragment boundary.
    pub boundaries: Vec<u16>,
}

/// Cut `n` qubits into `m` fragments of ceil(n/m) or floor(n/m) qubits.
pub fn cut_equal(n: u16, m: u16) -> Result<CutPlan> {
    if m == 0 || n == 0 {
        return Err(Error::Range("n and m must be at least 1".into()));
    }
    if m > n {
        return Err(Error::Range(format!("cannot cut {n} qubits into {m} fragments")));
    }
    let small = n / m;
    let remainder = n % m;
    let mut sizes = Vec::with_capacity(m as usize);
    for i in 0..m {
        sizes.push(if i < remainder { small + 1 } else { small });
    }
    let mut boundaries = Vec::with_capacity(m as usize - 1);
    let mut acc = 0u16;
    for &s in sizes.iter().take(m as usize - 1) {
        acc += s;
        boundaries.push(acc);
    }
    Ok(CutPlan {
        n_total: n,
        m_fragments: m,
        sizes,
        boundaries,
    })
}

/// Compile one GHZ fragment for a specific device.
pub fn compile_fragment(
    size: u16,
    shots: u32,
    device: &DeviceIdentifier,
    device_qubits: u16,
) -> Result<WaveformBlock> {
    if size > device_qubits {
        return Err(Error::Capacity {
            device: device.clone(),
            needed: size,
            available: device_qubits,
        });
    }
    let circuit = build_ghz_circuit(size)?;
    WaveformBlock::from_circuit(&circuit, shots, device)
}

/// Compile every fragment of a plan against a domain: fragment `i` targets
/// the device bound to qrank `i`.
pub fn compile_fragments(
    plan: &CutPlan,
    shots: u32,
    domain: &HybridDomain,
) -> Result<Vec<WaveformBlock>> {
    let mut blocks = Vec::with_capacity(plan.sizes.len());
    for (i, &size) in plan.sizes.iter().enumerate() {
        let device = map_quantum(domain, i as u32)?;
        let device_qubits = domain.topology.quantum_vps[i].qubit_count;
        blocks.push(compile_fragment(size, shots, device, device_qubits)?);
    }
    Ok(blocks)
}

/// Rebuild global measurement statistics from fragment tables, aligning every
/// fragment's outcome to fragment 0's. Input tables must be in fragment
/// (qrank) order with equal shot counts.
pub fn reconstruct(tables: &[ShotTable]) -> Result<ShotTable> {
    if tables.is_empty() {
        return Err(Error::Shape("no fragment tables".into()));
    }
    let shots = tables[0].shots;
    for (k, t) in tables.iter().enumerate() {
        if t.shots != shots || t.bitstrings.len() != shots as usize {
            return Err(Error::Shape(format!(
                "fragment {k} has {} shots, expected {shots}",
                t.bitstrings.len()
            )));
        }
    }
    let n_total: usize = tables.iter().map(|t| t.width()).sum();
    let mut bitstrings = Vec::with_capacity(shots as usize);
    for shot in 0..shots as usize {
        for (k, t) in tables.iter().enumerate() {
            let s = &t.bitstrings[shot];
            let all_zero = s.bytes().all(|b| b == b'0');
            let all_one = s.bytes().all(|b| b == b'1');
            if !(all_zero || all_one) {
                return Err(Error::Reconstruction {
                    fragment: k,
                    shot,
                    reason: format!("non-GHZ fragment outcome {s:?}"),
                });
            }
        }
        let anchor = tables[0].bitstrings[shot].as_bytes()[0] as char;
        bitstrings.push(String::from(anchor).repeat(n_total));
    }
    Ok(ShotTable {
        qrank: 0,
        shots,
        bitstrings,
    })
}

/// Outcome counts of a GHZ run. A valid run has zero `other` strings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GhzSummary {
    pub n: u16,
    pub shots: u32,
    pub zeros: u32,
    pub ones: u32,
    pub other: u32,
}

impl GhzSummary {
    pub fn is_valid(&self) -> bool {
        self.other == 0
    }

    pub fn p_zero(&self) -> f64 {
        if self.shots == 0 {
            return 0.0;
        }
        self.zeros as f64 / self.shots as f64
    }
}

/// Count all-zeros / all-ones / other outcomes of width `n`.
pub fn validate_ghz_output(table: &ShotTable, n: u16) -> GhzSummary {
    let zeros_str = "0".repeat(n as usize);
    let ones_str = "1".repeat(n as usize);
    let mut zeros = 0;
    let mut ones = 0;
    let mut other = 0;
    for s in &table.bitstrings {
        if *s == zeros_str {
            zeros += 1;
        } else if *s == ones_str {
            ones += 1;
        } else {
            other += 1;
        }
    }
    GhzSummary {
        n,
        shots: table.shots,
        zeros,
        ones,
        other,
    }
}
