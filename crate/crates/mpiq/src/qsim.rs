//! Statevector backend standing in for a QPU and its control system: circuit
//! representation, gate application, sampling, and the per-qubit gate-stream
//! container that travels inside waveform payloads.
//!
//! Bit-order convention, fixed project-wide: qubit 0 is the leftmost character
//! of a bitstring and the least significant bit of an amplitude index.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::messaging::ShotTable;

/// Hard cap on simulated qubits (2^26 amplitudes is about 1 GiB).
pub const MAX_QUBITS: u16 = 26;

/// Stream op codes, one byte each on the wire.
pub const STREAM_H: u8 = 1;
pub const STREAM_X: u8 = 2;
pub const STREAM_CNOT_CTRL: u8 = 3;
pub const STREAM_CNOT_TGT: u8 = 4;
pub const STREAM_MEASURE: u8 = 5;
/// partner_qubit sentinel when the op has no partner.
pub const NO_PARTNER: u16 = 0xFFFF;

/// A single gate operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateOp {
    H { qubit: u16 },
    X { qubit: u16 },
    Cnot { control: u16, target: u16 },
    MeasureAll,
}

/// An ordered gate list over `n_qubits` qubits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Circuit {
    pub n_qubits: u16,
    pub ops: Vec<GateOp>,
}

impl Circuit {
    pub fn new(n_qubits: u16) -> Result<Self> {
        if n_qubits == 0 || n_qubits > MAX_QUBITS {
            return Err(Error::Range(format!(
                "n_qubits must be in [1, {MAX_QUBITS}], got {n_qubits}"
            )));
        }
        Ok(Self {
            n_qubits,
            ops: Vec::new(),
        })
    }

    fn check_index(&self, qubit: u16) -> Result<()> {
        if qubit >= self.n_qubits {
            return Err(Error::QubitRange {
                index: qubit,
                qubit_count: self.n_qubits,
            });
        }
        Ok(())
    }

    pub fn h(&mut self, qubit: u16) -> Result<&mut Self> {
        self.check_index(qubit)?;
        self.ops.push(GateOp::H { qubit });
        Ok(self)
    }

    pub fn x(&mut self, qubit: u16) -> Result<&mut Self> {
        self.check_index(qubit)?;
        self.ops.push(GateOp::X { qubit });
        Ok(self)
    }

    pub fn cnot(&mut self, control: u16, target: u16) -> Result<&mut Self> {
        self.check_index(control)?;
        self.check_index(target)?;
        if control == target {
            return Err(Error::Range(format!(
                "cnot control and target must differ (both {control})"
            )));
        }
        self.ops.push(GateOp::Cnot { control, target });
        Ok(self)
    }

    pub fn measure_all(&mut self) -> &mut Self {
        self.ops.push(GateOp::MeasureAll);
        self
    }
}

/// GHZ preparation circuit: H on qubit 0, a CNOT chain, then measure-all.
pub fn build_ghz_circuit(n: u16) -> Result<Circuit> {
    let mut circuit = Circuit::new(n)?;
    circuit.h(0)?;
    for i in 0..n.saturating_sub(1) {
        circuit.cnot(i, i + 1)?;
    }
    circuit.measure_all();
    Ok(circuit)
}

/// Full statevector over `2^n_qubits` double-precision amplitudes.
#[derive(Debug, Clone)]
pub struct StateVector {
    pub n_qubits: u16,
    amplitudes: Vec<Complex64>,
}

impl StateVector {
    /// |0...0> on `n_qubits` qubits.
    pub fn new(n_qubits: u16) -> Result<Self> {
        if n_qubits == 0 || n_qubits > MAX_QUBITS {
            return Err(Error::Range(format!(
                "n_qubits must be in [1, {MAX_QUBITS}], got {n_qubits}"
            )));
        }
        let mut amplitudes = vec![Complex64::new(0.0, 0.0); 1usize << n_qubits];
        amplitudes[0] = Complex64::new(1.0, 0.0);
        Ok(Self {
            n_qubits,
            amplitudes,
        })
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amplitudes
    }

    pub fn l2_norm(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Apply one gate in place. MeasureAll is a marker and leaves the state
    /// untouched; sampling happens in [`simulate`].
    pub fn apply_gate(&mut self, op: GateOp) -> Result<()> {
        match op {
            GateOp::H { qubit } => {
                self.check_index(qubit)?;
                let bit = 1usize << qubit;
                let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
                for i in 0..self.amplitudes.len() {
                    if i & bit == 0 {
                        let a0 = self.amplitudes[i];
                        let a1 = self.amplitudes[i | bit];
                        self.amplitudes[i] = (a0 + a1) * inv_sqrt2;
                        self.amplitudes[i | bit] = (a0 - a1) * inv_sqrt2;
                    }
                }
            }
            GateOp::X { qubit } => {
                self.check_index(qubit)?;
                let bit = 1usize << qubit;
                for i in 0..self.amplitudes.len() {
                    if i & bit == 0 {
                        self.amplitudes.swap(i, i | bit);
                    }
                }
            }
            GateOp::Cnot { control, target } => {
                self.check_index(control)?;
                self.check_index(target)?;
                if control == target {
                    return Err(Error::Range("cnot control equals target".into()));
                }
                let cbit = 1usize << control;
                let tbit = 1usize << target;
                for i in 0..self.amplitudes.len() {
                    if i & cbit != 0 && i & tbit == 0 {
                        self.amplitudes.swap(i, i | tbit);
                    }
                }
            }
            GateOp::MeasureAll => {}
        }
        Ok(())
    }

    fn check_index(&self, qubit: u16) -> Result<()> {
        if qubit >= self.n_qubits {
            return Err(Error::QubitRange {
                index: qubit,
                qubit_count: self.n_qubits,
            });
        }
        Ok(())
    }
}

/// Amplitude index -> bitstring with qubit 0 leftmost.
pub fn index_to_bitstring(index: usize, n_qubits: u16) -> String {
    (0..n_qubits)
        .map(|q| if index >> q & 1 == 1 { '1' } else { '0' })
        .collect()
}

/// Evolve the circuit and sample measurement outcomes from |amplitude|^2
/// with a seeded generator. Deterministic per (circuit, shots, seed).
pub fn simulate(circuit: &Circuit, shots: u32, seed: u64) -> Result<ShotTable> {
    if shots == 0 {
        return Err(Error::Range("shots must be at least 1".into()));
    }
    let mut state = StateVector::new(circuit.n_qubits)?;
    for &op in &circuit.ops {
        state.apply_gate(op)?;
    }

    // Cumulative distribution over outcomes for inverse-CDF sampling.
    let mut cdf = Vec::with_capacity(state.amplitudes.len());
    let mut acc = 0.0f64;
    for a in state.amplitudes() {
        acc += a.norm_sqr();
        cdf.push(acc);
    }
    let total = acc;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bitstrings = Vec::with_capacity(shots as usize);
    for _ in 0..shots {
        let r: f64 = rng.gen::<f64>() * total;
        let idx = cdf.partition_point(|&c| c <= r).min(cdf.len() - 1);
        bitstrings.push(index_to_bitstring(idx, circuit.n_qubits));
    }
    Ok(ShotTable {
        qrank: 0,
        shots,
        bitstrings,
    })
}

/// Encode a circuit as one byte stream per qubit channel. Each entry is
/// 7 bytes: seq (u32 le) | kind (u8) | partner_qubit (u16 le). An op spanning
/// several qubits appears in every touched channel under the same global
/// sequence number so the decoder can re-merge total order; measure-all
/// touches every channel.
pub fn encode_gate_stream(circuit: &Circuit) -> Vec<Vec<u8>> {
    let mut channels = vec![Vec::new(); circuit.n_qubits as usize];
    let push = |channels: &mut Vec<Vec<u8>>, qubit: u16, seq: u32, kind: u8, partner: u16| {
        let ch = &mut channels[qubit as usize];
        ch.extend_from_slice(&seq.to_le_bytes());
        ch.push(kind);
        ch.extend_from_slice(&partner.to_le_bytes());
    };
    for (seq, &op) in circuit.ops.iter().enumerate() {
        let seq = seq as u32;
        match op {
            GateOp::H { qubit } => push(&mut channels, qubit, seq, STREAM_H, NO_PARTNER),
            GateOp::X { qubit } => push(&mut channels, qubit, seq, STREAM_X, NO_PARTNER),
            GateOp::Cnot { control, target } => {
                push(&mut channels, control, seq, STREAM_CNOT_CTRL, target);
                push(&mut channels, target, seq, STREAM_CNOT_TGT, control);
            }
            GateOp::MeasureAll => {
                for q in 0..circuit.n_qubits {
                    push(&mut channels, q, seq, STREAM_MEASURE, NO_PARTNER);
                }
            }
        }
    }
    channels
}

#[derive(Debug, Clone, Copy)]
struct StreamEntry {
    seq: u32,
    qubit: u16,
    kind: u8,
    partner: u16,
}

/// Decode per-qubit channels back into a circuit. Exact inverse of
/// [`encode_gate_stream`] for well-formed input.
pub fn decode_gate_stream(channels: &[(u16, Vec<u8>)]) -> Result<Circuit> {
    if channels.is_empty() {
        return Err(Error::Decode("no channels".into()));
    }
    let mut indices: Vec<u16> = channels.iter().map(|(q, _)| *q).collect();
    indices.sort_unstable();
    indices.dedup();
    if indices.len() != channels.len() {
        return Err(Error::Decode("duplicate qubit channel".into()));
    }
    let n_qubits = *indices.last().unwrap() + 1;
    if indices != (0..n_qubits).collect::<Vec<_>>() {
        return Err(Error::Decode("qubit channels are not dense from 0".into()));
    }

    let mut entries: Vec<StreamEntry> = Vec::new();
    for (qubit, stream) in channels {
        if stream.len() % 7 != 0 {
            return Err(Error::Decode(format!(
                "channel {qubit} stream length {} is not a multiple of 7",
                stream.len()
            )));
        }
        let mut last_seq: Option<u32> = None;
        for chunk in stream.chunks_exact(7) {
            let seq = u32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            let kind = chunk[4];
            let partner = u16::from_le_bytes([chunk[5], chunk[6]]);
            if let Some(prev) = last_seq {
                if seq <= prev {
                    return Err(Error::Decode(format!(
                        "channel {qubit} not time-ordered at seq {seq}"
                    )));
                }
            }
            last_seq = Some(seq);
            entries.push(StreamEntry {
                seq,
                qubit: *qubit,
                kind,
                partner,
            });
        }
    }

    entries.sort_by_key(|e| (e.seq, e.qubit));
    let mut circuit = Circuit::new(n_qubits)?;
    let mut expected_seq = 0u32;
    let mut i = 0;
    while i < entries.len() {
        let seq = entries[i].seq;
        if seq != expected_seq {
            return Err(Error::Decode(format!(
                "gap in sequence numbers: expected {expected_seq}, found {seq}"
            )));
        }
        let mut group_end = i;
        while group_end < entries.len() && entries[group_end].seq == seq {
            group_end += 1;
        }
        let group = &entries[i..group_end];
        decode_group(&mut circuit, group, n_qubits)?;
        expected_seq += 1;
        i = group_end;
    }
    Ok(circuit)
}

fn decode_group(circuit: &mut Circuit, group: &[StreamEntry], n_qubits: u16) -> Result<()> {
    let seq = group[0].seq;
    match group[0].kind {
        STREAM_H | STREAM_X if group.len() == 1 => {
            let e = group[0];
            if e.partner != NO_PARTNER {
                return Err(Error::Decode(format!(
                    "single-qubit op at seq {seq} carries a partner"
                )));
            }
            if e.kind == STREAM_H {
                circuit.h(e.qubit)?;
            } else {
                circuit.x(e.qubit)?;
            }
        }
        STREAM_CNOT_CTRL | STREAM_CNOT_TGT if group.len() == 2 => {
            let (ctrl, tgt) = match (group[0].kind, group[1].kind) {
                (STREAM_CNOT_CTRL, STREAM_CNOT_TGT) => (group[0], group[1]),
                (STREAM_CNOT_TGT, STREAM_CNOT_CTRL) => (group[1], group[0]),
                _ => {
                    return Err(Error::Decode(format!(
                        "inconsistent cnot halves at seq {seq}"
                    )))
                }
            };
            if ctrl.partner != tgt.qubit || tgt.partner != ctrl.qubit {
                return Err(Error::Decode(format!(
                    "cnot partner mismatch at seq {seq}"
                )));
            }
            circuit.cnot(ctrl.qubit, tgt.qubit)?;
        }
        STREAM_MEASURE => {
            if group.len() != n_qubits as usize
                || group.iter().any(|e| e.kind != STREAM_MEASURE)
            {
                return Err(Error::Decode(format!(
                    "measure at seq {seq} does not cover every channel"
                )));
            }
            circuit.measure_all();
        }
        kind => {
            return Err(Error::Decode(format!(
                "unknown or malformed op kind {kind} at seq {seq} (group of {})",
                group.len()
            )))
        }
    }
    Ok(())
}
