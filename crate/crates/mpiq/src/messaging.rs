//! Point-to-point operations between classical processes and quantum
//! MonitorProcesses, plus classical-classical transfers. Waveform payloads
//! follow the node -> device -> qubit layout; all payload integers are
//! little-endian and bit-exact.
//!
//! EXECUTE payload: `shots (u32) | num_channels (u16) | per channel:
//! qubit_index (u16), stream_len (u32), stream bytes | circuit_digest (u64)`.
//! The digest is FNV-1a 64 over everything before the digest field.
//!
//! RESULT payload: `shots (u32) | width (u16) | packed bitstrings` with one
//! byte-padded row per shot, bit j of a row stored LSB-first in byte j/8.

use std::time::{Duration, Instant};

use crate::domain::{DeviceIdentifier, Qrank, Rank};
use crate::error::{Error, Result};
use crate::qsim::{encode_gate_stream, Circuit};
use crate::runtime::RuntimeHandle;
use crate::transport::{Envelope, Frame, MsgType};
use crate::util::fnv1a64;

/// Pre-compiled payload for one device: per-qubit channel streams plus shot
/// count and integrity digest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WaveformBlock {
    pub node_ip: String,
    pub device_id: u32,
    /// (qubit_index, gate-stream bytes), device-local indices.
    pub channels: Vec<(u16, Vec<u8>)>,
    pub shots: u32,
    pub circuit_digest: u64,
}

impl WaveformBlock {
    /// Compile a circuit into a block addressed to `target`.
    pub fn from_circuit(circuit: &Circuit, shots: u32, target: &DeviceIdentifier) -> Result<Self> {
        if shots == 0 {
            return Err(Error::Range("shots must be at least 1".into()));
        }
        let channels: Vec<(u16, Vec<u8>)> = encode_gate_stream(circuit)
            .into_iter()
            .enumerate()
            .map(|(q, stream)| (q as u16, stream))
            .collect();
        if channels.is_empty() {
            return Err(Error::Shape("a waveform block needs at least one channel".into()));
        }
        let digest = digest_of(shots, &channels);
        Ok(Self {
            node_ip: target.ip.clone(),
            device_id: target.device_id,
            channels,
            shots,
            circuit_digest: digest,
        })
    }

    /// Re-address a block to another device without recompiling.
    pub fn readdressed(&self, target: &DeviceIdentifier) -> Self {
        let mut block = self.clone();
        block.node_ip = target.ip.clone();
        block.device_id = target.device_id;
        block
    }

    /// Check every channel index against a device's qubit count.
    pub fn validate_for(&self, qubit_count: u16) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (q, _) in &self.channels {
            if *q >= qubit_count {
                return Err(Error::QubitRange {
                    index: *q,
                    qubit_count,
                });
            }
            if !seen.insert(*q) {
                return Err(Error::Shape(format!("duplicate channel for qubit {q}")));
            }
        }
        Ok(())
    }
}

fn digest_of(shots: u32, channels: &[(u16, Vec<u8>)]) -> u64 {
    fnv1a64(&execute_body(shots, channels))
}

fn execute_body(shots: u32, channels: &[(u16, Vec<u8>)]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&shots.to_le_bytes());
    buf.extend_from_slice(&(channels.len() as u16).to_le_bytes());
    for (qubit, stream) in channels {
        buf.extend_from_slice(&qubit.to_le_bytes());
        buf.extend_from_slice(&(stream.len() as u32).to_le_bytes());
        buf.extend_from_slice(stream);
    }
    buf
}

/// Serialize a block into the EXECUTE payload layout.
pub fn encode_execute_payload(block: &WaveformBlock) -> Vec<u8> {
    let mut buf = execute_body(block.shots, &block.channels);
    buf.extend_from_slice(&block.circuit_digest.to_le_bytes());
    buf
}

/// Parse an EXECUTE payload and verify its digest. The returned block is
/// addressed to `receiver`.
pub fn decode_execute_payload(bytes: &[u8], receiver: &DeviceIdentifier) -> Result<WaveformBlock> {
    let fail = |what: &str| Error::Protocol(format!("execute payload: {what}"));
    if bytes.len() < 4 + 2 + 8 {
        return Err(fail("too short"));
    }
    // Verify the digest before structural parsing: it covers every byte up
    // to the trailing checksum, so any in-flight corruption surfaces as an
    // integrity failure rather than a parse error.
    let body_len = bytes.len() - 8;
    let claimed = u64::from_le_bytes(bytes[body_len..].try_into().unwrap());
    let recomputed = fnv1a64(&bytes[..body_len]);
    if claimed != recomputed {
        return Err(Error::Integrity {
            want: claimed,
            got: recomputed,
        });
    }
    let shots = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let num_channels = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
    let mut offset = 6usize;
    let mut channels = Vec::with_capacity(num_channels as usize);
    for _ in 0..num_channels {
        if body_len < offset + 6 {
            return Err(fail("truncated channel header"));
        }
        let qubit = u16::from_le_bytes(bytes[offset..offset + 2].try_into().unwrap());
        let stream_len =
            u32::from_le_bytes(bytes[offset + 2..offset + 6].try_into().unwrap()) as usize;
        offset += 6;
        if body_len < offset + stream_len {
            return Err(fail("truncated channel stream"));
        }
        channels.push((qubit, bytes[offset..offset + stream_len].to_vec()));
        offset += stream_len;
    }
    if offset != body_len {
        return Err(fail("trailing bytes"));
    }
    if shots == 0 {
        return Err(fail("zero shots"));
    }
    if channels.is_empty() {
        return Err(fail("no channels"));
    }
    Ok(WaveformBlock {
        node_ip: receiver.ip.clone(),
        device_id: receiver.device_id,
        channels,
        shots,
        circuit_digest: claimed,
    })
}

/// Measurement results for one fragment: fixed-width bitstrings, one per shot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShotTable {
    pub qrank: Qrank,
    pub shots: u32,
    pub bitstrings: Vec<String>,
}

impl ShotTable {
    pub fn width(&self) -> usize {
        self.bitstrings.first().map_or(0, |s| s.len())
    }

    fn validate(&self) -> Result<()> {
        if self.bitstrings.len() != self.shots as usize {
            return Err(Error::Shape(format!(
                "{} bitstrings for {} shots",
                self.bitstrings.len(),
                self.shots
            )));
        }
        let width = self.width();
        if self.bitstrings.iter().any(|s| s.len() != width) {
            return Err(Error::Shape("bitstring widths differ".into()));
        }
        Ok(())
    }
}

/// Serialize a shot table into the RESULT payload layout.
pub fn encode_result_payload(table: &ShotTable) -> Result<Vec<u8>> {
    table.validate()?;
    let width = table.width();
    if width > u16::MAX as usize {
        return Err(Error::Shape(format!("width {width} too large")));
    }
    let row_bytes = width.div_ceil(8);
    let mut buf = Vec::with_capacity(6 + row_bytes * table.shots as usize);
    buf.extend_from_slice(&table.shots.to_le_bytes());
    buf.extend_from_slice(&(width as u16).to_le_bytes());
    for bits in &table.bitstrings {
        let mut row = vec![0u8; row_bytes];
        for (j, c) in bits.chars().enumerate() {
            match c {
                '1' => row[j / 8] |= 1 << (j % 8),
                '0' => {}
                other => {
                    return Err(Error::Shape(format!("invalid bit character {other:?}")));
                }
            }
        }
        buf.extend_from_slice(&row);
    }
    Ok(buf)
}

/// Parse a RESULT payload. `qrank` identifies the producing monitor.
pub fn decode_result_payload(bytes: &[u8], qrank: Qrank) -> Result<ShotTable> {
    if bytes.len() < 6 {
        return Err(Error::Protocol("result payload too short".into()));
    }
    let shots = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let width = u16::from_le_bytes(bytes[4..6].try_into().unwrap()) as usize;
    let row_bytes = width.div_ceil(8);
    let expected = 6 + row_bytes * shots as usize;
    if bytes.len() != expected {
        return Err(Error::Protocol(format!(
            "result payload is {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    let mut bitstrings = Vec::with_capacity(shots as usize);
    for row in bytes[6..].chunks_exact(row_bytes.max(1)) {
        let s: String = (0..width)
            .map(|j| {
                if row[j / 8] >> (j % 8) & 1 == 1 {
                    '1'
                } else {
                    '0'
                }
            })
            .collect();
        bitstrings.push(s);
    }
    // width 0 edge: chunks_exact(0) is invalid, guard above with max(1);
    // zero-width tables are rejected here instead.
    if width == 0 {
        return Err(Error::Protocol("zero-width result".into()));
    }
    Ok(ShotTable {
        qrank,
        shots,
        bitstrings,
    })
}

/// Receipt acknowledgement codes carried in ACK payloads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum AckStatus {
    Ok = 0,
    Integrity = 1,
    QubitRange = 2,
    Decode = 3,
    Protocol = 4,
    State = 5,
}

/// ACK payload: `status (u8) | error text (u32 length + utf-8) when nonzero`.
pub fn encode_ack_payload(status: AckStatus, text: &str) -> Vec<u8> {
    let mut buf = vec![status as u8];
    if status != AckStatus::Ok {
        buf.extend_from_slice(&(text.len() as u32).to_le_bytes());
        buf.extend_from_slice(text.as_bytes());
    }
    buf
}

pub fn decode_ack_payload(bytes: &[u8]) -> Result<(u8, String)> {
    if bytes.is_empty() {
        return Err(Error::Protocol("empty ack payload".into()));
    }
    let status = bytes[0];
    if status == 0 {
        return Ok((0, String::new()));
    }
    if bytes.len() < 5 {
        return Err(Error::Protocol("truncated ack payload".into()));
    }
    let len = u32::from_le_bytes(bytes[1..5].try_into().unwrap()) as usize;
    if bytes.len() != 5 + len {
        return Err(Error::Protocol("ack text length mismatch".into()));
    }
    let text = String::from_utf8(bytes[5..].to_vec())
        .map_err(|_| Error::Protocol("ack text is not utf-8".into()))?;
    Ok((status, text))
}

fn ack_to_error(status: u8, text: String) -> Error {
    match status {
        1 => Error::Protocol(format!("monitor rejected payload integrity: {text}")),
        2 => Error::Protocol(format!("monitor rejected qubit range: {text}")),
        3 => Error::Decode(text),
        4 => Error::Protocol(text),
        5 => Error::State(text),
        other => Error::Protocol(format!("unknown ack status {other}: {text}")),
    }
}

impl RuntimeHandle {
    /// Send a waveform block to a device's monitor. Completes when the
    /// monitor acknowledges receipt (not execution).
    pub fn send_block(&self, dest: &DeviceIdentifier, tag: u32, block: &WaveformBlock) -> Result<()> {
        self.ensure_live()?;
        let qrank = self.qrank_of(dest)?;
        let qubit_count = self.world().topology.quantum_vps[qrank as usize].qubit_count;
        block.validate_for(qubit_count)?;

        let payload = encode_execute_payload(block);
        let env = Envelope::new(MsgType::Execute, self.context(), self.rank(), qrank, tag);
        self.post_to_monitor(qrank, Frame::new(env, payload))?;

        let timeout = self.timeout_ms();
        let deadline = Instant::now() + Duration::from_millis(timeout);
        let ack = self.recv_q_matching(qrank, deadline, timeout, |f| {
            f.envelope.msg_type == MsgType::Ack && f.envelope.tag == tag
        })?;
        let (status, text) = decode_ack_payload(&ack.payload)?;
        if status != 0 {
            return Err(ack_to_error(status, text));
        }
        Ok(())
    }

    /// Receive a result table from a device's monitor, blocking until a
    /// RESULT with matching source and tag arrives. Frames with other tags
    /// are queued, not dropped. A payload larger than `max_len` is preserved
    /// for a later receive with a bigger budget.
    pub fn recv_shots(
        &self,
        source: &DeviceIdentifier,
        tag: u32,
        max_len: usize,
    ) -> Result<ShotTable> {
        self.recv_shots_timeout(source, tag, max_len, self.timeout_ms())
    }

    pub fn recv_shots_timeout(
        &self,
        source: &DeviceIdentifier,
        tag: u32,
        max_len: usize,
        timeout_ms: u64,
    ) -> Result<ShotTable> {
        self.ensure_live()?;
        let qrank = self.qrank_of(source)?;
        let deadline = Instant::now() + Duration::from_millis(timeout_ms);
        let frame = self.recv_q_matching(qrank, deadline, timeout_ms, |f| {
            f.envelope.msg_type == MsgType::Result
                && f.envelope.src == qrank
                && f.envelope.tag == tag
        })?;
        if frame.payload.len() > max_len {
            let actual = frame.payload.len();
            self.push_q_pending_front(qrank, frame);
            return Err(Error::Truncation { actual, max_len });
        }
        decode_result_payload(&frame.payload, qrank)
    }

    /// Send opaque bytes to a classical peer. Completes once the peer's
    /// runtime has buffered the message; a self-send buffers locally.
    pub fn classical_send(&self, peer: Rank, tag: u32, bytes: &[u8]) -> Result<()> {
        self.ensure_live()?;
        if peer >= self.world().classical_count() {
            return Err(Error::Address(format!("unknown rank {peer}")));
        }
        let env = Envelope::new(MsgType::Data, self.context(), self.rank(), peer, tag);
        let frame = Frame::new(env, bytes.to_vec());
        if peer == self.rank() {
            let inbox = self.inbox()?;
            inbox
                .self_tx
                .send(frame)
                .map_err(|_| Error::State("inbox closed".into()))?;
            return Ok(());
        }
        let channel = self.cchannel(peer)?;
        channel.send_frame(frame)?;
        let ack = channel.recv_frame(self.timeout_ms())?;
        if ack.envelope.msg_type != MsgType::Ack || ack.envelope.tag != tag {
            return Err(Error::Protocol(format!(
                "expected delivery ack for tag {tag}, got {:?} tag {}",
                ack.envelope.msg_type, ack.envelope.tag
            )));
        }
        Ok(())
    }

    /// Receive opaque bytes from a classical peer with matching tag.
    pub fn classical_recv(&self, peer: Rank, tag: u32) -> Result<Vec<u8>> {
        self.classical_recv_timeout(peer, tag, self.timeout_ms())
    }

    pub fn classical_recv_timeout(&self, peer: Rank, tag: u32, timeout_ms: u64) -> Result<Vec<u8>> {
        self.ensure_live()?;
        if peer >= self.world().classical_count() {
            return Err(Error::Address(format!("unknown rank {peer}")));
        }
        let inbox = self.inbox()?;
        let matches = |f: &Frame| {
            f.envelope.msg_type == MsgType::Data
                && f.envelope.src == peer
                && f.envelope.tag == tag
        };
        {
            let mut pending = inbox.pending.lock().unwrap();
            if let Some(pos) = pending.iter().position(matches) {
                return Ok(pending.remove(pos).unwrap().payload);
            }
        }
        let deadline = Instant::now() + Duration::from_millis(timeout_ms);
        let arrivals = inbox.arrivals.lock().unwrap();
        loop {
            let now = Instant::now();
            if now >= deadline {
                return Err(Error::Timeout(timeout_ms));
            }
            let frame = arrivals
                .recv_timeout(deadline - now)
                .map_err(|_| Error::Timeout(timeout_ms))?;
            if frame.envelope.context != self.context() {
                self.note_cross_context_rejection();
                continue;
            }
            if matches(&frame) {
                return Ok(frame.payload);
            }
            inbox.pending.lock().unwrap().push_back(frame);
        }
    }
}
