//! Collective operations built from the point-to-point primitives: broadcast,
//! scatter driven by the qubit-device mapping array, gather, and the two-tier
//! collect-plus-distribute allgather.

use std::sync::Mutex;

use crate::domain::{DeviceIdentifier, Qrank, Rank};
use crate::error::{Error, Result};
use crate::messaging::{decode_result_payload, encode_result_payload, ShotTable, WaveformBlock};
use crate::runtime::RuntimeHandle;

/// Qubit-device mapping array: group `i` lists the global qubit indices that
/// execute on qrank `i`. Group extent marks the boundary; position defines
/// the target device.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SendQ {
    pub groups: Vec<Vec<u16>>,
}

impl SendQ {
    /// Total number of qubits covered.
    pub fn n_qubits(&self) -> usize {
        self.groups.iter().map(|g| g.len()).sum()
    }

    /// Groups must be disjoint and cover exactly 0..n-1.
    pub fn validate_coverage(&self) -> Result<()> {
        let n = self.n_qubits();
        let mut seen = vec![false; n];
        for (i, group) in self.groups.iter().enumerate() {
            for &q in group {
                if (q as usize) >= n {
                    return Err(Error::Mapping(format!(
                        "group {i} names qubit {q}, outside 0..{n}"
                    )));
                }
                if seen[q as usize] {
                    return Err(Error::Mapping(format!(
                        "qubit {q} appears in more than one group"
                    )));
                }
                seen[q as usize] = true;
            }
        }
        // n == sum of group sizes, so full coverage follows from no duplicates.
        Ok(())
    }
}

/// Contiguous equal-granularity mapping: group 0 takes qubits 0..s0, group 1
/// the next s1, and so on.
pub fn build_send_q(n_qubits: u16, fragment_sizes: &[u16]) -> Result<SendQ> {
    let total: u32 = fragment_sizes.iter().map(|&s| s as u32).sum();
    if total != n_qubits as u32 {
        return Err(Error::Shape(format!(
            "fragment sizes sum to {total}, expected {n_qubits}"
        )));
    }
    let mut groups = Vec::with_capacity(fragment_sizes.len());
    let mut next = 0u16;
    for &size in fragment_sizes {
        groups.push((next..next + size).collect());
        next += size;
    }
    Ok(SendQ { groups })
}

/// Aggregated results, ordered by qrank. `complete` is false when any source
/// failed to deliver; `missing` names the absent devices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GatherResult {
    pub tables: Vec<ShotTable>,
    pub complete: bool,
    pub missing: Vec<DeviceIdentifier>,
}

/// Serialized layout: `count (u16) | per table: qrank (u32), RESULT payload`.
pub fn encode_gather_result(result: &GatherResult) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&(result.tables.len() as u16).to_le_bytes());
    for table in &result.tables {
        buf.extend_from_slice(&table.qrank.to_le_bytes());
        buf.extend_from_slice(&encode_result_payload(table)?);
    }
    Ok(buf)
}

pub fn decode_gather_result(bytes: &[u8]) -> Result<GatherResult> {
    let fail = |what: &str| Error::Protocol(format!("gather result: {what}"));
    if bytes.len() < 2 {
        return Err(fail("too short"));
    }
    let count = u16::from_le_bytes(bytes[0..2].try_into().unwrap());
    let mut offset = 2usize;
    let mut tables = Vec::with_capacity(count as usize);
    for _ in 0..count {
        if bytes.len() < offset + 4 + 6 {
            return Err(fail("truncated table header"));
        }
        let qrank = u32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap());
        offset += 4;
        let shots = u32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap());
        let width =
            u16::from_le_bytes(bytes[offset + 4..offset + 6].try_into().unwrap()) as usize;
        let len = 6 + width.div_ceil(8) * shots as usize;
        if bytes.len() < offset + len {
            return Err(fail("truncated table payload"));
        }
        tables.push(decode_result_payload(&bytes[offset..offset + len], qrank)?);
        offset += len;
    }
    if offset != bytes.len() {
        return Err(fail("trailing bytes"));
    }
    Ok(GatherResult {
        tables,
        complete: true,
        missing: Vec::new(),
    })
}

/// Fan-out strategy for one-to-many collectives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FanoutMode {
    /// One target after another; the testable baseline.
    Sequential,
    /// Up to `width` concurrent point-to-point transfers.
    Parallel { width: usize },
}

/// Tag used for the classical distribution leg of allgather, derived from the
/// user's gather tag.
fn allgather_dist_tag(tag: u32) -> u32 {
    0xFFFE_0000 ^ tag
}

impl RuntimeHandle {
    fn fan_out(&self, work: Vec<(Qrank, WaveformBlock)>, tag: u32, mode: FanoutMode) -> Result<()> {
        let failures: Mutex<Vec<(DeviceIdentifier, String)>> = Mutex::new(Vec::new());
        let send_one = |qrank: Qrank, block: &WaveformBlock| {
            let dev = match self.device_of(qrank) {
                Ok(d) => d.clone(),
                Err(e) => {
                    failures
                        .lock()
                        .unwrap()
                        .push((DeviceIdentifier::new("?", 0, qrank), e.to_string()));
                    return;
                }
            };
            if let Err(e) = self.send_block(&dev, tag, block) {
                failures.lock().unwrap().push((dev, e.to_string()));
            }
        };
        match mode {
            FanoutMode::Sequential => {
                for (qrank, block) in &work {
                    send_one(*qrank, block);
                }
            }
            FanoutMode::Parallel { width } => {
                let width = width.max(1);
                for chunk in work.chunks(width) {
                    std::thread::scope(|scope| {
                        for (qrank, block) in chunk {
                            scope.spawn(|| send_one(*qrank, block));
                        }
                    });
                }
            }
        }
        let failures = failures.into_inner().unwrap();
        if failures.is_empty() {
            return Ok(());
        }
        let reason = failures
            .iter()
            .map(|(d, e)| format!("{d}: {e}"))
            .collect::<Vec<_>>()
            .join("; ");
        Err(Error::Collective {
            failed: failures.into_iter().map(|(d, _)| d).collect(),
            reason,
        })
    }

    /// Deliver an identical payload to every target monitor. Already-delivered
    /// targets are not rolled back on partial failure; the error names every
    /// failed device.
    pub fn bcast(
        &self,
        template: &WaveformBlock,
        targets: &[Qrank],
        tag: u32,
        mode: FanoutMode,
    ) -> Result<()> {
        self.ensure_live()?;
        let mut work = Vec::with_capacity(targets.len());
        for &q in targets {
            let dev = self.device_of(q)?;
            work.push((q, template.readdressed(dev)));
        }
        self.fan_out(work, tag, mode)
    }

    /// Scatter per-group blocks according to the mapping array: block `i`
    /// goes to the device bound to qrank `i`.
    pub fn scatter(
        &self,
        blocks: &[WaveformBlock],
        send_q: &SendQ,
        tag: u32,
        mode: FanoutMode,
    ) -> Result<()> {
        self.ensure_live()?;
        if blocks.len() != send_q.groups.len() {
            return Err(Error::Shape(format!(
                "{} blocks for {} groups",
                blocks.len(),
                send_q.groups.len()
            )));
        }
        send_q.validate_coverage()?;
        for (i, (block, group)) in blocks.iter().zip(&send_q.groups).enumerate() {
            let mut local: Vec<u16> = block.channels.iter().map(|(q, _)| *q).collect();
            local.sort_unstable();
            let expect: Vec<u16> = (0..group.len() as u16).collect();
            if local != expect {
                return Err(Error::Shape(format!(
                    "block {i} channels must be re-indexed 0..{}",
                    group.len()
                )));
            }
        }
        let work = blocks
            .iter()
            .enumerate()
            .map(|(i, block)| {
                let qrank = i as Qrank;
                let dev = self.device_of(qrank)?;
                Ok((qrank, block.readdressed(dev)))
            })
            .collect::<Result<Vec<_>>>()?;
        self.fan_out(work, tag, mode)
    }

    /// Collect one result per source, ordered by qrank regardless of arrival
    /// order. Sources that time out are reported in `missing` with
    /// `complete = false` rather than failing the whole gather.
    pub fn gather(&self, sources: &[Qrank], tag: u32) -> Result<GatherResult> {
        self.ensure_live()?;
        let mut ordered: Vec<Qrank> = sources.to_vec();
        ordered.sort_unstable();
        ordered.dedup();
        let mut tables = Vec::with_capacity(ordered.len());
        let mut missing = Vec::new();
        for q in ordered {
            let dev = self.device_of(q)?.clone();
            match self.recv_shots(&dev, tag, usize::MAX) {
                Ok(table) => tables.push(table),
                Err(_) => missing.push(dev),
            }
        }
        Ok(GatherResult {
            complete: missing.is_empty(),
            tables,
            missing,
        })
    }

    /// Two-tier collect-plus-distribute: rank 0 gathers from the monitors,
    /// then fans the serialized result out to every classical rank. All ranks
    /// return byte-identical results.
    pub fn allgather(&self, sources: &[Qrank], tag: u32) -> Result<GatherResult> {
        self.ensure_live()?;
        let np = self.world().classical_count();
        if self.rank() == 0 {
            let result = self.gather(sources, tag)?;
            let bytes = encode_gather_result(&result)?;
            let mut failed_ranks: Vec<Rank> = Vec::new();
            for peer in 1..np {
                if self
                    .classical_send(peer, allgather_dist_tag(tag), &bytes)
                    .is_err()
                {
                    failed_ranks.push(peer);
                }
            }
            if !failed_ranks.is_empty() {
                return Err(Error::Collective {
                    failed: Vec::new(),
                    reason: format!("distribution failed for ranks {failed_ranks:?}"),
                });
            }
            Ok(result)
        } else {
            let bytes = self.classical_recv(0, allgather_dist_tag(tag))?;
            decode_gather_result(&bytes)
        }
    }
}
