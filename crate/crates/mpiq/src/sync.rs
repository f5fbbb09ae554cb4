//! The heterogeneous hybrid barrier: a classical-classical dissemination
//! barrier (flag 0) and a quantum-quantum barrier (flag 2) built from socket
//! ready/release rounds with clock-offset-corrected release targets.

use std::time::{Duration, Instant};

use crate::domain::{DeviceIdentifier, Qrank};
use crate::error::{Error, Result};
use crate::runtime::RuntimeHandle;
use crate::transport::{Channel, Envelope, Frame, MsgType};
use crate::util::{env_u64, monotonic_ns};

/// Barrier flag values. Only classical-classical (0) and quantum-quantum (2)
/// are defined; everything else is rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BarrierFlag {
    Classical = 0,
    Quantum = 2,
}

pub const CC: u8 = 0;
pub const QQ: u8 = 2;

impl BarrierFlag {
    pub fn from_raw(flag: u8) -> Result<Self> {
        match flag {
            0 => Ok(BarrierFlag::Classical),
            2 => Ok(BarrierFlag::Quantum),
            other => Err(Error::Flag(other)),
        }
    }
}

/// How long a measured offset stays fresh before the barrier re-measures.
const OFFSET_TTL_NS: u64 = 10_000_000_000;

/// Reserved tag space for collective-internal traffic.
pub(crate) const TAG_CC_BARRIER_BASE: u32 = 0xFFFF_0000;

/// One clock-offset measurement against a monitor, Cristian style: the
/// monitor's clock reads `ours + offset` within `± rtt/2`.
#[derive(Debug, Clone)]
pub struct ClockOffset {
    pub peer: DeviceIdentifier,
    pub offset_ns: i64,
    pub rtt_ns: u64,
    pub measured_at_ns: u64,
}

impl ClockOffset {
    pub fn offset_ms(&self) -> f64 {
        self.offset_ns as f64 / 1e6
    }

    pub fn rtt_ms(&self) -> f64 {
        self.rtt_ns as f64 / 1e6
    }

    fn is_fresh(&self, now_ns: u64) -> bool {
        now_ns.saturating_sub(self.measured_at_ns) <= OFFSET_TTL_NS
    }
}

/// The outcome of a quantum barrier: the coordinator-frame release target and
/// each monitor's actual release instant mapped back into the coordinator's
/// clock frame.
#[derive(Debug, Clone)]
pub struct QuantumBarrierRelease {
    pub target_ns: u64,
    /// (qrank, offset-corrected actual release, coordinator clock frame).
    pub releases: Vec<(Qrank, u64)>,
}

impl QuantumBarrierRelease {
    /// Largest pairwise gap between corrected release instants.
    pub fn spread_ms(&self) -> f64 {
        let min = self.releases.iter().map(|(_, t)| *t).min();
        let max = self.releases.iter().map(|(_, t)| *t).max();
        match (min, max) {
            (Some(lo), Some(hi)) => (hi - lo) as f64 / 1e6,
            _ => 0.0,
        }
    }
}

/// Best-of-5 ping exchange over one channel: keeps the round with the
/// smallest round trip. Suitable during initialization when no other traffic
/// shares the channel; once results may be in flight, use
/// [`RuntimeHandle::measure_offset`], which queues unrelated frames instead
/// of skipping them.
pub fn estimate_clock_offset(
    channel: &Channel,
    context: u32,
    rank: u32,
    qrank: Qrank,
    peer: DeviceIdentifier,
    timeout_ms: u64,
) -> Result<ClockOffset> {
    measure_offset_rounds(context, rank, qrank, peer, |frame| {
        channel.send_frame(frame)?;
        let deadline = Instant::now() + Duration::from_millis(timeout_ms);
        loop {
            let now = Instant::now();
            if now >= deadline {
                return Err(Error::Timeout(timeout_ms));
            }
            let budget = (deadline - now).as_millis().max(1) as u64;
            let reply = channel.recv_frame(budget)?;
            if reply.envelope.msg_type == MsgType::Pong {
                return Ok(reply);
            }
        }
    })
}

/// Run five ping/pong rounds through `exchange` and keep the one with the
/// smallest round trip.
fn measure_offset_rounds<F>(
    context: u32,
    rank: u32,
    qrank: Qrank,
    peer: DeviceIdentifier,
    mut exchange: F,
) -> Result<ClockOffset>
where
    F: FnMut(Frame) -> Result<Frame>,
{
    let mut best: Option<ClockOffset> = None;
    for round in 0..5 {
        let tag = 0xFFFF_FF00 + round;
        let t0 = monotonic_ns();
        let ping = Frame::new(
            Envelope::new(MsgType::Ping, context, rank, qrank, tag),
            t0.to_le_bytes().to_vec(),
        );
        let pong = exchange(ping)?;
        let t1 = monotonic_ns();
        if pong.payload.len() != 8 {
            return Err(Error::Protocol("pong payload must be 8 bytes".into()));
        }
        let t_m = u64::from_le_bytes(pong.payload[..8].try_into().unwrap());
        let rtt_ns = t1.saturating_sub(t0);
        let offset_ns = (t_m as i128 - (t0 as i128 + rtt_ns as i128 / 2)) as i64;
        let candidate = ClockOffset {
            peer: peer.clone(),
            offset_ns,
            rtt_ns,
            measured_at_ns: t1,
        };
        best = match best {
            Some(prev) if prev.rtt_ns <= candidate.rtt_ns => Some(prev),
            _ => Some(candidate),
        };
    }
    Ok(best.expect("five rounds always produce a measurement"))
}

impl RuntimeHandle {
    /// Measure (or re-measure) the clock offset to one monitor, queueing any
    /// unrelated frames that arrive meanwhile.
    pub fn measure_offset(&self, qrank: Qrank) -> Result<ClockOffset> {
        self.ensure_live()?;
        let peer = self.device_of(qrank)?.clone();
        let context = self.context();
        let rank = self.rank();
        let timeout_ms = self.timeout_ms();
        let offset = measure_offset_rounds(context, rank, qrank, peer, |frame| {
            let tag = frame.envelope.tag;
            self.post_to_monitor(qrank, frame)?;
            let deadline = Instant::now() + Duration::from_millis(timeout_ms);
            self.recv_q_matching(qrank, deadline, timeout_ms, |f| {
                f.envelope.msg_type == MsgType::Pong && f.envelope.tag == tag
            })
        })?;
        self.offsets
            .lock()
            .unwrap()
            .insert(qrank, offset.clone());
        Ok(offset)
    }

    /// Cached offset for a monitor, if any.
    pub fn offset_of(&self, qrank: Qrank) -> Option<ClockOffset> {
        self.offsets.lock().unwrap().get(&qrank).cloned()
    }

    /// The hybrid barrier. Flag 0 synchronizes the classical ranks; flag 2
    /// brings every monitor to an aligned release instant. All other flags
    /// are rejected.
    pub fn barrier(&self, flag: u8) -> Result<()> {
        self.ensure_live()?;
        match BarrierFlag::from_raw(flag)? {
            BarrierFlag::Classical => self.classical_barrier(),
            BarrierFlag::Quantum => {
                let qranks = self.world().group.quantum_qranks.clone();
                self.quantum_barrier(&qranks).map(|_| ())
            }
        }
    }

    /// Two-phase dissemination barrier among classical ranks: everyone
    /// reports to rank 0, then rank 0 releases everyone.
    fn classical_barrier(&self) -> Result<()> {
        let np = self.world().classical_count();
        let generation = self
            .barrier_generation
            .fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        if np == 1 {
            return Ok(());
        }
        let tag = TAG_CC_BARRIER_BASE.wrapping_add(generation % 0xFFFF);
        if self.rank() == 0 {
            let mut absent = Vec::new();
            for peer in 1..np {
                if self.classical_recv(peer, tag).is_err() {
                    absent.push(peer);
                }
            }
            if !absent.is_empty() {
                return Err(Error::BarrierTimeoutRanks(absent));
            }
            for peer in 1..np {
                self.classical_send(peer, tag, &[])?;
            }
            Ok(())
        } else {
            self.classical_send(0, tag, &[])?;
            self.classical_recv(0, tag)?;
            Ok(())
        }
    }

    /// Quantum barrier over a set of monitors: collect SYNC_READY from every
    /// participant, pick a release target `now + 2*max_rtt + margin`, send
    /// each monitor its offset-corrected local target, and wait for the
    /// corrected release confirmations.
    pub fn quantum_barrier(&self, qranks: &[Qrank]) -> Result<QuantumBarrierRelease> {
        self.ensure_live()?;
        if qranks.is_empty() {
            let now = monotonic_ns();
            return Ok(QuantumBarrierRelease {
                target_ns: now,
                releases: Vec::new(),
            });
        }

        // Freshen stale offsets first; a dead monitor surfaces here.
        let mut missing: Vec<DeviceIdentifier> = Vec::new();
        let now = monotonic_ns();
        for &q in qranks {
            let fresh = self
                .offset_of(q)
                .map(|o| o.is_fresh(now))
                .unwrap_or(false);
            if !fresh && self.measure_offset(q).is_err() {
                missing.push(self.device_of(q)?.clone());
            }
        }
        if !missing.is_empty() {
            return Err(Error::BarrierTimeout(missing));
        }

        // Phase 1: arm everyone and collect readiness.
        let context = self.context();
        let rank = self.rank();
        let timeout_ms = self.timeout_ms();
        let mut armed: Vec<Qrank> = Vec::new();
        for &q in qranks {
            let env = Envelope::new(MsgType::SyncReady, context, rank, q, 0);
            match self.post_to_monitor(q, Frame::new(env, q.to_le_bytes().to_vec())) {
                Ok(()) => armed.push(q),
                Err(_) => missing.push(self.device_of(q)?.clone()),
            }
        }
        for &q in &armed {
            let deadline = Instant::now() + Duration::from_millis(timeout_ms);
            let ready = self.recv_q_matching(q, deadline, timeout_ms, |f| {
                f.envelope.msg_type == MsgType::SyncReady && f.envelope.src == q
            });
            match ready {
                Ok(frame) => {
                    if frame.payload.len() != 4
                        || u32::from_le_bytes(frame.payload[..4].try_into().unwrap()) != q
                    {
                        missing.push(self.device_of(q)?.clone());
                    }
                }
                Err(_) => missing.push(self.device_of(q)?.clone()),
            }
        }
        if !missing.is_empty() {
            return Err(Error::BarrierTimeout(missing));
        }

        // Phase 2: aligned release.
        let margin_ns = env_u64("MPIQ_BARRIER_MARGIN_MS", 20) * 1_000_000;
        let offsets = self.offsets.lock().unwrap().clone();
        let max_rtt = qranks
            .iter()
            .filter_map(|q| offsets.get(q).map(|o| o.rtt_ns))
            .max()
            .unwrap_or(0);
        let target_ns = monotonic_ns() + 2 * max_rtt + margin_ns;

        for &q in qranks {
            let offset = offsets[&q].offset_ns;
            let target_local = (target_ns as i128 + offset as i128).max(0) as u64;
            let env = Envelope::new(MsgType::SyncRelease, context, rank, q, 0);
            if self
                .post_to_monitor(q, Frame::new(env, target_local.to_le_bytes().to_vec()))
                .is_err()
            {
                missing.push(self.device_of(q)?.clone());
            }
        }

        let mut releases = Vec::with_capacity(qranks.len());
        for &q in qranks {
            let deadline = Instant::now() + Duration::from_millis(timeout_ms);
            match self.recv_q_matching(q, deadline, timeout_ms, |f| {
                f.envelope.msg_type == MsgType::SyncRelease && f.envelope.src == q
            }) {
                Ok(frame) if frame.payload.len() == 8 => {
                    let actual_local = u64::from_le_bytes(frame.payload[..8].try_into().unwrap());
                    let corrected =
                        (actual_local as i128 - offsets[&q].offset_ns as i128).max(0) as u64;
                    releases.push((q, corrected));
                }
                _ => missing.push(self.device_of(q)?.clone()),
            }
        }
        if !missing.is_empty() {
            return Err(Error::BarrierTimeout(missing));
        }

        Ok(QuantumBarrierRelease {
            target_ns,
            releases,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn only_cc_and_qq_flags_exist() {
        assert_eq!(BarrierFlag::from_raw(0).unwrap(), BarrierFlag::Classical);
        assert_eq!(BarrierFlag::from_raw(2).unwrap(), BarrierFlag::Quantum);
        for bad in [1u8, 3, 4, 255] {
            assert!(matches!(BarrierFlag::from_raw(bad), Err(Error::Flag(b)) if b == bad));
        }
    }

    #[test]
    fn spread_of_empty_release_is_zero() {
        let release = QuantumBarrierRelease {
            target_ns: 0,
            releases: vec![],
        };
        assert_eq!(release.spread_ms(), 0.0);
    }

    #[test]
    fn spread_measures_extremes() {
        let release = QuantumBarrierRelease {
            target_ns: 0,
            releases: vec![(0, 1_000_000), (1, 4_000_000), (2, 2_000_000)],
        };
        assert!((release.spread_ms() - 3.0).abs() < 1e-9);
    }
}
