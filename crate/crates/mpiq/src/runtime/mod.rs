//! Initialization and finalization of the hybrid environment, plus the
//! multi-process launcher. A [`RuntimeHandle`] is one process's view of the
//! world domain: its rank, its channels to monitors, and (for multi-rank
//! jobs) a listener for classical peer traffic.

mod config;
mod launch;

pub use config::{
    load_qnode_config, parse_qnode_config, serialize_qnode_config, QuantumDevice,
    QuantumNodeConfig,
};
pub use launch::{launch, LaunchReport};

use std::collections::{HashMap, VecDeque};
use std::net::TcpListener;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, Ordering};
use std::sync::mpsc::{channel as mpsc_channel, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crate::domain::{
    map_quantum, resolve_qrank, ContextRegistry, DeviceIdentifier, HybridDomain, Qrank, Rank,
};
use crate::error::{Error, Result};
use crate::sync::ClockOffset;
use crate::transport::{
    open_channel, register_local, Channel, Envelope, Frame, MsgType,
};
use crate::util::{default_timeout_ms, env_u64};

/// What this process is within the hybrid environment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Classical,
    Monitor,
}

/// How classical ranks reach each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankTransport {
    /// Ranks live in this process and meet through the in-process hub.
    Local,
    /// Ranks are separate processes listening on TCP.
    Tcp,
}

/// Everything `init` needs beyond the parsed configuration.
#[derive(Debug, Clone)]
pub struct InitOptions {
    pub role: Role,
    pub my_rank: u32,
    pub classical_count: u32,
    /// Endpoint of every classical rank, indexed by rank. May be empty for
    /// single-rank jobs.
    pub rank_endpoints: Vec<(String, u16)>,
    pub rank_transport: RankTransport,
    pub seed: u64,
    pub timeout_ms: u64,
    /// When set, finalize on rank 0 shuts the monitors down.
    pub owns_monitors: bool,
}

impl Default for InitOptions {
    fn default() -> Self {
        Self {
            role: Role::Classical,
            my_rank: 0,
            classical_count: 1,
            rank_endpoints: Vec::new(),
            rank_transport: RankTransport::Local,
            seed: env_u64("MPIQ_SEED", 0x4d50_4951),
            timeout_ms: default_timeout_ms(),
            owns_monitors: false,
        }
    }
}

/// Inbound queue for classical peer traffic. Reader threads acknowledge and
/// enqueue arriving frames; `classical_recv` matches against the queue.
pub(crate) struct RankInbox {
    pub(crate) arrivals: Mutex<Receiver<Frame>>,
    pub(crate) pending: Mutex<VecDeque<Frame>>,
    pub(crate) self_tx: Sender<Frame>,
    shutdown: Arc<AtomicBool>,
    threads: Mutex<Vec<JoinHandle<()>>>,
}

/// One process's handle on the hybrid environment. Exactly one live handle
/// per process; operations after finalize fail with a state error.
pub struct RuntimeHandle {
    world: HybridDomain,
    registry: ContextRegistry,
    config: QuantumNodeConfig,
    role: Role,
    my_rank: u32,
    seed: u64,
    timeout_ms: u64,
    owns_monitors: bool,
    finalized: AtomicBool,
    rank_endpoints: Vec<(String, u16)>,
    qchannels: Mutex<HashMap<Qrank, Arc<Channel>>>,
    qpending: Mutex<HashMap<Qrank, VecDeque<Frame>>>,
    cchannels: Mutex<HashMap<Rank, Arc<Channel>>>,
    inbox: Option<RankInbox>,
    pub(crate) offsets: Mutex<HashMap<Qrank, ClockOffset>>,
    pub(crate) barrier_generation: AtomicU32,
    rejected_cross_context: Arc<AtomicU64>,
}

impl std::fmt::Debug for RuntimeHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RuntimeHandle")
            .field("role", &self.role)
            .field("rank", &self.my_rank)
            .field("context", &self.world.context)
            .field("qranks", &self.world.quantum_count())
            .finish()
    }
}

/// Initialize against a config file using environment-provided topology
/// (`MPIQ_NP`, `MPIQ_RANK_ADDRS`, `MPIQ_SEED`, `MPIQ_OWNS_MONITORS`).
pub fn mpiq_init(config_path: &Path, role: Role, my_rank: u32) -> Result<RuntimeHandle> {
    let config = load_qnode_config(config_path)?;
    let classical_count = env_u64("MPIQ_NP", 1) as u32;
    let rank_endpoints = std::env::var("MPIQ_RANK_ADDRS")
        .ok()
        .map(|spec| parse_rank_addrs(&spec))
        .transpose()?
        .unwrap_or_default();
    let opts = InitOptions {
        role,
        my_rank,
        classical_count,
        rank_endpoints,
        rank_transport: RankTransport::Tcp,
        owns_monitors: env_u64("MPIQ_OWNS_MONITORS", 0) != 0,
        ..InitOptions::default()
    };
    init_from_config(config, opts)
}

fn parse_rank_addrs(spec: &str) -> Result<Vec<(String, u16)>> {
    spec.split(',')
        .map(|part| {
            let (ip, port) = part
                .rsplit_once(':')
                .ok_or_else(|| Error::Config(format!("bad rank address {part:?}")))?;
            let port: u16 = port
                .parse()
                .map_err(|_| Error::Config(format!("bad rank port in {part:?}")))?;
            Ok((ip.to_string(), port))
        })
        .collect()
}

/// Initialize from an already-parsed configuration. The world domain is
/// constructed, every monitor answers a ping, and one clock-offset exchange
/// completes per monitor before the handle is returned.
pub fn init_from_config(config: QuantumNodeConfig, opts: InitOptions) -> Result<RuntimeHandle> {
    config.validate()?;
    if opts.classical_count == 0 {
        return Err(Error::Config("classical_count must be at least 1".into()));
    }
    if opts.my_rank >= opts.classical_count && opts.role == Role::Classical {
        return Err(Error::Config(format!(
            "rank {} outside 0..{}",
            opts.my_rank, opts.classical_count
        )));
    }
    if opts.classical_count > 1
        && opts.role == Role::Classical
        && opts.rank_endpoints.len() != opts.classical_count as usize
    {
        return Err(Error::Config(format!(
            "{} rank endpoints provided for {} ranks",
            opts.rank_endpoints.len(),
            opts.classical_count
        )));
    }

    let world = HybridDomain::world(opts.classical_count, &config)?;
    let rejections = Arc::new(AtomicU64::new(0));
    let inbox = if opts.role == Role::Classical {
        Some(start_inbox(&opts, world.context.0, rejections.clone())?)
    } else {
        None
    };

    let handle = RuntimeHandle {
        world,
        registry: ContextRegistry::new(),
        config,
        role: opts.role,
        my_rank: opts.my_rank,
        seed: opts.seed,
        timeout_ms: opts.timeout_ms,
        owns_monitors: opts.owns_monitors,
        finalized: AtomicBool::new(false),
        rank_endpoints: opts.rank_endpoints,
        qchannels: Mutex::new(HashMap::new()),
        qpending: Mutex::new(HashMap::new()),
        cchannels: Mutex::new(HashMap::new()),
        inbox,
        offsets: Mutex::new(HashMap::new()),
        barrier_generation: AtomicU32::new(0),
        rejected_cross_context: rejections,
    };

    if handle.role == Role::Classical {
        handle.handshake_monitors()?;
    }
    Ok(handle)
}

fn start_inbox(
    opts: &InitOptions,
    context: u32,
    rejections: Arc<AtomicU64>,
) -> Result<RankInbox> {
    let (tx, rx) = mpsc_channel();
    let shutdown = Arc::new(AtomicBool::new(false));
    let mut threads = Vec::new();

    if opts.classical_count > 1 {
        let (ip, port) = opts.rank_endpoints[opts.my_rank as usize].clone();
        match opts.rank_transport {
            RankTransport::Local => {
                let listener = register_local(&ip, port)?;
                let (tx, shutdown, rejections) = (tx.clone(), shutdown.clone(), rejections);
                threads.push(std::thread::spawn(move || {
                    while let Some(pipe) = listener.accept() {
                        if shutdown.load(Ordering::Acquire) {
                            break;
                        }
                        let channel = Channel::from_pipe(pipe, "rank-peer".into());
                        spawn_inbox_reader(
                            channel,
                            tx.clone(),
                            shutdown.clone(),
                            context,
                            rejections.clone(),
                        );
                    }
                }));
            }
            RankTransport::Tcp => {
                let listener = TcpListener::bind((ip.as_str(), port))
                    .map_err(|e| Error::Launch(format!("rank listener {ip}:{port}: {e}")))?;
                let (tx, shutdown, rejections) = (tx.clone(), shutdown.clone(), rejections);
                threads.push(std::thread::spawn(move || {
                    while let Ok((stream, _)) = listener.accept() {
                        if shutdown.load(Ordering::Acquire) {
                            break;
                        }
                        if let Ok(channel) = Channel::from_tcp(stream, "rank-peer".into()) {
                            spawn_inbox_reader(
                                channel,
                                tx.clone(),
                                shutdown.clone(),
                                context,
                                rejections.clone(),
                            );
                        }
                    }
                }));
            }
        }
    }

    Ok(RankInbox {
        arrivals: Mutex::new(rx),
        pending: Mutex::new(VecDeque::new()),
        self_tx: tx,
        shutdown,
        threads: Mutex::new(threads),
    })
}

/// Drain one inbound peer connection: frames from a foreign context are
/// rejected and counted; everything else is acknowledged on arrival and
/// handed to the inbox.
fn spawn_inbox_reader(
    channel: Channel,
    tx: Sender<Frame>,
    shutdown: Arc<AtomicBool>,
    context: u32,
    rejections: Arc<AtomicU64>,
) {
    std::thread::spawn(move || loop {
        if shutdown.load(Ordering::Acquire) {
            return;
        }
        match channel.recv_frame(200) {
            Ok(frame) => {
                if frame.envelope.context != context {
                    rejections.fetch_add(1, Ordering::Relaxed);
                    tracing::warn!(
                        got = frame.envelope.context,
                        expected = context,
                        "rejecting cross-context frame"
                    );
                    continue;
                }
                let ack = Frame::new(
                    Envelope::new(
                        MsgType::Ack,
                        frame.envelope.context,
                        frame.envelope.dst,
                        frame.envelope.src,
                        frame.envelope.tag,
                    ),
                    vec![0],
                );
                let _ = channel.send_frame(ack);
                if tx.send(frame).is_err() {
                    return;
                }
            }
            Err(Error::Timeout(_)) => continue,
            Err(_) => return,
        }
    });
}

impl RuntimeHandle {
    fn handshake_monitors(&self) -> Result<()> {
        let mut unreachable = Vec::new();
        for qrank in self.world.group.quantum_qranks.clone() {
            match self.verify_monitor(qrank) {
                Ok(offset) => {
                    self.offsets.lock().unwrap().insert(qrank, offset);
                }
                Err(_) => {
                    unreachable.push(map_quantum(&self.world, qrank)?.clone());
                }
            }
        }
        if !unreachable.is_empty() {
            return Err(Error::Init(unreachable));
        }
        Ok(())
    }

    fn verify_monitor(&self, qrank: Qrank) -> Result<ClockOffset> {
        let channel = self.qchannel(qrank)?;
        crate::sync::estimate_clock_offset(
            &channel,
            self.context(),
            self.my_rank,
            qrank,
            map_quantum(&self.world, qrank)?.clone(),
            self.timeout_ms,
        )
    }

    pub fn world(&self) -> &HybridDomain {
        &self.world
    }

    pub fn registry(&self) -> &ContextRegistry {
        &self.registry
    }

    pub fn config(&self) -> &QuantumNodeConfig {
        &self.config
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn rank(&self) -> Rank {
        self.my_rank
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn timeout_ms(&self) -> u64 {
        self.timeout_ms
    }

    pub fn context(&self) -> u32 {
        self.world.context.0
    }

    pub fn epsilon_sync_ms(&self) -> u64 {
        self.config.epsilon_sync_ms
    }

    /// Number of frames dropped because their context did not match this
    /// handle's domain.
    pub fn cross_context_rejections(&self) -> u64 {
        self.rejected_cross_context.load(Ordering::Relaxed)
    }

    pub(crate) fn note_cross_context_rejection(&self) {
        self.rejected_cross_context.fetch_add(1, Ordering::Relaxed);
    }

    pub(crate) fn ensure_live(&self) -> Result<()> {
        if self.finalized.load(Ordering::Acquire) {
            return Err(Error::State("runtime handle is finalized".into()));
        }
        Ok(())
    }

    pub(crate) fn qrank_of(&self, dev: &DeviceIdentifier) -> Result<Qrank> {
        resolve_qrank(&self.world, dev)
    }

    pub(crate) fn device_of(&self, qrank: Qrank) -> Result<&DeviceIdentifier> {
        map_quantum(&self.world, qrank)
    }

    /// Channel to a monitor, opened on first use and cached. A closed cached
    /// channel is discarded and reopened.
    pub(crate) fn qchannel(&self, qrank: Qrank) -> Result<Arc<Channel>> {
        let mut cache = self.qchannels.lock().unwrap();
        if let Some(ch) = cache.get(&qrank) {
            if !ch.is_closed() {
                return Ok(ch.clone());
            }
            cache.remove(&qrank);
        }
        let dev = map_quantum(&self.world, qrank)?;
        let ch = Arc::new(open_channel(&dev.ip, dev.port, self.timeout_ms)?);
        cache.insert(qrank, ch.clone());
        Ok(ch)
    }

    /// Channel to a classical peer, opened on first use and cached.
    pub(crate) fn cchannel(&self, peer: Rank) -> Result<Arc<Channel>> {
        if peer >= self.world.classical_count() {
            return Err(Error::Address(format!("unknown rank {peer}")));
        }
        let mut cache = self.cchannels.lock().unwrap();
        if let Some(ch) = cache.get(&peer) {
            if !ch.is_closed() {
                return Ok(ch.clone());
            }
            cache.remove(&peer);
        }
        let (ip, port) = self
            .rank_endpoints
            .get(peer as usize)
            .ok_or_else(|| Error::Address(format!("no endpoint for rank {peer}")))?
            .clone();
        let ch = Arc::new(open_channel(&ip, port, self.timeout_ms)?);
        cache.insert(peer, ch.clone());
        Ok(ch)
    }

    pub(crate) fn inbox(&self) -> Result<&RankInbox> {
        self.inbox
            .as_ref()
            .ok_or_else(|| Error::State("no classical inbox on this handle".into()))
    }

    /// Receive the next frame on a monitor channel that satisfies `pred`.
    /// Non-matching frames are queued, never dropped; frames from a foreign
    /// context are rejected and counted.
    pub(crate) fn recv_q_matching<F>(
        &self,
        qrank: Qrank,
        deadline: Instant,
        timeout_ms: u64,
        pred: F,
    ) -> Result<Frame>
    where
        F: Fn(&Frame) -> bool,
    {
        {
            let mut pending = self.qpending.lock().unwrap();
            if let Some(queue) = pending.get_mut(&qrank) {
                if let Some(pos) = queue.iter().position(&pred) {
                    return Ok(queue.remove(pos).unwrap());
                }
            }
        }
        let channel = self.qchannel(qrank)?;
        loop {
            let now = Instant::now();
            if now >= deadline {
                return Err(Error::Timeout(timeout_ms));
            }
            let budget = (deadline - now).as_millis().max(1) as u64;
            let frame = channel.recv_frame(budget)?;
            if frame.envelope.context != self.context() {
                self.note_cross_context_rejection();
                continue;
            }
            if pred(&frame) {
                return Ok(frame);
            }
            self.qpending
                .lock()
                .unwrap()
                .entry(qrank)
                .or_default()
                .push_back(frame);
        }
    }

    /// Put a frame back at the head of a monitor queue (used to preserve a
    /// message that exceeded the caller's receive budget).
    pub(crate) fn push_q_pending_front(&self, qrank: Qrank, frame: Frame) {
        self.qpending
            .lock()
            .unwrap()
            .entry(qrank)
            .or_default()
            .push_front(frame);
    }

    /// Send one raw frame to a monitor without waiting for any reply.
    pub(crate) fn post_to_monitor(&self, qrank: Qrank, frame: Frame) -> Result<()> {
        self.qchannel(qrank)?.send_frame(frame)
    }

    /// Finalize the runtime: shut owned monitors down, close channels, stop
    /// the inbox. The handle is dead afterwards.
    pub fn finalize(&self) -> Result<()> {
        if self.finalized.swap(true, Ordering::AcqRel) {
            return Err(Error::State("runtime handle already finalized".into()));
        }
        if self.role == Role::Classical && self.owns_monitors && self.my_rank == 0 {
            for qrank in self.world.group.quantum_qranks.clone() {
                let _ = self.shutdown_monitor(qrank);
            }
        }
        for (_, ch) in self.qchannels.lock().unwrap().drain() {
            ch.close();
        }
        for (_, ch) in self.cchannels.lock().unwrap().drain() {
            ch.close();
        }
        if let Some(inbox) = &self.inbox {
            inbox.shutdown.store(true, Ordering::Release);
            if self.world.classical_count() > 1 {
                // Wake the blocking accept so the acceptor can observe the flag.
                if let Some((ip, port)) = self.rank_endpoints.get(self.my_rank as usize) {
                    let _ = open_channel(ip, *port, 200);
                }
            }
            let mut threads = inbox.threads.lock().unwrap();
            for t in threads.drain(..) {
                let _ = t.join();
            }
        }
        Ok(())
    }

    fn shutdown_monitor(&self, qrank: Qrank) -> Result<()> {
        let channel = self.qchannel(qrank)?;
        let env = Envelope::new(
            MsgType::Shutdown,
            self.context(),
            self.my_rank,
            qrank,
            0,
        );
        channel.send_frame(Frame::new(env, Vec::new()))?;
        // The monitor acknowledges once its queue is drained.
        let deadline = Instant::now() + Duration::from_millis(self.timeout_ms);
        self.recv_q_matching(qrank, deadline, self.timeout_ms, |f| {
            f.envelope.msg_type == MsgType::Ack
        })?;
        Ok(())
    }
}

impl Drop for RuntimeHandle {
    fn drop(&mut self) {
        if !self.finalized.load(Ordering::Acquire) {
            let _ = self.finalize();
        }
    }
}
