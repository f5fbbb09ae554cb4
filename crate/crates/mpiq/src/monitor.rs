//! The localized quantum MonitorProcess: a daemon bound to one simulated
//! control device. It receives pre-compiled payloads, validates and queues
//! them, participates in quantum barriers, and returns results. Control
//! messages (sync, ping, shutdown) are serviced while an execution runs;
//! executions themselves are strictly serial per device.

use std::collections::VecDeque;
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use crate::domain::DeviceIdentifier;
use crate::error::{Error, Result};
use crate::messaging::{
    decode_execute_payload, encode_ack_payload, encode_result_payload, AckStatus, WaveformBlock,
};
use crate::qsim::{decode_gate_stream, simulate, Circuit};
use crate::transport::{open_channel, unregister_local, Channel, Envelope, Frame, MsgType};
use crate::util::{mix64, monotonic_ns, wait_until_monotonic};

/// How long an armed barrier survives without a release before the executor
/// gives up holding.
const ARM_TTL_NS: u64 = 10_000_000_000;

/// Everything needed to start one monitor.
#[derive(Debug, Clone)]
pub struct MonitorConfig {
    pub ip: String,
    /// TCP port to listen on; 0 lets the OS pick one.
    pub port: u16,
    pub device_id: u32,
    pub qubit_count: u16,
    pub seed: u64,
    pub delay_ms: u64,
    /// Also register in the in-process hub so co-located callers get the
    /// local channel kind.
    pub register_local: bool,
}

impl MonitorConfig {
    pub fn new(ip: impl Into<String>, port: u16, device_id: u32, qubit_count: u16) -> Self {
        Self {
            ip: ip.into(),
            port,
            device_id,
            qubit_count,
            seed: 0,
            delay_ms: 0,
            register_local: false,
        }
    }
}

/// One validated payload delivery, kept for diagnostics and test assertions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeliveryRecord {
    pub tag: u32,
    pub context: u32,
    pub digest: u64,
    pub shots: u32,
}

/// Barrier gate as seen by the executor.
#[derive(Debug, Clone, Copy)]
enum Gate {
    Open,
    Armed { since_ns: u64 },
    Release { target_ns: u64 },
}

struct ExecJob {
    tag: u32,
    context: u32,
    requester: u32,
    qrank: u32,
    circuit: Circuit,
    shots: u32,
    digest: u64,
    reply: Arc<Channel>,
}

struct QueueState {
    jobs: VecDeque<ExecJob>,
    executing: bool,
}

struct MonitorShared {
    device: DeviceIdentifier,
    qubit_count: u16,
    seed: u64,
    delay_ms: AtomicU64,
    registered_local: bool,
    queue: Mutex<QueueState>,
    work_cv: Condvar,
    idle_cv: Condvar,
    gate: Mutex<Gate>,
    gate_cv: Condvar,
    draining: AtomicBool,
    killed: AtomicBool,
    deliveries: Mutex<Vec<DeliveryRecord>>,
    /// (tag, reply delivered) per finished execution.
    results: Mutex<Vec<(u32, bool)>>,
    releases: Mutex<Vec<u64>>,
    conns: Mutex<Vec<TcpStream>>,
}

impl MonitorShared {
    fn wake_all(&self) {
        self.work_cv.notify_all();
        self.gate_cv.notify_all();
        self.idle_cv.notify_all();
    }
}

/// Handle on a running monitor: device address, introspection for tests, and
/// both orderly and abrupt stops.
pub struct MonitorHandle {
    shared: Arc<MonitorShared>,
    threads: Mutex<Vec<JoinHandle<()>>>,
}

impl MonitorHandle {
    /// The device identity, with the actual bound port.
    pub fn device(&self) -> DeviceIdentifier {
        self.shared.device.clone()
    }

    /// Every validated payload delivery so far.
    pub fn deliveries(&self) -> Vec<DeliveryRecord> {
        self.shared.deliveries.lock().unwrap().clone()
    }

    /// Local monotonic timestamps at which barrier releases fired.
    pub fn release_times(&self) -> Vec<u64> {
        self.shared.releases.lock().unwrap().clone()
    }

    /// (tag, reply delivered) for every finished execution, in order.
    pub fn executed(&self) -> Vec<(u32, bool)> {
        self.shared.results.lock().unwrap().clone()
    }

    /// Add a fixed compute delay to every execution, modelling heavier
    /// fragments.
    pub fn inject_compute_delay(&self, delay_ms: u64) {
        self.shared.delay_ms.store(delay_ms, Ordering::Relaxed);
    }

    pub fn is_running(&self) -> bool {
        !self.shared.killed.load(Ordering::Acquire)
    }

    /// Abrupt stop: sever every connection and listener without draining.
    pub fn kill(&self) {
        let shared = &self.shared;
        shared.killed.store(true, Ordering::Release);
        shared.draining.store(true, Ordering::Release);
        if shared.registered_local {
            unregister_local(&shared.device.ip, shared.device.port);
        }
        for stream in shared.conns.lock().unwrap().drain(..) {
            let _ = stream.shutdown(std::net::Shutdown::Both);
        }
        // Wake the blocking TCP accept (the hub entry is gone, so this always
        // takes the socket path).
        let _ = open_channel(&shared.device.ip, shared.device.port, 200);
        shared.wake_all();
        let mut threads = self.threads.lock().unwrap();
        for t in threads.drain(..) {
            let _ = t.join();
        }
    }

    /// Wait for the monitor to finish (it exits after a SHUTDOWN drain).
    pub fn join(self) {
        let mut threads = self.threads.lock().unwrap();
        for t in threads.drain(..) {
            let _ = t.join();
        }
    }
}

/// Start a monitor and return once it is accepting connections.
pub fn spawn_monitor(config: MonitorConfig) -> Result<MonitorHandle> {
    let listener = TcpListener::bind((config.ip.as_str(), config.port)).map_err(|e| {
        Error::Launch(format!(
            "monitor bind {}:{} failed: {e}",
            config.ip, config.port
        ))
    })?;
    let port = listener.local_addr()?.port();
    let device = DeviceIdentifier::new(config.ip.clone(), port, config.device_id);

    let shared = Arc::new(MonitorShared {
        device: device.clone(),
        qubit_count: config.qubit_count,
        seed: config.seed,
        delay_ms: AtomicU64::new(config.delay_ms),
        registered_local: config.register_local,
        queue: Mutex::new(QueueState {
            jobs: VecDeque::new(),
            executing: false,
        }),
        work_cv: Condvar::new(),
        idle_cv: Condvar::new(),
        gate: Mutex::new(Gate::Open),
        gate_cv: Condvar::new(),
        draining: AtomicBool::new(false),
        killed: AtomicBool::new(false),
        deliveries: Mutex::new(Vec::new()),
        results: Mutex::new(Vec::new()),
        releases: Mutex::new(Vec::new()),
        conns: Mutex::new(Vec::new()),
    });

    let mut threads = Vec::new();

    let s = shared.clone();
    threads.push(std::thread::spawn(move || executor_loop(&s)));

    let s = shared.clone();
    threads.push(std::thread::spawn(move || tcp_accept_loop(listener, &s)));

    if config.register_local {
        let local = crate::transport::register_local(&device.ip, port)?;
        let s = shared.clone();
        threads.push(std::thread::spawn(move || {
            while let Some(pipe) = local.accept() {
                if s.killed.load(Ordering::Acquire) {
                    break;
                }
                let channel = Arc::new(Channel::from_pipe(pipe, "classical".into()));
                let s2 = s.clone();
                std::thread::spawn(move || connection_loop(channel, &s2));
            }
        }));
    }

    Ok(MonitorHandle {
        shared,
        threads: Mutex::new(threads),
    })
}

/// Run a monitor in the foreground until SHUTDOWN; the entry point of the
/// `mpiq-monitor` binary.
pub fn monitor_serve(config: MonitorConfig) -> Result<()> {
    let handle = spawn_monitor(config)?;
    handle.join();
    Ok(())
}

fn tcp_accept_loop(listener: TcpListener, shared: &Arc<MonitorShared>) {
    while let Ok((stream, _)) = listener.accept() {
        if shared.killed.load(Ordering::Acquire) {
            break;
        }
        if let Ok(clone) = stream.try_clone() {
            shared.conns.lock().unwrap().push(clone);
        }
        if let Ok(channel) = Channel::from_tcp(stream, "classical".into()) {
            let channel = Arc::new(channel);
            let s = shared.clone();
            std::thread::spawn(move || connection_loop(channel, &s));
        }
    }
}

fn connection_loop(channel: Arc<Channel>, shared: &Arc<MonitorShared>) {
    // The first frame pins this connection's context; later frames from a
    // different context are rejected.
    let mut conn_context: Option<u32> = None;
    loop {
        if shared.killed.load(Ordering::Acquire) {
            return;
        }
        match channel.recv_frame(200) {
            Ok(frame) => {
                if let Some(ctx) = conn_context {
                    if frame.envelope.context != ctx {
                        nak(&channel, &frame, AckStatus::Protocol, "context mismatch");
                        continue;
                    }
                } else {
                    conn_context = Some(frame.envelope.context);
                }
                dispatch(&channel, shared, frame);
            }
            Err(Error::Timeout(_)) => continue,
            Err(_) => return,
        }
    }
}

fn reply_envelope(frame: &Frame, msg_type: MsgType) -> Envelope {
    Envelope::new(
        msg_type,
        frame.envelope.context,
        frame.envelope.dst,
        frame.envelope.src,
        frame.envelope.tag,
    )
    .quantum()
}

fn nak(channel: &Channel, frame: &Frame, status: AckStatus, text: &str) {
    let payload = encode_ack_payload(status, text);
    let _ = channel.send_frame(Frame::new(reply_envelope(frame, MsgType::Ack), payload));
}

fn dispatch(channel: &Arc<Channel>, shared: &Arc<MonitorShared>, frame: Frame) {
    match frame.envelope.msg_type {
        MsgType::Ping => {
            let payload = monotonic_ns().to_le_bytes().to_vec();
            let _ = channel.send_frame(Frame::new(reply_envelope(&frame, MsgType::Pong), payload));
        }
        MsgType::Execute => handle_execute_frame(channel, shared, frame),
        MsgType::SyncReady => {
            *shared.gate.lock().unwrap() = Gate::Armed {
                since_ns: monotonic_ns(),
            };
            shared.gate_cv.notify_all();
            let payload = frame.envelope.dst.to_le_bytes().to_vec();
            let _ = channel.send_frame(Frame::new(
                reply_envelope(&frame, MsgType::SyncReady),
                payload,
            ));
        }
        MsgType::SyncRelease => {
            if frame.payload.len() != 8 {
                nak(channel, &frame, AckStatus::Protocol, "bad release payload");
                return;
            }
            let target_ns = u64::from_le_bytes(frame.payload[..8].try_into().unwrap());
            *shared.gate.lock().unwrap() = Gate::Release { target_ns };
            shared.gate_cv.notify_all();
            wait_until_monotonic(target_ns);
            let actual = monotonic_ns();
            shared.releases.lock().unwrap().push(actual);
            *shared.gate.lock().unwrap() = Gate::Open;
            shared.gate_cv.notify_all();
            let _ = channel.send_frame(Frame::new(
                reply_envelope(&frame, MsgType::SyncRelease),
                actual.to_le_bytes().to_vec(),
            ));
        }
        MsgType::Shutdown => {
            shared.draining.store(true, Ordering::Release);
            shared.work_cv.notify_all();
            // Wait out the drain, then acknowledge and stop everything.
            {
                let mut queue = shared.queue.lock().unwrap();
                while (!queue.jobs.is_empty() || queue.executing)
                    && !shared.killed.load(Ordering::Acquire)
                {
                    let (q, _) = shared
                        .idle_cv
                        .wait_timeout(queue, Duration::from_millis(100))
                        .unwrap();
                    queue = q;
                }
            }
            let _ = channel.send_frame(Frame::new(
                reply_envelope(&frame, MsgType::Ack),
                encode_ack_payload(AckStatus::Ok, ""),
            ));
            shared.killed.store(true, Ordering::Release);
            if shared.registered_local {
                unregister_local(&shared.device.ip, shared.device.port);
            }
            shared.wake_all();
            // Wake the TCP acceptor so it can observe the kill flag.
            let _ = open_channel(&shared.device.ip, shared.device.port, 200);
        }
        _ => nak(channel, &frame, AckStatus::Protocol, "unexpected message type"),
    }
}

fn handle_execute_frame(channel: &Arc<Channel>, shared: &Arc<MonitorShared>, frame: Frame) {
    if shared.draining.load(Ordering::Acquire) {
        nak(channel, &frame, AckStatus::State, "monitor is draining");
        return;
    }
    let block = match decode_execute_payload(&frame.payload, &shared.device) {
        Ok(block) => block,
        Err(Error::Integrity { want, got }) => {
            let text = format!("claimed {want:#018x}, recomputed {got:#018x}");
            nak(channel, &frame, AckStatus::Integrity, &text);
            return;
        }
        Err(e) => {
            nak(channel, &frame, AckStatus::Protocol, &e.to_string());
            return;
        }
    };
    if let Err(e) = block.validate_for(shared.qubit_count) {
        nak(channel, &frame, AckStatus::QubitRange, &e.to_string());
        return;
    }
    let circuit = match decode_gate_stream(&block.channels) {
        Ok(c) => c,
        Err(e) => {
            nak(channel, &frame, AckStatus::Decode, &e.to_string());
            return;
        }
    };

    let WaveformBlock {
        shots,
        circuit_digest,
        ..
    } = block;
    shared.deliveries.lock().unwrap().push(DeliveryRecord {
        tag: frame.envelope.tag,
        context: frame.envelope.context,
        digest: circuit_digest,
        shots,
    });
    {
        let mut queue = shared.queue.lock().unwrap();
        queue.jobs.push_back(ExecJob {
            tag: frame.envelope.tag,
            context: frame.envelope.context,
            requester: frame.envelope.src,
            qrank: frame.envelope.dst,
            circuit,
            shots,
            digest: circuit_digest,
            reply: channel.clone(),
        });
    }
    shared.work_cv.notify_all();
    let _ = channel.send_frame(Frame::new(
        reply_envelope(&frame, MsgType::Ack),
        encode_ack_payload(AckStatus::Ok, ""),
    ));
}

fn executor_loop(shared: &Arc<MonitorShared>) {
    loop {
        let job = {
            let mut queue = shared.queue.lock().unwrap();
            loop {
                if shared.killed.load(Ordering::Acquire) {
                    return;
                }
                if let Some(job) = queue.jobs.pop_front() {
                    queue.executing = true;
                    break job;
                }
                shared.idle_cv.notify_all();
                let (q, _) = shared
                    .work_cv
                    .wait_timeout(queue, Duration::from_millis(100))
                    .unwrap();
                queue = q;
            }
        };

        hold_for_barrier(shared);

        let exec_seed = mix64(&[shared.seed, job.tag as u64, job.digest]);
        let outcome = simulate(&job.circuit, job.shots, exec_seed);
        let delay = shared.delay_ms.load(Ordering::Relaxed);
        if delay > 0 {
            std::thread::sleep(Duration::from_millis(delay));
        }

        match outcome {
            Ok(mut table) => {
                table.qrank = job.qrank;
                let mut sent = false;
                if let Ok(payload) = encode_result_payload(&table) {
                    let env = Envelope::new(
                        MsgType::Result,
                        job.context,
                        job.qrank,
                        job.requester,
                        job.tag,
                    )
                    .quantum();
                    sent = job.reply.send_frame(Frame::new(env, payload)).is_ok();
                }
                shared.results.lock().unwrap().push((job.tag, sent));
            }
            Err(_) => {
                // Validation happens before enqueue; reaching this means the
                // simulator itself failed. Nothing useful to send back.
                shared.results.lock().unwrap().push((job.tag, false));
            }
        }

        let mut queue = shared.queue.lock().unwrap();
        queue.executing = false;
        if queue.jobs.is_empty() {
            shared.idle_cv.notify_all();
        }
    }
}

/// Block the executor while a barrier is armed or a release target lies in
/// the future. An armed barrier that never releases expires after a TTL.
fn hold_for_barrier(shared: &Arc<MonitorShared>) {
    let mut gate = shared.gate.lock().unwrap();
    loop {
        if shared.killed.load(Ordering::Acquire) {
            return;
        }
        match *gate {
            Gate::Open => return,
            Gate::Armed { since_ns } => {
                if monotonic_ns().saturating_sub(since_ns) > ARM_TTL_NS {
                    *gate = Gate::Open;
                    return;
                }
            }
            Gate::Release { target_ns } => {
                // The releasing connection normally reopens the gate; if it
                // died, open once the target has safely passed.
                if monotonic_ns() > target_ns.saturating_add(1_000_000_000) {
                    *gate = Gate::Open;
                    return;
                }
            }
        }
        let (g, _) = shared
            .gate_cv
            .wait_timeout(gate, Duration::from_millis(20))
            .unwrap();
        gate = g;
    }
}
