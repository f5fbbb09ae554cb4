//! Point-to-point contracts against live monitors.

mod common;

use std::time::Instant;

use common::Cluster;
use mpiq::messaging::{decode_ack_payload, encode_execute_payload};
use mpiq::qsim::build_ghz_circuit;
use mpiq::runtime::{init_from_config, InitOptions, Role};
use mpiq::transport::{open_channel, ChannelKind, Envelope, Frame, MsgType};
use mpiq::util::fnv1a64;
use mpiq::{DeviceIdentifier, Error, WaveformBlock};

#[test]
fn one_qubit_h_gives_one_bit_strings() {
    let cluster = Cluster::spawn(1, 4, 21, 0, false);
    let handle = cluster.attach(21);
    let dev = cluster.monitors[0].device();

    let circuit = build_ghz_circuit(1).unwrap();
    let block = WaveformBlock::from_circuit(&circuit, 1000, &dev).unwrap();
    handle.send_block(&dev, 5, &block).unwrap();
    let table = handle.recv_shots(&dev, 5, usize::MAX).unwrap();
    assert_eq!(table.shots, 1000);
    assert_eq!(table.bitstrings.len(), 1000);
    assert!(table.bitstrings.iter().all(|s| s == "0" || s == "1"));
    handle.finalize().unwrap();
    cluster.kill_all();
}

#[test]
fn out_of_order_tags_are_matched_not_dropped() {
    let cluster = Cluster::spawn(1, 4, 22, 0, false);
    let handle = cluster.attach(22);
    let dev = cluster.monitors[0].device();
    let circuit = build_ghz_circuit(2).unwrap();
    let block = WaveformBlock::from_circuit(&circuit, 50, &dev).unwrap();

    handle.send_block(&dev, 7, &block).unwrap();
    handle.send_block(&dev, 8, &block).unwrap();
    // Ask for tag 8 first; the tag-7 result arrives earlier and must queue.
    let t8 = handle.recv_shots(&dev, 8, usize::MAX).unwrap();
    assert_eq!(t8.shots, 50);
    let t7 = handle.recv_shots(&dev, 7, usize::MAX).unwrap();
    assert_eq!(t7.shots, 50);
    handle.finalize().unwrap();
    cluster.kill_all();
}

#[test]
fn oversize_result_is_preserved_for_re_receive() {
    let cluster = Cluster::spawn(1, 4, 23, 0, false);
    let handle = cluster.attach(23);
    let dev = cluster.monitors[0].device();
    let circuit = build_ghz_circuit(2).unwrap();
    let block = WaveformBlock::from_circuit(&circuit, 100, &dev).unwrap();
    handle.send_block(&dev, 1, &block).unwrap();

    match handle.recv_shots(&dev, 1, 8) {
        Err(Error::Truncation { actual, max_len }) => {
            assert_eq!(max_len, 8);
            assert!(actual > 8);
        }
        other => panic!("expected TruncationError, got {other:?}"),
    }
    // Same message, bigger budget.
    let table = handle.recv_shots(&dev, 1, usize::MAX).unwrap();
    assert_eq!(table.shots, 100);
    handle.finalize().unwrap();
    cluster.kill_all();
}

#[test]
fn qubit_out_of_range_sends_nothing() {
    let cluster = Cluster::spawn(1, 4, 24, 0, false);
    let handle = cluster.attach(24);
    let dev = cluster.monitors[0].device();

    // 6-qubit fragment against a 4-qubit device.
    let circuit = build_ghz_circuit(6).unwrap();
    let block = WaveformBlock::from_circuit(&circuit, 10, &dev).unwrap();
    assert!(matches!(
        handle.send_block(&dev, 1, &block),
        Err(Error::QubitRange { .. })
    ));
    assert!(cluster.monitors[0].deliveries().is_empty());
    handle.finalize().unwrap();
    cluster.kill_all();
}

#[test]
fn unknown_device_is_an_address_error() {
    let cluster = Cluster::spawn(1, 4, 25, 0, false);
    let handle = cluster.attach(25);
    let stranger = DeviceIdentifier::new("127.0.0.1", 1, 42);
    let circuit = build_ghz_circuit(2).unwrap();
    let block = WaveformBlock::from_circuit(&circuit, 10, &stranger).unwrap();
    assert!(matches!(
        handle.send_block(&stranger, 1, &block),
        Err(Error::Address(_))
    ));
    handle.finalize().unwrap();
    cluster.kill_all();
}

#[test]
fn corrupted_payload_is_nakked_without_execution() {
    let cluster = Cluster::spawn(1, 4, 26, 0, false);
    let dev = cluster.monitors[0].device();

    let circuit = build_ghz_circuit(2).unwrap();
    let block = WaveformBlock::from_circuit(&circuit, 10, &dev).unwrap();
    let mut payload = encode_execute_payload(&block);
    payload[10] ^= 0x55;

    let channel = open_channel(&dev.ip, dev.port, 1000).unwrap();
    let env = Envelope::new(MsgType::Execute, 0, 0, 0, 9);
    channel.send_frame(Frame::new(env, payload)).unwrap();
    let ack = channel.recv_frame(2000).unwrap();
    assert_eq!(ack.envelope.msg_type, MsgType::Ack);
    let (status, text) = decode_ack_payload(&ack.payload).unwrap();
    assert_eq!(status, 1, "expected integrity NAK, got {status}: {text}");
    assert!(cluster.monitors[0].deliveries().is_empty());
    cluster.kill_all();
}

#[test]
fn colocated_send_uses_local_channel_with_identical_digest() {
    let cluster = Cluster::spawn(1, 4, 27, 0, true);
    let handle = cluster.attach(27);
    let dev = cluster.monitors[0].device();

    // The handle and monitor share this process, so the cached channel is
    // the in-process kind.
    let probe = open_channel(&dev.ip, dev.port, 500).unwrap();
    assert_eq!(probe.kind(), ChannelKind::Local);

    let circuit = build_ghz_circuit(3).unwrap();
    let block = WaveformBlock::from_circuit(&circuit, 64, &dev).unwrap();
    handle.send_block(&dev, 3, &block).unwrap();
    let deliveries = cluster.monitors[0].deliveries();
    assert_eq!(deliveries.len(), 1);
    assert_eq!(deliveries[0].digest, block.circuit_digest);
    let _ = handle.recv_shots(&dev, 3, usize::MAX).unwrap();
    handle.finalize().unwrap();
    cluster.kill_all();
}

#[test]
fn execution_is_fifo_per_device() {
    let cluster = Cluster::spawn(1, 4, 28, 60, false);
    let handle = cluster.attach(28);
    let dev = cluster.monitors[0].device();
    let circuit = build_ghz_circuit(2).unwrap();
    let block = WaveformBlock::from_circuit(&circuit, 10, &dev).unwrap();

    let start = Instant::now();
    handle.send_block(&dev, 1, &block).unwrap();
    handle.send_block(&dev, 2, &block).unwrap();
    // Tag 2 executes only after tag 1 finishes (60 ms each, serial device).
    let t2 = handle.recv_shots(&dev, 2, usize::MAX).unwrap();
    assert_eq!(t2.shots, 10);
    assert!(
        start.elapsed().as_millis() >= 120,
        "second execution finished before the first could have"
    );
    let _ = handle.recv_shots(&dev, 1, usize::MAX).unwrap();
    handle.finalize().unwrap();
    cluster.kill_all();
}

#[test]
fn control_lane_stays_responsive_during_execution() {
    let cluster = Cluster::spawn(1, 4, 29, 400, false);
    let handle = cluster.attach(29);
    let dev = cluster.monitors[0].device();
    let circuit = build_ghz_circuit(2).unwrap();
    let block = WaveformBlock::from_circuit(&circuit, 10, &dev).unwrap();
    handle.send_block(&dev, 1, &block).unwrap();

    // The executor sleeps 400 ms; pings must not wait for it.
    let t0 = Instant::now();
    let offset = handle.measure_offset(0).unwrap();
    assert!(offset.rtt_ns > 0);
    assert!(
        t0.elapsed().as_millis() < 200,
        "ping was blocked behind execution"
    );
    let _ = handle.recv_shots(&dev, 1, usize::MAX).unwrap();
    handle.finalize().unwrap();
    cluster.kill_all();
}

#[test]
fn shutdown_drains_pending_results_first() {
    let cluster = Cluster::spawn(1, 4, 30, 50, false);
    let dev = cluster.monitors[0].device();

    let circuit = build_ghz_circuit(2).unwrap();
    let block = WaveformBlock::from_circuit(&circuit, 10, &dev).unwrap();
    let channel = open_channel(&dev.ip, dev.port, 1000).unwrap();
    channel
        .send_frame(Frame::new(
            Envelope::new(MsgType::Execute, 0, 0, 0, 4),
            encode_execute_payload(&block),
        ))
        .unwrap();
    let ack = channel.recv_frame(2000).unwrap();
    assert_eq!(ack.envelope.msg_type, MsgType::Ack);

    channel
        .send_frame(Frame::new(Envelope::new(MsgType::Shutdown, 0, 0, 0, 0), vec![]))
        .unwrap();
    // Drain rule: the RESULT precedes the shutdown acknowledgement.
    let first = channel.recv_frame(5000).unwrap();
    assert_eq!(first.envelope.msg_type, MsgType::Result);
    assert_eq!(first.envelope.tag, 4);
    let second = channel.recv_frame(5000).unwrap();
    assert_eq!(second.envelope.msg_type, MsgType::Ack);
    cluster.monitors.into_iter().for_each(|m| m.join());
}

#[test]
fn determinism_same_seed_tag_block_same_table() {
    let run = |spawn_seed: u64| {
        let cluster = Cluster::spawn(1, 4, spawn_seed, 0, false);
        let handle = cluster.attach(1);
        let dev = cluster.monitors[0].device();
        let circuit = build_ghz_circuit(4).unwrap();
        let block = WaveformBlock::from_circuit(&circuit, 200, &dev).unwrap();
        handle.send_block(&dev, 17, &block).unwrap();
        let table = handle.recv_shots(&dev, 17, usize::MAX).unwrap();
        handle.finalize().unwrap();
        cluster.kill_all();
        table.bitstrings
    };
    assert_eq!(run(77), run(77));
    assert_ne!(run(77), run(78));
}

#[test]
fn addressing_soundness_only_target_device_sees_payload() {
    let cluster = Cluster::spawn(2, 4, 31, 0, false);
    let handle = cluster.attach(31);
    let dev0 = cluster.monitors[0].device();
    let circuit = build_ghz_circuit(2).unwrap();
    let block = WaveformBlock::from_circuit(&circuit, 10, &dev0).unwrap();
    handle.send_block(&dev0, 1, &block).unwrap();
    let _ = handle.recv_shots(&dev0, 1, usize::MAX).unwrap();
    assert_eq!(cluster.monitors[0].deliveries().len(), 1);
    assert!(cluster.monitors[1].deliveries().is_empty());
    handle.finalize().unwrap();
    cluster.kill_all();
}

#[test]
fn classical_hello_self_send_and_megabyte_integrity() {
    let cluster = Cluster::spawn(0, 4, 32, 0, false);
    let handles = cluster.attach_ranks(2, 32);

    // rank0 -> rank1 "hello"
    handles[0].classical_send(1, 10, b"hello").unwrap();
    assert_eq!(handles[1].classical_recv(0, 10).unwrap(), b"hello");

    // Self-send buffers locally.
    handles[1].classical_send(1, 11, b"loop").unwrap();
    assert_eq!(handles[1].classical_recv(1, 11).unwrap(), b"loop");

    // 1 MiB random payload, digest-equal after the round trip.
    let mut rng = common::seeded_rng(99);
    let big: Vec<u8> = (0..1 << 20).map(|_| rand::Rng::gen(&mut rng)).collect();
    let digest = fnv1a64(&big);
    handles[1].classical_send(0, 12, &big).unwrap();
    let got = handles[0].classical_recv(1, 12).unwrap();
    assert_eq!(got.len(), 1 << 20);
    assert_eq!(fnv1a64(&got), digest);

    for h in &handles {
        h.finalize().unwrap();
    }
    cluster.kill_all();
}

#[test]
fn classical_ranks_over_tcp_transport() {
    // Reserve two loopback ports, then run two ranks as TCP endpoints.
    let ports: Vec<u16> = (0..2)
        .map(|_| {
            let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
            l.local_addr().unwrap().port()
        })
        .collect();
    let endpoints: Vec<(String, u16)> = ports
        .iter()
        .map(|p| ("127.0.0.1".to_string(), *p))
        .collect();
    let config = mpiq::QuantumNodeConfig {
        devices: vec![],
        epsilon_sync_ms: 50,
    };
    let mk = |rank: u32| {
        init_from_config(
            config.clone(),
            InitOptions {
                role: Role::Classical,
                my_rank: rank,
                classical_count: 2,
                rank_endpoints: endpoints.clone(),
                rank_transport: mpiq::RankTransport::Tcp,
                seed: rank as u64,
                ..InitOptions::default()
            },
        )
        .unwrap()
    };
    let h0 = mk(0);
    let h1 = mk(1);
    h0.classical_send(1, 3, b"over tcp").unwrap();
    assert_eq!(h1.classical_recv(0, 3).unwrap(), b"over tcp");
    h1.classical_send(0, 4, b"and back").unwrap();
    assert_eq!(h0.classical_recv(1, 4).unwrap(), b"and back");
    h0.finalize().unwrap();
    h1.finalize().unwrap();

    // Clean shutdown: the rank listeners are gone after finalize.
    for port in ports {
        std::thread::sleep(std::time::Duration::from_millis(50));
        let refused = std::net::TcpStream::connect_timeout(
            &format!("127.0.0.1:{port}").parse().unwrap(),
            std::time::Duration::from_millis(300),
        )
        .is_err();
        assert!(refused, "rank listener on port {port} survived finalize");
    }
}

#[test]
fn cross_context_frames_are_rejected_not_surfaced() {
    let cluster = Cluster::spawn(0, 4, 33, 0, false);
    let (handles, endpoints) = cluster.attach_ranks_with_endpoints(2, 33);

    handles[1].classical_send(0, 1, b"legit").unwrap();
    assert_eq!(handles[0].classical_recv(1, 1).unwrap(), b"legit");

    // Inject a DATA frame carrying a foreign context straight at rank 0's
    // endpoint over a raw channel.
    let before = handles[0].cross_context_rejections();
    let (ip, port) = &endpoints[0];
    let raw = open_channel(ip, *port, 500).unwrap();
    let forged = Frame::new(
        Envelope::new(MsgType::Data, 777, 1, 0, 42),
        b"intruder".to_vec(),
    );
    raw.send_frame(forged).unwrap();

    // The foreign frame never surfaces: the matching receive times out.
    match handles[0].classical_recv_timeout(1, 42, 300) {
        Err(Error::Timeout(_)) => {}
        other => panic!("expected timeout, got {other:?}"),
    }
    assert!(handles[0].cross_context_rejections() > before);

    for h in &handles {
        h.finalize().unwrap();
    }
    cluster.kill_all();
}
