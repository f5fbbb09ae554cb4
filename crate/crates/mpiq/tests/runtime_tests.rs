//! Initialization, finalization, and configuration contracts.

mod common;

use std::net::TcpStream;
use std::time::Duration;

use common::Cluster;
use mpiq::runtime::{init_from_config, load_qnode_config, InitOptions, Role};
use mpiq::{Error, QuantumNodeConfig};

#[test]
fn init_reaches_every_monitor_and_counts_qranks() {
    let cluster = Cluster::spawn(4, 4, 11, 0, false);
    let handle = cluster.attach(11);
    assert_eq!(handle.world().quantum_count(), 4);
    assert_eq!(handle.world().classical_count(), 1);
    // One clock-offset exchange completed per monitor.
    for q in 0..4 {
        assert!(handle.offset_of(q).is_some());
    }
    handle.finalize().unwrap();
    cluster.kill_all();
}

#[test]
fn init_names_exactly_the_dead_monitor() {
    let cluster = Cluster::spawn(3, 4, 12, 0, false);
    let mut config = cluster.config.clone();
    // Add a fourth device nobody listens on.
    let dead_port = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    config.devices.push(mpiq::runtime::QuantumDevice {
        ip: "127.0.0.1".into(),
        port: dead_port,
        device_id: 99,
        qubit_count: 4,
        backend: "statevector".into(),
    });
    match init_from_config(config, InitOptions::default()) {
        Err(Error::Init(devices)) => {
            assert_eq!(devices.len(), 1);
            assert_eq!(devices[0].device_id, 99);
            assert_eq!(devices[0].port, dead_port);
        }
        other => panic!("expected InitError, got {other:?}"),
    }
    cluster.kill_all();
}

#[test]
fn finalize_is_single_shot_and_operations_fail_afterwards() {
    let cluster = Cluster::spawn(1, 4, 13, 0, false);
    let handle = cluster.attach(13);
    handle.finalize().unwrap();
    assert!(matches!(handle.finalize(), Err(Error::State(_))));

    let dev = cluster.monitors[0].device();
    let circuit = mpiq::qsim::build_ghz_circuit(2).unwrap();
    let block = mpiq::WaveformBlock::from_circuit(&circuit, 10, &dev).unwrap();
    assert!(matches!(
        handle.send_block(&dev, 1, &block),
        Err(Error::State(_))
    ));
    assert!(matches!(handle.barrier(0), Err(Error::State(_))));
    cluster.kill_all();
}

#[test]
fn finalize_with_ownership_drains_monitors_to_exit() {
    let cluster = Cluster::spawn(2, 4, 14, 0, false);
    let handle = init_from_config(
        cluster.config.clone(),
        InitOptions {
            owns_monitors: true,
            ..InitOptions::default()
        },
    )
    .unwrap();
    let devices: Vec<_> = cluster.config.devices.clone();
    handle.finalize().unwrap();
    // Monitors drained and stopped; their ports now refuse connections.
    for m in cluster.monitors {
        m.join();
    }
    for dev in devices {
        let refused = TcpStream::connect_timeout(
            &format!("{}:{}", dev.ip, dev.port).parse().unwrap(),
            Duration::from_millis(300),
        )
        .is_err();
        assert!(refused, "monitor port {} still listening", dev.port);
    }
}

#[test]
fn startup_handshake_is_idempotent() {
    let cluster = Cluster::spawn(2, 4, 15, 0, false);
    for seed in [1u64, 2, 3] {
        let handle = cluster.attach(seed);
        handle.finalize().unwrap();
    }
    cluster.kill_all();
}

#[test]
fn reference_loopback10_config_is_part_of_the_repo() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/loopback10.json");
    let config = load_qnode_config(&path).unwrap();
    assert_eq!(config.devices.len(), 10);
    for (i, dev) in config.devices.iter().enumerate() {
        assert_eq!(dev.port, 7000 + i as u16);
        assert_eq!(dev.ip, "127.0.0.1");
    }
    assert_eq!(config.epsilon_sync_ms, 50);
}

#[test]
fn monitor_role_handle_skips_handshake() {
    let config = QuantumNodeConfig::loopback(2, 7300, 4);
    // No monitors are running; a monitor-role handle still initializes.
    let handle = init_from_config(
        config,
        InitOptions {
            role: Role::Monitor,
            ..InitOptions::default()
        },
    )
    .unwrap();
    assert_eq!(handle.role(), Role::Monitor);
    handle.finalize().unwrap();
}

#[test]
fn classical_rank_out_of_range_rejected() {
    let config = QuantumNodeConfig::loopback(0, 7400, 4);
    let err = init_from_config(
        config,
        InitOptions {
            my_rank: 3,
            classical_count: 2,
            ..InitOptions::default()
        },
    )
    .unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}
