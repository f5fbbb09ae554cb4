//! Shared test support: in-process clusters, independent simulation oracles,
//! and statistical helpers.

#![allow(dead_code)]

use std::sync::atomic::{AtomicU16, Ordering};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mpiq::monitor::{spawn_monitor, MonitorConfig, MonitorHandle};
use mpiq::qsim::{Circuit, GateOp, StateVector};
use mpiq::runtime::{init_from_config, InitOptions, QuantumDevice, QuantumNodeConfig, Role};
use mpiq::util::mix64;
use mpiq::RuntimeHandle;

/// Chi-square critical value, df = 1, significance 0.001.
pub const CHI2_CRIT_DF1_P001: f64 = 10.828;

/// Unique fake ports for in-process rank endpoints (hub keys only).
static NEXT_FAKE_PORT: AtomicU16 = AtomicU16::new(40000);

pub fn fake_port() -> u16 {
    NEXT_FAKE_PORT.fetch_add(1, Ordering::Relaxed)
}

/// A set of in-process monitors plus the config describing them.
pub struct Cluster {
    pub monitors: Vec<MonitorHandle>,
    pub config: QuantumNodeConfig,
}

impl Cluster {
    /// Spawn `n` monitors on OS-assigned loopback ports.
    pub fn spawn(n: u32, qubit_count: u16, seed: u64, delay_ms: u64, local: bool) -> Cluster {
        let mut monitors = Vec::new();
        let mut devices = Vec::new();
        for i in 0..n {
            let handle = spawn_monitor(MonitorConfig {
                ip: "127.0.0.1".into(),
                port: 0,
                device_id: i,
                qubit_count,
                seed: mix64(&[seed, i as u64]),
                delay_ms,
                register_local: local,
            })
            .expect("monitor spawn");
            let dev = handle.device();
            devices.push(QuantumDevice {
                ip: dev.ip.clone(),
                port: dev.port,
                device_id: dev.device_id,
                qubit_count,
                backend: "statevector".into(),
            });
            monitors.push(handle);
        }
        Cluster {
            monitors,
            config: QuantumNodeConfig {
                devices,
                epsilon_sync_ms: 50,
            },
        }
    }

    /// Single-rank classical handle attached to this cluster.
    pub fn attach(&self, seed: u64) -> RuntimeHandle {
        init_from_config(
            self.config.clone(),
            InitOptions {
                seed,
                ..InitOptions::default()
            },
        )
        .expect("init")
    }

    /// One handle per classical rank, all in this process over hub endpoints.
    pub fn attach_ranks(&self, np: u32, seed: u64) -> Vec<RuntimeHandle> {
        self.attach_ranks_with_endpoints(np, seed).0
    }

    pub fn attach_ranks_with_endpoints(
        &self,
        np: u32,
        seed: u64,
    ) -> (Vec<RuntimeHandle>, Vec<(String, u16)>) {
        let endpoints: Vec<(String, u16)> = (0..np)
            .map(|_| ("rank-local".to_string(), fake_port()))
            .collect();
        let handles = (0..np)
            .map(|rank| {
                init_from_config(
                    self.config.clone(),
                    InitOptions {
                        role: Role::Classical,
                        my_rank: rank,
                        classical_count: np,
                        rank_endpoints: endpoints.clone(),
                        seed: mix64(&[seed, rank as u64]),
                        ..InitOptions::default()
                    },
                )
                .expect("rank init")
            })
            .collect();
        (handles, endpoints)
    }

    /// Tear the cluster down abruptly.
    pub fn kill_all(self) {
        for m in self.monitors {
            m.kill();
        }
    }
}

/// One-sample chi-square statistic of (zeros, ones) against a fair coin.
pub fn chi2_fair_coin(zeros: u64, ones: u64) -> f64 {
    let total = (zeros + ones) as f64;
    let expected = total / 2.0;
    let dz = zeros as f64 - expected;
    let d1 = ones as f64 - expected;
    dz * dz / expected + d1 * d1 / expected
}

/// Two-sample chi-square statistic for a 2x2 contingency table
/// [[a, b], [c, d]] (homogeneity of two binomial samples).
pub fn chi2_two_sample(a: u64, b: u64, c: u64, d: u64) -> f64 {
    let (a, b, c, d) = (a as f64, b as f64, c as f64, d as f64);
    let n = a + b + c + d;
    let denom = (a + b) * (c + d) * (a + c) * (b + d);
    if denom == 0.0 {
        return 0.0;
    }
    n * (a * d - b * c).powi(2) / denom
}

/// Dense matrix-product oracle: build the full 2^n x 2^n unitary of each gate
/// and apply it by explicit matrix-vector multiplication. Independent of the
/// production statevector path.
pub mod oracle {
    #![allow(clippy::needless_range_loop)]

    use super::*;

    type Matrix = Vec<Vec<Complex64>>;

    fn identity(dim: usize) -> Matrix {
        let mut m = vec![vec![Complex64::new(0.0, 0.0); dim]; dim];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = Complex64::new(1.0, 0.0);
        }
        m
    }

    /// Full-space unitary for one gate, with qubit q addressing bit q of the
    /// amplitude index (identical convention to the production code, asserted
    /// against textbook identities in the tests that use this oracle).
    fn gate_unitary(op: GateOp, n: u16) -> Matrix {
        let dim = 1usize << n;
        let mut m = vec![vec![Complex64::new(0.0, 0.0); dim]; dim];
        let inv = std::f64::consts::FRAC_1_SQRT_2;
        match op {
            GateOp::H { qubit } => {
                let bit = 1usize << qubit;
                for col in 0..dim {
                    // Column `col` of H on `qubit`, identity elsewhere.
                    let base = col & !bit;
                    if col & bit == 0 {
                        m[base][col] += Complex64::new(inv, 0.0);
                        m[base | bit][col] += Complex64::new(inv, 0.0);
                    } else {
                        m[base][col] += Complex64::new(inv, 0.0);
                        m[base | bit][col] += Complex64::new(-inv, 0.0);
                    }
                }
            }
            GateOp::X { qubit } => {
                let bit = 1usize << qubit;
                for col in 0..dim {
                    m[col ^ bit][col] = Complex64::new(1.0, 0.0);
                }
            }
            GateOp::Cnot { control, target } => {
                let cbit = 1usize << control;
                let tbit = 1usize << target;
                for col in 0..dim {
                    let row = if col & cbit != 0 { col ^ tbit } else { col };
                    m[row][col] = Complex64::new(1.0, 0.0);
                }
            }
            GateOp::MeasureAll => return identity(dim),
        }
        m
    }

    fn mat_vec(m: &Matrix, v: &[Complex64]) -> Vec<Complex64> {
        let dim = v.len();
        let mut out = vec![Complex64::new(0.0, 0.0); dim];
        for (row, out_amp) in out.iter_mut().enumerate() {
            let mut acc = Complex64::new(0.0, 0.0);
            for (col, amp) in v.iter().enumerate() {
                acc += m[row][col] * amp;
            }
            *out_amp = acc;
        }
        out
    }

    /// Evolve |0...0> through the circuit with dense matrices.
    pub fn statevector(circuit: &Circuit) -> Vec<Complex64> {
        let dim = 1usize << circuit.n_qubits;
        let mut state = vec![Complex64::new(0.0, 0.0); dim];
        state[0] = Complex64::new(1.0, 0.0);
        for &op in &circuit.ops {
            let m = gate_unitary(op, circuit.n_qubits);
            state = mat_vec(&m, &state);
        }
        state
    }

    /// Largest amplitude difference between the production statevector and
    /// this oracle.
    pub fn max_deviation(circuit: &Circuit) -> f64 {
        let expected = statevector(circuit);
        let mut state = StateVector::new(circuit.n_qubits).unwrap();
        for &op in &circuit.ops {
            state.apply_gate(op).unwrap();
        }
        state
            .amplitudes()
            .iter()
            .zip(&expected)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }
}

/// Random circuit over at most `max_qubits` qubits and `max_gates` gates.
pub fn random_circuit(rng: &mut ChaCha8Rng, max_qubits: u16, max_gates: usize) -> Circuit {
    let n = rng.gen_range(1..=max_qubits);
    let mut circuit = Circuit::new(n).unwrap();
    let gates = rng.gen_range(0..=max_gates);
    for _ in 0..gates {
        match rng.gen_range(0..3) {
            0 => {
                circuit.h(rng.gen_range(0..n)).unwrap();
            }
            1 => {
                circuit.x(rng.gen_range(0..n)).unwrap();
            }
            _ if n >= 2 => {
                let control = rng.gen_range(0..n);
                let mut target = rng.gen_range(0..n);
                while target == control {
                    target = rng.gen_range(0..n);
                }
                circuit.cnot(control, target).unwrap();
            }
            _ => {
                circuit.h(0).unwrap();
            }
        }
    }
    circuit
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
