//! Small shared helpers: a host-wide monotonic clock, seed mixing, and the
//! checksum used for payload integrity.

use std::time::Duration;

/// Nanoseconds on the host-wide monotonic clock (`CLOCK_MONOTONIC`).
///
/// Unlike `std::time::Instant`, the raw reading is shared by every process on
/// the host, so offsets measured between two local processes reflect real
/// transfer delay rather than differing epochs.
#[cfg(unix)]
pub fn monotonic_ns() -> u64 {
    let mut ts = libc::timespec {
        tv_sec: 0,
        tv_nsec: 0,
    };
    // clock_gettime cannot fail for CLOCK_MONOTONIC with a valid pointer.
    unsafe {
        libc::clock_gettime(libc::CLOCK_MONOTONIC, &mut ts);
    }
    (ts.tv_sec as u64) * 1_000_000_000 + ts.tv_nsec as u64
}

#[cfg(not(unix))]
pub fn monotonic_ns() -> u64 {
    use std::sync::OnceLock;
    use std::time::Instant;
    static EPOCH: OnceLock<Instant> = OnceLock::new();
    EPOCH.get_or_init(Instant::now).elapsed().as_nanos() as u64
}

/// Sleep until the monotonic clock reaches `target_ns`, spinning the final
/// stretch for sub-millisecond precision.
pub fn wait_until_monotonic(target_ns: u64) {
    const SPIN_WINDOW_NS: u64 = 2_000_000;
    loop {
        let now = monotonic_ns();
        if now >= target_ns {
            return;
        }
        let remaining = target_ns - now;
        if remaining > SPIN_WINDOW_NS {
            std::thread::sleep(Duration::from_nanos(remaining - SPIN_WINDOW_NS));
        } else {
            std::hint::spin_loop();
        }
    }
}

/// SplitMix64 finalizer; decorrelates consecutive or structured inputs.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Mix several seed components into one 64-bit seed.
pub fn mix64(parts: &[u64]) -> u64 {
    let mut acc = 0x51ed_270b_14a0_e44du64;
    for &p in parts {
        acc = splitmix64(acc ^ p);
    }
    acc
}

/// FNV-1a 64-bit checksum, used as the circuit digest.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100_0000_01b3);
    }
    hash
}

/// Read a `u64` environment variable, falling back to `default`.
pub fn env_u64(name: &str, default: u64) -> u64 {
    std::env::var(name)
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(default)
}

/// Default operation timeout in milliseconds (`MPIQ_TIMEOUT_MS` overrides).
pub fn default_timeout_ms() -> u64 {
    env_u64("MPIQ_TIMEOUT_MS", 5000)
}
