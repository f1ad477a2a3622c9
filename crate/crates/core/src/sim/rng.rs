//! Counter-based random streams keyed by `(master seed, trial, role, index)`
//! so trials can run in any order or in parallel and draw identical numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum StreamRole {
    Placement = 1,
    Measurement = 2,
    Scheduler = 3,
    TargetMotion = 4,
}

pub fn stream(master: u64, trial: u64, role: StreamRole, index: u64) -> ChaCha8Rng {
    assert!(trial < 1 << 32 && index < 1 << 24, "stream key out of range");
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream((trial << 32) | ((role as u64) << 24) | index);
    rng
}

/// One measurement stream per agent.
pub fn agent_streams(master: u64, trial: u64, n: usize) -> Vec<ChaCha8Rng> {
    (0..n as u64)
        .map(|i| stream(master, trial, StreamRole::Measurement, i))
        .collect()
}
