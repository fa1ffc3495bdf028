//! Seeded random streams.
//!
//! Every random draw in the crate comes from ChaCha8 (RFC 7539 core, 8
//! rounds) keyed by a 64-bit seed and a 64-bit stream id, so results are
//! reproducible across platforms and independent streams can be consumed
//! concurrently. Gaussian variates use `rand_distr::StandardNormal`
//! (ziggurat), which is itself platform-independent.

use rand::{Rng as _, SeedableRng};
use rand_distr::StandardNormal;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream ids for the independent consumers inside one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Data = 1,
    Init = 2,
    Shuffle = 3,
    Trials = 4,
    Checks = 5,
}

pub fn stream(seed: u64, which: Stream) -> Rng {
    keyed(seed, which as u64)
}

/// A generator for `(seed, index)`, used for per-trial streams.
pub fn keyed(seed: u64, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// `dim` independent standard normal draws.
pub fn normal_vec(rng: &mut Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Uniform direction on the unit sphere.
pub fn unit_vector(rng: &mut Rng, dim: usize) -> Vec<f64> {
    loop {
        let v = normal_vec(rng, dim);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}
