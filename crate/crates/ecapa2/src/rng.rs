//! Deterministic, splittable random number generation.
//!
//! Every stochastic component takes an explicit seed or generator. Sub-streams
//! are derived with [`subseed`] so that work items (steps, batch slots,
//! utterances) can be processed in any order or in parallel without changing
//! the draws each item sees.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// The generator used throughout the crate.
pub type SeedRng = ChaCha12Rng;

/// splitmix64 finalizer; good avalanche behavior for seed mixing.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive an independent seed from a base seed and a salt path.
pub fn subseed(seed: u64, salt: &[u64]) -> u64 {
    let mut s = splitmix64(seed ^ 0xa076_1d64_78bd_642f);
    for &v in salt {
        s = splitmix64(s ^ splitmix64(v));
    }
    s
}

/// Generator seeded directly from a u64.
pub fn rng_from(seed: u64) -> SeedRng {
    SeedRng::seed_from_u64(seed)
}

/// Generator for a derived sub-stream.
pub fn subrng(seed: u64, salt: &[u64]) -> SeedRng {
    rng_from(subseed(seed, salt))
}

/// Standard-normal draw via Box-Muller. Consumes exactly two uniforms.
pub fn normal(rng: &mut SeedRng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Fill a slice with N(0, std^2) draws.
pub fn fill_normal(out: &mut [f64], std: f64, rng: &mut SeedRng) {
    for v in out.iter_mut() {
        *v = normal(rng) * std;
    }
}
