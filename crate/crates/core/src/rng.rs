//! Seed plumbing. Every stochastic stage takes a u64 seed and every
//! sub-stage derives its own from the master, so a whole run is pinned by
//! one number.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 step. Good avalanche, cheap, stable forever.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Derive an independent seed for sub-stage `stream` of a run seeded with
/// `master`. Distinct streams give unrelated seeds; the same pair always
/// gives the same seed.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    splitmix64(master ^ splitmix64(stream.wrapping_add(1)))
}

/// The one RNG used across the crate. ChaCha output is specified by the
/// algorithm itself, so streams are identical on every platform.
pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_is_deterministic_and_spread() {
        assert_eq!(derive_seed(7, 0), derive_seed(7, 0));
        let a = derive_seed(7, 0);
        let b = derive_seed(7, 1);
        let c = derive_seed(8, 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
        // consecutive streams should not be trivially related
        assert_ne!(a ^ b, 1);
    }

    #[test]
    fn seeded_rng_reproduces() {
        use rand::Rng;
        let mut r1 = seeded(42);
        let mut r2 = seeded(42);
        let xs: Vec<u64> = (0..8).map(|_| r1.gen()).collect();
        let ys: Vec<u64> = (0..8).map(|_| r2.gen()).collect();
        assert_eq!(xs, ys);
    }
}
