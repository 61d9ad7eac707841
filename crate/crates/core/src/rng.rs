//! Deterministic random streams.
//!
//! All randomness in the pipeline flows through ChaCha8 generators seeded
//! explicitly. Per-sample streams are keyed by `(seed, index)` so parallel
//! data preparation is order-independent and reproducible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Root generator for a configuration seed.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream for one sample within a seeded run.
///
/// Streams with different `index` never overlap, and the result does not
/// depend on how many other streams were drawn from.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_independent_of_draw_order() {
        let a: f64 = sample_rng(7, 3).random();
        let mut other = sample_rng(7, 2);
        let _: [f64; 8] = other.random();
        let b: f64 = sample_rng(7, 3).random();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn distinct_indices_differ() {
        let a: u64 = sample_rng(7, 0).random();
        let b: u64 = sample_rng(7, 1).random();
        assert_ne!(a, b);
    }
}
