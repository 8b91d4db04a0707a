//! Deterministic random numbers for data generation, weight init and
//! training-time sampling.
//!
//! The generator is SplitMix64 (Steele, Lea & Flood), chosen because the
//! whole algorithm fits in a dozen lines with fixed published constants,
//! so any implementation in any language reproduces the exact same
//! streams. State update adds the golden-gamma increment
//! `0x9E3779B97F4A7C15`; outputs pass through the finalizer below.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 output finalizer (the `mix64` function of the reference
/// implementation).
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// SplitMix64 generator.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    /// Generator for the `index`-th parallel substream of `seed`.
    ///
    /// The substream state is `mix64(mix64(seed) ^ mix64(index + 1))`:
    /// both inputs are scrambled before combining so substreams do not
    /// overlap shifted copies of each other the way `seed + index` would.
    pub fn substream(seed: u64, index: u64) -> Self {
        SplitMix64 { state: mix64(mix64(seed) ^ mix64(index.wrapping_add(1))) }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform double in `[0, 1)` from the top 53 bits.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, bound)` via the 128-bit multiply trick.
    ///
    /// Bias is at most `bound / 2^64`, irrelevant at the bounds used here.
    #[inline]
    pub fn next_below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "next_below requires bound > 0");
        ((self.next_u64() as u128 * bound as u128) >> 64) as u64
    }

    /// First `k` entries of a Fisher-Yates shuffle of `0..len`; used to
    /// draw a subset without replacement.
    pub fn sample_indices(&mut self, len: usize, k: usize) -> Vec<usize> {
        assert!(k <= len);
        let mut idx: Vec<usize> = (0..len).collect();
        for i in 0..k {
            let j = i + self.next_below((len - i) as u64) as usize;
            idx.swap(i, j);
        }
        idx.truncate(k);
        idx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_deterministic() {
        let mut a = SplitMix64::new(42);
        let mut b = SplitMix64::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn reference_values() {
        // First outputs for seed 1234567 from the published SplitMix64
        // reference implementation.
        let mut rng = SplitMix64::new(1234567);
        assert_eq!(rng.next_u64(), 6457827717110365317);
        assert_eq!(rng.next_u64(), 3203168211198807973);
        assert_eq!(rng.next_u64(), 9817491932198370423);
    }

    #[test]
    fn substreams_differ_and_do_not_shift_overlap() {
        let mut s0 = SplitMix64::substream(7, 0);
        let mut s1 = SplitMix64::substream(7, 1);
        let a: Vec<u64> = (0..8).map(|_| s0.next_u64()).collect();
        let b: Vec<u64> = (0..8).map(|_| s1.next_u64()).collect();
        assert_ne!(a, b);
        // substream 1 must not be substream 0 advanced by one draw
        assert_ne!(&a[1..], &b[..7]);
    }

    #[test]
    fn f64_in_unit_interval() {
        let mut rng = SplitMix64::new(99);
        for _ in 0..10_000 {
            let x = rng.next_f64();
            assert!((0.0..1.0).contains(&x));
        }
    }

    #[test]
    fn next_below_in_range() {
        let mut rng = SplitMix64::new(3);
        for _ in 0..10_000 {
            assert!(rng.next_below(17) < 17);
        }
    }

    #[test]
    fn sample_indices_is_a_subset_without_repeats() {
        let mut rng = SplitMix64::new(5);
        let s = rng.sample_indices(50, 20);
        assert_eq!(s.len(), 20);
        let mut sorted = s.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 20);
        assert!(sorted.iter().all(|&i| i < 50));
    }
}
