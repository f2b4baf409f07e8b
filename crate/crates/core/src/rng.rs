//! Counter-based deterministic random number generation.
//!
//! All randomness in the crate flows through [`SplitMix64`], a counter-based
//! generator: draw `i` from seed `s` is the pure function
//! `mix64(s + (i + 1) * GOLDEN)`, independent of how previous draws were
//! consumed. That makes every sampling procedure reproducible from a seed
//! alone and trivially portable across languages.

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finalizer (Vigna's reference constants).
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic counter-based generator.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    seed: u64,
    counter: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    /// An independent stream derived from this generator's seed.
    ///
    /// Derivation depends only on the seed and `stream`, not on the number of
    /// draws already taken, so sub-streams can be split off at any time.
    pub fn derive(&self, stream: u64) -> Self {
        Self::new(mix64(self.seed ^ mix64(stream.wrapping_add(GOLDEN))))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.counter += 1;
        mix64(self.seed.wrapping_add(GOLDEN.wrapping_mul(self.counter)))
    }

    /// Uniform double in `[0, 1)` from the top 53 bits.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform double in `[lo, hi)`.
    #[inline]
    pub fn next_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform index in `[0, n)`. Modulo bias is below 1e-13 for any `n`
    /// used here and accepted in exchange for a one-line portable spec.
    #[inline]
    pub fn next_index(&mut self, n: usize) -> usize {
        assert!(n > 0, "next_index of empty range");
        (self.next_u64() % n as u64) as usize
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.next_index(i + 1);
            xs.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Reference sequence for seed 1234567, cross-checked against Vigna's C
    // implementation of splitmix64.
    #[test]
    fn matches_reference_vectors() {
        let mut rng = SplitMix64::new(1234567);
        let got: Vec<u64> = (0..5).map(|_| rng.next_u64()).collect();
        assert_eq!(
            got,
            vec![
                6457827717110365317,
                3203168211198807973,
                9817491932198370423,
                4593380528125082431,
                16408922859458223821,
            ]
        );
    }

    #[test]
    fn draws_are_pure_functions_of_the_counter() {
        let mut a = SplitMix64::new(99);
        let mut b = SplitMix64::new(99);
        let _ = a.next_u64();
        let second_from_a = a.next_u64();
        let _ = b.next_f64(); // different consumption, same counter advance
        assert_eq!(second_from_a, b.next_u64());
    }

    #[test]
    fn f64_range_is_half_open_unit() {
        let mut rng = SplitMix64::new(7);
        for _ in 0..10_000 {
            let x = rng.next_f64();
            assert!((0.0..1.0).contains(&x));
        }
    }

    #[test]
    fn derived_streams_do_not_collide() {
        let root = SplitMix64::new(42);
        let mut a = root.derive(0);
        let mut b = root.derive(1);
        let overlap = (0..100)
            .map(|_| a.next_u64())
            .collect::<std::collections::HashSet<_>>();
        assert!((0..100).all(|_| !overlap.contains(&b.next_u64())));
    }
}
