/// Deterministic pseudo-random generator used everywhere randomness is
/// needed: weight init, data synthesis, batch shuffling, test sampling.
///
/// The generator is splitmix64: the 64-bit state advances by the golden
/// gamma per draw and the output is a bijective mix of the new state.
/// Identical seeds therefore produce identical draw sequences on every
/// platform.
///
/// Derived draws:
/// - `next_f64`: the top 53 bits of `next_u64`, scaled to [0, 1).
/// - `uniform(lo, hi)`: `lo + next_f64 * (hi - lo)`.
/// - `normal()`: Box-Muller on two `next_f64` draws (two draws consumed
///   per sample, no caching of the second value).
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform draw in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + self.next_f64() * (hi - lo)
    }

    /// Integer draw in [0, n) by modulo reduction. The bias is irrelevant
    /// for the small n used here (shuffles, coordinate sampling).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller. Consumes exactly two draws.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.next_f64().max(f64::MIN_POSITIVE);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
