//! Seeded splittable counter-based generator (splitmix64).
//!
//! Owned by the harness and the model builders, never by tensor ops, so the
//! same seed reproduces the same tensors on every rank and every run.

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1) with 53 bits of mantissa.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn fill_uniform(&mut self, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| self.uniform(lo, hi)).collect()
    }

    /// Derive an independent stream labelled by `label`. Splitting the same
    /// generator state with the same label always yields the same stream.
    pub fn split(&self, label: u64) -> SplitMix64 {
        let mut probe = SplitMix64 {
            state: self.state ^ label.wrapping_mul(GAMMA),
        };
        SplitMix64 {
            state: probe.next_u64(),
        }
    }
}
