//! SplitMix64 in counter form.
//!
//! Draw `k` (1-based) of a stream is `mix(seed + k·0x9E3779B97F4A7C15)`, which
//! is bit-for-bit the classic SplitMix64 sequence for that seed and can be
//! reproduced in any language with wrapping 64-bit arithmetic. Uniforms take
//! the top 53 bits; normals come from Box–Muller pairs.

use super::tensor::Tensor;

pub const ALGORITHM: &str = "splitmix64-counter/box-muller";

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PrngState {
    pub seed: u64,
    pub counter: u64,
}

impl PrngState {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    /// Independent stream keyed by `(seed, stream)`.
    pub fn derive(seed: u64, stream: u64) -> Self {
        Self::new(mix(seed ^ mix(stream.wrapping_add(GAMMA))))
    }

    pub fn algorithm(&self) -> &'static str {
        ALGORITHM
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix(self.seed.wrapping_add(self.counter.wrapping_mul(GAMMA)))
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n` (`n ≥ 1`).
    pub fn below(&mut self, n: usize) -> usize {
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }

    /// Standard normals; each pair of outputs consumes two uniforms.
    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for pair in out.chunks_mut(2) {
            let u1 = 1.0 - self.uniform();
            let u2 = self.uniform();
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = std::f64::consts::TAU * u2;
            pair[0] = r * theta.cos();
            if let Some(second) = pair.get_mut(1) {
                *second = r * theta.sin();
            }
        }
    }

    pub fn normal(&mut self, shape: &[usize]) -> Tensor {
        let mut data = vec![0.0; shape.iter().product()];
        self.fill_normal(&mut data);
        Tensor::new(shape.to_vec(), data).expect("normal shape")
    }
}
