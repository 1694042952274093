use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use super::{Scalar, Tensor};

/// Seeded random stream.
///
/// Bits come from ChaCha8 keyed by `seed_from_u64(seed)` on stream `stream`,
/// which is specified independently of platform and word size. Uniforms take the
/// top 53 bits of each `u64` (`(x >> 11) · 2⁻⁵³`, in `[0, 1)`). Normals use the
/// Box–Muller transform on a pair of uniforms,
/// `r = sqrt(-2 ln(1 - u1))`, `(r cos 2πu2, r sin 2πu2)`, with the transcendental
/// functions taken from `libm` so the same seed yields the same floats on every
/// target. The second value of each pair is kept for the next draw.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

/// SplitMix64 finalizer, used to derive child stream ids.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
            spare: None,
        }
    }

    /// An independent stream determined by this stream's identity and `label`,
    /// not by how much of this stream has been consumed.
    pub fn fork(&self, label: u64) -> Self {
        Self::with_stream(self.seed, mix64(self.stream ^ mix64(label)))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n` (rejection sampling, no modulo bias).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return (x % n) as usize;
            }
        }
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = libm::sqrt(-2.0 * libm::log(1.0 - u1));
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * libm::sin(theta));
        r * libm::cos(theta)
    }

    /// Normal draw resampled until it lies within two standard deviations.
    pub fn truncated_normal(&mut self, std: f64) -> f64 {
        loop {
            let z = self.normal();
            if z.abs() <= 2.0 {
                return z * std;
            }
        }
    }

    /// Tensor of i.i.d. standard normal draws.
    pub fn normal_tensor<S: Scalar>(&mut self, shape: impl Into<Vec<usize>>) -> Tensor<S> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| S::from_f64(self.normal())).collect();
        Tensor::new(shape, data).expect("shape matches draw count")
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_tensor() {
        let a: Tensor<f32> = Rng::new(7).normal_tensor(vec![3, 5]);
        let b: Tensor<f32> = Rng::new(7).normal_tensor(vec![3, 5]);
        assert_eq!(a, b);
    }

    #[test]
    fn sequential_calls_advance() {
        let mut r = Rng::new(7);
        let a: Tensor<f64> = r.normal_tensor(vec![64]);
        let b: Tensor<f64> = r.normal_tensor(vec![64]);
        assert_ne!(a, b);
        assert!(a.data().iter().all(|x| !b.data().contains(x)));
    }

    #[test]
    fn moments_of_1e5_draws() {
        let mut r = Rng::new(2024);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| r.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn fork_is_independent_of_consumption() {
        let a = Rng::new(3);
        let mut b = Rng::new(3);
        b.next_u64();
        assert_eq!(a.fork(11).next_u64(), b.fork(11).next_u64());
        assert_ne!(a.fork(11).next_u64(), a.fork(12).next_u64());
    }

    #[test]
    fn below_is_in_range() {
        let mut r = Rng::new(1);
        for n in 1..20 {
            for _ in 0..50 {
                assert!(r.below(n) < n);
            }
        }
    }
}
