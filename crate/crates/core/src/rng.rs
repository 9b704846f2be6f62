//! Splittable counter-based random number generation.
//!
//! Every stochastic operation in this crate takes an explicit [`Rng`] handle.
//! Streams are derived by name, so a component's randomness is a pure function
//! of `(root seed, path of labels)` regardless of call order elsewhere in the
//! program. The generator itself is ChaCha8 (a counter-mode stream cipher);
//! child keys come from hashing the parent key with the label.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug)]
pub struct Rng {
    key: [u8; 32],
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn from_seed(seed: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        Self {
            inner: ChaCha8Rng::from_seed(key),
            key,
        }
    }

    /// Derive an independent child stream identified by `label`.
    ///
    /// The child depends only on this stream's key and the label, not on how
    /// many values have been drawn from the parent.
    pub fn split(&self, label: &str) -> Self {
        let mut h = Sha256::new();
        h.update(self.key);
        h.update([0x1f]);
        h.update(label.as_bytes());
        let key: [u8; 32] = h.finalize().into();
        Self {
            inner: ChaCha8Rng::from_seed(key),
            key,
        }
    }

    /// Indexed variant of [`split`](Self::split), for per-item streams.
    pub fn split_index(&self, index: u64) -> Self {
        let mut h = Sha256::new();
        h.update(self.key);
        h.update([0x2f]);
        h.update(index.to_le_bytes());
        let key: [u8; 32] = h.finalize().into();
        Self {
            inner: ChaCha8Rng::from_seed(key),
            key,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f32 {
        // 24 mantissa bits so every value is exactly representable.
        (self.inner.next_u32() >> 8) as f32 * (1.0 / (1u32 << 24) as f32)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        // Rejection sampling keeps the distribution exact.
        let n = n as u64;
        let zone = u64::MAX - u64::MAX % n;
        loop {
            let v = self.inner.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Bernoulli draw with probability `p`.
    pub fn chance(&mut self, p: f32) -> bool {
        self.uniform() < p
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f32 {
        let u1 = self.uniform().max(1e-12);
        let u2 = self.uniform();
        let r = (-2.0 * (u1 as f64).ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2 as f64;
        (r * theta.cos()) as f32
    }

    pub fn choose<'a, T>(&mut self, items: &'a [T]) -> &'a T {
        &items[self.below(items.len())]
    }

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
    fn deterministic_per_seed() {
        let mut a = Rng::from_seed(7);
        let mut b = Rng::from_seed(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn split_is_order_independent() {
        let root = Rng::from_seed(3);
        let mut a = root.split("maze");
        let mut parent = root.clone();
        parent.next_u64(); // consuming from the parent must not disturb children
        let mut b = parent.split("maze");
        for _ in 0..32 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut other = root.split("render");
        assert_ne!(a.next_u64(), other.next_u64());
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut rng = Rng::from_seed(11);
        for _ in 0..10_000 {
            let v = rng.uniform();
            assert!((0.0..1.0).contains(&v));
        }
    }

    #[test]
    fn below_is_unbiased_enough() {
        let mut rng = Rng::from_seed(5);
        let mut counts = [0usize; 5];
        for _ in 0..50_000 {
            counts[rng.below(5)] += 1;
        }
        for &c in &counts {
            assert!((9_000..11_000).contains(&c), "count {c} out of range");
        }
    }
}
