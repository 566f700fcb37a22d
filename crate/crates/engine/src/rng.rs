//! Seedable, splittable random streams.
//!
//! Every stream is a ChaCha8 keystream keyed by a 64-bit key. Child streams
//! are derived from the parent key and a label with SplitMix64 finalization,
//! so deriving a child never advances the parent and the result does not
//! depend on how much of the parent has been consumed.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct Rng {
    key: u64,
    inner: ChaCha8Rng,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn label_hash(label: &str) -> u64 {
    // FNV-1a; only needs to be stable across platforms.
    label
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

impl Rng {
    pub fn seed(seed: u64) -> Self {
        let key = splitmix(seed);
        Self {
            key,
            inner: ChaCha8Rng::seed_from_u64(key),
        }
    }

    /// Child stream identified by an integer label.
    pub fn fork(&self, label: u64) -> Rng {
        Rng::seed(self.key ^ splitmix(label.wrapping_add(0x5851_F42D_4C95_7F2D)))
    }

    /// Child stream identified by a name, e.g. `"dropout"` or `"split"`.
    pub fn fork_named(&self, name: &str) -> Rng {
        self.fork(label_hash(name))
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal draw (Box-Muller).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }

    /// `k` distinct indices from `0..n`, in ascending order.
    pub fn sample_sorted(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut picked = rand::seq::index::sample(&mut self.inner, n, k.min(n)).into_vec();
        picked.sort_unstable();
        picked
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.inner.try_fill_bytes(dest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forks_are_independent_of_parent_consumption() {
        let a = Rng::seed(7);
        let mut b = Rng::seed(7);
        for _ in 0..10 {
            b.uniform();
        }
        assert_eq!(a.fork(3).uniform(), b.fork(3).uniform());
        assert_ne!(a.fork(3).uniform(), a.fork(4).uniform());
        assert_eq!(a.fork_named("x").key(), b.fork_named("x").key());
    }

    #[test]
    fn sorted_sample_is_distinct_and_sorted() {
        let mut r = Rng::seed(1);
        let s = r.sample_sorted(100, 16);
        assert_eq!(s.len(), 16);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
    }
}
