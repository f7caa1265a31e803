//! Splittable random streams keyed by `(seed, path)`.
//!
//! A stream's sequence depends only on its seed and the labels used to reach
//! it, never on how much the parent stream has been consumed. Layer weights
//! therefore stay identical no matter in which order layers are initialized.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

pub struct RngStream {
    seed: u64,
    path: Vec<String>,
    rng: ChaCha8Rng,
}

impl Clone for RngStream {
    fn clone(&self) -> Self {
        RngStream {
            seed: self.seed,
            path: self.path.clone(),
            rng: self.rng.clone(),
        }
    }
}

impl std::fmt::Debug for RngStream {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "RngStream({}:{})", self.seed, self.path.join("/"))
    }
}

fn derive_key(seed: u64, path: &[String]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"edgepop-rng");
    h.update(seed.to_le_bytes());
    for label in path {
        // length prefix keeps ["ab","c"] distinct from ["a","bc"]
        h.update((label.len() as u64).to_le_bytes());
        h.update(label.as_bytes());
    }
    h.finalize().into()
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::at(seed, Vec::new())
    }

    fn at(seed: u64, path: Vec<String>) -> Self {
        let rng = ChaCha8Rng::from_seed(derive_key(seed, &path));
        RngStream { seed, path, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn path(&self) -> &[String] {
        &self.path
    }

    /// Child stream addressed by `label`; independent of this stream's position.
    pub fn fork(&self, label: &str) -> RngStream {
        let mut path = self.path.clone();
        path.push(label.to_string());
        Self::at(self.seed, path)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.rng);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn draws(s: &mut RngStream, n: usize) -> Vec<u64> {
        (0..n).map(|_| s.next_u64()).collect()
    }

    #[test]
    fn same_fork_same_sequence() {
        let root = RngStream::new(1);
        assert_eq!(draws(&mut root.fork("a"), 32), draws(&mut root.fork("a"), 32));
    }

    #[test]
    fn sibling_forks_differ() {
        let root = RngStream::new(1);
        assert_ne!(draws(&mut root.fork("a"), 8), draws(&mut root.fork("b"), 8));
        assert_ne!(
            draws(&mut RngStream::new(1).fork("a"), 8),
            draws(&mut RngStream::new(2).fork("a"), 8)
        );
    }

    #[test]
    fn fork_ignores_parent_position() {
        let mut root = RngStream::new(9);
        let before = draws(&mut root.fork("x"), 4);
        draws(&mut root, 100);
        assert_eq!(before, draws(&mut root.fork("x"), 4));
    }

    #[test]
    fn path_labels_are_not_concatenated() {
        let root = RngStream::new(3);
        let a = draws(&mut root.fork("ab").fork("c"), 4);
        let b = draws(&mut root.fork("a").fork("bc"), 4);
        assert_ne!(a, b);
    }

    #[test]
    fn normal_mean_within_three_standard_errors() {
        let mut s = RngStream::new(1).fork("normal");
        let n = 100_000;
        let mean = (0..n).map(|_| s.normal()).sum::<f64>() / n as f64;
        assert!(mean.abs() < 3.0 / (n as f64).sqrt(), "mean {mean}");
    }
}
