//! Seeded, splittable random streams.
//!
//! Every consumer gets its own `(seed, stream)` pair, so results never depend on
//! how work is scheduled across threads. The generator is ChaCha8, whose output
//! is specified bit-for-bit and is identical across platforms.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Matrix;
use crate::error::{Error, Result};

/// A deterministic random stream identified by `(seed, stream)`.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, stream, inner }
    }

    /// Derives an independent stream for a labelled sub-task, e.g. `(layer, cycle)`.
    pub fn derive(seed: u64, domain: u64, path: &[u64]) -> Self {
        Self::new(seed, stream_id(domain, path))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        // 53 random mantissa bits.
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..bound` (rejection sampling, no modulo bias).
    pub fn below(&mut self, bound: usize) -> usize {
        assert!(bound > 0);
        let bound = bound as u64;
        let zone = u64::MAX - (u64::MAX % bound);
        loop {
            let v = self.inner.next_u64();
            if v < zone {
                return (v % bound) as usize;
            }
        }
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a domain tag and a path of indices into one stream id.
pub fn stream_id(domain: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix64(domain), |acc, &p| mix64(acc ^ mix64(p)))
}

/// Matrix of i.i.d. `N(0, scale^2)` entries.
pub fn random_matrix(rng: &mut SeededRng, rows: usize, cols: usize, scale: f64) -> Result<Matrix> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidParameter(format!("scale must be positive, got {scale}")));
    }
    if rows == 0 || cols == 0 {
        return Err(Error::EmptyInput(format!("random matrix of shape {rows}x{cols}")));
    }
    let data = (0..rows * cols).map(|_| scale * rng.standard_normal()).collect();
    Ok(Matrix::from_raw(rows, cols, data))
}

/// Uniformly random permutation of `0..n` (Fisher–Yates).
pub fn random_permutation(rng: &mut SeededRng, n: usize) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::EmptyInput("permutation of an empty set".into()));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.below(i + 1);
        perm.swap(i, j);
    }
    Ok(perm)
}

/// `k` distinct elements of `pool`, chosen uniformly (partial Fisher–Yates).
pub fn sample_without_replacement(rng: &mut SeededRng, pool: &[usize], k: usize) -> Vec<usize> {
    assert!(k <= pool.len());
    let mut work = pool.to_vec();
    for i in 0..k {
        let j = i + rng.below(work.len() - i);
        work.swap(i, j);
    }
    work.truncate(k);
    work
}

/// Inverse of a permutation index array.
pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub fn is_permutation(perm: &[usize]) -> bool {
    let mut seen = vec![false; perm.len()];
    for &p in perm {
        if p >= perm.len() || seen[p] {
            return false;
        }
        seen[p] = true;
    }
    true
}
