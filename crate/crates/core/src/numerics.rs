//! Dense 64-bit math used by every other module.
//!
//! Reductions run in index order so every result is bit-reproducible.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::shape("matrix entries", rows * cols, values.len()));
        }
        Ok(Self { rows, cols, values })
    }

    /// Uniform Glorot-style initialization, bound `sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot(rows: usize, cols: usize, fan_in: usize, fan_out: usize, rng: &mut RngStream) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let values = (0..rows * cols).map(|_| rng.uniform(-bound, bound)).collect();
        Self { rows, cols, values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    /// `self · x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::shape("matvec input", self.cols, x.len()));
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), x)).collect())
    }

    /// `selfᵀ · y`.
    pub fn matvec_t(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.rows {
            return Err(Error::shape("transposed matvec input", self.rows, y.len()));
        }
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o += w * yr;
            }
        }
        Ok(out)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_sq(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

fn ensure_finite(v: &[f64], what: &str) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::InvalidInput(format!("{what}: entry {i} is not finite"))),
        None => Ok(()),
    }
}

/// Scalar logistic function, stable for large negative inputs.
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(v: &[f64]) -> Result<Vec<f64>> {
    ensure_finite(v, "sigmoid")?;
    Ok(v.iter().map(|&x| sigmoid_scalar(x)).collect())
}

pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::InvalidInput("softmax of an empty vector".into()));
    }
    ensure_finite(v, "softmax")?;
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Mean squared error.
pub fn mse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::shape("mse", truth.len(), pred.len()));
    }
    if pred.is_empty() {
        return Err(Error::InvalidInput("mse of empty vectors".into()));
    }
    let sum: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(sum / pred.len() as f64)
}

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::InvalidInput(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for j in 0..x.len() {
        let orig = probe[j];
        probe[j] = orig + h;
        let up = f(&probe);
        probe[j] = orig - h;
        let down = f(&probe);
        probe[j] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Oracle(format!("non-finite evaluation around coordinate {j}")));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Relative error between two gradients, `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = norm_sq(a).sqrt().max(norm_sq(b).sqrt()).max(floor);
    diff / scale
}

/// SplitMix64 finalizer; used to derive substream seeds.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded ChaCha8 stream with a draw counter.
///
/// Substreams come from [`RngStream::fork`]: the child seed is
/// `mix64(seed ^ mix64(tag))`, independent of how many draws the parent made.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    position: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub const ALGORITHM: &'static str = "chacha8";

    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            position: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn position(&self) -> u64 {
        self.position
    }

    pub fn fork(&self, tag: u64) -> Self {
        Self::new(mix64(self.seed ^ mix64(tag)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.position += 1;
        self.rng.next_u64()
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.position += 1;
        lo + (hi - lo) * self.rng.random::<f64>()
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        self.position += 1;
        let z: f64 = self.rng.sample(StandardNormal);
        mean + std * z
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        self.position += 1;
        self.rng.random_range(0..n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(&[0.0]).unwrap(), vec![0.5]);
        let s = sigmoid(&[-1000.0, 1000.0]).unwrap();
        assert!(s[0].abs() < 1e-12);
        assert!((s[1] - 1.0).abs() < 1e-12);
        assert!((sigmoid(&[1.0]).unwrap()[0] - 0.7310585786).abs() < 1e-9);
        assert!(sigmoid(&[f64::NAN]).is_err());
        assert!(sigmoid(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn softmax_values() {
        let u = softmax(&[2.5, 2.5, 2.5]).unwrap();
        for x in u {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(softmax(&[-7.0]).unwrap(), vec![1.0]);
        let s = softmax(&[0.0, 3f64.ln()]).unwrap();
        assert!((s[0] - 0.25).abs() < 1e-12);
        assert!((s[1] - 0.75).abs() < 1e-12);
        assert!(softmax(&[]).is_err());
        // large inputs stay finite
        let big = softmax(&[1000.0, 1000.0]).unwrap();
        assert_eq!(big, vec![0.5, 0.5]);
    }

    #[test]
    fn mse_values() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert!((mse(&[1.0, 2.0, 3.0], &[2.0, 2.0, 5.0]).unwrap() - 5.0 / 3.0).abs() < 1e-15);
        assert!(matches!(mse(&[1.0], &[1.0, 2.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_grad(|x| x[0] * x[0], &[1.0], 1e-5).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-6);
        let g = finite_diff_grad(|_| 4.2, &[1.0, -3.0, 0.5], 1e-5).unwrap();
        assert_eq!(g, vec![0.0, 0.0, 0.0]);
        let g = finite_diff_grad(|x| x[0] * x[1], &[2.0, 3.0], 1e-5).unwrap();
        assert!((g[0] - 3.0).abs() < 1e-6);
        assert!((g[1] - 2.0).abs() < 1e-6);
        let err = finite_diff_grad(|x| if x[0] > 1.0 { f64::NAN } else { 0.0 }, &[1.0], 1e-5);
        assert!(matches!(err, Err(Error::Oracle(_))));
        assert!(finite_diff_grad(|x| x[0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn rng_streams_are_reproducible() {
        let mut a = RngStream::new(17);
        let mut b = RngStream::new(17);
        for _ in 0..1_000_000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        assert_eq!(a.position(), 1_000_000);
        let mut c = RngStream::new(18);
        assert_ne!(RngStream::new(17).next_u64(), c.next_u64());
    }

    #[test]
    fn fork_ignores_parent_position() {
        let parent = RngStream::new(5);
        let mut advanced = parent.clone();
        advanced.next_u64();
        assert_eq!(parent.fork(3).next_u64(), advanced.fork(3).next_u64());
        assert_ne!(parent.fork(3).next_u64(), parent.fork(4).next_u64());
    }

    #[test]
    fn matrix_products() {
        let m = Matrix::from_rows(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(m.matvec(&[1.0, 1.0]).unwrap(), vec![3.0, 7.0]);
        assert_eq!(m.matvec_t(&[1.0, 1.0]).unwrap(), vec![4.0, 6.0]);
        assert!(m.matvec(&[1.0]).is_err());
        assert!(Matrix::from_rows(2, 3, vec![0.0; 5]).is_err());
    }

    proptest! {
        #[test]
        fn sigmoid_is_monotone(a in -700.0f64..700.0, b in -700.0f64..700.0) {
            prop_assume!(a < b);
            let s = sigmoid(&[a, b]).unwrap();
            prop_assert!(s[0] <= s[1]);
            if b - a > 1e-6 && a.abs() < 30.0 && b.abs() < 30.0 {
                prop_assert!(s[0] < s[1]);
            }
        }

        #[test]
        fn softmax_shift_invariant(v in proptest::collection::vec(-50.0f64..50.0, 1..12), c in -100.0f64..100.0) {
            let a = softmax(&v).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let b = softmax(&shifted).unwrap();
            let total: f64 = a.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            // permutation equivariance under reversal
            let rev: Vec<f64> = v.iter().rev().copied().collect();
            let r = softmax(&rev).unwrap();
            for (x, y) in a.iter().zip(r.iter().rev()) {
                prop_assert!((x - y).abs() < 1e-15);
            }
        }

        #[test]
        fn mse_symmetric(a in proptest::collection::vec(-1e3f64..1e3, 1..20), seed in any::<u64>()) {
            let mut rng = RngStream::new(seed);
            let b: Vec<f64> = a.iter().map(|_| rng.uniform(-1e3, 1e3)).collect();
            prop_assert_eq!(mse(&a, &b).unwrap(), mse(&b, &a).unwrap());
            prop_assert_eq!(mse(&a, &a).unwrap(), 0.0);
        }
    }
}
