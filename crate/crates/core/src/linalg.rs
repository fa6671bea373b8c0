//! Dense row-major tensors and the deterministic random number source.
//!
//! Everything here is `f64`. Tensors are plain owned buffers with an explicit
//! shape; there are no strided views and no broadcasting.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{MfmError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that the buffer length matches the shape and
    /// that every value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.is_empty() || expected == 0 {
            return Err(MfmError::shape(format!("degenerate shape {shape:?}")));
        }
        if expected != data.len() {
            return Err(MfmError::shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(MfmError::NonFinite(format!("tensor of shape {shape:?}")));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(MfmError::shape(format!(
                "add {:?} += {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(MfmError::shape(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }
}

/// Matrix product with a fixed (i, k, j) summation order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 {
        return Err(MfmError::shape(format!(
            "matmul needs matrices, got {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(MfmError::shape(format!(
            "matmul inner dims {k} vs {k2}"
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Sum of squared elementwise differences.
pub fn sq_l2(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape != b.shape {
        return Err(MfmError::shape(format!(
            "sq_l2 {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    Ok(sq_dist(&a.data, &b.data))
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out = W x` for a row-major `[rows, cols]` weight.
pub(crate) fn matvec(w: &[f64], x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    (0..rows).map(|r| dot(&w[r * cols..(r + 1) * cols], x)).collect()
}

/// `out += Wᵀ g`.
pub(crate) fn matvec_t_acc(w: &[f64], g: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    for r in 0..rows {
        let gr = g[r];
        if gr == 0.0 {
            continue;
        }
        for (o, wv) in out.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
            *o += gr * wv;
        }
    }
}

/// `dw += g xᵀ`.
pub(crate) fn outer_acc(dw: &mut [f64], g: &[f64], x: &[f64]) {
    let cols = x.len();
    for (r, gr) in g.iter().enumerate() {
        if *gr == 0.0 {
            continue;
        }
        for (d, xv) in dw[r * cols..(r + 1) * cols].iter_mut().zip(x) {
            *d += gr * xv;
        }
    }
}

/// Deterministic random stream: ChaCha8 keyed by a 64-bit seed.
///
/// Identical seed plus identical call sequence yields identical draws.
#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    inner: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream for a parallel worker: `base_seed XOR worker_index`.
    pub fn for_worker(base_seed: u64, worker_index: u64) -> Self {
        RngState::new(base_seed ^ worker_index)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of 32-bit words consumed so far.
    pub fn position(&self) -> u128 {
        self.inner.get_word_pos()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// I.i.d. standard normal draws with the given shape.
pub fn gauss_sample(rng: &mut RngState, shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    if shape.is_empty() || n == 0 {
        return Err(MfmError::shape(format!(
            "gauss_sample needs a nonempty shape, got {shape:?}"
        )));
    }
    Tensor::new(shape.to_vec(), rng.normal_vec(n))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.get2(i, p) * b.get2(p, j);
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn identity_times_a() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matmul(&Tensor::identity(2), &a).unwrap(), a);
    }

    #[test]
    fn hand_product() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[2.0, 4.0]);
    }

    #[test]
    fn random_product_matches_triple_loop() {
        let mut rng = RngState::new(3);
        let a = gauss_sample(&mut rng, &[5, 7]).unwrap();
        let b = gauss_sample(&mut rng, &[7, 3]).unwrap();
        let c = matmul(&a, &b).unwrap();
        for (x, y) in c.data().iter().zip(naive_matmul(&a, &b)) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(MfmError::Shape(_))));
    }

    #[test]
    fn gauss_deterministic() {
        let a = gauss_sample(&mut RngState::new(42), &[4, 4]).unwrap();
        let b = gauss_sample(&mut RngState::new(42), &[4, 4]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gauss_moments() {
        let t = gauss_sample(&mut RngState::new(7), &[100_000]).unwrap();
        let n = t.len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() <= 0.02, "mean {mean}");
        assert!((0.97..=1.03).contains(&var), "var {var}");
    }

    #[test]
    fn gauss_degenerate_shape() {
        assert!(gauss_sample(&mut RngState::new(1), &[3, 0]).is_err());
        assert!(gauss_sample(&mut RngState::new(1), &[]).is_err());
    }

    #[test]
    fn sq_l2_cases() {
        let a = Tensor::from_vec(vec![0.0, 0.0]);
        let b = Tensor::from_vec(vec![1.0, 1.0]);
        assert_eq!(sq_l2(&a, &a).unwrap(), 0.0);
        assert_eq!(sq_l2(&a, &b).unwrap(), 2.0);
        assert!(sq_l2(&a, &Tensor::zeros(&[3])).is_err());

        let mut rng = RngState::new(11);
        let x = gauss_sample(&mut rng, &[3, 4]).unwrap();
        let y = gauss_sample(&mut rng, &[3, 4]).unwrap();
        let mut oracle = 0.0;
        for i in 0..x.len() {
            let d = x.data()[i] - y.data()[i];
            oracle += d * d;
        }
        assert!((sq_l2(&x, &y).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_finite() {
        assert!(matches!(
            Tensor::new(vec![2], vec![1.0, f64::NAN]),
            Err(MfmError::NonFinite(_))
        ));
    }

    #[test]
    fn worker_seeds_differ() {
        let mut a = RngState::for_worker(9, 0);
        let mut b = RngState::for_worker(9, 1);
        assert_eq!(a.seed(), 9);
        assert_eq!(b.seed(), 8);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn small_matrix(r: usize, c: usize) -> impl Strategy<Value = Tensor> {
            proptest::collection::vec(-3.0f64..3.0, r * c)
                .prop_map(move |d| Tensor::matrix(r, c, d).unwrap())
        }

        proptest! {
            #[test]
            fn associativity(a in small_matrix(3, 4), b in small_matrix(4, 2), c in small_matrix(2, 5)) {
                let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
                let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
                let scale = left.data().iter().map(|v| v.abs()).fold(1.0, f64::max);
                for (x, y) in left.data().iter().zip(right.data()) {
                    prop_assert!((x - y).abs() <= 1e-10 * scale);
                }
            }

            #[test]
            fn sq_l2_symmetric_nonneg(a in proptest::collection::vec(-5.0f64..5.0, 6),
                                      b in proptest::collection::vec(-5.0f64..5.0, 6)) {
                let ta = Tensor::from_vec(a.clone());
                let tb = Tensor::from_vec(b.clone());
                let ab = sq_l2(&ta, &tb).unwrap();
                prop_assert_eq!(ab, sq_l2(&tb, &ta).unwrap());
                prop_assert!(ab >= 0.0);
                prop_assert_eq!(ab == 0.0, a == b);
            }

            #[test]
            fn gauss_reproducible(seed in any::<u64>(), n in 1usize..64) {
                let mut r1 = RngState::new(seed);
                let mut r2 = RngState::new(seed);
                let a = gauss_sample(&mut r1, &[n]).unwrap();
                let b = gauss_sample(&mut r2, &[n]).unwrap();
                let ab: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
                let bb: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(ab, bb);
                prop_assert_eq!(r1.position(), r2.position());
            }
        }
    }
}
