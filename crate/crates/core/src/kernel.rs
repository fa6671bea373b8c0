//! RBF kernel statistics: Gram matrices, MMD and normalized HSIC.
//!
//! Kernel convention: `k(x, y) = exp(-‖x − y‖² / (2σ²))`.

use serde::{Deserialize, Serialize};

use crate::error::{MfmError, Result};
use crate::linalg::{sq_dist, Tensor};
use crate::parallel::Exec;

impl AsRef<[f64]> for Tensor {
    fn as_ref(&self) -> &[f64] {
        self.data()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BandwidthSpec {
    Fixed { value: f64 },
    /// `σ² = median(‖xᵢ − xⱼ‖²) / 2` over distinct pairs.
    MedianHeuristic,
}

impl Default for BandwidthSpec {
    fn default() -> Self {
        BandwidthSpec::Fixed { value: 1.0 }
    }
}

impl BandwidthSpec {
    pub fn fixed(value: f64) -> Self {
        BandwidthSpec::Fixed { value }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            BandwidthSpec::Fixed { value } if !(value > 0.0 && value.is_finite()) => Err(
                MfmError::Config(format!("bandwidth must be positive, got {value}")),
            ),
            _ => Ok(()),
        }
    }

    /// Concrete σ for this point set.
    pub fn resolve<T: AsRef<[f64]>>(&self, points: &[T]) -> f64 {
        match *self {
            BandwidthSpec::Fixed { value } => value,
            BandwidthSpec::MedianHeuristic => median_sigma(points),
        }
    }
}

pub fn median_sigma<T: AsRef<[f64]>>(points: &[T]) -> f64 {
    let mut d = Vec::with_capacity(points.len() * points.len().saturating_sub(1) / 2);
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            d.push(sq_dist(points[i].as_ref(), points[j].as_ref()));
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let mid = d.len() / 2;
    let med = if d.len() % 2 == 1 {
        d[mid]
    } else {
        0.5 * (d[mid - 1] + d[mid])
    };
    if med > 0.0 {
        (med / 2.0).sqrt()
    } else {
        1.0
    }
}

#[inline]
pub fn rbf(a: &[f64], b: &[f64], sigma: f64) -> f64 {
    (-sq_dist(a, b) / (2.0 * sigma * sigma)).exp()
}

/// Symmetric `n × n` kernel matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    n: usize,
    data: Vec<f64>,
}

impl GramMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// `H K H` with `H = I − (1/n) 1 1ᵀ`, computed by double centering.
    pub fn centered(&self) -> Vec<f64> {
        let n = self.n;
        let nf = n as f64;
        let row_mean: Vec<f64> = (0..n)
            .map(|i| self.data[i * n..(i + 1) * n].iter().sum::<f64>() / nf)
            .collect();
        let total_mean = row_mean.iter().sum::<f64>() / nf;
        // K is symmetric, so column means equal row means
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = self.data[i * n + j] - row_mean[i] - row_mean[j] + total_mean;
            }
        }
        out
    }
}

fn check_points<T: AsRef<[f64]>>(points: &[T], what: &str) -> Result<usize> {
    let dim = points
        .first()
        .map(|p| p.as_ref().len())
        .ok_or_else(|| MfmError::invalid(format!("{what}: empty point set")))?;
    if dim == 0 {
        return Err(MfmError::invalid(format!("{what}: zero-dimensional points")));
    }
    if points.iter().any(|p| p.as_ref().len() != dim) {
        return Err(MfmError::shape(format!("{what}: points of mixed dimension")));
    }
    if points.iter().any(|p| p.as_ref().iter().any(|v| !v.is_finite())) {
        return Err(MfmError::NonFinite(what.to_string()));
    }
    Ok(dim)
}

pub fn rbf_gram<T: AsRef<[f64]> + Sync>(points: &[T], bw: BandwidthSpec) -> Result<GramMatrix> {
    rbf_gram_with(points, bw, Exec::default())
}

pub fn rbf_gram_with<T: AsRef<[f64]> + Sync>(
    points: &[T],
    bw: BandwidthSpec,
    exec: Exec,
) -> Result<GramMatrix> {
    bw.validate()?;
    check_points(points, "rbf_gram")?;
    let n = points.len();
    if n < 2 {
        return Err(MfmError::invalid("rbf_gram needs at least two points"));
    }
    let sigma = bw.resolve(points);
    let rows = exec.map(n, |i| {
        (0..n)
            .map(|j| {
                if i == j {
                    1.0
                } else {
                    rbf(points[i].as_ref(), points[j].as_ref(), sigma)
                }
            })
            .collect::<Vec<f64>>()
    });
    let mut data: Vec<f64> = rows.into_iter().flatten().collect();
    // exact symmetry regardless of evaluation order
    for i in 0..n {
        for j in 0..i {
            data[i * n + j] = data[j * n + i];
        }
    }
    Ok(GramMatrix { n, data })
}

fn mean_cross<T: AsRef<[f64]>>(a: &[T], b: &[T], sigma: f64) -> f64 {
    let mut s = 0.0;
    for x in a {
        for y in b {
            s += rbf(x.as_ref(), y.as_ref(), sigma);
        }
    }
    s / (a.len() * b.len()) as f64
}

fn mean_within_offdiag<T: AsRef<[f64]>>(a: &[T], sigma: f64) -> f64 {
    let n = a.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += rbf(a[i].as_ref(), a[j].as_ref(), sigma);
            }
        }
    }
    s / (n * (n - 1)) as f64
}

fn check_pair<T: AsRef<[f64]>>(q: &[T], p: &[T], what: &str) -> Result<()> {
    let dq = check_points(q, what)?;
    let dp = check_points(p, what)?;
    if dq != dp {
        return Err(MfmError::shape(format!("{what}: sample dims {dq} vs {dp}")));
    }
    Ok(())
}

fn pooled_sigma<T: AsRef<[f64]>>(q: &[T], p: &[T], bw: BandwidthSpec) -> f64 {
    match bw {
        BandwidthSpec::Fixed { value } => value,
        BandwidthSpec::MedianHeuristic => {
            let pooled: Vec<&[f64]> = q.iter().chain(p).map(|x| x.as_ref()).collect();
            median_sigma(&pooled)
        }
    }
}

/// Biased (V-statistic) squared MMD, clamped at zero.
pub fn mmd<T: AsRef<[f64]>>(q: &[T], p: &[T], bw: BandwidthSpec) -> Result<f64> {
    bw.validate()?;
    check_pair(q, p, "mmd")?;
    let s = pooled_sigma(q, p, bw);
    let v = mean_cross(q, q, s) + mean_cross(p, p, s) - 2.0 * mean_cross(q, p, s);
    Ok(v.max(0.0))
}

/// Unbiased (U-statistic) squared MMD. Can be negative; needs ≥ 2 points per set.
pub fn mmd_unbiased<T: AsRef<[f64]>>(q: &[T], p: &[T], bw: BandwidthSpec) -> Result<f64> {
    bw.validate()?;
    check_pair(q, p, "mmd_unbiased")?;
    if q.len() < 2 || p.len() < 2 {
        return Err(MfmError::invalid("unbiased MMD needs at least two points per set"));
    }
    let s = pooled_sigma(q, p, bw);
    Ok(mean_within_offdiag(q, s) + mean_within_offdiag(p, s) - 2.0 * mean_cross(q, p, s))
}

/// V-statistic MMD at fixed `sigma` together with `∂MMD/∂qₐ` for every
/// sample of `q` (`p` is treated as constant).
pub fn mmd_with_grad(q: &[Vec<f64>], p: &[Vec<f64>], sigma: f64) -> Result<(f64, Vec<Vec<f64>>)> {
    check_pair(q, p, "mmd")?;
    let (n, m) = (q.len() as f64, p.len() as f64);
    let inv_s2 = 1.0 / (sigma * sigma);
    let dim = q[0].len();
    let mut kqq = 0.0;
    let mut kqp = 0.0;
    let mut grads = vec![vec![0.0; dim]; q.len()];
    for (a, qa) in q.iter().enumerate() {
        let ga = &mut grads[a];
        for qb in q {
            let k = rbf(qa, qb, sigma);
            kqq += k;
            // ∂/∂qa of (1/n²) Σ_ij k(qi, qj) picks up both (a, j) and (i, a)
            let c = -2.0 * k * inv_s2 / (n * n);
            for d in 0..dim {
                ga[d] += c * (qa[d] - qb[d]);
            }
        }
        for pb in p {
            let k = rbf(qa, pb, sigma);
            kqp += k;
            let c = 2.0 * k * inv_s2 / (n * m);
            for d in 0..dim {
                ga[d] += c * (qa[d] - pb[d]);
            }
        }
    }
    let kpp = mean_cross(p, p, sigma);
    let v = kqq / (n * n) + kpp - 2.0 * kqp / (n * m);
    if v <= 0.0 {
        return Ok((0.0, vec![vec![0.0; dim]; q.len()]));
    }
    Ok((v, grads))
}

/// Normalized HSIC, `None` when either centered Gram matrix is (numerically)
/// zero, i.e. one side is constant.
pub fn hsic_norm_checked<A, B>(a: &[A], b: &[B], bw: BandwidthSpec) -> Result<Option<f64>>
where
    A: AsRef<[f64]> + Sync,
    B: AsRef<[f64]> + Sync,
{
    if a.len() != b.len() {
        return Err(MfmError::shape(format!(
            "hsic_norm: {} vs {} samples",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 3 {
        return Err(MfmError::invalid("hsic_norm needs at least three pairs"));
    }
    let ka = rbf_gram(a, bw)?.centered();
    let kb = rbf_gram(b, bw)?.centered();
    let na = ka.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = kb.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na * nb < 1e-12 {
        return Ok(None);
    }
    // tr(Ka H Kb H) = ⟨H Ka H, H Kb H⟩_F since H is idempotent and both symmetric
    let num: f64 = ka.iter().zip(&kb).map(|(x, y)| x * y).sum();
    Ok(Some((num / (na * nb)).clamp(0.0, 1.0)))
}

/// Normalized HSIC in `[0, 1]`. A degenerate denominator yields 0 with a
/// logged warning.
pub fn hsic_norm<A, B>(a: &[A], b: &[B], bw: BandwidthSpec) -> Result<f64>
where
    A: AsRef<[f64]> + Sync,
    B: AsRef<[f64]> + Sync,
{
    match hsic_norm_checked(a, b, bw)? {
        Some(v) => Ok(v),
        None => {
            log::warn!("hsic_norm: degenerate denominator (constant input), returning 0");
            Ok(0.0)
        }
    }
}

/// Per-feature mean over the time axis of a `[T, d]` tensor.
pub fn time_average(x: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 2 {
        return Err(MfmError::shape(format!("time_average needs [T, d], got {:?}", x.shape())));
    }
    let (t, d) = (x.rows(), x.cols());
    let mut out = vec![0.0; d];
    for r in 0..t {
        for (o, v) in out.iter_mut().zip(x.row(r)) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= t as f64);
    Tensor::new(vec![d], out)
}
