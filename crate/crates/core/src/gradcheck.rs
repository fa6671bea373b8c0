//! Central finite differences over any [`Params`] container.
//!
//! Only forward evaluations are used, so these helpers stay independent of
//! every backward pass they are used to check.

use crate::net::Params;

/// Central-difference gradient of `loss` with respect to every scalar in
/// `params`, in visit order.
pub fn numeric_gradient<P, F>(params: &P, loss: F, h: f64) -> Vec<f64>
where
    P: Params,
    F: Fn(&P) -> f64,
{
    let n = params.param_count();
    let mut work = params.clone();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let orig = *work.scalar_mut(i).expect("index in range");
        *work.scalar_mut(i).unwrap() = orig + h;
        let plus = loss(&work);
        *work.scalar_mut(i).unwrap() = orig - h;
        let minus = loss(&work);
        *work.scalar_mut(i).unwrap() = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    out
}

/// Central-difference gradient of a function of a plain vector.
pub fn numeric_gradient_vec<F>(x: &[f64], f: F, h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = work[i];
            work[i] = orig + h;
            let plus = f(&work);
            work[i] = orig - h;
            let minus = f(&work);
            work[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// `|a - b| / max(1e-8, |a| + |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| relative_error(*a, *b))
        .fold(0.0, f64::max)
}
