use sha2::{Digest, Sha256};

use crate::error::{MfmError, Result};
use crate::linalg::Tensor;

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// A container of named parameter tensors.
///
/// Gradient buffers use the implementing type itself: a gradient for an
/// [`Mlp`](super::Mlp) is an `Mlp` whose tensors hold `∂loss/∂param`.
/// Visit order is fixed and defines the order used by the optimizer and the
/// checkpoint format.
pub trait Params: Clone {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor));
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor));

    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, t| out.push((n, t)));
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.visit_mut("", &mut |n, t| out.push((n, t)));
        out
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut("", &mut |_, t| t.fill(0.0));
        z
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }

    /// `self += other`, tensor by tensor.
    fn accumulate(&mut self, other: &Self) {
        let theirs: Vec<&Tensor> = other.named().into_iter().map(|(_, t)| t).collect();
        for ((_, mine), t) in self.named_mut().into_iter().zip(theirs) {
            mine.add_assign(t).expect("parameter layouts match");
        }
    }

    fn scale_all(&mut self, s: f64) {
        self.visit_mut("", &mut |_, t| t.scale(s));
    }

    /// Flat copy of every parameter value in visit order.
    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit("", &mut |_, t| out.extend_from_slice(t.data()));
        out
    }

    /// Mutable access to the `index`-th scalar in visit order.
    fn scalar_mut(&mut self, mut index: usize) -> Option<&mut f64> {
        for (_, t) in self.named_mut() {
            if index < t.len() {
                return Some(&mut t.data_mut()[index]);
            }
            index -= t.len();
        }
        None
    }

    /// SHA-256 over names, shapes and the raw bits of every value.
    fn checksum(&self) -> String {
        let mut h = Sha256::new();
        self.visit("", &mut |name, t| {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        });
        hex::encode(h.finalize())
    }

    /// Fails with the offending parameter name if any value is NaN/Inf.
    fn ensure_finite(&self, what: &str) -> Result<()> {
        for (name, t) in self.named() {
            if !t.is_finite() {
                return Err(MfmError::NonFinite(format!("{what} '{name}'")));
            }
        }
        Ok(())
    }
}

impl<P: Params> Params for Vec<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (i, p) in self.iter().enumerate() {
            p.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        for (i, p) in self.iter_mut().enumerate() {
            p.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

impl<P: Params> Params for Option<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        if let Some(p) = self {
            p.visit(prefix, f);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        if let Some(p) = self {
            p.visit_mut(prefix, f);
        }
    }
}
