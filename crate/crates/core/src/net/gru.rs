//! Gated recurrent unit with exact backpropagation through time.
//!
//! ```text
//! z  = σ(W_z x + U_z h + b_z)
//! r  = σ(W_r x + U_r h + b_r)
//! c  = tanh(W_h x + U_h (r ∘ h) + b_h)
//! h' = (1 − z) ∘ h + z ∘ c
//! ```

use super::dense::glorot;
use super::params::{join, Params};
use crate::error::{MfmError, Result};
use crate::linalg::{matvec, matvec_t_acc, outer_acc, RngState, Tensor};

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gru {
    pub w_z: Tensor,
    pub u_z: Tensor,
    pub b_z: Tensor,
    pub w_r: Tensor,
    pub u_r: Tensor,
    pub b_r: Tensor,
    pub w_h: Tensor,
    pub u_h: Tensor,
    pub b_h: Tensor,
}

#[derive(Debug, Clone)]
struct StepCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    c: Vec<f64>,
    rh: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct GruTape {
    dims: (usize, usize),
    steps: Vec<StepCache>,
}

impl GruTape {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Gradients of one backward pass through a sequence.
#[derive(Debug, Clone)]
pub struct GruBackward {
    pub inputs: Vec<Vec<f64>>,
    pub init_hidden: Vec<f64>,
}

impl Gru {
    pub fn new(in_dim: usize, hidden: usize, rng: &mut RngState) -> Self {
        let w = |rng: &mut RngState| glorot(rng, hidden, in_dim);
        let u = |rng: &mut RngState| glorot(rng, hidden, hidden);
        Gru {
            w_z: w(rng),
            u_z: u(rng),
            b_z: Tensor::zeros(&[hidden]),
            w_r: w(rng),
            u_r: u(rng),
            b_r: Tensor::zeros(&[hidden]),
            w_h: w(rng),
            u_h: u(rng),
            b_h: Tensor::zeros(&[hidden]),
        }
    }

    pub fn zeros(in_dim: usize, hidden: usize) -> Self {
        let w = || Tensor::zeros(&[hidden, in_dim]);
        let u = || Tensor::zeros(&[hidden, hidden]);
        let b = || Tensor::zeros(&[hidden]);
        Gru {
            w_z: w(),
            u_z: u(),
            b_z: b(),
            w_r: w(),
            u_r: u(),
            b_r: b(),
            w_h: w(),
            u_h: u(),
            b_h: b(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w_z.shape()[1]
    }

    pub fn hidden(&self) -> usize {
        self.w_z.shape()[0]
    }

    fn gate(&self, w: &Tensor, u: &Tensor, b: &Tensor, x: &[f64], h: &[f64]) -> Vec<f64> {
        let (hd, id) = (self.hidden(), self.in_dim());
        let wx = matvec(w.data(), x, hd, id);
        let uh = matvec(u.data(), h, hd, hd);
        wx.iter()
            .zip(&uh)
            .zip(b.data())
            .map(|((a, c), b)| a + c + b)
            .collect()
    }

    fn step(&self, x: &[f64], h_prev: &[f64]) -> (Vec<f64>, StepCache) {
        let z: Vec<f64> = self
            .gate(&self.w_z, &self.u_z, &self.b_z, x, h_prev)
            .into_iter()
            .map(sigmoid)
            .collect();
        let r: Vec<f64> = self
            .gate(&self.w_r, &self.u_r, &self.b_r, x, h_prev)
            .into_iter()
            .map(sigmoid)
            .collect();
        let rh: Vec<f64> = r.iter().zip(h_prev).map(|(a, b)| a * b).collect();
        let c: Vec<f64> = self
            .gate(&self.w_h, &self.u_h, &self.b_h, x, &rh)
            .into_iter()
            .map(f64::tanh)
            .collect();
        let h: Vec<f64> = (0..self.hidden())
            .map(|k| (1.0 - z[k]) * h_prev[k] + z[k] * c[k])
            .collect();
        let cache = StepCache {
            x: x.to_vec(),
            h_prev: h_prev.to_vec(),
            z,
            r,
            c,
            rh,
        };
        (h, cache)
    }

    /// Runs the recurrence, returning the hidden state after every step.
    pub fn run(&self, init_hidden: &[f64], inputs: &[Vec<f64>]) -> (Vec<Vec<f64>>, GruTape) {
        let mut h = init_hidden.to_vec();
        let mut outs = Vec::with_capacity(inputs.len());
        let mut steps = Vec::with_capacity(inputs.len());
        for x in inputs {
            let (hn, cache) = self.step(x, &h);
            steps.push(cache);
            outs.push(hn.clone());
            h = hn;
        }
        let tape = GruTape {
            dims: (self.in_dim(), self.hidden()),
            steps,
        };
        (outs, tape)
    }

    /// Backpropagation through time. `dh_out[t]` is the external gradient on
    /// the hidden state emitted at step `t`.
    pub fn backprop(&self, tape: &GruTape, dh_out: &[Vec<f64>], grads: &mut Gru) -> GruBackward {
        let (hd, id) = (self.hidden(), self.in_dim());
        let steps = tape.steps.len();
        let mut dx_all = vec![Vec::new(); steps];
        let mut carry = vec![0.0; hd];
        for t in (0..steps).rev() {
            let s = &tape.steps[t];
            let dh: Vec<f64> = carry.iter().zip(&dh_out[t]).map(|(a, b)| a + b).collect();

            let mut dh_prev: Vec<f64> = (0..hd).map(|k| dh[k] * (1.0 - s.z[k])).collect();
            let dz_pre: Vec<f64> = (0..hd)
                .map(|k| dh[k] * (s.c[k] - s.h_prev[k]) * s.z[k] * (1.0 - s.z[k]))
                .collect();
            let dc_pre: Vec<f64> = (0..hd)
                .map(|k| dh[k] * s.z[k] * (1.0 - s.c[k] * s.c[k]))
                .collect();

            outer_acc(grads.w_h.data_mut(), &dc_pre, &s.x);
            outer_acc(grads.u_h.data_mut(), &dc_pre, &s.rh);
            add_into(grads.b_h.data_mut(), &dc_pre);

            let mut drh = vec![0.0; hd];
            matvec_t_acc(self.u_h.data(), &dc_pre, hd, hd, &mut drh);
            let dr_pre: Vec<f64> = (0..hd)
                .map(|k| drh[k] * s.h_prev[k] * s.r[k] * (1.0 - s.r[k]))
                .collect();
            for k in 0..hd {
                dh_prev[k] += drh[k] * s.r[k];
            }

            outer_acc(grads.w_z.data_mut(), &dz_pre, &s.x);
            outer_acc(grads.u_z.data_mut(), &dz_pre, &s.h_prev);
            add_into(grads.b_z.data_mut(), &dz_pre);
            outer_acc(grads.w_r.data_mut(), &dr_pre, &s.x);
            outer_acc(grads.u_r.data_mut(), &dr_pre, &s.h_prev);
            add_into(grads.b_r.data_mut(), &dr_pre);

            let mut dx = vec![0.0; id];
            matvec_t_acc(self.w_z.data(), &dz_pre, hd, id, &mut dx);
            matvec_t_acc(self.w_r.data(), &dr_pre, hd, id, &mut dx);
            matvec_t_acc(self.w_h.data(), &dc_pre, hd, id, &mut dx);
            dx_all[t] = dx;

            matvec_t_acc(self.u_z.data(), &dz_pre, hd, hd, &mut dh_prev);
            matvec_t_acc(self.u_r.data(), &dr_pre, hd, hd, &mut dh_prev);
            carry = dh_prev;
        }
        GruBackward {
            inputs: dx_all,
            init_hidden: carry,
        }
    }

    /// Tensor-level forward: `sequence` is `[T, in_dim]`, output `[T, hidden]`.
    pub fn forward(&self, init_hidden: &Tensor, sequence: &Tensor) -> Result<(Tensor, GruTape)> {
        if sequence.shape().len() != 2 || sequence.rows() == 0 {
            return Err(MfmError::invalid("GRU needs a [T, d] sequence with T >= 1"));
        }
        if sequence.cols() != self.in_dim() || init_hidden.len() != self.hidden() {
            return Err(MfmError::shape(format!(
                "GRU({}, {}) got sequence {:?} and hidden {:?}",
                self.in_dim(),
                self.hidden(),
                sequence.shape(),
                init_hidden.shape()
            )));
        }
        let inputs: Vec<Vec<f64>> = (0..sequence.rows()).map(|t| sequence.row(t).to_vec()).collect();
        let (outs, tape) = self.run(init_hidden.data(), &inputs);
        let t = outs.len();
        let flat = outs.into_iter().flatten().collect();
        Ok((Tensor::new(vec![t, self.hidden()], flat)?, tape))
    }

    /// Tensor-level backward. Returns the gradient buffer, `∂L/∂sequence`
    /// and `∂L/∂init_hidden`.
    pub fn backward(&self, tape: &GruTape, output_grad: &Tensor) -> Result<(Gru, Tensor, Tensor)> {
        if tape.dims != (self.in_dim(), self.hidden()) {
            return Err(MfmError::invalid("tape was recorded on a different GRU"));
        }
        if output_grad.shape() != [tape.len(), self.hidden()] {
            return Err(MfmError::shape(format!(
                "output gradient {:?} does not match [{}, {}]",
                output_grad.shape(),
                tape.len(),
                self.hidden()
            )));
        }
        let dh: Vec<Vec<f64>> = (0..tape.len()).map(|t| output_grad.row(t).to_vec()).collect();
        let mut grads = self.zeros_like();
        let back = self.backprop(tape, &dh, &mut grads);
        grads.ensure_finite("gradient")?;
        let dx = Tensor::new(
            vec![tape.len(), self.in_dim()],
            back.inputs.into_iter().flatten().collect(),
        )?;
        let dh0 = Tensor::from_vec(back.init_hidden);
        Ok((grads, dx, dh0))
    }
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

impl Params for Gru {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "w_z"), &self.w_z);
        f(join(prefix, "u_z"), &self.u_z);
        f(join(prefix, "b_z"), &self.b_z);
        f(join(prefix, "w_r"), &self.w_r);
        f(join(prefix, "u_r"), &self.u_r);
        f(join(prefix, "b_r"), &self.b_r);
        f(join(prefix, "w_h"), &self.w_h);
        f(join(prefix, "u_h"), &self.u_h);
        f(join(prefix, "b_h"), &self.b_h);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        f(join(prefix, "w_z"), &mut self.w_z);
        f(join(prefix, "u_z"), &mut self.u_z);
        f(join(prefix, "b_z"), &mut self.b_z);
        f(join(prefix, "w_r"), &mut self.w_r);
        f(join(prefix, "u_r"), &mut self.u_r);
        f(join(prefix, "b_r"), &mut self.b_r);
        f(join(prefix, "w_h"), &mut self.w_h);
        f(join(prefix, "u_h"), &mut self.u_h);
        f(join(prefix, "b_h"), &mut self.b_h);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{max_relative_error, numeric_gradient, numeric_gradient_vec};
    use crate::linalg::gauss_sample;

    #[test]
    fn zero_weights_zero_outputs() {
        let g = Gru::zeros(3, 4);
        let seq = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0]).unwrap();
        let (out, _) = g.forward(&Tensor::zeros(&[4]), &seq).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn empty_sequence_rejected() {
        let g = Gru::zeros(2, 2);
        let seq = Tensor::zeros(&[2]);
        assert!(g.forward(&Tensor::zeros(&[2]), &seq).is_err());
    }

    #[test]
    fn single_step_closed_form() {
        // hidden = 1, input = 1: every gate is a scalar expression
        let mut rng = RngState::new(4);
        let g = Gru::new(1, 1, &mut rng);
        let (x, h0) = (0.7, -0.3);
        let s = |v: f64| 1.0 / (1.0 + (-v).exp());
        let p = |t: &Tensor| t.data()[0];
        let z = s(p(&g.w_z) * x + p(&g.u_z) * h0 + p(&g.b_z));
        let r = s(p(&g.w_r) * x + p(&g.u_r) * h0 + p(&g.b_r));
        let c = (p(&g.w_h) * x + p(&g.u_h) * (r * h0) + p(&g.b_h)).tanh();
        let expect = (1.0 - z) * h0 + z * c;
        let (out, _) = g
            .forward(&Tensor::from_vec(vec![h0]), &Tensor::matrix(1, 1, vec![x]).unwrap())
            .unwrap();
        assert!((out.data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn bptt_matches_finite_differences() {
        let mut rng = RngState::new(12);
        let g = Gru::new(3, 4, &mut rng);
        let seq = gauss_sample(&mut rng, &[3, 3]).unwrap();
        let h0 = gauss_sample(&mut rng, &[4]).unwrap();
        let coef = gauss_sample(&mut rng, &[3, 4]).unwrap();
        let loss_of = |net: &Gru, seq: &Tensor, h0: &Tensor| -> f64 {
            let (out, _) = net.forward(h0, seq).unwrap();
            out.data().iter().zip(coef.data()).map(|(a, b)| a * b).sum()
        };
        let (_, tape) = g.forward(&h0, &seq).unwrap();
        let (grads, dx, dh0) = g.backward(&tape, &coef).unwrap();

        let fd = numeric_gradient(&g, |n| loss_of(n, &seq, &h0), 1e-5);
        assert!(max_relative_error(&grads.flatten(), &fd) <= 1e-4);

        let fd_x = numeric_gradient_vec(
            seq.data(),
            |v| loss_of(&g, &Tensor::matrix(3, 3, v.to_vec()).unwrap(), &h0),
            1e-5,
        );
        assert!(max_relative_error(dx.data(), &fd_x) <= 1e-4);
        let fd_h = numeric_gradient_vec(
            h0.data(),
            |v| loss_of(&g, &seq, &Tensor::from_vec(v.to_vec())),
            1e-5,
        );
        assert!(max_relative_error(dh0.data(), &fd_h) <= 1e-4);
    }
}
