use serde::{Deserialize, Serialize};

use super::params::{join, Params};
use crate::error::{MfmError, Result};
use crate::linalg::{matvec, matvec_t_acc, outer_acc, RngState, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
        }
    }

    /// Derivative expressed through the activation's output.
    fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Dense,
    Gru,
}

/// Shape and activation of one layer. For GRU layers `out_dim` is the hidden
/// size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn dense(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        LayerSpec {
            kind: LayerKind::Dense,
            in_dim,
            out_dim,
            activation,
        }
    }

    pub fn gru(in_dim: usize, hidden: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Gru,
            in_dim,
            out_dim: hidden,
            activation: Activation::Tanh,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.out_dim == 0 {
            return Err(MfmError::invalid(format!("layer dims must be positive: {self:?}")));
        }
        Ok(())
    }
}

pub(crate) fn glorot(rng: &mut RngState, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.uniform_range(-limit, limit))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("finite init")
}

/// Fully connected layer `y = act(W x + b)` with `W: [out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

#[derive(Debug, Clone)]
pub struct DenseTape {
    input: Vec<f64>,
    output: Vec<f64>,
}

impl Dense {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut RngState) -> Self {
        Dense {
            weight: glorot(rng, out_dim, in_dim),
            bias: Tensor::zeros(&[out_dim]),
            activation,
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Dense {
            weight: Tensor::zeros(&[out_dim, in_dim]),
            bias: Tensor::zeros(&[out_dim]),
            activation,
        }
    }

    /// Identity-activation layer with `W = I`, `b = 0`.
    pub fn identity(dim: usize) -> Self {
        Dense {
            weight: Tensor::identity(dim),
            bias: Tensor::zeros(&[dim]),
            activation: Activation::Identity,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn spec(&self) -> LayerSpec {
        LayerSpec::dense(self.in_dim(), self.out_dim(), self.activation)
    }

    pub fn run(&self, x: &[f64]) -> (Vec<f64>, DenseTape) {
        let mut y = matvec(self.weight.data(), x, self.out_dim(), self.in_dim());
        for (v, b) in y.iter_mut().zip(self.bias.data()) {
            *v = self.activation.apply(*v + b);
        }
        let tape = DenseTape {
            input: x.to_vec(),
            output: y.clone(),
        };
        (y, tape)
    }

    /// Accumulates parameter gradients into `grads` and returns `∂L/∂x`.
    pub fn backprop(&self, tape: &DenseTape, dout: &[f64], grads: &mut Dense) -> Vec<f64> {
        let dpre: Vec<f64> = dout
            .iter()
            .zip(&tape.output)
            .map(|(g, y)| g * self.activation.grad_from_output(*y))
            .collect();
        outer_acc(grads.weight.data_mut(), &dpre, &tape.input);
        for (b, g) in grads.bias.data_mut().iter_mut().zip(&dpre) {
            *b += g;
        }
        let mut dx = vec![0.0; self.in_dim()];
        matvec_t_acc(self.weight.data(), &dpre, self.out_dim(), self.in_dim(), &mut dx);
        dx
    }
}

impl Params for Dense {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// A stack of dense layers (FCNN).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

#[derive(Debug, Clone)]
pub struct MlpTape {
    dims: Vec<(usize, usize)>,
    layers: Vec<DenseTape>,
}

impl Mlp {
    pub fn from_specs(specs: &[LayerSpec], rng: &mut RngState) -> Result<Self> {
        if specs.is_empty() {
            return Err(MfmError::invalid("an MLP needs at least one layer"));
        }
        for (i, s) in specs.iter().enumerate() {
            s.validate()?;
            if s.kind != LayerKind::Dense {
                return Err(MfmError::invalid("MLP layers must be dense"));
            }
            if i > 0 && specs[i - 1].out_dim != s.in_dim {
                return Err(MfmError::shape(format!(
                    "layer {i} expects {} inputs, previous emits {}",
                    s.in_dim,
                    specs[i - 1].out_dim
                )));
            }
        }
        Ok(Mlp {
            layers: specs
                .iter()
                .map(|s| Dense::new(s.in_dim, s.out_dim, s.activation, rng))
                .collect(),
        })
    }

    /// `depth` tanh hidden layers of width `hidden`, then a linear output.
    pub fn tower(
        in_dim: usize,
        hidden: usize,
        depth: usize,
        out_dim: usize,
        out_act: Activation,
        rng: &mut RngState,
    ) -> Self {
        let mut specs = Vec::with_capacity(depth + 1);
        let mut d = in_dim;
        for _ in 0..depth {
            specs.push(LayerSpec::dense(d, hidden, Activation::Tanh));
            d = hidden;
        }
        specs.push(LayerSpec::dense(d, out_dim, out_act));
        Mlp::from_specs(&specs, rng).expect("valid tower")
    }

    pub fn single(layer: Dense) -> Self {
        Mlp {
            layers: vec![layer],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("nonempty").out_dim()
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Dense::spec).collect()
    }

    pub fn run(&self, x: &[f64]) -> (Vec<f64>, MlpTape) {
        debug_assert_eq!(x.len(), self.in_dim());
        let mut tapes = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for l in &self.layers {
            let (y, t) = l.run(&h);
            tapes.push(t);
            h = y;
        }
        let dims = self.layers.iter().map(|l| (l.in_dim(), l.out_dim())).collect();
        (h, MlpTape { dims, layers: tapes })
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        self.run(x).0
    }

    pub fn backprop(&self, tape: &MlpTape, dout: &[f64], grads: &mut Mlp) -> Vec<f64> {
        let mut g = dout.to_vec();
        for ((l, t), gl) in self
            .layers
            .iter()
            .zip(&tape.layers)
            .zip(grads.layers.iter_mut())
            .rev()
        {
            g = l.backprop(t, &g, gl);
        }
        g
    }

    /// Forward pass on a tensor input (flattened), returning output and tape.
    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, MlpTape)> {
        if input.len() != self.in_dim() {
            return Err(MfmError::shape(format!(
                "network expects {} inputs, got {}",
                self.in_dim(),
                input.len()
            )));
        }
        let (y, tape) = self.run(input.data());
        Ok((Tensor::new(vec![y.len()], y)?, tape))
    }

    /// Exact reverse-mode gradients of the scalar whose output gradient is
    /// `output_grad`. Returns a fresh gradient buffer and `∂L/∂input`.
    pub fn backward(&self, tape: &MlpTape, output_grad: &Tensor) -> Result<(Mlp, Tensor)> {
        let dims: Vec<(usize, usize)> = self.layers.iter().map(|l| (l.in_dim(), l.out_dim())).collect();
        if tape.dims != dims {
            return Err(MfmError::invalid("tape was recorded on a different network"));
        }
        if output_grad.len() != self.out_dim() {
            return Err(MfmError::shape(format!(
                "output gradient has {} entries, network emits {}",
                output_grad.len(),
                self.out_dim()
            )));
        }
        let mut grads = self.zeros_like();
        let dx = self.backprop(tape, output_grad.data(), &mut grads);
        grads.ensure_finite("gradient")?;
        Ok((grads, Tensor::new(vec![dx.len()], dx)?))
    }
}

impl Params for Mlp {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.layers.visit(prefix, f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        self.layers.visit_mut(prefix, f);
    }
}
