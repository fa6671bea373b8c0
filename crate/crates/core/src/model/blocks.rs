//! Encoder and decoder blocks shared by the model, the surrogate networks and
//! the baselines.
//!
//! Static modalities (one timestep) always use dense towers. Sequences use a
//! GRU encoder (final hidden state, then a linear head) and a GRU decoder
//! whose initial hidden state is a linear map of the factor vector, which is
//! also fed as the input at every step.

use serde::{Deserialize, Serialize};

use crate::data::ModalitySpec;
use crate::linalg::RngState;
use crate::net::{join, Activation, Dense, DenseTape, Gru, GruTape, Mlp, MlpTape, Params};
use crate::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SequenceArch {
    #[default]
    Gru,
    /// Flattens the `[T, d]` block and uses a dense tower.
    Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SeqEncoder {
    Dense { net: Mlp },
    Gru { gru: Gru, head: Mlp, dim: usize },
}

#[derive(Debug, Clone)]
pub enum SeqEncoderTape {
    Dense(MlpTape),
    Gru(GruTape, MlpTape),
}

impl SeqEncoder {
    pub fn new(
        spec: &ModalitySpec,
        arch: SequenceArch,
        hidden: usize,
        depth: usize,
        out_dim: usize,
        out_act: Activation,
        rng: &mut RngState,
    ) -> Self {
        if spec.is_sequence() && arch == SequenceArch::Gru {
            SeqEncoder::Gru {
                gru: Gru::new(spec.dim, hidden, rng),
                head: Mlp::single(Dense::new(hidden, out_dim, out_act, rng)),
                dim: spec.dim,
            }
        } else {
            SeqEncoder::Dense {
                net: Mlp::tower(spec.flat_len(), hidden, depth, out_dim, out_act, rng),
            }
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            SeqEncoder::Dense { net } => net.out_dim(),
            SeqEncoder::Gru { head, .. } => head.out_dim(),
        }
    }

    /// `x` is the flattened `[T, d]` block.
    pub fn run(&self, x: &[f64]) -> (Vec<f64>, SeqEncoderTape) {
        match self {
            SeqEncoder::Dense { net } => {
                let (y, t) = net.run(x);
                (y, SeqEncoderTape::Dense(t))
            }
            SeqEncoder::Gru { gru, head, dim } => {
                let steps: Vec<Vec<f64>> = x.chunks(*dim).map(<[f64]>::to_vec).collect();
                let (hs, gt) = gru.run(&vec![0.0; gru.hidden()], &steps);
                let (y, ht) = head.run(hs.last().expect("T >= 1"));
                (y, SeqEncoderTape::Gru(gt, ht))
            }
        }
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        self.run(x).0
    }

    /// Returns `∂L/∂x` (flattened).
    pub fn backprop(&self, tape: &SeqEncoderTape, dout: &[f64], grads: &mut SeqEncoder) -> Vec<f64> {
        match (self, tape, grads) {
            (SeqEncoder::Dense { net }, SeqEncoderTape::Dense(t), SeqEncoder::Dense { net: g }) => {
                net.backprop(t, dout, g)
            }
            (
                SeqEncoder::Gru { gru, head, .. },
                SeqEncoderTape::Gru(gt, ht),
                SeqEncoder::Gru { gru: ggru, head: ghead, .. },
            ) => {
                let dh_last = head.backprop(ht, dout, ghead);
                let steps = gt.len();
                let mut dh = vec![vec![0.0; gru.hidden()]; steps];
                dh[steps - 1] = dh_last;
                let back = gru.backprop(gt, &dh, ggru);
                back.inputs.into_iter().flatten().collect()
            }
            _ => unreachable!("tape/gradient layout mismatch"),
        }
    }
}

impl Params for SeqEncoder {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        match self {
            SeqEncoder::Dense { net } => net.visit(&join(prefix, "net"), f),
            SeqEncoder::Gru { gru, head, .. } => {
                gru.visit(&join(prefix, "gru"), f);
                head.visit(&join(prefix, "head"), f);
            }
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        match self {
            SeqEncoder::Dense { net } => net.visit_mut(&join(prefix, "net"), f),
            SeqEncoder::Gru { gru, head, .. } => {
                gru.visit_mut(&join(prefix, "gru"), f);
                head.visit_mut(&join(prefix, "head"), f);
            }
        }
    }
}

/// Late fusion: one sub-encoder per input modality, concatenation, dense head.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionEncoder {
    /// Indices (into the sample's modality list) this encoder reads.
    pub inputs: Vec<usize>,
    pub names: Vec<String>,
    pub branches: Vec<SeqEncoder>,
    pub head: Mlp,
}

#[derive(Debug, Clone)]
pub struct FusionTape {
    branches: Vec<SeqEncoderTape>,
    head: MlpTape,
}

impl FusionEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        specs: &[ModalitySpec],
        inputs: &[usize],
        arch: SequenceArch,
        hidden: usize,
        depth: usize,
        out_dim: usize,
        rng: &mut RngState,
    ) -> Self {
        let branches: Vec<SeqEncoder> = inputs
            .iter()
            .map(|&i| SeqEncoder::new(&specs[i], arch, hidden, depth.saturating_sub(1), hidden, Activation::Tanh, rng))
            .collect();
        let head = Mlp::tower(hidden * inputs.len(), hidden, 1, out_dim, Activation::Identity, rng);
        FusionEncoder {
            inputs: inputs.to_vec(),
            names: inputs.iter().map(|&i| specs[i].name.clone()).collect(),
            branches,
            head,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.head.out_dim()
    }

    pub fn run(&self, x: &[&[f64]]) -> (Vec<f64>, FusionTape) {
        let mut feats = Vec::new();
        let mut tapes = Vec::with_capacity(self.branches.len());
        for (b, &i) in self.branches.iter().zip(&self.inputs) {
            let (f, t) = b.run(x[i]);
            feats.extend(f);
            tapes.push(t);
        }
        let (y, ht) = self.head.run(&feats);
        (
            y,
            FusionTape {
                branches: tapes,
                head: ht,
            },
        )
    }

    pub fn eval(&self, x: &[&[f64]]) -> Vec<f64> {
        self.run(x).0
    }

    /// Accumulates parameter gradients; returns per-modality input gradients
    /// indexed like `x` (modalities this encoder ignores get empty vectors).
    pub fn backprop(
        &self,
        tape: &FusionTape,
        dout: &[f64],
        grads: &mut FusionEncoder,
        n_modalities: usize,
    ) -> Vec<Vec<f64>> {
        let dfeat = self.head.backprop(&tape.head, dout, &mut grads.head);
        let mut dx = vec![Vec::new(); n_modalities];
        let mut off = 0;
        for (k, (b, &i)) in self.branches.iter().zip(&self.inputs).enumerate() {
            let w = b.out_dim();
            dx[i] = b.backprop(&tape.branches[k], &dfeat[off..off + w], &mut grads.branches[k]);
            off += w;
        }
        dx
    }
}

impl Params for FusionEncoder {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (b, n) in self.branches.iter().zip(&self.names) {
            b.visit(&join(prefix, &format!("branch.{n}")), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        for (b, n) in self.branches.iter_mut().zip(&self.names) {
            b.visit_mut(&join(prefix, &format!("branch.{n}")), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SeqDecoder {
    /// Dense tower emitting all `T · d` values at once.
    Dense { net: Mlp },
    Gru {
        init: Dense,
        gru: Gru,
        readout: Dense,
        steps: usize,
    },
}

#[derive(Debug, Clone)]
pub enum SeqDecoderTape {
    Dense(MlpTape),
    Gru {
        init: DenseTape,
        gru: GruTape,
        readout: Vec<DenseTape>,
    },
}

impl SeqDecoder {
    pub fn new(
        spec: &ModalitySpec,
        arch: SequenceArch,
        in_dim: usize,
        hidden: usize,
        depth: usize,
        rng: &mut RngState,
    ) -> Self {
        if spec.is_sequence() && arch == SequenceArch::Gru {
            SeqDecoder::Gru {
                init: Dense::new(in_dim, hidden, Activation::Identity, rng),
                gru: Gru::new(in_dim, hidden, rng),
                readout: Dense::new(hidden, spec.dim, Activation::Identity, rng),
                steps: spec.steps,
            }
        } else {
            SeqDecoder::Dense {
                net: Mlp::tower(in_dim, hidden, depth, spec.flat_len(), Activation::Identity, rng),
            }
        }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            SeqDecoder::Dense { net } => net.in_dim(),
            SeqDecoder::Gru { init, .. } => init.in_dim(),
        }
    }

    /// Returns the flattened `[T, d]` reconstruction.
    pub fn run(&self, input: &[f64]) -> (Vec<f64>, SeqDecoderTape) {
        match self {
            SeqDecoder::Dense { net } => {
                let (y, t) = net.run(input);
                (y, SeqDecoderTape::Dense(t))
            }
            SeqDecoder::Gru {
                init,
                gru,
                readout,
                steps,
            } => {
                let (h0, it) = init.run(input);
                let xs = vec![input.to_vec(); *steps];
                let (hs, gt) = gru.run(&h0, &xs);
                let mut out = Vec::with_capacity(steps * readout.out_dim());
                let mut rts = Vec::with_capacity(*steps);
                for h in &hs {
                    let (y, rt) = readout.run(h);
                    out.extend(y);
                    rts.push(rt);
                }
                (
                    out,
                    SeqDecoderTape::Gru {
                        init: it,
                        gru: gt,
                        readout: rts,
                    },
                )
            }
        }
    }

    pub fn eval(&self, input: &[f64]) -> Vec<f64> {
        self.run(input).0
    }

    /// Returns `∂L/∂input`.
    pub fn backprop(&self, tape: &SeqDecoderTape, dout: &[f64], grads: &mut SeqDecoder) -> Vec<f64> {
        match (self, tape, grads) {
            (SeqDecoder::Dense { net }, SeqDecoderTape::Dense(t), SeqDecoder::Dense { net: g }) => {
                net.backprop(t, dout, g)
            }
            (
                SeqDecoder::Gru {
                    init, gru, readout, ..
                },
                SeqDecoderTape::Gru {
                    init: it,
                    gru: gt,
                    readout: rts,
                },
                SeqDecoder::Gru {
                    init: ginit,
                    gru: ggru,
                    readout: gread,
                    ..
                },
            ) => {
                let d = readout.out_dim();
                let dh: Vec<Vec<f64>> = rts
                    .iter()
                    .enumerate()
                    .map(|(t, rt)| readout.backprop(rt, &dout[t * d..(t + 1) * d], gread))
                    .collect();
                let back = gru.backprop(gt, &dh, ggru);
                let mut din = init.backprop(it, &back.init_hidden, ginit);
                for dx in &back.inputs {
                    for (a, b) in din.iter_mut().zip(dx) {
                        *a += b;
                    }
                }
                din
            }
            _ => unreachable!("tape/gradient layout mismatch"),
        }
    }
}

impl Params for SeqDecoder {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        match self {
            SeqDecoder::Dense { net } => net.visit(&join(prefix, "net"), f),
            SeqDecoder::Gru {
                init, gru, readout, ..
            } => {
                init.visit(&join(prefix, "init"), f);
                gru.visit(&join(prefix, "gru"), f);
                readout.visit(&join(prefix, "readout"), f);
            }
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        match self {
            SeqDecoder::Dense { net } => net.visit_mut(&join(prefix, "net"), f),
            SeqDecoder::Gru {
                init, gru, readout, ..
            } => {
                init.visit_mut(&join(prefix, "init"), f);
                gru.visit_mut(&join(prefix, "gru"), f);
                readout.visit_mut(&join(prefix, "readout"), f);
            }
        }
    }
}
