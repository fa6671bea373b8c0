//! The factorized multimodal model and its ablation variants.
//!
//! Full model wiring for `M` modalities:
//!
//! ```text
//! z_y  = Q_y(x_1..x_M)        f_y  = G_y(z_y)        ŷ  = D(f_y)
//! z_ai = Q_ai(x_i)            f_ai = G_ai(z_ai)      x̂_i = F_i([f_ai ; f_y])
//! ```
//!
//! `z_ai` reads only its own modality, `ŷ` reads only `f_y`, and decoder `i`
//! reads only `f_ai` and `f_y`. All maps are deterministic unless the KL
//! prior is selected, in which case encoders emit a mean and log-variance and
//! training samples through the reparameterization.

mod blocks;

use serde::{Deserialize, Serialize};

pub use blocks::{FusionEncoder, FusionTape, SeqDecoder, SeqDecoderTape, SeqEncoder, SeqEncoderTape, SequenceArch};

use crate::data::{check_sample, validate_specs, ModalitySpec, Task};
use crate::error::{MfmError, Result};
use crate::linalg::{RngState, Tensor};
use crate::net::{join, Activation, Mlp, MlpTape, Params};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum ModelVariant {
    /// Per-modality discriminative factors only (logits averaged), no generation.
    MA,
    /// One fused discriminative factor, no generation.
    MB,
    /// Per-modality factors shared by prediction and reconstruction.
    MC,
    /// One joint factor shared by prediction and every decoder.
    MD,
    /// Fused discriminative factor plus one shared generative factor.
    ME,
    #[default]
    MFM,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 6] = [
        ModelVariant::MA,
        ModelVariant::MB,
        ModelVariant::MC,
        ModelVariant::MD,
        ModelVariant::ME,
        ModelVariant::MFM,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::MA => "MA",
            ModelVariant::MB => "MB",
            ModelVariant::MC => "MC",
            ModelVariant::MD => "MD",
            ModelVariant::ME => "ME",
            ModelVariant::MFM => "MFM",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        ModelVariant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s) || format!("M_{}", &v.name()[1..]).eq_ignore_ascii_case(s))
            .ok_or_else(|| MfmError::Config(format!("unknown variant '{s}'")))
    }

    /// A discriminative factor computed from all modalities jointly.
    pub fn multimodal_discriminative(self) -> bool {
        !matches!(self, ModelVariant::MA | ModelVariant::MC)
    }

    /// Reconstruction terms in the objective (decoders exist).
    pub fn hybrid(self) -> bool {
        !matches!(self, ModelVariant::MA | ModelVariant::MB)
    }

    /// Separate generative and discriminative factors.
    pub fn factorized(self) -> bool {
        matches!(self, ModelVariant::ME | ModelVariant::MFM)
    }

    pub fn modality_specific_generative(self) -> bool {
        self == ModelVariant::MFM
    }
}

impl std::fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PriorMatching {
    /// Deterministic encoders, MMD between aggregated posterior and N(0, I).
    #[default]
    Mmd,
    /// Gaussian encoders with a closed-form KL to N(0, I).
    Kl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: ModelVariant,
    pub hidden: usize,
    pub depth: usize,
    pub zy_dim: usize,
    pub za_dim: usize,
    pub fy_dim: usize,
    pub fa_dim: usize,
    pub prior: PriorMatching,
    pub sequence_arch: SequenceArch,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: ModelVariant::MFM,
            hidden: 32,
            depth: 2,
            zy_dim: 4,
            za_dim: 2,
            fy_dim: 8,
            fa_dim: 8,
            prior: PriorMatching::Mmd,
            sequence_arch: SequenceArch::Gru,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.hidden, self.zy_dim, self.za_dim, self.fy_dim, self.fa_dim];
        if dims.contains(&0) || self.depth == 0 {
            return Err(MfmError::Config(format!("model dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Effective latent and factor sizes for a built model. Empty/zero entries
/// mean the variant has no such block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentSpec {
    pub zy: usize,
    pub za: Vec<usize>,
    pub fy: usize,
    pub fa: Vec<usize>,
}

impl LatentSpec {
    pub fn for_variant(cfg: &ModelConfig, m: usize) -> Self {
        let (zy, za, fy, fa) = (cfg.zy_dim, cfg.za_dim, cfg.fy_dim, cfg.fa_dim);
        match cfg.variant {
            ModelVariant::MA => LatentSpec { zy: 0, za: vec![zy; m], fy: 0, fa: vec![fy; m] },
            ModelVariant::MB => LatentSpec { zy, za: vec![], fy, fa: vec![] },
            ModelVariant::MC => LatentSpec { zy: 0, za: vec![zy + za; m], fy: 0, fa: vec![fy + fa; m] },
            ModelVariant::MD => LatentSpec { zy: zy + m * za, za: vec![], fy: fy + m * fa, fa: vec![] },
            ModelVariant::ME => LatentSpec { zy, za: vec![m * za], fy, fa: vec![m * fa] },
            ModelVariant::MFM => LatentSpec { zy, za: vec![za; m], fy, fa: vec![fa; m] },
        }
    }

    pub fn total_z(&self) -> usize {
        self.zy + self.za.iter().sum::<usize>()
    }
}

/// Latent codes of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub z_y: Vec<f64>,
    pub z_a: Vec<Vec<f64>>,
}

impl LatentCode {
    /// `z_y ⊕ z_a1 ⊕ … ⊕ z_aM`.
    pub fn concat(&self) -> Vec<f64> {
        let mut v = self.z_y.clone();
        for z in &self.z_a {
            v.extend_from_slice(z);
        }
        v
    }

    pub fn from_concat(flat: &[f64], latent: &LatentSpec) -> Self {
        let z_y = flat[..latent.zy].to_vec();
        let mut off = latent.zy;
        let z_a = latent
            .za
            .iter()
            .map(|&d| {
                let v = flat[off..off + d].to_vec();
                off += d;
                v
            })
            .collect();
        LatentCode { z_y, z_a }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorCode {
    pub f_y: Vec<f64>,
    pub f_a: Vec<Vec<f64>>,
}

/// Reconstructions (one `[T, d]` tensor per modality; empty for
/// discriminative-only variants) and the prediction (logits or a scalar).
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub recon: Vec<Tensor>,
    pub prediction: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MfmModel {
    pub config: ModelConfig,
    pub specs: Vec<ModalitySpec>,
    pub task: Task,
    pub latent: LatentSpec,
    /// Optimizer steps taken; zero means untrained.
    pub steps_trained: u64,
    /// `Q_y`: fused encoder over all modalities.
    pub fusion: Option<FusionEncoder>,
    /// Shared generative encoder (variant ME).
    pub shared_gen: Option<FusionEncoder>,
    /// Per-modality encoders reading only their own modality.
    pub private: Vec<SeqEncoder>,
    pub g_y: Option<Mlp>,
    pub g_a: Vec<Mlp>,
    pub decoders: Vec<SeqDecoder>,
    pub heads: Vec<Mlp>,
}

/// Everything one sample's forward pass recorded for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub code: LatentCode,
    pub factors: FactorCode,
    /// Flattened reconstructions, one per decoder.
    pub recon: Vec<Vec<f64>>,
    pub prediction: Vec<f64>,
    /// Encoder means/log-variances when the KL prior is active.
    pub gaussian: Option<GaussianCode>,
    tape: PassTape,
}

#[derive(Debug, Clone)]
pub struct GaussianCode {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
    pub noise: Vec<f64>,
}

#[derive(Debug, Clone)]
struct PassTape {
    fusion: Option<FusionTape>,
    shared_gen: Option<FusionTape>,
    private: Vec<SeqEncoderTape>,
    g_y: Option<MlpTape>,
    g_a: Vec<MlpTape>,
    decoders: Vec<SeqDecoderTape>,
    heads: Vec<MlpTape>,
}

/// Loss gradients flowing into one sample's backward pass.
#[derive(Debug, Clone, Default)]
pub struct PassGrad {
    /// `∂L/∂x̂_i`, flattened; empty to skip a decoder.
    pub recon: Vec<Vec<f64>>,
    pub prediction: Vec<f64>,
    /// `∂L/∂z` over the concatenated latent (prior-matching term).
    pub latent: Vec<f64>,
    /// Extra `∂L/∂mean` and `∂L/∂log_var` for Gaussian encoders.
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl MfmModel {
    /// Builds a freshly initialized model (Glorot weights, zero biases).
    pub fn build(config: &ModelConfig, specs: &[ModalitySpec], task: Task, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        validate_specs(specs)?;
        if let Task::Classification { classes } = task {
            if classes < 2 {
                return Err(MfmError::Config("classification needs at least two classes".into()));
            }
        }
        let m = specs.len();
        let latent = LatentSpec::for_variant(config, m);
        let (h, depth, arch) = (config.hidden, config.depth, config.sequence_arch);
        let enc_mult = if config.prior == PriorMatching::Kl { 2 } else { 1 };
        let all: Vec<usize> = (0..m).collect();
        let v = config.variant;

        let fusion = (latent.zy > 0)
            .then(|| FusionEncoder::new(specs, &all, arch, h, depth, latent.zy * enc_mult, rng));
        let shared_gen = (v == ModelVariant::ME)
            .then(|| FusionEncoder::new(specs, &all, arch, h, depth, latent.za[0] * enc_mult, rng));
        let private: Vec<SeqEncoder> = if matches!(v, ModelVariant::MA | ModelVariant::MC | ModelVariant::MFM) {
            specs
                .iter()
                .zip(&latent.za)
                .map(|(s, &d)| SeqEncoder::new(s, arch, h, depth, d * enc_mult, Activation::Identity, rng))
                .collect()
        } else {
            Vec::new()
        };
        let g_y = (latent.zy > 0).then(|| Mlp::tower(latent.zy, h, 1, latent.fy, Activation::Identity, rng));
        let g_a: Vec<Mlp> = latent
            .za
            .iter()
            .zip(&latent.fa)
            .map(|(&z, &f)| Mlp::tower(z, h, 1, f, Activation::Identity, rng))
            .collect();

        let decoders = if v.hybrid() {
            specs
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let in_dim = match v {
                        ModelVariant::MFM => latent.fa[i] + latent.fy,
                        ModelVariant::ME => latent.fa[0] + latent.fy,
                        ModelVariant::MD => latent.fy,
                        ModelVariant::MC => latent.fa[i],
                        _ => unreachable!(),
                    };
                    SeqDecoder::new(s, arch, in_dim, h, depth, rng)
                })
                .collect()
        } else {
            Vec::new()
        };

        let out = task.output_dim();
        let heads = if v.multimodal_discriminative() {
            vec![Mlp::tower(latent.fy, h, 1, out, Activation::Identity, rng)]
        } else {
            latent
                .fa
                .iter()
                .map(|&f| Mlp::tower(f, h, 1, out, Activation::Identity, rng))
                .collect()
        };

        Ok(MfmModel {
            config: config.clone(),
            specs: specs.to_vec(),
            task,
            latent,
            steps_trained: 0,
            fusion,
            shared_gen,
            private,
            g_y,
            g_a,
            decoders,
            heads,
        })
    }

    pub fn variant(&self) -> ModelVariant {
        self.config.variant
    }

    pub fn has_decoders(&self) -> bool {
        !self.decoders.is_empty()
    }

    pub fn is_stochastic(&self) -> bool {
        self.config.prior == PriorMatching::Kl
    }

    /// Number of distinct latent factors feeding reconstruction and
    /// prediction (`f_y` plus each `f_a`).
    pub fn factor_count(&self) -> usize {
        usize::from(self.latent.fy > 0) + self.latent.fa.len()
    }

    /// Where decoder `i` finds `f_y` inside its input, if it reads it.
    pub fn decoder_fy_block(&self, i: usize) -> Option<std::ops::Range<usize>> {
        let dec = self.decoders.get(i)?;
        match self.variant() {
            ModelVariant::MFM | ModelVariant::ME => {
                let n = dec.in_dim();
                Some(n - self.latent.fy..n)
            }
            ModelVariant::MD => Some(0..self.latent.fy),
            _ => None,
        }
    }

    /// Input vector of decoder `i` for the given factors.
    pub fn decoder_input(&self, i: usize, f: &FactorCode) -> Vec<f64> {
        match self.variant() {
            ModelVariant::MFM => [f.f_a[i].as_slice(), &f.f_y].concat(),
            ModelVariant::ME => [f.f_a[0].as_slice(), &f.f_y].concat(),
            ModelVariant::MD => f.f_y.clone(),
            ModelVariant::MC => f.f_a[i].clone(),
            _ => unreachable!("variant has no decoders"),
        }
    }

    /// Splits an encoder's raw output into the latent it contributes.
    fn latent_from_raw(raw: &[f64], noise: Option<&[f64]>, stochastic: bool) -> Vec<f64> {
        if !stochastic {
            return raw.to_vec();
        }
        let d = raw.len() / 2;
        let (mean, lv) = raw.split_at(d);
        match noise {
            Some(eps) => (0..d).map(|k| mean[k] + (0.5 * lv[k]).exp() * eps[k]).collect(),
            None => mean.to_vec(),
        }
    }

    /// Full forward pass for one sample. `noise` (length `latent.total_z()`)
    /// is used only by Gaussian encoders; `None` means the mean is used.
    pub fn forward_pass(&self, x: &[&[f64]], noise: Option<&[f64]>) -> ForwardPass {
        let stochastic = self.is_stochastic();
        let latent = &self.latent;
        let mut raws: Vec<Vec<f64>> = Vec::new();

        let (fusion_raw, fusion_tape) = match &self.fusion {
            Some(enc) => {
                let (r, t) = enc.run(x);
                (Some(r), Some(t))
            }
            None => (None, None),
        };
        let (shared_raw, shared_tape) = match &self.shared_gen {
            Some(enc) => {
                let (r, t) = enc.run(x);
                (Some(r), Some(t))
            }
            None => (None, None),
        };
        let mut private_raw = Vec::with_capacity(self.private.len());
        let mut private_tapes = Vec::with_capacity(self.private.len());
        for (i, enc) in self.private.iter().enumerate() {
            let (r, t) = enc.run(x[i]);
            private_raw.push(r);
            private_tapes.push(t);
        }

        // latent blocks in concat order: z_y, then z_a blocks
        if let Some(r) = &fusion_raw {
            raws.push(r.clone());
        }
        if let Some(r) = &shared_raw {
            raws.push(r.clone());
        }
        raws.extend(private_raw.iter().cloned());

        let mut off = 0;
        let mut blocks = Vec::with_capacity(raws.len());
        for r in &raws {
            let d = if stochastic { r.len() / 2 } else { r.len() };
            let eps = noise.map(|n| &n[off..off + d]);
            blocks.push(Self::latent_from_raw(r, eps, stochastic));
            off += d;
        }
        let gaussian = stochastic.then(|| {
            let mut mean = Vec::new();
            let mut log_var = Vec::new();
            for r in &raws {
                let d = r.len() / 2;
                mean.extend_from_slice(&r[..d]);
                log_var.extend_from_slice(&r[d..]);
            }
            GaussianCode {
                noise: noise.map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; mean.len()]),
                mean,
                log_var,
            }
        });
        let mut blocks = blocks.into_iter();
        let z_y = if latent.zy > 0 { blocks.next().expect("z_y block") } else { Vec::new() };
        let z_a: Vec<Vec<f64>> = blocks.collect();
        let code = LatentCode { z_y, z_a };

        let (f_y, gy_tape) = match &self.g_y {
            Some(g) => {
                let (f, t) = g.run(&code.z_y);
                (f, Some(t))
            }
            None => (Vec::new(), None),
        };
        let mut f_a = Vec::with_capacity(self.g_a.len());
        let mut ga_tapes = Vec::with_capacity(self.g_a.len());
        for (g, z) in self.g_a.iter().zip(&code.z_a) {
            let (f, t) = g.run(z);
            f_a.push(f);
            ga_tapes.push(t);
        }
        let factors = FactorCode { f_y, f_a };

        let mut recon = Vec::with_capacity(self.decoders.len());
        let mut dec_tapes = Vec::with_capacity(self.decoders.len());
        for (i, dec) in self.decoders.iter().enumerate() {
            let (y, t) = dec.run(&self.decoder_input(i, &factors));
            recon.push(y);
            dec_tapes.push(t);
        }

        let (prediction, head_tapes) = self.predict_with_tapes(&factors);

        ForwardPass {
            code,
            factors,
            recon,
            prediction,
            gaussian,
            tape: PassTape {
                fusion: fusion_tape,
                shared_gen: shared_tape,
                private: private_tapes,
                g_y: gy_tape,
                g_a: ga_tapes,
                decoders: dec_tapes,
                heads: head_tapes,
            },
        }
    }

    fn predict_with_tapes(&self, f: &FactorCode) -> (Vec<f64>, Vec<MlpTape>) {
        if self.variant().multimodal_discriminative() {
            let (y, t) = self.heads[0].run(&f.f_y);
            (y, vec![t])
        } else {
            let m = self.heads.len() as f64;
            let mut acc = vec![0.0; self.task.output_dim()];
            let mut tapes = Vec::with_capacity(self.heads.len());
            for (h, fa) in self.heads.iter().zip(&f.f_a) {
                let (y, t) = h.run(fa);
                for (a, v) in acc.iter_mut().zip(&y) {
                    *a += v / m;
                }
                tapes.push(t);
            }
            (acc, tapes)
        }
    }

    /// Accumulates `∂L/∂θ` for one sample into `grads` and returns `∂L/∂x_i`
    /// for every modality.
    pub fn backward_pass(&self, pass: &ForwardPass, g: &PassGrad, grads: &mut MfmModel) -> Vec<Vec<f64>> {
        let m = self.specs.len();
        let latent = &self.latent;
        let mut d_fy = vec![0.0; latent.fy];
        let mut d_fa: Vec<Vec<f64>> = latent.fa.iter().map(|&d| vec![0.0; d]).collect();

        for (i, dec) in self.decoders.iter().enumerate() {
            let Some(dx) = g.recon.get(i).filter(|v| !v.is_empty()) else {
                continue;
            };
            let din = dec.backprop(&pass.tape.decoders[i], dx, &mut grads.decoders[i]);
            match self.variant() {
                ModelVariant::MFM | ModelVariant::ME => {
                    let k = if self.variant() == ModelVariant::MFM { i } else { 0 };
                    let na = latent.fa[k];
                    add(&mut d_fa[k], &din[..na]);
                    add(&mut d_fy, &din[na..]);
                }
                ModelVariant::MD => add(&mut d_fy, &din),
                ModelVariant::MC => add(&mut d_fa[i], &din),
                _ => unreachable!(),
            }
        }

        if !g.prediction.is_empty() {
            if self.variant().multimodal_discriminative() {
                let d = self.heads[0].backprop(&pass.tape.heads[0], &g.prediction, &mut grads.heads[0]);
                add(&mut d_fy, &d);
            } else {
                let scaled: Vec<f64> = g.prediction.iter().map(|v| v / self.heads.len() as f64).collect();
                for (k, h) in self.heads.iter().enumerate() {
                    let d = h.backprop(&pass.tape.heads[k], &scaled, &mut grads.heads[k]);
                    add(&mut d_fa[k], &d);
                }
            }
        }

        let mut d_z = vec![0.0; latent.total_z()];
        if let (Some(gy), Some(t), Some(ggy)) = (&self.g_y, &pass.tape.g_y, grads.g_y.as_mut()) {
            let d = gy.backprop(t, &d_fy, ggy);
            add(&mut d_z[..latent.zy], &d);
        }
        let mut off = latent.zy;
        for (k, ga) in self.g_a.iter().enumerate() {
            let d = ga.backprop(&pass.tape.g_a[k], &d_fa[k], &mut grads.g_a[k]);
            add(&mut d_z[off..off + latent.za[k]], &d);
            off += latent.za[k];
        }
        if !g.latent.is_empty() {
            add(&mut d_z, &g.latent);
        }

        // raw encoder gradients, in the same block order as the latent
        let d_raw: Vec<f64> = match &pass.gaussian {
            None => d_z,
            Some(gc) => {
                let n = gc.mean.len();
                let mut dm = d_z.clone();
                let mut dl: Vec<f64> = (0..n)
                    .map(|k| d_z[k] * 0.5 * (0.5 * gc.log_var[k]).exp() * gc.noise[k])
                    .collect();
                if !g.mean.is_empty() {
                    add(&mut dm, &g.mean);
                }
                if !g.log_var.is_empty() {
                    add(&mut dl, &g.log_var);
                }
                // re-interleave per block as [mean ; log_var]
                let mut out = Vec::with_capacity(2 * n);
                let mut o = 0;
                for d in self.block_dims() {
                    out.extend_from_slice(&dm[o..o + d]);
                    out.extend_from_slice(&dl[o..o + d]);
                    o += d;
                }
                out
            }
        };

        let mult = if pass.gaussian.is_some() { 2 } else { 1 };
        let mut dx: Vec<Vec<f64>> = self.specs.iter().map(|s| vec![0.0; s.flat_len()]).collect();
        let mut off = 0;
        if let (Some(enc), Some(t), Some(ge)) = (&self.fusion, &pass.tape.fusion, grads.fusion.as_mut()) {
            let w = latent.zy * mult;
            let d = enc.backprop(t, &d_raw[off..off + w], ge, m);
            merge(&mut dx, &d);
            off += w;
        }
        if let (Some(enc), Some(t), Some(ge)) = (&self.shared_gen, &pass.tape.shared_gen, grads.shared_gen.as_mut()) {
            let w = latent.za[0] * mult;
            let d = enc.backprop(t, &d_raw[off..off + w], ge, m);
            merge(&mut dx, &d);
            off += w;
        }
        for (i, enc) in self.private.iter().enumerate() {
            let w = latent.za[i] * mult;
            let d = enc.backprop(&pass.tape.private[i], &d_raw[off..off + w], &mut grads.private[i]);
            add(&mut dx[i], &d);
            off += w;
        }
        dx
    }

    /// Latent block sizes in concat order.
    fn block_dims(&self) -> Vec<usize> {
        let mut v = Vec::new();
        if self.latent.zy > 0 {
            v.push(self.latent.zy);
        }
        v.extend_from_slice(&self.latent.za);
        v
    }

    pub fn check_sample(&self, x: &[Tensor]) -> Result<()> {
        check_sample(&self.specs, x)
    }

    /// Deterministic inference of the latent codes.
    pub fn encode(&self, x: &[Tensor]) -> Result<LatentCode> {
        self.check_sample(x)?;
        let flat: Vec<&[f64]> = x.iter().map(Tensor::data).collect();
        Ok(self.encode_flat(&flat))
    }

    pub(crate) fn encode_flat(&self, x: &[&[f64]]) -> LatentCode {
        let st = self.is_stochastic();
        let mut z_y = Vec::new();
        let mut z_a = Vec::new();
        if let Some(enc) = &self.fusion {
            z_y = Self::latent_from_raw(&enc.eval(x), None, st);
        }
        if let Some(enc) = &self.shared_gen {
            z_a.push(Self::latent_from_raw(&enc.eval(x), None, st));
        }
        for (i, enc) in self.private.iter().enumerate() {
            z_a.push(Self::latent_from_raw(&enc.eval(x[i]), None, st));
        }
        LatentCode { z_y, z_a }
    }

    fn check_code(&self, code: &LatentCode) -> Result<()> {
        let ok = code.z_y.len() == self.latent.zy
            && code.z_a.len() == self.latent.za.len()
            && code.z_a.iter().zip(&self.latent.za).all(|(z, &d)| z.len() == d);
        if ok {
            Ok(())
        } else {
            Err(MfmError::shape(format!("latent code does not match {:?}", self.latent)))
        }
    }

    /// `f_y = G_y(z_y)`, `f_ai = G_ai(z_ai)`.
    pub fn factorize(&self, code: &LatentCode) -> Result<FactorCode> {
        self.check_code(code)?;
        Ok(self.factorize_unchecked(code))
    }

    pub(crate) fn factorize_unchecked(&self, code: &LatentCode) -> FactorCode {
        let f_y = self.g_y.as_ref().map(|g| g.eval(&code.z_y)).unwrap_or_default();
        let f_a = self.g_a.iter().zip(&code.z_a).map(|(g, z)| g.eval(z)).collect();
        FactorCode { f_y, f_a }
    }

    fn check_factors(&self, f: &FactorCode) -> Result<()> {
        let ok = f.f_y.len() == self.latent.fy
            && f.f_a.len() == self.latent.fa.len()
            && f.f_a.iter().zip(&self.latent.fa).all(|(v, &d)| v.len() == d);
        if ok {
            Ok(())
        } else {
            Err(MfmError::shape(format!("factor code does not match {:?}", self.latent)))
        }
    }

    /// Reconstructions `x̂_i = F_i(f_ai, f_y)` and prediction `ŷ = D(f_y)`.
    pub fn decode(&self, f: &FactorCode) -> Result<Decoded> {
        self.check_factors(f)?;
        let recon = self
            .decoders
            .iter()
            .enumerate()
            .map(|(i, dec)| {
                let s = &self.specs[i];
                Tensor::new(vec![s.steps, s.dim], dec.eval(&self.decoder_input(i, f)))
            })
            .collect::<Result<Vec<_>>>()?;
        let prediction = Tensor::from_vec(self.predict_from_factors(f));
        if !prediction.is_finite() {
            return Err(MfmError::NonFinite("prediction".into()));
        }
        Ok(Decoded { recon, prediction })
    }

    pub(crate) fn predict_from_factors(&self, f: &FactorCode) -> Vec<f64> {
        if self.variant().multimodal_discriminative() {
            self.heads[0].eval(&f.f_y)
        } else {
            let m = self.heads.len() as f64;
            let mut acc = vec![0.0; self.task.output_dim()];
            for (h, fa) in self.heads.iter().zip(&f.f_a) {
                for (a, v) in acc.iter_mut().zip(h.eval(fa)) {
                    *a += v / m;
                }
            }
            acc
        }
    }

    /// encode → factorize → decode.
    pub fn reconstruct(&self, x: &[Tensor]) -> Result<Decoded> {
        let code = self.encode(x)?;
        self.decode(&self.factorize_unchecked(&code))
    }

    /// Draws every latent block from N(0, I) and decodes.
    pub fn generate(&self, rng: &mut RngState) -> Result<Decoded> {
        let code = self.sample_prior(rng);
        self.decode(&self.factorize_unchecked(&code))
    }

    pub fn sample_prior(&self, rng: &mut RngState) -> LatentCode {
        LatentCode {
            z_y: rng.normal_vec(self.latent.zy),
            z_a: self.latent.za.iter().map(|&d| rng.normal_vec(d)).collect(),
        }
    }

    /// Predicted class (argmax of logits) or regression value.
    pub fn predict(&self, x: &[Tensor]) -> Result<f64> {
        let d = self.reconstruct(x)?;
        Ok(decide(self.task, d.prediction.data()))
    }
}

/// Argmax for classification, the scalar output for regression.
pub fn decide(task: Task, prediction: &[f64]) -> f64 {
    match task {
        Task::Classification { .. } => {
            let mut best = 0;
            for (i, v) in prediction.iter().enumerate() {
                if *v > prediction[best] {
                    best = i;
                }
            }
            best as f64
        }
        Task::Regression => prediction[0],
    }
}

fn add(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

fn merge(acc: &mut [Vec<f64>], g: &[Vec<f64>]) {
    for (a, b) in acc.iter_mut().zip(g) {
        if !b.is_empty() {
            add(a, b);
        }
    }
}

impl Params for MfmModel {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.fusion.visit(&join(prefix, "fusion"), f);
        self.shared_gen.visit(&join(prefix, "shared_gen"), f);
        for (e, s) in self.private.iter().zip(&self.specs) {
            e.visit(&join(prefix, &format!("private.{}", s.name)), f);
        }
        self.g_y.visit(&join(prefix, "g_y"), f);
        self.g_a.visit(&join(prefix, "g_a"), f);
        for (d, s) in self.decoders.iter().zip(&self.specs) {
            d.visit(&join(prefix, &format!("decoder.{}", s.name)), f);
        }
        self.heads.visit(&join(prefix, "head"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        self.fusion.visit_mut(&join(prefix, "fusion"), f);
        self.shared_gen.visit_mut(&join(prefix, "shared_gen"), f);
        for (e, s) in self.private.iter_mut().zip(&self.specs) {
            e.visit_mut(&join(prefix, &format!("private.{}", s.name)), f);
        }
        self.g_y.visit_mut(&join(prefix, "g_y"), f);
        self.g_a.visit_mut(&join(prefix, "g_a"), f);
        for (d, s) in self.decoders.iter_mut().zip(&self.specs) {
            d.visit_mut(&join(prefix, &format!("decoder.{}", s.name)), f);
        }
        self.heads.visit_mut(&join(prefix, "head"), f);
    }
}

/// Builds a variant with the default hyperparameters otherwise.
pub fn build_variant(
    variant: ModelVariant,
    specs: &[ModalitySpec],
    task: Task,
    rng: &mut RngState,
) -> Result<MfmModel> {
    let cfg = ModelConfig {
        variant,
        ..ModelConfig::default()
    };
    MfmModel::build(&cfg, specs, task, rng)
}

#[cfg(test)]
mod tests;
