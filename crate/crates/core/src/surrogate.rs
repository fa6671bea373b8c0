//! Surrogate inference for missing modalities.
//!
//! A [`SurrogateNet`] reads only the observed modalities and regresses the
//! latent blocks the frozen model cannot compute without the missing ones
//! (`z_y` and each missing `z_aᵢ` for the full model). Observed private codes
//! still come from the frozen encoders. Training matches the frozen model's own
//! codes in squared error; the decoders are never touched.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ModalitySpec, Sample};
use crate::error::{MfmError, Result};
use crate::linalg::{RngState, Tensor};
use crate::model::{Decoded, FusionEncoder, LatentCode, MfmModel, ModelConfig, ModelVariant, SeqDecoder, SequenceArch};
use crate::net::{adam_step, join, AdamConfig, AdamState, Params};
use crate::objective::{epoch_batches, evaluate, train, EvalMetrics, LossWeights, Schedule};
use crate::parallel::Exec;

/// Which modalities are observed (`true`) at inference time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MissingMask {
    pub observed: Vec<bool>,
}

impl MissingMask {
    pub fn new(observed: Vec<bool>) -> Result<Self> {
        if !observed.iter().any(|&o| o) {
            return Err(MfmError::invalid("at least one modality must be observed"));
        }
        Ok(MissingMask { observed })
    }

    pub fn all_observed(m: usize) -> Self {
        MissingMask {
            observed: vec![true; m],
        }
    }

    /// Builds a mask from a comma-separated list of the observed modality names.
    pub fn from_observed_names(list: &str, specs: &[ModalitySpec]) -> Result<Self> {
        let mut observed = vec![false; specs.len()];
        for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let i = specs
                .iter()
                .position(|s| s.name == name)
                .ok_or_else(|| MfmError::Config(format!("mask names unknown modality '{name}'")))?;
            observed[i] = true;
        }
        MissingMask::new(observed)
    }

    pub fn is_full(&self) -> bool {
        self.observed.iter().all(|&o| o)
    }

    pub fn observed_indices(&self) -> Vec<usize> {
        (0..self.observed.len()).filter(|&i| self.observed[i]).collect()
    }

    pub fn missing_indices(&self) -> Vec<usize> {
        (0..self.observed.len()).filter(|&i| !self.observed[i]).collect()
    }

    fn check(&self, specs: &[ModalitySpec]) -> Result<()> {
        if self.observed.len() != specs.len() {
            return Err(MfmError::invalid(format!(
                "mask covers {} modalities, model has {}",
                self.observed.len(),
                specs.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurrogateConfig {
    pub hidden: usize,
    pub depth: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig {
            hidden: 32,
            depth: 2,
            epochs: 100,
            batch_size: 32,
            optimizer: AdamConfig::default(),
        }
    }
}

impl SurrogateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.depth == 0 || self.batch_size < 2 {
            return Err(MfmError::Config(format!("invalid surrogate settings {self:?}")));
        }
        self.optimizer.validate()
    }

    fn schedule(&self) -> Schedule {
        Schedule {
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer: self.optimizer,
            ..Schedule::default()
        }
    }
}

/// Latent block `k` (concat order) and whether its encoder reads a missing
/// modality.
fn inferred_blocks(model: &MfmModel, mask: &MissingMask) -> Vec<bool> {
    let mut v = Vec::new();
    let any_missing = !mask.is_full();
    if model.latent.zy > 0 {
        v.push(any_missing);
    }
    if model.shared_gen.is_some() {
        v.push(any_missing);
    }
    for i in 0..model.private.len() {
        v.push(!mask.observed[i]);
    }
    v
}

fn block_dims(model: &MfmModel) -> Vec<usize> {
    let mut v = Vec::new();
    if model.latent.zy > 0 {
        v.push(model.latent.zy);
    }
    v.extend_from_slice(&model.latent.za);
    v
}

/// Φ: observed modalities → the latent blocks that depend on missing ones.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateNet {
    pub mask: MissingMask,
    /// Per latent block (concat order): inferred by the surrogate or not.
    pub inferred: Vec<bool>,
    pub net: FusionEncoder,
}

impl Params for SurrogateNet {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.net.visit(&join(prefix, "phi"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        self.net.visit_mut(&join(prefix, "phi"), f);
    }
}

impl SurrogateNet {
    pub fn new(model: &MfmModel, mask: &MissingMask, cfg: &SurrogateConfig, rng: &mut RngState) -> Result<Self> {
        mask.check(&model.specs)?;
        if mask.is_full() {
            return Err(MfmError::invalid("every modality is observed: there is nothing for a surrogate to infer"));
        }
        let inferred = inferred_blocks(model, mask);
        let out: usize = block_dims(model).iter().zip(&inferred).filter(|(_, &i)| i).map(|(d, _)| d).sum();
        let net = FusionEncoder::new(
            &model.specs,
            &mask.observed_indices(),
            model.config.sequence_arch,
            cfg.hidden,
            cfg.depth,
            out,
            rng,
        );
        Ok(SurrogateNet {
            mask: mask.clone(),
            inferred,
            net,
        })
    }

    /// Inferred part of the concatenated latent, in block order.
    pub fn infer(&self, x: &[Tensor]) -> Vec<f64> {
        let flat: Vec<&[f64]> = x.iter().map(Tensor::data).collect();
        self.net.eval(&flat)
    }

    fn targets(&self, code: &LatentCode, dims: &[usize]) -> Vec<f64> {
        let flat = code.concat();
        let mut out = Vec::new();
        let mut off = 0;
        for (d, &inf) in dims.iter().zip(&self.inferred) {
            if inf {
                out.extend_from_slice(&flat[off..off + d]);
            }
            off += d;
        }
        out
    }
}

/// Fits Φ by latent matching against the frozen model's codes.
pub fn train_surrogate(
    model: &MfmModel,
    data: &Dataset,
    mask: &MissingMask,
    cfg: &SurrogateConfig,
    rng: &mut RngState,
    exec: Exec,
) -> Result<SurrogateNet> {
    cfg.validate()?;
    let mut sur = SurrogateNet::new(model, mask, cfg, rng)?;
    if data.len() < 2 {
        return Err(MfmError::invalid("surrogate training needs at least two samples"));
    }
    let dims = block_dims(model);
    let codes = exec.map(data.len(), |k| model.encode(&data.samples[k].modalities));
    let targets: Vec<Vec<f64>> = codes
        .into_iter()
        .map(|c| c.map(|c| sur.targets(&c, &dims)))
        .collect::<Result<_>>()?;
    let m = model.specs.len();
    fit(&mut sur, data.len(), &cfg.schedule(), rng, exec, |p, k, scale, g| {
        let x: Vec<&[f64]> = data.samples[k].modalities.iter().map(Tensor::data).collect();
        let (y, tape) = p.net.run(&x);
        let mut loss = 0.0;
        let d: Vec<f64> = y
            .iter()
            .zip(&targets[k])
            .map(|(a, b)| {
                loss += (a - b) * (a - b);
                scale * 2.0 * (a - b)
            })
            .collect();
        p.net.backprop(&tape, &d, &mut g.net, m);
        loss
    })?;
    Ok(sur)
}

/// Minibatch Adam on a per-sample loss. `sample_grad(params, k, scale, grads)`
/// returns sample `k`'s loss and adds `scale · ∂loss/∂θ` into `grads`.
fn fit<P, F>(params: &mut P, n: usize, sched: &Schedule, rng: &mut RngState, exec: Exec, sample_grad: F) -> Result<Vec<f64>>
where
    P: Params + Send + Sync,
    F: Fn(&P, usize, f64, &mut P) -> f64 + Sync + Send,
{
    const CHUNK: usize = 8;
    let mut state = AdamState::new(params, sched.optimizer);
    let mut history = Vec::with_capacity(sched.epochs);
    for epoch in 0..sched.epochs {
        let mut total = 0.0;
        for batch in epoch_batches(n, sched.batch_size, rng) {
            let scale = 1.0 / batch.len() as f64;
            let p: &P = params;
            let parts = exec.map(batch.len().div_ceil(CHUNK), |c| {
                let mut g = p.zeros_like();
                let mut loss = 0.0;
                for &k in &batch[c * CHUNK..((c + 1) * CHUNK).min(batch.len())] {
                    loss += sample_grad(p, k, scale, &mut g);
                }
                (loss, g)
            });
            let mut parts = parts.into_iter();
            let (mut loss, mut grads) = parts.next().expect("non-empty batch");
            for (l, g) in parts {
                loss += l;
                grads.accumulate(&g);
            }
            if !loss.is_finite() {
                return Err(MfmError::Divergence {
                    epoch,
                    detail: "non-finite surrogate loss".into(),
                });
            }
            adam_step(params, &grads, &mut state)?;
            total += loss;
        }
        history.push(total / n as f64);
    }
    Ok(history)
}

/// Reconstruction of the missing modalities and the prediction from the
/// observed ones.
#[derive(Debug, Clone, PartialEq)]
pub struct Imputation {
    /// `(modality index, x̂)` for every missing modality with a decoder.
    pub missing: Vec<(usize, Tensor)>,
    pub prediction: Tensor,
}

/// Decodes with surrogate-inferred codes. Missing slots of `x` are never read.
pub fn impute(model: &MfmModel, sur: &SurrogateNet, x: &[Tensor], mask: &MissingMask) -> Result<Imputation> {
    if mask != &sur.mask {
        return Err(MfmError::invalid("mask differs from the one the surrogate was trained for"));
    }
    let d = impute_full(model, sur, x)?;
    let missing = mask
        .missing_indices()
        .into_iter()
        .filter_map(|i| d.recon.get(i).map(|t| (i, t.clone())))
        .collect();
    Ok(Imputation {
        missing,
        prediction: d.prediction,
    })
}

fn impute_full(model: &MfmModel, sur: &SurrogateNet, x: &[Tensor]) -> Result<Decoded> {
    sur.mask.check(&model.specs)?;
    if x.len() != model.specs.len() {
        return Err(MfmError::shape("sample must list every modality slot"));
    }
    for i in sur.mask.observed_indices() {
        let s = &model.specs[i];
        if x[i].shape() != [s.steps, s.dim] {
            return Err(MfmError::shape(format!("observed modality '{}' has shape {:?}", s.name, x[i].shape())));
        }
    }
    let inferred = sur.infer(x);
    // observed private codes come from the frozen encoders
    let flat: Vec<&[f64]> = x.iter().map(Tensor::data).collect();
    let mut concat = Vec::with_capacity(model.latent.total_z());
    let mut src = 0;
    let fused = usize::from(model.latent.zy > 0) + usize::from(model.shared_gen.is_some());
    for (b, (&d, &inf)) in block_dims(model).iter().zip(&sur.inferred).enumerate() {
        if inf {
            concat.extend_from_slice(&inferred[src..src + d]);
            src += d;
        } else if b >= fused {
            let i = b - fused;
            let raw = model.private[i].eval(flat[i]);
            concat.extend_from_slice(&raw[..d]);
        } else {
            return Err(MfmError::invalid("fused block cannot be computed from a partial sample"));
        }
    }
    let code = LatentCode::from_concat(&concat, &model.latent);
    model.decode(&model.factorize(&code)?)
}

/// Φ_G: observed modalities → missing modalities directly.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerativeBaseline {
    pub mask: MissingMask,
    pub encoder: FusionEncoder,
    pub decoders: Vec<SeqDecoder>,
    /// `(steps, dim)` of every modality.
    pub shapes: Vec<(usize, usize)>,
}

impl Params for GenerativeBaseline {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.decoders.visit(&join(prefix, "decoder"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.decoders.visit_mut(&join(prefix, "decoder"), f);
    }
}

impl GenerativeBaseline {
    /// Predicted missing modalities, in mask order.
    pub fn predict(&self, x: &[Tensor]) -> Vec<Tensor> {
        let flat: Vec<&[f64]> = x.iter().map(Tensor::data).collect();
        let h = self.encoder.eval(&flat);
        self.decoders
            .iter()
            .zip(self.mask.missing_indices())
            .map(|(d, i)| {
                let (steps, dim) = self.shapes[i];
                Tensor::new(vec![steps, dim], d.eval(&h)).expect("finite reconstruction")
            })
            .collect()
    }
}

pub fn train_generative_baseline(
    data: &Dataset,
    mask: &MissingMask,
    arch: SequenceArch,
    cfg: &SurrogateConfig,
    rng: &mut RngState,
    exec: Exec,
) -> Result<GenerativeBaseline> {
    cfg.validate()?;
    mask.check(&data.specs)?;
    if mask.is_full() {
        return Err(MfmError::invalid("nothing is missing"));
    }
    let encoder = FusionEncoder::new(&data.specs, &mask.observed_indices(), arch, cfg.hidden, cfg.depth, cfg.hidden, rng);
    let decoders = mask
        .missing_indices()
        .into_iter()
        .map(|i| SeqDecoder::new(&data.specs[i], arch, cfg.hidden, cfg.hidden, cfg.depth, rng))
        .collect();
    let mut base = GenerativeBaseline {
        mask: mask.clone(),
        encoder,
        decoders,
        shapes: data.specs.iter().map(|s| (s.steps, s.dim)).collect(),
    };
    let missing = mask.missing_indices();
    let m = data.specs.len();
    fit(&mut base, data.len(), &cfg.schedule(), rng, exec, |p, k, scale, g| {
        let x: Vec<&[f64]> = data.samples[k].modalities.iter().map(Tensor::data).collect();
        let (h, etape) = p.encoder.run(&x);
        let mut dh = vec![0.0; h.len()];
        let mut loss = 0.0;
        for (j, &i) in missing.iter().enumerate() {
            let (y, tape) = p.decoders[j].run(&h);
            let d: Vec<f64> = y
                .iter()
                .zip(x[i])
                .map(|(a, b)| {
                    loss += (a - b) * (a - b);
                    scale * 2.0 * (a - b)
                })
                .collect();
            let dd = p.decoders[j].backprop(&tape, &d, &mut g.decoders[j]);
            for (a, b) in dh.iter_mut().zip(dd) {
                *a += b;
            }
        }
        p.encoder.backprop(&etape, &dh, &mut g.encoder, m);
        loss
    })?;
    Ok(base)
}

/// Φ_D: a fused discriminative model (variant MB) trained on the observed
/// modalities only. Returns the model and the index map into the full specs.
pub fn train_discriminative_baseline(
    data: &Dataset,
    mask: &MissingMask,
    model_cfg: &ModelConfig,
    schedule: &Schedule,
    rng: &mut RngState,
    exec: Exec,
) -> Result<MfmModel> {
    mask.check(&data.specs)?;
    let sub = observed_only(data, mask);
    let cfg = ModelConfig {
        variant: ModelVariant::MB,
        ..model_cfg.clone()
    };
    let mut model = MfmModel::build(&cfg, &sub.specs, sub.task, rng)?;
    let weights = LossWeights {
        lambda: 0.0,
        ..LossWeights::default()
    };
    train(&mut model, &sub, &weights, schedule, rng, exec)?;
    Ok(model)
}

/// Restricts every sample to its observed modalities.
pub fn observed_only(data: &Dataset, mask: &MissingMask) -> Dataset {
    let keep = mask.observed_indices();
    Dataset {
        specs: keep.iter().map(|&i| data.specs[i].clone()).collect(),
        task: data.task,
        samples: data
            .samples
            .iter()
            .map(|s| Sample {
                id: s.id,
                label: s.label,
                modalities: keep.iter().map(|&i| s.modalities[i].clone()).collect(),
            })
            .collect(),
    }
}

/// Per-modality training means (the mean-predictor baseline).
pub fn modality_means(data: &Dataset) -> Vec<Tensor> {
    data.specs
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut acc = vec![0.0; s.flat_len()];
            for smp in &data.samples {
                for (a, v) in acc.iter_mut().zip(smp.modalities[i].data()) {
                    *a += v / data.len() as f64;
                }
            }
            Tensor::new(vec![s.steps, s.dim], acc).expect("finite mean")
        })
        .collect()
}

/// Metrics of the surrogate pipeline on `data`: reconstruction MSE for the
/// missing modalities only, prediction from the observed ones.
pub fn evaluate_masked(model: &MfmModel, sur: &SurrogateNet, data: &Dataset, exec: Exec) -> Result<EvalMetrics> {
    if sur.mask.is_full() {
        return evaluate(model, data, exec);
    }
    let outs = exec.map(data.len(), |k| impute_full(model, sur, &data.samples[k].modalities));
    let outs = outs.into_iter().collect::<Result<Vec<_>>>()?;
    let recons: Vec<Vec<Tensor>> = outs.iter().map(|o| o.recon.clone()).collect();
    let preds: Vec<Vec<f64>> = outs.into_iter().map(|o| o.prediction.into_data()).collect();
    let mut m = crate::objective::score(model.task, data, &recons, &preds, model.has_decoders())?;
    for (i, r) in m.recon_mse.iter_mut().enumerate() {
        if sur.mask.observed[i] {
            *r = None;
        }
    }
    Ok(m)
}

/// Accuracy (or MAE for regression) of a discriminative baseline on the
/// observed part of `data`.
pub fn evaluate_discriminative(model: &MfmModel, data: &Dataset, mask: &MissingMask, exec: Exec) -> Result<EvalMetrics> {
    let sub = observed_only(data, mask);
    let mut m = evaluate(model, &sub, exec)?;
    m.recon_mse = vec![None; data.specs.len()];
    Ok(m)
}

/// Squared error per element of `pred` against the missing modalities.
pub fn imputation_mse(data: &Dataset, mask: &MissingMask, pred: impl Fn(&Sample) -> Vec<Tensor>) -> f64 {
    let missing = mask.missing_indices();
    let mut acc = 0.0;
    let mut count = 0usize;
    for s in &data.samples {
        for (t, &i) in pred(s).iter().zip(&missing) {
            acc += t.data().iter().zip(s.modalities[i].data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            count += t.len();
        }
    }
    acc / count.max(1) as f64
}

#[cfg(test)]
mod tests;
