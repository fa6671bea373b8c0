//! Training objective and minibatch training loop.
//!
//! ```text
//! L = Σᵢ wᵢ · mean c(Xᵢ, X̂ᵢ) + w_y · mean c_Y(Y, Ŷ) + λ · MMD(Q_Z, P_Z)
//! ```
//!
//! `c` is the squared error summed over timesteps, `c_Y` is softmax
//! cross-entropy (classification) or squared error (regression), and the MMD
//! compares the batch's concatenated latent codes with as many fresh draws
//! from `N(0, I)`. With the KL prior the last term becomes the mean closed-form
//! KL of the Gaussian encoders.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Label, Sample, Task};
use crate::error::{MfmError, Result};
use crate::kernel::{median_sigma, mmd_with_grad, BandwidthSpec};
use crate::linalg::{RngState, Tensor};
use crate::model::{decide, MfmModel, PassGrad, PriorMatching};
use crate::net::{adam_step_filtered, AdamConfig, AdamState, Params};
use crate::parallel::Exec;

/// Samples per gradient-accumulation chunk. Fixed so the floating-point
/// summation order does not depend on the thread count.
const GRAD_CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Prior-matching weight λ.
    pub lambda: f64,
    /// Per-modality reconstruction weights; empty means 1.0 for every modality.
    pub recon: Vec<f64>,
    pub pred: f64,
    /// Kernel bandwidth of the MMD term. The median heuristic is evaluated on
    /// the prior draws only, so it does not depend on the parameters.
    pub mmd_bandwidth: BandwidthSpec,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 1.0,
            recon: Vec::new(),
            pred: 1.0,
            mmd_bandwidth: BandwidthSpec::MedianHeuristic,
        }
    }
}

impl LossWeights {
    pub fn recon_weight(&self, i: usize) -> f64 {
        if self.recon.is_empty() {
            1.0
        } else {
            self.recon[i]
        }
    }

    pub fn validate(&self, modalities: usize) -> Result<()> {
        let all = std::iter::once(self.lambda).chain(self.recon.iter().copied()).chain([self.pred]);
        let mut any_positive = false;
        for w in all {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(MfmError::Config(format!("loss weights must be finite and non-negative: {self:?}")));
            }
            any_positive |= w > 0.0;
        }
        if !self.recon.is_empty() && self.recon.len() != modalities {
            return Err(MfmError::Config(format!(
                "{} reconstruction weights for {modalities} modalities",
                self.recon.len()
            )));
        }
        if !any_positive && !(self.recon.is_empty() && modalities > 0) {
            return Err(MfmError::Config("at least one loss weight must be positive".into()));
        }
        self.mmd_bandwidth.validate()
    }
}

/// Per-term losses of a batch (or an epoch average).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Mean reconstruction cost per modality; empty without decoders.
    pub recon: Vec<f64>,
    pub pred: f64,
    pub prior_penalty: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        let r: f64 = self.recon.iter().enumerate().map(|(i, c)| w.recon_weight(i) * c).sum();
        r + w.pred * self.pred + w.lambda * self.prior_penalty
    }

    fn finish(mut self, w: &LossWeights) -> Self {
        self.total = self.weighted_total(w);
        self
    }

    /// Component-wise mean of several breakdowns.
    pub fn mean(items: &[LossBreakdown], w: &LossWeights) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let k = items.first().map_or(0, |b| b.recon.len());
        let mut out = LossBreakdown {
            recon: vec![0.0; k],
            pred: 0.0,
            prior_penalty: 0.0,
            total: 0.0,
        };
        for b in items {
            for (a, r) in out.recon.iter_mut().zip(&b.recon) {
                *a += r / n;
            }
            out.pred += b.pred / n;
            out.prior_penalty += b.prior_penalty / n;
        }
        out.finish(w)
    }
}

/// `Σₜ ‖xᵗ − x̂ᵗ‖²`.
pub fn reconstruction_cost(x: &Tensor, x_hat: &Tensor) -> Result<f64> {
    if x.shape() != x_hat.shape() {
        return Err(MfmError::shape(format!(
            "reconstruction shape {:?} vs target {:?}",
            x_hat.shape(),
            x.shape()
        )));
    }
    Ok(x.data().iter().zip(x_hat.data()).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// `KL(N(μ, diag σ²) ‖ N(0, I)) = ½ Σ (μ² + σ² − 1 − log σ²)`.
pub fn kl_penalty(mu: &Tensor, log_var: &Tensor) -> Result<f64> {
    if mu.shape() != log_var.shape() {
        return Err(MfmError::shape("mean and log-variance shapes differ"));
    }
    Ok(kl_slices(mu.data(), log_var.data()))
}

fn kl_slices(mu: &[f64], lv: &[f64]) -> f64 {
    0.5 * mu.iter().zip(lv).map(|(m, l)| m * m + l.exp() - 1.0 - l).sum::<f64>()
}

/// Prediction cost of one sample and its gradient wrt the model output.
fn prediction_cost(task: Task, out: &[f64], label: &Label) -> Result<(f64, Vec<f64>)> {
    match task {
        Task::Classification { classes } => {
            let c = label
                .class()
                .filter(|&c| c < classes)
                .ok_or_else(|| MfmError::invalid(format!("label {label:?} is not a class below {classes}")))?;
            let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = out.iter().map(|v| (v - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            let loss = z.ln() + max - out[c];
            let mut g: Vec<f64> = exps.iter().map(|e| e / z).collect();
            g[c] -= 1.0;
            Ok((loss, g))
        }
        Task::Regression => {
            let r = out[0] - label.value();
            Ok((r * r, vec![2.0 * r]))
        }
    }
}

/// Loss and exact parameter gradient of one minibatch.
///
/// Draws (in this order) the encoder noise for Gaussian encoders and the prior
/// samples for the MMD term from `rng`.
pub fn batch_loss(
    model: &MfmModel,
    batch: &[&Sample],
    weights: &LossWeights,
    rng: &mut RngState,
    exec: Exec,
) -> Result<(LossBreakdown, MfmModel)> {
    let n = batch.len();
    if n < 2 {
        return Err(MfmError::invalid(format!("batch of {n}: the prior penalty needs at least two samples")));
    }
    weights.validate(model.specs.len())?;
    for s in batch {
        model.check_sample(&s.modalities)?;
    }
    let zdim = model.latent.total_z();
    let noise: Option<Vec<Vec<f64>>> = model.is_stochastic().then(|| (0..n).map(|_| rng.normal_vec(zdim)).collect());
    let use_prior = model.variant().hybrid() && weights.lambda > 0.0;
    let prior: Option<Vec<Vec<f64>>> =
        (use_prior && !model.is_stochastic()).then(|| (0..n).map(|_| rng.normal_vec(zdim)).collect());

    let passes = exec.map(n, |k| {
        let x: Vec<&[f64]> = batch[k].modalities.iter().map(Tensor::data).collect();
        model.forward_pass(&x, noise.as_ref().map(|v| v[k].as_slice()))
    });

    let nf = n as f64;
    let mut recon = vec![0.0; model.decoders.len()];
    let mut pred = 0.0;
    let mut grads_in: Vec<PassGrad> = Vec::with_capacity(n);
    for (k, pass) in passes.iter().enumerate() {
        let mut g = PassGrad::default();
        for (i, r) in pass.recon.iter().enumerate() {
            let x = batch[k].modalities[i].data();
            let w = weights.recon_weight(i);
            let mut c = 0.0;
            let mut d = Vec::with_capacity(r.len());
            for (a, b) in r.iter().zip(x) {
                c += (a - b) * (a - b);
                d.push(w * 2.0 * (a - b) / nf);
            }
            recon[i] += c / nf;
            g.recon.push(d);
        }
        let (c, d) = prediction_cost(model.task, &pass.prediction, &batch[k].label)?;
        pred += c / nf;
        g.prediction = d.into_iter().map(|v| weights.pred * v / nf).collect();
        grads_in.push(g);
    }

    let mut prior_penalty = 0.0;
    if use_prior {
        match model.config.prior {
            PriorMatching::Mmd => {
                let p = prior.as_ref().expect("prior drawn");
                let q: Vec<Vec<f64>> = passes.iter().map(|p| p.code.concat()).collect();
                let sigma = match weights.mmd_bandwidth {
                    BandwidthSpec::Fixed { value } => value,
                    BandwidthSpec::MedianHeuristic => median_sigma(p),
                };
                let (v, gq) = mmd_with_grad(&q, p, sigma)?;
                prior_penalty = v;
                for (g, dq) in grads_in.iter_mut().zip(gq) {
                    g.latent = dq.into_iter().map(|d| weights.lambda * d).collect();
                }
            }
            PriorMatching::Kl => {
                for (g, pass) in grads_in.iter_mut().zip(&passes) {
                    let gc = pass.gaussian.as_ref().expect("gaussian encoder");
                    prior_penalty += kl_slices(&gc.mean, &gc.log_var) / nf;
                    let s = weights.lambda / nf;
                    g.mean = gc.mean.iter().map(|m| s * m).collect();
                    g.log_var = gc.log_var.iter().map(|l| s * 0.5 * (l.exp() - 1.0)).collect();
                }
            }
        }
    }

    let breakdown = LossBreakdown {
        recon,
        pred,
        prior_penalty,
        total: 0.0,
    }
    .finish(weights);
    if !breakdown.total.is_finite() {
        return Err(MfmError::NonFinite(format!("batch loss {breakdown:?}")));
    }

    let chunks = n.div_ceil(GRAD_CHUNK);
    let partial = exec.map(chunks, |c| {
        let mut acc = model.zeros_like();
        for k in c * GRAD_CHUNK..((c + 1) * GRAD_CHUNK).min(n) {
            model.backward_pass(&passes[k], &grads_in[k], &mut acc);
        }
        acc
    });
    let mut partial = partial.into_iter();
    let mut grads = partial.next().expect("at least one chunk");
    for p in partial {
        grads.accumulate(&p);
    }
    Ok((breakdown, grads))
}

/// Loss over a whole dataset as one batch; prior draws and encoder noise
/// come from `seed`.
pub fn dataset_loss(model: &MfmModel, data: &Dataset, weights: &LossWeights, seed: u64, exec: Exec) -> Result<LossBreakdown> {
    let refs: Vec<&Sample> = data.samples.iter().collect();
    Ok(batch_loss(model, &refs, weights, &mut RngState::new(seed), exec)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    /// Generative stage first, then only the label path (`G_y`, `D`) on frozen
    /// encoders for `head_epochs` more epochs.
    pub two_stage: bool,
    pub head_epochs: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            epochs: 200,
            batch_size: 32,
            optimizer: AdamConfig::default(),
            two_stage: false,
            head_epochs: 50,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(MfmError::Config("batch_size must be at least 2".into()));
        }
        self.optimizer.validate()
    }
}

/// Shuffled minibatch index lists for one epoch. A trailing singleton is
/// folded into the previous batch.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut RngState) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    let mut batches: Vec<Vec<usize>> = idx.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
        let last = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(last);
    }
    batches
}

/// One optimizer step on one batch.
pub fn train_step(
    model: &mut MfmModel,
    state: &mut AdamState,
    batch: &[&Sample],
    weights: &LossWeights,
    rng: &mut RngState,
    exec: Exec,
    trainable: &dyn Fn(&str) -> bool,
) -> Result<LossBreakdown> {
    let (loss, grads) = batch_loss(model, batch, weights, rng, exec)?;
    adam_step_filtered(model, &grads, state, trainable)?;
    model.ensure_finite("parameters after update")?;
    model.steps_trained += 1;
    Ok(loss)
}

/// Minibatch Adam training. Returns one epoch-mean breakdown per epoch.
/// Any non-finite loss or parameter aborts with [`MfmError::Divergence`].
pub fn train(
    model: &mut MfmModel,
    data: &Dataset,
    weights: &LossWeights,
    schedule: &Schedule,
    rng: &mut RngState,
    exec: Exec,
) -> Result<Vec<LossBreakdown>> {
    if data.len() < 2 {
        return Err(MfmError::invalid("training needs at least two samples"));
    }
    schedule.validate()?;
    weights.validate(model.specs.len())?;
    if data.specs != model.specs || data.task != model.task {
        return Err(MfmError::invalid("dataset specs or task do not match the model"));
    }
    let mut history = Vec::new();
    let mut state = AdamState::new(model, schedule.optimizer);

    let stage_one = if schedule.two_stage {
        LossWeights {
            pred: 0.0,
            ..weights.clone()
        }
    } else {
        weights.clone()
    };
    run_epochs(model, data, &stage_one, weights, schedule.epochs, schedule.batch_size, &mut state, rng, exec, &|_| true, &mut history)?;

    if schedule.two_stage {
        let head_only = LossWeights {
            lambda: 0.0,
            recon: vec![0.0; model.specs.len()],
            pred: weights.pred,
            mmd_bandwidth: weights.mmd_bandwidth,
        };
        let label_path = |name: &str| name.starts_with("g_y") || name.starts_with("head");
        let mut head_state = AdamState::new(model, schedule.optimizer);
        run_epochs(
            model,
            data,
            &head_only,
            weights,
            schedule.head_epochs,
            schedule.batch_size,
            &mut head_state,
            rng,
            exec,
            &label_path,
            &mut history,
        )?;
    }
    Ok(history)
}

#[allow(clippy::too_many_arguments)]
fn run_epochs(
    model: &mut MfmModel,
    data: &Dataset,
    weights: &LossWeights,
    report: &LossWeights,
    epochs: usize,
    batch_size: usize,
    state: &mut AdamState,
    rng: &mut RngState,
    exec: Exec,
    trainable: &dyn Fn(&str) -> bool,
    history: &mut Vec<LossBreakdown>,
) -> Result<()> {
    for _ in 0..epochs {
        let epoch = history.len();
        let mut losses = Vec::new();
        for idx in epoch_batches(data.len(), batch_size, rng) {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &data.samples[i]).collect();
            let loss = train_step(model, state, &batch, weights, rng, exec, trainable).map_err(|e| match e {
                MfmError::NonFinite(detail) => MfmError::Divergence { epoch, detail },
                other => other,
            })?;
            losses.push(loss);
        }
        let mean = LossBreakdown::mean(&losses, report);
        log::debug!("epoch {epoch}: total {:.6}", mean.total);
        history.push(mean);
    }
    Ok(())
}

/// History CSV: `epoch,recon_<name>...,pred,prior_penalty,total`. Variants
/// without decoders leave the recon fields empty.
pub fn write_history_csv(path: &Path, names: &[String], history: &[LossBreakdown]) -> Result<()> {
    let mut out = String::from("epoch");
    for n in names {
        out.push_str(&format!(",recon_{n}"));
    }
    out.push_str(",pred,prior_penalty,total\n");
    for (e, b) in history.iter().enumerate() {
        out.push_str(&e.to_string());
        for i in 0..names.len() {
            out.push(',');
            if let Some(r) = b.recon.get(i) {
                out.push_str(&r.to_string());
            }
        }
        out.push_str(&format!(",{},{},{}\n", b.pred, b.prior_penalty, b.total));
    }
    let mut f = std::fs::File::create(path).map_err(|e| MfmError::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| MfmError::io(path, e))
}

/// Held-out quality of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Mean squared error per element, per modality; `None` without a decoder.
    pub recon_mse: Vec<Option<f64>>,
    /// Classification accuracy in [0, 1].
    pub accuracy: Option<f64>,
    /// Regression mean absolute error.
    pub mae: Option<f64>,
}

/// Reconstruction MSE and prediction quality with deterministic encoders.
pub fn evaluate(model: &MfmModel, data: &Dataset, exec: Exec) -> Result<EvalMetrics> {
    if data.is_empty() {
        return Err(MfmError::invalid("cannot evaluate on an empty dataset"));
    }
    let outs = exec.map(data.len(), |k| model.reconstruct(&data.samples[k].modalities));
    let outs = outs.into_iter().collect::<Result<Vec<_>>>()?;
    let recons: Vec<Vec<Tensor>> = outs.iter().map(|o| o.recon.clone()).collect();
    let preds: Vec<Vec<f64>> = outs.into_iter().map(|o| o.prediction.into_data()).collect();
    score(model.task, data, &recons, &preds, model.has_decoders())
}

/// Scores externally produced reconstructions/predictions against `data`.
pub fn score(
    task: Task,
    data: &Dataset,
    recons: &[Vec<Tensor>],
    preds: &[Vec<f64>],
    with_recon: bool,
) -> Result<EvalMetrics> {
    let n = data.len() as f64;
    let recon_mse = (0..data.specs.len())
        .map(|i| {
            if !with_recon {
                return Ok(None);
            }
            let mut acc = 0.0;
            for (s, r) in data.samples.iter().zip(recons) {
                acc += reconstruction_cost(&s.modalities[i], &r[i])? / data.specs[i].flat_len() as f64;
            }
            Ok(Some(acc / n))
        })
        .collect::<Result<Vec<_>>>()?;
    let (accuracy, mae) = match task {
        Task::Classification { .. } => {
            let hits = data
                .samples
                .iter()
                .zip(preds)
                .filter(|(s, p)| s.label.class() == Some(decide(task, p) as usize))
                .count();
            (Some(hits as f64 / n), None)
        }
        Task::Regression => {
            let e: f64 = data.samples.iter().zip(preds).map(|(s, p)| (p[0] - s.label.value()).abs()).sum();
            (None, Some(e / n))
        }
    };
    Ok(EvalMetrics { recon_mse, accuracy, mae })
}
