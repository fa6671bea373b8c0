//! Synthetic multimodal data with known factors.
//!
//! ```text
//! y ~ U{0..C}      u = E[y] + σ_u·ε      sᵢ ~ N(0, I)
//! xᵢᵗ = φ(Aᵢ u + Bᵢ sᵢ + drift·t) + σ·ε      φ = tanh or identity
//! ```
//!
//! `E`, `Aᵢ`, `Bᵢ` are drawn once from the seed; every sample then uses its own
//! stream (`seed ^ index` after a fixed offset), so generation is parallel and
//! the output does not depend on the thread count.

use std::fs;
use std::io::{BufWriter, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Label, ModalitySpec, Sample, Task};
use crate::error::{MfmError, Result};
use crate::linalg::{matvec, RngState, Tensor};
use crate::model::{decide, Decoded, FactorCode, MfmModel};
use crate::parallel::Exec;

pub const TRUTH_FILE: &str = "truth.jsonl";

/// Offset separating the per-sample streams from the structural one.
const SAMPLE_STREAM: u64 = 0x5EED_0000_0000_0001;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub classes: usize,
    /// Feature dimension per modality (its length is the modality count).
    pub dims: Vec<usize>,
    /// Timesteps per modality; empty means 1 for all.
    pub steps: Vec<usize>,
    /// Dimension of the shared code `u`.
    pub embed_dim: usize,
    pub style_dim: usize,
    /// Scale of the class embedding `E`.
    pub embed_scale: f64,
    /// Observation noise σ.
    pub noise: f64,
    /// Spread σ_u of `u` around its class embedding.
    pub code_noise: f64,
    pub nonlinear: bool,
    pub drift: f64,
    pub seed: u64,
    /// Training samples.
    pub n: usize,
    /// Held-out samples generated after the training ones.
    pub n_test: usize,
    /// `[a, b]`: modality `b` is an exact copy of modality `a`.
    pub duplicate: Option<[usize; 2]>,
    /// Modalities replaced by pure N(0, 1) noise.
    pub noise_modalities: Vec<usize>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 4,
            dims: vec![16, 16],
            steps: Vec::new(),
            embed_dim: 4,
            style_dim: 2,
            embed_scale: 2.0,
            noise: 0.1,
            code_noise: 0.1,
            nonlinear: false,
            drift: 0.0,
            seed: 0,
            n: 1000,
            n_test: 0,
            duplicate: None,
            noise_modalities: Vec::new(),
        }
    }
}

impl SynthConfig {
    pub fn modalities(&self) -> usize {
        self.dims.len()
    }

    pub fn steps_of(&self, i: usize) -> usize {
        if self.steps.is_empty() {
            1
        } else {
            self.steps[i]
        }
    }

    pub fn specs(&self) -> Vec<ModalitySpec> {
        (0..self.modalities())
            .map(|i| ModalitySpec::new(format!("m{i}"), self.dims[i], self.steps_of(i)))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(MfmError::Config(msg));
        if self.classes < 2 {
            return bad(format!("classes must be at least 2, got {}", self.classes));
        }
        if self.dims.is_empty() || self.dims.contains(&0) {
            return bad("dims must list at least one positive dimension".into());
        }
        if !self.steps.is_empty() && (self.steps.len() != self.dims.len() || self.steps.contains(&0)) {
            return bad("steps must be empty or one positive entry per modality".into());
        }
        if self.embed_dim == 0 || self.style_dim == 0 {
            return bad("embed_dim and style_dim must be positive".into());
        }
        for v in [self.noise, self.code_noise, self.embed_scale] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("noise levels and scales must be finite and >= 0: {self:?}"));
            }
        }
        if !self.drift.is_finite() {
            return bad("drift must be finite".into());
        }
        if self.n + self.n_test == 0 {
            return bad("nothing to generate".into());
        }
        let m = self.modalities();
        if let Some([a, b]) = self.duplicate {
            if a >= m || b >= m || a == b {
                return bad(format!("duplicate pair {a},{b} out of range"));
            }
            if self.dims[a] != self.dims[b] || self.steps_of(a) != self.steps_of(b) {
                return bad("duplicated modalities must share dim and steps".into());
            }
        }
        if self.noise_modalities.iter().any(|&i| i >= m) {
            return bad("noise modality index out of range".into());
        }
        Ok(())
    }
}

/// Generating factors of one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub id: u64,
    pub label: usize,
    pub shared: Vec<f64>,
    pub styles: Vec<Vec<f64>>,
}

/// The fixed random maps of a generator.
#[derive(Debug, Clone)]
struct Structure {
    embedding: Vec<Vec<f64>>,
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
}

impl Structure {
    fn draw(cfg: &SynthConfig) -> Self {
        let mut rng = RngState::new(cfg.seed);
        let k = cfg.embed_dim;
        let embedding = (0..cfg.classes)
            .map(|_| rng.normal_vec(k).into_iter().map(|v| v * cfg.embed_scale).collect())
            .collect();
        let scaled = |rng: &mut RngState, n: usize, fan_in: usize| -> Vec<f64> {
            let s = 1.0 / (fan_in as f64).sqrt();
            rng.normal_vec(n).into_iter().map(|v| v * s).collect()
        };
        let mut a = Vec::new();
        let mut b = Vec::new();
        for &d in &cfg.dims {
            a.push(scaled(&mut rng, d * k, k));
            b.push(scaled(&mut rng, d * cfg.style_dim, cfg.style_dim));
        }
        Structure { embedding, a, b }
    }
}

fn sample_one(cfg: &SynthConfig, st: &Structure, index: usize) -> (Sample, GroundTruth) {
    let mut rng = RngState::for_worker(cfg.seed.wrapping_add(SAMPLE_STREAM), index as u64);
    let y = rng.below(cfg.classes);
    let u: Vec<f64> = st.embedding[y].iter().map(|e| e + cfg.code_noise * rng.normal()).collect();
    let m = cfg.modalities();
    let styles: Vec<Vec<f64>> = (0..m).map(|_| rng.normal_vec(cfg.style_dim)).collect();
    let mut modalities = Vec::with_capacity(m);
    for i in 0..m {
        let (d, steps) = (cfg.dims[i], cfg.steps_of(i));
        let mut values = Vec::with_capacity(d * steps);
        if cfg.noise_modalities.contains(&i) {
            values = rng.normal_vec(d * steps);
        } else {
            let au = matvec(&st.a[i], &u, d, cfg.embed_dim);
            let bs = matvec(&st.b[i], &styles[i], d, cfg.style_dim);
            for t in 0..steps {
                for j in 0..d {
                    let pre = au[j] + bs[j] + cfg.drift * t as f64;
                    let clean = if cfg.nonlinear { pre.tanh() } else { pre };
                    values.push(clean + cfg.noise * rng.normal());
                }
            }
        }
        modalities.push(Tensor::new(vec![steps, d], values).expect("finite synthetic values"));
    }
    if let Some([a, b]) = cfg.duplicate {
        modalities[b] = modalities[a].clone();
    }
    let id = index as u64;
    (
        Sample {
            id,
            label: Label::Class(y),
            modalities,
        },
        GroundTruth {
            id,
            label: y,
            shared: u,
            styles,
        },
    )
}

/// Generated data: `n` training samples followed by `n_test` held-out ones.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub train: Dataset,
    pub test: Dataset,
    pub train_truth: Vec<GroundTruth>,
    pub test_truth: Vec<GroundTruth>,
}

pub fn generate_dataset(cfg: &SynthConfig) -> Result<SynthData> {
    generate_dataset_with(cfg, Exec::default())
}

pub fn generate_dataset_with(cfg: &SynthConfig, exec: Exec) -> Result<SynthData> {
    cfg.validate()?;
    let st = Structure::draw(cfg);
    let all = exec.map(cfg.n + cfg.n_test, |k| sample_one(cfg, &st, k));
    let (samples, truth): (Vec<Sample>, Vec<GroundTruth>) = all.into_iter().unzip();
    let task = Task::Classification { classes: cfg.classes };
    let specs = cfg.specs();
    let mut train_s = samples;
    let test_s = train_s.split_off(cfg.n);
    let mut train_truth = truth;
    let test_truth = train_truth.split_off(cfg.n);
    Ok(SynthData {
        train: Dataset {
            specs: specs.clone(),
            task,
            samples: train_s,
        },
        test: Dataset {
            specs,
            task,
            samples: test_s,
        },
        train_truth,
        test_truth,
    })
}

pub fn write_truth(path: &Path, truth: &[GroundTruth]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| MfmError::io(path, e))?;
    let mut w = BufWriter::new(f);
    for t in truth {
        let line = serde_json::to_string(t).map_err(|e| MfmError::Format(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| MfmError::io(path, e))?;
    }
    w.flush().map_err(|e| MfmError::io(path, e))
}

pub fn read_truth(path: &Path) -> Result<Vec<GroundTruth>> {
    let text = fs::read_to_string(path).map_err(|e| MfmError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| MfmError::Format(format!("{}: {e}", path.display()))))
        .collect()
}

/// Multinomial logistic regression on standardized features, trained by
/// full-batch gradient descent. Shares no code with the model under test.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    classes: usize,
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `[classes, dim + 1]`, bias last.
    weights: Vec<f64>,
}

impl LinearProbe {
    pub fn fit(features: &[Vec<f64>], labels: &[usize], classes: usize, epochs: usize, lr: f64) -> Result<Self> {
        let n = features.len();
        if n == 0 || n != labels.len() {
            return Err(MfmError::invalid("probe needs matching non-empty features and labels"));
        }
        let d = features[0].len();
        let mut mean = vec![0.0; d];
        for x in features {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v / n as f64;
            }
        }
        let mut scale = vec![0.0; d];
        for x in features {
            for j in 0..d {
                scale[j] += (x[j] - mean[j]).powi(2) / n as f64;
            }
        }
        for s in &mut scale {
            *s = if *s > 1e-12 { 1.0 / s.sqrt() } else { 0.0 };
        }
        let mut probe = LinearProbe {
            classes,
            mean,
            scale,
            weights: vec![0.0; classes * (d + 1)],
        };
        let z: Vec<Vec<f64>> = features.iter().map(|x| probe.standardize(x)).collect();
        let w = d + 1;
        for _ in 0..epochs {
            let mut grad = vec![0.0; classes * w];
            for (x, &y) in z.iter().zip(labels) {
                let p = softmax(&probe.logits_std(x));
                for c in 0..classes {
                    let g = (p[c] - f64::from(u8::from(c == y))) / n as f64;
                    for j in 0..d {
                        grad[c * w + j] += g * x[j];
                    }
                    grad[c * w + d] += g;
                }
            }
            for (p, g) in probe.weights.iter_mut().zip(&grad) {
                *p -= lr * g;
            }
        }
        Ok(probe)
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) * s).collect()
    }

    fn logits_std(&self, z: &[f64]) -> Vec<f64> {
        let w = z.len() + 1;
        (0..self.classes)
            .map(|c| {
                let row = &self.weights[c * w..(c + 1) * w];
                row[..z.len()].iter().zip(z).map(|(a, b)| a * b).sum::<f64>() + row[z.len()]
            })
            .collect()
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let l = self.logits_std(&self.standardize(x));
        decide(Task::Classification { classes: self.classes }, &l) as usize
    }

    pub fn accuracy(&self, features: &[Vec<f64>], labels: &[usize]) -> f64 {
        let hits = features.iter().zip(labels).filter(|(x, &y)| self.predict(x) == y).count();
        hits as f64 / features.len().max(1) as f64
    }
}

fn softmax(l: &[f64]) -> Vec<f64> {
    let max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = l.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn labels_of(data: &Dataset) -> Result<Vec<usize>> {
    data.samples
        .iter()
        .map(|s| s.label.class().ok_or_else(|| MfmError::invalid("probe needs class labels")))
        .collect()
}

/// Probe on the concatenation of every modality.
pub fn fit_joint_probe(data: &Dataset, epochs: usize, lr: f64) -> Result<LinearProbe> {
    let Task::Classification { classes } = data.task else {
        return Err(MfmError::invalid("probe needs a classification dataset"));
    };
    let x: Vec<Vec<f64>> = data
        .samples
        .iter()
        .map(|s| s.modalities.iter().flat_map(|t| t.data().iter().copied()).collect())
        .collect();
    LinearProbe::fit(&x, &labels_of(data)?, classes, epochs, lr)
}

/// One probe per modality, each on that modality alone.
pub fn fit_modality_probes(data: &Dataset, epochs: usize, lr: f64) -> Result<Vec<LinearProbe>> {
    let Task::Classification { classes } = data.task else {
        return Err(MfmError::invalid("probe needs a classification dataset"));
    };
    let labels = labels_of(data)?;
    (0..data.specs.len())
        .map(|i| {
            let x: Vec<Vec<f64>> = data.samples.iter().map(|s| s.modalities[i].data().to_vec()).collect();
            LinearProbe::fit(&x, &labels, classes, epochs, lr)
        })
        .collect()
}

/// Decodes `f_y` of `a` combined with the generative factors of `b`.
pub fn swap_decode(model: &MfmModel, a: &Sample, b: &Sample) -> Result<Decoded> {
    if model.steps_trained == 0 {
        return Err(MfmError::Untrained("swap_oracle needs a trained model".into()));
    }
    if !model.variant().factorized() {
        return Err(MfmError::invalid(format!(
            "variant {} has no separate discriminative and generative factors",
            model.variant()
        )));
    }
    let fa = model.factorize(&model.encode(&a.modalities)?)?;
    let fb = model.factorize(&model.encode(&b.modalities)?)?;
    model.decode(&FactorCode { f_y: fa.f_y, f_a: fb.f_a })
}

/// Per modality: does the probe label the hybrid reconstruction as `a`'s label?
pub fn swap_oracle(model: &MfmModel, probes: &[LinearProbe], a: &Sample, b: &Sample) -> Result<Vec<bool>> {
    let target = a.label.class().ok_or_else(|| MfmError::invalid("swap_oracle needs class labels"))?;
    if probes.len() != model.specs.len() {
        return Err(MfmError::invalid("one probe per modality is required"));
    }
    let hybrid = swap_decode(model, a, b)?;
    Ok(hybrid.recon.iter().zip(probes).map(|(x, p)| p.predict(x.data()) == target).collect())
}

/// Ridge-regularized least-squares `R²` of predicting `y` from `x` (with an
/// intercept), averaged over target dimensions.
pub fn linear_r2(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<f64> {
    let n = x.len();
    if n < 2 || n != y.len() {
        return Err(MfmError::invalid("linear_r2 needs at least two paired rows"));
    }
    let d = x[0].len() + 1;
    let row = |i: usize| -> Vec<f64> {
        let mut r = x[i].clone();
        r.push(1.0);
        r
    };
    let mut xtx = vec![0.0; d * d];
    let k = y[0].len();
    let mut xty = vec![0.0; d * k];
    for i in 0..n {
        let r = row(i);
        for a in 0..d {
            for b in 0..d {
                xtx[a * d + b] += r[a] * r[b];
            }
            for c in 0..k {
                xty[a * k + c] += r[a] * y[i][c];
            }
        }
    }
    for a in 0..d {
        xtx[a * d + a] += 1e-8 * n as f64;
    }
    let beta = solve_spd(&xtx, &xty, d, k)?;
    let mut r2 = 0.0;
    for c in 0..k {
        let mean = y.iter().map(|v| v[c]).sum::<f64>() / n as f64;
        let (mut ss_res, mut ss_tot) = (0.0, 0.0);
        for i in 0..n {
            let r = row(i);
            let pred: f64 = (0..d).map(|a| r[a] * beta[a * k + c]).sum();
            ss_res += (y[i][c] - pred).powi(2);
            ss_tot += (y[i][c] - mean).powi(2);
        }
        r2 += if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 0.0 };
    }
    Ok(r2 / k as f64)
}

/// Cholesky solve of `A X = B` for symmetric positive definite `A`.
fn solve_spd(a: &[f64], b: &[f64], d: usize, k: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let s: f64 = a[i * d + j] - (0..j).map(|p| l[i * d + p] * l[j * d + p]).sum::<f64>();
            if i == j {
                if s <= 0.0 {
                    return Err(MfmError::NonFinite("normal equations are not positive definite".into()));
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    let mut x = b.to_vec();
    for c in 0..k {
        for i in 0..d {
            let s: f64 = (0..i).map(|p| l[i * d + p] * x[p * k + c]).sum();
            x[i * k + c] = (x[i * k + c] - s) / l[i * d + i];
        }
        for i in (0..d).rev() {
            let s: f64 = (i + 1..d).map(|p| l[p * d + i] * x[p * k + c]).sum();
            x[i * k + c] = (x[i * k + c] - s) / l[i * d + i];
        }
    }
    Ok(x)
}
