//! Interpretation of a trained model.
//!
//! * Information ratios `rᵢ = HSIC_norm(F_y, X̂ᵢ) / HSIC_norm(F_aᵢ, X̂ᵢ)`:
//!   how much of the generated modality `i` is explained by the
//!   discriminative factor relative to its own generative factor. Sequences
//!   are averaged over time before the kernels are built.
//! * Gradient flow: `flow[t] = ‖∂x̂ᵢᵗ/∂f_y‖_F²` for every timestep of a
//!   generated sequence.

use std::fs;
use std::io::{BufWriter, Write as _};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{MfmError, Result};
use crate::kernel::{hsic_norm_checked, time_average, BandwidthSpec};
use crate::linalg::{RngState, Tensor};
use crate::model::{MfmModel, SeqDecoder};
use crate::net::Params;
use crate::parallel::Exec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InterpretConfig {
    pub bandwidth: BandwidthSpec,
    /// Largest number of samples entering the Gram matrices.
    pub max_samples: usize,
    /// Seed of the stratified subsample.
    pub seed: u64,
    /// Samples (from the start of the dataset) to compute gradient flow for.
    pub flow_samples: usize,
}

impl Default for InterpretConfig {
    fn default() -> Self {
        InterpretConfig {
            bandwidth: BandwidthSpec::default(),
            max_samples: 1000,
            seed: 0,
            flow_samples: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioRecord {
    pub modality: String,
    /// `None` when the denominator is degenerate.
    pub ratio: Option<f64>,
    pub numerator: f64,
    pub denominator: Option<f64>,
    pub flag: RatioFlag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RatioFlag {
    Ok,
    Undefined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowRecord {
    pub sample: u64,
    pub modality: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpretationReport {
    pub samples_used: usize,
    pub ratios: Vec<RatioRecord>,
    pub flows: Vec<FlowRecord>,
}

/// Deterministic label-stratified subsample of at most `cap` indices
/// (sorted). Each class keeps a share proportional to its size.
pub fn stratified_subsample(data: &Dataset, cap: usize, seed: u64) -> Vec<usize> {
    let n = data.len();
    if n <= cap {
        return (0..n).collect();
    }
    let mut rng = RngState::new(seed);
    let mut groups: std::collections::BTreeMap<u64, Vec<usize>> = std::collections::BTreeMap::new();
    for (i, s) in data.samples.iter().enumerate() {
        groups.entry(s.label.value().to_bits()).or_default().push(i);
    }
    let mut picked = Vec::with_capacity(cap);
    let mut remainders = Vec::new();
    for idx in groups.values_mut() {
        rng.shuffle(idx);
        let exact = idx.len() as f64 * cap as f64 / n as f64;
        let take = exact.floor() as usize;
        picked.extend_from_slice(&idx[..take]);
        remainders.push((exact - take as f64, idx[take..].to_vec()));
    }
    // hand out the rounding slack to the largest remainders, ties by order
    let mut order: Vec<usize> = (0..remainders.len()).collect();
    order.sort_by(|&a, &b| remainders[b].0.total_cmp(&remainders[a].0));
    for k in order {
        if picked.len() >= cap {
            break;
        }
        if let Some(&i) = remainders[k].1.first() {
            picked.push(i);
        }
    }
    picked.sort_unstable();
    picked
}

/// Information ratios for every modality (full model or the variant with a
/// shared generative factor).
pub fn info_ratios(model: &MfmModel, data: &Dataset, cfg: &InterpretConfig, exec: Exec) -> Result<(Vec<RatioRecord>, usize)> {
    if !model.variant().factorized() || !model.has_decoders() {
        return Err(MfmError::invalid(format!(
            "information ratios need separate discriminative and generative factors; {} has none",
            model.variant()
        )));
    }
    cfg.bandwidth.validate()?;
    let idx = stratified_subsample(data, cfg.max_samples, cfg.seed);
    if idx.len() < 3 {
        return Err(MfmError::invalid("information ratios need at least three samples"));
    }
    let per_sample = exec.map(idx.len(), |k| -> Result<_> {
        let x = &data.samples[idx[k]].modalities;
        let f = model.factorize(&model.encode(x)?)?;
        let d = model.decode(&f)?;
        let avg = d.recon.iter().map(time_average).collect::<Result<Vec<Tensor>>>()?;
        Ok((f, avg))
    });
    let per_sample = per_sample.into_iter().collect::<Result<Vec<_>>>()?;
    let fy: Vec<&[f64]> = per_sample.iter().map(|(f, _)| f.f_y.as_slice()).collect();

    let mut out = Vec::with_capacity(model.specs.len());
    for (i, spec) in model.specs.iter().enumerate() {
        let block = if model.g_a.len() == model.specs.len() { i } else { 0 };
        let fa: Vec<&[f64]> = per_sample.iter().map(|(f, _)| f.f_a[block].as_slice()).collect();
        let xh: Vec<&[f64]> = per_sample.iter().map(|(_, a)| a[i].data()).collect();
        let numerator = hsic_norm_checked(&fy, &xh, cfg.bandwidth)?.unwrap_or_else(|| {
            log::warn!("modality '{}': constant f_y or reconstruction, numerator set to 0", spec.name);
            0.0
        });
        let denominator = hsic_norm_checked(&fa, &xh, cfg.bandwidth)?.filter(|d| *d > 1e-12);
        let (ratio, flag) = match denominator {
            Some(d) => (Some(numerator / d), RatioFlag::Ok),
            None => {
                log::warn!("modality '{}': degenerate denominator, ratio undefined", spec.name);
                (None, RatioFlag::Undefined)
            }
        };
        out.push(RatioRecord {
            modality: spec.name.clone(),
            ratio,
            numerator,
            denominator,
            flag,
        });
    }
    Ok((out, idx.len()))
}

/// `‖∂y_t/∂input[fy]‖_F²` per timestep of a decoder output, by one reverse
/// pass per output coordinate.
pub fn decoder_flow(decoder: &SeqDecoder, input: &[f64], fy: Range<usize>, steps: Range<usize>, dim: usize) -> Vec<f64> {
    let (y, tape) = decoder.run(input);
    let mut scratch = decoder.zeros_like();
    steps
        .map(|t| {
            let mut acc = 0.0;
            for j in 0..dim {
                let mut dout = vec![0.0; y.len()];
                dout[t * dim + j] = 1.0;
                let din = decoder.backprop(&tape, &dout, &mut scratch);
                acc += din[fy.clone()].iter().map(|v| v * v).sum::<f64>();
            }
            acc
        })
        .collect()
}

/// Gradient flow of modality `i` over all of its timesteps.
pub fn gradient_flow(model: &MfmModel, x: &[Tensor], i: usize) -> Result<Vec<f64>> {
    let steps = model
        .specs
        .get(i)
        .ok_or_else(|| MfmError::invalid(format!("no modality {i}")))?
        .steps;
    gradient_flow_steps(model, x, i, 0..steps)
}

/// Gradient flow of modality `i` restricted to `steps`.
pub fn gradient_flow_steps(model: &MfmModel, x: &[Tensor], i: usize, steps: Range<usize>) -> Result<Vec<f64>> {
    let spec = model
        .specs
        .get(i)
        .ok_or_else(|| MfmError::invalid(format!("no modality {i}")))?;
    if steps.is_empty() || steps.end > spec.steps {
        return Err(MfmError::invalid(format!(
            "timestep range {steps:?} is empty or outside 0..{}",
            spec.steps
        )));
    }
    let fy = model
        .decoder_fy_block(i)
        .ok_or_else(|| MfmError::invalid(format!("variant {} has no f_y path into decoder {i}", model.variant())))?;
    let f = model.factorize(&model.encode(x)?)?;
    let input = model.decoder_input(i, &f);
    let flow = decoder_flow(&model.decoders[i], &input, fy, steps, spec.dim);
    if flow.iter().any(|v| !v.is_finite()) {
        return Err(MfmError::NonFinite(format!("gradient flow of '{}'", spec.name)));
    }
    Ok(flow)
}

pub fn interpret(model: &MfmModel, data: &Dataset, cfg: &InterpretConfig, exec: Exec) -> Result<InterpretationReport> {
    let (ratios, samples_used) = info_ratios(model, data, cfg, exec)?;
    let n = cfg.flow_samples.min(data.len());
    let flows = exec.map(n * model.specs.len(), |k| -> Result<FlowRecord> {
        let (s, i) = (k / model.specs.len(), k % model.specs.len());
        let sample = &data.samples[s];
        Ok(FlowRecord {
            sample: sample.id,
            modality: model.specs[i].name.clone(),
            values: gradient_flow(model, &sample.modalities, i)?,
        })
    });
    Ok(InterpretationReport {
        samples_used,
        ratios,
        flows: flows.into_iter().collect::<Result<_>>()?,
    })
}

/// One JSON object per modality: `{"modality", "ratio", "numerator",
/// "denominator", "flag"}`.
pub fn write_ratios(path: &Path, ratios: &[RatioRecord]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| MfmError::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in ratios {
        let line = serde_json::to_string(r).map_err(|e| MfmError::Format(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| MfmError::io(path, e))?;
    }
    w.flush().map_err(|e| MfmError::io(path, e))
}

/// `flow_<sample>.csv` per sample in `dir`, columns `t,modality,value`.
pub fn write_flows(dir: &Path, flows: &[FlowRecord]) -> Result<Vec<std::path::PathBuf>> {
    let mut by_sample: std::collections::BTreeMap<u64, String> = std::collections::BTreeMap::new();
    for f in flows {
        let text = by_sample.entry(f.sample).or_insert_with(|| "t,modality,value\n".to_string());
        for (t, v) in f.values.iter().enumerate() {
            text.push_str(&format!("{t},{},{v}\n", f.modality));
        }
    }
    let mut written = Vec::new();
    for (id, text) in by_sample {
        let p = dir.join(format!("flow_{id}.csv"));
        fs::write(&p, text).map_err(|e| MfmError::io(&p, e))?;
        written.push(p);
    }
    Ok(written)
}
