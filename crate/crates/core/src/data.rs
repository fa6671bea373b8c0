//! Multimodal datasets and their on-disk format.
//!
//! A dataset directory holds `manifest.json` (specs, task, count) and
//! `data.jsonl`, one record per line:
//!
//! ```text
//! {"id":0,"label":2,"modalities":{"m0":{"T":1,"d":16,"values":[...]}, ...}}
//! ```
//!
//! `values` is the `[T, d]` block flattened row-major (time-major). Floats
//! are written in shortest round-trip form, so read(write(x)) == x exactly.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MfmError, Result};
use crate::linalg::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RECORDS_FILE: &str = "data.jsonl";
pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalitySpec {
    pub name: String,
    pub dim: usize,
    /// Number of timesteps; 1 for static modalities.
    pub steps: usize,
}

impl ModalitySpec {
    pub fn new(name: impl Into<String>, dim: usize, steps: usize) -> Self {
        ModalitySpec {
            name: name.into(),
            dim,
            steps,
        }
    }

    pub fn flat_len(&self) -> usize {
        self.dim * self.steps
    }

    pub fn is_sequence(&self) -> bool {
        self.steps > 1
    }
}

pub fn validate_specs(specs: &[ModalitySpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(MfmError::Config("at least one modality is required".into()));
    }
    for (i, s) in specs.iter().enumerate() {
        if s.dim == 0 || s.steps == 0 {
            return Err(MfmError::Config(format!("modality '{}' has a zero dimension", s.name)));
        }
        if s.name.is_empty() || s.name.contains(',') {
            return Err(MfmError::Config(format!("invalid modality name '{}'", s.name)));
        }
        if specs[..i].iter().any(|o| o.name == s.name) {
            return Err(MfmError::Config(format!("duplicate modality name '{}'", s.name)));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Task {
    Classification { classes: usize },
    Regression,
}

impl Task {
    pub fn output_dim(&self) -> usize {
        match self {
            Task::Classification { classes } => *classes,
            Task::Regression => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Class(usize),
    Value(f64),
}

impl Label {
    pub fn class(&self) -> Option<usize> {
        match self {
            Label::Class(c) => Some(*c),
            Label::Value(_) => None,
        }
    }

    pub fn value(&self) -> f64 {
        match self {
            Label::Class(c) => *c as f64,
            Label::Value(v) => *v,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub label: Label,
    /// One `[steps, dim]` tensor per modality, in spec order.
    pub modalities: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub specs: Vec<ModalitySpec>,
    pub task: Task,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn modality_index(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        validate_specs(&self.specs)?;
        if let Task::Classification { classes } = self.task {
            if classes < 2 {
                return Err(MfmError::Config("classification needs at least two classes".into()));
            }
        }
        for s in &self.samples {
            check_sample(&self.specs, &s.modalities)?;
            match (self.task, s.label) {
                (Task::Classification { classes }, Label::Class(c)) if c < classes => {}
                (Task::Regression, l) if l.value().is_finite() => {}
                (t, l) => {
                    return Err(MfmError::invalid(format!(
                        "sample {} has label {l:?} incompatible with {t:?}",
                        s.id
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            specs: self.specs.clone(),
            task: self.task,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// First `at` samples and the rest.
    pub fn split_at(&self, at: usize) -> (Dataset, Dataset) {
        let at = at.min(self.len());
        let head: Vec<usize> = (0..at).collect();
        let tail: Vec<usize> = (at..self.len()).collect();
        (self.subset(&head), self.subset(&tail))
    }

    /// Deterministic holdout: the trailing `fraction` of samples.
    pub fn holdout_split(&self, fraction: f64) -> (Dataset, Dataset) {
        let n_test = ((self.len() as f64) * fraction).round() as usize;
        self.split_at(self.len() - n_test.min(self.len()))
    }
}

pub fn check_sample(specs: &[ModalitySpec], x: &[Tensor]) -> Result<()> {
    if x.len() != specs.len() {
        return Err(MfmError::shape(format!(
            "sample has {} modalities, expected {}",
            x.len(),
            specs.len()
        )));
    }
    for (t, s) in x.iter().zip(specs) {
        if t.shape() != [s.steps, s.dim] {
            return Err(MfmError::shape(format!(
                "modality '{}' has shape {:?}, expected [{}, {}]",
                s.name,
                t.shape(),
                s.steps,
                s.dim
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub count: usize,
    pub task: Task,
    pub modalities: Vec<ModalitySpec>,
    pub records: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Block {
    #[serde(rename = "T")]
    steps: usize,
    d: usize,
    values: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: u64,
    label: Label,
    modalities: BTreeMap<String, Block>,
}

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    ds.validate()?;
    fs::create_dir_all(dir).map_err(|e| MfmError::io(dir, e))?;
    let manifest = Manifest {
        format: "mfm-dataset".into(),
        version: DATASET_FORMAT_VERSION,
        count: ds.len(),
        task: ds.task,
        modalities: ds.specs.clone(),
        records: RECORDS_FILE.into(),
    };
    let mpath = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| MfmError::Format(e.to_string()))?;
    fs::write(&mpath, text + "\n").map_err(|e| MfmError::io(&mpath, e))?;

    let rpath = dir.join(RECORDS_FILE);
    let file = fs::File::create(&rpath).map_err(|e| MfmError::io(&rpath, e))?;
    let mut w = BufWriter::new(file);
    for s in &ds.samples {
        let modalities = ds
            .specs
            .iter()
            .zip(&s.modalities)
            .map(|(spec, t)| {
                (
                    spec.name.clone(),
                    Block {
                        steps: spec.steps,
                        d: spec.dim,
                        values: t.data().to_vec(),
                    },
                )
            })
            .collect();
        let rec = Record {
            id: s.id,
            label: s.label,
            modalities,
        };
        serde_json::to_writer(&mut w, &rec).map_err(|e| MfmError::Format(e.to_string()))?;
        w.write_all(b"\n").map_err(|e| MfmError::io(&rpath, e))?;
    }
    w.flush().map_err(|e| MfmError::io(&rpath, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| MfmError::io(&mpath, e))?;
    let m: Manifest = serde_json::from_str(&text)
        .map_err(|e| MfmError::Format(format!("{}: {e}", mpath.display())))?;
    if m.format != "mfm-dataset" || m.version != DATASET_FORMAT_VERSION {
        return Err(MfmError::Format(format!(
            "unsupported dataset format {} v{}",
            m.format, m.version
        )));
    }
    Ok(m)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let m = read_manifest(dir)?;
    validate_specs(&m.modalities)?;
    let rpath = dir.join(&m.records);
    let file = fs::File::open(&rpath).map_err(|e| MfmError::io(&rpath, e))?;
    let mut samples = Vec::with_capacity(m.count);
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| MfmError::io(&rpath, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut rec: Record = serde_json::from_str(&line)
            .map_err(|e| MfmError::Format(format!("{} line {}: {e}", rpath.display(), lineno + 1)))?;
        if rec.modalities.len() != m.modalities.len() {
            return Err(MfmError::Format(format!(
                "record {} has {} modalities, manifest lists {}",
                rec.id,
                rec.modalities.len(),
                m.modalities.len()
            )));
        }
        let mut mods = Vec::with_capacity(m.modalities.len());
        for spec in &m.modalities {
            let b = rec.modalities.remove(&spec.name).ok_or_else(|| {
                MfmError::Format(format!("record {} lacks modality '{}'", rec.id, spec.name))
            })?;
            if b.steps != spec.steps || b.d != spec.dim {
                return Err(MfmError::Format(format!(
                    "record {} modality '{}' is [{}, {}], manifest says [{}, {}]",
                    rec.id, spec.name, b.steps, b.d, spec.steps, spec.dim
                )));
            }
            mods.push(Tensor::new(vec![b.steps, b.d], b.values)?);
        }
        let label = match (m.task, rec.label) {
            (Task::Regression, Label::Class(c)) => Label::Value(c as f64),
            (_, l) => l,
        };
        samples.push(Sample {
            id: rec.id,
            label,
            modalities: mods,
        });
    }
    if samples.len() != m.count {
        return Err(MfmError::Format(format!(
            "manifest count {} but {} records",
            m.count,
            samples.len()
        )));
    }
    let ds = Dataset {
        specs: m.modalities,
        task: m.task,
        samples,
    };
    ds.validate()?;
    Ok(ds)
}
