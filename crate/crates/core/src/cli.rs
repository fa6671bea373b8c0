//! Command-line front end: `synth`, `train`, `eval`, `interpret`, `ablate`.
//!
//! Every command reads an optional TOML [`RunConfig`] (unknown keys are
//! rejected) and is fully determined by `(config, seed)` apart from the
//! `wall_clock_s` field of its metrics record.
//!
//! A `--dataset` path is either a dataset directory (with `manifest.json`) or
//! a directory holding `train/` and optionally `test/`, as written by
//! `synth`. Training and surrogate fitting use `train/`; evaluation,
//! interpretation and ablation scores use `test/` when present.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::data::{read_dataset, read_manifest, write_dataset, Dataset, ModalitySpec, MANIFEST_FILE};
use crate::error::{MfmError, Result};
use crate::interpret::{interpret, write_flows, write_ratios, InterpretConfig, InterpretationReport};
use crate::linalg::RngState;
use crate::model::{MfmModel, ModelConfig, ModelVariant};
use crate::net::Params;
use crate::objective::{evaluate, train, write_history_csv, EvalMetrics, LossBreakdown, LossWeights, Schedule};
use crate::parallel::Exec;
use crate::surrogate::{evaluate_masked, train_surrogate, MissingMask, SurrogateConfig};
use crate::synth::{generate_dataset_with, write_truth, SynthConfig, TRUTH_FILE};

pub const METRICS_SCHEMA_VERSION: u32 = 1;
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.csv";
pub const RATIOS_FILE: &str = "ratios.jsonl";
pub const ABLATION_FILE: &str = "ablation.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Use the rayon pool for data-parallel work.
    pub parallel: bool,
    /// Expected modality layout; checked against the dataset when given.
    pub modalities: Option<Vec<ModalitySpec>>,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub train: Schedule,
    pub surrogate: SurrogateConfig,
    pub interpret: InterpretConfig,
    pub synth: SynthConfig,
    pub ablate: AblateConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            parallel: true,
            modalities: None,
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            train: Schedule::default(),
            surrogate: SurrogateConfig::default(),
            interpret: InterpretConfig::default(),
            synth: SynthConfig::default(),
            ablate: AblateConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub seeds: Vec<u64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig { seeds: vec![0, 1, 2, 3, 4] }
    }
}

/// Fallbacks for the path flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| MfmError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| MfmError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let m = match &self.modalities {
            Some(specs) => {
                crate::data::validate_specs(specs)?;
                specs.len()
            }
            None => self.loss.recon.len(),
        };
        self.loss.validate(m)?;
        self.train.validate()?;
        self.surrogate.validate()?;
        self.interpret.bandwidth.validate()?;
        self.synth.validate()?;
        if self.ablate.seeds.is_empty() {
            return Err(MfmError::Config("ablate.seeds must not be empty".into()));
        }
        Ok(())
    }

    pub fn exec(&self) -> Exec {
        if self.parallel {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }

    fn check_specs(&self, data: &Dataset) -> Result<()> {
        if let Some(specs) = &self.modalities {
            if *specs != data.specs {
                return Err(MfmError::Config(format!(
                    "configured modalities {specs:?} do not match the dataset's {:?}",
                    data.specs
                )));
            }
        }
        Ok(())
    }
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub schema_version: u32,
    /// Hash of the command's inputs; equal inputs give equal ids.
    pub run_id: String,
    pub command: String,
    pub seed: u64,
    pub metrics: BTreeMap<String, Option<f64>>,
    pub wall_clock_s: f64,
}

impl MetricsRecord {
    fn new(command: &str, seed: u64, identity: &[&str], metrics: BTreeMap<String, Option<f64>>, started: Instant) -> Self {
        let mut h = Sha256::new();
        h.update(command.as_bytes());
        h.update(seed.to_le_bytes());
        for part in identity {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
        MetricsRecord {
            schema_version: METRICS_SCHEMA_VERSION,
            run_id: hex::encode(&h.finalize()[..8]),
            command: command.to_string(),
            seed,
            metrics,
            wall_clock_s: started.elapsed().as_secs_f64(),
        }
    }
}

pub fn append_metrics(path: &Path, record: &MetricsRecord) -> Result<()> {
    let line = serde_json::to_string(record).map_err(|e| MfmError::Format(e.to_string()))?;
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| MfmError::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| MfmError::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(|e| MfmError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| MfmError::Format(format!("{}: {e}", path.display()))))
        .collect()
}

/// Flattens evaluation metrics into `recon_mse.<name>`, `accuracy`, `mae`.
pub fn eval_metrics_map(specs: &[ModalitySpec], m: &EvalMetrics) -> BTreeMap<String, Option<f64>> {
    let mut out = BTreeMap::new();
    for (s, r) in specs.iter().zip(&m.recon_mse) {
        out.insert(format!("recon_mse.{}", s.name), *r);
    }
    out.insert("accuracy".into(), m.accuracy);
    out.insert("mae".into(), m.mae);
    out
}

fn loss_metrics_map(specs: &[ModalitySpec], b: &LossBreakdown) -> BTreeMap<String, Option<f64>> {
    let mut out = BTreeMap::new();
    for (i, s) in specs.iter().enumerate() {
        out.insert(format!("loss.recon.{}", s.name), b.recon.get(i).copied());
    }
    out.insert("loss.pred".into(), Some(b.pred));
    out.insert("loss.prior_penalty".into(), Some(b.prior_penalty));
    out.insert("loss.total".into(), Some(b.total));
    out
}

/// Resolved dataset locations: `fit` for training, `eval` for scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetPaths {
    pub fit: PathBuf,
    pub eval: PathBuf,
}

pub fn resolve_dataset(path: &Path) -> Result<DatasetPaths> {
    if path.join(MANIFEST_FILE).is_file() {
        return Ok(DatasetPaths {
            fit: path.to_path_buf(),
            eval: path.to_path_buf(),
        });
    }
    let train = path.join("train");
    if !train.join(MANIFEST_FILE).is_file() {
        return Err(MfmError::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no manifest.json and no train/ dataset"),
        ));
    }
    let test = path.join("test");
    let eval = if test.join(MANIFEST_FILE).is_file() { test } else { train.clone() };
    Ok(DatasetPaths { fit: train, eval })
}

fn refuse_overwrite(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(MfmError::io(
            path,
            std::io::Error::new(std::io::ErrorKind::AlreadyExists, "exists; pass --force to overwrite"),
        ));
    }
    Ok(())
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| MfmError::io(path, e))
}

fn manifest_text(dir: &Path) -> Result<String> {
    let m = read_manifest(dir)?;
    serde_json::to_string(&m).map_err(|e| MfmError::Format(e.to_string()))
}

/// Writes `<out>/train` (and `<out>/test` when `n_test > 0`), each with a
/// ground-truth sidecar.
pub fn cmd_synth(cfg: &RunConfig, out: &Path, force: bool) -> Result<MetricsRecord> {
    let started = Instant::now();
    let s = SynthConfig {
        seed: cfg.seed,
        ..cfg.synth.clone()
    };
    let train_dir = out.join("train");
    let test_dir = out.join("test");
    refuse_overwrite(&train_dir, force)?;
    refuse_overwrite(&test_dir, force)?;
    let data = generate_dataset_with(&s, cfg.exec())?;
    for (dir, ds, truth) in [
        (&train_dir, &data.train, &data.train_truth),
        (&test_dir, &data.test, &data.test_truth),
    ] {
        if ds.is_empty() {
            continue;
        }
        create_dir(dir)?;
        write_dataset(dir, ds)?;
        write_truth(&dir.join(TRUTH_FILE), truth)?;
    }
    log::info!("synth: {} train / {} test samples in {}", data.train.len(), data.test.len(), out.display());
    let metrics = BTreeMap::from([
        ("n_train".to_string(), Some(data.train.len() as f64)),
        ("n_test".to_string(), Some(data.test.len() as f64)),
    ]);
    let toml = toml::to_string(&s).expect("synth config serializes");
    let record = MetricsRecord::new("synth", cfg.seed, &[&toml], metrics, started);
    append_metrics(&out.join(METRICS_FILE), &record)?;
    Ok(record)
}

pub struct TrainOutcome {
    pub model: MfmModel,
    pub history: Vec<LossBreakdown>,
    pub record: MetricsRecord,
}

/// Builds the configured model, trains it on the fit split and writes the
/// checkpoint, `history.csv` and a metrics record into `out`.
pub fn cmd_train(cfg: &RunConfig, dataset: &Path, out: &Path, checkpoint: Option<&Path>, force: bool) -> Result<TrainOutcome> {
    let started = Instant::now();
    let paths = resolve_dataset(dataset)?;
    let data = read_dataset(&paths.fit)?;
    cfg.check_specs(&data)?;
    let ckpt = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| out.join(CHECKPOINT_FILE));
    let history_path = out.join(HISTORY_FILE);
    refuse_overwrite(&ckpt, force)?;
    refuse_overwrite(&history_path, force)?;
    create_dir(out)?;

    let mut rng = RngState::new(cfg.seed);
    let mut model = MfmModel::build(&cfg.model, &data.specs, data.task, &mut rng)?;
    log::info!(
        "train: {} ({} params) on {} samples, {} epochs",
        model.variant(),
        model.param_count(),
        data.len(),
        cfg.train.epochs
    );
    let history = train(&mut model, &data, &cfg.loss, &cfg.train, &mut rng, cfg.exec())?;
    checkpoint::save(&ckpt, &model)?;
    let names: Vec<String> = data.specs.iter().map(|s| s.name.clone()).collect();
    write_history_csv(&history_path, &names, &history)?;

    let mut metrics = history.last().map(|b| loss_metrics_map(&data.specs, b)).unwrap_or_default();
    metrics.insert("epochs".into(), Some(history.len() as f64));
    metrics.insert("steps".into(), Some(model.steps_trained as f64));
    let record = MetricsRecord::new("train", cfg.seed, &[&cfg.to_toml(), &manifest_text(&paths.fit)?], metrics, started);
    append_metrics(&out.join(METRICS_FILE), &record)?;
    Ok(TrainOutcome { model, history, record })
}

/// Scores a checkpoint on the eval split. With a partial `mask` (observed
/// modality names) a surrogate is fitted on the fit split first and the
/// missing modalities are imputed.
pub fn cmd_eval(cfg: &RunConfig, ckpt: &Path, dataset: &Path, mask: Option<&str>, out: Option<&Path>) -> Result<MetricsRecord> {
    let started = Instant::now();
    let model = checkpoint::load(ckpt)?;
    let paths = resolve_dataset(dataset)?;
    let data = read_dataset(&paths.eval)?;
    if data.specs != model.specs || data.task != model.task {
        return Err(MfmError::Config("dataset specs or task do not match the checkpoint".into()));
    }
    let mask = match mask {
        Some(list) => MissingMask::from_observed_names(list, &model.specs)?,
        None => MissingMask::all_observed(model.specs.len()),
    };
    let m = if mask.is_full() {
        evaluate(&model, &data, cfg.exec())?
    } else {
        let fit = read_dataset(&paths.fit)?;
        let mut rng = RngState::new(cfg.seed);
        let sur = train_surrogate(&model, &fit, &mask, &cfg.surrogate, &mut rng, cfg.exec())?;
        evaluate_masked(&model, &sur, &data, cfg.exec())?
    };
    let observed: Vec<&str> = mask
        .observed_indices()
        .into_iter()
        .map(|i| model.specs[i].name.as_str())
        .collect();
    let observed = observed.join(",");
    let surrogate_cfg = if mask.is_full() {
        String::new()
    } else {
        toml::to_string(&cfg.surrogate).expect("surrogate config serializes")
    };
    let record = MetricsRecord::new(
        "eval",
        cfg.seed,
        &[&model.checksum(), &manifest_text(&paths.eval)?, &observed, &surrogate_cfg],
        eval_metrics_map(&model.specs, &m),
        started,
    );
    if let Some(out) = out {
        create_dir(out)?;
        append_metrics(&out.join(METRICS_FILE), &record)?;
    }
    Ok(record)
}

/// Writes `ratios.jsonl` and one `flow_<id>.csv` per flow sample into `out`.
pub fn cmd_interpret(cfg: &RunConfig, ckpt: &Path, dataset: &Path, out: &Path, force: bool) -> Result<InterpretationReport> {
    let started = Instant::now();
    let model = checkpoint::load(ckpt)?;
    let paths = resolve_dataset(dataset)?;
    let data = read_dataset(&paths.eval)?;
    if data.specs != model.specs {
        return Err(MfmError::Config("dataset specs do not match the checkpoint".into()));
    }
    refuse_overwrite(&out.join(RATIOS_FILE), force)?;
    create_dir(out)?;
    let report = interpret(&model, &data, &cfg.interpret, cfg.exec())?;
    write_ratios(&out.join(RATIOS_FILE), &report.ratios)?;
    write_flows(out, &report.flows)?;

    let mut metrics = BTreeMap::new();
    metrics.insert("samples_used".to_string(), Some(report.samples_used as f64));
    for r in &report.ratios {
        metrics.insert(format!("ratio.{}", r.modality), r.ratio);
        metrics.insert(format!("numerator.{}", r.modality), Some(r.numerator));
        metrics.insert(format!("denominator.{}", r.modality), r.denominator);
    }
    let interp = toml::to_string(&cfg.interpret).expect("interpret config serializes");
    let record = MetricsRecord::new(
        "interpret",
        cfg.seed,
        &[&model.checksum(), &manifest_text(&paths.eval)?, &interp],
        metrics,
        started,
    );
    append_metrics(&out.join(METRICS_FILE), &record)?;
    Ok(report)
}

/// One row of the ablation table.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: ModelVariant,
    pub seed: u64,
    /// `Err` holds the failure message; the other variants still run.
    pub result: std::result::Result<(EvalMetrics, LossBreakdown), String>,
}

fn ablate_one(cfg: &RunConfig, variant: ModelVariant, seed: u64, fit: &Dataset, eval: &Dataset) -> Result<(EvalMetrics, LossBreakdown)> {
    let model_cfg = ModelConfig {
        variant,
        ..cfg.model.clone()
    };
    let mut rng = RngState::new(seed);
    let mut model = MfmModel::build(&model_cfg, &fit.specs, fit.task, &mut rng)?;
    let history = train(&mut model, fit, &cfg.loss, &cfg.train, &mut rng, cfg.exec())?;
    let last = history
        .last()
        .cloned()
        .ok_or_else(|| MfmError::Config("ablation needs at least one epoch".into()))?;
    Ok((evaluate(&model, eval, cfg.exec())?, last))
}

/// Trains every variant for every seed in `seeds`.
pub fn run_ablation(cfg: &RunConfig, fit: &Dataset, eval: &Dataset, seeds: &[u64]) -> Vec<AblationRow> {
    let mut rows = Vec::new();
    for &seed in seeds {
        for variant in ModelVariant::ALL {
            let result = ablate_one(cfg, variant, seed, fit, eval).map_err(|e| {
                log::error!("ablate: {variant} seed {seed} failed: {e}");
                e.to_string()
            });
            log::info!("ablate: {variant} seed {seed} done");
            rows.push(AblationRow { variant, seed, result });
        }
    }
    rows
}

/// `variant,seed,status,accuracy,mae,recon_mse_<m>...,loss_recon_<m>...,
/// loss_pred,loss_prior_penalty,loss_total,error`
pub fn ablation_csv(specs: &[ModalitySpec], rows: &[AblationRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from("variant,seed,status,accuracy,mae");
    for s in specs {
        out.push_str(&format!(",recon_mse_{}", s.name));
    }
    for s in specs {
        out.push_str(&format!(",loss_recon_{}", s.name));
    }
    out.push_str(",loss_pred,loss_prior_penalty,loss_total,error\n");
    for r in rows {
        out.push_str(&format!("{},{}", r.variant, r.seed));
        match &r.result {
            Ok((m, b)) => {
                out.push_str(&format!(",ok,{},{}", opt(m.accuracy), opt(m.mae)));
                for i in 0..specs.len() {
                    out.push_str(&format!(",{}", opt(m.recon_mse.get(i).copied().flatten())));
                }
                for i in 0..specs.len() {
                    out.push_str(&format!(",{}", opt(b.recon.get(i).copied())));
                }
                out.push_str(&format!(",{},{},{},\n", b.pred, b.prior_penalty, b.total));
            }
            Err(e) => {
                out.push_str(",failed,,");
                out.push_str(&",".repeat(2 * specs.len()));
                out.push_str(&format!(",,,,\"{}\"\n", e.replace('"', "'")));
            }
        }
    }
    out
}

/// Mean and standard error of one ablation column per variant over the
/// successful seeds.
pub fn ablation_summary(rows: &[AblationRow], column: impl Fn(&EvalMetrics) -> Option<f64>) -> BTreeMap<String, (f64, f64, usize)> {
    let mut by: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in rows {
        if let Ok((m, _)) = &r.result {
            if let Some(v) = column(m) {
                by.entry(r.variant.name().to_string()).or_default().push(v);
            }
        }
    }
    by.into_iter()
        .map(|(k, v)| {
            let n = v.len();
            let mean = v.iter().sum::<f64>() / n as f64;
            let se = if n > 1 {
                let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
                (var / n as f64).sqrt()
            } else {
                0.0
            };
            (k, (mean, se, n))
        })
        .collect()
}

pub fn cmd_ablate(cfg: &RunConfig, dataset: &Path, out: &Path, seeds: &[u64], force: bool) -> Result<Vec<AblationRow>> {
    let started = Instant::now();
    let paths = resolve_dataset(dataset)?;
    let fit = read_dataset(&paths.fit)?;
    let eval = read_dataset(&paths.eval)?;
    cfg.check_specs(&fit)?;
    let csv = out.join(ABLATION_FILE);
    refuse_overwrite(&csv, force)?;
    create_dir(out)?;
    let rows = run_ablation(cfg, &fit, &eval, seeds);
    fs::write(&csv, ablation_csv(&fit.specs, &rows)).map_err(|e| MfmError::io(&csv, e))?;

    let mut metrics = BTreeMap::new();
    for (name, (mean, se, n)) in ablation_summary(&rows, |m| m.accuracy.or(m.mae)) {
        metrics.insert(format!("{name}.score_mean"), Some(mean));
        metrics.insert(format!("{name}.score_se"), Some(se));
        metrics.insert(format!("{name}.runs"), Some(n as f64));
    }
    let failed = rows.iter().filter(|r| r.result.is_err()).count();
    metrics.insert("failed".into(), Some(failed as f64));
    let seeds_text = format!("{seeds:?}");
    let record = MetricsRecord::new(
        "ablate",
        cfg.seed,
        &[&cfg.to_toml(), &manifest_text(&paths.fit)?, &seeds_text],
        metrics,
        started,
    );
    append_metrics(&out.join(METRICS_FILE), &record)?;
    Ok(rows)
}

#[derive(Debug, Parser)]
#[command(name = "mfm", version, about = "Multimodal factorization model experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multimodal dataset.
    Synth(Flags),
    /// Train a model and write a checkpoint plus loss history.
    Train(Flags),
    /// Score a checkpoint, optionally with missing modalities.
    Eval(Flags),
    /// Information ratios and gradient flow of a trained model.
    Interpret(Flags),
    /// Train and score every model variant over several seeds.
    Ablate(Flags),
}

#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Overrides `seed` (for `ablate`: runs only this seed).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated names of the observed modalities.
    #[arg(long)]
    pub mask: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
    /// Overrides `model.variant` (MA, MB, MC, MD, ME, MFM).
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<ModelVariant>,
}

fn parse_variant(s: &str) -> std::result::Result<ModelVariant, String> {
    ModelVariant::parse(s).map_err(|e| e.to_string())
}

impl Flags {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(v) = self.variant {
            cfg.model.variant = v;
        }
        Ok(cfg)
    }
}

fn required(flag: Option<&PathBuf>, fallback: Option<&PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or(fallback)
        .cloned()
        .ok_or_else(|| MfmError::Config(format!("--{name} is required")))
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(f) => {
            let cfg = f.config()?;
            let out = required(f.out.as_ref(), cfg.paths.out.as_ref(), "out")?;
            let r = cmd_synth(&cfg, &out, f.force)?;
            println!("{}", serde_json::to_string(&r).expect("record serializes"));
        }
        Command::Train(f) => {
            let cfg = f.config()?;
            let dataset = required(f.dataset.as_ref(), cfg.paths.dataset.as_ref(), "dataset")?;
            let out = required(f.out.as_ref(), cfg.paths.out.as_ref(), "out")?;
            let ckpt = f.checkpoint.as_ref().or(cfg.paths.checkpoint.as_ref());
            let o = cmd_train(&cfg, &dataset, &out, ckpt.map(PathBuf::as_path), f.force)?;
            println!("{}", serde_json::to_string(&o.record).expect("record serializes"));
        }
        Command::Eval(f) => {
            let cfg = f.config()?;
            let dataset = required(f.dataset.as_ref(), cfg.paths.dataset.as_ref(), "dataset")?;
            let ckpt = required(f.checkpoint.as_ref(), cfg.paths.checkpoint.as_ref(), "checkpoint")?;
            let out = f.out.as_ref().or(cfg.paths.out.as_ref());
            let r = cmd_eval(&cfg, &ckpt, &dataset, f.mask.as_deref(), out.map(PathBuf::as_path))?;
            println!("{}", serde_json::to_string(&r).expect("record serializes"));
        }
        Command::Interpret(f) => {
            let cfg = f.config()?;
            let dataset = required(f.dataset.as_ref(), cfg.paths.dataset.as_ref(), "dataset")?;
            let ckpt = required(f.checkpoint.as_ref(), cfg.paths.checkpoint.as_ref(), "checkpoint")?;
            let out = required(f.out.as_ref(), cfg.paths.out.as_ref(), "out")?;
            let report = cmd_interpret(&cfg, &ckpt, &dataset, &out, f.force)?;
            for r in &report.ratios {
                println!("{}", serde_json::to_string(r).expect("record serializes"));
            }
        }
        Command::Ablate(f) => {
            let cfg = f.config()?;
            let dataset = required(f.dataset.as_ref(), cfg.paths.dataset.as_ref(), "dataset")?;
            let out = required(f.out.as_ref(), cfg.paths.out.as_ref(), "out")?;
            let seeds = f.seed.map(|s| vec![s]).unwrap_or_else(|| cfg.ablate.seeds.clone());
            let rows = cmd_ablate(&cfg, &dataset, &out, &seeds, f.force)?;
            let specs = read_dataset(&resolve_dataset(&dataset)?.fit)?.specs;
            print!("{}", ablation_csv(&specs, &rows));
        }
    }
    Ok(())
}

/// 2 configuration/input error, 3 numeric divergence, 4 I/O or file format.
pub fn exit_code(e: &MfmError) -> i32 {
    match e {
        MfmError::Config(_) | MfmError::Invalid(_) | MfmError::Shape(_) | MfmError::Untrained(_) => 2,
        MfmError::Divergence { .. } | MfmError::NonFinite(_) => 3,
        MfmError::Io { .. } | MfmError::Format(_) => 4,
    }
}

/// Reads `MFM_LOG_LEVEL` (`error`, `info` or `debug`; default `info`).
pub fn log_level(value: Option<&str>) -> Result<log::LevelFilter> {
    match value.map(str::trim) {
        None | Some("") | Some("info") => Ok(log::LevelFilter::Info),
        Some("error") => Ok(log::LevelFilter::Error),
        Some("debug") => Ok(log::LevelFilter::Debug),
        Some(other) => Err(MfmError::Config(format!(
            "MFM_LOG_LEVEL must be error, info or debug, got '{other}'"
        ))),
    }
}

/// Entry point of the binary; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let level = match log_level(std::env::var("MFM_LOG_LEVEL").ok().as_deref()) {
        Ok(l) => l,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .try_init();
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
