//! End-to-end runs of the `mfm` binary on tiny synthetic data.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mfm::checkpoint;
use mfm::cli::{read_metrics, MetricsRecord};
use mfm::data::{read_dataset, Label};
use mfm::net::Params;

const CONFIG: &str = r#"
seed = 1

[model]
hidden = 8
depth = 1

[train]
epochs = 3
batch_size = 16

[synth]
n = 60
n_test = 24
dims = [4, 3]
steps = [1, 3]

[surrogate]
hidden = 8
depth = 1
epochs = 3

[interpret]
max_samples = 15
flow_samples = 2

[ablate]
seeds = [0, 1]
"#;

fn mfm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfm"))
        .args(args)
        .env("MFM_LOG_LEVEL", "error")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = mfm(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("run.toml"), config).unwrap();
        Env { dir }
    }

    fn p(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn s(&self, rel: &str) -> String {
        self.p(rel).display().to_string()
    }

    fn synth(&self) {
        ok(&["synth", "--config", &self.s("run.toml"), "--out", &self.s("data")]);
    }

    fn train(&self, out: &str, extra: &[&str]) {
        let mut args = vec![
            "train",
            "--config",
            &self.s("run.toml"),
            "--dataset",
            &self.s("data"),
            "--out",
            &self.s(out),
        ]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
        args.extend(extra.iter().map(|s| s.to_string()));
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        ok(&refs);
    }
}

fn last_record(path: &Path) -> MetricsRecord {
    read_metrics(path).unwrap().pop().unwrap()
}

#[test]
fn synth_is_deterministic_and_refuses_overwrite() {
    let e = Env::new(CONFIG);
    e.synth();
    ok(&["synth", "--config", &e.s("run.toml"), "--out", &e.s("again")]);
    for f in ["train/data.jsonl", "train/manifest.json", "train/truth.jsonl", "test/data.jsonl"] {
        assert_eq!(fs::read(e.p("data").join(f)).unwrap(), fs::read(e.p("again").join(f)).unwrap(), "{f}");
    }
    let again = mfm(&["synth", "--config", &e.s("run.toml"), "--out", &e.s("data")]);
    assert_eq!(again.status.code(), Some(4));
    ok(&["synth", "--config", &e.s("run.toml"), "--out", &e.s("data"), "--force"]);
    ok(&["synth", "--config", &e.s("run.toml"), "--out", &e.s("other"), "--seed", "2"]);
    assert_ne!(fs::read(e.p("data/train/data.jsonl")).unwrap(), fs::read(e.p("other/train/data.jsonl")).unwrap());
    let ds = read_dataset(&e.p("data/train")).unwrap();
    assert_eq!(ds.len(), 60);
    assert_eq!(ds.specs[1].steps, 3);
}

#[test]
fn train_is_reproducible_byte_for_byte() {
    let e = Env::new(CONFIG);
    e.synth();
    e.train("a", &[]);
    e.train("b", &[]);
    assert_eq!(fs::read(e.p("a/model.ckpt")).unwrap(), fs::read(e.p("b/model.ckpt")).unwrap());
    assert_eq!(fs::read(e.p("a/history.csv")).unwrap(), fs::read(e.p("b/history.csv")).unwrap());
    e.train("c", &["--seed", "5"]);
    assert_ne!(fs::read(e.p("a/model.ckpt")).unwrap(), fs::read(e.p("c/model.ckpt")).unwrap());

    let history = fs::read_to_string(e.p("a/history.csv")).unwrap();
    assert!(history.starts_with("epoch,recon_m0,recon_m1,pred,prior_penalty,total\n"));
    assert_eq!(history.lines().count(), 4);
    let rec = last_record(&e.p("a/metrics.jsonl"));
    assert_eq!(rec.schema_version, 1);
    assert_eq!(rec.metrics["steps"], Some(12.0));
    assert_eq!(rec.run_id, last_record(&e.p("b/metrics.jsonl")).run_id);

    // refuses to clobber the checkpoint
    let out = mfm(&["train", "--config", &e.s("run.toml"), "--dataset", &e.s("data"), "--out", &e.s("a")]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn discriminative_variant_checkpoint_has_no_decoders() {
    let e = Env::new(CONFIG);
    e.synth();
    e.train("mb", &["--variant", "MB"]);
    let bytes = fs::read(e.p("mb/model.ckpt")).unwrap();
    let (header, _) = checkpoint::read_header(&bytes).unwrap();
    assert_eq!(header.variant, "MB");
    assert!(header.tensors.iter().all(|t| !t.name.starts_with("decoder")));
    let history = fs::read_to_string(e.p("mb/history.csv")).unwrap();
    assert!(history.lines().nth(1).unwrap().starts_with("0,,,"));
}

#[test]
fn zero_learning_rate_keeps_initial_parameters() {
    let e = Env::new(&format!("{CONFIG}\n[train.optimizer]\nlr = 0.0\n"));
    e.synth();
    e.train("run", &[]);
    let trained = checkpoint::load(&e.p("run/model.ckpt")).unwrap();
    let ds = read_dataset(&e.p("data/train")).unwrap();
    let cfg = mfm::cli::RunConfig::load(&e.p("run.toml")).unwrap();
    let init = mfm::model::MfmModel::build(&cfg.model, &ds.specs, ds.task, &mut mfm::RngState::new(1)).unwrap();
    assert_eq!(trained.flatten(), init.flatten());
    assert!(trained.steps_trained > 0);
}

#[test]
fn eval_matches_an_independent_computation() {
    let e = Env::new(CONFIG);
    e.synth();
    e.train("run", &[]);
    let args = ["eval", "--checkpoint", &e.s("run/model.ckpt"), "--dataset", &e.s("data"), "--out", &e.s("ev")];
    let first: MetricsRecord = serde_json::from_str(ok(&args).trim()).unwrap();
    let second: MetricsRecord = serde_json::from_str(ok(&args).trim()).unwrap();
    assert_eq!(first.metrics, second.metrics);
    assert_eq!(first.run_id, second.run_id);
    assert_eq!(read_metrics(&e.p("ev/metrics.jsonl")).unwrap().len(), 2);

    let full: MetricsRecord = serde_json::from_str(ok(&[&args[..], &["--mask", "m0,m1"]].concat()).trim()).unwrap();
    assert_eq!(full.metrics, first.metrics);

    // oracle: recompute every metric from raw forward passes
    let model = checkpoint::load(&e.p("run/model.ckpt")).unwrap();
    let test = read_dataset(&e.p("data/test")).unwrap();
    let (mut sq, mut hits) = (vec![0.0; 2], 0usize);
    for s in &test.samples {
        let d = model.reconstruct(&s.modalities).unwrap();
        for i in 0..2 {
            let x = s.modalities[i].data();
            let xh = d.recon[i].data();
            sq[i] += x.iter().zip(xh).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64;
        }
        let p = d.prediction.data();
        let arg = (0..p.len()).fold(0, |b, k| if p[k] > p[b] { k } else { b });
        hits += usize::from(Label::Class(arg) == s.label);
    }
    let n = test.len() as f64;
    let acc = first.metrics["accuracy"].unwrap();
    assert!((acc - hits as f64 / n).abs() < 1e-12);
    for i in 0..2 {
        let got = first.metrics[&format!("recon_mse.m{i}")].unwrap();
        assert!((got - sq[i] / n).abs() <= 1e-12 * got.max(1.0), "{got} vs {}", sq[i] / n);
    }
    assert_eq!(first.metrics["mae"], None);
}

#[test]
fn masked_eval_uses_a_surrogate() {
    let e = Env::new(CONFIG);
    e.synth();
    e.train("run", &[]);
    let args = [
        "eval",
        "--config",
        &e.s("run.toml"),
        "--checkpoint",
        &e.s("run/model.ckpt"),
        "--dataset",
        &e.s("data"),
        "--mask",
        "m0",
    ];
    let a: MetricsRecord = serde_json::from_str(ok(&args).trim()).unwrap();
    let b: MetricsRecord = serde_json::from_str(ok(&args).trim()).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.metrics["recon_mse.m0"], None);
    assert!(a.metrics["recon_mse.m1"].unwrap() > 0.0);
    assert!(a.metrics["accuracy"].is_some());

    let bad = mfm(&[&args[..7], &["--mask", "m9"]].concat());
    assert_eq!(bad.status.code(), Some(2));
    let none = mfm(&[&args[..7], &["--mask", ""]].concat());
    assert_eq!(none.status.code(), Some(2));
}

#[test]
fn interpret_writes_reports() {
    let e = Env::new(CONFIG);
    e.synth();
    e.train("run", &[]);
    let args = [
        "interpret",
        "--config",
        &e.s("run.toml"),
        "--checkpoint",
        &e.s("run/model.ckpt"),
        "--dataset",
        &e.s("data"),
        "--out",
        &e.s("int"),
    ];
    ok(&args);
    let ratios = fs::read_to_string(e.p("int/ratios.jsonl")).unwrap();
    assert_eq!(ratios.lines().count(), 2);
    let rec = last_record(&e.p("int/metrics.jsonl"));
    assert_eq!(rec.metrics["samples_used"], Some(15.0));
    let test = read_dataset(&e.p("data/test")).unwrap();
    let flows: Vec<PathBuf> = (0..2)
        .map(|k| e.p(&format!("int/flow_{}.csv", test.samples[k].id)))
        .collect();
    let first = fs::read(&flows[0]).unwrap();
    assert_eq!(String::from_utf8_lossy(&first).lines().count(), 1 + 1 + 3);

    // deterministic, and guarded against overwrite
    assert_eq!(mfm(&args).status.code(), Some(4));
    ok(&[&args[..], &["--force"]].concat());
    assert_eq!(fs::read_to_string(e.p("int/ratios.jsonl")).unwrap(), ratios);
    assert_eq!(fs::read(&flows[0]).unwrap(), first);

    e.train("mb", &["--variant", "MB"]);
    let out = mfm(&["interpret", "--checkpoint", &e.s("mb/model.ckpt"), "--dataset", &e.s("data"), "--out", &e.s("int3")]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ablate_covers_every_variant_and_seed() {
    let e = Env::new(CONFIG);
    e.synth();
    let stdout = ok(&["ablate", "--config", &e.s("run.toml"), "--dataset", &e.s("data"), "--out", &e.s("abl")]);
    let csv = fs::read_to_string(e.p("abl/ablation.csv")).unwrap();
    assert_eq!(stdout, csv);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 1 + 6 * 2);
    let header: Vec<&str> = lines[0].split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    for row in &lines[1..] {
        let f: Vec<&str> = row.split(',').collect();
        assert_eq!(f.len(), header.len(), "{row}");
        assert_eq!(f[col("status")], "ok");
        let num = |name: &str| f[col(name)].parse::<f64>().unwrap_or(0.0);
        let total = num("loss_recon_m0") + num("loss_recon_m1") + num("loss_pred") + num("loss_prior_penalty");
        assert!((total - num("loss_total")).abs() <= 1e-9 * total.max(1.0), "{row}");
        if f[0] == "MB" {
            assert_eq!(f[col("recon_mse_m0")], "");
            assert_eq!(f[col("loss_recon_m1")], "");
        }
    }
    let rec = last_record(&e.p("abl/metrics.jsonl"));
    assert_eq!(rec.metrics["failed"], Some(0.0));
    assert_eq!(rec.metrics["MFM.runs"], Some(2.0));
}

#[test]
fn config_and_usage_errors_exit_with_2() {
    let e = Env::new("[model]\nhiddn = 3\n");
    let out = mfm(&["train", "--config", &e.s("run.toml"), "--dataset", "x", "--out", "y"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("hiddn"));
    assert_eq!(mfm(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(mfm(&["train", "--dataset", "x"]).status.code(), Some(2));
    let missing = mfm(&["eval", "--checkpoint", &e.s("nope.ckpt"), "--dataset", &e.s("nope")]);
    assert_eq!(missing.status.code(), Some(4));
    let level = Command::new(env!("CARGO_BIN_EXE_mfm"))
        .args(["synth", "--out", &e.s("d")])
        .env("MFM_LOG_LEVEL", "loud")
        .output()
        .unwrap();
    assert_eq!(level.status.code(), Some(2));
}

#[test]
fn diverging_run_exits_with_3() {
    let e = Env::new(&format!("{CONFIG}\n[train.optimizer]\nlr = 1e300\n"));
    e.synth();
    let out = mfm(&["train", "--config", &e.s("run.toml"), "--dataset", &e.s("data"), "--out", &e.s("run")]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
