use super::*;
use crate::data::{Label, Task};
use crate::synth::{generate_dataset, SynthConfig};

fn setup(n: usize) -> (MfmModel, Dataset) {
    let cfg = SynthConfig {
        n,
        dims: vec![4, 4, 3],
        duplicate: Some([0, 1]),
        ..SynthConfig::default()
    };
    let data = generate_dataset(&cfg).unwrap().train;
    let mc = ModelConfig {
        hidden: 6,
        depth: 1,
        ..ModelConfig::default()
    };
    let model = MfmModel::build(&mc, &data.specs, data.task, &mut RngState::new(9)).unwrap();
    (model, data)
}

fn small() -> SurrogateConfig {
    SurrogateConfig {
        hidden: 6,
        depth: 1,
        epochs: 3,
        batch_size: 8,
        optimizer: AdamConfig::with_lr(1e-2),
    }
}

#[test]
fn mask_parsing() {
    let specs = vec![ModalitySpec::new("a", 1, 1), ModalitySpec::new("b", 1, 1)];
    let m = MissingMask::from_observed_names("b", &specs).unwrap();
    assert_eq!(m.observed, vec![false, true]);
    assert_eq!(m.missing_indices(), vec![0]);
    assert!(MissingMask::from_observed_names("a, b", &specs).unwrap().is_full());
    assert!(MissingMask::from_observed_names("", &specs).is_err());
    assert!(MissingMask::from_observed_names("c", &specs).is_err());
}

#[test]
fn all_observed_mask_rejected() {
    let (model, data) = setup(10);
    let mask = MissingMask::all_observed(3);
    assert!(train_surrogate(&model, &data, &mask, &small(), &mut RngState::new(1), Exec::default()).is_err());
}

#[test]
fn zero_learning_rate_leaves_surrogate_at_init() {
    let (model, data) = setup(20);
    let mask = MissingMask::new(vec![false, true, true]).unwrap();
    let mut cfg = small();
    cfg.optimizer.lr = 0.0;
    let init = SurrogateNet::new(&model, &mask, &cfg, &mut RngState::new(4)).unwrap();
    let trained = train_surrogate(&model, &data, &mask, &cfg, &mut RngState::new(4), Exec::default()).unwrap();
    assert_eq!(init, trained);
}

#[test]
fn frozen_model_is_not_mutated() {
    let (model, data) = setup(20);
    let before = model.checksum();
    let mask = MissingMask::new(vec![true, false, true]).unwrap();
    let sur = train_surrogate(&model, &data, &mask, &small(), &mut RngState::new(2), Exec::default()).unwrap();
    assert_eq!(model.checksum(), before);
    assert_eq!(sur.inferred, vec![true, false, true, false]);
}

#[test]
fn impute_is_deterministic_shaped_and_ignores_missing_slot() {
    let (model, data) = setup(20);
    let mask = MissingMask::new(vec![false, true, true]).unwrap();
    let sur = train_surrogate(&model, &data, &mask, &small(), &mut RngState::new(3), Exec::default()).unwrap();
    let x = &data.samples[0].modalities;
    let a = impute(&model, &sur, x, &mask).unwrap();
    let b = impute(&model, &sur, x, &mask).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.missing.len(), 1);
    assert_eq!(a.missing[0].0, 0);
    assert_eq!(a.missing[0].1.shape(), &[1, 4]);

    let mut scrambled = x.clone();
    scrambled[0].fill(1e6);
    assert_eq!(impute(&model, &sur, &scrambled, &mask).unwrap(), a);

    let other = MissingMask::new(vec![true, false, true]).unwrap();
    assert!(impute(&model, &sur, x, &other).is_err());
}

#[test]
fn observed_private_codes_come_from_the_frozen_encoder() {
    let (model, data) = setup(12);
    let mask = MissingMask::new(vec![false, true, true]).unwrap();
    let sur = train_surrogate(&model, &data, &mask, &small(), &mut RngState::new(5), Exec::default()).unwrap();
    let x = &data.samples[1].modalities;
    let code = model.encode(x).unwrap();
    let inferred = sur.infer(x);
    // rebuild the decoder input by hand and compare predictions
    let mut z = LatentCode { z_y: inferred[..4].to_vec(), z_a: code.z_a.clone() };
    z.z_a[0] = inferred[4..].to_vec();
    let expect = model.decode(&model.factorize(&z).unwrap()).unwrap();
    let got = impute(&model, &sur, x, &mask).unwrap();
    assert_eq!(got.prediction, expect.prediction);
    assert_eq!(got.missing[0].1, expect.recon[0]);
}

#[test]
fn full_observation_evaluation_equals_plain_evaluation() {
    let (model, data) = setup(12);
    let sur = SurrogateNet {
        mask: MissingMask::all_observed(3),
        inferred: vec![false; 4],
        net: FusionEncoder::new(&data.specs, &[0], SequenceArch::Gru, 2, 1, 1, &mut RngState::new(1)),
    };
    assert_eq!(
        evaluate_masked(&model, &sur, &data, Exec::default()).unwrap(),
        evaluate(&model, &data, Exec::default()).unwrap()
    );
}

#[test]
fn baselines_run_and_report() {
    let (_, data) = setup(24);
    let mask = MissingMask::new(vec![false, true, true]).unwrap();
    let g = train_generative_baseline(&data, &mask, SequenceArch::Gru, &small(), &mut RngState::new(6), Exec::default()).unwrap();
    let out = g.predict(&data.samples[0].modalities);
    assert_eq!(out.len(), 1);
    assert_eq!(out[0].shape(), &[1, 4]);
    let mse = imputation_mse(&data, &mask, |s| g.predict(&s.modalities));
    assert!(mse.is_finite());

    let sched = Schedule { epochs: 2, batch_size: 8, ..Schedule::default() };
    let mc = ModelConfig { hidden: 6, depth: 1, ..ModelConfig::default() };
    let d = train_discriminative_baseline(&data, &mask, &mc, &sched, &mut RngState::new(7), Exec::default()).unwrap();
    assert_eq!(d.specs.len(), 2);
    let m = evaluate_discriminative(&d, &data, &mask, Exec::default()).unwrap();
    assert!(m.accuracy.is_some());
}

#[test]
fn means_are_per_element() {
    let specs = vec![ModalitySpec::new("a", 2, 1)];
    let samples = (0..4)
        .map(|k| Sample {
            id: k,
            label: Label::Class(0),
            modalities: vec![Tensor::new(vec![1, 2], vec![k as f64, 2.0 * k as f64]).unwrap()],
        })
        .collect();
    let data = Dataset { specs, task: Task::Classification { classes: 2 }, samples };
    assert_eq!(modality_means(&data)[0].data(), &[1.5, 3.0]);
}
