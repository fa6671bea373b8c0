//! Randomized invariants across module boundaries.

use mfm::checkpoint;
use mfm::cli::RunConfig;
use mfm::data::{read_dataset, write_dataset, Dataset, Label, ModalitySpec, Sample, Task};
use mfm::model::{MfmModel, ModelConfig, ModelVariant};
use mfm::objective::{batch_loss, LossWeights};
use mfm::surrogate::{impute, MissingMask, SurrogateConfig, SurrogateNet};
use mfm::{Exec, RngState, Tensor};
use proptest::prelude::*;

fn specs() -> Vec<ModalitySpec> {
    vec![ModalitySpec::new("a", 3, 1), ModalitySpec::new("b", 2, 3)]
}

fn model(variant: ModelVariant, seed: u64) -> MfmModel {
    let cfg = ModelConfig {
        variant,
        hidden: 5,
        depth: 1,
        ..ModelConfig::default()
    };
    MfmModel::build(&cfg, &specs(), Task::Classification { classes: 3 }, &mut RngState::new(seed)).unwrap()
}

fn sample(id: u64, rng: &mut RngState) -> Sample {
    Sample {
        id,
        label: Label::Class(rng.below(3)),
        modalities: specs()
            .iter()
            .map(|s| Tensor::new(vec![s.steps, s.dim], rng.normal_vec(s.flat_len())).unwrap())
            .collect(),
    }
}

fn variant() -> impl Strategy<Value = ModelVariant> {
    (0..ModelVariant::ALL.len()).prop_map(|i| ModelVariant::ALL[i])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sequential_and_parallel_gradients_agree(v in variant(), seed in 0u64..1000, n in 2usize..20) {
        let m = model(v, seed);
        let mut rng = RngState::new(seed + 1);
        let samples: Vec<Sample> = (0..n as u64).map(|i| sample(i, &mut rng)).collect();
        let batch: Vec<&Sample> = samples.iter().collect();
        let w = LossWeights::default();
        let (ls, gs) = batch_loss(&m, &batch, &w, &mut RngState::new(seed), Exec::Sequential).unwrap();
        let (lp, gp) = batch_loss(&m, &batch, &w, &mut RngState::new(seed), Exec::Parallel).unwrap();
        prop_assert_eq!(ls, lp);
        prop_assert_eq!(checkpoint::to_bytes(&gs), checkpoint::to_bytes(&gp));
    }

    #[test]
    fn checkpoint_round_trip(v in variant(), seed in 0u64..1000, steps in 0u64..10_000) {
        let mut m = model(v, seed);
        m.steps_trained = steps;
        let bytes = checkpoint::to_bytes(&m);
        prop_assert_eq!(checkpoint::to_bytes(&checkpoint::from_bytes(&bytes).unwrap()), bytes);
    }

    #[test]
    fn dataset_round_trip(seed in 0u64..1000, n in 1usize..12, scale in -1e6f64..1e6) {
        let mut rng = RngState::new(seed);
        let mut samples: Vec<Sample> = (0..n as u64).map(|i| sample(i, &mut rng)).collect();
        for s in &mut samples {
            for v in s.modalities[0].data_mut() {
                *v *= scale;
            }
        }
        let ds = Dataset { specs: specs(), task: Task::Classification { classes: 3 }, samples };
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        prop_assert_eq!(read_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn config_toml_round_trip(seed in any::<u64>(), v in variant(), epochs in 1usize..500, lr in 1e-5f64..1.0, lambda in 0.0f64..10.0) {
        let mut cfg = RunConfig::default();
        cfg.seed = seed;
        cfg.model.variant = v;
        cfg.train.epochs = epochs;
        cfg.train.optimizer.lr = lr;
        cfg.loss.lambda = lambda;
        prop_assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn imputation_never_reads_missing_slots(seed in 0u64..1000, missing in 0usize..2, junk in prop::num::f64::ANY) {
        let m = model(ModelVariant::MFM, seed);
        let mut observed = vec![true, true];
        observed[missing] = false;
        let mask = MissingMask::new(observed).unwrap();
        let sur = SurrogateNet::new(&m, &mask, &SurrogateConfig::default(), &mut RngState::new(seed + 7)).unwrap();
        let mut rng = RngState::new(seed + 3);
        let x = sample(0, &mut rng).modalities;
        let base = impute(&m, &sur, &x, &mask).unwrap();
        let mut garbage = x.clone();
        for v in garbage[missing].data_mut() {
            *v = junk;
        }
        let other = impute(&m, &sur, &garbage, &mask).unwrap();
        prop_assert_eq!(base.prediction, other.prediction);
        prop_assert_eq!(base.missing, other.missing);
    }
}
