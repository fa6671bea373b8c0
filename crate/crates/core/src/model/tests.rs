use super::*;
use crate::gradcheck::{max_relative_error, numeric_gradient};
use crate::net::Dense;

fn specs() -> Vec<ModalitySpec> {
    vec![ModalitySpec::new("a", 3, 2), ModalitySpec::new("b", 2, 1), ModalitySpec::new("c", 2, 3)]
}

fn tiny(variant: ModelVariant, prior: PriorMatching) -> ModelConfig {
    ModelConfig {
        variant,
        hidden: 4,
        depth: 2,
        zy_dim: 2,
        za_dim: 2,
        fy_dim: 3,
        fa_dim: 2,
        prior,
        sequence_arch: SequenceArch::Gru,
    }
}

fn sample(rng: &mut RngState, specs: &[ModalitySpec]) -> Vec<Tensor> {
    specs
        .iter()
        .map(|s| Tensor::new(vec![s.steps, s.dim], rng.normal_vec(s.flat_len())).unwrap())
        .collect()
}

fn model(variant: ModelVariant, seed: u64) -> MfmModel {
    let mut rng = RngState::new(seed);
    MfmModel::build(&tiny(variant, PriorMatching::Mmd), &specs(), Task::Classification { classes: 3 }, &mut rng).unwrap()
}

#[test]
fn perturbing_one_modality_leaves_other_private_codes() {
    let m = model(ModelVariant::MFM, 1);
    let mut rng = RngState::new(2);
    let x = sample(&mut rng, &m.specs);
    let base = m.encode(&x).unwrap();
    for j in 0..x.len() {
        let mut y = x.clone();
        for v in y[j].data_mut() {
            *v += 0.7;
        }
        let code = m.encode(&y).unwrap();
        for i in 0..x.len() {
            if i != j {
                assert_eq!(code.z_a[i], base.z_a[i]);
            }
        }
        assert_ne!(code.z_y, base.z_y);
    }
}

#[test]
fn zero_model_gives_zero_codes() {
    let mut m = model(ModelVariant::MFM, 3);
    m.scale_all(0.0);
    let x: Vec<Tensor> = m.specs.iter().map(|s| Tensor::zeros(&[s.steps, s.dim])).collect();
    let code = m.encode(&x).unwrap();
    assert!(code.concat().iter().all(|v| *v == 0.0));
}

#[test]
fn encode_matches_layer_by_layer_oracle() {
    let m = model(ModelVariant::MFM, 4);
    let mut rng = RngState::new(5);
    let x = sample(&mut rng, &m.specs);
    let code = m.encode(&x).unwrap();
    // private code of the static modality: dense tower by hand
    let SeqEncoder::Dense { net } = &m.private[1] else { panic!("static modality uses a dense encoder") };
    let mut h = x[1].data().to_vec();
    for layer in &net.layers {
        let (rows, cols) = (layer.weight.rows(), layer.weight.cols());
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            let mut acc = layer.bias.data()[r];
            for c in 0..cols {
                acc += layer.weight.get2(r, c) * h[c];
            }
            out[r] = match layer.activation {
                Activation::Tanh => acc.tanh(),
                Activation::Relu => acc.max(0.0),
                Activation::Identity => acc,
            };
        }
        h = out;
    }
    assert_eq!(code.z_a[1].len(), h.len());
    for (a, b) in code.z_a[1].iter().zip(&h) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn encode_rejects_bad_dims() {
    let m = model(ModelVariant::MFM, 6);
    let mut x: Vec<Tensor> = m.specs.iter().map(|s| Tensor::zeros(&[s.steps, s.dim])).collect();
    x[0] = Tensor::zeros(&[2, 4]);
    assert!(m.encode(&x).is_err());
    assert!(m.encode(&x[..2]).is_err());
}

#[test]
fn identity_factor_maps_copy_codes() {
    let mut cfg = tiny(ModelVariant::MFM, PriorMatching::Mmd);
    cfg.fy_dim = cfg.zy_dim;
    cfg.fa_dim = cfg.za_dim;
    let mut rng = RngState::new(7);
    let mut m = MfmModel::build(&cfg, &specs(), Task::Regression, &mut rng).unwrap();
    m.g_y = Some(Mlp::single(Dense::identity(cfg.zy_dim)));
    for g in &mut m.g_a {
        *g = Mlp::single(Dense::identity(cfg.za_dim));
    }
    let code = m.sample_prior(&mut rng);
    let f = m.factorize(&code).unwrap();
    assert_eq!(f.f_y, code.z_y);
    assert_eq!(f.f_a, code.z_a);
}

#[test]
fn factors_are_structurally_separated() {
    let m = model(ModelVariant::MFM, 8);
    let mut rng = RngState::new(9);
    let code = m.sample_prior(&mut rng);
    let f = m.factorize(&code).unwrap();
    let mut moved = code.clone();
    moved.z_y.iter_mut().for_each(|v| *v += 1.0);
    let g = m.factorize(&moved).unwrap();
    assert_eq!(f.f_a, g.f_a);
    assert_ne!(f.f_y, g.f_y);

    let bad = LatentCode { z_y: vec![0.0; 5], z_a: code.z_a.clone() };
    assert!(m.factorize(&bad).is_err());
}

#[test]
fn decode_structure() {
    let m = model(ModelVariant::MFM, 10);
    let mut rng = RngState::new(11);
    let f = m.factorize(&m.sample_prior(&mut rng)).unwrap();
    let base = m.decode(&f).unwrap();
    for i in 0..m.specs.len() {
        let mut g = f.clone();
        g.f_a[i].iter_mut().for_each(|v| *v += 0.5);
        let d = m.decode(&g).unwrap();
        assert_eq!(d.prediction, base.prediction);
        for j in 0..m.specs.len() {
            if j == i {
                assert_ne!(d.recon[j], base.recon[j]);
            } else {
                assert_eq!(d.recon[j], base.recon[j]);
            }
        }
    }
    for (r, s) in base.recon.iter().zip(&m.specs) {
        assert_eq!(r.shape(), &[s.steps, s.dim]);
    }
    assert_eq!(base.prediction.len(), 3);
}

#[test]
fn generate_reproducible_and_label_controlled() {
    let m = model(ModelVariant::MFM, 12);
    let a = m.generate(&mut RngState::new(3)).unwrap();
    let b = m.generate(&mut RngState::new(3)).unwrap();
    assert_eq!(a, b);

    let mut rng = RngState::new(4);
    let code = m.sample_prior(&mut rng);
    let first = m.decode(&m.factorize(&code).unwrap()).unwrap();
    for _ in 0..5 {
        let mut c = code.clone();
        c.z_a = m.latent.za.iter().map(|&d| rng.normal_vec(d)).collect();
        let d = m.decode(&m.factorize(&c).unwrap()).unwrap();
        assert_eq!(d.prediction, first.prediction);
    }
}

#[test]
fn variant_wiring() {
    let mb = model(ModelVariant::MB, 1);
    assert!(!mb.has_decoders());
    assert!(mb.named().iter().all(|(n, _)| !n.starts_with("decoder")));

    let md = model(ModelVariant::MD, 1);
    assert_eq!(md.factor_count(), 1);
    assert!(md.has_decoders());
    assert!(md.private.is_empty());

    let ma = model(ModelVariant::MA, 1);
    assert!(ma.fusion.is_none());
    assert!(!ma.has_decoders());
    assert_eq!(ma.heads.len(), 3);

    let me = model(ModelVariant::ME, 1);
    assert_eq!(me.factor_count(), 2);
    assert!(me.shared_gen.is_some());

    let mfm = model(ModelVariant::MFM, 1);
    assert_eq!(mfm.factor_count(), 4);
    assert_eq!(ModelVariant::default(), ModelVariant::MFM);
}

#[test]
fn deterministic_evaluation() {
    let m = model(ModelVariant::MFM, 13);
    let x = sample(&mut RngState::new(14), &m.specs);
    assert_eq!(m.reconstruct(&x).unwrap(), m.reconstruct(&x).unwrap());
}

#[test]
fn variant_names_parse() {
    for v in ModelVariant::ALL {
        assert_eq!(ModelVariant::parse(v.name()).unwrap(), v);
    }
    assert_eq!(ModelVariant::parse("m_e").unwrap(), ModelVariant::ME);
    assert!(ModelVariant::parse("MZ").is_err());
}

/// Scalar test loss over every output; returns the loss and its gradient wrt
/// reconstructions, prediction and latent.
fn probe_loss(m: &MfmModel, pass: &ForwardPass) -> (f64, PassGrad) {
    let mut loss = 0.0;
    let mut g = PassGrad::default();
    for (k, r) in pass.recon.iter().enumerate() {
        let w = 0.3 + k as f64;
        loss += r.iter().map(|v| 0.5 * w * v * v).sum::<f64>();
        g.recon.push(r.iter().map(|v| w * v).collect());
    }
    loss += pass.prediction.iter().enumerate().map(|(k, v)| (k as f64 + 1.0) * v).sum::<f64>();
    g.prediction = (0..pass.prediction.len()).map(|k| k as f64 + 1.0).collect();
    let z = pass.code.concat();
    loss += z.iter().map(|v| v.sin()).sum::<f64>();
    g.latent = z.iter().map(|v| v.cos()).collect();
    if let Some(gc) = &pass.gaussian {
        loss += gc.mean.iter().map(|v| 0.25 * v * v).sum::<f64>() + gc.log_var.iter().map(|v| 0.1 * v).sum::<f64>();
        g.mean = gc.mean.iter().map(|v| 0.5 * v).collect();
        g.log_var = vec![0.1; gc.log_var.len()];
    }
    let _ = m;
    (loss, g)
}

fn check_gradients(variant: ModelVariant, prior: PriorMatching, arch: SequenceArch, seed: u64) {
    let mut cfg = tiny(variant, prior);
    cfg.sequence_arch = arch;
    let mut rng = RngState::new(seed);
    let m = MfmModel::build(&cfg, &specs(), Task::Classification { classes: 3 }, &mut rng).unwrap();
    let x = sample(&mut rng, &m.specs);
    let flat: Vec<&[f64]> = x.iter().map(Tensor::data).collect();
    let noise = rng.normal_vec(m.latent.total_z());
    let noise_opt = m.is_stochastic().then_some(noise.as_slice());

    let pass = m.forward_pass(&flat, noise_opt);
    let (_, g) = probe_loss(&m, &pass);
    let mut grads = m.zeros_like();
    let dx = m.backward_pass(&pass, &g, &mut grads);

    let numeric = numeric_gradient(
        &m,
        |p: &MfmModel| {
            let pass = p.forward_pass(&flat, noise_opt);
            probe_loss(p, &pass).0
        },
        1e-5,
    );
    let err = max_relative_error(&grads.flatten(), &numeric);
    assert!(err <= 1e-4, "{variant} {prior:?} {arch:?}: param gradient error {err}");

    for i in 0..x.len() {
        let num = crate::gradcheck::numeric_gradient_vec(
            x[i].data(),
            |xi| {
                let mut f = flat.clone();
                f[i] = xi;
                let pass = m.forward_pass(&f, noise_opt);
                probe_loss(&m, &pass).0
            },
            1e-5,
        );
        let err = max_relative_error(&dx[i], &num);
        assert!(err <= 1e-4, "{variant}: input gradient error {err} on modality {i}");
    }
}

#[test]
fn every_variant_backpropagates_exactly() {
    for (k, v) in ModelVariant::ALL.into_iter().enumerate() {
        check_gradients(v, PriorMatching::Mmd, SequenceArch::Gru, 20 + k as u64);
    }
    check_gradients(ModelVariant::MFM, PriorMatching::Mmd, SequenceArch::Dense, 31);
}

#[test]
fn gaussian_encoders_backpropagate_exactly() {
    check_gradients(ModelVariant::MFM, PriorMatching::Kl, SequenceArch::Gru, 40);
    check_gradients(ModelVariant::ME, PriorMatching::Kl, SequenceArch::Dense, 41);
}

#[test]
fn latent_concat_round_trip() {
    let m = model(ModelVariant::MFM, 50);
    let code = m.sample_prior(&mut RngState::new(1));
    assert_eq!(LatentCode::from_concat(&code.concat(), &m.latent), code);
}
