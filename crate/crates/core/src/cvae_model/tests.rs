use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{gradient_check, GradCheckConfig};
use crate::similarity::kl_diag_gaussian;

fn small_config(dims: &[usize]) -> ModelConfig {
    ModelConfig {
        dims: dims.to_vec(),
        encoder_widths: [4, 4, 4, 2],
        decoder_widths: [4, 4, 4, 4],
        latent_dim: 3,
        ..ModelConfig::default()
    }
}

fn random_image(grid: &Grid, rng: &mut ChaCha8Rng) -> ScalarImage {
    ScalarImage::from_fn(grid.clone(), |_| rng.random::<f64>())
}

fn setup(cfg: &ModelConfig, seed: u64) -> (ModelParams, ScalarImage, ScalarImage) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ModelParams::init(cfg, &mut rng).unwrap();
    let grid = cfg.grid().unwrap();
    let f = random_image(&grid, &mut rng);
    let m = random_image(&grid, &mut rng);
    (params, f, m)
}

#[test]
fn default_sizes() {
    let cfg = ModelConfig::default();
    let (params, f, m) = setup(&cfg, 0);
    assert_eq!(params.tensors().len(), 26);
    let n = params.num_parameters();
    assert!(n > 30_000 && n < 300_000, "{n}");
    let (mu, logvar) = encode(&f, &m, &params).unwrap();
    assert_eq!(mu.len(), 16);
    assert_eq!(logvar.len(), 16);
}

#[test]
fn config_validation() {
    let ok = ModelConfig::default();
    assert!(ok.validate().is_ok());
    for bad in [
        ModelConfig {
            dims: vec![60, 64],
            ..ok.clone()
        },
        ModelConfig {
            dims: vec![64],
            ..ok.clone()
        },
        ModelConfig {
            latent_dim: 0,
            ..ok.clone()
        },
        ModelConfig {
            lambda: 0.0,
            ..ok.clone()
        },
        ModelConfig {
            smoothing_kernel: 14,
            ..ok.clone()
        },
        ModelConfig {
            encoder_widths: [16, 0, 32, 4],
            ..ok.clone()
        },
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
}

#[test]
fn unknown_config_keys_are_rejected() {
    assert!(serde_json::from_str::<ModelConfig>(r#"{"latent_dim": 8}"#).is_ok());
    assert!(serde_json::from_str::<ModelConfig>(r#"{"latent_dims": 8}"#).is_err());
}

#[test]
fn encoder_is_deterministic_and_ordered() {
    let cfg = small_config(&[16, 16]);
    let (params, f, m) = setup(&cfg, 1);
    let zero = ScalarImage::zeros(cfg.grid().unwrap());
    assert_eq!(
        encode(&zero, &zero, &params).unwrap(),
        encode(&zero, &zero, &params).unwrap()
    );
    assert_ne!(encode(&f, &m, &params).unwrap(), encode(&m, &f, &params).unwrap());
}

#[test]
fn decoder_shape_determinism_and_conditioning() {
    let cfg = small_config(&[16, 24]);
    let (params, f, m) = setup(&cfg, 2);
    let z = [0.3, -1.0, 0.5];
    let v = decode(&z, &m, &params).unwrap();
    assert_eq!(v.grid().dims(), &[16, 24]);
    assert_eq!(v.vectors().len(), 16 * 24 * 2);
    assert_eq!(v.kind(), FieldKind::Velocity);
    assert_eq!(v, decode(&z, &m, &params).unwrap());
    assert_ne!(v, decode(&z, &f, &params).unwrap());
    assert!(decode(&[0.0; 2], &m, &params).is_err());
}

#[test]
fn grid_mismatch_is_reported() {
    let cfg = small_config(&[16, 16]);
    let (params, f, _) = setup(&cfg, 3);
    let other = ScalarImage::zeros(Grid::unit(&[16, 24]).unwrap());
    assert!(matches!(encode(&f, &other, &params), Err(Error::GridMismatch { .. })));
}

#[test]
fn shape_invariance_across_sizes() {
    for dims in [vec![32, 32], vec![64, 64], vec![32, 32, 32]] {
        let cfg = small_config(&dims);
        let (params, f, m) = setup(&cfg, 4);
        let out = register(&m, &f, &params, &RegistrationMode::Deterministic).unwrap();
        assert_eq!(out.velocity.grid().dims(), dims.as_slice());
        assert_eq!(out.phi.grid().dims(), dims.as_slice());
        assert_eq!(out.warped.grid().dims(), dims.as_slice());
    }
}

#[test]
fn register_is_repeatable_and_regular() {
    let cfg = ModelConfig {
        dims: vec![32, 32],
        ..ModelConfig::default()
    };
    let (params, f, m) = setup(&cfg, 5);
    let a = register(&m, &f, &params, &RegistrationMode::Deterministic).unwrap();
    let b = register(&m, &f, &params, &RegistrationMode::Deterministic).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.latent.z, a.latent.mu);
    assert!(a.metrics.neg_jac_fraction <= 0.005);
    // phi is exactly the exponential of the returned velocity.
    assert_eq!(a.phi, exponentiate(&a.velocity, cfg.scaling_steps).unwrap());
    let lcc = a.metrics.lcc.unwrap();
    assert!((0.0..1.0).contains(&lcc));

    let noise = vec![0.5; 16];
    let s = register(&m, &f, &params, &RegistrationMode::Stochastic { noise }).unwrap();
    assert_ne!(s.latent.z, s.latent.mu);
    let zero = register(&m, &f, &params, &RegistrationMode::Stochastic { noise: vec![0.0; 16] }).unwrap();
    assert_eq!(zero.velocity, a.velocity);
}

#[test]
fn kl_term_vanishes_for_standard_posterior() {
    let cfg = small_config(&[16, 16]);
    let (mut params, f, m) = setup(&cfg, 6);
    for name in [
        "encoder.mu.weight",
        "encoder.mu.bias",
        "encoder.logvar.weight",
        "encoder.logvar.bias",
    ] {
        let i = params.names().iter().position(|n| n == name).unwrap();
        params.tensors_mut()[i].data_mut().fill(0.0);
    }
    let l = loss(&f, &m, &params, &[0.1, -0.2, 0.3]).unwrap();
    assert_eq!(l.kl, 0.0);
    assert_eq!(l.total, l.reconstruction);
    assert!(l.reconstruction < 0.0 && l.reconstruction > -cfg.lambda);
}

#[test]
fn loss_terms_match_standalone_criteria() {
    let cfg = small_config(&[16, 16]);
    let (params, f, m) = setup(&cfg, 7);
    let noise = [0.4, -0.1, 1.2];
    let l = loss(&f, &m, &params, &noise).unwrap();
    let (mu, logvar) = encode(&f, &m, &params).unwrap();
    assert!((l.kl - kl_diag_gaussian(&mu, &logvar).unwrap()).abs() < 1e-12);
    let z: Vec<f64> = mu
        .iter()
        .zip(&logvar)
        .zip(&noise)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect();
    let v = decode(&z, &m, &params).unwrap();
    let expected = crate::similarity::lcc_loss_term(
        &f.normalized(),
        &m.normalized(),
        &v,
        &cfg.lcc,
        cfg.scaling_steps,
        cfg.lambda,
    )
    .unwrap();
    assert!(
        (l.reconstruction - expected).abs() < 1e-9,
        "{} vs {expected}",
        l.reconstruction
    );
    let sq: f64 = params.tensors().iter().map(|t| t.dot(t)).sum();
    assert!((l.weight_penalty - 0.5 * 1e-4 * sq).abs() < 1e-12);

    let (l2, grads) = loss_and_gradients(&f, &m, &params, &noise).unwrap();
    assert_eq!(l, l2);
    assert_eq!(grads.len(), params.tensors().len());
}

#[test]
fn full_loss_gradient_matches_finite_differences() {
    let cfg = small_config(&[16, 16]);
    let (params, f, m) = setup(&cfg, 8);
    let noise = [0.4, -0.1, 1.2];
    let check = GradCheckConfig {
        probes_per_tensor: Some(3),
        seed: 11,
        ..GradCheckConfig::default()
    };
    let report = gradient_check(params.tensors(), |g, p| loss_node(g, p, &cfg, &f, &m, &noise), &check).unwrap();
    let expected: usize = params.tensors().iter().map(|t| t.len().min(3)).sum();
    assert_eq!(report.checked, expected);
    assert!(report.passed(), "{report:?}");
}

#[test]
fn named_round_trip_and_validation() {
    let cfg = small_config(&[16, 16]);
    let (params, _, _) = setup(&cfg, 9);
    let named: Vec<(String, Tensor)> = params
        .names()
        .iter()
        .cloned()
        .zip(params.tensors().iter().cloned())
        .collect();
    let back = ModelParams::from_named(&cfg, named.clone()).unwrap();
    assert_eq!(back, params);
    let mut wrong = named.clone();
    wrong[3].1 = Tensor::zeros(&[5]);
    assert!(ModelParams::from_named(&cfg, wrong).is_err());
    assert!(ModelParams::from_named(&cfg, named[1..].to_vec()).is_err());
    let other = small_config(&[16, 24]);
    assert!(ModelParams::from_named(&other, named).is_err());
}
