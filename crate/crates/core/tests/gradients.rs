use std::time::Instant;

use m3net::fixtures::{toy_config, toy_grad_problem};
use m3net::gradcheck::{grad_check, GradCheckOptions};
use m3net::{ModelConfig, Variant};

#[test]
fn every_variant_passes_at_toy_size() {
    let started = Instant::now();
    for variant in Variant::ALL {
        for seed in 0..3 {
            let cfg = toy_config(variant, seed);
            let mut obj = toy_grad_problem(&cfg, 2, seed).unwrap();
            let report = grad_check(&mut obj, GradCheckOptions::default()).unwrap();
            assert!(report.passed(), "{variant} seed {seed}\n{report}");
            // every parameter was perturbed and compared
            assert_eq!(report.params.len(), obj.model.store().len());
        }
    }
    assert!(started.elapsed().as_secs() < 60, "took {:?}", started.elapsed());
}

#[test]
fn flag_variants_pass() {
    for (softmax, residual) in [(true, true), (false, false)] {
        let cfg = ModelConfig {
            grouping_softmax: softmax,
            moe_residual: residual,
            ..toy_config(Variant::Full, 11)
        };
        let mut obj = toy_grad_problem(&cfg, 2, 11).unwrap();
        let report = grad_check(&mut obj, GradCheckOptions::default()).unwrap();
        assert!(report.passed(), "softmax={softmax} residual={residual}\n{report}");
    }
}

#[test]
fn scaled_gradients_are_detected() {
    let cfg = toy_config(Variant::Full, 2);
    let mut obj = toy_grad_problem(&cfg, 2, 2).unwrap();
    obj.grad_scale = 1.01;
    let report = grad_check(&mut obj, GradCheckOptions::default()).unwrap();
    assert!(!report.passed());
    assert!(report.max_rel_err() > 5e-3);
}

#[test]
fn raw_scale_masked_loss_gradients_pass() {
    // the training objective itself: denormalized predictions, zero-masked MAE
    let cfg = toy_config(Variant::Full, 5);
    let (model, batch, splits) = m3net::fixtures::toy_problem(&cfg, 2, 5).unwrap();
    let mut obj = m3net::gradcheck::ModelLoss::new(model, batch, splits.stats.clone());
    let opts = GradCheckOptions {
        tol: 1e-3,
        ..Default::default()
    };
    let report = grad_check(&mut obj, opts).unwrap();
    assert!(report.passed(), "{report}");
}
