//! Open-set recognition: one-hot seen attributes, threshold on the distance
//! to the nearest seen-class counterfactual, F1 against openness.
//!
//! `cargo run --release --example open_set`

use gcmcf::data::{generate_synthetic_world, SynthWorldConfig};
use gcmcf::inference::{evaluate_osr, InferenceConfig};
use gcmcf::model::{GcmModel, ModelConfig, OutputActivation};
use gcmcf::training::{fit, RegressorLoss, TrainingConfig, TrainingSet};

fn main() -> gcmcf::error::Result<()> {
    let (dense, _) = generate_synthetic_world(&SynthWorldConfig { seed: 2, ..Default::default() })?;
    let bundle = dense.to_open_set();
    println!("attributes are one-hot over seen classes: {}", bundle.has_one_hot_seen_attributes());

    let mut cfg = ModelConfig::mlp(bundle.feature_dim(), bundle.attr_dim());
    cfg.output_activation = OutputActivation::Identity;
    let mut model = GcmModel::new(cfg, 2)?;
    let tc = TrainingConfig { beta: 1.0, rho: 0.0, epochs: 100, seed: 2, regressor_loss: RegressorLoss::CrossEntropy, ..Default::default() };
    fit(&mut model, &TrainingSet::from_bundle(&bundle)?, &tc)?;

    let inf = InferenceConfig { tune_tau: true, ..Default::default() };
    let (r, _) = evaluate_osr(&model, &bundle, &inf, 2, "")?;
    println!("tau {:.3}  macro-F1 {:.3}  openness {:.3}", r.tau.unwrap(), r.f1_macro.unwrap(), r.openness.unwrap());
    for p in &r.openness_series {
        println!("  {} unseen classes  openness {:.3}  F1 {:.3}", p.num_unseen, p.openness, p.f1_macro);
    }
    Ok(())
}
