//! Abduct a sample's latent, intervene on its class attribute, and compare
//! the counterfactuals with the oracle's ground truth.
//!
//! `cargo run --release --example counterfactuals`

use gcmcf::counterfactual::{counterfactual_set, CounterfactualRequest, ZMode};
use gcmcf::data::{generate_synthetic_world, SynthWorldConfig};
use gcmcf::model::{GcmModel, ModelConfig, OutputActivation};
use gcmcf::training::{fit, TrainingConfig, TrainingSet};

fn main() -> gcmcf::error::Result<()> {
    let (bundle, world) = generate_synthetic_world(&SynthWorldConfig::default())?;
    let mut cfg = ModelConfig::mlp(bundle.feature_dim(), bundle.attr_dim());
    cfg.output_activation = OutputActivation::Identity;
    let mut model = GcmModel::new(cfg, 0)?;
    fit(&mut model, &TrainingSet::from_bundle(&bundle)?, &TrainingConfig { beta: 1.0, epochs: 100, ..Default::default() })?;

    let i = bundle.split.test_idx[0];
    let classes: Vec<u32> = (0..bundle.num_classes() as u32).collect();
    let targets: Vec<Vec<f64>> = classes.iter().map(|&c| bundle.attribute(c).to_vec()).collect();
    let x = bundle.features.row_slice(i).to_vec();
    println!("sample {i}, true class {}", bundle.labels[i]);

    let set = counterfactual_set(&model, &CounterfactualRequest { x: x.clone(), targets: targets.clone(), z_mode: ZMode::PosteriorMean })?;
    let (z_true, _) = world.factors(i);
    for e in &set.entries {
        let truth = world.g(z_true, &targets[e.target]);
        let err: f64 = e.x_tilde.iter().zip(&truth).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        println!("  class {}: dist(x, x~) {:.3}   |x~ - oracle| {:.3}", classes[e.target], e.distance, err);
    }

    // Several posterior draws per target; the set keeps the closest.
    let sampled = counterfactual_set(&model, &CounterfactualRequest { x, targets, z_mode: ZMode::Sample { n: 8, seed: 1 } })?;
    println!("min distance over 8 draws per class: {:?}", sampled.target_distances(classes.len()).iter().map(|d| (d * 1e3).round() / 1e3).collect::<Vec<_>>());
    Ok(())
}
