//! Ground-truth faithfulness on a linear world: the oracle itself, a fitted
//! linear model, and a trained network against its ablation.
//!
//! `cargo run --release --example oracle_faithfulness`

use gcmcf::data::{generate_synthetic_world, SynthWorldConfig};
use gcmcf::model::{GcmModel, ModelConfig, OutputActivation};
use gcmcf::oracle::{
    disentanglement_residual, faithfulness_report, verify_injectivity, FaithfulnessConfig, LinearRegressionModel, OracleModel,
    SetAttribute,
};
use gcmcf::training::{fit, TrainingConfig, TrainingSet};

fn main() -> gcmcf::error::Result<()> {
    let (bundle, world) = generate_synthetic_world(&SynthWorldConfig::default())?;
    let inj = verify_injectivity(&world, 500, 1.0, 0);
    println!("injective: {} (worst distance ratio {:.3e})", inj.passed, inj.worst_ratio);

    let target = SetAttribute(bundle.attribute(bundle.split.unseen_class_ids[0]).to_vec());
    let samples: Vec<usize> = bundle.split.test_idx.iter().copied().step_by(4).collect();
    println!("oracle residual {:.2e}", disentanglement_residual(&OracleModel { world: &world }, &world, &target, &samples)?);
    let linear = LinearRegressionModel::fit_world(&world, &bundle.split.train_idx)?;
    println!("least-squares model residual {:.2e}", disentanglement_residual(&linear, &world, &target, &samples)?);

    let cfg = FaithfulnessConfig::default();
    for (name, nu, rho) in [("full", 1.0, 1.0), ("ablation nu=rho=0", 0.0, 0.0)] {
        let mut mc = ModelConfig::mlp(bundle.feature_dim(), bundle.attr_dim());
        mc.output_activation = OutputActivation::Identity;
        let mut model = GcmModel::new(mc, 0)?;
        let tc = TrainingConfig { beta: 1.0, nu, rho, epochs: 200, ..Default::default() };
        fit(&mut model, &TrainingSet::from_bundle(&bundle)?, &tc)?;
        let r = faithfulness_report(&model, &world, &bundle, &cfg)?;
        println!(
            "{name:<18} residual {:.4}  manifold distance: counterfactual {:.4}, prior {:.4}",
            r.residual, r.mean_manifold_distance_cf, r.mean_manifold_distance_prior
        );
    }
    Ok(())
}
