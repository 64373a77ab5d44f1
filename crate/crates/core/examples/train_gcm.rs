//! Train the generative model on a synthetic world and print the loss trace.
//!
//! `cargo run --release --example train_gcm`

use gcmcf::data::{generate_synthetic_world, SynthWorldConfig};
use gcmcf::model::{GcmModel, ModelConfig, OutputActivation};
use gcmcf::training::{fit_with, TrainingConfig, TrainingSet};

fn main() -> gcmcf::error::Result<()> {
    let (bundle, _) = generate_synthetic_world(&SynthWorldConfig::default())?;
    let mut cfg = ModelConfig::mlp(bundle.feature_dim(), bundle.attr_dim());
    cfg.output_activation = OutputActivation::Identity;
    let mut model = GcmModel::new(cfg, 0)?;
    let tc = TrainingConfig { beta: 1.0, epochs: 60, ..Default::default() };
    let data = TrainingSet::from_bundle(&bundle)?;
    let log = fit_with(&mut model, &data, &tc, |e| {
        if e.epoch % 10 == 0 {
            let l = &e.losses;
            println!(
                "epoch {:>3}  beta {:.2}  recon {:.4}  kl {:.4}  L_Y {:.4}  L_F {:.4}",
                e.epoch, e.beta_effective, l.loss_recon, l.loss_kl, l.loss_y, l.loss_f
            );
        }
    })?;
    let dir = tempfile::tempdir()?;
    let ckpt = dir.path().join("model.ckpt");
    model.save(&ckpt)?;
    println!("{} epochs logged; checkpoint reloads equal: {}", log.epochs.len(), GcmModel::load(&ckpt)? == model);
    Ok(())
}
