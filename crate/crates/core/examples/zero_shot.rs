//! Generalized zero-shot evaluation: two-stage inference, calibration sweep
//! and the seen-unseen curve.
//!
//! `cargo run --release --example zero_shot`

use gcmcf::data::{generate_synthetic_world, SynthWorldConfig};
use gcmcf::inference::{evaluate_zsl, InferenceConfig};
use gcmcf::model::{GcmModel, ModelConfig, OutputActivation};
use gcmcf::training::{fit, TrainingConfig, TrainingSet};

fn main() -> gcmcf::error::Result<()> {
    let (bundle, _) = generate_synthetic_world(&SynthWorldConfig { seed: 1, ..Default::default() })?;
    let mut cfg = ModelConfig::mlp(bundle.feature_dim(), bundle.attr_dim());
    cfg.output_activation = OutputActivation::Identity;
    let mut model = GcmModel::new(cfg, 1)?;
    fit(&mut model, &TrainingSet::from_bundle(&bundle)?, &TrainingConfig { beta: 1.0, epochs: 150, seed: 1, ..Default::default() })?;

    for omega in [0.0, 2.0, -2.0] {
        let inf = InferenceConfig { omega_cal: omega, ..Default::default() };
        let (r, run) = evaluate_zsl(&model, &bundle, &inf, 1, "")?;
        println!(
            "omega_cal {omega:+.1}  K {}  U {:.1}  S {:.1}  H {:.1}  S_b {:.3}  U_b {:.3}  CVb {:.4}",
            run.k,
            r.u.unwrap(),
            r.s.unwrap(),
            r.h.unwrap(),
            r.s_b.unwrap(),
            r.u_b.unwrap(),
            r.cvb.unwrap()
        );
        if omega == 0.0 {
            println!("AUSUC {:.4} over {} calibration points", r.ausuc.unwrap(), r.suc_curve.len());
        }
    }
    Ok(())
}
