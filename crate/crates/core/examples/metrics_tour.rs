//! The evaluation quantities on small hand-made inputs.
//!
//! `cargo run --example metrics_tour`

use gcmcf::metrics::{ausuc, cvb, harmonic_mean, macro_f1_unknown, openness, per_class_top1, SucPoint};

fn main() -> gcmcf::error::Result<()> {
    // Per-class averaging: a large class cannot hide a small failed one.
    let labels = [0, 0, 0, 0, 0, 0, 1, 1];
    let preds = [0, 0, 0, 0, 0, 0, 0, 0];
    println!("per-class top-1 {:.2} (pooled accuracy would be 0.75)", per_class_top1(&preds, &labels, &[0, 1])?);
    println!("H(61.0, 59.7) = {:.2}", harmonic_mean(61.0, 59.7)?);
    println!("CVb(1.0, 0.5) = {:.4}", cvb(1.0, 0.5)?);
    let curve = [
        SucPoint { omega: f64::NEG_INFINITY, u: 0.0, s: 0.9 },
        SucPoint { omega: 0.0, u: 0.6, s: 0.7 },
        SucPoint { omega: f64::INFINITY, u: 0.8, s: 0.0 },
    ];
    println!("AUSUC {:.3}", ausuc(&curve)?);
    let f1 = macro_f1_unknown(&[Some(0), None, None, None], &[Some(0), Some(0), None, None], &[0])?;
    println!("macro-F1 with unknown {f1:.3}");
    for m in [6, 10, 16] {
        println!("openness(6 training classes, {m} test classes) = {:.3}", openness(6, m)?);
    }
    Ok(())
}
