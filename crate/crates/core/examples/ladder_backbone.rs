//! The convolutional ladder backbone on small images.
//!
//! `cargo run --release --example ladder_backbone`

use gcmcf::data::{make_split, DatasetBundle};
use gcmcf::model::{GcmModel, ImageShape, LadderLayer, ModelConfig};
use gcmcf::rng;
use gcmcf::tensor::Mat;
use gcmcf::training::{fit, TrainingConfig, TrainingSet};
use rand::Rng as _;

fn main() -> gcmcf::error::Result<()> {
    // Three classes of 8x8 images: a bright quadrant per class plus noise.
    let shape = ImageShape { channels: 1, height: 8, width: 8 };
    let mut r = rng::rng_for(0, "images");
    let per_class = 60;
    let labels: Vec<u32> = (0..3).flat_map(|c| std::iter::repeat_n(c, per_class)).collect();
    let features = Mat::from_fn(labels.len(), shape.len(), |i, p| {
        let (row, col) = (p / 8, p % 8);
        let quadrant = (row / 4) * 2 + col / 4;
        let base = if quadrant == labels[i] as usize { 0.8 } else { 0.1 };
        (base + 0.1 * r.random::<f64>()).min(1.0)
    });
    let attributes = Mat::from_fn(3, 3, |c, j| if c == j { 1.0 } else { 0.0 });
    let split = make_split(&labels, &[0, 1], &[2], 0.8, 0)?;
    let bundle = DatasetBundle { features, labels, attributes, split, image_shape: Some(shape) };
    bundle.validate()?;

    let layers = vec![LadderLayer { channels: 4, kernel: 3, stride: 2 }, LadderLayer { channels: 8, kernel: 3, stride: 2 }];
    let cfg = ModelConfig::ladder(shape, 3, layers);
    println!("encoder activations: {:?}", cfg.ladder_geometry().expect("valid geometry"));
    let mut model = GcmModel::new(cfg, 0)?;
    let log = fit(&mut model, &TrainingSet::from_bundle(&bundle)?, &TrainingConfig { beta: 4.0, epochs: 60, rho: 0.0, ..Default::default() })?;
    let (first, last) = (log.epochs.first().unwrap().losses, log.epochs.last().unwrap().losses);
    println!("reconstruction error {:.3} -> {:.3}", first.loss_recon, last.loss_recon);

    let (x, _) = bundle.test_set();
    let (mean, _) = model.encode_batch(&x)?;
    // Re-render the first test image as class 1 (bright top-right quadrant).
    let y = bundle.attribute_table(&[1]);
    let img = model.decode_batch(&mean.select_rows(&[0]), &y, None)?;
    for row in 0..8 {
        let line: String = img.row_slice(0)[row * 8..row * 8 + 8].iter().map(|v| if *v > 0.5 { '#' } else { '.' }).collect();
        println!("  {line}");
    }
    Ok(())
}
