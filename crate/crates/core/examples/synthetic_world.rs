//! Sample a synthetic world, check its bundle, and round-trip it through disk.
//!
//! `cargo run --release --example synthetic_world`

use gcmcf::data::{generate_synthetic_world, DatasetBundle, Nonlinearity, SynthWorldConfig};

fn main() -> gcmcf::error::Result<()> {
    let cfg = SynthWorldConfig { nonlinearity: Nonlinearity::Tanh, seed: 3, ..Default::default() };
    let (bundle, world) = generate_synthetic_world(&cfg)?;
    bundle.validate()?;
    println!(
        "{} samples, {} features, {} classes ({} seen / {} unseen)",
        bundle.num_samples(),
        bundle.feature_dim(),
        bundle.num_classes(),
        bundle.split.seen_class_ids.len(),
        bundle.split.unseen_class_ids.len()
    );
    println!("train {} / test {}", bundle.split.train_idx.len(), bundle.split.test_idx.len());
    println!("singular values of [A|B]: {:?}", world.singular_values());

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("world.ds");
    bundle.save(&path)?;
    let back = DatasetBundle::load(&path)?;
    println!("bundle round trip identical: {}", back == bundle);

    // Moving one unseen-class sample into the training split is refused.
    let mut leaky = bundle.clone();
    let i = leaky.labels.iter().position(|&l| leaky.split.is_unseen(l)).expect("unseen samples exist");
    leaky.split.train_idx.push(i);
    println!("leaking split: {}", leaky.validate().unwrap_err());
    Ok(())
}
