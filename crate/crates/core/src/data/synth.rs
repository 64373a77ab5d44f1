use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{make_split, DatasetBundle};
use crate::error::{GcmError, Result};
use crate::oracle::OracleWorld;
use crate::rng;
use crate::tensor::Mat;

const MAX_ATTEMPTS: usize = 100;
/// Minimum pairwise distance between class attribute vectors.
pub const ATTRIBUTE_MARGIN: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    Linear,
    Tanh,
}

impl Nonlinearity {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Nonlinearity::Linear => v,
            Nonlinearity::Tanh => v.tanh(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthWorldConfig {
    pub num_seen: usize,
    pub num_unseen: usize,
    pub attr_dim: usize,
    pub z_dim: usize,
    pub feature_dim: usize,
    pub samples_per_class: usize,
    pub nonlinearity: Nonlinearity,
    pub seed: u64,
    /// Fraction of each seen class placed in the training split.
    pub train_fraction: f64,
}

impl Default for SynthWorldConfig {
    fn default() -> Self {
        Self {
            num_seen: 6,
            num_unseen: 4,
            attr_dim: 4,
            z_dim: 4,
            feature_dim: 16,
            samples_per_class: 200,
            nonlinearity: Nonlinearity::Linear,
            seed: 0,
            train_fraction: 0.8,
        }
    }
}

impl SynthWorldConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        for (k, v) in [
            ("num_seen", self.num_seen),
            ("attr_dim", self.attr_dim),
            ("z_dim", self.z_dim),
            ("samples_per_class", self.samples_per_class),
        ] {
            if v == 0 {
                errs.push(format!("{k} must be at least 1"));
            }
        }
        if self.feature_dim < self.z_dim + self.attr_dim {
            errs.push(format!(
                "feature_dim {} must be at least z_dim + attr_dim = {}",
                self.feature_dim,
                self.z_dim + self.attr_dim
            ));
        }
        if !(0.0..=1.0).contains(&self.train_fraction) {
            errs.push("train_fraction must lie in [0, 1]".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(GcmError::Config(errs))
        }
    }
}

fn min_pairwise_distance(m: &Mat) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..m.rows() {
        for j in i + 1..m.rows() {
            let d: f64 = m.row_slice(i).iter().zip(m.row_slice(j)).map(|(a, b)| (a - b).powi(2)).sum();
            best = best.min(d.sqrt());
        }
    }
    best
}

/// Numerical column rank via singular values.
pub(crate) fn column_rank(m: &Mat) -> usize {
    let dm = DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice());
    let sv = dm.singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let tol = max * m.rows().max(m.cols()) as f64 * f64::EPSILON;
    sv.iter().filter(|&&s| s > tol).count()
}

/// Draws a world, its samples and a seen/unseen split.
///
/// Every stored factor is rounded to f32 so the oracle sidecar round-trips
/// exactly; features are rounded to f32 after generation for the same reason.
pub fn generate_synthetic_world(cfg: &SynthWorldConfig) -> Result<(DatasetBundle, OracleWorld)> {
    cfg.validate()?;
    let num_classes = cfg.num_seen + cfg.num_unseen;
    let mut rng = rng::rng_for(cfg.seed, "synth");

    let attributes = (0..MAX_ATTEMPTS)
        .map(|_| rng::normal_mat(&mut rng, num_classes, cfg.attr_dim).quantize_f32())
        .find(|m| num_classes < 2 || min_pairwise_distance(m) >= ATTRIBUTE_MARGIN)
        .ok_or_else(|| GcmError::Degenerate("could not draw class attributes with the required margin".into()))?;

    let k = cfg.z_dim + cfg.attr_dim;
    let scale = 1.0 / (k as f64).sqrt();
    let mut mixing = None;
    for _ in 0..MAX_ATTEMPTS {
        let ab = rng::normal_mat(&mut rng, cfg.feature_dim, k).map(|v| v * scale).quantize_f32();
        if column_rank(&ab) == k {
            mixing = Some(ab);
            break;
        }
    }
    let ab = mixing.ok_or_else(|| GcmError::Degenerate("[A|B] stayed rank deficient after 100 attempts".into()))?;
    let a = Mat::from_fn(cfg.feature_dim, cfg.z_dim, |i, j| ab.get(i, j));
    let b = Mat::from_fn(cfg.feature_dim, cfg.attr_dim, |i, j| ab.get(i, cfg.z_dim + j));

    let n = num_classes * cfg.samples_per_class;
    let labels: Vec<u32> = (0..num_classes as u32)
        .flat_map(|c| std::iter::repeat_n(c, cfg.samples_per_class))
        .collect();
    let z_star = rng::normal_mat(&mut rng, n, cfg.z_dim).quantize_f32();

    let world = OracleWorld::new(a, b, cfg.nonlinearity, attributes.clone(), z_star, labels.clone())?;
    let features = world.sample_features().quantize_f32();

    let seen: Vec<u32> = (0..cfg.num_seen as u32).collect();
    let unseen: Vec<u32> = (cfg.num_seen as u32..num_classes as u32).collect();
    let split = make_split(&labels, &seen, &unseen, cfg.train_fraction, rng::derive_seed(cfg.seed, "split"))?;
    let bundle = DatasetBundle { features, labels, attributes, split, image_shape: None };
    bundle.validate()?;
    Ok((bundle, world))
}
