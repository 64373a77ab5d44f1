//! Ground-truth checks on synthetic worlds: injectivity of the generator,
//! intrinsic-disentanglement residuals, and distance to the data manifold.
//!
//! A world generates `x = g(z, y) = h(A z + B y)` with `h` the identity or
//! `tanh`. The data manifold is the union over classes of `{g(z, y_c)}`.

use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::checkpoint::TensorContainer;
use crate::counterfactual::{counterfactual_grid, dist, CounterfactualModel};
use crate::data::{DatasetBundle, Nonlinearity};
use crate::error::{GcmError, Result};
use crate::model::GcmModel;
use crate::rng;
use crate::tensor::{gemm, Mat};

#[derive(Clone, Debug, PartialEq)]
pub struct OracleWorld {
    a: Mat,
    b: Mat,
    nonlinearity: Nonlinearity,
    attributes: Mat,
    z_star: Mat,
    labels: Vec<u32>,
}

fn to_dmatrix(m: &Mat) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

fn from_dmatrix(m: &DMatrix<f64>) -> Mat {
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

impl OracleWorld {
    pub fn new(a: Mat, b: Mat, nonlinearity: Nonlinearity, attributes: Mat, z_star: Mat, labels: Vec<u32>) -> Result<Self> {
        let shape = |m: String| Err(GcmError::Shape(m));
        if a.rows() != b.rows() {
            return shape(format!("A has {} rows but B has {}", a.rows(), b.rows()));
        }
        if attributes.cols() != b.cols() {
            return shape("attribute width differs from B's column count".into());
        }
        if z_star.cols() != a.cols() || z_star.rows() != labels.len() {
            return shape("z* must have one row of width z_dim per label".into());
        }
        if labels.iter().any(|&l| l as usize >= attributes.rows()) {
            return Err(GcmError::Validation("a recorded label has no attribute row".into()));
        }
        Ok(Self { a, b, nonlinearity, attributes, z_star, labels })
    }

    pub fn a(&self) -> &Mat {
        &self.a
    }

    pub fn b(&self) -> &Mat {
        &self.b
    }

    pub fn nonlinearity(&self) -> Nonlinearity {
        self.nonlinearity
    }

    pub fn attributes(&self) -> &Mat {
        &self.attributes
    }

    pub fn z_star(&self) -> &Mat {
        &self.z_star
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn feature_dim(&self) -> usize {
        self.a.rows()
    }

    pub fn z_dim(&self) -> usize {
        self.a.cols()
    }

    pub fn attr_dim(&self) -> usize {
        self.b.cols()
    }

    /// Recorded factors `(z*, y*)` of sample `i`.
    pub fn factors(&self, i: usize) -> (&[f64], &[f64]) {
        (self.z_star.row_slice(i), self.attributes.row_slice(self.labels[i] as usize))
    }

    pub fn g(&self, z: &[f64], y: &[f64]) -> Vec<f64> {
        (0..self.feature_dim())
            .map(|r| {
                let s: f64 = self.a.row_slice(r).iter().zip(z).map(|(p, q)| p * q).sum::<f64>()
                    + self.b.row_slice(r).iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
                self.nonlinearity.apply(s)
            })
            .collect()
    }

    /// Row-wise `g` over matching rows of `z` and `y`.
    pub fn g_batch(&self, z: &Mat, y: &Mat) -> Result<Mat> {
        if z.cols() != self.z_dim() || y.cols() != self.attr_dim() || z.rows() != y.rows() {
            return Err(GcmError::Shape("g_batch expects matching z and y rows".into()));
        }
        let pre = gemm(z, false, &self.a, true).zip_map(&gemm(y, false, &self.b, true), |p, q| p + q);
        Ok(pre.map(|v| self.nonlinearity.apply(v)))
    }

    /// Noise-free features of every recorded sample.
    pub fn sample_features(&self) -> Mat {
        let idx: Vec<usize> = self.labels.iter().map(|&l| l as usize).collect();
        self.g_batch(&self.z_star, &self.attributes.select_rows(&idx)).expect("shapes checked at construction")
    }

    pub fn singular_values(&self) -> Vec<f64> {
        let ab = self.a.hstack(&self.b).expect("A and B share rows");
        let mut sv: Vec<f64> = to_dmatrix(&ab).singular_values().iter().copied().collect();
        sv.sort_by(|p, q| q.total_cmp(p));
        sv
    }

    /// Inverts `g` through the pseudoinverse of `[A|B]`, returning `(z, y)`.
    /// `tanh` worlds are unwrapped with `atanh` first.
    pub fn invert(&self, x: &Mat) -> Result<(Mat, Mat)> {
        if x.cols() != self.feature_dim() {
            return Err(GcmError::Shape(format!("x has {} columns, expected {}", x.cols(), self.feature_dim())));
        }
        let ab = self.a.hstack(&self.b)?;
        let pinv = to_dmatrix(&ab)
            .pseudo_inverse(1e-12)
            .map_err(|e| GcmError::Degenerate(format!("pseudoinverse failed: {e}")))?;
        let pre = match self.nonlinearity {
            Nonlinearity::Linear => x.clone(),
            Nonlinearity::Tanh => x.map(|v| v.clamp(-1.0 + 1e-15, 1.0 - 1e-15).atanh()),
        };
        let v = gemm(&pre, false, &from_dmatrix(&pinv), true);
        let k = self.z_dim();
        let z = Mat::from_fn(v.rows(), k, |i, j| v.get(i, j));
        let y = Mat::from_fn(v.rows(), self.attr_dim(), |i, j| v.get(i, k + j));
        Ok((z, y))
    }

    pub fn to_container(&self) -> TensorContainer {
        let mut c = TensorContainer::new(serde_json::json!({
            "kind": "oracle-world",
            "nonlinearity": self.nonlinearity,
        }));
        c.push("A", self.a.clone());
        c.push("B", self.b.clone());
        c.push("attributes", self.attributes.clone());
        c.push("z_star", self.z_star.clone());
        c.push("labels", Mat::from_fn(self.labels.len(), 1, |i, _| self.labels[i] as f64));
        c
    }

    pub fn from_container(c: &TensorContainer) -> Result<Self> {
        if c.metadata.get("kind").and_then(|k| k.as_str()) != Some("oracle-world") {
            return Err(GcmError::Format("container is not an oracle world sidecar".into()));
        }
        let nl: Nonlinearity = serde_json::from_value(c.metadata["nonlinearity"].clone())?;
        let labels = c.require("labels")?.as_slice().iter().map(|&v| v as u32).collect();
        Self::new(
            c.require("A")?.clone(),
            c.require("B")?.clone(),
            nl,
            c.require("attributes")?.clone(),
            c.require("z_star")?.clone(),
            labels,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&TensorContainer::load(path)?)
    }
}

/// Exact inverse composed with the true generator.
pub struct OracleModel<'w> {
    pub world: &'w OracleWorld,
}

impl CounterfactualModel for OracleModel<'_> {
    fn feature_dim(&self) -> usize {
        self.world.feature_dim()
    }

    fn attr_dim(&self) -> usize {
        self.world.attr_dim()
    }

    fn z_dim(&self) -> usize {
        self.world.z_dim()
    }

    fn posterior(&self, x: &Mat) -> Result<(Mat, Mat)> {
        let (z, _) = self.world.invert(x)?;
        let s = Mat::zeros(z.rows(), z.cols());
        Ok((z, s))
    }

    fn generate(&self, z: &Mat, y: &Mat, _factual: &Mat) -> Result<Mat> {
        self.world.g_batch(z, y)
    }
}

/// Linear encoder and decoder fit by least squares against known factors.
#[derive(Clone, Debug)]
pub struct LinearRegressionModel {
    /// `z = x E`, shape `d x z`.
    encoder: Mat,
    /// `x = [z, y] D`, shape `(z + a) x d`.
    decoder: Mat,
    z_dim: usize,
    attr_dim: usize,
}

fn lstsq(inputs: &Mat, targets: &Mat) -> Result<Mat> {
    let p = to_dmatrix(inputs)
        .pseudo_inverse(1e-12)
        .map_err(|e| GcmError::Degenerate(format!("least squares failed: {e}")))?;
    Ok(gemm(&from_dmatrix(&p), false, targets, false))
}

impl LinearRegressionModel {
    pub fn fit(x: &Mat, z: &Mat, y: &Mat) -> Result<Self> {
        if x.rows() != z.rows() || x.rows() != y.rows() {
            return Err(GcmError::Shape("x, z and y need the same number of rows".into()));
        }
        Ok(Self {
            encoder: lstsq(x, z)?,
            decoder: lstsq(&z.hstack(y)?, x)?,
            z_dim: z.cols(),
            attr_dim: y.cols(),
        })
    }

    /// Fits on the recorded factors of the given samples.
    pub fn fit_world(world: &OracleWorld, samples: &[usize]) -> Result<Self> {
        let z = world.z_star.select_rows(samples);
        let idx: Vec<usize> = samples.iter().map(|&i| world.labels[i] as usize).collect();
        let y = world.attributes.select_rows(&idx);
        Self::fit(&world.g_batch(&z, &y)?, &z, &y)
    }
}

impl CounterfactualModel for LinearRegressionModel {
    fn feature_dim(&self) -> usize {
        self.encoder.rows()
    }

    fn attr_dim(&self) -> usize {
        self.attr_dim
    }

    fn z_dim(&self) -> usize {
        self.z_dim
    }

    fn posterior(&self, x: &Mat) -> Result<(Mat, Mat)> {
        let z = gemm(x, false, &self.encoder, false);
        let s = Mat::zeros(z.rows(), z.cols());
        Ok((z, s))
    }

    fn generate(&self, z: &Mat, y: &Mat, _factual: &Mat) -> Result<Mat> {
        Ok(gemm(&z.hstack(y)?, false, &self.decoder, false))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InjectivityReport {
    pub passed: bool,
    /// Smallest `|g(v1) - g(v2)| / |v1 - v2|` seen; infinite when no pair was checked.
    pub worst_ratio: f64,
    pub pairs_checked: usize,
    pub warning: Option<String>,
}

/// Checks that distinct factor vectors map to distinct features.
///
/// Pairs rotate through three shapes: both groups differ, only `z` differs,
/// only `y` differs. The last two catch a generator that ignores a group.
pub fn verify_injectivity(world: &OracleWorld, num_pairs: usize, margin: f64, seed: u64) -> InjectivityReport {
    if num_pairs == 0 {
        return InjectivityReport {
            passed: true,
            worst_ratio: f64::INFINITY,
            pairs_checked: 0,
            warning: Some("no pairs requested; the check is vacuous".into()),
        };
    }
    let mut r = rng::rng_for(seed, "injectivity");
    let (kz, ka) = (world.z_dim(), world.attr_dim());
    let mut worst = f64::INFINITY;
    let mut checked = 0;
    let mut attempts = 0;
    while checked < num_pairs && attempts < num_pairs * 100 {
        attempts += 1;
        let z1 = rng::normal_vec(&mut r, kz);
        let y1 = rng::normal_vec(&mut r, ka);
        let (z2, y2) = match checked % 3 {
            0 => (rng::normal_vec(&mut r, kz), rng::normal_vec(&mut r, ka)),
            1 => (rng::normal_vec(&mut r, kz), y1.clone()),
            _ => (z1.clone(), rng::normal_vec(&mut r, ka)),
        };
        let dv = (dist(&z1, &z2).powi(2) + dist(&y1, &y2).powi(2)).sqrt();
        if dv < margin {
            continue;
        }
        let dx = dist(&world.g(&z1, &y1), &world.g(&z2, &y2));
        worst = worst.min(dx / dv);
        checked += 1;
    }
    let warning = (checked < num_pairs).then(|| format!("only {checked} of {num_pairs} pairs met the margin"));
    InjectivityReport { passed: worst > 1e-9, worst_ratio: worst, pairs_checked: checked, warning }
}

/// A transformation of factor space. It must leave `z` untouched.
pub trait FactorTransform {
    fn apply(&self, z: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>);
}

impl<F: Fn(&[f64], &[f64]) -> (Vec<f64>, Vec<f64>)> FactorTransform for F {
    fn apply(&self, z: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
        self(z, y)
    }
}

/// Sets `y` to a fixed attribute vector.
pub struct SetAttribute(pub Vec<f64>);

impl FactorTransform for SetAttribute {
    fn apply(&self, z: &[f64], _y: &[f64]) -> (Vec<f64>, Vec<f64>) {
        (z.to_vec(), self.0.clone())
    }
}

/// Mean relative gap between the model's counterfactual of `g(v)` under the
/// transformation and the true `g(T'(v))`.
pub fn disentanglement_residual<M: CounterfactualModel + ?Sized>(
    model: &M,
    world: &OracleWorld,
    transform: &dyn FactorTransform,
    samples: &[usize],
) -> Result<f64> {
    if samples.is_empty() {
        return Err(GcmError::InvalidArgument("no samples given".into()));
    }
    let n = samples.len();
    let mut z_in = Mat::zeros(n, world.z_dim());
    let mut y_in = Mat::zeros(n, world.attr_dim());
    let mut z_out = Mat::zeros(n, world.z_dim());
    let mut y_out = Mat::zeros(n, world.attr_dim());
    for (r, &i) in samples.iter().enumerate() {
        if i >= world.labels.len() {
            return Err(GcmError::InvalidArgument(format!("sample {i} out of range")));
        }
        let (z, y) = world.factors(i);
        let (tz, ty) = transform.apply(z, y);
        if tz.as_slice() != z {
            return Err(GcmError::Contract("transformation modified sample-attribute coordinates".into()));
        }
        if ty.len() != world.attr_dim() {
            return Err(GcmError::Shape("transformation changed the attribute width".into()));
        }
        z_in.row_slice_mut(r).copy_from_slice(z);
        y_in.row_slice_mut(r).copy_from_slice(y);
        z_out.row_slice_mut(r).copy_from_slice(&tz);
        y_out.row_slice_mut(r).copy_from_slice(&ty);
    }
    let x = world.g_batch(&z_in, &y_in)?;
    let truth = world.g_batch(&z_out, &y_out)?;
    let (zhat, _) = model.posterior(&x)?;
    let cf = model.generate(&zhat, &y_out, &x)?;
    let total: f64 = (0..n)
        .map(|r| {
            let t = truth.row_slice(r);
            dist(cf.row_slice(r), t) / t.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE)
        })
        .sum();
    Ok(total / n as f64)
}

const MAX_SWEEPS: usize = 200;

/// A seeded sample of the manifold used as starting points for refinement.
/// Draws are sequential, so a larger grid extends a smaller one.
pub struct ManifoldProbe<'w> {
    world: &'w OracleWorld,
    grid_z: Mat,
    grid_class: Vec<usize>,
    grid_x: Mat,
}

impl<'w> ManifoldProbe<'w> {
    pub fn new(world: &'w OracleWorld, grid_size: usize, seed: u64) -> Result<Self> {
        if grid_size < 1 {
            return Err(GcmError::InvalidArgument("grid_size must be at least 1".into()));
        }
        let mut r = rng::rng_for(seed, "manifold-grid");
        let c = world.attributes.rows();
        let mut grid_z = Mat::zeros(grid_size, world.z_dim());
        let mut grid_class = Vec::with_capacity(grid_size);
        for i in 0..grid_size {
            let z = rng::normal_vec(&mut r, world.z_dim());
            grid_z.row_slice_mut(i).copy_from_slice(&z);
            grid_class.push(r.random_range(0..c));
        }
        let grid_x = world.g_batch(&grid_z, &world.attributes.select_rows(&grid_class))?;
        Ok(Self { world, grid_z, grid_class, grid_x })
    }

    /// Distance from `x` to the closest class sheet reached from the grid.
    pub fn distance(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.world.feature_dim() {
            return Err(GcmError::Shape(format!("x has length {}, expected {}", x.len(), self.world.feature_dim())));
        }
        // Refine from every grid point that improved on its class's running
        // best. That set only grows with the grid, so the result is monotone.
        let c = self.world.attributes.rows();
        let mut running = vec![f64::INFINITY; c];
        let mut best = f64::INFINITY;
        for i in 0..self.grid_x.rows() {
            let class = self.grid_class[i];
            let d0 = dist(x, self.grid_x.row_slice(i));
            if d0 < running[class] {
                running[class] = d0;
                let y = self.world.attributes.row_slice(class);
                best = best.min(self.refine(x, y, self.grid_z.row_slice(i).to_vec()).min(d0));
            }
        }
        Ok(best)
    }

    /// Coordinate descent over `z` with a parabolic step per coordinate.
    fn refine(&self, x: &[f64], y: &[f64], mut z: Vec<f64>) -> f64 {
        let obj = |z: &[f64]| {
            let g = self.world.g(z, y);
            x.iter().zip(&g).map(|(p, q)| (p - q) * (p - q)).sum::<f64>()
        };
        let mut f = obj(&z);
        let mut h = vec![0.5; z.len()];
        for _ in 0..MAX_SWEEPS {
            let f_start = f;
            for i in 0..z.len() {
                let zi = z[i];
                z[i] = zi + h[i];
                let fp = obj(&z);
                z[i] = zi - h[i];
                let fm = obj(&z);
                let mut best = (f, zi);
                for cand in [(fp, zi + h[i]), (fm, zi - h[i])] {
                    if cand.0 < best.0 {
                        best = cand;
                    }
                }
                let curv = fp + fm - 2.0 * f;
                if curv > 0.0 {
                    let step = zi - h[i] * (fp - fm) / (2.0 * curv);
                    z[i] = step;
                    let fs = obj(&z);
                    if fs < best.0 {
                        best = (fs, step);
                    }
                }
                let moved = (best.1 - zi).abs();
                h[i] = if moved > 0.0 { moved.clamp(1e-4, 1.0) } else { (h[i] * 0.5).max(1e-4) };
                z[i] = best.1;
                f = best.0;
            }
            if f_start - f <= 1e-16 * (1.0 + f_start) {
                break;
            }
        }
        f.max(0.0).sqrt()
    }
}

pub fn manifold_distance(x_tilde: &[f64], world: &OracleWorld, grid_size: usize, seed: u64) -> Result<f64> {
    ManifoldProbe::new(world, grid_size, seed)?.distance(x_tilde)
}

/// Mean manifold distance over the rows of `xs`.
pub fn mean_manifold_distance(xs: &Mat, world: &OracleWorld, grid_size: usize, seed: u64) -> Result<f64> {
    if xs.rows() == 0 {
        return Err(GcmError::InvalidArgument("no points given".into()));
    }
    let probe = ManifoldProbe::new(world, grid_size, seed)?;
    let mut total = 0.0;
    for i in 0..xs.rows() {
        total += probe.distance(xs.row_slice(i))?;
    }
    Ok(total / xs.rows() as f64)
}

/// Settings for [`faithfulness_report`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessConfig {
    /// Test samples used, evenly spaced over the test split.
    pub max_samples: usize,
    pub grid_size: usize,
    pub seed: u64,
}

impl Default for FaithfulnessConfig {
    fn default() -> Self {
        Self { max_samples: 64, grid_size: 256, seed: 0 }
    }
}

/// Counterfactual faithfulness of a trained model against its world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessReport {
    /// Mean disentanglement residual over the unseen-attribute interventions.
    pub residual: f64,
    pub mean_manifold_distance_cf: f64,
    pub mean_manifold_distance_prior: f64,
    pub num_samples: usize,
    pub num_targets: usize,
    pub grid_size: usize,
    pub seed: u64,
    pub config_hash: String,
}

/// Counterfactuals of test samples towards every unseen attribute, against
/// generations from `z ~ N(0, I)` with the same attributes.
///
/// `bundle` must be the dataset `world` was sampled into, so that sample
/// indices agree.
pub fn faithfulness_report(
    model: &GcmModel,
    world: &OracleWorld,
    bundle: &DatasetBundle,
    cfg: &FaithfulnessConfig,
) -> Result<FaithfulnessReport> {
    if world.labels().len() != bundle.num_samples() || world.labels() != bundle.labels.as_slice() {
        return Err(GcmError::Validation("oracle world and bundle describe different samples".into()));
    }
    if bundle.split.unseen_class_ids.is_empty() {
        return Err(GcmError::InvalidArgument("faithfulness needs unseen classes".into()));
    }
    if cfg.max_samples == 0 {
        return Err(GcmError::InvalidArgument("max_samples must be positive".into()));
    }
    let test = &bundle.split.test_idx;
    let step = test.len().div_ceil(cfg.max_samples).max(1);
    let samples: Vec<usize> = test.iter().copied().step_by(step).collect();
    if samples.is_empty() {
        return Err(GcmError::InvalidArgument("bundle has no test samples".into()));
    }
    let unseen = &bundle.split.unseen_class_ids;
    let targets = bundle.attribute_table(unseen);
    let x = bundle.features.select_rows(&samples);
    let cf = counterfactual_grid(model, &x, &targets)?;
    let tiled: Vec<usize> = (0..cf.rows()).map(|r| r % targets.rows()).collect();
    let z_prior = rng::normal_mat(&mut rng::rng_for(cfg.seed, "prior-draws"), cf.rows(), model.config.z_dim);
    let prior = model.decode_batch(&z_prior, &targets.select_rows(&tiled), None)?;
    let probe = ManifoldProbe::new(world, cfg.grid_size, cfg.seed)?;
    let mean_dist = |m: &Mat| -> Result<f64> {
        let mut total = 0.0;
        for r in 0..m.rows() {
            total += probe.distance(m.row_slice(r))?;
        }
        Ok(total / m.rows() as f64)
    };
    let mut residual = 0.0;
    for &c in unseen {
        residual += disentanglement_residual(model, world, &SetAttribute(bundle.attribute(c).to_vec()), &samples)?;
    }
    Ok(FaithfulnessReport {
        residual: residual / unseen.len() as f64,
        mean_manifold_distance_cf: mean_dist(&cf)?,
        mean_manifold_distance_prior: mean_dist(&prior)?,
        num_samples: samples.len(),
        num_targets: unseen.len(),
        grid_size: cfg.grid_size,
        seed: cfg.seed,
        config_hash: String::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_world, SynthWorldConfig};

    fn world(nl: Nonlinearity) -> OracleWorld {
        let cfg = SynthWorldConfig { samples_per_class: 10, nonlinearity: nl, seed: 5, ..Default::default() };
        generate_synthetic_world(&cfg).unwrap().1
    }

    #[test]
    fn pseudoinverse_recovers_factors() {
        let w = world(Nonlinearity::Linear);
        let x = w.sample_features();
        let (z, y) = w.invert(&x).unwrap();
        for i in 0..x.rows() {
            let (zs, ys) = w.factors(i);
            assert!(dist(z.row_slice(i), zs) < 1e-10);
            assert!(dist(y.row_slice(i), ys) < 1e-10);
        }
    }

    #[test]
    fn injectivity_bound_and_degenerate_world() {
        let w = world(Nonlinearity::Linear);
        let rep = verify_injectivity(&w, 300, 0.1, 1);
        let smin = *w.singular_values().last().unwrap();
        assert!(rep.passed);
        assert_eq!(rep.pairs_checked, 300);
        assert!(rep.worst_ratio >= smin - 1e-9, "{} vs {smin}", rep.worst_ratio);

        let flat = OracleWorld { b: Mat::zeros(w.feature_dim(), w.attr_dim()), ..w.clone() };
        assert!(!verify_injectivity(&flat, 30, 0.1, 1).passed);

        let empty = verify_injectivity(&w, 0, 0.1, 1);
        assert!(empty.passed && empty.warning.is_some());
    }

    #[test]
    fn oracle_model_has_zero_residual() {
        let w = world(Nonlinearity::Linear);
        let target = w.attributes().row_slice(7).to_vec();
        let samples: Vec<usize> = (0..40).collect();
        let r = disentanglement_residual(&OracleModel { world: &w }, &w, &SetAttribute(target), &samples).unwrap();
        assert!(r < 1e-12, "{r}");
    }

    #[test]
    fn linear_fit_has_small_residual() {
        let w = world(Nonlinearity::Linear);
        let train: Vec<usize> = (0..60).collect();
        let m = LinearRegressionModel::fit_world(&w, &train).unwrap();
        let target = w.attributes().row_slice(8).to_vec();
        let samples: Vec<usize> = (60..100).collect();
        let r = disentanglement_residual(&m, &w, &SetAttribute(target), &samples).unwrap();
        assert!(r <= 1e-3, "{r}");
    }

    #[test]
    fn identity_transform_measures_reconstruction() {
        let w = world(Nonlinearity::Linear);
        struct Shrink<'w>(OracleModel<'w>);
        impl CounterfactualModel for Shrink<'_> {
            fn feature_dim(&self) -> usize {
                self.0.feature_dim()
            }
            fn attr_dim(&self) -> usize {
                self.0.attr_dim()
            }
            fn z_dim(&self) -> usize {
                self.0.z_dim()
            }
            fn posterior(&self, x: &Mat) -> Result<(Mat, Mat)> {
                self.0.posterior(x)
            }
            fn generate(&self, z: &Mat, y: &Mat, f: &Mat) -> Result<Mat> {
                Ok(self.0.generate(z, y, f)?.map(|v| 0.9 * v))
            }
        }
        let id = |z: &[f64], y: &[f64]| (z.to_vec(), y.to_vec());
        let r = disentanglement_residual(&Shrink(OracleModel { world: &w }), &w, &id, &[0, 1, 2]).unwrap();
        assert!((r - 0.1).abs() < 1e-9, "{r}");
    }

    #[test]
    fn transforms_touching_z_are_rejected() {
        let w = world(Nonlinearity::Linear);
        let bad = |z: &[f64], y: &[f64]| (z.iter().map(|v| v + 1.0).collect(), y.to_vec());
        let r = disentanglement_residual(&OracleModel { world: &w }, &w, &bad, &[0]);
        assert!(matches!(r, Err(GcmError::Contract(_))));
    }

    #[test]
    fn on_manifold_points_have_zero_distance() {
        for nl in [Nonlinearity::Linear, Nonlinearity::Tanh] {
            let w = world(nl);
            let probe = ManifoldProbe::new(&w, 64, 3).unwrap();
            for i in [0, 17, 55, 99] {
                let (z, y) = w.factors(i);
                let d = probe.distance(&w.g(z, y)).unwrap();
                assert!(d <= 1e-6, "{nl:?} sample {i}: {d}");
            }
        }
    }

    #[test]
    fn orthogonal_offset_is_measured_exactly() {
        let w = world(Nonlinearity::Linear);
        let ab = to_dmatrix(&w.a().hstack(w.b()).unwrap());
        // Residual of a random direction after projecting out span([A|B]).
        let u = DMatrix::from_fn(w.feature_dim(), 1, |i, _| ((i * 7 + 3) % 5) as f64 - 2.0);
        let proj = &ab * ab.clone().pseudo_inverse(1e-12).unwrap() * &u;
        let mut n = u - proj;
        n /= n.norm();
        let (z, y) = w.factors(4);
        let mut x = w.g(z, y);
        for (k, xi) in x.iter_mut().enumerate() {
            *xi += 0.3 * n[k];
        }
        let d = manifold_distance(&x, &w, 64, 9).unwrap();
        assert!((d - 0.3).abs() <= 1e-4, "{d}");
    }

    #[test]
    fn larger_grids_never_increase_distance() {
        let w = world(Nonlinearity::Tanh);
        let x: Vec<f64> = (0..w.feature_dim()).map(|i| (i as f64 * 0.37).sin() * 0.8).collect();
        let mut last = f64::INFINITY;
        for g in [1, 4, 16, 64] {
            let d = manifold_distance(&x, &w, g, 2).unwrap();
            assert!(d <= last + 1e-9, "grid {g}: {d} > {last}");
            last = d;
        }
        assert!(manifold_distance(&x, &w, 0, 2).is_err());
    }

    #[test]
    fn sidecar_round_trip() {
        let w = world(Nonlinearity::Tanh);
        let bytes = w.to_container().to_bytes().unwrap();
        let back = OracleWorld::from_container(&TensorContainer::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, w);
    }
}
