//! Counterfactual generation: abduction of `z(x)`, intervention on `Y`, and
//! decoding of `x̃ = X_y[z(x)]`.
//!
//! The procedures are written against [`CounterfactualModel`] so that the
//! trained GCM and the oracle models of [`crate::oracle`] share one pipeline.

use serde::{Deserialize, Serialize};

use crate::error::{GcmError, Result};
use crate::model::GcmModel;
use crate::rng;
use crate::tensor::Mat;

/// Anything that can infer a sample attribute and regenerate features.
pub trait CounterfactualModel {
    fn feature_dim(&self) -> usize;
    fn attr_dim(&self) -> usize;
    fn z_dim(&self) -> usize;

    /// Posterior `(mean, stddev)` of `z` for each row of `x`.
    fn posterior(&self, x: &Mat) -> Result<(Mat, Mat)>;

    /// Generates features from rows of `z` and `y`. `factual` holds the
    /// sample each row was abducted from, for models with feedback.
    fn generate(&self, z: &Mat, y: &Mat, factual: &Mat) -> Result<Mat>;
}

impl CounterfactualModel for GcmModel {
    fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    fn attr_dim(&self) -> usize {
        self.config.attr_dim
    }

    fn z_dim(&self) -> usize {
        self.config.z_dim
    }

    fn posterior(&self, x: &Mat) -> Result<(Mat, Mat)> {
        self.encode_batch(x)
    }

    fn generate(&self, z: &Mat, y: &Mat, factual: &Mat) -> Result<Mat> {
        let fb = self.config.use_feedback.then_some(factual);
        self.decode_batch(z, y, fb)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
#[derive(Default)]
pub enum ZMode {
    #[default]
    PosteriorMean,
    Sample { n: usize, seed: u64 },
}


impl ZMode {
    pub fn draws(&self) -> usize {
        match *self {
            ZMode::PosteriorMean => 1,
            ZMode::Sample { n, .. } => n,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CounterfactualRequest {
    pub x: Vec<f64>,
    pub targets: Vec<Vec<f64>>,
    pub z_mode: ZMode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CounterfactualEntry {
    /// Index into the request's target list.
    pub target: usize,
    pub x_tilde: Vec<f64>,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CounterfactualSet {
    pub entries: Vec<CounterfactualEntry>,
}

impl CounterfactualSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Distance per target, taking the minimum over z draws.
    pub fn target_distances(&self, num_targets: usize) -> Vec<f64> {
        let mut out = vec![f64::INFINITY; num_targets];
        for e in &self.entries {
            out[e.target] = out[e.target].min(e.distance);
        }
        out
    }

    pub fn min_distance(&self) -> Option<f64> {
        self.entries.iter().map(|e| e.distance).min_by(f64::total_cmp)
    }
}

fn check_x<M: CounterfactualModel + ?Sized>(model: &M, x: &[f64]) -> Result<()> {
    if x.len() != model.feature_dim() {
        return Err(GcmError::Shape(format!("x has length {}, expected {}", x.len(), model.feature_dim())));
    }
    Ok(())
}

/// Abducted sample attributes of `x`: the posterior mean, or seeded draws.
pub fn abduct<M: CounterfactualModel + ?Sized>(model: &M, x: &[f64], z_mode: ZMode) -> Result<Vec<Vec<f64>>> {
    check_x(model, x)?;
    let (mean, std) = model.posterior(&Mat::row(x))?;
    match z_mode {
        ZMode::PosteriorMean => Ok(vec![mean.into_vec()]),
        ZMode::Sample { n, seed } => {
            if n == 0 {
                return Err(GcmError::InvalidArgument("sample mode needs n >= 1".into()));
            }
            let mut r = rng::rng_for(seed, "abduct");
            Ok((0..n)
                .map(|_| {
                    let eps = rng::normal_vec(&mut r, mean.cols());
                    mean.as_slice().iter().zip(std.as_slice()).zip(eps).map(|((m, s), e)| m + s * e).collect()
                })
                .collect())
        }
    }
}

/// `x̃ = X_y[z(x)]`. In sample mode the first draw is used.
pub fn generate_counterfactual<M: CounterfactualModel + ?Sized>(
    model: &M,
    x: &[f64],
    y: &[f64],
    z_mode: ZMode,
) -> Result<Vec<f64>> {
    if y.len() != model.attr_dim() {
        return Err(GcmError::Shape(format!("y has length {}, expected {}", y.len(), model.attr_dim())));
    }
    let z = abduct(model, x, z_mode)?.swap_remove(0);
    Ok(model.generate(&Mat::row(&z), &Mat::row(y), &Mat::row(x))?.into_vec())
}

pub fn counterfactual_set<M: CounterfactualModel + ?Sized>(model: &M, req: &CounterfactualRequest) -> Result<CounterfactualSet> {
    if req.targets.is_empty() {
        return Err(GcmError::InvalidArgument("counterfactual request has no targets".into()));
    }
    let targets = Mat::from_rows(&req.targets)?;
    if targets.cols() != model.attr_dim() {
        return Err(GcmError::Shape(format!("targets have {} columns, expected {}", targets.cols(), model.attr_dim())));
    }
    let zs = abduct(model, &req.x, req.z_mode)?;
    let (t, k) = (req.targets.len(), zs.len());
    let mut z = Mat::zeros(t * k, model.z_dim());
    let mut y = Mat::zeros(t * k, model.attr_dim());
    for ti in 0..t {
        for (ki, zk) in zs.iter().enumerate() {
            z.row_slice_mut(ti * k + ki).copy_from_slice(zk);
            y.row_slice_mut(ti * k + ki).copy_from_slice(targets.row_slice(ti));
        }
    }
    let factual = Mat::from_fn(t * k, req.x.len(), |_, j| req.x[j]);
    let gen = model.generate(&z, &y, &factual)?;
    let entries = (0..t * k)
        .map(|r| {
            let x_tilde = gen.row_slice(r).to_vec();
            let distance = dist(&req.x, &x_tilde);
            CounterfactualEntry { target: r / k, x_tilde, distance }
        })
        .collect();
    Ok(CounterfactualSet { entries })
}

pub(crate) fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
}

pub fn euclidean_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(GcmError::Shape(format!("lengths {} and {} differ", a.len(), b.len())));
    }
    Ok(dist(a, b))
}

/// Posterior-mean counterfactuals of every row of `x` against every row of
/// `targets`. Row `i * T + t` of the result is `X_{targets[t]}[z(x_i)]`.
pub fn counterfactual_grid<M: CounterfactualModel + ?Sized>(model: &M, x: &Mat, targets: &Mat) -> Result<Mat> {
    if targets.rows() == 0 {
        return Err(GcmError::InvalidArgument("no counterfactual targets".into()));
    }
    let (mean, _) = model.posterior(x)?;
    let (n, t) = (x.rows(), targets.rows());
    let rep: Vec<usize> = (0..n * t).map(|r| r / t).collect();
    let tile: Vec<usize> = (0..n * t).map(|r| r % t).collect();
    model.generate(&mean.select_rows(&rep), &targets.select_rows(&tile), &x.select_rows(&rep))
}

/// `N x T` matrix of `dist(x_i, X_{targets[t]}[z(x_i)])` with posterior-mean `z`.
pub fn counterfactual_distances<M: CounterfactualModel + ?Sized>(model: &M, x: &Mat, targets: &Mat) -> Result<Mat> {
    let gen = counterfactual_grid(model, x, targets)?;
    let t = targets.rows();
    Ok(Mat::from_fn(x.rows(), t, |i, j| dist(x.row_slice(i), gen.row_slice(i * t + j))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, OutputActivation};

    /// `g(z, y) = A z + B y` with the exact inverse as encoder.
    struct Affine;

    impl CounterfactualModel for Affine {
        fn feature_dim(&self) -> usize {
            2
        }
        fn attr_dim(&self) -> usize {
            1
        }
        fn z_dim(&self) -> usize {
            1
        }
        fn posterior(&self, x: &Mat) -> Result<(Mat, Mat)> {
            Ok((Mat::from_fn(x.rows(), 1, |i, _| x.get(i, 0)), Mat::filled(x.rows(), 1, 0.5)))
        }
        fn generate(&self, z: &Mat, y: &Mat, _: &Mat) -> Result<Mat> {
            Ok(Mat::from_fn(z.rows(), 2, |i, j| if j == 0 { z.get(i, 0) } else { 2.0 * y.get(i, 0) }))
        }
    }

    fn model() -> GcmModel {
        let mut c = ModelConfig::mlp(5, 3);
        c.hidden_dim = 8;
        c.output_activation = OutputActivation::Identity;
        GcmModel::new(c, 11).unwrap()
    }

    #[test]
    fn linear_counterfactual_arithmetic() {
        // x = (z0, 2 y0) with z0 = 0.7, y0 = 1; target y1 = -3.
        let x = [0.7, 2.0];
        let xt = generate_counterfactual(&Affine, &x, &[-3.0], ZMode::PosteriorMean).unwrap();
        assert_eq!(xt, vec![0.7, -6.0]);
        let same = generate_counterfactual(&Affine, &x, &[1.0], ZMode::PosteriorMean).unwrap();
        assert_eq!(same, x.to_vec());
    }

    #[test]
    fn abduct_modes() {
        let m = model();
        let x = [0.1, 0.2, 0.3, 0.4, 0.5];
        let mean = abduct(&m, &x, ZMode::PosteriorMean).unwrap();
        assert_eq!(mean, vec![m.encode(&x).unwrap().mean().to_vec()]);
        let s = ZMode::Sample { n: 5, seed: 2 };
        let a = abduct(&m, &x, s).unwrap();
        assert_eq!(a.len(), 5);
        assert_eq!(a, abduct(&m, &x, s).unwrap());
        assert_ne!(a[0], a[1]);
        assert!(abduct(&m, &x[..4], ZMode::PosteriorMean).is_err());
        assert!(abduct(&m, &x, ZMode::Sample { n: 0, seed: 0 }).is_err());
    }

    #[test]
    fn set_cardinality_and_min_over_draws() {
        let m = model();
        let x = vec![0.1, -0.2, 0.3, 0.0, 0.5];
        let targets: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64, 0.5, -1.0]).collect();
        let req = CounterfactualRequest { x: x.clone(), targets: targets.clone(), z_mode: ZMode::PosteriorMean };
        let set = counterfactual_set(&m, &req).unwrap();
        assert_eq!(set.len(), 4);
        let sampled = CounterfactualRequest { z_mode: ZMode::Sample { n: 3, seed: 1 }, ..req.clone() };
        let set3 = counterfactual_set(&m, &sampled).unwrap();
        assert_eq!(set3.len(), 12);
        let per = set3.target_distances(4);
        for t in 0..4 {
            let want = set3.entries.iter().filter(|e| e.target == t).map(|e| e.distance).fold(f64::INFINITY, f64::min);
            assert_eq!(per[t], want);
        }
        let empty = CounterfactualRequest { targets: vec![], ..req };
        assert!(counterfactual_set(&m, &empty).is_err());
    }

    #[test]
    fn posterior_mean_pipeline_is_deterministic_and_pure() {
        let m = model();
        let before = m.params.clone();
        let x = vec![0.3; 5];
        let a = generate_counterfactual(&m, &x, &[1.0, 0.0, 0.0], ZMode::PosteriorMean).unwrap();
        let b = generate_counterfactual(&m, &x, &[1.0, 0.0, 0.0], ZMode::PosteriorMean).unwrap();
        assert_eq!(a, b);
        assert_eq!(m.params, before);
        assert_eq!(x, vec![0.3; 5]);
    }

    #[test]
    fn grid_matches_single_calls() {
        let m = model();
        let x = Mat::from_fn(3, 5, |i, j| (i as f64 - j as f64) * 0.1);
        let targets = Mat::from_fn(2, 3, |i, j| (i + j) as f64 * 0.3);
        let d = counterfactual_distances(&m, &x, &targets).unwrap();
        for i in 0..3 {
            for t in 0..2 {
                let xt = generate_counterfactual(&m, x.row_slice(i), targets.row_slice(t), ZMode::PosteriorMean).unwrap();
                assert!((d.get(i, t) - dist(x.row_slice(i), &xt)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn distance_examples() {
        assert_eq!(euclidean_distance(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        assert_eq!(euclidean_distance(&[1.5, 2.0], &[1.5, 2.0]).unwrap(), 0.0);
        assert!(euclidean_distance(&[1.0], &[1.0, 2.0]).is_err());
    }
}
