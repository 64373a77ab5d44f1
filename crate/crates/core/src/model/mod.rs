//! The generative causal model: encoder `Q(Z|X)`, decoder `P(X|Z,Y)`,
//! regressor `Q(Y|X)`, critic `D(X,Y)` and the feedback module.
//!
//! The convenience methods on [`GcmModel`] run a throwaway tape and return
//! plain values; training code works with [`Net`] directly.

mod config;
mod net;
mod params;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use config::{Backbone, ImageShape, LadderLayer, LadderNoise, ModelConfig, OutputActivation};
pub use net::{ladder_noise_layers, BatchStat, Net};
pub use params::{Bound, GcmParams, ParamGroup, ParamSet};

pub(crate) use net::update_running_stats;

use crate::autodiff::Tape;
use crate::checkpoint::TensorContainer;
use crate::error::{GcmError, Result};
use crate::rng::{self, Rng};
use crate::tensor::Mat;

/// Diagonal Gaussian over the sample attribute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPosterior {
    mean: Vec<f64>,
    stddev: Vec<f64>,
}

impl GaussianPosterior {
    pub fn new(mean: Vec<f64>, stddev: Vec<f64>) -> Result<Self> {
        if mean.len() != stddev.len() {
            return Err(GcmError::Shape(format!(
                "posterior mean has {} entries but stddev has {}",
                mean.len(),
                stddev.len()
            )));
        }
        if let Some(s) = stddev.iter().find(|s| !(**s > 0.0)) {
            return Err(GcmError::InvalidArgument(format!("stddev must be positive, got {s}")));
        }
        Ok(Self { mean, stddev })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn stddev(&self) -> &[f64] {
        &self.stddev
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// `mean + stddev * noise`, elementwise.
pub fn reparameterize(post: &GaussianPosterior, noise: &[f64]) -> Result<Vec<f64>> {
    if noise.len() != post.dim() {
        return Err(GcmError::Shape(format!(
            "noise has {} entries, posterior has {}",
            noise.len(),
            post.dim()
        )));
    }
    Ok(post.mean.iter().zip(&post.stddev).zip(noise).map(|((m, s), e)| m + s * e).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GcmModel {
    pub config: ModelConfig,
    pub params: GcmParams,
}

impl GcmModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng: Rng = rng::rng_for(seed, "init");
        let params = net::init_params(&config, &mut rng);
        Ok(Self { config, params })
    }

    /// Same architecture with every parameter set to zero.
    pub fn zeroed(config: ModelConfig) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        m.params.map_all(|t| Mat::zeros(t.rows(), t.cols()));
        Ok(m)
    }

    /// Rounds every parameter to `f32`, the checkpoint precision.
    pub fn quantize(&mut self) {
        self.params.map_all(Mat::quantize_f32);
    }

    fn check(&self, what: &str, m: &Mat, cols: usize) -> Result<()> {
        if m.cols() != cols {
            return Err(GcmError::Shape(format!("{what} has {} columns, expected {cols}", m.cols())));
        }
        if m.rows() == 0 {
            return Err(GcmError::Shape(format!("{what} is empty")));
        }
        Ok(())
    }

    /// Posterior `(mean, stddev)` for a batch of features.
    pub fn encode_batch(&self, x: &Mat) -> Result<(Mat, Mat)> {
        self.check("x", x, self.config.feature_dim)?;
        let t = Tape::new();
        let net = Net::new(&t, &self.config, &self.params, &[], false);
        let (m, s) = net.encode(t.constant(x.clone()));
        let (m, s) = ((*m.value()).clone(), (*s.value()).clone());
        Ok((m, s))
    }

    pub fn encode(&self, x: &[f64]) -> Result<GaussianPosterior> {
        let (m, s) = self.encode_batch(&Mat::row(x))?;
        GaussianPosterior::new(m.into_vec(), s.into_vec())
    }

    /// Decoded feature means. `feedback_x` supplies the factual samples whose
    /// regressor hidden layer drives the feedback module.
    pub fn decode_batch(&self, z: &Mat, y: &Mat, feedback_x: Option<&Mat>) -> Result<Mat> {
        self.check("z", z, self.config.z_dim)?;
        self.check("y", y, self.config.attr_dim)?;
        if z.rows() != y.rows() {
            return Err(GcmError::Shape(format!("z has {} rows but y has {}", z.rows(), y.rows())));
        }
        if let Some(fx) = feedback_x {
            self.check("feedback input", fx, self.config.feature_dim)?;
            if fx.rows() != z.rows() {
                return Err(GcmError::Shape("feedback input rows differ from z".into()));
            }
        }
        let t = Tape::new();
        let net = Net::new(&t, &self.config, &self.params, &[], false);
        let fb = feedback_x.map(|fx| net.regress(t.constant(fx.clone())).1);
        let out = net.decode(t.constant(z.clone()), t.constant(y.clone()), fb, None);
        let out = (*out.value()).clone();
        Ok(out)
    }

    pub fn decode(&self, z: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        Ok(self.decode_batch(&Mat::row(z), &Mat::row(y), None)?.into_vec())
    }

    /// Decode with feedback from the factual sample `x`.
    pub fn decode_with_feedback(&self, z: &[f64], y: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.decode_batch(&Mat::row(z), &Mat::row(y), Some(&Mat::row(x)))?.into_vec())
    }

    /// `(y_hat, hidden)` for a batch.
    pub fn regress_batch(&self, x: &Mat) -> Result<(Mat, Mat)> {
        self.check("x", x, self.config.feature_dim)?;
        let t = Tape::new();
        let net = Net::new(&t, &self.config, &self.params, &[], false);
        let (y, h) = net.regress(t.constant(x.clone()));
        let (y, h) = ((*y.value()).clone(), (*h.value()).clone());
        Ok((y, h))
    }

    pub fn regress(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let (y, h) = self.regress_batch(&Mat::row(x))?;
        Ok((y.into_vec(), h.into_vec()))
    }

    pub fn discriminate_batch(&self, x: &Mat, y: &Mat) -> Result<Vec<f64>> {
        self.check("x", x, self.config.feature_dim)?;
        self.check("y", y, self.config.attr_dim)?;
        if x.rows() != y.rows() {
            return Err(GcmError::Shape("x and y row counts differ".into()));
        }
        let t = Tape::new();
        let net = Net::new(&t, &self.config, &self.params, &[], false);
        let d = net.discriminate(t.constant(x.clone()), t.constant(y.clone()));
        let d = d.value().as_slice().to_vec();
        Ok(d)
    }

    pub fn discriminate(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        Ok(self.discriminate_batch(&Mat::row(x), &Mat::row(y))?[0])
    }

    pub fn to_container(&self) -> Result<TensorContainer> {
        let meta = serde_json::json!({
            "kind": "gcm-checkpoint",
            "model": serde_json::to_value(&self.config)?,
        });
        let mut c = TensorContainer::new(meta);
        for (name, m) in self.params.named_tensors() {
            c.push(name, m.clone());
        }
        Ok(c)
    }

    pub fn from_container(c: &TensorContainer) -> Result<Self> {
        if c.metadata.get("kind").and_then(|k| k.as_str()) != Some("gcm-checkpoint") {
            return Err(GcmError::Format("container is not a model checkpoint".into()));
        }
        let config: ModelConfig = serde_json::from_value(
            c.metadata.get("model").cloned().ok_or_else(|| GcmError::Format("missing model config".into()))?,
        )?;
        config.validate()?;
        let expected = Self::new(config.clone(), 0)?;
        let mut params = GcmParams::default();
        for (name, m) in &c.tensors {
            if !params.insert_qualified(name, m.clone()) {
                return Err(GcmError::Format(format!("unknown tensor {name:?}")));
            }
        }
        let want: Vec<_> = expected.params.named_tensors().into_iter().map(|(n, m)| (n, m.shape())).collect();
        let got: Vec<_> = params.named_tensors().into_iter().map(|(n, m)| (n, m.shape())).collect();
        if want != got {
            return Err(GcmError::Format("checkpoint tensors do not match the model configuration".into()));
        }
        Ok(Self { config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&TensorContainer::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig { hidden_dim: 8, use_feedback: true, ..ModelConfig::mlp(6, 3) }
    }

    #[test]
    fn zero_network_closed_forms() {
        let m = GcmModel::zeroed(small()).unwrap();
        let post = m.encode(&[0.3; 6]).unwrap();
        assert_eq!(post.mean(), &[0.0; 3]);
        for s in post.stddev() {
            assert!((s - std::f64::consts::LN_2).abs() < 1e-15);
        }
        assert_eq!(m.decode(&[1.0, -2.0, 0.5], &[0.1; 3]).unwrap(), vec![0.5; 6]);
        let (y, h) = m.regress(&[1.0; 6]).unwrap();
        assert_eq!(y, vec![0.0; 3]);
        assert_eq!(h.len(), 8);
        assert_eq!(m.discriminate(&[1.0; 6], &[1.0; 3]).unwrap(), 0.0);
    }

    #[test]
    fn reparameterize_cases() {
        let p = GaussianPosterior::new(vec![1.0, 2.0], vec![0.5, 0.5]).unwrap();
        assert_eq!(reparameterize(&p, &[2.0, -2.0]).unwrap(), vec![2.0, 1.0]);
        assert_eq!(reparameterize(&p, &[0.0, 0.0]).unwrap(), vec![1.0, 2.0]);
        let unit = GaussianPosterior::new(vec![0.0; 2], vec![1.0; 2]).unwrap();
        assert_eq!(reparameterize(&unit, &[0.3, -0.7]).unwrap(), vec![0.3, -0.7]);
        assert!(reparameterize(&p, &[1.0]).is_err());
    }

    #[test]
    fn posterior_rejects_nonpositive_stddev() {
        assert!(GaussianPosterior::new(vec![0.0], vec![0.0]).is_err());
        assert!(GaussianPosterior::new(vec![0.0], vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn shape_errors() {
        let m = GcmModel::new(small(), 1).unwrap();
        assert!(matches!(m.encode(&[0.0; 5]), Err(GcmError::Shape(_))));
        assert!(matches!(m.decode(&[0.0; 3], &[0.0; 2]), Err(GcmError::Shape(_))));
        assert!(matches!(m.regress(&[0.0; 7]), Err(GcmError::Shape(_))));
        assert!(matches!(m.discriminate(&[0.0; 6], &[0.0; 4]), Err(GcmError::Shape(_))));
    }

    #[test]
    fn forward_passes_are_deterministic_and_shaped() {
        let m = GcmModel::new(small(), 3).unwrap();
        let x = [0.1, 0.9, 0.4, 0.2, 0.7, 0.3];
        let a = m.encode(&x).unwrap();
        assert_eq!(a, m.encode(&x).unwrap());
        assert_eq!(a.dim(), 3);
        let z = reparameterize(&a, &[0.0; 3]).unwrap();
        let out = m.decode_with_feedback(&z, &[1.0, 0.0, 0.0], &x).unwrap();
        assert_eq!(out.len(), 6);
        assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(out, m.decode_with_feedback(&z, &[1.0, 0.0, 0.0], &x).unwrap());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact_after_quantize() {
        let mut m = GcmModel::new(small(), 5).unwrap();
        m.quantize();
        let bytes = m.to_container().unwrap().to_bytes().unwrap();
        let back = GcmModel::from_container(&TensorContainer::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, m);
        let x = [0.2; 6];
        assert_eq!(back.encode(&x).unwrap(), m.encode(&x).unwrap());
    }

    #[test]
    fn checkpoint_with_wrong_tensors_is_rejected() {
        let m = GcmModel::new(small(), 5).unwrap();
        let mut c = m.to_container().unwrap();
        c.tensors.pop();
        assert!(GcmModel::from_container(&c).is_err());
    }
}
