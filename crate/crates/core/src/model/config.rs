use serde::{Deserialize, Serialize};

use crate::error::{GcmError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    /// Fully connected networks over feature vectors.
    Mlp,
    /// Convolutional probabilistic ladder over small images.
    Ladder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Sigmoid,
    Identity,
}

/// Scale applied to the noise of the ladder decoder's stochastic layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LadderNoise {
    /// `t = mu + var * eps`
    Variance,
    /// `t = mu + sqrt(var) * eps`
    Stddev,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LadderLayer {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub attr_dim: usize,
    pub z_dim: usize,
    pub hidden_dim: usize,
    pub leaky_slope: f64,
    pub backbone: Backbone,
    pub ladder_layers: Vec<LadderLayer>,
    pub image_shape: Option<ImageShape>,
    pub use_feedback: bool,
    pub output_activation: OutputActivation,
    pub ladder_noise: LadderNoise,
}

impl ModelConfig {
    /// MLP backbone with desk-scale defaults; `z_dim` follows `attr_dim`.
    pub fn mlp(feature_dim: usize, attr_dim: usize) -> Self {
        Self {
            feature_dim,
            attr_dim,
            z_dim: attr_dim,
            hidden_dim: 64,
            leaky_slope: 0.2,
            backbone: Backbone::Mlp,
            ladder_layers: Vec::new(),
            image_shape: None,
            use_feedback: false,
            output_activation: OutputActivation::Sigmoid,
            ladder_noise: LadderNoise::Variance,
        }
    }

    pub fn ladder(image: ImageShape, attr_dim: usize, layers: Vec<LadderLayer>) -> Self {
        Self {
            feature_dim: image.len(),
            image_shape: Some(image),
            backbone: Backbone::Ladder,
            ladder_layers: layers,
            ..Self::mlp(image.len(), attr_dim)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        for (name, v) in [
            ("feature_dim", self.feature_dim),
            ("attr_dim", self.attr_dim),
            ("z_dim", self.z_dim),
            ("hidden_dim", self.hidden_dim),
        ] {
            if v == 0 {
                errs.push(format!("{name} must be positive"));
            }
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            errs.push(format!("leaky_slope must lie in (0, 1), got {}", self.leaky_slope));
        }
        if self.backbone == Backbone::Ladder {
            if self.ladder_layers.is_empty() {
                errs.push("ladder_layers must be non-empty for the ladder backbone".into());
            }
            if self.ladder_layers.iter().any(|l| l.channels == 0 || l.kernel == 0 || l.stride == 0) {
                errs.push("ladder_layers entries must be positive".into());
            }
            match self.image_shape {
                None => errs.push("image_shape is required for the ladder backbone".into()),
                Some(s) if s.len() != self.feature_dim => errs.push(format!(
                    "image_shape {}x{}x{} does not match feature_dim {}",
                    s.channels, s.height, s.width, self.feature_dim
                )),
                Some(_) => {}
            }
            if self.use_feedback {
                errs.push("use_feedback is only supported by the mlp backbone".into());
            }
            if errs.is_empty() && self.ladder_geometry().is_none() {
                errs.push("ladder_layers shrink the image to nothing".into());
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(GcmError::Config(errs))
        }
    }

    /// Activation shapes of the ladder encoder: input image first, then one per layer.
    pub fn ladder_geometry(&self) -> Option<Vec<ImageShape>> {
        let mut shapes = vec![self.image_shape?];
        for l in &self.ladder_layers {
            let prev = *shapes.last()?;
            let pad = l.kernel / 2;
            let out = |n: usize| (n + 2 * pad).checked_sub(l.kernel).map(|v| v / l.stride + 1);
            let s = ImageShape { channels: l.channels, height: out(prev.height)?, width: out(prev.width)? };
            if s.height == 0 || s.width == 0 {
                return None;
            }
            shapes.push(s);
        }
        Some(shapes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_follow_attr_dim() {
        let c = ModelConfig::mlp(16, 4);
        c.validate().unwrap();
        assert_eq!(c.z_dim, 4);
        assert_eq!(c.leaky_slope, 0.2);
    }

    #[test]
    fn invalid_fields_are_all_reported() {
        let mut c = ModelConfig::mlp(0, 4);
        c.leaky_slope = 1.5;
        let Err(GcmError::Config(errs)) = c.validate() else { panic!() };
        assert_eq!(errs.len(), 2);
    }

    #[test]
    fn ladder_requires_layers_and_shape() {
        let img = ImageShape { channels: 1, height: 8, width: 8 };
        let mut c = ModelConfig::ladder(img, 3, vec![]);
        assert!(c.validate().is_err());
        c.ladder_layers = vec![LadderLayer { channels: 4, kernel: 3, stride: 2 }];
        c.validate().unwrap();
        let g = c.ladder_geometry().unwrap();
        assert_eq!(g[1], ImageShape { channels: 4, height: 4, width: 4 });
    }
}
