use std::collections::BTreeMap;

use rand::Rng as _;

use crate::autodiff::{Tape, Var};
use crate::rng::Rng;
use crate::tensor::Mat;

pub type ParamSet = BTreeMap<String, Mat>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    Encoder,
    Decoder,
    Regressor,
    Discriminator,
    Feedback,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Encoder,
        ParamGroup::Decoder,
        ParamGroup::Regressor,
        ParamGroup::Discriminator,
        ParamGroup::Feedback,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Encoder => "encoder",
            ParamGroup::Decoder => "decoder",
            ParamGroup::Regressor => "regressor",
            ParamGroup::Discriminator => "discriminator",
            ParamGroup::Feedback => "feedback",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// The four network parameter sets plus the feedback module, and
/// non-trainable buffers (batch-norm running statistics).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GcmParams {
    sets: [ParamSet; 5],
    pub buffers: ParamSet,
}

impl GcmParams {
    pub fn group(&self, g: ParamGroup) -> &ParamSet {
        &self.sets[g.index()]
    }

    pub fn group_mut(&mut self, g: ParamGroup) -> &mut ParamSet {
        &mut self.sets[g.index()]
    }

    pub fn encoder(&self) -> &ParamSet {
        self.group(ParamGroup::Encoder)
    }

    pub fn decoder(&self) -> &ParamSet {
        self.group(ParamGroup::Decoder)
    }

    pub fn regressor(&self) -> &ParamSet {
        self.group(ParamGroup::Regressor)
    }

    pub fn discriminator(&self) -> &ParamSet {
        self.group(ParamGroup::Discriminator)
    }

    pub fn feedback(&self) -> &ParamSet {
        self.group(ParamGroup::Feedback)
    }

    pub fn num_scalars(&self) -> usize {
        self.sets.iter().flat_map(|s| s.values()).map(Mat::len).sum()
    }

    pub fn map_all(&mut self, f: impl Fn(&Mat) -> Mat) {
        for set in self.sets.iter_mut().chain(std::iter::once(&mut self.buffers)) {
            for m in set.values_mut() {
                *m = f(m);
            }
        }
    }

    /// Flat `(qualified name, tensor)` listing in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Mat)> {
        let mut out = Vec::new();
        for g in ParamGroup::ALL {
            for (k, m) in self.group(g) {
                out.push((format!("{}/{k}", g.name()), m));
            }
        }
        for (k, m) in &self.buffers {
            out.push((format!("buffers/{k}"), m));
        }
        out
    }

    pub fn insert_qualified(&mut self, qualified: &str, m: Mat) -> bool {
        let Some((prefix, name)) = qualified.split_once('/') else { return false };
        let set = match prefix {
            "buffers" => &mut self.buffers,
            other => match ParamGroup::ALL.iter().find(|g| g.name() == other) {
                Some(&g) => self.group_mut(g),
                None => return false,
            },
        };
        set.insert(name.to_string(), m);
        true
    }
}

/// Glorot-uniform weight and zero bias for a dense layer.
pub(crate) fn init_linear(rng: &mut Rng, set: &mut ParamSet, prefix: &str, fan_in: usize, fan_out: usize) {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let w = Mat::from_fn(fan_in, fan_out, |_, _| rng.random_range(-bound..bound));
    set.insert(format!("{prefix}.w"), w);
    set.insert(format!("{prefix}.b"), Mat::zeros(1, fan_out));
}

/// Parameters registered on a tape.
pub struct Bound<'t> {
    sets: [BTreeMap<String, Var<'t>>; 5],
}

impl<'t> Bound<'t> {
    /// Registers every parameter; groups in `trainable` become differentiable leaves.
    pub fn new(tape: &'t Tape, params: &GcmParams, trainable: &[ParamGroup]) -> Self {
        let sets = std::array::from_fn(|i| {
            let g = ParamGroup::ALL[i];
            let learn = trainable.contains(&g);
            params
                .group(g)
                .iter()
                .map(|(k, m)| {
                    let v = if learn { tape.var(m.clone()) } else { tape.constant(m.clone()) };
                    (k.clone(), v)
                })
                .collect()
        });
        Self { sets }
    }

    pub fn get(&self, g: ParamGroup, name: &str) -> Var<'t> {
        match self.sets[g.index()].get(name) {
            Some(v) => *v,
            None => panic!("parameter {}/{name} is missing", g.name()),
        }
    }

    /// `(name, var)` pairs of a group in a fixed order.
    pub fn group(&self, g: ParamGroup) -> Vec<(String, Var<'t>)> {
        self.sets[g.index()].iter().map(|(k, v)| (k.clone(), *v)).collect()
    }
}
