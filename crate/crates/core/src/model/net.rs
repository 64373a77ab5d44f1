//! Graph-level forward passes of the encoder, decoder, regressor,
//! discriminator and feedback networks for both backbones.

use std::cell::RefCell;
use std::rc::Rc;

use crate::autodiff::{IndexMap, Tape, Var};
use crate::rng::Rng;
use crate::tensor::Mat;

use super::config::{Backbone, ImageShape, LadderNoise, ModelConfig, OutputActivation};
use super::params::{init_linear, Bound, GcmParams, ParamGroup, ParamSet};

const BN_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.1;

/// Batch statistics observed by a training-mode batch-norm layer.
#[derive(Clone, Debug)]
pub struct BatchStat {
    pub layer: String,
    pub mean: Mat,
    pub var: Mat,
}

pub struct Net<'t, 'm> {
    tape: &'t Tape,
    cfg: &'m ModelConfig,
    bound: Bound<'t>,
    buffers: &'m ParamSet,
    train: bool,
    stats: RefCell<Vec<BatchStat>>,
}

impl<'t, 'm> Net<'t, 'm> {
    pub fn new(
        tape: &'t Tape,
        cfg: &'m ModelConfig,
        params: &'m GcmParams,
        trainable: &[ParamGroup],
        train: bool,
    ) -> Self {
        Self {
            tape,
            cfg,
            bound: Bound::new(tape, params, trainable),
            buffers: &params.buffers,
            train,
            stats: RefCell::new(Vec::new()),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn config(&self) -> &ModelConfig {
        self.cfg
    }

    pub fn bound(&self) -> &Bound<'t> {
        &self.bound
    }

    pub fn take_batch_stats(&self) -> Vec<BatchStat> {
        std::mem::take(&mut self.stats.borrow_mut())
    }

    fn p(&self, g: ParamGroup, name: &str) -> Var<'t> {
        self.bound.get(g, name)
    }

    fn linear(&self, g: ParamGroup, prefix: &str, x: Var<'t>) -> Var<'t> {
        x.matmul(self.p(g, &format!("{prefix}.w"))).add_row(self.p(g, &format!("{prefix}.b")))
    }

    fn leaky(&self, x: Var<'t>) -> Var<'t> {
        x.leaky_relu(self.cfg.leaky_slope)
    }

    fn output(&self, x: Var<'t>) -> Var<'t> {
        match self.cfg.output_activation {
            OutputActivation::Sigmoid => x.sigmoid(),
            OutputActivation::Identity => x,
        }
    }

    /// Posterior `(mean, stddev)` of the sample attribute, each `batch x z_dim`.
    pub fn encode(&self, x: Var<'t>) -> (Var<'t>, Var<'t>) {
        use ParamGroup::Encoder as E;
        match self.cfg.backbone {
            Backbone::Mlp => {
                let head = |name: &str| {
                    let a = self.leaky(self.linear(E, &format!("{name}.l0"), x));
                    let b = self.leaky(self.linear(E, &format!("{name}.l1"), a));
                    self.linear(E, &format!("{name}.l2"), b)
                };
                (head("mean"), head("std").softplus())
            }
            Backbone::Ladder => {
                let geo = self.ladder_geometry();
                let mut a = x;
                for l in 1..geo.len() {
                    a = self.conv_block(l, geo[l - 1], geo[l], a);
                }
                let h = self.linear(E, "flat", a);
                let mean = self.linear(E, "mu", h);
                let var = self.linear(E, "var", h).softplus();
                (mean, var.sqrt())
            }
        }
    }

    /// Mean of the fixed-variance Gaussian over features.
    ///
    /// `feedback` is the regressor hidden layer of the factual sample, used
    /// only when the feedback module is enabled. `noise` holds one
    /// `batch x hidden_dim` matrix per intermediate ladder layer; `None`
    /// decodes the means.
    pub fn decode(
        &self,
        z: Var<'t>,
        y: Var<'t>,
        feedback: Option<Var<'t>>,
        noise: Option<&[Mat]>,
    ) -> Var<'t> {
        use ParamGroup::Decoder as D;
        let input = z.hcat(y);
        match self.cfg.backbone {
            Backbone::Mlp => {
                let mut h = self.leaky(self.linear(D, "l0", input));
                if let (true, Some(fb)) = (self.cfg.use_feedback, feedback) {
                    h = h + self.feedback(fb);
                }
                self.output(self.linear(D, "l1", h))
            }
            Backbone::Ladder => {
                let geo = self.ladder_geometry();
                let batch = input.shape().0;
                let mut t = input;
                for l in (1..geo.len()).rev() {
                    let (cur, prev) = (geo[l], geo[l - 1]);
                    let layer = self.cfg.ladder_layers[l - 1];
                    let c = self.linear(D, &format!("unflat{l}"), t);
                    let pos = c.gather(Rc::new(img_to_pos(batch, cur)));
                    let cols = pos.matmul(self.p(D, &format!("convt{l}.w")));
                    let geom = ConvGeom::new(prev, cur, layer.kernel, layer.stride);
                    let mut img = cols.scatter(Rc::new(im2col(batch, &geom)));
                    img = img + channel_bias(self.p(D, &format!("convt{l}.b")), prev, batch);
                    if l == 1 {
                        return self.output(img);
                    }
                    let img = img.prelu(self.p(D, &format!("prelu{l}")));
                    let h = self.linear(D, &format!("flat{l}"), img);
                    let mu = self.linear(D, &format!("mu{l}"), h);
                    t = match noise {
                        Some(eps) => {
                            let var = self.linear(D, &format!("var{l}"), h).softplus();
                            let scale = match self.cfg.ladder_noise {
                                LadderNoise::Variance => var,
                                LadderNoise::Stddev => var.sqrt(),
                            };
                            mu + scale * self.tape.constant(eps[l - 2].clone())
                        }
                        None => mu,
                    };
                }
                unreachable!("ladder geometry has at least one layer")
            }
        }
    }

    /// `(y_hat, hidden)`; `hidden` feeds the feedback module.
    pub fn regress(&self, x: Var<'t>) -> (Var<'t>, Var<'t>) {
        use ParamGroup::Regressor as R;
        let h = self.leaky(self.linear(R, "l0", x));
        (self.linear(R, "l1", h), h)
    }

    pub fn feedback(&self, hidden: Var<'t>) -> Var<'t> {
        use ParamGroup::Feedback as F;
        let a = self.leaky(self.linear(F, "l0", hidden));
        self.linear(F, "l1", a)
    }

    /// Critic score, `batch x 1`.
    pub fn discriminate(&self, x: Var<'t>, y: Var<'t>) -> Var<'t> {
        use ParamGroup::Discriminator as C;
        let h = self.leaky(self.linear(C, "l0", x.hcat(y)));
        self.linear(C, "l1", h)
    }

    fn ladder_geometry(&self) -> Vec<ImageShape> {
        self.cfg.ladder_geometry().expect("validated ladder configuration")
    }

    /// Convolution, batch norm and PReLU of encoder layer `l`.
    fn conv_block(&self, l: usize, input: ImageShape, output: ImageShape, x: Var<'t>) -> Var<'t> {
        use ParamGroup::Encoder as E;
        let layer = self.cfg.ladder_layers[l - 1];
        let batch = x.shape().0;
        let geom = ConvGeom::new(input, output, layer.kernel, layer.stride);
        let cols = x.gather(Rc::new(im2col(batch, &geom)));
        let y = cols.matmul(self.p(E, &format!("conv{l}.w"))).add_row(self.p(E, &format!("conv{l}.b")));
        let y = self.batch_norm(l, y);
        let y = y.prelu(self.p(E, &format!("prelu{l}")));
        y.gather(Rc::new(pos_to_img(batch, output)))
    }

    /// Per-column normalization of a `positions x channels` matrix.
    fn batch_norm(&self, l: usize, y: Var<'t>) -> Var<'t> {
        use ParamGroup::Encoder as E;
        let n = y.shape().0;
        let key = format!("encoder.bn{l}");
        let normed = if self.train && n > 1 {
            let inv_n = 1.0 / n as f64;
            let mean = y.sum_rows().scale(inv_n);
            let centered = y - mean.broadcast_rows(n);
            let var = centered.square().sum_rows().scale(inv_n);
            self.stats.borrow_mut().push(BatchStat {
                layer: key,
                mean: (*mean.value()).clone(),
                var: (*var.value()).clone(),
            });
            centered * var.add_scalar(BN_EPS).sqrt().recip().broadcast_rows(n)
        } else {
            let mean = &self.buffers[&format!("{key}.mean")];
            let var = &self.buffers[&format!("{key}.var")];
            let shift = self.tape.constant(Mat::from_fn(n, mean.cols(), |_, j| mean.get(0, j)));
            let scale = Mat::from_fn(n, var.cols(), |_, j| 1.0 / (var.get(0, j) + BN_EPS).sqrt());
            (y - shift).mul_const(Rc::new(scale))
        };
        normed * self.p(E, &format!("bn{l}.gamma")).broadcast_rows(n)
            + self.p(E, &format!("bn{l}.beta")).broadcast_rows(n)
    }
}

/// Folds observed batch statistics into the running buffers.
pub(crate) fn update_running_stats(params: &mut GcmParams, stats: &[BatchStat]) {
    for s in stats {
        for (suffix, observed) in [("mean", &s.mean), ("var", &s.var)] {
            if let Some(buf) = params.buffers.get_mut(&format!("{}.{suffix}", s.layer)) {
                *buf = buf.zip_map(observed, |r, o| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * o);
            }
        }
    }
}

struct ConvGeom {
    input: ImageShape,
    output: ImageShape,
    kernel: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(input: ImageShape, output: ImageShape, kernel: usize, stride: usize) -> Self {
        Self { input, output, kernel, stride, pad: kernel / 2 }
    }
}

/// Patches of a `batch x (C*H*W)` image as `(batch*Ho*Wo) x (C*k*k)`, zero padded.
fn im2col(batch: usize, g: &ConvGeom) -> IndexMap {
    let (c_in, h, w) = (g.input.channels, g.input.height, g.input.width);
    let (ho, wo) = (g.output.height, g.output.width);
    let k = g.kernel;
    let in_len = c_in * h * w;
    let cols = c_in * k * k;
    let mut src = Vec::with_capacity(batch * ho * wo * cols);
    for b in 0..batch {
        for oy in 0..ho {
            for ox in 0..wo {
                for c in 0..c_in {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            let inside = iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w;
                            src.push(inside.then(|| {
                                b * in_len + c * h * w + iy as usize * w + ix as usize
                            }));
                        }
                    }
                }
            }
        }
    }
    IndexMap::new((batch, in_len), (batch * ho * wo, cols), src)
}

/// `(batch*H*W) x C` positions to a `batch x (C*H*W)` image.
fn pos_to_img(batch: usize, s: ImageShape) -> IndexMap {
    let hw = s.height * s.width;
    let c = s.channels;
    let src = (0..batch * c * hw)
        .map(|o| {
            let (b, rest) = (o / (c * hw), o % (c * hw));
            let (ch, p) = (rest / hw, rest % hw);
            Some((b * hw + p) * c + ch)
        })
        .collect();
    IndexMap::new((batch * hw, c), (batch, c * hw), src)
}

/// `batch x (C*H*W)` image to `(batch*H*W) x C` positions.
fn img_to_pos(batch: usize, s: ImageShape) -> IndexMap {
    let hw = s.height * s.width;
    let c = s.channels;
    let src = (0..batch * hw * c)
        .map(|o| {
            let (row, ch) = (o / c, o % c);
            let (b, p) = (row / hw, row % hw);
            Some(b * c * hw + ch * hw + p)
        })
        .collect();
    IndexMap::new((batch, c * hw), (batch * hw, c), src)
}

fn channel_bias<'t>(bias: Var<'t>, s: ImageShape, batch: usize) -> Var<'t> {
    let hw = s.height * s.width;
    let map = IndexMap::new((1, s.channels), (1, s.len()), (0..s.len()).map(|o| Some(o / hw)).collect());
    bias.gather(Rc::new(map)).broadcast_rows(batch)
}

/// Fresh parameters for `cfg`.
pub(crate) fn init_params(cfg: &ModelConfig, rng: &mut Rng) -> GcmParams {
    let mut p = GcmParams::default();
    let (d, a, z, h) = (cfg.feature_dim, cfg.attr_dim, cfg.z_dim, cfg.hidden_dim);
    match cfg.backbone {
        Backbone::Mlp => {
            let enc = p.group_mut(ParamGroup::Encoder);
            for head in ["mean", "std"] {
                init_linear(rng, enc, &format!("{head}.l0"), d, h);
                init_linear(rng, enc, &format!("{head}.l1"), h, 2 * z);
                init_linear(rng, enc, &format!("{head}.l2"), 2 * z, z);
            }
            let dec = p.group_mut(ParamGroup::Decoder);
            init_linear(rng, dec, "l0", z + a, h);
            init_linear(rng, dec, "l1", h, d);
        }
        Backbone::Ladder => {
            let geo = cfg.ladder_geometry().expect("validated ladder configuration");
            let mut buffers = ParamSet::new();
            let enc = p.group_mut(ParamGroup::Encoder);
            for (i, layer) in cfg.ladder_layers.iter().enumerate() {
                let l = i + 1;
                let fan_in = geo[i].channels * layer.kernel * layer.kernel;
                init_linear(rng, enc, &format!("conv{l}"), fan_in, layer.channels);
                enc.insert(format!("bn{l}.gamma"), Mat::filled(1, layer.channels, 1.0));
                enc.insert(format!("bn{l}.beta"), Mat::zeros(1, layer.channels));
                enc.insert(format!("prelu{l}"), Mat::filled(1, 1, 0.25));
                buffers.insert(format!("encoder.bn{l}.mean"), Mat::zeros(1, layer.channels));
                buffers.insert(format!("encoder.bn{l}.var"), Mat::filled(1, layer.channels, 1.0));
            }
            init_linear(rng, enc, "flat", geo.last().expect("non-empty").len(), h);
            init_linear(rng, enc, "mu", h, z);
            init_linear(rng, enc, "var", h, z);
            p.buffers = buffers;

            let dec = p.group_mut(ParamGroup::Decoder);
            let top = geo.len() - 1;
            for l in (1..=top).rev() {
                let layer = cfg.ladder_layers[l - 1];
                let fan_in = if l == top { z + a } else { h };
                init_linear(rng, dec, &format!("unflat{l}"), fan_in, geo[l].len());
                let k2 = layer.kernel * layer.kernel;
                init_linear(rng, dec, &format!("convt{l}"), geo[l].channels, geo[l - 1].channels * k2);
                dec.insert(format!("convt{l}.b"), Mat::zeros(1, geo[l - 1].channels));
                if l > 1 {
                    dec.insert(format!("prelu{l}"), Mat::filled(1, 1, 0.25));
                    init_linear(rng, dec, &format!("flat{l}"), geo[l - 1].len(), h);
                    init_linear(rng, dec, &format!("mu{l}"), h, h);
                    init_linear(rng, dec, &format!("var{l}"), h, h);
                }
            }
        }
    }
    let reg = p.group_mut(ParamGroup::Regressor);
    init_linear(rng, reg, "l0", d, h);
    init_linear(rng, reg, "l1", h, a);
    let disc = p.group_mut(ParamGroup::Discriminator);
    init_linear(rng, disc, "l0", d + a, h);
    init_linear(rng, disc, "l1", h, 1);
    if cfg.use_feedback {
        let fb = p.group_mut(ParamGroup::Feedback);
        init_linear(rng, fb, "l0", h, h);
        init_linear(rng, fb, "l1", h, h);
    }
    p
}

/// Number of intermediate stochastic layers in the ladder decoder.
pub fn ladder_noise_layers(cfg: &ModelConfig) -> usize {
    match cfg.backbone {
        Backbone::Mlp => 0,
        Backbone::Ladder => cfg.ladder_layers.len().saturating_sub(1),
    }
}
