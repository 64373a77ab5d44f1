//! Shared fixtures for the integration and acceptance tests.

#![allow(dead_code)]

use gcmcf::autodiff::{Tape, Var};
use gcmcf::model::{GcmModel, ModelConfig, Net, ParamGroup};
use gcmcf::rng;
use gcmcf::tensor::Mat;
use gcmcf::training::{loss_f, loss_y, loss_z, Candidates, StepNoise};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

/// Fixed inputs of the three training objectives.
pub struct Fixture {
    pub x: Mat,
    pub y: Mat,
    pub noise: StepNoise,
    pub cand: Candidates,
    pub alpha: Mat,
    pub beta: f64,
    pub lambda: f64,
}

pub type Objective = for<'t, 'm> fn(&Net<'t, 'm>, &Fixture) -> Var<'t>;

pub fn obj_loss_z<'t>(net: &Net<'t, '_>, f: &Fixture) -> Var<'t> {
    let t = net.tape();
    loss_z(net, t.constant(f.x.clone()), t.constant(f.y.clone()), f.beta, &f.noise).total
}

/// `L_Y` with `z` taken from the encoder mean, so the encoder is reached too.
pub fn obj_loss_y<'t>(net: &Net<'t, '_>, f: &Fixture) -> Var<'t> {
    let x = net.tape().constant(f.x.clone());
    let (mean, _) = net.encode(x);
    loss_y(net, x, mean, &f.cand)
}

/// `L_F` with `x'` decoded from a reparameterized posterior sample, so the
/// penalty's second-order path reaches every generator group.
pub fn obj_loss_f<'t>(net: &Net<'t, '_>, f: &Fixture) -> Var<'t> {
    let t = net.tape();
    let (x, y) = (t.constant(f.x.clone()), t.constant(f.y.clone()));
    let (mean, std) = net.encode(x);
    let z = mean + std * t.constant(f.noise.eps_z.clone());
    let fb = net.config().use_feedback.then(|| net.regress(x).1);
    let x_prime = net.decode(z, y, fb, None);
    loss_f(&|a, c| net.discriminate(a, c), x, y, x_prime, &f.alpha, f.lambda).expect("valid alpha").0
}

pub fn small_model(seed: u64) -> GcmModel {
    let mut cfg = ModelConfig::mlp(8, 4);
    cfg.z_dim = 3;
    cfg.hidden_dim = 8;
    cfg.use_feedback = true;
    GcmModel::new(cfg, seed).expect("valid config")
}

pub fn fixture(model: &GcmModel, batch: usize, seed: u64) -> Fixture {
    let mut r = rng::rng_for(seed, "fixture");
    let cfg = &model.config;
    let x = Mat::from_fn(batch, cfg.feature_dim, |_, _| r.random::<f64>());
    let y = rng::normal_mat(&mut r, batch, cfg.attr_dim);
    let noise = StepNoise::draw(&mut r, model, batch);
    let negatives: Vec<Vec<Vec<f64>>> = (0..batch).map(|_| (0..2).map(|_| rng::normal_vec(&mut r, cfg.attr_dim)).collect()).collect();
    let cand = Candidates::new(&y, &negatives).expect("distinct negatives");
    let alpha = Mat::from_fn(batch, 1, |_, _| r.random::<f64>());
    Fixture { x, y, noise, cand, alpha, beta: 0.7, lambda: 10.0 }
}

fn value(model: &GcmModel, f: &Fixture, obj: Objective, train: bool) -> f64 {
    let t = Tape::new();
    let net = Net::new(&t, &model.config, &model.params, &[], train);
    obj(&net, f).item()
}

/// Worst agreement between analytic and central-difference gradients for one
/// parameter group.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub group: ParamGroup,
    pub scalars: usize,
    /// `max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)`
    pub max_rel: f64,
    /// `|a - n| / max(|a|, |n|)` over the whole group.
    pub norm_rel: f64,
}

/// Entries with both gradients below this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

pub fn check_gradients(model: &GcmModel, f: &Fixture, obj: Objective, groups: &[ParamGroup], h: f64, train: bool) -> Vec<GradCheck> {
    let t = Tape::new();
    let net = Net::new(&t, &model.config, &model.params, groups, train);
    let out = obj(&net, f);
    let mut report = Vec::new();
    for &g in groups {
        let named = net.bound().group(g);
        if named.is_empty() {
            continue;
        }
        let wrt: Vec<Var<'_>> = named.iter().map(|(_, v)| *v).collect();
        let grads = t.grad(out, &wrt);
        let (mut max_rel, mut diff2, mut a2, mut n2, mut scalars) = (0.0f64, 0.0, 0.0, 0.0, 0);
        for ((name, _), gv) in named.iter().zip(grads) {
            let analytic = gv.value();
            let base = model.params.group(g)[name].clone();
            for k in 0..base.len() {
                let mut bumped = model.clone();
                let p = bumped.params.group_mut(g).get_mut(name).unwrap();
                p.as_mut_slice()[k] = base.as_slice()[k] + h;
                let up = value(&bumped, f, obj, train);
                bumped.params.group_mut(g).get_mut(name).unwrap().as_mut_slice()[k] = base.as_slice()[k] - h;
                let down = value(&bumped, f, obj, train);
                let n = (up - down) / (2.0 * h);
                let a = analytic.as_slice()[k];
                max_rel = max_rel.max((a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR));
                diff2 += (a - n) * (a - n);
                a2 += a * a;
                n2 += n * n;
                scalars += 1;
            }
        }
        let norm_rel = if a2.max(n2) == 0.0 { 0.0 } else { diff2.sqrt() / a2.sqrt().max(n2.sqrt()) };
        report.push(GradCheck { group: g, scalars, max_rel, norm_rel });
    }
    report
}

/// Monte-Carlo estimate of `KL(q || N(0, I))` and its standard error, from
/// log-density differences at draws of `q`.
pub fn kl_monte_carlo(mean: &[f64], std: &[f64], draws: usize, r: &mut rng::Rng) -> (f64, f64) {
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..draws {
        let mut log_ratio = 0.0;
        for (m, sd) in mean.iter().zip(std) {
            let e: f64 = StandardNormal.sample(r);
            let z = m + sd * e;
            // log q(z) - log p(z); the 2*pi terms cancel.
            log_ratio += -0.5 * e * e - sd.ln() + 0.5 * z * z;
        }
        s += log_ratio;
        s2 += log_ratio * log_ratio;
    }
    let n = draws as f64;
    let mean_est = s / n;
    let var = (s2 / n - mean_est * mean_est) * n / (n - 1.0);
    (mean_est, (var / n).sqrt())
}
