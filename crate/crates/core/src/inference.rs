//! Two-stage inference. A binary rule first decides seen versus unseen, then
//! a stage-2 classifier labels the sample within the chosen side.
//!
//! Zero-shot: a linear softmax over seen and unseen classes is trained on the
//! seen training data plus counterfactuals of the test samples under every
//! unseen attribute; top-K pooled probabilities drive the binary rule.
//!
//! Open set: a test sample is unseen when no seen-class counterfactual of it
//! lies within `tau`; otherwise the regressor names the seen class.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::counterfactual::{abduct, counterfactual_distances, counterfactual_grid, counterfactual_set, CounterfactualModel, CounterfactualRequest, CounterfactualSet, ZMode};
use crate::data::DatasetBundle;
use crate::error::{GcmError, Result};
use crate::metrics::{self, EvalReport, OpennessPoint, SucPoint};
use crate::model::GcmModel;
use crate::rng;
use crate::tensor::{gemm, Mat};
use crate::training::Adam;

/// Class ids of the joint vocabulary: seen classes first, then unseen.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub seen: Vec<u32>,
    pub unseen: Vec<u32>,
}

impl Vocabulary {
    pub fn new(seen: Vec<u32>, unseen: Vec<u32>) -> Result<Self> {
        if seen.is_empty() || unseen.is_empty() {
            return Err(GcmError::InvalidArgument("the vocabulary needs seen and unseen classes".into()));
        }
        if seen.iter().any(|c| unseen.contains(c)) {
            return Err(GcmError::InvalidArgument("seen and unseen classes overlap".into()));
        }
        Ok(Self { seen, unseen })
    }

    pub fn len(&self) -> usize {
        self.seen.len() + self.unseen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_seen(&self) -> usize {
        self.seen.len()
    }

    pub fn class(&self, index: usize) -> u32 {
        if index < self.seen.len() {
            self.seen[index]
        } else {
            self.unseen[index - self.seen.len()]
        }
    }

    pub fn index(&self, class: u32) -> Option<usize> {
        self.seen
            .iter()
            .position(|&c| c == class)
            .or_else(|| self.unseen.iter().position(|&c| c == class).map(|i| i + self.seen.len()))
    }

    /// `min(10, |S|, |U|)`.
    pub fn default_k(&self) -> usize {
        10.min(self.seen.len()).min(self.unseen.len())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { epochs: 30, learning_rate: 1e-2, batch_size: 256, seed: 0 }
    }
}

/// One fully connected layer followed by a softmax over the vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct JointClassifier {
    pub weights: Mat,
    pub bias: Mat,
    pub vocab: Vocabulary,
}

fn softmax_rows(logits: &Mat) -> Mat {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_slice_mut(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

impl JointClassifier {
    pub fn logits(&self, x: &Mat) -> Mat {
        let mut z = gemm(x, false, &self.weights, false);
        for i in 0..z.rows() {
            for (v, b) in z.row_slice_mut(i).iter_mut().zip(self.bias.as_slice()) {
                *v += b;
            }
        }
        z
    }

    pub fn probabilities(&self, x: &Mat) -> Mat {
        softmax_rows(&self.logits(x))
    }
}

/// Cross-entropy training of the joint classifier on seen data plus the
/// unseen-class counterfactuals. Weights start at zero, so only the batch
/// order depends on the seed.
pub fn train_joint_classifier(
    seen_x: &Mat,
    seen_labels: &[u32],
    cf_x: &Mat,
    cf_labels: &[u32],
    vocab: &Vocabulary,
    cfg: &ClassifierConfig,
) -> Result<JointClassifier> {
    if cf_x.rows() == 0 {
        return Err(GcmError::InvalidArgument("the counterfactual set is empty".into()));
    }
    if seen_x.rows() != seen_labels.len() || cf_x.rows() != cf_labels.len() {
        return Err(GcmError::Shape("one label per row required".into()));
    }
    let x = seen_x.vstack(cf_x)?;
    let mut targets = Vec::with_capacity(x.rows());
    for &l in seen_labels.iter().chain(cf_labels) {
        targets.push(vocab.index(l).ok_or_else(|| GcmError::InvalidArgument(format!("label {l} outside the vocabulary")))?);
    }
    for i in 0..vocab.len() {
        if !targets.contains(&i) {
            return Err(GcmError::InvalidArgument(format!("class {} has no training samples", vocab.class(i))));
        }
    }
    let (d, v) = (x.cols(), vocab.len());
    let mut clf = JointClassifier { weights: Mat::zeros(d, v), bias: Mat::zeros(1, v), vocab: vocab.clone() };
    let mut opt = Adam::new(cfg.learning_rate);
    let mut order: Vec<usize> = (0..x.rows()).collect();
    let mut r = rng::rng_for(cfg.seed, "classifier");
    for _ in 0..cfg.epochs {
        order.shuffle(&mut r);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let xb = x.select_rows(chunk);
            let mut g = clf.probabilities(&xb);
            for (row, &i) in chunk.iter().enumerate() {
                let t = targets[i];
                g.set(row, t, g.get(row, t) - 1.0);
            }
            let scale = 1.0 / chunk.len() as f64;
            let gw = gemm(&xb, true, &g, false).map(|v| v * scale);
            let gb = Mat::from_fn(1, v, |_, j| (0..g.rows()).map(|i| g.get(i, j)).sum::<f64>() * scale);
            opt.begin_step();
            opt.update("w", &mut clf.weights, &gw);
            opt.update("b", &mut clf.bias, &gb);
        }
    }
    Ok(clf)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Seen,
    Unseen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum DecisionDetail {
    TopK { s_k: f64, u_k: f64, k: usize },
    Distance { d_min: f64, tau: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryDecision {
    pub label: Side,
    /// `S^K - U^K` for the zero-shot rule, `d_min` for the open-set rule.
    pub score: f64,
    pub detail: DecisionDetail,
}

fn top_k_mean(values: impl Iterator<Item = f64>, k: usize) -> f64 {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(|a, b| b.total_cmp(a));
    v[..k].iter().sum::<f64>() / k as f64
}

/// Seen iff the mean of the top-K seen probabilities exceeds that of the
/// unseen ones; ties go to unseen.
pub fn zsl_binary(probs: &[f64], vocab: &Vocabulary, k: usize) -> Result<BinaryDecision> {
    if probs.len() != vocab.len() {
        return Err(GcmError::Shape(format!("{} probabilities for a vocabulary of {}", probs.len(), vocab.len())));
    }
    let sum: f64 = probs.iter().sum();
    if probs.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-6 {
        return Err(GcmError::InvalidArgument(format!("not a probability vector (sum {sum})")));
    }
    if k == 0 {
        return Err(GcmError::InvalidArgument("K must be at least 1".into()));
    }
    let s = vocab.num_seen();
    let k = k.min(s).min(vocab.unseen.len());
    let s_k = top_k_mean(probs[..s].iter().copied(), k);
    let u_k = top_k_mean(probs[s..].iter().copied(), k);
    let label = if u_k < s_k { Side::Seen } else { Side::Unseen };
    Ok(BinaryDecision { label, score: s_k - u_k, detail: DecisionDetail::TopK { s_k, u_k, k } })
}

/// Softmax of `logits` after subtracting `omega` from the seen entries.
/// Infinite `omega` gives the limiting distributions.
pub fn calibrated_probs(logits: &[f64], num_seen: usize, omega: f64) -> Vec<f64> {
    if omega == f64::NEG_INFINITY {
        let mut p = softmax_rows(&Mat::row(&logits[..num_seen])).into_vec();
        p.resize(logits.len(), 0.0);
        return p;
    }
    let shifted: Vec<f64> = logits.iter().enumerate().map(|(i, &v)| if i < num_seen { v - omega } else { v }).collect();
    softmax_rows(&Mat::row(&shifted)).into_vec()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZslPrediction {
    pub binary: BinaryDecision,
    pub class: u32,
}

/// Binary rule, then argmax within the chosen side of the vocabulary.
pub fn two_stage_zsl_logits(logits: &Mat, vocab: &Vocabulary, k: usize, omega: f64) -> Result<Vec<ZslPrediction>> {
    if logits.cols() != vocab.len() {
        return Err(GcmError::Shape("logit width differs from the vocabulary".into()));
    }
    let s = vocab.num_seen();
    (0..logits.rows())
        .map(|i| {
            let row = logits.row_slice(i);
            let binary = zsl_binary(&calibrated_probs(row, s, omega), vocab, k)?;
            let class = match binary.label {
                Side::Seen => vocab.class(argmax(&row[..s])),
                Side::Unseen => vocab.class(s + argmax(&row[s..])),
            };
            Ok(ZslPrediction { binary, class })
        })
        .collect()
}

pub fn two_stage_zsl(clf: &JointClassifier, x: &Mat, k: usize, omega: f64) -> Result<Vec<ZslPrediction>> {
    two_stage_zsl_logits(&clf.logits(x), &clf.vocab, k, omega)
}

/// Unseen iff `d_min > tau`.
pub fn osr_binary(cf_set: &CounterfactualSet, tau: f64) -> Result<BinaryDecision> {
    let d_min = cf_set.min_distance().ok_or_else(|| GcmError::InvalidArgument("empty counterfactual set".into()))?;
    Ok(osr_decision(d_min, tau))
}

pub fn osr_decision(d_min: f64, tau: f64) -> BinaryDecision {
    let label = if d_min > tau { Side::Unseen } else { Side::Seen };
    BinaryDecision { label, score: d_min, detail: DecisionDetail::Distance { d_min, tau } }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OsrPrediction {
    pub binary: BinaryDecision,
    /// `None` is the "unknown" label.
    pub class: Option<u32>,
}

/// Per-sample `d_min` over seen-class counterfactuals and the regressor's
/// seen-class guess (nearest seen attribute to its output).
pub fn osr_scores(model: &GcmModel, x: &Mat, seen_attrs: &Mat, seen: &[u32], z_mode: ZMode) -> Result<(Vec<f64>, Vec<u32>)> {
    if seen_attrs.rows() != seen.len() || seen.is_empty() {
        return Err(GcmError::Shape("one attribute row per seen class required".into()));
    }
    let d_min = match z_mode {
        ZMode::PosteriorMean => {
            let d = counterfactual_distances(model, x, seen_attrs)?;
            (0..d.rows()).map(|i| d.row_slice(i).iter().copied().fold(f64::INFINITY, f64::min)).collect()
        }
        ZMode::Sample { n, seed } => {
            let targets: Vec<Vec<f64>> = (0..seen_attrs.rows()).map(|i| seen_attrs.row_slice(i).to_vec()).collect();
            (0..x.rows())
                .map(|i| {
                    let req = CounterfactualRequest {
                        x: x.row_slice(i).to_vec(),
                        targets: targets.clone(),
                        z_mode: ZMode::Sample { n, seed: rng::derive_seed(seed, &format!("sample{i}")) },
                    };
                    Ok(counterfactual_set(model, &req)?.min_distance().unwrap_or(f64::INFINITY))
                })
                .collect::<Result<Vec<f64>>>()?
        }
    };
    let (yhat, _) = model.regress_batch(x)?;
    let guess = (0..yhat.rows())
        .map(|i| {
            let y = yhat.row_slice(i);
            let d: Vec<f64> = (0..seen.len()).map(|c| -crate::counterfactual::dist(y, seen_attrs.row_slice(c))).collect();
            seen[argmax(&d)]
        })
        .collect();
    Ok((d_min, guess))
}

pub fn osr_predictions(d_min: &[f64], guesses: &[u32], tau: f64) -> Vec<OsrPrediction> {
    d_min
        .iter()
        .zip(guesses)
        .map(|(&d, &g)| {
            let binary = osr_decision(d, tau);
            let class = (binary.label == Side::Seen).then_some(g);
            OsrPrediction { binary, class }
        })
        .collect()
}

pub fn two_stage_osr(model: &GcmModel, x: &Mat, seen_attrs: &Mat, seen: &[u32], tau: f64) -> Result<Vec<OsrPrediction>> {
    let (d, g) = osr_scores(model, x, seen_attrs, seen, ZMode::PosteriorMean)?;
    Ok(osr_predictions(&d, &g, tau))
}

/// Picks the `tau` maximizing macro-F1 on labeled data. Candidates are 0 and
/// every observed `d_min`; ties keep the smallest.
pub fn tune_tau(d_min: &[f64], guesses: &[u32], labels: &[u32], seen: &[u32]) -> Result<(f64, f64)> {
    if d_min.is_empty() {
        return Err(GcmError::InvalidArgument("no validation samples for tuning tau".into()));
    }
    let truth = metrics::open_set_labels(labels, seen);
    let mut cands: Vec<f64> = std::iter::once(0.0).chain(d_min.iter().copied()).collect();
    cands.sort_by(f64::total_cmp);
    cands.dedup();
    let mut best = (cands[0], f64::NEG_INFINITY);
    for tau in cands {
        let preds: Vec<Option<u32>> = osr_predictions(d_min, guesses, tau).into_iter().map(|p| p.class).collect();
        let f1 = metrics::macro_f1_unknown(&preds, &truth, seen)?;
        if f1 > best.1 {
            best = (tau, f1);
        }
    }
    Ok(best)
}

/// Settings of the evaluation pipelines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    /// `None` uses [`Vocabulary::default_k`].
    pub k: Option<usize>,
    pub omega_cal: f64,
    pub omega_grid: Vec<f64>,
    pub tau: f64,
    pub tune_tau: bool,
    pub classifier: ClassifierConfig,
    pub z_mode: ZMode,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            k: None,
            omega_cal: 0.0,
            omega_grid: (0..=40).map(|i| -10.0 + 0.5 * i as f64).collect(),
            tau: 0.5,
            tune_tau: false,
            classifier: ClassifierConfig::default(),
            z_mode: ZMode::PosteriorMean,
        }
    }
}

/// Counterfactuals of every row of `x` under every target, with their target
/// row index. Sample mode pools all draws.
fn pooled_counterfactuals<M: CounterfactualModel + ?Sized>(model: &M, x: &Mat, targets: &Mat, z_mode: ZMode) -> Result<(Mat, Vec<usize>)> {
    let t = targets.rows();
    match z_mode {
        ZMode::PosteriorMean => Ok((counterfactual_grid(model, x, targets)?, (0..x.rows() * t).map(|r| r % t).collect())),
        ZMode::Sample { n, seed } => {
            let mut z = Vec::new();
            let mut rows = Vec::new();
            for i in 0..x.rows() {
                let mode = ZMode::Sample { n, seed: rng::derive_seed(seed, &format!("sample{i}")) };
                for draw in abduct(model, x.row_slice(i), mode)? {
                    for ti in 0..t {
                        z.push(draw.clone());
                        rows.push((i, ti));
                    }
                }
            }
            let z = Mat::from_rows(&z)?;
            let y = targets.select_rows(&rows.iter().map(|r| r.1).collect::<Vec<_>>());
            let f = x.select_rows(&rows.iter().map(|r| r.0).collect::<Vec<_>>());
            Ok((model.generate(&z, &y, &f)?, rows.into_iter().map(|r| r.1).collect()))
        }
    }
}

/// Everything the zero-shot pipeline produced for one test set.
#[derive(Clone, Debug)]
pub struct ZslRun {
    pub classifier: JointClassifier,
    pub test_idx: Vec<usize>,
    pub test_labels: Vec<u32>,
    pub logits: Mat,
    pub k: usize,
    pub predictions: Vec<ZslPrediction>,
}

pub fn run_zsl(model: &GcmModel, bundle: &DatasetBundle, cfg: &InferenceConfig) -> Result<ZslRun> {
    let vocab = Vocabulary::new(bundle.split.seen_class_ids.clone(), bundle.split.unseen_class_ids.clone())?;
    let (x_train, y_train) = bundle.train_set();
    let (x_test, y_test) = bundle.test_set();
    let unseen_attrs = bundle.attribute_table(&vocab.unseen);
    let (cf, target_rows) = pooled_counterfactuals(model, &x_test, &unseen_attrs, cfg.z_mode)?;
    let cf_labels: Vec<u32> = target_rows.iter().map(|&t| vocab.unseen[t]).collect();
    let classifier = train_joint_classifier(&x_train, &y_train, &cf, &cf_labels, &vocab, &cfg.classifier)?;
    let logits = classifier.logits(&x_test);
    let k = cfg.k.unwrap_or(vocab.default_k());
    let predictions = two_stage_zsl_logits(&logits, &vocab, k, cfg.omega_cal)?;
    Ok(ZslRun { classifier, test_idx: bundle.split.test_idx.clone(), test_labels: y_test, logits, k, predictions })
}

/// `(U, S)` per-class accuracies of two-stage predictions.
fn zsl_accuracies(preds: &[ZslPrediction], labels: &[u32], vocab: &Vocabulary) -> Result<(f64, f64)> {
    let p: Vec<u32> = preds.iter().map(|p| p.class).collect();
    Ok((metrics::per_class_top1(&p, labels, &vocab.unseen)?, metrics::per_class_top1(&p, labels, &vocab.seen)?))
}

/// `(S_b, U_b)`: binary accuracy on seen-class and on unseen-class samples.
pub fn binary_accuracies(sides: &[Side], labels: &[u32], seen: &[u32]) -> Result<(f64, f64)> {
    let (mut sn, mut sh, mut un, mut uh) = (0usize, 0usize, 0usize, 0usize);
    for (s, l) in sides.iter().zip(labels) {
        if seen.contains(l) {
            sn += 1;
            sh += usize::from(*s == Side::Seen);
        } else {
            un += 1;
            uh += usize::from(*s == Side::Unseen);
        }
    }
    if sn == 0 || un == 0 {
        return Err(GcmError::InvalidArgument("binary accuracy needs seen and unseen test samples".into()));
    }
    Ok((sh as f64 / sn as f64, uh as f64 / un as f64))
}

/// `(U, S)` at every calibration in `grid`, plus sentinels at both infinities.
pub fn suc_sweep(logits: &Mat, labels: &[u32], vocab: &Vocabulary, k: usize, grid: &[f64]) -> Result<Vec<SucPoint>> {
    if grid.is_empty() {
        return Err(GcmError::InvalidArgument("empty calibration grid".into()));
    }
    std::iter::once(f64::NEG_INFINITY)
        .chain(grid.iter().copied())
        .chain(std::iter::once(f64::INFINITY))
        .map(|omega| {
            let preds = two_stage_zsl_logits(logits, vocab, k, omega)?;
            let (u, s) = zsl_accuracies(&preds, labels, vocab)?;
            Ok(SucPoint { omega, u, s })
        })
        .collect()
}

/// Raw zero-shot scores at full precision.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ZslScores {
    pub u: f64,
    pub s: f64,
    pub h: f64,
    pub s_b: f64,
    pub u_b: f64,
    pub cvb: f64,
    pub ausuc: f64,
}

pub fn score_zsl(run: &ZslRun, grid: &[f64]) -> Result<(ZslScores, Vec<SucPoint>)> {
    let vocab = &run.classifier.vocab;
    let (u, s) = zsl_accuracies(&run.predictions, &run.test_labels, vocab)?;
    let sides: Vec<Side> = run.predictions.iter().map(|p| p.binary.label).collect();
    let (s_b, u_b) = binary_accuracies(&sides, &run.test_labels, &vocab.seen)?;
    let curve = suc_sweep(&run.logits, &run.test_labels, vocab, run.k, grid)?;
    let scores = ZslScores {
        u,
        s,
        h: metrics::harmonic_mean(u, s)?,
        s_b,
        u_b,
        cvb: metrics::cvb(s_b, u_b)?,
        ausuc: metrics::ausuc(&curve)?,
    };
    Ok((scores, curve))
}

pub const ZSL_STAGE2: &str = "joint classifier restricted to the unseen vocabulary";
pub const OSR_STAGE2: &str = "regressor nearest seen attribute";

pub fn evaluate_zsl(model: &GcmModel, bundle: &DatasetBundle, cfg: &InferenceConfig, seed: u64, config_hash: &str) -> Result<(EvalReport, ZslRun)> {
    let run = run_zsl(model, bundle, cfg)?;
    let (sc, curve) = score_zsl(&run, &cfg.omega_grid)?;
    let mut r = EvalReport::new("zsl", ZSL_STAGE2, seed, config_hash);
    r.u = Some(metrics::percent(sc.u));
    r.s = Some(metrics::percent(sc.s));
    r.h = Some(metrics::percent(sc.h));
    r.s_b = Some(sc.s_b);
    r.u_b = Some(sc.u_b);
    r.cvb = Some(sc.cvb);
    r.ausuc = Some(sc.ausuc);
    r.suc_curve = curve;
    r.omega_cal = Some(cfg.omega_cal);
    r.k = Some(run.k);
    Ok((r, run))
}

/// Everything the open-set pipeline produced.
#[derive(Clone, Debug)]
pub struct OsrRun {
    /// Test-set positions used for evaluation (all, or the non-validation half).
    pub eval_positions: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub test_labels: Vec<u32>,
    pub d_min: Vec<f64>,
    pub guesses: Vec<u32>,
    pub tau: f64,
    pub predictions: Vec<OsrPrediction>,
}

pub fn run_osr(model: &GcmModel, bundle: &DatasetBundle, cfg: &InferenceConfig, seed: u64) -> Result<OsrRun> {
    let seen = bundle.split.seen_class_ids.clone();
    let seen_attrs = bundle.attribute_table(&seen);
    let (x_test, labels) = bundle.test_set();
    let (d_min, guesses) = osr_scores(model, &x_test, &seen_attrs, &seen, cfg.z_mode)?;
    let mut positions: Vec<usize> = (0..labels.len()).collect();
    let (tau, eval_positions) = if cfg.tune_tau {
        positions.shuffle(&mut rng::rng_for(seed, "tau-split"));
        let (val, eval) = positions.split_at(positions.len() / 2);
        let pick = |idx: &[usize]| -> (Vec<f64>, Vec<u32>, Vec<u32>) {
            (idx.iter().map(|&i| d_min[i]).collect(), idx.iter().map(|&i| guesses[i]).collect(), idx.iter().map(|&i| labels[i]).collect())
        };
        let (d, g, l) = pick(val);
        let (tau, _) = tune_tau(&d, &g, &l, &seen)?;
        let mut eval = eval.to_vec();
        eval.sort_unstable();
        (tau, eval)
    } else {
        (cfg.tau, positions)
    };
    let predictions = osr_predictions(&d_min, &guesses, tau);
    Ok(OsrRun { eval_positions, test_idx: bundle.split.test_idx.clone(), test_labels: labels, d_min, guesses, tau, predictions })
}

pub fn evaluate_osr(model: &GcmModel, bundle: &DatasetBundle, cfg: &InferenceConfig, seed: u64, config_hash: &str) -> Result<(EvalReport, OsrRun)> {
    let run = run_osr(model, bundle, cfg, seed)?;
    let seen = &bundle.split.seen_class_ids;
    let unseen = &bundle.split.unseen_class_ids;
    let f1_on = |allowed: &dyn Fn(u32) -> bool| -> Result<f64> {
        let pos: Vec<usize> = run.eval_positions.iter().copied().filter(|&p| allowed(run.test_labels[p])).collect();
        let preds: Vec<Option<u32>> = pos.iter().map(|&p| run.predictions[p].class).collect();
        let labels: Vec<u32> = pos.iter().map(|&p| run.test_labels[p]).collect();
        metrics::macro_f1_unknown(&preds, &metrics::open_set_labels(&labels, seen), seen)
    };
    let mut r = EvalReport::new("osr", OSR_STAGE2, seed, config_hash);
    r.f1_macro = Some(f1_on(&|_| true)?);
    r.openness = Some(metrics::openness(seen.len(), seen.len() + unseen.len())?);
    let mut series = Vec::new();
    for m in 0..=unseen.len() {
        let included = &unseen[..m];
        series.push(OpennessPoint {
            num_unseen: m,
            openness: metrics::openness(seen.len(), seen.len() + m)?,
            f1_macro: f1_on(&|l| seen.contains(&l) || included.contains(&l))?,
        });
    }
    r.openness_series = series;
    r.tau = Some(run.tau);
    if !unseen.is_empty() {
        let sides: Vec<Side> = run.eval_positions.iter().map(|&p| run.predictions[p].binary.label).collect();
        let labels: Vec<u32> = run.eval_positions.iter().map(|&p| run.test_labels[p]).collect();
        if let Ok((s_b, u_b)) = binary_accuracies(&sides, &labels, seen) {
            r.s_b = Some(s_b);
            r.u_b = Some(u_b);
            r.cvb = metrics::cvb(s_b, u_b).ok();
        }
    }
    Ok((r, run))
}
