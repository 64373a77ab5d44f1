//! Command-line driver.
//!
//! Configuration is flat `key = value` text. Every key can also be given as
//! `--key value` on the command line, which takes precedence over the file.
//! Exit codes: 0 on success, 1 for usage or validation errors, 2 for runtime
//! failures.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgAction, ArgMatches, Command};
use sha2::{Digest, Sha256};

use crate::checkpoint::{write_atomic, TensorContainer};
use crate::counterfactual::{counterfactual_set, CounterfactualRequest, ZMode};
use crate::data::{generate_synthetic_world, DatasetBundle, Nonlinearity, SynthWorldConfig};
use crate::error::{GcmError, Result};
use crate::inference::{self, ClassifierConfig, InferenceConfig, Side};
use crate::metrics;
use crate::model::{Backbone, GcmModel, LadderLayer, LadderNoise, ModelConfig, OutputActivation};
use crate::oracle::{faithfulness_report, FaithfulnessConfig, OracleWorld};
use crate::tensor::Mat;
use crate::training::{fit_with, Negatives, RegressorLoss, TrainingConfig, TrainingSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Zsl,
    Osr,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Zsl => "zsl",
            Mode::Osr => "osr",
        }
    }
}

/// Whether class attributes are dense semantic vectors or one-hot codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttributeKind {
    Dense,
    OneHot,
}

/// Every recognised configuration key with its help text.
pub const KEYS: &[(&str, &str)] = &[
    ("mode", "zsl or osr"),
    ("seed", "root seed for every random consumer"),
    ("attributes", "dense or one_hot; defaults follow the mode"),
    ("backbone", "mlp or ladder"),
    ("hidden_dim", "hidden width of the MLP networks"),
    ("z_dim", "sample-attribute width, or auto to match the attribute width"),
    ("leaky_slope", "LeakyReLU negative slope"),
    ("ladder_layers", "comma list of channels:kernel:stride"),
    ("ladder_noise", "variance or stddev"),
    ("use_feedback", "feed regressor features back into the decoder"),
    ("output_activation", "identity or sigmoid"),
    ("beta", "KL weight"),
    ("nu", "contrastive loss weight"),
    ("rho", "adversarial loss weight; defaults to 1 for zsl and 0 for osr"),
    ("lambda_gp", "gradient penalty weight"),
    ("learning_rate", "Adam step size"),
    ("epochs", "training epochs"),
    ("batch_size", "training batch size"),
    ("anneal_epochs", "epochs over which beta ramps up from 0"),
    ("negatives_per_anchor", "auto, all, or a count"),
    ("critic_steps", "critic updates per generator update"),
    ("ly_grad_to_encoder", "let the contrastive loss train the encoder"),
    ("regressor_loss", "squared_error or cross_entropy; defaults follow the mode"),
    ("k", "top-K pooling width for the zero-shot rule, or auto"),
    ("omega_cal", "calibration subtracted from seen logits"),
    ("omega_min", "first calibration value of the SUC sweep"),
    ("omega_max", "last calibration value of the SUC sweep"),
    ("omega_step", "spacing of the SUC sweep"),
    ("tau", "open-set distance threshold"),
    ("tune_tau", "pick tau on a held-out half of the test split"),
    ("z_mode", "mean or sample"),
    ("z_samples", "posterior draws per sample when z_mode = sample"),
    ("classifier_epochs", "epochs of the joint classifier"),
    ("classifier_learning_rate", "step size of the joint classifier"),
    ("classifier_batch_size", "batch size of the joint classifier"),
    ("faith_samples", "test samples used by the faithfulness check"),
    ("manifold_grid", "grid points per manifold-distance probe"),
    ("bundle", "dataset bundle path"),
    ("checkpoint", "model checkpoint path"),
    ("out", "output path (a directory for eval-zsl and eval-osr)"),
];

const PATH_KEYS: &[&str] = &["bundle", "checkpoint", "out"];

/// Fully resolved run configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    pub attributes: AttributeKind,
    pub backbone: Backbone,
    pub hidden_dim: usize,
    /// `None` follows the attribute width of the bundle.
    pub z_dim: Option<usize>,
    pub leaky_slope: f64,
    pub ladder_layers: Vec<LadderLayer>,
    pub ladder_noise: LadderNoise,
    pub use_feedback: bool,
    pub output_activation: OutputActivation,
    pub training: TrainingConfig,
    pub inference: InferenceConfig,
    pub faithfulness: FaithfulnessConfig,
    pub bundle: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    canonical: String,
}

impl RunConfig {
    /// Sorted `key = value` lines of every non-path setting after defaulting.
    pub fn canonical(&self) -> &str {
        &self.canonical
    }

    /// Hex SHA-256 of [`RunConfig::canonical`].
    pub fn config_hash(&self) -> String {
        Sha256::digest(self.canonical.as_bytes()).iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn model_config(&self, bundle: &DatasetBundle) -> Result<ModelConfig> {
        let mut cfg = match (self.backbone, bundle.image_shape) {
            (Backbone::Mlp, _) => ModelConfig::mlp(bundle.feature_dim(), bundle.attr_dim()),
            (Backbone::Ladder, Some(shape)) => ModelConfig::ladder(shape, bundle.attr_dim(), self.ladder_layers.clone()),
            (Backbone::Ladder, None) => {
                return Err(GcmError::Config(vec!["backbone: ladder needs a bundle with an image shape".into()]))
            }
        };
        cfg.hidden_dim = self.hidden_dim;
        cfg.z_dim = self.z_dim.unwrap_or(bundle.attr_dim());
        cfg.leaky_slope = self.leaky_slope;
        cfg.ladder_noise = self.ladder_noise;
        cfg.use_feedback = self.use_feedback;
        cfg.output_activation = self.output_activation;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses configuration text, rejecting unknown keys and reporting every
/// violated constraint by key name.
pub fn validate_config(text: &str) -> Result<RunConfig> {
    resolve(parse_pairs(text)?)
}

fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    let mut errs = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            errs.push(format!("line {}: expected key = value", n + 1));
            continue;
        };
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.iter().any(|(name, _)| *name == k) {
            errs.push(format!("{k}: unknown key"));
        } else if map.insert(k.to_string(), v.to_string()).is_some() {
            errs.push(format!("{k}: given more than once"));
        }
    }
    if errs.is_empty() {
        Ok(map)
    } else {
        Err(GcmError::Config(errs))
    }
}

/// Typed access to the raw map that collects errors instead of stopping.
struct Fields {
    raw: BTreeMap<String, String>,
    errs: Vec<String>,
    canon: BTreeMap<&'static str, String>,
}

impl Fields {
    fn get<T>(&mut self, key: &'static str, default: T, parse: impl Fn(&str) -> Option<T>, show: impl Fn(&T) -> String) -> T {
        let v = match self.raw.get(key) {
            None => default,
            Some(s) => match parse(s) {
                Some(v) => v,
                None => {
                    self.errs.push(format!("{key}: cannot parse `{s}`"));
                    default
                }
            },
        };
        self.canon.insert(key, show(&v));
        v
    }

    fn num<T: std::str::FromStr + std::fmt::Debug>(&mut self, key: &'static str, default: T) -> T {
        self.get(key, default, |s| s.parse().ok(), |v| format!("{v:?}"))
    }

    fn flag(&mut self, key: &'static str, default: bool) -> bool {
        self.num(key, default)
    }

    fn choice<T: Copy + PartialEq>(&mut self, key: &'static str, default: T, options: &[(&'static str, T)]) -> T {
        self.get(
            key,
            default,
            |s| options.iter().find(|(n, _)| *n == s).map(|(_, v)| *v),
            |v| options.iter().find(|(_, o)| o == v).map(|(n, _)| n.to_string()).unwrap_or_default(),
        )
    }

    fn auto_or<T: std::str::FromStr + std::fmt::Debug + Copy>(&mut self, key: &'static str) -> Option<T> {
        self.get(
            key,
            None,
            |s| if s == "auto" { Some(None) } else { s.parse().ok().map(Some) },
            |v| v.map(|n| format!("{n:?}")).unwrap_or_else(|| "auto".into()),
        )
    }

    fn path(&mut self, key: &str) -> Option<PathBuf> {
        self.raw.get(key).filter(|s| !s.is_empty()).map(PathBuf::from)
    }
}

fn parse_ladder(s: &str) -> Option<Vec<LadderLayer>> {
    if s.is_empty() {
        return Some(Vec::new());
    }
    s.split(',')
        .map(|part| {
            let v: Vec<usize> = part.trim().split(':').map(|p| p.parse().ok()).collect::<Option<_>>()?;
            match v[..] {
                [channels, kernel, stride] => Some(LadderLayer { channels, kernel, stride }),
                _ => None,
            }
        })
        .collect()
}

fn show_ladder(layers: &[LadderLayer]) -> String {
    layers.iter().map(|l| format!("{}:{}:{}", l.channels, l.kernel, l.stride)).collect::<Vec<_>>().join(",")
}

fn resolve(raw: BTreeMap<String, String>) -> Result<RunConfig> {
    let mut f = Fields { raw, errs: Vec::new(), canon: BTreeMap::new() };
    let mode = f.choice("mode", Mode::Zsl, &[("zsl", Mode::Zsl), ("osr", Mode::Osr)]);
    let osr = mode == Mode::Osr;
    let seed = f.num("seed", 0u64);
    let attr_default = if osr { AttributeKind::OneHot } else { AttributeKind::Dense };
    let attributes = f.choice("attributes", attr_default, &[("dense", AttributeKind::Dense), ("one_hot", AttributeKind::OneHot)]);
    let backbone = f.choice("backbone", Backbone::Mlp, &[("mlp", Backbone::Mlp), ("ladder", Backbone::Ladder)]);
    let hidden_dim = f.num("hidden_dim", 64usize);
    let z_dim = f.auto_or::<usize>("z_dim");
    let leaky_slope = f.num("leaky_slope", 0.2f64);
    let ladder_layers = f.get("ladder_layers", Vec::new(), parse_ladder, |v| show_ladder(v));
    let ladder_noise = f.choice("ladder_noise", LadderNoise::Variance, &[("variance", LadderNoise::Variance), ("stddev", LadderNoise::Stddev)]);
    let use_feedback = f.flag("use_feedback", false);
    let output_activation =
        f.choice("output_activation", OutputActivation::Identity, &[("identity", OutputActivation::Identity), ("sigmoid", OutputActivation::Sigmoid)]);

    let d = TrainingConfig::default();
    let training = TrainingConfig {
        beta: f.num("beta", d.beta),
        nu: f.num("nu", d.nu),
        rho: f.num("rho", if osr { 0.0 } else { 1.0 }),
        lambda_gp: f.num("lambda_gp", d.lambda_gp),
        learning_rate: f.num("learning_rate", d.learning_rate),
        epochs: f.num("epochs", d.epochs),
        batch_size: f.num("batch_size", d.batch_size),
        anneal_epochs: f.num("anneal_epochs", d.anneal_epochs),
        negatives_per_anchor: f.get(
            "negatives_per_anchor",
            None,
            |s| match s {
                "auto" => Some(None),
                "all" => Some(Some(Negatives::All)),
                n => n.parse().ok().map(|n| Some(Negatives::Count(n))),
            },
            |v| match v {
                None => "auto".into(),
                Some(Negatives::All) => "all".into(),
                Some(Negatives::Count(n)) => n.to_string(),
            },
        ),
        critic_steps: f.num("critic_steps", d.critic_steps),
        seed,
        ly_grad_to_encoder: f.flag("ly_grad_to_encoder", d.ly_grad_to_encoder),
        regressor_loss: f.choice(
            "regressor_loss",
            if osr { RegressorLoss::CrossEntropy } else { RegressorLoss::SquaredError },
            &[("squared_error", RegressorLoss::SquaredError), ("cross_entropy", RegressorLoss::CrossEntropy)],
        ),
    };

    let di = InferenceConfig::default();
    let k = f.auto_or::<usize>("k");
    let omega_cal = f.num("omega_cal", di.omega_cal);
    let omega_min = f.num("omega_min", -10.0f64);
    let omega_max = f.num("omega_max", 10.0f64);
    let omega_step = f.num("omega_step", 0.5f64);
    let tau = f.num("tau", di.tau);
    let tune_tau = f.flag("tune_tau", di.tune_tau);
    let sample = f.choice("z_mode", false, &[("mean", false), ("sample", true)]);
    let z_samples = f.num("z_samples", 1usize);
    let dc = ClassifierConfig::default();
    let classifier = ClassifierConfig {
        epochs: f.num("classifier_epochs", dc.epochs),
        learning_rate: f.num("classifier_learning_rate", dc.learning_rate),
        batch_size: f.num("classifier_batch_size", dc.batch_size),
        seed,
    };
    let df = FaithfulnessConfig::default();
    let faithfulness = FaithfulnessConfig {
        max_samples: f.num("faith_samples", df.max_samples),
        grid_size: f.num("manifold_grid", df.grid_size),
        seed,
    };

    let mut errs = std::mem::take(&mut f.errs);
    if osr && attributes == AttributeKind::Dense {
        errs.push("attributes: mode = osr requires one_hot attributes".into());
    }
    if !osr && attributes == AttributeKind::OneHot {
        errs.push("attributes: mode = zsl requires dense attributes".into());
    }
    if hidden_dim == 0 {
        errs.push("hidden_dim must be positive".into());
    }
    if z_dim == Some(0) {
        errs.push("z_dim must be positive".into());
    }
    if !(leaky_slope > 0.0 && leaky_slope < 1.0) {
        errs.push(format!("leaky_slope must lie in (0, 1), got {leaky_slope}"));
    }
    if backbone == Backbone::Ladder && ladder_layers.is_empty() {
        errs.push("ladder_layers must be non-empty for the ladder backbone".into());
    }
    if backbone == Backbone::Ladder && use_feedback {
        errs.push("use_feedback is only supported by the mlp backbone".into());
    }
    if let Err(GcmError::Config(e)) = training.validate() {
        errs.extend(e);
    }
    if k == Some(0) {
        errs.push("k must be at least 1".into());
    }
    for (key, v) in [("omega_cal", omega_cal), ("omega_min", omega_min), ("omega_max", omega_max), ("tau", tau)] {
        if !v.is_finite() {
            errs.push(format!("{key} must be finite"));
        }
    }
    if !(omega_step > 0.0 && omega_step.is_finite()) {
        errs.push("omega_step must be positive".into());
    } else if omega_max < omega_min {
        errs.push("omega_max must not be below omega_min".into());
    }
    if tau < 0.0 {
        errs.push("tau must be non-negative".into());
    }
    if z_samples == 0 {
        errs.push("z_samples must be at least 1".into());
    }
    for (key, v) in [
        ("classifier_epochs", classifier.epochs),
        ("classifier_batch_size", classifier.batch_size),
        ("faith_samples", faithfulness.max_samples),
        ("manifold_grid", faithfulness.grid_size),
    ] {
        if v == 0 {
            errs.push(format!("{key} must be at least 1"));
        }
    }
    if !(classifier.learning_rate > 0.0 && classifier.learning_rate.is_finite()) {
        errs.push("classifier_learning_rate must be positive".into());
    }
    if !errs.is_empty() {
        return Err(GcmError::Config(errs));
    }

    let steps = ((omega_max - omega_min) / omega_step + 1e-9).floor() as usize;
    let omega_grid = (0..=steps).map(|i| omega_min + omega_step * i as f64).collect();
    let z_mode = if sample { ZMode::Sample { n: z_samples, seed } } else { ZMode::PosteriorMean };
    let inference = InferenceConfig { k, omega_cal, omega_grid, tau, tune_tau, classifier, z_mode };
    let (bundle, checkpoint, out) = (f.path("bundle"), f.path("checkpoint"), f.path("out"));
    let canonical = f
        .canon
        .iter()
        .filter(|(k, _)| !PATH_KEYS.contains(k))
        .fold(String::new(), |mut s, (k, v)| {
            let _ = writeln!(s, "{k} = {v}");
            s
        });
    Ok(RunConfig {
        mode,
        seed,
        attributes,
        backbone,
        hidden_dim,
        z_dim,
        leaky_slope,
        ladder_layers,
        ladder_noise,
        use_feedback,
        output_activation,
        training,
        inference,
        faithfulness,
        bundle,
        checkpoint,
        out,
        canonical,
    })
}

fn config_args() -> Vec<Arg> {
    let mut args = vec![Arg::new("config").long("config").value_name("FILE").help("key = value configuration file")];
    args.extend(KEYS.iter().map(|(k, help)| Arg::new(*k).long(*k).value_name("VALUE").help(*help).allow_negative_numbers(true)));
    args
}

fn command() -> Command {
    let synth = Command::new("synth")
        .about("Sample a synthetic world into a dataset bundle and oracle sidecar")
        .arg(Arg::new("out").long("out").required(true).value_name("FILE").help("dataset bundle path"))
        .arg(Arg::new("oracle").long("oracle").value_name("FILE").help("oracle sidecar path [default: <out>.oracle]"))
        .args([
            ("seed", "root seed"),
            ("num_seen", "seen classes"),
            ("num_unseen", "unseen classes"),
            ("attr_dim", "class-attribute width"),
            ("z_dim", "sample-attribute width"),
            ("feature_dim", "feature width"),
            ("samples_per_class", "samples per class"),
            ("train_fraction", "share of each seen class used for training"),
            ("nonlinearity", "linear or tanh"),
        ]
        .map(|(k, h)| Arg::new(k).long(k).value_name("VALUE").help(h).allow_negative_numbers(true)));
    let with_config = |name: &'static str, about: &'static str| Command::new(name).about(about).args(config_args());
    Command::new("gcmcf")
        .about("Counterfactual-faithful generative models for zero-shot and open-set recognition")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(synth)
        .subcommand(with_config("train", "Train a model on a bundle and write a checkpoint plus training log"))
        .subcommand(with_config("eval-zsl", "Zero-shot evaluation: report JSON, predictions and SUC CSV"))
        .subcommand(with_config("eval-osr", "Open-set evaluation: report JSON, predictions and openness CSV"))
        .subcommand(
            with_config("counterfact", "Counterfactual distances of samples towards target classes")
                .arg(Arg::new("samples").long("samples").value_name("IDS").help("comma list of bundle indices [default: test split]"))
                .arg(Arg::new("targets").long("targets").value_name("CLASSES").help("comma list of class ids [default: unseen classes]"))
                .arg(Arg::new("dump").long("dump").value_name("FILE").help("also write the counterfactual features")),
        )
        .subcommand(with_config("sweep-suc", "Seen-unseen accuracy curve over the calibration grid"))
        .subcommand(with_config("faithfulness", "Manifold distances and disentanglement residual on a synthetic world").arg(
            Arg::new("oracle").long("oracle").value_name("FILE").help("oracle sidecar [default: <bundle>.oracle]"),
        ))
        .disable_help_subcommand(true)
        .arg(Arg::new("quiet").long("quiet").action(ArgAction::SetTrue).global(true).help("suppress progress output"))
}

/// Runs one subcommand and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let matches = match command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(&matches) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// 1 for configuration and input validation errors, 2 for everything else.
pub fn exit_code(e: &GcmError) -> i32 {
    match e {
        GcmError::Config(_) | GcmError::Validation(_) | GcmError::InvalidArgument(_) => 1,
        _ => 2,
    }
}

fn dispatch(m: &ArgMatches) -> Result<()> {
    let (name, sub) = m.subcommand().ok_or_else(|| GcmError::InvalidArgument("missing subcommand".into()))?;
    let quiet = sub.get_flag("quiet");
    if name == "synth" {
        return cmd_synth(sub, quiet);
    }
    let cfg = load_config(sub, forced_mode(name))?;
    match name {
        "train" => cmd_train(&cfg, quiet),
        "eval-zsl" => cmd_eval_zsl(&cfg, quiet),
        "eval-osr" => cmd_eval_osr(&cfg, quiet),
        "counterfact" => cmd_counterfact(&cfg, sub),
        "sweep-suc" => cmd_sweep_suc(&cfg, quiet),
        "faithfulness" => cmd_faithfulness(&cfg, sub, quiet),
        other => Err(GcmError::InvalidArgument(format!("unknown subcommand {other}"))),
    }
}

fn forced_mode(sub: &str) -> Option<Mode> {
    match sub {
        "eval-zsl" | "sweep-suc" | "faithfulness" => Some(Mode::Zsl),
        "eval-osr" => Some(Mode::Osr),
        _ => None,
    }
}

fn load_config(sub: &ArgMatches, forced: Option<Mode>) -> Result<RunConfig> {
    let mut map = match sub.get_one::<String>("config") {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| GcmError::InvalidArgument(format!("cannot read config {path}: {e}")))?;
            parse_pairs(&text)?
        }
        None => BTreeMap::new(),
    };
    for (k, _) in KEYS {
        if let Some(v) = sub.get_one::<String>(k) {
            map.insert(k.to_string(), v.clone());
        }
    }
    if let Some(mode) = forced {
        match map.get("mode") {
            Some(m) if m != mode.name() => {
                return Err(GcmError::Config(vec![format!("mode: this subcommand needs mode = {}, got {m}", mode.name())]));
            }
            Some(_) => {}
            None => {
                map.insert("mode".into(), mode.name().into());
            }
        }
    }
    resolve(map)
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| GcmError::Config(vec![format!("{key}: a path is required")]))
}

/// Loads and validates the bundle, converting it to one-hot seen attributes in
/// open-set mode.
fn load_bundle_for(cfg: &RunConfig) -> Result<DatasetBundle> {
    let bundle = DatasetBundle::load(required(&cfg.bundle, "bundle")?)?;
    bundle.validate()?;
    Ok(match cfg.mode {
        Mode::Osr if !bundle.has_one_hot_seen_attributes() => bundle.to_open_set(),
        _ => bundle,
    })
}

fn load_model(cfg: &RunConfig, bundle: &DatasetBundle) -> Result<GcmModel> {
    let model = GcmModel::load(required(&cfg.checkpoint, "checkpoint")?)?;
    if model.config.feature_dim != bundle.feature_dim() || model.config.attr_dim != bundle.attr_dim() {
        return Err(GcmError::Validation(format!(
            "checkpoint expects features {} and attributes {}, bundle has {} and {}",
            model.config.feature_dim,
            model.config.attr_dim,
            bundle.feature_dim(),
            bundle.attr_dim()
        )));
    }
    Ok(model)
}

fn synth_value<T: std::str::FromStr>(m: &ArgMatches, key: &str, default: T) -> Result<T> {
    match m.get_one::<String>(key) {
        None => Ok(default),
        Some(s) => s.parse().map_err(|_| GcmError::Config(vec![format!("{key}: cannot parse `{s}`")])),
    }
}

fn cmd_synth(m: &ArgMatches, quiet: bool) -> Result<()> {
    let d = SynthWorldConfig::default();
    let nonlinearity = match m.get_one::<String>("nonlinearity").map(String::as_str) {
        None | Some("linear") => Nonlinearity::Linear,
        Some("tanh") => Nonlinearity::Tanh,
        Some(other) => return Err(GcmError::Config(vec![format!("nonlinearity: expected linear or tanh, got {other}")])),
    };
    let cfg = SynthWorldConfig {
        num_seen: synth_value(m, "num_seen", d.num_seen)?,
        num_unseen: synth_value(m, "num_unseen", d.num_unseen)?,
        attr_dim: synth_value(m, "attr_dim", d.attr_dim)?,
        z_dim: synth_value(m, "z_dim", d.z_dim)?,
        feature_dim: synth_value(m, "feature_dim", d.feature_dim)?,
        samples_per_class: synth_value(m, "samples_per_class", d.samples_per_class)?,
        nonlinearity,
        seed: synth_value(m, "seed", d.seed)?,
        train_fraction: synth_value(m, "train_fraction", d.train_fraction)?,
    };
    let out = PathBuf::from(m.get_one::<String>("out").expect("required by clap"));
    let oracle = m.get_one::<String>("oracle").map(PathBuf::from).unwrap_or_else(|| sidecar_path(&out));
    let (bundle, world) = generate_synthetic_world(&cfg)?;
    bundle.save(&out)?;
    world.save(&oracle)?;
    if !quiet {
        eprintln!("wrote {} ({} samples) and {}", out.display(), bundle.num_samples(), oracle.display());
    }
    Ok(())
}

/// `<bundle>.oracle`
pub fn sidecar_path(bundle: &Path) -> PathBuf {
    let mut s = bundle.as_os_str().to_owned();
    s.push(".oracle");
    PathBuf::from(s)
}

/// `<checkpoint>.log.csv`
pub fn training_log_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".log.csv");
    PathBuf::from(s)
}

fn cmd_train(cfg: &RunConfig, quiet: bool) -> Result<()> {
    let out = required(&cfg.out, "out")?;
    let bundle = load_bundle_for(cfg)?;
    let mut model = GcmModel::new(cfg.model_config(&bundle)?, cfg.seed)?;
    let data = TrainingSet::from_bundle(&bundle)?;
    let log = fit_with(&mut model, &data, &cfg.training, |e| {
        if !quiet {
            eprintln!("epoch {:>4}  loss_z {:.4}  loss_y {:.4}  loss_f {:.4}", e.epoch, e.losses.loss_z, e.losses.loss_y, e.losses.loss_f);
        }
    })?;
    model.save(out)?;
    write_atomic(&training_log_path(out), log.to_csv().as_bytes())
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn side_name(s: Side) -> &'static str {
    match s {
        Side::Seen => "seen",
        Side::Unseen => "unseen",
    }
}

fn cmd_eval_zsl(cfg: &RunConfig, quiet: bool) -> Result<()> {
    let bundle = load_bundle_for(cfg)?;
    let model = load_model(cfg, &bundle)?;
    let (report, run) = inference::evaluate_zsl(&model, &bundle, &cfg.inference, cfg.seed, &cfg.config_hash())?;
    let mut csv = String::from("sample_id,binary_label,final_label,score\n");
    for (p, pred) in run.predictions.iter().enumerate() {
        let _ = writeln!(csv, "{},{},{},{}", run.test_idx[p], side_name(pred.binary.label), pred.class, pred.binary.score);
    }
    let dir = out_dir(cfg)?;
    write_atomic(&dir.join("predictions.csv"), csv.as_bytes())?;
    write_atomic(&dir.join("suc_curve.csv"), metrics::suc_curve_csv(&report.suc_curve).as_bytes())?;
    write_atomic(&dir.join("report.json"), report.to_json()?.as_bytes())?;
    if !quiet {
        let fields = [("U", report.u), ("S", report.s), ("H", report.h), ("CVb", report.cvb), ("AUSUC", report.ausuc)];
        println!("{}", summary_line(&fields));
    }
    Ok(())
}

fn cmd_eval_osr(cfg: &RunConfig, quiet: bool) -> Result<()> {
    let bundle = load_bundle_for(cfg)?;
    let model = load_model(cfg, &bundle)?;
    let (report, run) = inference::evaluate_osr(&model, &bundle, &cfg.inference, cfg.seed, &cfg.config_hash())?;
    let mut csv = String::from("sample_id,binary_label,final_label,score\n");
    for &p in &run.eval_positions {
        let pred = &run.predictions[p];
        let label = pred.class.map(|c| c.to_string()).unwrap_or_else(|| "unknown".into());
        let _ = writeln!(csv, "{},{},{},{}", run.test_idx[p], side_name(pred.binary.label), label, pred.binary.score);
    }
    let dir = out_dir(cfg)?;
    write_atomic(&dir.join("predictions.csv"), csv.as_bytes())?;
    write_atomic(&dir.join("openness.csv"), metrics::openness_csv(&report.openness_series).as_bytes())?;
    write_atomic(&dir.join("report.json"), report.to_json()?.as_bytes())?;
    if !quiet {
        println!("{}", summary_line(&[("F1", report.f1_macro), ("openness", report.openness), ("tau", report.tau)]));
    }
    Ok(())
}

fn id_list<T: std::str::FromStr>(m: &ArgMatches, key: &str) -> Result<Option<Vec<T>>> {
    m.get_one::<String>(key)
        .map(|s| {
            s.split(',')
                .map(|p| p.trim().parse().map_err(|_| GcmError::InvalidArgument(format!("{key}: cannot parse `{p}`"))))
                .collect()
        })
        .transpose()
}

fn cmd_counterfact(cfg: &RunConfig, m: &ArgMatches) -> Result<()> {
    let out = required(&cfg.out, "out")?;
    let bundle = load_bundle_for(cfg)?;
    let model = load_model(cfg, &bundle)?;
    let samples: Vec<usize> = id_list(m, "samples")?.unwrap_or_else(|| bundle.split.test_idx.clone());
    let targets: Vec<u32> = id_list(m, "targets")?.unwrap_or_else(|| bundle.split.unseen_class_ids.clone());
    if let Some(&bad) = samples.iter().find(|&&i| i >= bundle.num_samples()) {
        return Err(GcmError::InvalidArgument(format!("samples: index {bad} out of range")));
    }
    if let Some(&bad) = targets.iter().find(|&&c| c as usize >= bundle.num_classes()) {
        return Err(GcmError::InvalidArgument(format!("targets: unknown class {bad}")));
    }
    let target_rows: Vec<Vec<f64>> = targets.iter().map(|&c| bundle.attribute(c).to_vec()).collect();
    let mut csv = String::from("sample_id,target_class,distance\n");
    let mut dumped = Vec::new();
    for &i in &samples {
        let req = CounterfactualRequest { x: bundle.features.row_slice(i).to_vec(), targets: target_rows.clone(), z_mode: cfg.inference.z_mode };
        let set = counterfactual_set(&model, &req)?;
        for (t, d) in set.target_distances(targets.len()).into_iter().enumerate() {
            let _ = writeln!(csv, "{},{},{}", i, targets[t], d);
        }
        dumped.extend(set.entries.into_iter().map(|e| (i, targets[e.target], e.x_tilde)));
    }
    write_atomic(out, csv.as_bytes())?;
    if let Some(path) = m.get_one::<String>("dump") {
        let meta = serde_json::json!({
            "kind": "counterfactuals",
            "sample_ids": dumped.iter().map(|d| d.0).collect::<Vec<_>>(),
            "target_classes": dumped.iter().map(|d| d.1).collect::<Vec<_>>(),
            "seed": cfg.seed,
            "config_hash": cfg.config_hash(),
        });
        let rows: Vec<Vec<f64>> = dumped.into_iter().map(|d| d.2).collect();
        let mut c = TensorContainer::new(meta);
        c.push("x_tilde", Mat::from_rows(&rows)?);
        c.save(Path::new(path))?;
    }
    Ok(())
}

fn cmd_sweep_suc(cfg: &RunConfig, quiet: bool) -> Result<()> {
    let bundle = load_bundle_for(cfg)?;
    let model = load_model(cfg, &bundle)?;
    let run = inference::run_zsl(&model, &bundle, &cfg.inference)?;
    let curve = inference::suc_sweep(&run.logits, &run.test_labels, &run.classifier.vocab, run.k, &cfg.inference.omega_grid)?;
    let area = metrics::ausuc(&curve)?;
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("suc_curve.csv"));
    write_atomic(&out, metrics::suc_curve_csv(&curve).as_bytes())?;
    if !quiet {
        println!("AUSUC {area}");
    }
    Ok(())
}

fn cmd_faithfulness(cfg: &RunConfig, m: &ArgMatches, quiet: bool) -> Result<()> {
    let bundle_path = required(&cfg.bundle, "bundle")?;
    let bundle = load_bundle_for(cfg)?;
    let model = load_model(cfg, &bundle)?;
    let oracle = m.get_one::<String>("oracle").map(PathBuf::from).unwrap_or_else(|| sidecar_path(bundle_path));
    let world = OracleWorld::load(&oracle)?;
    let mut report = faithfulness_report(&model, &world, &bundle, &cfg.faithfulness)?;
    report.config_hash = cfg.config_hash();
    let json = serde_json::to_string_pretty(&report)? + "\n";
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("faithfulness.json"));
    write_atomic(&out, json.as_bytes())?;
    if !quiet {
        print!("{json}");
    }
    Ok(())
}

/// `name value` pairs for progress output; missing values print as `-`.
fn summary_line(fields: &[(&str, Option<f64>)]) -> String {
    let cell = |(k, v): &(&str, Option<f64>)| match v {
        Some(v) => format!("{k} {v:.4}"),
        None => format!("{k} -"),
    };
    fields.iter().map(cell).collect::<Vec<_>>().join("  ")
}
