//! Evaluation quantities: per-class accuracy, harmonic mean, binary balance
//! (CVb), seen-unseen curves and their area, open-set macro-F1 and openness.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize, Serializer};

use crate::error::{GcmError, Result};

/// Mean over `classes` of the within-class accuracy.
pub fn per_class_top1(preds: &[u32], labels: &[u32], classes: &[u32]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(GcmError::Shape("predictions and labels differ in length".into()));
    }
    if classes.is_empty() {
        return Err(GcmError::InvalidArgument("no classes to average over".into()));
    }
    let mut total = 0.0;
    for &c in classes {
        let (mut n, mut hit) = (0usize, 0usize);
        for (p, l) in preds.iter().zip(labels) {
            if *l == c {
                n += 1;
                hit += usize::from(p == l);
            }
        }
        if n == 0 {
            return Err(GcmError::InvalidArgument(format!("class {c} has no samples")));
        }
        total += hit as f64 / n as f64;
    }
    Ok(total / classes.len() as f64)
}

/// `2 S U / (S + U)`, or 0 when both are 0.
pub fn harmonic_mean(u: f64, s: f64) -> Result<f64> {
    if u < 0.0 || s < 0.0 || u.is_nan() || s.is_nan() {
        return Err(GcmError::InvalidArgument(format!("harmonic mean of negative values ({u}, {s})")));
    }
    Ok(if u + s > 0.0 { 2.0 * s * u / (s + u) } else { 0.0 })
}

/// Coefficient of variation of the seen and unseen binary accuracies.
pub fn cvb(s_b: f64, u_b: f64) -> Result<f64> {
    let mu = 0.5 * (s_b + u_b);
    if !(mu > 0.0) {
        return Err(GcmError::InvalidArgument("binary accuracies average to zero".into()));
    }
    Ok((0.5 * (s_b - mu).powi(2) + 0.5 * (u_b - mu).powi(2)).sqrt() / mu)
}

fn serialize_omega<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if *v > 0.0 {
        s.serialize_str("+inf")
    } else {
        s.serialize_str("-inf")
    }
}

fn deserialize_omega<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }
    match Raw::deserialize(d)? {
        Raw::Num(v) => Ok(v),
        Raw::Text(t) if t == "+inf" => Ok(f64::INFINITY),
        Raw::Text(t) if t == "-inf" => Ok(f64::NEG_INFINITY),
        Raw::Text(t) => Err(serde::de::Error::custom(format!("bad omega {t}"))),
    }
}

/// One calibration setting and the accuracies it produced.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SucPoint {
    #[serde(serialize_with = "serialize_omega", deserialize_with = "deserialize_omega")]
    pub omega: f64,
    pub u: f64,
    pub s: f64,
}

/// Area under the seen-unseen curve: trapezoids over points sorted by `U`.
pub fn ausuc(curve: &[SucPoint]) -> Result<f64> {
    if curve.len() < 2 {
        return Err(GcmError::InvalidArgument("AUSUC needs at least two points".into()));
    }
    let mut pts: Vec<(f64, f64)> = curve.iter().map(|p| (p.u, p.s)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    Ok(pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) * 0.5).sum())
}

/// Macro-F1 over the seen classes plus the "unknown" category (`None`).
pub fn macro_f1_unknown(preds: &[Option<u32>], labels: &[Option<u32>], seen: &[u32]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(GcmError::Shape("predictions and labels differ in length".into()));
    }
    let cats: Vec<Option<u32>> = seen.iter().copied().collect::<BTreeSet<_>>().into_iter().map(Some).chain([None]).collect();
    let mut total = 0.0;
    for c in &cats {
        let (mut tp, mut fp, mut fnn) = (0usize, 0usize, 0usize);
        for (p, l) in preds.iter().zip(labels) {
            match (p == c, l == c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fnn += 1,
                _ => {}
            }
        }
        let denom = 2 * tp + fp + fnn;
        if denom > 0 {
            total += 2.0 * tp as f64 / denom as f64;
        }
    }
    Ok(total / cats.len() as f64)
}

/// Maps labels to the open-set label space: seen ids stay, others become `None`.
pub fn open_set_labels(labels: &[u32], seen: &[u32]) -> Vec<Option<u32>> {
    labels.iter().map(|l| seen.contains(l).then_some(*l)).collect()
}

/// `1 - sqrt(2N / (N + M))` for `N` training classes and `M` test classes
/// (the test classes include the seen ones).
pub fn openness(n: usize, m: usize) -> Result<f64> {
    if n == 0 {
        return Err(GcmError::InvalidArgument("openness needs at least one seen class".into()));
    }
    Ok(1.0 - (2.0 * n as f64 / (n + m) as f64).sqrt())
}

/// Percentage rounded to one decimal.
pub fn percent(v: f64) -> f64 {
    (v * 1000.0).round() / 10.0
}

/// One point of the openness sweep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpennessPoint {
    pub num_unseen: usize,
    pub openness: f64,
    pub f1_macro: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    /// Unseen accuracy, percent.
    #[serde(rename = "U", skip_serializing_if = "Option::is_none")]
    pub u: Option<f64>,
    /// Seen accuracy, percent.
    #[serde(rename = "S", skip_serializing_if = "Option::is_none")]
    pub s: Option<f64>,
    /// Harmonic mean, percent.
    #[serde(rename = "H", skip_serializing_if = "Option::is_none")]
    pub h: Option<f64>,
    #[serde(rename = "S_b", skip_serializing_if = "Option::is_none")]
    pub s_b: Option<f64>,
    #[serde(rename = "U_b", skip_serializing_if = "Option::is_none")]
    pub u_b: Option<f64>,
    #[serde(rename = "CVb", skip_serializing_if = "Option::is_none")]
    pub cvb: Option<f64>,
    #[serde(rename = "AUSUC", skip_serializing_if = "Option::is_none")]
    pub ausuc: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub suc_curve: Vec<SucPoint>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1_macro: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub openness: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub openness_series: Vec<OpennessPoint>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub omega_cal: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    /// Which stage-2 classifier produced the final labels.
    pub stage2: String,
    pub seed: u64,
    pub config_hash: String,
}

impl EvalReport {
    pub fn new(mode: &str, stage2: &str, seed: u64, config_hash: &str) -> Self {
        Self {
            mode: mode.into(),
            u: None,
            s: None,
            h: None,
            s_b: None,
            u_b: None,
            cvb: None,
            ausuc: None,
            suc_curve: Vec::new(),
            f1_macro: None,
            openness: None,
            openness_series: Vec::new(),
            tau: None,
            omega_cal: None,
            k: None,
            stage2: stage2.into(),
            seed,
            config_hash: config_hash.into(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

pub fn suc_curve_csv(curve: &[SucPoint]) -> String {
    let mut s = String::from("omega,U,S\n");
    for p in curve {
        let _ = writeln!(s, "{},{},{}", p.omega, p.u, p.s);
    }
    s
}

pub fn openness_csv(series: &[OpennessPoint]) -> String {
    let mut s = String::from("num_unseen,openness,f1_macro\n");
    for p in series {
        let _ = writeln!(s, "{},{},{}", p.num_unseen, p.openness, p.f1_macro);
    }
    s
}
