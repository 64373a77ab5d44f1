//! Dataset bundles, seen/unseen splits and the synthetic world generator.
//!
//! # Bundle file format (`GCMCFDS1`)
//!
//! ```text
//! magic       8 bytes  "GCMCFDS1"
//! header_len  u32 LE
//! header      header_len bytes of UTF-8 JSON (see BundleHeader)
//! features    num_samples * feature_dim f32 LE, row-major
//! attributes  num_classes * attr_dim    f32 LE, row-major
//! labels      num_samples u32 LE
//! ```

mod synth;

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use synth::{generate_synthetic_world, Nonlinearity, SynthWorldConfig};

use crate::checkpoint::{write_atomic, Reader};
use crate::error::{GcmError, Result};
use crate::model::ImageShape;
use crate::rng;
use crate::tensor::Mat;

pub const BUNDLE_MAGIC: &[u8; 8] = b"GCMCFDS1";
pub const BUNDLE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seen_class_ids: Vec<u32>,
    pub unseen_class_ids: Vec<u32>,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub seed: u64,
}

impl SplitSpec {
    pub fn is_seen(&self, class: u32) -> bool {
        self.seen_class_ids.contains(&class)
    }

    pub fn is_unseen(&self, class: u32) -> bool {
        self.unseen_class_ids.contains(&class)
    }
}

/// Per-seen-class stratified split; every unseen sample goes to the test side.
pub fn make_split(
    labels: &[u32],
    seen_ids: &[u32],
    unseen_ids: &[u32],
    train_fraction: f64,
    seed: u64,
) -> Result<SplitSpec> {
    let seen: BTreeSet<u32> = seen_ids.iter().copied().collect();
    let unseen: BTreeSet<u32> = unseen_ids.iter().copied().collect();
    if let Some(c) = seen.intersection(&unseen).next() {
        return Err(GcmError::InvalidArgument(format!("class {c} is both seen and unseen")));
    }
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(GcmError::InvalidArgument(format!("train_fraction {train_fraction} outside [0, 1]")));
    }
    if let Some(l) = labels.iter().find(|l| !seen.contains(l) && !unseen.contains(l)) {
        return Err(GcmError::InvalidArgument(format!("label {l} is neither seen nor unseen")));
    }
    let mut rng = rng::rng_for(seed, "split");
    let mut train = Vec::new();
    let mut test = Vec::new();
    for &c in &seen {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if idx.is_empty() {
            return Err(GcmError::InvalidArgument(format!("seen class {c} has no samples")));
        }
        idx.shuffle(&mut rng);
        let n_train = (train_fraction * idx.len() as f64).round() as usize;
        train.extend_from_slice(&idx[..n_train]);
        test.extend_from_slice(&idx[n_train..]);
    }
    for &c in &unseen {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if idx.is_empty() {
            return Err(GcmError::InvalidArgument(format!("unseen class {c} has no samples")));
        }
        test.extend(idx);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(SplitSpec {
        seen_class_ids: seen.into_iter().collect(),
        unseen_class_ids: unseen.into_iter().collect(),
        train_idx: train,
        test_idx: test,
        seed,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub features: Mat,
    pub labels: Vec<u32>,
    /// One row per class id.
    pub attributes: Mat,
    pub split: SplitSpec,
    pub image_shape: Option<ImageShape>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BundleHeader {
    version: u32,
    num_samples: usize,
    feature_dim: usize,
    attr_dim: usize,
    num_classes: usize,
    split: SplitSpec,
    #[serde(default)]
    image_shape: Option<ImageShape>,
}

impl DatasetBundle {
    pub fn num_samples(&self) -> usize {
        self.features.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn attr_dim(&self) -> usize {
        self.attributes.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.attributes.rows()
    }

    pub fn attribute(&self, class: u32) -> &[f64] {
        self.attributes.row_slice(class as usize)
    }

    /// Attribute rows of the given classes, in order.
    pub fn attribute_table(&self, classes: &[u32]) -> Mat {
        let idx: Vec<usize> = classes.iter().map(|&c| c as usize).collect();
        self.attributes.select_rows(&idx)
    }

    pub fn subset(&self, idx: &[usize]) -> (Mat, Vec<u32>) {
        (self.features.select_rows(idx), idx.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn train_set(&self) -> (Mat, Vec<u32>) {
        self.subset(&self.split.train_idx)
    }

    pub fn test_set(&self) -> (Mat, Vec<u32>) {
        self.subset(&self.split.test_idx)
    }

    /// True when every seen class has a distinct one-hot attribute row.
    pub fn has_one_hot_seen_attributes(&self) -> bool {
        let mut hot = BTreeSet::new();
        for &c in &self.split.seen_class_ids {
            let row = self.attribute(c);
            let ones: Vec<usize> = row.iter().enumerate().filter(|(_, &v)| v == 1.0).map(|(i, _)| i).collect();
            if ones.len() != 1 || row.iter().filter(|&&v| v != 0.0).count() != 1 || !hot.insert(ones[0]) {
                return false;
            }
        }
        true
    }

    /// Replaces the attribute table with one-hot seen-class embeddings, the
    /// open-set convention. Unseen classes get all-zero rows.
    pub fn to_open_set(&self) -> DatasetBundle {
        let k = self.split.seen_class_ids.len();
        let mut attrs = Mat::zeros(self.num_classes(), k);
        for (j, &c) in self.split.seen_class_ids.iter().enumerate() {
            attrs.set(c as usize, j, 1.0);
        }
        DatasetBundle { attributes: attrs, ..self.clone() }
    }

    /// Checks every structural invariant, including the train/unseen leakage guard.
    pub fn validate(&self) -> Result<()> {
        let n = self.num_samples();
        let c = self.num_classes();
        let fail = |m: String| Err(GcmError::Validation(m));
        if self.labels.len() != n {
            return fail(format!("{} labels for {n} samples", self.labels.len()));
        }
        if !self.features.is_finite() {
            return fail("features contain NaN or Inf".into());
        }
        if !self.attributes.is_finite() {
            return fail("attributes contain NaN or Inf".into());
        }
        if let Some(l) = self.labels.iter().find(|&&l| l as usize >= c) {
            return fail(format!("label {l} out of range for {c} classes"));
        }
        if let Some(s) = self.image_shape {
            if s.len() != self.feature_dim() {
                return fail("image_shape does not match feature_dim".into());
            }
        }
        let sp = &self.split;
        for &id in sp.seen_class_ids.iter().chain(&sp.unseen_class_ids) {
            if id as usize >= c {
                return fail(format!("split class {id} has no attribute row"));
            }
        }
        let seen: BTreeSet<u32> = sp.seen_class_ids.iter().copied().collect();
        if let Some(id) = sp.unseen_class_ids.iter().find(|id| seen.contains(id)) {
            return fail(format!("class {id} is both seen and unseen"));
        }
        if let Some(&i) = sp.train_idx.iter().chain(&sp.test_idx).find(|&&i| i >= n) {
            return fail(format!("split index {i} out of range"));
        }
        if let Some(&i) = sp.train_idx.iter().find(|&&i| !seen.contains(&self.labels[i])) {
            return fail(format!(
                "train index {i} carries label {} which is not a seen class (unseen-class leakage)",
                self.labels[i]
            ));
        }
        let train: BTreeSet<usize> = sp.train_idx.iter().copied().collect();
        if let Some(i) = sp.test_idx.iter().find(|i| train.contains(i)) {
            return fail(format!("index {i} is in both train and test"));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = BundleHeader {
            version: BUNDLE_VERSION,
            num_samples: self.num_samples(),
            feature_dim: self.feature_dim(),
            attr_dim: self.attr_dim(),
            num_classes: self.num_classes(),
            split: self.split.clone(),
            image_shape: self.image_shape,
        };
        let head = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(head.len() + 4 * (self.features.len() + self.attributes.len() + self.labels.len()) + 12);
        out.extend_from_slice(BUNDLE_MAGIC);
        out.extend_from_slice(&(head.len() as u32).to_le_bytes());
        out.extend_from_slice(&head);
        for &v in self.features.as_slice().iter().chain(self.attributes.as_slice()) {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for &l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(8)? != BUNDLE_MAGIC {
            return Err(GcmError::Format("bad magic, not a GCMCFDS1 bundle".into()));
        }
        let head_len = r.u32()? as usize;
        let header: BundleHeader = serde_json::from_slice(r.take(head_len)?)
            .map_err(|e| GcmError::Format(format!("bad bundle header: {e}")))?;
        if header.version != BUNDLE_VERSION {
            return Err(GcmError::Format(format!("unsupported bundle version {}", header.version)));
        }
        let (n, d, a) = (header.num_samples, header.feature_dim, header.attr_dim);
        let body = bytes.len() - head_len - 12;
        let fixed = 4 * (n * d + n);
        if a > 0 && body >= fixed && (body - fixed).is_multiple_of(4 * a) && (body - fixed) / (4 * a) != header.num_classes {
            return Err(GcmError::Validation(format!(
                "header declares {} classes but the file holds {} attribute rows",
                header.num_classes,
                (body - fixed) / (4 * a)
            )));
        }
        let features = Mat::from_vec(n, d, r.f32_block(n * d)?)?;
        let attributes = Mat::from_vec(header.num_classes, a, r.f32_block(header.num_classes * a)?)?;
        let labels = r.u32_block(n)?;
        if !r.is_done() {
            return Err(GcmError::Format("trailing bytes after labels".into()));
        }
        let bundle = DatasetBundle { features, labels, attributes, split: header.split, image_shape: header.image_shape };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub fn save_bundle(bundle: &DatasetBundle, path: &Path) -> Result<()> {
    bundle.save(path)
}

pub fn load_bundle(path: &Path) -> Result<DatasetBundle> {
    DatasetBundle::load(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels() -> Vec<u32> {
        (0..5u32).flat_map(|c| std::iter::repeat_n(c, 10)).collect()
    }

    fn tiny_bundle() -> DatasetBundle {
        let labels = labels();
        let split = make_split(&labels, &[0, 1, 2], &[3, 4], 0.6, 1).unwrap();
        DatasetBundle {
            features: Mat::from_fn(50, 3, |i, j| (i * 3 + j) as f64 * 0.125),
            labels,
            attributes: Mat::from_fn(5, 2, |i, j| i as f64 - j as f64),
            split,
            image_shape: None,
        }
    }

    #[test]
    fn split_is_stratified_and_leak_free() {
        let s = make_split(&labels(), &[0, 1, 2], &[3, 4], 0.6, 9).unwrap();
        assert_eq!(s.train_idx.len(), 18);
        assert_eq!(s.test_idx.len(), 32);
        let l = labels();
        assert!(s.train_idx.iter().all(|&i| l[i] < 3));
        assert_eq!(s, make_split(&labels(), &[0, 1, 2], &[3, 4], 0.6, 9).unwrap());
    }

    #[test]
    fn split_degenerate_cases() {
        let l = labels();
        let full = make_split(&l, &[0, 1, 2], &[3, 4], 1.0, 0).unwrap();
        assert!(full.test_idx.iter().all(|&i| l[i] >= 3));
        let sup = make_split(&l, &[0, 1, 2, 3, 4], &[], 0.5, 0).unwrap();
        assert!(sup.unseen_class_ids.is_empty());
        assert_eq!(sup.train_idx.len(), 25);
        assert!(make_split(&l, &[0, 1, 2], &[2, 3, 4], 0.5, 0).is_err());
        assert!(make_split(&l, &[0, 1, 2, 5], &[3, 4], 0.5, 0).is_err());
        assert!(make_split(&l, &[0, 1], &[3, 4], 0.5, 0).is_err());
    }

    #[test]
    fn bundle_round_trip() {
        let b = tiny_bundle();
        let back = DatasetBundle::from_bytes(&b.to_bytes().unwrap()).unwrap();
        assert_eq!(back, b);
    }

    #[test]
    fn truncated_bundle_is_a_format_error() {
        let bytes = tiny_bundle().to_bytes().unwrap();
        for cut in [0, 5, 12, 40, bytes.len() - 1] {
            let r = DatasetBundle::from_bytes(&bytes[..cut]);
            assert!(matches!(r, Err(GcmError::Format(_))), "cut {cut}: {r:?}");
        }
    }

    #[test]
    fn class_count_mismatch_is_a_validation_error() {
        let mut b = tiny_bundle();
        let bytes = b.to_bytes().unwrap();
        // Same body, header claiming one class fewer.
        b.attributes = b.attributes.select_rows(&[0, 1, 2, 3]);
        let mut forged = b.to_bytes().unwrap();
        let head_len = u32::from_le_bytes(forged[8..12].try_into().unwrap()) as usize;
        forged.truncate(12 + head_len);
        forged.extend_from_slice(&bytes[12 + u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize..]);
        assert!(matches!(DatasetBundle::from_bytes(&forged), Err(GcmError::Validation(_))));
    }

    #[test]
    fn validation_guards() {
        let mut b = tiny_bundle();
        b.features.set(0, 0, f64::NAN);
        assert!(b.validate().is_err());

        let mut b = tiny_bundle();
        let unseen_sample = (0..50).find(|&i| b.labels[i] == 4).unwrap();
        b.split.test_idx.retain(|&i| i != unseen_sample);
        b.split.train_idx.push(unseen_sample);
        let err = b.validate().unwrap_err().to_string();
        assert!(err.contains("leakage"), "{err}");

        let mut b = tiny_bundle();
        b.labels[0] = 7;
        assert!(b.validate().is_err());
    }

    #[test]
    fn open_set_attributes_are_one_hot() {
        let b = tiny_bundle();
        assert!(!b.has_one_hot_seen_attributes());
        let o = b.to_open_set();
        assert!(o.has_one_hot_seen_attributes());
        assert_eq!(o.attr_dim(), 3);
        o.validate().unwrap();
    }
}
