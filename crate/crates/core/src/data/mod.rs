//! Long-tailed semi-supervised datasets.
//!
//! A [`SemiDataset`] holds three splits: a labeled training split, an
//! unlabeled training split whose ground truth is kept only for scoring
//! pseudo-labels, and a class-balanced test split. Training code sees the
//! dataset through [`TrainingData`], which has no path to the hidden labels;
//! scoring code asks for an [`EvaluationAccess`].

mod container;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::nn::DenseMatrix;
use crate::rng;

pub use container::{load_dataset, save_dataset, MAGIC as CONTAINER_MAGIC, VERSION as CONTAINER_VERSION};

/// Exponential long-tail profile: `n_c = round(n_1 · γ^(−c/(C−1)))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassProfile {
    pub class_count: usize,
    pub head_count: usize,
    pub imbalance_ratio: f64,
}

impl ClassProfile {
    pub fn new(class_count: usize, head_count: usize, imbalance_ratio: f64) -> Self {
        Self {
            class_count,
            head_count,
            imbalance_ratio,
        }
    }

    pub fn counts(&self) -> Result<Vec<usize>> {
        class_counts(self)
    }
}

/// Per-class sample counts for `profile`, head first.
///
/// Rounds half up and clamps to at least one sample per class; the last
/// class is computed as `n_1 / γ` directly so the endpoints are exact.
pub fn class_counts(profile: &ClassProfile) -> Result<Vec<usize>> {
    let ClassProfile {
        class_count: c,
        head_count: n1,
        imbalance_ratio: gamma,
    } = *profile;
    if c < 2 {
        return Err(Error::Config(format!("class_count = {c} must be >= 2")));
    }
    if !(gamma >= 1.0 && gamma.is_finite()) {
        return Err(Error::Config(format!("imbalance ratio {gamma} must be >= 1")));
    }
    if n1 < c {
        return Err(Error::Config(format!(
            "head count {n1} must be at least the class count {c}"
        )));
    }
    let head = n1 as f64;
    let last = (c - 1) as f64;
    Ok((0..c)
        .map(|k| {
            let raw = match k {
                0 => head,
                _ if k == c - 1 => head / gamma,
                _ => head * gamma.powf(-(k as f64) / last),
            };
            ((raw + 0.5).floor() as usize).max(1)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    GaussianBlobs,
    TwoMoonsLike,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub generator: GeneratorKind,
    /// Container to load when `generator = "file"`.
    pub path: Option<String>,
    pub dim: usize,
    pub classes: usize,
    pub labeled_head: usize,
    pub labeled_ratio: f64,
    pub unlabeled_head: usize,
    pub unlabeled_ratio: f64,
    pub test_per_class: usize,
    /// Distance between neighbouring class centres.
    pub separation: f64,
    /// Per-coordinate standard deviation around a centre.
    pub spread: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            generator: GeneratorKind::GaussianBlobs,
            path: None,
            dim: 2,
            classes: 5,
            labeled_head: 100,
            labeled_ratio: 20.0,
            unlabeled_head: 400,
            unlabeled_ratio: 20.0,
            test_per_class: 200,
            separation: 2.0,
            spread: 1.0,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn labeled_profile(&self) -> ClassProfile {
        ClassProfile::new(self.classes, self.labeled_head, self.labeled_ratio)
    }

    pub fn unlabeled_profile(&self) -> ClassProfile {
        ClassProfile::new(self.classes, self.unlabeled_head, self.unlabeled_ratio)
    }

    pub fn validate(&self) -> Result<()> {
        if self.generator == GeneratorKind::File {
            return match self.path {
                Some(_) => Ok(()),
                None => Err(Error::Config("data.path is required for the file generator".into())),
            };
        }
        if self.dim < 1 {
            return Err(Error::Config("data.dim must be >= 1".into()));
        }
        if self.generator == GeneratorKind::TwoMoonsLike && self.dim < 2 {
            return Err(Error::Config("data.dim must be >= 2 for two_moons_like".into()));
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return Err(Error::Config(format!("data.separation = {} must be > 0", self.separation)));
        }
        if !(self.spread > 0.0 && self.spread.is_finite()) {
            return Err(Error::Config(format!("data.spread = {} must be > 0", self.spread)));
        }
        if self.test_per_class < 1 {
            return Err(Error::Config("data.test_per_class must be >= 1".into()));
        }
        self.labeled_profile()
            .counts()
            .map_err(|e| Error::Config(format!("data.labeled_*: {e}")))?;
        self.unlabeled_profile()
            .counts()
            .map_err(|e| Error::Config(format!("data.unlabeled_*: {e}")))?;
        Ok(())
    }
}

/// Features with a class label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSplit {
    pub features: DenseMatrix,
    pub labels: Vec<usize>,
}

impl LabeledSplit {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        histogram(&self.labels, classes)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemiDataset {
    pub(crate) classes: usize,
    pub(crate) labeled: LabeledSplit,
    pub(crate) unlabeled: DenseMatrix,
    /// Ground truth of the unlabeled split, evaluation only.
    pub(crate) hidden_labels: Option<Vec<usize>>,
    pub(crate) test: LabeledSplit,
}

/// The part of a dataset the training path may read.
#[derive(Debug, Clone, Copy)]
pub struct TrainingData<'a> {
    pub classes: usize,
    pub labeled: &'a LabeledSplit,
    pub unlabeled: &'a DenseMatrix,
}

impl TrainingData<'_> {
    pub fn labeled_counts(&self) -> Vec<usize> {
        self.labeled.class_counts(self.classes)
    }
}

/// Capability to read the unlabeled split's ground truth.
#[derive(Debug, Clone, Copy)]
pub struct EvaluationAccess<'a> {
    hidden_labels: &'a [usize],
}

impl<'a> EvaluationAccess<'a> {
    pub fn hidden_labels(&self) -> &'a [usize] {
        self.hidden_labels
    }
}

impl SemiDataset {
    pub fn new(
        classes: usize,
        labeled: LabeledSplit,
        unlabeled: DenseMatrix,
        hidden_labels: Option<Vec<usize>>,
        test: LabeledSplit,
    ) -> Result<Self> {
        let ds = Self {
            classes,
            labeled,
            unlabeled,
            hidden_labels,
            test,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("a dataset needs at least 2 classes".into()));
        }
        let dim = self.dim();
        for (name, split) in [("labeled", &self.labeled), ("test", &self.test)] {
            if split.features.rows() != split.labels.len() {
                return Err(Error::Shape(format!("{name} split has mismatched rows")));
            }
            if split.features.cols() != dim {
                return Err(Error::Shape(format!("{name} split has wrong feature dimension")));
            }
            if split.labels.iter().any(|&y| y >= self.classes) {
                return Err(Error::Index(format!("{name} split has an out-of-range label")));
            }
        }
        if self.unlabeled.cols() != dim {
            return Err(Error::Shape("unlabeled split has wrong feature dimension".into()));
        }
        if let Some(h) = &self.hidden_labels {
            if h.len() != self.unlabeled.rows() || h.iter().any(|&y| y >= self.classes) {
                return Err(Error::Shape("hidden labels do not match the unlabeled split".into()));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.labeled.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn labeled(&self) -> &LabeledSplit {
        &self.labeled
    }

    pub fn unlabeled_features(&self) -> &DenseMatrix {
        &self.unlabeled
    }

    pub fn test(&self) -> &LabeledSplit {
        &self.test
    }

    pub fn training_data(&self) -> TrainingData<'_> {
        TrainingData {
            classes: self.classes,
            labeled: &self.labeled,
            unlabeled: &self.unlabeled,
        }
    }

    /// Fails with a capability error when the dataset carries no ground
    /// truth for its unlabeled split.
    pub fn evaluation(&self) -> Result<EvaluationAccess<'_>> {
        self.hidden_labels
            .as_deref()
            .map(|hidden_labels| EvaluationAccess { hidden_labels })
            .ok_or_else(|| Error::Capability("dataset has no unlabeled ground truth".into()))
    }

    pub fn has_hidden_labels(&self) -> bool {
        self.hidden_labels.is_some()
    }

    pub fn without_hidden_labels(mut self) -> Self {
        self.hidden_labels = None;
        self
    }

    pub fn labeled_counts(&self) -> Vec<usize> {
        self.labeled.class_counts(self.classes)
    }

    /// Per-class unlabeled counts, when ground truth is present.
    pub fn unlabeled_counts(&self) -> Option<Vec<usize>> {
        self.hidden_labels.as_ref().map(|h| histogram(h, self.classes))
    }

    pub fn test_counts(&self) -> Vec<usize> {
        self.test.class_counts(self.classes)
    }
}

pub(crate) fn histogram(labels: &[usize], classes: usize) -> Vec<usize> {
    let mut out = vec![0; classes];
    labels.iter().for_each(|&y| out[y] += 1);
    out
}

/// Build a dataset from `spec`, or load it for the file generator.
pub fn build_dataset(spec: &DatasetSpec) -> Result<SemiDataset> {
    spec.validate()?;
    match (spec.generator, &spec.path) {
        (GeneratorKind::File, Some(path)) => load_dataset(std::path::Path::new(path)),
        _ => generate_synthetic(spec),
    }
}

const SPLIT_LABELED: u64 = 0;
const SPLIT_UNLABELED: u64 = 1;
const SPLIT_TEST: u64 = 2;

/// Sample a synthetic long-tailed dataset. Deterministic in `spec.seed`.
pub fn generate_synthetic(spec: &DatasetSpec) -> Result<SemiDataset> {
    spec.validate()?;
    if spec.generator == GeneratorKind::File {
        return Err(Error::Config("generate_synthetic needs a synthetic generator".into()));
    }
    let labeled_counts = spec.labeled_profile().counts()?;
    let unlabeled_counts = spec.unlabeled_profile().counts()?;
    let test_counts = vec![spec.test_per_class; spec.classes];

    let labeled = sample_split(spec, SPLIT_LABELED, &labeled_counts);
    let unlabeled = sample_split(spec, SPLIT_UNLABELED, &unlabeled_counts);
    let test = sample_split(spec, SPLIT_TEST, &test_counts);
    SemiDataset::new(
        spec.classes,
        labeled,
        unlabeled.features,
        Some(unlabeled.labels),
        test,
    )
}

/// Class centres for the Gaussian blobs: on a circle in the first two
/// coordinates (a line when `dim = 1`), neighbours `separation` apart.
pub fn blob_centres(spec: &DatasetSpec) -> Vec<Vec<f64>> {
    let c = spec.classes;
    (0..c)
        .map(|k| {
            let mut centre = vec![0.0; spec.dim];
            if spec.dim == 1 {
                centre[0] = k as f64 * spec.separation;
            } else {
                let radius = spec.separation / (2.0 * (PI / c as f64).sin());
                let angle = 2.0 * PI * k as f64 / c as f64;
                centre[0] = radius * angle.cos();
                centre[1] = radius * angle.sin();
            }
            centre
        })
        .collect()
}

fn sample_split(spec: &DatasetSpec, split: u64, counts: &[usize]) -> LabeledSplit {
    let centres = blob_centres(spec);
    let mut rows: Vec<(Vec<f64>, usize)> = Vec::with_capacity(counts.iter().sum());
    for (class, &n) in counts.iter().enumerate() {
        let mut rng = rng::rng_for(spec.seed, &[rng::tag::DATA, split, class as u64]);
        for _ in 0..n {
            let mut x: Vec<f64> = (0..spec.dim)
                .map(|_| spec.spread * rng.sample::<f64, _>(StandardNormal))
                .collect();
            match spec.generator {
                GeneratorKind::TwoMoonsLike => {
                    let (cx, cy) = moon_point(class, spec.separation, rng.random::<f64>() * PI);
                    x[0] += cx;
                    x[1] += cy;
                }
                _ => x.iter_mut().zip(&centres[class]).for_each(|(v, c)| *v += c),
            }
            rows.push((x, class));
        }
    }
    let mut rng = rng::rng_for(spec.seed, &[rng::tag::DATA, split, u64::MAX]);
    rows.shuffle(&mut rng);
    let labels = rows.iter().map(|(_, y)| *y).collect();
    let values = rows.into_iter().flat_map(|(x, _)| x).collect();
    LabeledSplit {
        features: DenseMatrix::from_vec(labels_len(counts), spec.dim, values)
            .expect("sized by construction"),
        labels,
    }
}

fn labels_len(counts: &[usize]) -> usize {
    counts.iter().sum()
}

/// Interleaved half-circle arcs of radius `r`: class `k` is centred at
/// `(k·r, (k mod 2)·r/2)` and odd classes open downward.
fn moon_point(class: usize, r: f64, angle: f64) -> (f64, f64) {
    let cx = class as f64 * r;
    if class.is_multiple_of(2) {
        (cx + r * angle.cos(), r * angle.sin())
    } else {
        (cx + r * angle.cos(), 0.5 * r - r * angle.sin())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_header_counts() {
        let counts = class_counts(&ClassProfile::new(10, 1500, 150.0)).unwrap();
        assert_eq!(counts[0], 1500);
        assert_eq!(counts[9], 10);
        assert_eq!(counts[1], 860);
    }

    #[test]
    fn five_class_profile() {
        let counts = class_counts(&ClassProfile::new(5, 100, 20.0)).unwrap();
        assert_eq!(counts, vec![100, 47, 22, 11, 5]);
    }

    #[test]
    fn balanced_and_invalid_profiles() {
        assert_eq!(class_counts(&ClassProfile::new(4, 30, 1.0)).unwrap(), vec![30; 4]);
        assert!(matches!(class_counts(&ClassProfile::new(4, 30, 0.5)), Err(Error::Config(_))));
        assert!(matches!(class_counts(&ClassProfile::new(1, 30, 2.0)), Err(Error::Config(_))));
        assert!(matches!(class_counts(&ClassProfile::new(4, 3, 2.0)), Err(Error::Config(_))));
    }

    #[test]
    fn generation_is_deterministic_and_follows_profiles() {
        let spec = DatasetSpec { seed: 42, ..Default::default() };
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.labeled_counts(), vec![100, 47, 22, 11, 5]);
        assert_eq!(a.unlabeled_counts().unwrap(), spec.unlabeled_profile().counts().unwrap());
        assert_eq!(a.test_counts(), vec![200; 5]);
        let c = generate_synthetic(&DatasetSpec { seed: 43, ..spec }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_dim_rejected() {
        let spec = DatasetSpec { dim: 0, ..Default::default() };
        assert!(matches!(generate_synthetic(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn well_separated_blobs_are_nearest_centroid_separable() {
        let spec = DatasetSpec {
            separation: 10.0,
            spread: 1.0,
            seed: 5,
            ..Default::default()
        };
        let ds = generate_synthetic(&spec).unwrap();
        // Centroids estimated from the labeled split only.
        let counts = ds.labeled_counts();
        let mut centroids = vec![vec![0.0; spec.dim]; spec.classes];
        for (x, &y) in ds.labeled().features.iter_rows().zip(&ds.labeled().labels) {
            centroids[y].iter_mut().zip(x).for_each(|(c, v)| *c += v / counts[y] as f64);
        }
        let test = ds.test();
        let correct = test
            .features
            .iter_rows()
            .zip(&test.labels)
            .filter(|(x, &y)| {
                let nearest = (0..spec.classes)
                    .min_by(|&a, &b| {
                        let d = |c: &Vec<f64>| c.iter().zip(x.iter()).map(|(p, q)| (p - q).powi(2)).sum::<f64>();
                        d(&centroids[a]).total_cmp(&d(&centroids[b]))
                    })
                    .unwrap();
                nearest == y
            })
            .count();
        assert!(correct as f64 / test.len() as f64 > 0.99);
    }

    #[test]
    fn two_moons_generates() {
        let spec = DatasetSpec {
            generator: GeneratorKind::TwoMoonsLike,
            classes: 2,
            labeled_head: 20,
            labeled_ratio: 4.0,
            unlabeled_head: 40,
            unlabeled_ratio: 4.0,
            test_per_class: 10,
            separation: 1.0,
            spread: 0.1,
            ..Default::default()
        };
        let ds = generate_synthetic(&spec).unwrap();
        assert_eq!(ds.labeled_counts(), vec![20, 5]);
        assert!(ds.labeled().features.is_finite());
    }

    #[test]
    fn evaluation_access_requires_ground_truth() {
        let ds = generate_synthetic(&DatasetSpec::default()).unwrap();
        assert_eq!(ds.evaluation().unwrap().hidden_labels().len(), ds.unlabeled_features().rows());
        let stripped = ds.without_hidden_labels();
        assert!(matches!(stripped.evaluation(), Err(Error::Capability(_))));
    }
}
