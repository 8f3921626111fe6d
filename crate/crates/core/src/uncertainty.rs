//! Monte Carlo dropout uncertainty.
//!
//! `T` stochastic passes per sample are averaged into `μ`; the predictive
//! entropy of `μ` and the across-pass standard deviation summarise how much
//! the passes disagree.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{softmax, DenseMatrix, Dropout, MlpModel, DEFAULT_DROPOUT_RATE};
use crate::report::fmt_sig6;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McConfig {
    #[serde(alias = "T")]
    pub passes: usize,
    pub dropout_rate: f64,
    pub base_seed: u64,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            passes: 10,
            dropout_rate: DEFAULT_DROPOUT_RATE,
            base_seed: 0,
        }
    }
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        if self.passes == 0 {
            return Err(Error::Config("mc.passes must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "mc.dropout_rate = {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// Which per-sample statistic gates and thresholds consume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyMetric {
    #[default]
    Entropy,
    Std,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyEstimate {
    pub mean_probs: Vec<f64>,
    pub entropy: f64,
    /// Mean over classes of the per-class population std across passes.
    pub std: f64,
    pub predicted_class: usize,
    pub confidence: f64,
}

impl UncertaintyEstimate {
    /// Build from one sample's `T × C` pass probabilities.
    pub fn from_passes(passes: &[Vec<f64>]) -> Result<Self> {
        let c = passes.first().map(Vec::len).unwrap_or(0);
        if passes.is_empty() || c == 0 {
            return Err(Error::Shape("no pass probabilities".into()));
        }
        let t = passes.len() as f64;
        let mut mean = vec![0.0; c];
        for p in passes {
            if p.len() != c {
                return Err(Error::Shape("ragged pass probabilities".into()));
            }
            mean.iter_mut().zip(p).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= t);
        let std = std_uncertainty(passes)?;
        let (predicted_class, confidence) = argmax(&mean);
        Ok(Self {
            entropy: entropy_unchecked(&mean),
            mean_probs: mean,
            std,
            predicted_class,
            confidence,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.mean_probs.len()
    }

    /// Uncertainty on a `[0, 1]` scale: `u / ln C` for entropy, `2σ` for
    /// std (a population std of values in `[0, 1]` is at most 1/2).
    pub fn normalized_uncertainty(&self, metric: UncertaintyMetric) -> f64 {
        let raw = match metric {
            UncertaintyMetric::Entropy => self.entropy / (self.num_classes() as f64).ln(),
            UncertaintyMetric::Std => 2.0 * self.std,
        };
        raw.clamp(0.0, 1.0)
    }
}

/// First index of the maximum; ties go to the lower class index.
pub fn argmax(values: &[f64]) -> (usize, f64) {
    values
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best })
}

/// Natural-log entropy `−Σ μ ln μ` with `0·ln 0 = 0`.
pub fn predictive_entropy(mean_probs: &[f64]) -> Result<f64> {
    if mean_probs.is_empty() {
        return Err(Error::Domain("empty distribution".into()));
    }
    if let Some(v) = mean_probs.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::Domain(format!("probability {v} is not a finite non-negative value")));
    }
    let sum: f64 = mean_probs.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Domain(format!("probabilities sum to {sum}")));
    }
    Ok(entropy_unchecked(mean_probs))
}

fn entropy_unchecked(p: &[f64]) -> f64 {
    let h: f64 = p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum();
    h.max(0.0)
}

/// Per-class population std across passes, averaged over classes.
pub fn std_uncertainty(pass_probs: &[Vec<f64>]) -> Result<f64> {
    let Some(first) = pass_probs.first() else {
        return Err(Error::Shape("no passes".into()));
    };
    let c = first.len();
    if pass_probs.iter().any(|p| p.len() != c) {
        return Err(Error::Shape("ragged pass probabilities".into()));
    }
    if c == 0 {
        return Err(Error::Shape("zero classes".into()));
    }
    let t = pass_probs.len() as f64;
    let total: f64 = (0..c)
        .map(|k| {
            // shifted by the first pass so identical passes give exactly 0
            let origin = first[k];
            let mean = origin + pass_probs.iter().map(|p| p[k] - origin).sum::<f64>() / t;
            let var = pass_probs.iter().map(|p| (p[k] - mean).powi(2)).sum::<f64>() / t;
            var.sqrt()
        })
        .sum();
    Ok(total / c as f64)
}

/// A classifier that can produce stochastic class probabilities.
pub trait StochasticPredictor {
    fn num_classes(&self) -> usize;

    /// Probabilities for every row of `batch` on pass `pass`; row `i` must
    /// depend only on `(base_seed, pass, keys[i])` and its features.
    fn pass_probs(&self, batch: &DenseMatrix, base_seed: u64, pass: usize, keys: &[u64]) -> Result<DenseMatrix>;
}

impl StochasticPredictor for MlpModel {
    fn num_classes(&self) -> usize {
        MlpModel::num_classes(self)
    }

    fn pass_probs(&self, batch: &DenseMatrix, base_seed: u64, pass: usize, keys: &[u64]) -> Result<DenseMatrix> {
        let stream = rng::substream(base_seed, &[pass as u64]);
        let (logits, _) = self.forward(batch, Dropout::Keyed { stream, keys })?;
        softmax(&logits)
    }
}

/// MC estimate for every row of `batch`, keyed by row position.
pub fn mc_estimate(model: &MlpModel, batch: &DenseMatrix, cfg: &McConfig) -> Result<Vec<UncertaintyEstimate>> {
    let keys: Vec<u64> = (0..batch.rows() as u64).collect();
    mc_estimate_keyed(model, batch, &keys, cfg)
}

/// MC estimate where row `i`'s dropout masks derive from `keys[i]`, so a
/// sample gets the same estimate whatever batch it is evaluated in.
pub fn mc_estimate_keyed(
    model: &MlpModel,
    batch: &DenseMatrix,
    keys: &[u64],
    cfg: &McConfig,
) -> Result<Vec<UncertaintyEstimate>> {
    cfg.validate()?;
    if model.dropout_rates().iter().all(|&r| r == cfg.dropout_rate) {
        mc_estimate_with(model, batch, keys, cfg)
    } else {
        let model = model.clone().with_dropout_rate(cfg.dropout_rate)?;
        mc_estimate_with(&model, batch, keys, cfg)
    }
}

pub fn mc_estimate_with<P: StochasticPredictor + ?Sized>(
    predictor: &P,
    batch: &DenseMatrix,
    keys: &[u64],
    cfg: &McConfig,
) -> Result<Vec<UncertaintyEstimate>> {
    cfg.validate()?;
    if batch.rows() == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    if keys.len() != batch.rows() {
        return Err(Error::Shape(format!("{} keys for {} rows", keys.len(), batch.rows())));
    }
    let c = predictor.num_classes();
    let mut per_sample: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(cfg.passes); batch.rows()];
    for t in 0..cfg.passes {
        let probs = predictor.pass_probs(batch, cfg.base_seed, t, keys)?;
        if probs.shape() != (batch.rows(), c) {
            return Err(Error::Shape("predictor returned wrong shape".into()));
        }
        for (i, row) in probs.iter_rows().enumerate() {
            per_sample[i].push(row.to_vec());
        }
    }
    per_sample.iter().map(|p| UncertaintyEstimate::from_passes(p)).collect()
}

/// Dump `(index, predicted, confidence, entropy, std, μ…)` rows as CSV.
pub fn write_estimates_csv(path: &Path, estimates: &[UncertaintyEstimate]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let c = estimates.first().map_or(0, |e| e.num_classes());
    let mut header = String::from("index,predicted_class,confidence,entropy,std");
    (0..c).for_each(|k| header.push_str(&format!(",mu_c{k}")));
    writeln!(out, "{header}")?;
    for (i, e) in estimates.iter().enumerate() {
        write!(
            out,
            "{i},{},{},{},{}",
            e.predicted_class,
            fmt_sig6(e.confidence),
            fmt_sig6(e.entropy),
            fmt_sig6(e.std)
        )?;
        for p in &e.mean_probs {
            write!(out, ",{}", fmt_sig6(*p))?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Stub(Vec<Vec<f64>>);

    impl StochasticPredictor for Stub {
        fn num_classes(&self) -> usize {
            self.0[0].len()
        }

        fn pass_probs(&self, batch: &DenseMatrix, _: u64, pass: usize, _: &[u64]) -> Result<DenseMatrix> {
            let rows = vec![self.0[pass].clone(); batch.rows()];
            DenseMatrix::from_rows(&rows)
        }
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(predictive_entropy(&[1.0, 0.0, 0.0]).unwrap(), 0.0);
        let h = predictive_entropy(&[0.1; 10]).unwrap();
        assert!((h - 10f64.ln()).abs() < 1e-12);
        // -(0.7 ln 0.7 + 0.2 ln 0.2 + 0.1 ln 0.1)
        let oracle = -(0.7f64 * 0.7f64.ln() + 0.2 * 0.2f64.ln() + 0.1 * 0.1f64.ln());
        let h = predictive_entropy(&[0.7, 0.2, 0.1]).unwrap();
        assert!((h - oracle).abs() < 1e-15);
        assert!((h - 0.801819).abs() < 1e-6);
        assert!(matches!(predictive_entropy(&[-0.1, 1.1]), Err(Error::Domain(_))));
        assert!(matches!(predictive_entropy(&[0.5, 0.4]), Err(Error::Domain(_))));
    }

    #[test]
    fn std_examples() {
        assert_eq!(std_uncertainty(&[vec![0.3, 0.7], vec![0.3, 0.7]]).unwrap(), 0.0);
        assert_eq!(std_uncertainty(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(), 0.5);
        assert_eq!(std_uncertainty(&[vec![0.2, 0.8]]).unwrap(), 0.0);
        assert!(matches!(std_uncertainty(&[vec![1.0], vec![0.5, 0.5]]), Err(Error::Shape(_))));
    }

    #[test]
    fn stub_passes_are_averaged() {
        let stub = Stub(vec![vec![0.9, 0.1], vec![0.7, 0.3]]);
        let batch = DenseMatrix::zeros(1, 1);
        let cfg = McConfig { passes: 2, ..Default::default() };
        let est = mc_estimate_with(&stub, &batch, &[0], &cfg).unwrap();
        let e = &est[0];
        assert!((e.mean_probs[0] - 0.8).abs() < 1e-15 && (e.mean_probs[1] - 0.2).abs() < 1e-15);
        assert_eq!(e.entropy, predictive_entropy(&e.mean_probs).unwrap());
        assert!((e.std - 0.1).abs() < 1e-12);
        assert_eq!(e.predicted_class, 0);
    }

    #[test]
    fn degenerate_dropout_and_single_pass() {
        let model = MlpModel::init(&[2, 8, 3], 2).unwrap();
        let x = DenseMatrix::from_rows(&[[0.2, 0.4], [-1.0, 0.3]]).unwrap();
        let clean = model.predict_probs(&x).unwrap();

        let cfg = McConfig { passes: 5, dropout_rate: 0.0, base_seed: 1 };
        for (i, e) in mc_estimate(&model, &x, &cfg).unwrap().iter().enumerate() {
            assert_eq!(e.std, 0.0);
            for (m, p) in e.mean_probs.iter().zip(clean.row(i)) {
                assert!((m - p).abs() < 1e-15);
            }
        }

        let cfg = McConfig { passes: 1, dropout_rate: 0.5, base_seed: 1 };
        let single = model.clone().with_dropout_rate(0.5).unwrap();
        let pass = single.pass_probs(&x, 1, 0, &[0, 1]).unwrap();
        for (i, e) in mc_estimate(&model, &x, &cfg).unwrap().iter().enumerate() {
            assert_eq!(e.std, 0.0);
            assert_eq!(e.mean_probs, pass.row(i));
        }

        let cfg = McConfig { passes: 0, ..Default::default() };
        assert!(matches!(mc_estimate(&model, &x, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn estimates_ignore_batch_partitioning() {
        let model = MlpModel::init(&[2, 16, 4], 8).unwrap();
        let x = DenseMatrix::from_rows(&[[0.2, 0.4], [-1.0, 0.3], [0.9, -0.9]]).unwrap();
        let cfg = McConfig { passes: 7, dropout_rate: 0.5, base_seed: 3 };
        let keys = [5, 6, 7];
        let whole = mc_estimate_keyed(&model, &x, &keys, &cfg).unwrap();
        for i in 0..3 {
            let one = mc_estimate_keyed(&model, &x.select_rows(&[i]).unwrap(), &keys[i..=i], &cfg).unwrap();
            assert_eq!(one[0], whole[i]);
        }
    }
}
