//! Semi-supervised cross-entropy and the gate-masked uncertainty loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{nll, weighted_cross_entropy, DenseMatrix};
use crate::selector::Origin;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeighting {
    /// `w_k ∝ 1/n_k` over labeled counts, normalised to mean 1.
    #[default]
    InverseFrequency,
    Uniform,
}

/// Per-sample weight `ω_i` of a pseudo-labeled sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoWeighting {
    #[default]
    Unit,
    /// `ω_i = 1 − û_i`.
    OneMinusUncertainty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// `λ_loss`, weight of the pseudo-labeled term.
    pub unlabeled_weight: f64,
    pub class_weighting: ClassWeighting,
    /// Explicit class weights; overrides `class_weighting`.
    pub class_weights: Option<Vec<f64>>,
    pub uncertainty_loss_weight: f64,
    pub pseudo_weighting: PseudoWeighting,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            unlabeled_weight: 1.0,
            class_weighting: ClassWeighting::InverseFrequency,
            class_weights: None,
            uncertainty_loss_weight: 1.0,
            pseudo_weighting: PseudoWeighting::Unit,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("loss.unlabeled_weight", self.unlabeled_weight),
            ("loss.uncertainty_loss_weight", self.uncertainty_loss_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{key} = {v} must be finite and >= 0")));
            }
        }
        if let Some(w) = &self.class_weights {
            if w.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return Err(Error::Config("loss.class_weights must be positive and finite".into()));
            }
        }
        Ok(())
    }
}

/// Loss configuration resolved against a dataset's labeled counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub unlabeled_weight: f64,
    pub class_weights: Vec<f64>,
    pub uncertainty_loss_weight: f64,
    pub pseudo_weighting: PseudoWeighting,
}

impl LossWeights {
    pub fn resolve(cfg: &LossConfig, labeled_counts: &[usize]) -> Result<Self> {
        cfg.validate()?;
        let c = labeled_counts.len();
        let class_weights = match (&cfg.class_weights, cfg.class_weighting) {
            (Some(w), _) if w.len() != c => {
                return Err(Error::Config(format!("loss.class_weights has {} entries for {c} classes", w.len())))
            }
            (Some(w), _) => w.clone(),
            (None, ClassWeighting::Uniform) => vec![1.0; c],
            (None, ClassWeighting::InverseFrequency) => inverse_frequency_weights(labeled_counts)?,
        };
        Ok(Self {
            unlabeled_weight: cfg.unlabeled_weight,
            class_weights,
            uncertainty_loss_weight: cfg.uncertainty_loss_weight,
            pseudo_weighting: cfg.pseudo_weighting,
        })
    }

    pub fn uniform(classes: usize) -> Self {
        Self {
            unlabeled_weight: 1.0,
            class_weights: vec![1.0; classes],
            uncertainty_loss_weight: 1.0,
            pseudo_weighting: PseudoWeighting::Unit,
        }
    }

    pub fn omega(&self, uncertainty: f64) -> f64 {
        match self.pseudo_weighting {
            PseudoWeighting::Unit => 1.0,
            PseudoWeighting::OneMinusUncertainty => (1.0 - uncertainty).clamp(0.0, 1.0),
        }
    }
}

pub fn inverse_frequency_weights(counts: &[usize]) -> Result<Vec<f64>> {
    if counts.is_empty() || counts.contains(&0) {
        return Err(Error::Config("inverse-frequency weights need positive counts".into()));
    }
    let inv: Vec<f64> = counts.iter().map(|&n| 1.0 / n as f64).collect();
    let mean = inv.iter().sum::<f64>() / inv.len() as f64;
    Ok(inv.into_iter().map(|v| v / mean).collect())
}

/// `(1/N_l) Σ CE_l + (λ/N_u) Σ ω_i CE_u`, CE weighted by class. The
/// pseudo term is dropped when there are no pseudo samples.
pub fn semi_supervised_ce(
    labeled_probs: &DenseMatrix,
    labeled_targets: &[usize],
    pseudo_probs: &DenseMatrix,
    pseudo_targets: &[usize],
    omega: &[f64],
    weights: &LossWeights,
) -> Result<f64> {
    let (sup, unl) = semi_supervised_parts(labeled_probs, labeled_targets, pseudo_probs, pseudo_targets, omega, weights)?;
    Ok(sup + weights.unlabeled_weight * unl)
}

/// The two terms of [`semi_supervised_ce`] before `λ` is applied.
pub fn semi_supervised_parts(
    labeled_probs: &DenseMatrix,
    labeled_targets: &[usize],
    pseudo_probs: &DenseMatrix,
    pseudo_targets: &[usize],
    omega: &[f64],
    weights: &LossWeights,
) -> Result<(f64, f64)> {
    if labeled_targets.is_empty() {
        return Err(Error::Config("semi-supervised loss needs at least one labeled sample".into()));
    }
    let supervised = weighted_cross_entropy(labeled_probs, labeled_targets, &weights.class_weights)?;
    Ok((supervised, pseudo_term(pseudo_probs, pseudo_targets, omega, weights)?))
}

/// `(1/N_u) Σ ω_i w[y_i] CE_i`, 0 without pseudo samples.
fn pseudo_term(probs: &DenseMatrix, targets: &[usize], omega: &[f64], weights: &LossWeights) -> Result<f64> {
    if targets.is_empty() {
        return Ok(0.0);
    }
    if omega.len() != targets.len() {
        return Err(Error::Shape(format!("{} ω values for {} pseudo samples", omega.len(), targets.len())));
    }
    if omega.iter().any(|&w| w.is_nan() || w < 0.0) {
        return Err(Error::Domain("ω must be non-negative".into()));
    }
    crate::nn::check_targets(probs, targets, &weights.class_weights)?;
    let sum: f64 = targets
        .iter()
        .zip(omega)
        .enumerate()
        .map(|(i, (&y, &w))| w * weights.class_weights[y] * nll(probs.get(i, y)))
        .sum();
    Ok(sum / targets.len() as f64)
}

/// `−(1/B) Σ_i θ_i ln p[i, ŷ_i]`.
pub fn uncertainty_loss(probs: &DenseMatrix, pseudo_targets: &[usize], gates: &[bool], batch_size: usize) -> Result<f64> {
    if gates.len() != probs.rows() || pseudo_targets.len() != probs.rows() {
        return Err(Error::Shape(format!(
            "{} gates / {} targets for {} rows",
            gates.len(),
            pseudo_targets.len(),
            probs.rows()
        )));
    }
    if !gates.iter().any(|&g| g) {
        return Ok(0.0);
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let mut total = 0.0;
    for ((i, &y), _) in pseudo_targets.iter().enumerate().zip(gates).filter(|(_, &g)| g) {
        if y >= probs.cols() {
            return Err(Error::Index(format!("pseudo-target {y} out of range")));
        }
        total += nll(probs.get(i, y));
    }
    Ok(total / batch_size as f64)
}

/// `semi_supervised + w_u · uncertainty`.
pub fn total_loss(semi_supervised: f64, uncertainty: f64, weights: &LossWeights) -> Result<f64> {
    if !semi_supervised.is_finite() || !uncertainty.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss component ({semi_supervised}, {uncertainty})"
        )));
    }
    Ok(semi_supervised + weights.uncertainty_loss_weight * uncertainty)
}

/// Loss terms of one batch or one epoch (as batch means).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub supervised: f64,
    /// Pseudo-labeled CE before `λ`.
    pub unlabeled: f64,
    pub uncertainty: f64,
    pub total: f64,
}

/// A row of a mixed training batch.
#[derive(Debug, Clone, Copy)]
pub struct BatchRow {
    pub origin: Origin,
    pub target: usize,
    /// Normalised uncertainty of a pseudo-labeled row.
    pub uncertainty: f64,
}

/// Per-row coefficients `a_i` with `Σ a_i · (−ln p[i, y_i])` equal to the
/// batch's total loss. Pseudo rows are gated (`θ = 1`) by construction.
/// The supervised term is absent from batches with no labeled rows.
pub fn batch_coefficients(rows: &[BatchRow], weights: &LossWeights) -> Vec<f64> {
    let n_l = rows.iter().filter(|r| r.origin == Origin::Labeled).count();
    let n_u = rows.len() - n_l;
    let b = rows.len() as f64;
    rows.iter()
        .map(|r| {
            let w = weights.class_weights[r.target];
            match r.origin {
                Origin::Labeled => w / n_l as f64,
                Origin::Pseudo => {
                    weights.unlabeled_weight * weights.omega(r.uncertainty) * w / n_u as f64
                        + weights.uncertainty_loss_weight / b
                }
            }
        })
        .collect()
}

/// Loss components of a mixed batch, computed through the public loss ops.
pub fn batch_loss(probs: &DenseMatrix, rows: &[BatchRow], weights: &LossWeights) -> Result<LossComponents> {
    if rows.len() != probs.rows() {
        return Err(Error::Shape("batch rows differ from probability rows".into()));
    }
    let (lab, pse): (Vec<usize>, Vec<usize>) = (0..rows.len()).partition(|&i| rows[i].origin == Origin::Labeled);
    let targets = |idx: &[usize]| idx.iter().map(|&i| rows[i].target).collect::<Vec<_>>();
    let pseudo_probs = probs.select_rows(&pse)?;
    let pseudo_targets = targets(&pse);
    let omega: Vec<f64> = pse.iter().map(|&i| weights.omega(rows[i].uncertainty)).collect();

    let supervised = if lab.is_empty() {
        0.0
    } else {
        weighted_cross_entropy(&probs.select_rows(&lab)?, &targets(&lab), &weights.class_weights)?
    };
    let unlabeled = pseudo_term(&pseudo_probs, &pseudo_targets, &omega, weights)?;
    let gates = vec![true; pse.len()];
    let uncertainty = uncertainty_loss(&pseudo_probs, &pseudo_targets, &gates, rows.len())?;
    let semi = supervised + weights.unlabeled_weight * unlabeled;
    Ok(LossComponents {
        supervised,
        unlabeled,
        uncertainty,
        total: total_loss(semi, uncertainty, weights)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> DenseMatrix {
        DenseMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn perfect_predictions_cost_nothing() {
        let w = LossWeights::uniform(2);
        let p = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(semi_supervised_ce(&p, &[0, 1], &p, &[0, 1], &[1.0, 1.0], &w).unwrap(), 0.0);
        assert_eq!(uncertainty_loss(&p, &[0, 1], &[true, true], 2).unwrap(), 0.0);
    }

    #[test]
    fn zero_lambda_is_supervised_only() {
        let w = LossWeights {
            unlabeled_weight: 0.0,
            ..LossWeights::uniform(2)
        };
        let lab = m(&[&[0.6, 0.4]]);
        let pse = m(&[&[0.1, 0.9], &[0.5, 0.5]]);
        let l = semi_supervised_ce(&lab, &[0], &pse, &[0, 0], &[1.0, 1.0], &w).unwrap();
        assert_eq!(l, weighted_cross_entropy(&lab, &[0], &[1.0, 1.0]).unwrap());
    }

    #[test]
    fn hand_arithmetic() {
        // Probabilities chosen so the per-sample CEs are 0.7, 0.2, 0.4.
        let w = LossWeights {
            unlabeled_weight: 0.5,
            ..LossWeights::uniform(2)
        };
        let p = |ce: f64| (-ce).exp();
        let lab = m(&[&[p(0.7), 1.0 - p(0.7)]]);
        let pse = m(&[&[p(0.2), 1.0 - p(0.2)], &[p(0.4), 1.0 - p(0.4)]]);
        let l = semi_supervised_ce(&lab, &[0], &pse, &[0, 0], &[1.0, 1.0], &w).unwrap();
        assert!((l - 0.85).abs() < 1e-12);
    }

    #[test]
    fn no_pseudo_samples_and_no_labeled_samples() {
        let w = LossWeights::uniform(2);
        let lab = m(&[&[0.5, 0.5]]);
        let none = DenseMatrix::zeros(0, 2);
        let l = semi_supervised_ce(&lab, &[1], &none, &[], &[], &w).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        assert!(matches!(semi_supervised_ce(&none, &[], &lab, &[1], &[1.0], &w), Err(Error::Config(_))));
    }

    #[test]
    fn uncertainty_loss_examples() {
        let p = m(&[&[0.5, 0.5], &[0.75, 0.25]]);
        assert_eq!(uncertainty_loss(&p, &[0, 1], &[false, false], 2).unwrap(), 0.0);
        let one = m(&[&[1.0, 0.0]]);
        assert_eq!(uncertainty_loss(&one, &[0], &[true], 1).unwrap(), 0.0);
        let l = uncertainty_loss(&p, &[0, 1], &[true, true], 2).unwrap();
        assert!((l - 1.039721).abs() < 1e-6);
        assert!((l + (0.5f64.ln() + 0.25f64.ln()) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn totals() {
        let w = LossWeights::uniform(2);
        assert_eq!(total_loss(0.0, 0.0, &w).unwrap(), 0.0);
        assert!((total_loss(0.85, 1.04, &w).unwrap() - 1.89).abs() < 1e-12);
        let w0 = LossWeights {
            uncertainty_loss_weight: 0.0,
            ..w.clone()
        };
        assert_eq!(total_loss(0.85, 1.04, &w0).unwrap(), 0.85);
        assert!(matches!(total_loss(f64::NAN, 0.0, &w), Err(Error::Numeric(_))));
    }

    #[test]
    fn inverse_frequency_has_unit_mean() {
        let w = inverse_frequency_weights(&[100, 47, 22, 11, 5]).unwrap();
        assert!((w.iter().sum::<f64>() / 5.0 - 1.0).abs() < 1e-12);
        assert!(w.windows(2).all(|p| p[0] < p[1]));
    }

    #[test]
    fn coefficients_reproduce_batch_loss() {
        let w = LossWeights {
            unlabeled_weight: 0.7,
            class_weights: vec![0.5, 1.5, 1.0],
            uncertainty_loss_weight: 0.3,
            pseudo_weighting: PseudoWeighting::OneMinusUncertainty,
        };
        let probs = m(&[&[0.6, 0.3, 0.1], &[0.2, 0.5, 0.3], &[0.1, 0.1, 0.8], &[0.3, 0.4, 0.3]]);
        let rows = [
            BatchRow { origin: Origin::Labeled, target: 0, uncertainty: 0.0 },
            BatchRow { origin: Origin::Pseudo, target: 1, uncertainty: 0.2 },
            BatchRow { origin: Origin::Pseudo, target: 2, uncertainty: 0.4 },
            BatchRow { origin: Origin::Labeled, target: 1, uncertainty: 0.0 },
        ];
        let coeffs = batch_coefficients(&rows, &w);
        let via_coeffs: f64 = rows.iter().enumerate().map(|(i, r)| coeffs[i] * nll(probs.get(i, r.target))).sum();
        let via_ops = batch_loss(&probs, &rows, &w).unwrap();
        assert!((via_coeffs - via_ops.total).abs() < 1e-12);

        let only_pseudo = &rows[1..3];
        let p2 = probs.select_rows(&[1, 2]).unwrap();
        let c2 = batch_coefficients(only_pseudo, &w);
        let s2: f64 = only_pseudo.iter().enumerate().map(|(i, r)| c2[i] * nll(p2.get(i, r.target))).sum();
        assert!((s2 - batch_loss(&p2, only_pseudo, &w).unwrap().total).abs() < 1e-12);
    }
}
