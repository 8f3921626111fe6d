//! Two-gate pseudo-label selection.
//!
//! A sample predicted as class `c` is kept when its normalised uncertainty
//! is at most the uncertainty threshold AND its confidence reaches `τ_t(c)`.

use serde::{Deserialize, Serialize};

use crate::data::TrainingData;
use crate::error::{Error, Result};
use crate::threshold::ThresholdState;
use crate::uncertainty::{UncertaintyEstimate, UncertaintyMetric};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateConfig {
    pub uncertainty_metric: UncertaintyMetric,
    /// Scale the uncertainty threshold per class by `u_t(c)`.
    pub per_class_unc_modulation: bool,
    /// Keep only the best-scoring gated samples, score = conf − β·û.
    pub score_ranking: bool,
    pub score_beta: f64,
    /// Fraction of gated samples kept when ranking is on.
    pub score_keep_fraction: f64,
    /// Fixed uncertainty threshold used instead of `τ_t`.
    pub uncertainty_threshold: Option<f64>,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            uncertainty_metric: UncertaintyMetric::Entropy,
            per_class_unc_modulation: false,
            score_ranking: false,
            score_beta: 1.0,
            score_keep_fraction: 0.5,
            uncertainty_threshold: None,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.score_beta >= 0.0 && self.score_beta.is_finite()) {
            return Err(Error::Config(format!("gate.score_beta = {} must be finite and >= 0", self.score_beta)));
        }
        if !(self.score_keep_fraction > 0.0 && self.score_keep_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "gate.score_keep_fraction = {} outside (0, 1]",
                self.score_keep_fraction
            )));
        }
        if let Some(t) = self.uncertainty_threshold {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("gate.uncertainty_threshold = {t} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GateDecision {
    pub confidence_ok: bool,
    pub uncertainty_ok: bool,
}

impl GateDecision {
    pub fn selected(&self) -> bool {
        self.confidence_ok && self.uncertainty_ok
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectionCounts {
    pub failed_confidence: usize,
    pub failed_uncertainty: usize,
    pub failed_both: usize,
    /// Passed both gates but cut by score ranking.
    pub ranked_out: usize,
}

impl RejectionCounts {
    fn record(&mut self, d: GateDecision) {
        match (d.confidence_ok, d.uncertainty_ok) {
            (false, false) => self.failed_both += 1,
            (false, true) => self.failed_confidence += 1,
            (true, false) => self.failed_uncertainty += 1,
            (true, true) => {}
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionOutcome {
    /// Selected unlabeled indices, ascending.
    pub selected: Vec<usize>,
    pub pseudo_labels: Vec<usize>,
    /// Normalised uncertainty of each selected sample.
    pub selected_uncertainty: Vec<f64>,
    /// `θ` per unlabeled sample.
    pub gates: Vec<bool>,
    pub class_counts: Vec<usize>,
    pub class_mean_uncertainty: Vec<Option<f64>>,
    pub rejections: RejectionCounts,
}

impl SelectionOutcome {
    pub fn empty(num_samples: usize, classes: usize) -> Self {
        Self {
            selected: Vec::new(),
            pseudo_labels: Vec::new(),
            selected_uncertainty: Vec::new(),
            gates: vec![false; num_samples],
            class_counts: vec![0; classes],
            class_mean_uncertainty: vec![None; classes],
            rejections: RejectionCounts::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    fn from_gates(
        estimates: &[UncertaintyEstimate],
        gates: Vec<bool>,
        uncertainty: &[f64],
        rejections: RejectionCounts,
    ) -> Self {
        let classes = estimates[0].num_classes();
        let mut out = Self::empty(0, classes);
        let mut unc_sum = vec![0.0; classes];
        for (i, _) in gates.iter().enumerate().filter(|(_, &g)| g) {
            let c = estimates[i].predicted_class;
            out.selected.push(i);
            out.pseudo_labels.push(c);
            out.selected_uncertainty.push(uncertainty[i]);
            out.class_counts[c] += 1;
            unc_sum[c] += uncertainty[i];
        }
        out.class_mean_uncertainty = unc_sum
            .iter()
            .zip(&out.class_counts)
            .map(|(&s, &n)| (n > 0).then(|| s / n as f64))
            .collect();
        out.gates = gates;
        out.rejections = rejections;
        out
    }
}

fn uncertainty_threshold(state: &ThresholdState, class: usize, cfg: &GateConfig) -> Result<f64> {
    let base = cfg.uncertainty_threshold.unwrap_or(state.global_tau);
    if cfg.per_class_unc_modulation {
        Ok(base * state.derived()?.class_unc_norm[class])
    } else {
        Ok(base)
    }
}

/// Evaluate both gates for one estimate.
pub fn gate_decision(est: &UncertaintyEstimate, state: &ThresholdState, cfg: &GateConfig) -> Result<GateDecision> {
    let derived = state.derived()?;
    let c = est.predicted_class;
    if c >= derived.class_tau.len() {
        return Err(Error::Index(format!("predicted class {c} outside threshold state")));
    }
    let u = est.normalized_uncertainty(cfg.uncertainty_metric);
    Ok(GateDecision {
        confidence_ok: est.confidence >= derived.class_tau[c],
        uncertainty_ok: u <= uncertainty_threshold(state, c, cfg)?,
    })
}

pub fn gate_sample(est: &UncertaintyEstimate, state: &ThresholdState, cfg: &GateConfig) -> Result<bool> {
    gate_decision(est, state, cfg).map(|d| d.selected())
}

/// Gate every estimate and gather the selected set.
pub fn select_batch(
    estimates: &[UncertaintyEstimate],
    state: &ThresholdState,
    cfg: &GateConfig,
) -> Result<SelectionOutcome> {
    cfg.validate()?;
    if estimates.is_empty() {
        return Err(Error::Domain("no estimates to select from".into()));
    }
    let uncertainty: Vec<f64> = estimates
        .iter()
        .map(|e| e.normalized_uncertainty(cfg.uncertainty_metric))
        .collect();
    let mut rejections = RejectionCounts::default();
    let mut gates = Vec::with_capacity(estimates.len());
    for e in estimates {
        let d = gate_decision(e, state, cfg)?;
        rejections.record(d);
        gates.push(d.selected());
    }

    if cfg.score_ranking {
        let mut ranked: Vec<(usize, f64)> = gates
            .iter()
            .enumerate()
            .filter(|(_, &g)| g)
            .map(|(i, _)| (i, estimates[i].confidence - cfg.score_beta * uncertainty[i]))
            .collect();
        let keep = (cfg.score_keep_fraction * ranked.len() as f64).ceil() as usize;
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for &(i, _) in &ranked[keep..] {
            gates[i] = false;
            rejections.ranked_out += 1;
        }
    }
    Ok(SelectionOutcome::from_gates(estimates, gates, &uncertainty, rejections))
}

/// Confidence-only selection at a fixed threshold: the FixMatch-style
/// baseline. The uncertainty gate always passes.
pub fn select_fixed(estimates: &[UncertaintyEstimate], threshold: f64) -> Result<SelectionOutcome> {
    if estimates.is_empty() {
        return Err(Error::Domain("no estimates to select from".into()));
    }
    let uncertainty: Vec<f64> = estimates
        .iter()
        .map(|e| e.normalized_uncertainty(UncertaintyMetric::Entropy))
        .collect();
    let mut rejections = RejectionCounts::default();
    let gates = estimates
        .iter()
        .map(|e| {
            let d = GateDecision {
                confidence_ok: e.confidence >= threshold,
                uncertainty_ok: true,
            };
            rejections.record(d);
            d.selected()
        })
        .collect();
    Ok(SelectionOutcome::from_gates(estimates, gates, &uncertainty, rejections))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Labeled,
    Pseudo,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewEntry {
    pub origin: Origin,
    /// Row in the labeled or unlabeled feature matrix.
    pub index: usize,
    pub target: usize,
    /// Normalised uncertainty for pseudo entries, 0 for labeled ones.
    pub uncertainty: f64,
}

/// Labeled samples plus selected pseudo-labeled samples, borrowing the
/// dataset's feature matrices.
#[derive(Debug, Clone)]
pub struct TrainingView<'a> {
    data: TrainingData<'a>,
    entries: Vec<ViewEntry>,
}

impl<'a> TrainingView<'a> {
    pub fn labeled_only(data: TrainingData<'a>) -> Self {
        let entries = data
            .labeled
            .labels
            .iter()
            .enumerate()
            .map(|(index, &target)| ViewEntry {
                origin: Origin::Labeled,
                index,
                target,
                uncertainty: 0.0,
            })
            .collect();
        Self { data, entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ViewEntry] {
        &self.entries
    }

    pub fn entry(&self, i: usize) -> &ViewEntry {
        &self.entries[i]
    }

    pub fn features(&self, i: usize) -> &'a [f64] {
        let e = &self.entries[i];
        match e.origin {
            Origin::Labeled => self.data.labeled.features.row(e.index),
            Origin::Pseudo => self.data.unlabeled.row(e.index),
        }
    }

    pub fn pseudo_count(&self) -> usize {
        self.entries.iter().filter(|e| e.origin == Origin::Pseudo).count()
    }
}

/// Append the selected unlabeled samples, carrying their pseudo-labels.
pub fn merge_selected<'a>(data: TrainingData<'a>, outcome: &SelectionOutcome) -> Result<TrainingView<'a>> {
    let n_unlabeled = data.unlabeled.rows();
    if outcome.pseudo_labels.len() != outcome.selected.len()
        || outcome.selected_uncertainty.len() != outcome.selected.len()
    {
        return Err(Error::Shape("selection outcome fields differ in length".into()));
    }
    let mut view = TrainingView::labeled_only(data);
    for ((&i, &label), &u) in outcome
        .selected
        .iter()
        .zip(&outcome.pseudo_labels)
        .zip(&outcome.selected_uncertainty)
    {
        if i >= n_unlabeled {
            return Err(Error::Index(format!("selected index {i} outside {n_unlabeled} unlabeled samples")));
        }
        if label >= data.classes {
            return Err(Error::Index(format!("pseudo-label {label} out of range")));
        }
        view.entries.push(ViewEntry {
            origin: Origin::Pseudo,
            index: i,
            target: label,
            uncertainty: u,
        });
    }
    Ok(view)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, DatasetSpec};
    use crate::threshold::init_state;

    fn est(probs: &[f64], entropy_norm: f64) -> UncertaintyEstimate {
        let (predicted_class, confidence) = crate::uncertainty::argmax(probs);
        UncertaintyEstimate {
            mean_probs: probs.to_vec(),
            entropy: entropy_norm * (probs.len() as f64).ln(),
            std: 0.0,
            predicted_class,
            confidence,
        }
    }

    fn state(global_tau: f64, learning: &[f64]) -> ThresholdState {
        let mut s = init_state(&vec![10; learning.len()], 0.9).unwrap();
        s.global_tau = global_tau;
        s.learning_state = learning.to_vec();
        s.derive().unwrap();
        s
    }

    #[test]
    fn perfect_sample_selected() {
        let s = state(0.7, &[0.5, 0.2]);
        assert!(gate_sample(&est(&[1.0, 0.0], 0.0), &s, &GateConfig::default()).unwrap());
    }

    #[test]
    fn confident_but_uncertain_rejected() {
        let s = state(0.5, &[0.5, 0.5]);
        let d = gate_decision(&est(&[0.99, 0.01], 0.95), &s, &GateConfig::default()).unwrap();
        assert!(d.confidence_ok && !d.uncertainty_ok);
    }

    #[test]
    fn per_class_rule() {
        // uncertainty threshold 0.3, τ_t(0) = MaxNorm([0.6, 0.3])[0] · 0.9 = 0.9
        let s = state(0.9, &[0.6, 0.3]);
        let cfg = GateConfig {
            uncertainty_threshold: Some(0.3),
            ..Default::default()
        };
        assert!(gate_sample(&est(&[0.97, 0.03], 0.1), &s, &cfg).unwrap());
        assert!(!gate_sample(&est(&[0.85, 0.15], 0.1), &s, &cfg).unwrap());
    }

    #[test]
    fn stale_state_rejected() {
        let s = init_state(&[10, 10], 0.9).unwrap();
        assert!(matches!(
            gate_sample(&est(&[0.9, 0.1], 0.1), &s, &GateConfig::default()),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn empty_selection() {
        let s = state(0.99, &[0.5, 0.5]);
        let e = vec![est(&[0.6, 0.4], 0.0), est(&[0.3, 0.7], 0.0)];
        let out = select_batch(&e, &s, &GateConfig::default()).unwrap();
        assert!(out.is_empty());
        assert_eq!(out.gates, vec![false, false]);
        assert_eq!(out.rejections.failed_confidence, 2);
    }

    #[test]
    fn selection_is_order_independent() {
        let s = state(0.6, &[0.5, 0.4, 0.2]);
        let e = vec![
            est(&[0.8, 0.1, 0.1], 0.2),
            est(&[0.1, 0.1, 0.8], 0.7),
            est(&[0.2, 0.7, 0.1], 0.3),
            est(&[0.1, 0.3, 0.6], 0.4),
        ];
        let perm = [2, 0, 3, 1];
        let permuted: Vec<_> = perm.iter().map(|&i| e[i].clone()).collect();
        let a = select_batch(&e, &s, &GateConfig::default()).unwrap();
        let b = select_batch(&permuted, &s, &GateConfig::default()).unwrap();
        let mut mapped: Vec<usize> = b.selected.iter().map(|&j| perm[j]).collect();
        mapped.sort_unstable();
        assert_eq!(mapped, a.selected);
        assert_eq!(a.class_counts, b.class_counts);
    }

    #[test]
    fn ranking_keeps_top_fraction() {
        let s = state(0.9, &[0.5, 0.5]);
        let cfg = GateConfig {
            score_ranking: true,
            score_beta: 1.0,
            score_keep_fraction: 0.5,
            uncertainty_threshold: Some(1.0),
            ..Default::default()
        };
        let e = vec![
            est(&[0.95, 0.05], 0.3),
            est(&[0.99, 0.01], 0.05),
            est(&[0.97, 0.03], 0.1),
            est(&[0.5, 0.5], 1.0),
        ];
        let out = select_batch(&e, &s, &cfg).unwrap();
        assert_eq!(out.selected, vec![1, 2]);
        assert_eq!(out.rejections.ranked_out, 1);
    }

    #[test]
    fn merge_partitions_by_origin() {
        let ds = generate_synthetic(&DatasetSpec::default()).unwrap();
        let data = ds.training_data();
        let n_lab = ds.labeled().len();

        let empty = SelectionOutcome::empty(ds.unlabeled_features().rows(), 5);
        let view = merge_selected(data, &empty).unwrap();
        assert_eq!(view.len(), n_lab);
        assert!(view.entries().iter().all(|e| e.origin == Origin::Labeled));

        let outcome = SelectionOutcome {
            selected: vec![3, 10, 42],
            pseudo_labels: vec![0, 4, 2],
            selected_uncertainty: vec![0.1, 0.2, 0.3],
            ..SelectionOutcome::empty(ds.unlabeled_features().rows(), 5)
        };
        let view = merge_selected(data, &outcome).unwrap();
        assert_eq!(view.len(), n_lab + 3);
        assert_eq!(view.pseudo_count(), 3);
        let labeled = view.entries().iter().filter(|e| e.origin == Origin::Labeled).count();
        assert_eq!(labeled + view.pseudo_count(), view.len());
        assert_eq!(view.features(n_lab + 1), ds.unlabeled_features().row(10));
        assert_eq!(view.entry(n_lab + 1).target, 4);

        let bad = SelectionOutcome {
            selected: vec![100_000],
            pseudo_labels: vec![0],
            selected_uncertainty: vec![0.0],
            ..SelectionOutcome::empty(0, 5)
        };
        assert!(matches!(merge_selected(data, &bad), Err(Error::Index(_))));
    }
}
