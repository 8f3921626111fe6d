//! The training loop.
//!
//! Each epoch: train on the current view (labeled + last epoch's
//! pseudo-labels), MC-estimate every unlabeled sample, select a fresh
//! pseudo-label set, fold the epoch's statistics into the threshold state,
//! evaluate on the test split and append a log record. The view is rebuilt
//! from scratch every epoch.

mod checkpoint;

use serde::{Deserialize, Serialize};

use crate::data::{EvaluationAccess, LabeledSplit, SemiDataset, TrainingData};
use crate::error::{Error, Result};
use crate::losses::{batch_coefficients, batch_loss, BatchRow, LossComponents, LossConfig, LossWeights};
use crate::metrics::{compute_classification, pseudo_label_quality, ClassificationMetrics, ConfusionMatrix};
use crate::nn::{softmax, DenseMatrix, Dropout, MlpModel, Sgd, SgdConfig};
use crate::rng::{self, tag};
use crate::selector::{merge_selected, select_batch, select_fixed, GateConfig, RejectionCounts, SelectionOutcome, TrainingView};
use crate::threshold::{EpochObservation, ThresholdConfig, ThresholdState};
use crate::uncertainty::{argmax, mc_estimate_keyed, McConfig, UncertaintyEstimate};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Udts,
    FixedBaseline,
    SupervisedOnly,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "udts" => Ok(Mode::Udts),
            "fixed_baseline" | "fixed-baseline" => Ok(Mode::FixedBaseline),
            "supervised_only" | "supervised-only" => Ok(Mode::SupervisedOnly),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Udts => "udts",
            Mode::FixedBaseline => "fixed_baseline",
            Mode::SupervisedOnly => "supervised_only",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden layer widths; input and output sizes come from the dataset.
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: vec![64, 64] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// SGD steps per epoch; `None` is one pass over the current view.
    pub steps_per_epoch: Option<usize>,
    pub seed: u64,
    pub mode: Mode,
    pub fixed_confidence_threshold: f64,
    /// Std of Gaussian noise added to training features; 0 disables it.
    pub feature_jitter: f64,
    pub model: ModelConfig,
    pub sgd: SgdConfig,
    pub mc: McConfig,
    pub gate: GateConfig,
    pub loss: LossConfig,
    pub threshold: ThresholdConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            steps_per_epoch: None,
            seed: 0,
            mode: Mode::Udts,
            fixed_confidence_threshold: 0.95,
            feature_jitter: 0.0,
            model: ModelConfig::default(),
            sgd: SgdConfig::default(),
            mc: McConfig::default(),
            gate: GateConfig::default(),
            loss: LossConfig::default(),
            threshold: ThresholdConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("train.epochs must be >= 1".into()));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::Config("train.steps_per_epoch must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.fixed_confidence_threshold) {
            return Err(Error::Config(format!(
                "train.fixed_confidence_threshold = {} outside [0, 1]",
                self.fixed_confidence_threshold
            )));
        }
        if !(self.feature_jitter >= 0.0 && self.feature_jitter.is_finite()) {
            return Err(Error::Config(format!("train.feature_jitter = {} must be >= 0", self.feature_jitter)));
        }
        if self.model.hidden.contains(&0) {
            return Err(Error::Config("model.hidden widths must be >= 1".into()));
        }
        self.sgd.validate()?;
        self.mc.validate()?;
        self.gate.validate()?;
        self.loss.validate()?;
        self.threshold.validate()
    }

    fn layer_sizes(&self, dim: usize, classes: usize) -> Vec<usize> {
        std::iter::once(dim)
            .chain(self.model.hidden.iter().copied())
            .chain(std::iter::once(classes))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub epoch: usize,
    pub loss_supervised: f64,
    pub loss_unlabeled: Option<f64>,
    pub loss_uncertainty: Option<f64>,
    pub loss_total: f64,
    pub global_tau: f64,
    pub class_tau: Vec<f64>,
    pub learning_state: Vec<f64>,
    pub uncertainty_state: Vec<f64>,
    pub class_unc_norm: Vec<f64>,
    pub selected_total: Option<usize>,
    pub selected_per_class: Option<Vec<usize>>,
    pub selected_mean_uncertainty: Vec<Option<f64>>,
    pub rejections: Option<RejectionCounts>,
    pub pseudo_precision: Option<f64>,
    pub pseudo_recall: Option<f64>,
    pub pseudo_precision_per_class: Vec<Option<f64>>,
    pub top1: f64,
    pub top5: f64,
    pub macro_recall: Option<f64>,
    pub per_class_recall: Vec<Option<f64>>,
    /// Mean normalised uncertainty of unlabeled samples predicted as each class.
    pub mean_uncertainty_per_class: Vec<Option<f64>>,
}

/// Everything needed to continue a run bit-identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    /// Completed epochs.
    pub epoch: usize,
    pub seed: u64,
    pub model: MlpModel,
    pub optimizer: Sgd,
    pub thresholds: ThresholdState,
    /// Pseudo-labels feeding the next epoch's training view.
    pub selection: Option<SelectionOutcome>,
    pub records: Vec<TrainLogRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub metrics: ClassificationMetrics,
}

/// Deterministic (dropout off) evaluation on a labeled split.
pub fn evaluate(model: &MlpModel, test: &LabeledSplit) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::Shape("empty test split".into()));
    }
    let probs = model.predict_probs(&test.features)?;
    let preds: Vec<usize> = probs.iter_rows().map(|r| argmax(r).0).collect();
    let (confusion, metrics) = compute_classification(&preds, &test.labels, &probs)?;
    Ok(Evaluation { confusion, metrics })
}

pub struct Trainer<'a> {
    config: TrainConfig,
    data: TrainingData<'a>,
    eval: Option<EvaluationAccess<'a>>,
    test: &'a LabeledSplit,
    weights: LossWeights,
    state: RunState,
    observations: Vec<EpochObservation>,
    last_estimates: Option<Vec<UncertaintyEstimate>>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, dataset: &'a SemiDataset) -> Result<Self> {
        config.validate()?;
        let data = dataset.training_data();
        let labeled_counts = data.labeled_counts();
        let sizes = config.layer_sizes(dataset.dim(), dataset.num_classes());
        let model = MlpModel::init(&sizes, rng::substream(config.seed, &[tag::INIT]))?
            .with_dropout_rate(config.mc.dropout_rate)?;
        let optimizer = Sgd::new(config.sgd.clone(), &model)?;
        let mut thresholds = ThresholdState::new(&labeled_counts, &config.threshold)?;
        thresholds.derive()?;
        let state = RunState {
            epoch: 0,
            seed: config.seed,
            model,
            optimizer,
            thresholds,
            selection: None,
            records: Vec::new(),
        };
        Self::resume(config, dataset, state)
    }

    /// Continue from a saved state. The state must come from a run of the
    /// same configuration on the same dataset.
    pub fn resume(config: TrainConfig, dataset: &'a SemiDataset, state: RunState) -> Result<Self> {
        config.validate()?;
        let data = dataset.training_data();
        let expected = config.layer_sizes(dataset.dim(), dataset.num_classes());
        if state.model.layer_sizes() != expected.as_slice() {
            return Err(Error::Config(format!(
                "model layers {:?} do not match dataset/config {:?}",
                state.model.layer_sizes(),
                expected
            )));
        }
        if state.thresholds.num_classes() != dataset.num_classes() {
            return Err(Error::Config("threshold state class count differs from dataset".into()));
        }
        let labeled_counts = data.labeled_counts();
        if labeled_counts.contains(&0) {
            return Err(Error::Config("every class needs at least one labeled sample".into()));
        }
        let weights = LossWeights::resolve(&config.loss, &labeled_counts)?;
        Ok(Self {
            eval: dataset.evaluation().ok(),
            test: dataset.test(),
            data,
            weights,
            config,
            state,
            observations: Vec::new(),
            last_estimates: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn state(&self) -> &RunState {
        &self.state
    }

    pub fn into_state(self) -> RunState {
        self.state
    }

    pub fn model(&self) -> &MlpModel {
        &self.state.model
    }

    pub fn records(&self) -> &[TrainLogRecord] {
        &self.state.records
    }

    pub fn loss_weights(&self) -> &LossWeights {
        &self.weights
    }

    /// Observations folded into the threshold state by this trainer, in
    /// epoch order (not persisted in checkpoints).
    pub fn observations(&self) -> &[EpochObservation] {
        &self.observations
    }

    pub fn last_estimates(&self) -> Option<&[UncertaintyEstimate]> {
        self.last_estimates.as_deref()
    }

    /// Run epochs until `config.epochs` have completed.
    pub fn run(&mut self) -> Result<()> {
        while self.state.epoch < self.config.epochs {
            self.run_epoch()?;
        }
        Ok(())
    }

    /// Run one epoch. On a numeric failure the state is rolled back and the
    /// error carries the last good state.
    pub fn run_epoch(&mut self) -> Result<&TrainLogRecord> {
        let snapshot = self.state.clone();
        match self.epoch_inner() {
            Ok(()) => Ok(self.state.records.last().expect("record appended")),
            Err(e @ Error::Numeric(_)) => {
                self.state = snapshot.clone();
                Err(Error::Diverged {
                    epoch: snapshot.epoch + 1,
                    reason: e.to_string(),
                    last_good: Box::new(snapshot),
                })
            }
            Err(e) => {
                self.state = snapshot;
                Err(e)
            }
        }
    }

    fn epoch_inner(&mut self) -> Result<()> {
        let epoch = self.state.epoch + 1;
        let losses = self.train_on_view(epoch)?;

        let unlabeled_active = self.config.mode != Mode::SupervisedOnly && self.data.unlabeled.rows() > 0;
        let mut selection_record = None;
        let mut mean_unc = vec![None; self.data.classes];
        if unlabeled_active {
            let estimates = self.estimate_unlabeled(epoch)?;
            let outcome = match self.config.mode {
                Mode::FixedBaseline => select_fixed(&estimates, self.config.fixed_confidence_threshold)?,
                _ => select_batch(&estimates, &self.state.thresholds, &self.config.gate)?,
            };
            let quality = self.eval.map(|a| pseudo_label_quality(&outcome, &a)).transpose()?;

            let obs = EpochObservation::from_estimates(&estimates, self.config.gate.uncertainty_metric);
            mean_unc = mean_by_class(&obs.predicted, &obs.normalized_uncertainty, self.data.classes);
            let mut next = self.state.thresholds.update(&obs)?;
            next.derive()?;
            self.state.thresholds = next;
            self.observations.push(obs);
            self.last_estimates = Some(estimates);
            selection_record = Some((outcome.clone(), quality));
            self.state.selection = Some(outcome);
        }

        let test = evaluate(&self.state.model, self.test)?;
        let th = &self.state.thresholds;
        let derived = th.derived()?;
        let classes = self.data.classes;
        let (sel, quality) = match selection_record {
            Some((s, q)) => (Some(s), q),
            None => (None, None),
        };
        let record = TrainLogRecord {
            epoch,
            loss_supervised: losses.supervised,
            loss_unlabeled: unlabeled_active.then_some(losses.unlabeled),
            loss_uncertainty: unlabeled_active.then_some(losses.uncertainty),
            loss_total: losses.total,
            global_tau: th.global_tau,
            class_tau: derived.class_tau.clone(),
            learning_state: th.learning_state.clone(),
            uncertainty_state: th.uncertainty_state.clone(),
            class_unc_norm: derived.class_unc_norm.clone(),
            selected_total: sel.as_ref().map(|s| s.len()),
            selected_per_class: sel.as_ref().map(|s| s.class_counts.clone()),
            selected_mean_uncertainty: sel
                .as_ref()
                .map_or_else(|| vec![None; classes], |s| s.class_mean_uncertainty.clone()),
            rejections: sel.as_ref().map(|s| s.rejections.clone()),
            pseudo_precision: quality.as_ref().and_then(|q| q.precision),
            pseudo_recall: quality.as_ref().map(|q| q.recall),
            pseudo_precision_per_class: quality
                .as_ref()
                .map_or_else(|| vec![None; classes], |q| q.per_class_precision.clone()),
            top1: test.metrics.top1,
            top5: test.metrics.top5,
            macro_recall: test.metrics.macro_recall,
            per_class_recall: test.metrics.per_class_recall,
            mean_uncertainty_per_class: mean_unc,
        };
        self.state.records.push(record);
        self.state.epoch = epoch;
        Ok(())
    }

    fn current_view(&self) -> Result<TrainingView<'a>> {
        match (&self.state.selection, self.config.mode) {
            (Some(sel), Mode::Udts | Mode::FixedBaseline) => merge_selected(self.data, sel),
            _ => Ok(TrainingView::labeled_only(self.data)),
        }
    }

    fn train_on_view(&mut self, epoch: usize) -> Result<LossComponents> {
        let view = self.current_view()?;
        let seed = self.config.seed;
        let e = epoch as u64;
        let mut order: Vec<usize> = (0..view.len()).collect();
        order.shuffle(&mut rng::rng_for(seed, &[tag::SHUFFLE, e]));

        let b = self.config.sgd.batch_size;
        let batches: Vec<Vec<usize>> = match self.config.steps_per_epoch {
            None => order.chunks(b).map(<[usize]>::to_vec).collect(),
            Some(steps) => (0..steps)
                .map(|s| (0..b.min(order.len())).map(|j| order[(s * b + j) % order.len()]).collect())
                .collect(),
        };

        let dim = self.data.labeled.features.cols();
        let mut sum = LossComponents::default();
        for (step, batch) in batches.iter().enumerate() {
            let mut x = DenseMatrix::zeros(batch.len(), dim);
            for (r, &i) in batch.iter().enumerate() {
                x.row_mut(r).copy_from_slice(view.features(i));
            }
            if self.config.feature_jitter > 0.0 {
                let mut jitter = rng::rng_for(seed, &[tag::JITTER, e, step as u64]);
                for v in x.values_mut() {
                    *v += self.config.feature_jitter * jitter.sample::<f64, _>(StandardNormal);
                }
            }
            let rows: Vec<BatchRow> = batch
                .iter()
                .map(|&i| {
                    let en = view.entry(i);
                    BatchRow {
                        origin: en.origin,
                        target: en.target,
                        uncertainty: en.uncertainty,
                    }
                })
                .collect();
            let stream = rng::substream(seed, &[tag::TRAIN_DROPOUT, e, step as u64]);
            let (logits, trace) = self.state.model.forward(&x, Dropout::Stream(stream))?;
            let probs = softmax(&logits)?;
            let parts = batch_loss(&probs, &rows, &self.weights)?;
            if !parts.total.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at epoch {epoch}, step {step}")));
            }
            let coeffs = batch_coefficients(&rows, &self.weights);
            let targets: Vec<usize> = rows.iter().map(|r| r.target).collect();
            self.state
                .optimizer
                .step_weighted(&mut self.state.model, &trace, &probs, &targets, &coeffs)?;
            sum.supervised += parts.supervised;
            sum.unlabeled += parts.unlabeled;
            sum.uncertainty += parts.uncertainty;
            sum.total += parts.total;
        }
        let n = batches.len().max(1) as f64;
        Ok(LossComponents {
            supervised: sum.supervised / n,
            unlabeled: sum.unlabeled / n,
            uncertainty: sum.uncertainty / n,
            total: sum.total / n,
        })
    }

    fn estimate_unlabeled(&self, epoch: usize) -> Result<Vec<UncertaintyEstimate>> {
        let unlabeled = self.data.unlabeled;
        let keys: Vec<u64> = (0..unlabeled.rows() as u64).collect();
        let cfg = McConfig {
            base_seed: rng::substream(self.config.seed, &[tag::MC, self.config.mc.base_seed, epoch as u64]),
            ..self.config.mc.clone()
        };
        mc_estimate_keyed(&self.state.model, unlabeled, &keys, &cfg)
    }
}

fn mean_by_class(classes_of: &[usize], values: &[f64], classes: usize) -> Vec<Option<f64>> {
    let mut sum = vec![0.0; classes];
    let mut n = vec![0usize; classes];
    for (&c, &v) in classes_of.iter().zip(values) {
        sum[c] += v;
        n[c] += 1;
    }
    sum.iter().zip(&n).map(|(&s, &k)| (k > 0).then(|| s / k as f64)).collect()
}

/// Train from scratch for `config.epochs` epochs.
pub fn run(config: TrainConfig, dataset: &SemiDataset) -> Result<(MlpModel, Vec<TrainLogRecord>)> {
    let mut trainer = Trainer::new(config, dataset)?;
    trainer.run()?;
    let state = trainer.into_state();
    Ok((state.model, state.records))
}
