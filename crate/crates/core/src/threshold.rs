//! Dynamic per-class thresholds.
//!
//! The state tracks an EMA of the mean top confidence (`τ_t`), an EMA of the
//! probability mass per class (the learning state `p̃_t(c)`), and an EMA of
//! the mean normalised uncertainty of samples predicted as each class
//! (`ũ_t(c)`). Per-class confidence thresholds are
//! `τ_t(c) = MaxNorm(p̃_t)(c) · τ_t`; per-class uncertainty norms are
//! `u_t(c) = MaxNorm(ũ_t)(c)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::uncertainty::{UncertaintyEstimate, UncertaintyMetric};

pub const DEFAULT_EMA: f64 = 0.999;

/// How labeled class counts seed the initial learning state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImbalanceReading {
    /// `γ_c = n_c / n_head`, in `(0, 1]`.
    #[default]
    ClassOverHead,
    /// `γ_c = n_head / n_c`, clamped so `p̃_0(c) ≤ 1`.
    HeadOverClass,
    /// `γ_c = 1`: ignore the imbalance.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThresholdConfig {
    /// EMA coefficient `λ_ema`.
    pub ema: f64,
    pub imbalance_reading: ImbalanceReading,
    /// Overrides `τ_0 = 1/C`.
    pub initial_tau: Option<f64>,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        Self {
            ema: DEFAULT_EMA,
            imbalance_reading: ImbalanceReading::default(),
            initial_tau: None,
        }
    }
}

impl ThresholdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ema) {
            return Err(Error::Config(format!("threshold.ema = {} outside [0, 1]", self.ema)));
        }
        if let Some(t) = self.initial_tau {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("threshold.initial_tau = {t} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivedThresholds {
    pub epoch: u64,
    pub class_tau: Vec<f64>,
    pub class_unc_norm: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdState {
    pub epoch: u64,
    pub global_tau: f64,
    pub learning_state: Vec<f64>,
    pub uncertainty_state: Vec<f64>,
    pub ema: f64,
    derived: Option<DerivedThresholds>,
}

/// Per-sample statistics of one epoch's unlabeled pass.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochObservation {
    pub confidences: Vec<f64>,
    pub normalized_uncertainty: Vec<f64>,
    pub predicted: Vec<usize>,
    /// `q_b`: mean class probabilities per sample.
    pub class_probs: Vec<Vec<f64>>,
}

impl EpochObservation {
    pub fn from_estimates(estimates: &[UncertaintyEstimate], metric: UncertaintyMetric) -> Self {
        Self {
            confidences: estimates.iter().map(|e| e.confidence).collect(),
            normalized_uncertainty: estimates.iter().map(|e| e.normalized_uncertainty(metric)).collect(),
            predicted: estimates.iter().map(|e| e.predicted_class).collect(),
            class_probs: estimates.iter().map(|e| e.mean_probs.clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.confidences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.confidences.is_empty()
    }

    fn validate(&self, classes: usize) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return Err(Error::Domain("empty epoch observation".into()));
        }
        if self.normalized_uncertainty.len() != n || self.predicted.len() != n || self.class_probs.len() != n {
            return Err(Error::Shape("observation fields differ in length".into()));
        }
        let unit = |v: &f64| (0.0..=1.0).contains(v);
        if !self.confidences.iter().all(unit) || !self.normalized_uncertainty.iter().all(unit) {
            return Err(Error::Domain("observation values must lie in [0, 1]".into()));
        }
        if self.predicted.iter().any(|&c| c >= classes) || self.class_probs.iter().any(|q| q.len() != classes) {
            return Err(Error::Shape("observation class count differs from state".into()));
        }
        Ok(())
    }
}

/// Divide by the maximum entry.
pub fn max_norm(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::Degenerate("max_norm of an empty vector".into()));
    }
    if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Domain("max_norm needs finite non-negative entries".into()));
    }
    let max = values.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return Err(Error::Degenerate("max_norm of an all-zero vector".into()));
    }
    Ok(values.iter().map(|v| v / max).collect())
}

/// Initial state with the default imbalance reading.
pub fn init_state(labeled_counts: &[usize], ema: f64) -> Result<ThresholdState> {
    ThresholdState::new(
        labeled_counts,
        &ThresholdConfig {
            ema,
            ..Default::default()
        },
    )
}

impl ThresholdState {
    /// `p̃_0(c) = γ_c / C`, `τ_0 = 1/C`, `ũ_0(c) = 1`.
    pub fn new(labeled_counts: &[usize], cfg: &ThresholdConfig) -> Result<Self> {
        cfg.validate()?;
        let c = labeled_counts.len();
        if c == 0 {
            return Err(Error::Config("no classes".into()));
        }
        if let Some(k) = labeled_counts.iter().position(|&n| n == 0) {
            return Err(Error::Config(format!("class {k} has no labeled samples")));
        }
        let head = labeled_counts[0] as f64;
        let inv_c = 1.0 / c as f64;
        let learning_state = labeled_counts
            .iter()
            .map(|&n| {
                let gamma = match cfg.imbalance_reading {
                    ImbalanceReading::ClassOverHead => n as f64 / head,
                    ImbalanceReading::HeadOverClass => head / n as f64,
                    ImbalanceReading::Uniform => 1.0,
                };
                (gamma * inv_c).min(1.0)
            })
            .collect();
        Ok(Self {
            epoch: 0,
            global_tau: cfg.initial_tau.unwrap_or(inv_c),
            learning_state,
            uncertainty_state: vec![1.0; c],
            ema: cfg.ema,
            derived: None,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.learning_state.len()
    }

    /// Fold one epoch's observation into the EMAs and advance the epoch.
    /// Derived thresholds are invalidated.
    pub fn update(&self, obs: &EpochObservation) -> Result<Self> {
        let c = self.num_classes();
        obs.validate(c)?;
        let lambda = self.ema;
        let blend = |prev: f64, batch: f64| lambda * prev + (1.0 - lambda) * batch;
        let n = obs.len() as f64;

        let mean_conf = obs.confidences.iter().sum::<f64>() / n;
        let mut mass = vec![0.0; c];
        for q in &obs.class_probs {
            mass.iter_mut().zip(q).for_each(|(m, v)| *m += v);
        }
        let mut unc_sum = vec![0.0; c];
        let mut unc_n = vec![0usize; c];
        for (&k, &u) in obs.predicted.iter().zip(&obs.normalized_uncertainty) {
            unc_sum[k] += u;
            unc_n[k] += 1;
        }

        Ok(Self {
            epoch: self.epoch + 1,
            global_tau: blend(self.global_tau, mean_conf).clamp(0.0, 1.0),
            learning_state: self
                .learning_state
                .iter()
                .zip(&mass)
                .map(|(&p, &m)| blend(p, m / n).clamp(0.0, 1.0))
                .collect(),
            uncertainty_state: self
                .uncertainty_state
                .iter()
                .zip(unc_sum.iter().zip(&unc_n))
                .map(|(&u, (&s, &k))| if k == 0 { u } else { blend(u, s / k as f64) })
                .collect(),
            ema: self.ema,
            derived: None,
        })
    }

    /// Compute and cache `τ_t(c)` and `u_t(c)` for the current epoch.
    pub fn derive(&mut self) -> Result<&DerivedThresholds> {
        let class_tau = max_norm(&self.learning_state)?
            .into_iter()
            .map(|v| v * self.global_tau)
            .collect();
        let class_unc_norm = max_norm(&self.uncertainty_state)?;
        Ok(self.derived.insert(DerivedThresholds {
            epoch: self.epoch,
            class_tau,
            class_unc_norm,
        }))
    }

    /// Derived thresholds, if they were computed for the current epoch.
    pub fn derived(&self) -> Result<&DerivedThresholds> {
        match &self.derived {
            Some(d) if d.epoch == self.epoch => Ok(d),
            Some(d) => Err(Error::State(format!(
                "thresholds derived at epoch {} but state is at epoch {}",
                d.epoch, self.epoch
            ))),
            None => Err(Error::State(format!("thresholds not derived for epoch {}", self.epoch))),
        }
    }
}

/// Free-function form of [`ThresholdState::update`].
pub fn update_state(state: &ThresholdState, obs: &EpochObservation) -> Result<ThresholdState> {
    state.update(obs)
}

/// Free-function form of [`ThresholdState::derive`].
pub fn derive_thresholds(state: &mut ThresholdState) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = state.derive()?;
    Ok((d.class_tau.clone(), d.class_unc_norm.clone()))
}
