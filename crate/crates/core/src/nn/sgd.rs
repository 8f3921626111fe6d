use serde::{Deserialize, Serialize};

use super::matrix::DenseMatrix;
use super::model::{check_targets, ForwardTrace, MlpModel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.03,
            momentum: 0.99,
            weight_decay: 0.0005,
            batch_size: 64,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "sgd.learning_rate = {} must be > 0",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "sgd.momentum = {} outside [0, 1)",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "sgd.weight_decay = {} must be >= 0",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("sgd.batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-layer parameter gradients, laid out like [`MlpModel`] layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<DenseMatrix>,
    pub biases: Vec<Vec<f64>>,
}

/// Backpropagate `dlogits` (∂loss/∂logits) through the recorded pass.
pub fn backward(model: &MlpModel, trace: &ForwardTrace, dlogits: &DenseMatrix) -> Result<Gradients> {
    check_trace(model, trace)?;
    let n = trace.batch_rows();
    if dlogits.shape() != (n, model.num_classes()) {
        return Err(Error::State(format!(
            "logit gradient {:?} does not match trace batch of {n}",
            dlogits.shape()
        )));
    }
    let layers = model.layers();
    let mut weights = vec![DenseMatrix::zeros(0, 0); layers.len()];
    let mut biases = vec![Vec::new(); layers.len()];

    let mut delta = dlogits.clone();
    for l in (0..layers.len()).rev() {
        weights[l] = trace.activations[l].t_matmul(&delta)?;
        biases[l] = column_sums(&delta);
        if l == 0 {
            break;
        }
        // Back through layer l's input: the output of hidden layer l.
        let mut upstream = delta.matmul_t(&layers[l].weights)?;
        if let Some(mask) = &trace.masks[l - 1] {
            upstream
                .values_mut()
                .iter_mut()
                .zip(mask.values())
                .for_each(|(g, m)| *g *= m);
        }
        upstream
            .values_mut()
            .iter_mut()
            .zip(trace.pre_activations[l - 1].values())
            .for_each(|(g, &z)| {
                if z <= 0.0 {
                    *g = 0.0;
                }
            });
        delta = upstream;
    }
    Ok(Gradients { weights, biases })
}

fn column_sums(m: &DenseMatrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for row in m.iter_rows() {
        out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
    }
    out
}

fn check_trace(model: &MlpModel, trace: &ForwardTrace) -> Result<()> {
    let sizes = model.layer_sizes();
    let hidden = sizes.len() - 2;
    let stale = |what: &str| Err(Error::State(format!("stale forward trace: {what}")));
    if trace.activations.len() != hidden + 1
        || trace.pre_activations.len() != hidden
        || trace.masks.len() != hidden
    {
        return stale("layer count differs from model");
    }
    let n = trace.batch_rows();
    for (l, a) in trace.activations.iter().enumerate() {
        if a.shape() != (n, sizes[l]) {
            return stale("activation shape differs from model");
        }
    }
    for (l, z) in trace.pre_activations.iter().enumerate() {
        if z.shape() != (n, sizes[l + 1]) {
            return stale("pre-activation shape differs from model");
        }
    }
    Ok(())
}

/// ∂/∂logits of `Σ_i coeff_i · (-ln softmax(z_i)[y_i])`, i.e.
/// `coeff_i · (p_i - onehot(y_i))`.
pub fn ce_logit_gradient(probs: &DenseMatrix, targets: &[usize], coeffs: &[f64]) -> Result<DenseMatrix> {
    if targets.len() != probs.rows() || coeffs.len() != probs.rows() {
        return Err(Error::Shape(format!(
            "{} targets / {} coefficients for {} rows",
            targets.len(),
            coeffs.len(),
            probs.rows()
        )));
    }
    let mut grad = probs.clone();
    for (i, (&y, &c)) in targets.iter().zip(coeffs).enumerate() {
        if y >= probs.cols() {
            return Err(Error::Index(format!("target {y} out of range")));
        }
        let row = grad.row_mut(i);
        if c == 0.0 {
            row.iter_mut().for_each(|v| *v = 0.0);
            continue;
        }
        row[y] -= 1.0;
        row.iter_mut().for_each(|v| *v *= c);
    }
    Ok(grad)
}

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v ← μ·v + (g + λ·θ)`, `θ ← θ − η·v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    config: SgdConfig,
    velocity_w: Vec<Vec<f64>>,
    velocity_b: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(config: SgdConfig, model: &MlpModel) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            velocity_w: model
                .layers()
                .iter()
                .map(|l| vec![0.0; l.weights.values().len()])
                .collect(),
            velocity_b: model.layers().iter().map(|l| vec![0.0; l.biases.len()]).collect(),
        })
    }

    pub fn config(&self) -> &SgdConfig {
        &self.config
    }

    /// Apply one update from precomputed gradients.
    pub fn apply(&mut self, model: &mut MlpModel, grads: &Gradients) -> Result<()> {
        let SgdConfig {
            learning_rate: lr,
            momentum: mu,
            weight_decay: wd,
            ..
        } = self.config;
        if grads.weights.len() != model.layers().len() || self.velocity_w.len() != model.layers().len() {
            return Err(Error::State("gradient layout does not match model".into()));
        }
        for (l, layer) in model.layers_mut().iter_mut().enumerate() {
            if grads.weights[l].shape() != layer.weights.shape()
                || grads.biases[l].len() != layer.biases.len()
            {
                return Err(Error::State(format!("gradient shape mismatch at layer {l}")));
            }
            step_params(layer.weights.values_mut(), grads.weights[l].values(), &mut self.velocity_w[l], lr, mu, wd);
            step_params(&mut layer.biases, &grads.biases[l], &mut self.velocity_b[l], lr, mu, wd);
        }
        if !model.is_finite() {
            return Err(Error::Numeric("non-finite parameter after update".into()));
        }
        Ok(())
    }

    /// Backpropagate `Σ_i coeff_i · CE_i` and take one step.
    pub fn step_weighted(
        &mut self,
        model: &mut MlpModel,
        trace: &ForwardTrace,
        probs: &DenseMatrix,
        targets: &[usize],
        coeffs: &[f64],
    ) -> Result<()> {
        let dlogits = ce_logit_gradient(probs, targets, coeffs)?;
        let grads = backward(model, trace, &dlogits)?;
        self.apply(model, &grads)
    }

    /// One step on the class-weighted cross-entropy of the gated rows,
    /// `(1/N) Σ_i θ_i · w[y_i] · CE_i` with `N` the batch size.
    #[allow(clippy::too_many_arguments)]
    pub fn train_step(
        &mut self,
        model: &mut MlpModel,
        trace: &ForwardTrace,
        probs: &DenseMatrix,
        targets: &[usize],
        class_weights: &[f64],
        gates: &[bool],
    ) -> Result<()> {
        check_targets(probs, targets, class_weights)?;
        if gates.len() != probs.rows() || trace.batch_rows() != probs.rows() {
            return Err(Error::State(format!(
                "{} gates / trace of {} rows for {} probability rows",
                gates.len(),
                trace.batch_rows(),
                probs.rows()
            )));
        }
        let n = probs.rows().max(1) as f64;
        let coeffs: Vec<f64> = targets
            .iter()
            .zip(gates)
            .map(|(&y, &g)| if g { class_weights[y] / n } else { 0.0 })
            .collect();
        self.step_weighted(model, trace, probs, targets, &coeffs)
    }
}

fn step_params(params: &mut [f64], grads: &[f64], velocity: &mut [f64], lr: f64, mu: f64, wd: f64) {
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        let d = if wd == 0.0 { g } else { g + wd * *p };
        *v = if mu == 0.0 { d } else { mu * *v + d };
        *p -= lr * *v;
    }
}
