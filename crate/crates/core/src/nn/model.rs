use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::matrix::DenseMatrix;
use crate::error::{Error, Result};
use crate::rng;

/// Dropout rate used by hidden layers when none is given.
pub const DEFAULT_DROPOUT_RATE: f64 = 0.5;

const CHECKPOINT_FORMAT: &str = "udts-model";
const CHECKPOINT_VERSION: u32 = 1;

/// One affine layer `z = a·W + b`, with `W` stored `fan_in × fan_out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weights: DenseMatrix,
    pub biases: Vec<f64>,
}

/// Feed-forward classifier: ReLU hidden layers, each followed by inverted
/// dropout, and a linear output layer producing logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    layer_sizes: Vec<usize>,
    layers: Vec<DenseLayer>,
    dropout_rates: Vec<f64>,
}

/// How dropout masks are drawn in a forward pass.
#[derive(Debug, Clone, Copy)]
pub enum Dropout<'a> {
    /// Deterministic pass; no masks.
    Off,
    /// Row `i` of the batch draws its masks from substream `(stream, i)`.
    Stream(u64),
    /// Row `i` draws from substream `(stream, keys[i])`; lets callers tie
    /// masks to a sample identity instead of its position in the batch.
    Keyed { stream: u64, keys: &'a [u64] },
}

/// Intermediate values of a forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `activations[0]` is the input batch; `activations[l]` is the
    /// post-dropout output of hidden layer `l` (1-based).
    pub activations: Vec<DenseMatrix>,
    /// Pre-activations of the hidden layers.
    pub pre_activations: Vec<DenseMatrix>,
    /// Per hidden layer mask with entries in `{0, 1/(1-p)}`; `None` when
    /// the layer ran without dropout.
    pub masks: Vec<Option<DenseMatrix>>,
}

impl ForwardTrace {
    pub fn batch_rows(&self) -> usize {
        self.activations[0].rows()
    }
}

#[derive(Serialize, Deserialize)]
struct ModelCheckpoint {
    format: String,
    version: u32,
    model: MlpModel,
}

impl MlpModel {
    /// Initialise weights from `N(0, 1/fan_in)` and zero biases, with every
    /// hidden layer at [`DEFAULT_DROPOUT_RATE`].
    pub fn init(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::Config(format!(
                "a model needs at least 2 layer sizes, got {}",
                layer_sizes.len()
            )));
        }
        if let Some(pos) = layer_sizes.iter().position(|&s| s == 0) {
            return Err(Error::Config(format!("layer size {pos} is zero")));
        }
        let mut rng = rng::rng_for(seed, &[rng::tag::INIT]);
        let layers = layer_sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let scale = 1.0 / (fan_in as f64).sqrt();
                let values = (0..fan_in * fan_out)
                    .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                DenseLayer {
                    weights: DenseMatrix::from_vec(fan_in, fan_out, values)
                        .expect("sized by construction"),
                    biases: vec![0.0; fan_out],
                }
            })
            .collect();
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            layers,
            dropout_rates: vec![DEFAULT_DROPOUT_RATE; layer_sizes.len() - 2],
        })
    }

    /// Set the same dropout rate on every hidden layer.
    pub fn with_dropout_rate(mut self, rate: f64) -> Result<Self> {
        self.set_dropout_rate(rate)?;
        Ok(self)
    }

    pub fn set_dropout_rate(&mut self, rate: f64) -> Result<()> {
        check_rate(rate)?;
        self.dropout_rates.iter_mut().for_each(|r| *r = rate);
        Ok(())
    }

    pub fn set_dropout_rates(&mut self, rates: &[f64]) -> Result<()> {
        if rates.len() != self.dropout_rates.len() {
            return Err(Error::Config(format!(
                "{} dropout rates for {} hidden layers",
                rates.len(),
                self.dropout_rates.len()
            )));
        }
        for &r in rates {
            check_rate(r)?;
        }
        self.dropout_rates.copy_from_slice(rates);
        Ok(())
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn dropout_rates(&self) -> &[f64] {
        &self.dropout_rates
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_sizes.last().expect("validated at init")
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.is_finite() && l.biases.iter().all(|b| b.is_finite()))
    }

    /// Forward pass returning logits and the trace needed by backprop.
    pub fn forward(&self, batch: &DenseMatrix, dropout: Dropout<'_>) -> Result<(DenseMatrix, ForwardTrace)> {
        if batch.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "batch has {} features, model expects {}",
                batch.cols(),
                self.input_dim()
            )));
        }
        if let Dropout::Keyed { keys, .. } = dropout {
            if keys.len() != batch.rows() {
                return Err(Error::Shape(format!(
                    "{} dropout keys for {} rows",
                    keys.len(),
                    batch.rows()
                )));
            }
        }
        let masks = self.draw_masks(batch.rows(), dropout);

        let hidden = self.layers.len() - 1;
        let mut activations = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(hidden);
        activations.push(batch.clone());

        for (l, layer) in self.layers[..hidden].iter().enumerate() {
            let z = affine(activations.last().unwrap(), layer)?;
            let mut a = z.clone();
            a.values_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            if let Some(mask) = &masks[l] {
                a.values_mut()
                    .iter_mut()
                    .zip(mask.values())
                    .for_each(|(v, m)| *v *= m);
            }
            pre_activations.push(z);
            activations.push(a);
        }
        let logits = affine(activations.last().unwrap(), &self.layers[hidden])?;
        Ok((
            logits,
            ForwardTrace {
                activations,
                pre_activations,
                masks,
            },
        ))
    }

    /// Deterministic class probabilities.
    pub fn predict_probs(&self, batch: &DenseMatrix) -> Result<DenseMatrix> {
        let (logits, _) = self.forward(batch, Dropout::Off)?;
        softmax(&logits)
    }

    fn draw_masks(&self, rows: usize, dropout: Dropout<'_>) -> Vec<Option<DenseMatrix>> {
        let hidden_sizes = &self.layer_sizes[1..self.layer_sizes.len() - 1];
        let stream = match dropout {
            Dropout::Off => return vec![None; hidden_sizes.len()],
            Dropout::Stream(s) | Dropout::Keyed { stream: s, .. } => s,
        };
        let mut masks: Vec<Option<DenseMatrix>> = hidden_sizes
            .iter()
            .zip(&self.dropout_rates)
            .map(|(&n, &p)| (p > 0.0).then(|| DenseMatrix::zeros(rows, n)))
            .collect();
        if masks.iter().all(Option::is_none) {
            return masks;
        }
        for r in 0..rows {
            let key = match dropout {
                Dropout::Keyed { keys, .. } => keys[r],
                _ => r as u64,
            };
            let mut rng = rng::rng_for(stream, &[key]);
            for (mask, &p) in masks.iter_mut().zip(&self.dropout_rates) {
                let Some(mask) = mask else { continue };
                let scale = 1.0 / (1.0 - p);
                for m in mask.row_mut(r) {
                    *m = if rng.random::<f64>() >= p { scale } else { 0.0 };
                }
            }
        }
        masks
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = ModelCheckpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            model: self.clone(),
        };
        let text = serde_json::to_string(&ckpt).map_err(|e| Error::Checkpoint(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let ckpt: ModelCheckpoint =
            serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported model checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        ckpt.model.validate()?;
        Ok(ckpt.model)
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Checkpoint(m));
        if self.layer_sizes.len() < 2 || self.layers.len() != self.layer_sizes.len() - 1 {
            return bad("layer count does not match layer sizes".into());
        }
        if self.dropout_rates.len() != self.layer_sizes.len() - 2 {
            return bad("dropout rate count does not match hidden layers".into());
        }
        for (l, (layer, w)) in self.layers.iter().zip(self.layer_sizes.windows(2)).enumerate() {
            if layer.weights.shape() != (w[0], w[1]) || layer.biases.len() != w[1] {
                return bad(format!("layer {l} has inconsistent shape"));
            }
        }
        if !self.is_finite() {
            return bad("non-finite parameter".into());
        }
        if self.dropout_rates.iter().any(|&r| check_rate(r).is_err()) {
            return bad("dropout rate out of range".into());
        }
        Ok(())
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")))
    }
}

fn affine(input: &DenseMatrix, layer: &DenseLayer) -> Result<DenseMatrix> {
    let mut z = input.matmul(&layer.weights)?;
    for r in 0..z.rows() {
        z.row_mut(r)
            .iter_mut()
            .zip(&layer.biases)
            .for_each(|(v, b)| *v += b);
    }
    Ok(z)
}

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: &DenseMatrix) -> Result<DenseMatrix> {
    if !logits.is_finite() {
        return Err(Error::Numeric("softmax of non-finite logits".into()));
    }
    let mut out = logits.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

/// Floor applied to probabilities before taking logs.
pub const LOG_FLOOR: f64 = 1e-12;

/// `-ln max(p, 1e-12)`.
#[inline]
pub fn nll(p: f64) -> f64 {
    -p.max(LOG_FLOOR).ln()
}

/// `(1/N) Σ_i w[y_i] · (-ln p[i, y_i])`.
pub fn weighted_cross_entropy(probs: &DenseMatrix, targets: &[usize], class_weights: &[f64]) -> Result<f64> {
    check_targets(probs, targets, class_weights)?;
    if targets.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = targets
        .iter()
        .enumerate()
        .map(|(i, &y)| class_weights[y] * nll(probs.get(i, y)))
        .sum();
    Ok(total / targets.len() as f64)
}

pub(crate) fn check_targets(probs: &DenseMatrix, targets: &[usize], class_weights: &[f64]) -> Result<()> {
    if targets.len() != probs.rows() {
        return Err(Error::Shape(format!(
            "{} targets for {} probability rows",
            targets.len(),
            probs.rows()
        )));
    }
    if class_weights.len() != probs.cols() {
        return Err(Error::Shape(format!(
            "{} class weights for {} classes",
            class_weights.len(),
            probs.cols()
        )));
    }
    if let Some(&y) = targets.iter().find(|&&y| y >= probs.cols()) {
        return Err(Error::Index(format!("target {y} out of range for {} classes", probs.cols())));
    }
    if class_weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
        return Err(Error::Config("class weights must be positive and finite".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch() -> DenseMatrix {
        DenseMatrix::from_rows(&[[0.5, -1.0], [1.5, 2.0], [-0.3, 0.7]]).unwrap()
    }

    #[test]
    fn init_is_reproducible_and_shaped() {
        let a = MlpModel::init(&[2, 4, 3], 7).unwrap();
        let b = MlpModel::init(&[2, 4, 3], 7).unwrap();
        assert_eq!(a, b);
        let bits = |m: &MlpModel| -> Vec<u64> {
            m.layers().iter().flat_map(|l| l.weights.values().iter().map(|v| v.to_bits())).collect()
        };
        assert_eq!(bits(&a), bits(&b));

        let m = MlpModel::init(&[2, 8, 5], 1).unwrap();
        assert_eq!(m.layers()[0].weights.shape(), (2, 8));
        assert_eq!(m.layers()[1].weights.shape(), (8, 5));
        assert_eq!(m.layers()[0].biases.len(), 8);
        assert_eq!(m.layers()[1].biases.len(), 5);
        assert_eq!(m.dropout_rates(), &[0.5]);
    }

    #[test]
    fn degenerate_layer_sizes_rejected() {
        assert!(matches!(MlpModel::init(&[2], 0), Err(Error::Config(_))));
        assert!(matches!(MlpModel::init(&[], 0), Err(Error::Config(_))));
        assert!(matches!(MlpModel::init(&[2, 0, 3], 0), Err(Error::Config(_))));
    }

    #[test]
    fn deterministic_pass_repeats() {
        let m = MlpModel::init(&[2, 6, 3], 3).unwrap();
        let (a, _) = m.forward(&batch(), Dropout::Off).unwrap();
        let (b, _) = m.forward(&batch(), Dropout::Off).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), (3, 3));
    }

    #[test]
    fn zero_rate_dropout_matches_inference() {
        let m = MlpModel::init(&[2, 6, 6, 3], 3).unwrap().with_dropout_rate(0.0).unwrap();
        let (a, _) = m.forward(&batch(), Dropout::Off).unwrap();
        let (b, _) = m.forward(&batch(), Dropout::Stream(99)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn masks_take_inverted_values() {
        let m = MlpModel::init(&[2, 16, 3], 3).unwrap().with_dropout_rate(0.25).unwrap();
        let (_, trace) = m.forward(&batch(), Dropout::Stream(5)).unwrap();
        let mask = trace.masks[0].as_ref().unwrap();
        assert!(mask.values().iter().all(|&v| v == 0.0 || v == 1.0 / 0.75));
    }

    #[test]
    fn keyed_masks_follow_keys_not_positions() {
        let m = MlpModel::init(&[2, 16, 3], 3).unwrap();
        let x = batch();
        let (full, _) = m
            .forward(&x, Dropout::Keyed { stream: 11, keys: &[10, 20, 30] })
            .unwrap();
        let single = x.select_rows(&[1]).unwrap();
        let (one, _) = m
            .forward(&single, Dropout::Keyed { stream: 11, keys: &[20] })
            .unwrap();
        assert_eq!(full.row(1), one.row(0));
    }

    #[test]
    fn inverted_dropout_preserves_mean() {
        let m = MlpModel::init(&[2, 8, 3], 21).unwrap();
        let x = DenseMatrix::from_rows(&[[0.8, -0.4]]).unwrap();
        let (_, clean) = m.forward(&x, Dropout::Off).unwrap();
        let reference = clean.activations[1].row(0).to_vec();
        let draws = 10_000;
        let mut mean = vec![0.0; reference.len()];
        for s in 0..draws {
            let (_, t) = m.forward(&x, Dropout::Stream(s)).unwrap();
            mean.iter_mut().zip(t.activations[1].row(0)).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|v| *v /= draws as f64);
        for (m, r) in mean.iter().zip(&reference) {
            if *r > 0.0 {
                assert!((m - r).abs() <= 0.05 * r, "mean {m} vs {r}");
            } else {
                assert_eq!(*m, 0.0);
            }
        }
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&DenseMatrix::from_rows(&[[0.0, 0.0, 0.0]]).unwrap()).unwrap();
        p.row(0).iter().for_each(|v| assert!((v - 1.0 / 3.0).abs() < 1e-15));

        let p = softmax(&DenseMatrix::from_rows(&[[1000.0, 0.0, 0.0]]).unwrap()).unwrap();
        assert!((p.get(0, 0) - 1.0).abs() < 1e-12 && p.is_finite());

        let p = softmax(&DenseMatrix::from_rows(&[[1.0, 2.0, 3.0]]).unwrap()).unwrap();
        // exp(k)/(e + e² + e³) evaluated directly.
        let denom = 1f64.exp() + 2f64.exp() + 3f64.exp();
        for (k, expected) in [0.09003, 0.24473, 0.66524].iter().enumerate() {
            let direct = ((k + 1) as f64).exp() / denom;
            assert!((p.get(0, k) - direct).abs() < 1e-15);
            assert!((p.get(0, k) - expected).abs() < 5e-6);
        }

        let bad = DenseMatrix::from_rows(&[[f64::NAN, 0.0]]).unwrap();
        assert!(matches!(softmax(&bad), Err(Error::Numeric(_))));
    }

    #[test]
    fn weighted_ce_examples() {
        let onehot = DenseMatrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(weighted_cross_entropy(&onehot, &[0, 1], &[1.0, 1.0]).unwrap(), 0.0);

        let uniform = DenseMatrix::from_vec(3, 10, vec![0.1; 30]).unwrap();
        let ce = weighted_cross_entropy(&uniform, &[0, 4, 9], &[1.0; 10]).unwrap();
        assert!((ce - 10f64.ln()).abs() < 1e-12);

        let p = DenseMatrix::from_rows(&[[0.7, 0.2, 0.1]]).unwrap();
        let ce = weighted_cross_entropy(&p, &[0], &[2.0, 1.0, 1.0]).unwrap();
        assert!((ce - 0.71335).abs() < 1e-5);

        assert!(matches!(
            weighted_cross_entropy(&p, &[3], &[1.0; 3]),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let m = MlpModel::init(&[3, 7, 5, 4], 123).unwrap().with_dropout_rate(0.3).unwrap();
        m.save(&path).unwrap();
        let back = MlpModel::load(&path).unwrap();
        assert_eq!(m, back);

        std::fs::write(&path, r#"{"format":"udts-model","version":99,"model":null}"#).unwrap();
        assert!(MlpModel::load(&path).is_err());
    }
}
