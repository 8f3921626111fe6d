//! Ablation over the number of MC passes.
//!
//! Each row trains a full run with `mc.passes = T` and reports its final
//! test top-1. The `mc_std_error` column isolates Monte Carlo convergence:
//! it is measured on one shared reference model (a supervised-only run of
//! the same configuration, which never consumes `T`) so that differences
//! between the per-`T` models do not leak into it.

use std::time::Instant;

use crate::data::SemiDataset;
use crate::error::{Error, Result};
use crate::nn::{DenseMatrix, MlpModel};
use crate::report::SweepRow;
use crate::rng::{self, tag};
use crate::trainer::{evaluate, Mode, TrainConfig, Trainer};
use crate::uncertainty::{mc_estimate, McConfig};

pub const DEFAULT_PASSES: [usize; 4] = [2, 6, 10, 12];

/// Repeated MC evaluations used to measure the standard error.
pub const STD_ERROR_REPEATS: usize = 20;

/// Empirical standard error of the `passes`-pass MC mean: the sample std of
/// `μ` across `repeats` independent MC evaluations, averaged over samples
/// and classes.
pub fn mc_std_error(
    model: &MlpModel,
    batch: &DenseMatrix,
    passes: usize,
    dropout_rate: f64,
    seed: u64,
    repeats: usize,
) -> Result<f64> {
    if repeats < 2 {
        return Err(Error::Config("standard error needs at least 2 repeats".into()));
    }
    let runs: Vec<Vec<Vec<f64>>> = (0..repeats as u64)
        .map(|r| {
            let cfg = McConfig {
                passes,
                dropout_rate,
                base_seed: rng::substream(seed, &[tag::MC, passes as u64, r]),
            };
            mc_estimate(model, batch, &cfg).map(|es| es.into_iter().map(|e| e.mean_probs).collect())
        })
        .collect::<Result<_>>()?;
    let (n, c) = (batch.rows(), model.num_classes());
    let mut total = 0.0;
    for i in 0..n {
        for k in 0..c {
            let mean = runs.iter().map(|run| run[i][k]).sum::<f64>() / repeats as f64;
            let ss = runs.iter().map(|run| (run[i][k] - mean).powi(2)).sum::<f64>();
            total += (ss / (repeats - 1) as f64).sqrt();
        }
    }
    Ok(total / (n * c) as f64)
}

/// Train one run per pass count, sequentially.
pub fn run_sweep(config: &TrainConfig, dataset: &SemiDataset, passes: &[usize]) -> Result<Vec<SweepRow>> {
    if passes.is_empty() || passes.contains(&0) {
        return Err(Error::Config("sweep.passes must be a non-empty list of positive integers".into()));
    }
    let reference = {
        let mut cfg = config.clone();
        cfg.mode = Mode::SupervisedOnly;
        let mut t = Trainer::new(cfg, dataset)?;
        t.run()?;
        t.into_state().model
    };
    let features = &dataset.test().features;

    let mut rows = Vec::with_capacity(passes.len());
    for &t in passes {
        let start = Instant::now();
        let mut cfg = config.clone();
        cfg.mc.passes = t;
        let mut trainer = Trainer::new(cfg.clone(), dataset)?;
        trainer.run()?;
        let top1 = evaluate(trainer.model(), dataset.test())?.metrics.top1;
        let se = mc_std_error(&reference, features, t, cfg.mc.dropout_rate, cfg.seed, STD_ERROR_REPEATS)?;
        rows.push(SweepRow {
            passes: t,
            top1,
            mc_std_error: Some(se),
            wall_time_s: start.elapsed().as_secs_f64(),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn std_error_vanishes_without_dropout() {
        let model = MlpModel::init(&[2, 8, 3], 1).unwrap();
        let x = DenseMatrix::from_rows(&[[0.1, 0.2], [1.0, -1.0]]).unwrap();
        assert_eq!(mc_std_error(&model, &x, 4, 0.0, 0, 5).unwrap(), 0.0);
    }

    #[test]
    fn std_error_shrinks_with_passes() {
        let model = MlpModel::init(&[2, 16, 3], 1).unwrap();
        let x = DenseMatrix::from_rows(&[[0.1, 0.2], [1.0, -1.0], [-0.5, 0.3]]).unwrap();
        let a = mc_std_error(&model, &x, 2, 0.5, 0, 50).unwrap();
        let b = mc_std_error(&model, &x, 32, 0.5, 0, 50).unwrap();
        assert!(b < a / 2.0, "{a} {b}");
    }

    #[test]
    fn too_few_repeats() {
        let model = MlpModel::init(&[2, 3], 1).unwrap();
        let x = DenseMatrix::zeros(1, 2);
        assert!(mc_std_error(&model, &x, 2, 0.5, 0, 1).is_err());
    }
}
