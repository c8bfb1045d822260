//! Small deterministic models and data used by the verification suite,
//! tests and benchmarks.

use crate::config::{ModelConfig, Variant};
use crate::data::{prepare, Batch, NormStats, RawSeries, SplitSpec, Splits};
use crate::gradcheck::ModelLoss;
use crate::error::Result;
use crate::model::M3Net;

/// Full architecture at toy size: N=5, g=2, K=2, D=16, L=4.
pub fn toy_config(variant: Variant, seed: u64) -> ModelConfig {
    ModelConfig {
        nodes: 5,
        input_len: 4,
        horizon: 3,
        channels: 1,
        d_feature: 4,
        d_node: 4,
        d_tod: 4,
        d_dow: 4,
        steps_per_day: 288,
        groups: 2,
        experts: 2,
        layers: 3,
        variant,
        seed,
        ..Default::default()
    }
}

/// Synthetic recording for `cfg.nodes` sensors split 6:2:2.
pub fn toy_splits(cfg: &ModelConfig, frames: usize, seed: u64) -> Result<Splits> {
    let series = RawSeries::synthetic(cfg.nodes, frames, 5, seed);
    prepare(&series, cfg.input_len, cfg.horizon, &SplitSpec::default())
}

/// A model in double precision plus a fixed batch of `batch` windows.
pub fn toy_problem(cfg: &ModelConfig, batch: usize, seed: u64) -> Result<(M3Net<f64>, Batch<f64>, Splits)> {
    let splits = toy_splits(cfg, 400, seed)?;
    let model = M3Net::new(cfg.clone())?;
    let step = (splits.train.len() / batch.max(1)).max(1);
    let indices: Vec<usize> = (0..batch).map(|i| (i * step) % splits.train.len()).collect();
    let b = splits.train.batch(&indices);
    Ok((model, b, splits))
}

/// Gradient-check objective on the normalized scale: targets are z-scored
/// with the training statistics and the loss uses unit statistics, so the
/// loss is O(1) and finite-difference round-off stays far below tolerance.
pub fn toy_grad_problem(cfg: &ModelConfig, batch: usize, seed: u64) -> Result<ModelLoss> {
    let (model, mut b, splits) = toy_problem(cfg, batch, seed)?;
    let (mean, std) = (splits.stats.mean[0], splits.stats.std[0]);
    b.y = b.y.map(|v| (v - mean) / std);
    let unit = NormStats {
        mean: vec![0.0],
        std: vec![1.0],
    };
    let mut obj = ModelLoss::new(model, b, unit);
    obj.mask_zeros = false;
    Ok(obj)
}
