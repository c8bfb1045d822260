//! Masked-MAE training with Adam, step-decayed learning rate, gradient
//! clipping and best-validation model selection.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::take;
use crate::cost;
use crate::data::{Batch, NormStats, SampleSet, Splits};
use crate::error::{Error, Result};
use crate::metrics::{MetricCell, MetricsAccumulator, MetricsReport};
use crate::model::M3Net;
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub decay_step: usize,
    pub decay_gamma: f64,
    pub patience: usize,
    pub seed: u64,
    pub mape_mask_threshold: f64,
    /// Global-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Exclude entries whose target is exactly zero from the loss.
    pub mask_zero_targets: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.002,
            batch_size: 64,
            max_epochs: 150,
            decay_step: 30,
            decay_gamma: 0.5,
            patience: 30,
            seed: 0,
            mape_mask_threshold: 1.0,
            clip_norm: Some(5.0),
            mask_zero_targets: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::Config("lr0 must be positive".into()));
        }
        if !(self.decay_gamma > 0.0 && self.decay_gamma <= 1.0) {
            return Err(Error::Config("decay_gamma must be in (0, 1]".into()));
        }
        if self.patience == 0 || self.batch_size == 0 || self.decay_step == 0 {
            return Err(Error::Config(
                "patience, batch_size and decay_step must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        [
            ("lr0", format!("{:?}", self.lr0)),
            ("batch_size", self.batch_size.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("decay_step", self.decay_step.to_string()),
            ("decay_gamma", format!("{:?}", self.decay_gamma)),
            ("patience", self.patience.to_string()),
            ("train_seed", self.seed.to_string()),
            ("mape_mask_threshold", format!("{:?}", self.mape_mask_threshold)),
            (
                "clip_norm",
                self.clip_norm.map_or("off".to_string(), |c| format!("{c:?}")),
            ),
            ("mask_zero_targets", self.mask_zero_targets.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn apply(&mut self, map: &BTreeMap<String, String>) -> Result<()> {
        take(map, "lr0", &mut self.lr0)?;
        take(map, "batch_size", &mut self.batch_size)?;
        take(map, "max_epochs", &mut self.max_epochs)?;
        take(map, "decay_step", &mut self.decay_step)?;
        take(map, "decay_gamma", &mut self.decay_gamma)?;
        take(map, "patience", &mut self.patience)?;
        take(map, "train_seed", &mut self.seed)?;
        take(map, "mape_mask_threshold", &mut self.mape_mask_threshold)?;
        take(map, "mask_zero_targets", &mut self.mask_zero_targets)?;
        if let Some(raw) = map.get("clip_norm") {
            self.clip_norm = match raw.as_str() {
                "off" | "none" => None,
                v => Some(
                    v.parse()
                        .map_err(|_| Error::Config(format!("cannot parse `clip_norm` from `{v}`")))?,
                ),
            };
        }
        Ok(())
    }
}

/// `lr0 · gamma^⌊epoch / decay_step⌋`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.decay_gamma.powi((epoch / cfg.decay_step) as i32)
}

#[derive(Debug, Clone)]
pub struct LossValue<T> {
    pub value: f64,
    /// Number of entries that contributed; zero means everything was masked.
    pub count: usize,
    /// Gradient with respect to `pred`.
    pub grad: Tensor<T>,
}

/// Mean absolute error over unmasked entries. With `mask_zeros`, entries
/// whose target is exactly zero are treated as missing.
pub fn masked_mae_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, mask_zeros: bool) -> Result<LossValue<T>> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape {
            op: "masked_mae_loss",
            left: pred.shape().to_vec(),
            right: target.shape().to_vec(),
        });
    }
    let keep = |y: T| !(mask_zeros && y == T::ZERO);
    let count = target.data().iter().filter(|&&y| keep(y)).count();
    let mut grad = Tensor::zeros(pred.shape());
    if count == 0 {
        log::warn!("masked_mae_loss: every entry is masked; loss defined as 0");
        return Ok(LossValue {
            value: 0.0,
            count,
            grad,
        });
    }
    let inv = T::from_f64(1.0 / count as f64);
    let mut sum = 0.0;
    for ((g, &p), &y) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        if !keep(y) {
            continue;
        }
        let e = p - y;
        sum += e.to_f64().abs();
        *g = if e > T::ZERO {
            inv
        } else if e < T::ZERO {
            -inv
        } else {
            T::ZERO
        };
    }
    Ok(LossValue {
        value: sum / count as f64,
        count,
        grad,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    /// Bias-corrected update of every parameter, then zeroes the gradients.
    /// Refuses to touch anything if a gradient is non-finite.
    pub fn step<T: Real>(&self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if let Some(p) = store.iter().find(|p| !p.grad.all_finite()) {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - self.beta1), T::from_f64(1.0 - self.beta2));
        let eps = T::from_f64(self.eps);
        for p in store.iter_mut() {
            p.step_count += 1;
            let t = p.step_count as i32;
            let c1 = T::from_f64(1.0 - self.beta1.powi(t));
            let c2 = T::from_f64(1.0 - self.beta2.powi(t));
            let lr = T::from_f64(lr);
            let value = p.value.data_mut();
            let grad = p.grad.data_mut();
            let m = p.adam_m.data_mut();
            let v = p.adam_v.data_mut();
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + one_b1 * g;
                v[i] = b2 * v[i] + one_b2 * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                grad[i] = T::ZERO;
            }
        }
        Ok(())
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = store.global_grad_norm();
    if norm > max_norm {
        let s = T::from_f64(max_norm / norm);
        for p in store.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

/// Loss on one batch and gradients accumulated into the model's store.
pub fn loss_and_backward<T: Real>(
    model: &mut M3Net<T>,
    batch: &Batch<T>,
    stats: &NormStats,
    mask_zeros: bool,
) -> Result<f64> {
    let (pred, cache) = model.forward_batch(&batch.x, &batch.tod, &batch.dow)?;
    let pred_raw = stats.denormalize_flow(&pred);
    let target = batch.y.clone().reshape(pred.shape())?;
    let loss = masked_mae_loss(&pred_raw, &target, mask_zeros)?;
    // d(pred_raw)/d(pred) = std on the flow channel
    let std = T::from_f64(stats.std[0]);
    let dpred = loss.grad.map(|g| g * std);
    model.backward(&cache, &dpred)?;
    Ok(loss.value)
}

/// One optimizer step. Returns the batch loss before the update.
pub fn train_step<T: Real>(
    model: &mut M3Net<T>,
    batch: &Batch<T>,
    stats: &NormStats,
    lr: f64,
    cfg: &TrainConfig,
    adam: &Adam,
) -> Result<f64> {
    model.store_mut().zero_grads();
    let loss = loss_and_backward(model, batch, stats, cfg.mask_zero_targets)?;
    if let Some(max) = cfg.clip_norm {
        clip_grad_norm(model.store_mut(), max);
    }
    adam.step(model.store_mut(), lr)?;
    Ok(loss)
}

/// Raw-scale metrics of `model` on `samples`, iterated in order.
pub fn evaluate<T: Real>(
    model: &M3Net<T>,
    samples: &SampleSet,
    stats: &NormStats,
    batch_size: usize,
    mape_threshold: f64,
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let horizon = model.config().horizon;
    let mut acc = MetricsAccumulator::new(horizon, mape_threshold);
    for indices in samples.batch_order(batch_size, None) {
        let batch: Batch<T> = samples.batch(&indices);
        let (pred, _) = model.forward_batch(&batch.x, &batch.tod, &batch.dow)?;
        let pred_raw = stats.denormalize_flow(&pred);
        acc.push(&pred_raw, &batch.y);
    }
    Ok(acc.report())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_mae: f64,
    pub val_rmse: f64,
    pub val_mape: f64,
    pub epoch_seconds: f64,
    pub peak_bytes: u64,
}

/// Deterministic part of an [`EpochRecord`].
#[derive(Serialize)]
struct HistoryLine {
    epoch: usize,
    lr: f64,
    train_loss: f64,
    val_mae: f64,
    val_rmse: f64,
    val_mape: f64,
}

#[derive(Serialize)]
struct CostLine {
    epoch: usize,
    epoch_seconds: f64,
    peak_bytes: u64,
}

impl EpochRecord {
    /// JSON line without wall-clock or memory fields; identical across
    /// reruns with the same seed, config and data.
    pub fn history_line(&self) -> String {
        serde_json::to_string(&HistoryLine {
            epoch: self.epoch,
            lr: self.lr,
            train_loss: self.train_loss,
            val_mae: self.val_mae,
            val_rmse: self.val_rmse,
            val_mape: self.val_mape,
        })
        .expect("plain struct serializes")
    }

    pub fn cost_line(&self) -> String {
        serde_json::to_string(&CostLine {
            epoch: self.epoch,
            epoch_seconds: self.epoch_seconds,
            peak_bytes: self.peak_bytes,
        })
        .expect("plain struct serializes")
    }

    /// Every field, including costs.
    pub fn full_line(&self) -> String {
        serde_json::to_string(self).expect("plain struct serializes")
    }

    pub fn val(&self) -> MetricCell {
        MetricCell {
            mae: self.val_mae,
            rmse: self.val_rmse,
            mape: self.val_mape,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Zero-based epoch whose parameters the model now holds.
    pub best_epoch: usize,
    pub best_val: MetricCell,
    pub history: Vec<EpochRecord>,
    pub steps: usize,
}

/// Trains with the configured step decay. On return the model holds the
/// parameters with the lowest validation Avg. MAE.
pub fn train<T: Real>(model: &mut M3Net<T>, data: &Splits, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, data, cfg, |e| lr_at(e, cfg), |_| {})
}

pub fn train_with<T: Real>(
    model: &mut M3Net<T>,
    data: &Splits,
    cfg: &TrainConfig,
    schedule: impl Fn(usize) -> f64,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::EmptySplit {
            split: "train",
            frames: 0,
            needed: model.config().input_len + model.config().horizon,
        });
    }
    if data.val.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let adam = Adam::default();
    let mut history = Vec::new();
    let mut best: Option<(usize, MetricCell, Vec<Tensor<T>>)> = None;
    let mut stale = 0;
    let mut steps = 0;

    for epoch in 0..cfg.max_epochs {
        let started = Instant::now();
        let lr = schedule(epoch);
        let mut loss_sum = 0.0;
        let order = data.train.batch_order(cfg.batch_size, Some((cfg.seed, epoch as u64)));
        for (bi, indices) in order.iter().enumerate() {
            let batch: Batch<T> = data.train.batch(indices);
            let loss = train_step(model, &batch, &data.stats, lr, cfg, &adam)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    what: "training loss",
                    epoch,
                    batch: bi,
                });
            }
            loss_sum += loss;
            steps += 1;
        }
        let report = evaluate(model, &data.val, &data.stats, cfg.batch_size, cfg.mape_mask_threshold)?;
        let val = report.average;
        if !val.mae.is_finite() {
            return Err(Error::NonFiniteLoss {
                what: "validation MAE",
                epoch,
                batch: 0,
            });
        }
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / order.len() as f64,
            val_mae: val.mae,
            val_rmse: val.rmse,
            val_mape: val.mape,
            epoch_seconds: started.elapsed().as_secs_f64(),
            peak_bytes: cost::peak_resident_bytes().unwrap_or(0),
        };
        log::debug!(
            "epoch {epoch}: lr {lr:.2e} train {:.4} val MAE {:.4} RMSE {:.4} ({:.1}s)",
            record.train_loss,
            val.mae,
            val.rmse,
            record.epoch_seconds
        );
        on_epoch(&record);
        history.push(record);

        if best.as_ref().is_none_or(|(_, b, _)| val.mae < b.mae) {
            best = Some((epoch, val, model.store().snapshot()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }

    let (best_epoch, best_val, values) = best.ok_or_else(|| Error::Config("max_epochs is 0".into()))?;
    model.store_mut().restore(&values)?;
    Ok(TrainOutcome {
        best_epoch,
        best_val,
        history,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_examples() {
        let t = |v: &[f64]| Tensor::<f64>::new(&[v.len()], v.to_vec()).unwrap();
        let l = masked_mae_loss(&t(&[10.0, 20.0]), &t(&[12.0, 16.0]), false).unwrap();
        assert_eq!(l.value, 3.0);
        assert_eq!(l.grad.data(), &[-0.5, 0.5]);

        let l = masked_mae_loss(&t(&[3.0, 4.0]), &t(&[3.0, 4.0]), true).unwrap();
        assert_eq!(l.value, 0.0);
        assert_eq!(l.grad.data(), &[0.0, 0.0]);

        let l = masked_mae_loss(&t(&[5.0, 13.0]), &t(&[0.0, 10.0]), true).unwrap();
        assert_eq!(l.value, 3.0);
        assert_eq!(l.grad.data(), &[0.0, 1.0]);

        let l = masked_mae_loss(&t(&[5.0, 13.0]), &t(&[0.0, 0.0]), true).unwrap();
        assert_eq!((l.value, l.count), (0.0, 0));
    }

    #[test]
    fn schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 0.002);
        assert_eq!(lr_at(29, &cfg), 0.002);
        assert_eq!(lr_at(30, &cfg), 0.001);
        assert_eq!(lr_at(65, &cfg), 0.0005);
        let flat = TrainConfig {
            decay_gamma: 1.0,
            ..cfg
        };
        assert!((0..200).all(|e| lr_at(e, &flat) == 0.002));
    }

    #[test]
    fn adam_first_step_is_about_lr() {
        let mut store = ParamStore::<f64>::new(0);
        let id = store.insert("w", Tensor::zeros(&[1])).unwrap();
        store.grad_mut(id).fill(1.0);
        Adam::default().step(&mut store, 0.002).unwrap();
        let w = store.value(id).data()[0];
        assert!((w + 0.002).abs() < 1e-10, "{w}");
        assert_eq!(store.grad(id).data(), &[0.0]);
        assert_eq!(store.param(id).step_count, 1);
    }

    #[test]
    fn adam_zero_gradient_leaves_value() {
        let mut store = ParamStore::<f64>::new(0);
        let id = store.insert("w", Tensor::full(&[3], 0.7)).unwrap();
        for _ in 0..10 {
            Adam::default().step(&mut store, 0.01).unwrap();
        }
        assert_eq!(store.value(id).data(), &[0.7, 0.7, 0.7]);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut store = ParamStore::<f32>::new(0);
        let id = store.insert("layer0.w", Tensor::zeros(&[2])).unwrap();
        store.grad_mut(id).data_mut()[1] = f32::INFINITY;
        let err = Adam::default().step(&mut store, 0.01).unwrap_err();
        assert!(err.to_string().contains("layer0.w"));
        assert_eq!(store.value(id).data(), &[0.0, 0.0]);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut store = ParamStore::<f64>::new(0);
        let id = store.insert("w", Tensor::zeros(&[2])).unwrap();
        store.grad_mut(id).data_mut().copy_from_slice(&[30.0, 40.0]);
        assert_eq!(clip_grad_norm(&mut store, 5.0), 50.0);
        assert!((store.global_grad_norm() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn config_round_trip() {
        let cfg = TrainConfig {
            clip_norm: None,
            lr0: 0.01,
            ..Default::default()
        };
        let map = cfg.entries().into_iter().collect();
        let mut back = TrainConfig::default();
        back.apply(&map).unwrap();
        assert_eq!(back, cfg);
        assert!(TrainConfig {
            decay_gamma: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
