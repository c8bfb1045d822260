//! Central finite-difference checks of analytic gradients.

use std::fmt;

use crate::data::{Batch, NormStats};
use crate::error::Result;
use crate::model::M3Net;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::trainer::{loss_and_backward, masked_mae_loss};

/// A scalar function of a parameter store with an analytic gradient.
pub trait Objective {
    fn params(&self) -> &ParamStore<f64>;
    fn params_mut(&mut self) -> &mut ParamStore<f64>;
    fn value(&self) -> Result<f64>;
    /// Writes the gradient at the current point into the store's
    /// accumulators, which are zero on entry.
    fn gradient(&mut self) -> Result<()>;
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Lower bound on the relative-error denominator. Entries whose gradient
    /// is below it are compared in absolute terms, where central differences
    /// in f64 carry round-off of order `1e-16 * |f| / eps`.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub elements: usize,
    pub max_rel_err: f64,
    /// `(analytic, numeric)` at the worst element.
    pub worst: (f64, f64),
    pub non_finite: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| !p.non_finite && p.max_rel_err <= self.tol)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params
            .iter()
            .filter(|p| p.non_finite || p.max_rel_err > self.tol)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.params {
            let status = if p.non_finite {
                "NON-FINITE"
            } else if p.max_rel_err <= self.tol {
                "ok"
            } else {
                "FAIL"
            };
            writeln!(
                f,
                "{:<32} {:>6} elems  max rel err {:.3e}  {status}",
                p.name, p.elements, p.max_rel_err
            )?;
        }
        Ok(())
    }
}

pub fn grad_check<O: Objective>(obj: &mut O, opts: GradCheckOptions) -> Result<GradCheckReport> {
    assert!(
        (1e-7..=1e-3).contains(&opts.eps),
        "finite-difference step must be in [1e-7, 1e-3]"
    );
    obj.params_mut().zero_grads();
    obj.gradient()?;
    let analytic: Vec<Tensor<f64>> = obj.params().iter().map(|p| p.grad.clone()).collect();
    obj.params_mut().zero_grads();

    let ids: Vec<_> = obj.params().ids().collect();
    let mut params = Vec::with_capacity(ids.len());
    for (id, grad) in ids.into_iter().zip(&analytic) {
        let name = obj.params().param(id).name.clone();
        let mut check = ParamCheck {
            name,
            elements: grad.len(),
            max_rel_err: 0.0,
            worst: (0.0, 0.0),
            non_finite: false,
        };
        for i in 0..grad.len() {
            let orig = obj.params().value(id).data()[i];
            obj.params_mut().value_mut(id).data_mut()[i] = orig + opts.eps;
            let plus = obj.value()?;
            obj.params_mut().value_mut(id).data_mut()[i] = orig - opts.eps;
            let minus = obj.value()?;
            obj.params_mut().value_mut(id).data_mut()[i] = orig;

            let a = grad.data()[i];
            if !(plus.is_finite() && minus.is_finite() && a.is_finite()) {
                check.non_finite = true;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            if rel > check.max_rel_err {
                check.max_rel_err = rel;
                check.worst = (a, numeric);
            }
        }
        params.push(check);
    }
    Ok(GradCheckReport {
        params,
        tol: opts.tol,
    })
}

/// Objective from a pair of closures over a standalone store.
pub struct FnObjective<V, G> {
    pub store: ParamStore<f64>,
    pub value: V,
    pub grad: G,
}

impl<V, G> Objective for FnObjective<V, G>
where
    V: Fn(&ParamStore<f64>) -> Result<f64>,
    G: Fn(&mut ParamStore<f64>) -> Result<()>,
{
    fn params(&self) -> &ParamStore<f64> {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore<f64> {
        &mut self.store
    }

    fn value(&self) -> Result<f64> {
        (self.value)(&self.store)
    }

    fn gradient(&mut self) -> Result<()> {
        (self.grad)(&mut self.store)
    }
}

/// Masked-MAE loss of a model on one fixed batch.
#[derive(Debug, Clone)]
pub struct ModelLoss {
    pub model: M3Net<f64>,
    pub batch: Batch<f64>,
    pub stats: NormStats,
    pub mask_zeros: bool,
    /// Multiplies analytic gradients; anything but 1.0 corrupts them.
    pub grad_scale: f64,
}

impl ModelLoss {
    pub fn new(model: M3Net<f64>, batch: Batch<f64>, stats: NormStats) -> Self {
        Self {
            model,
            batch,
            stats,
            mask_zeros: true,
            grad_scale: 1.0,
        }
    }
}

impl Objective for ModelLoss {
    fn params(&self) -> &ParamStore<f64> {
        self.model.store()
    }

    fn params_mut(&mut self) -> &mut ParamStore<f64> {
        self.model.store_mut()
    }

    fn value(&self) -> Result<f64> {
        let (pred, _) = self
            .model
            .forward_batch(&self.batch.x, &self.batch.tod, &self.batch.dow)?;
        let pred_raw = self.stats.denormalize_flow(&pred);
        let target = self.batch.y.clone().reshape(pred.shape())?;
        Ok(masked_mae_loss(&pred_raw, &target, self.mask_zeros)?.value)
    }

    fn gradient(&mut self) -> Result<()> {
        loss_and_backward(&mut self.model, &self.batch, &self.stats, self.mask_zeros)?;
        if self.grad_scale != 1.0 {
            for p in self.model.store_mut().iter_mut() {
                p.grad.data_mut().iter_mut().for_each(|g| *g *= self.grad_scale);
            }
        }
        Ok(())
    }
}
