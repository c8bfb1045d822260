//! Affine maps and two-layer perceptrons with explicit backward passes.

use crate::error::Result;
use crate::ops;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// `y = x · W + b` with `W: d_in×d_out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_in: usize,
        d_out: usize,
    ) -> Result<Self> {
        Ok(Self {
            w: store.add_uniform(&format!("{prefix}.w"), &[d_in, d_out], d_in)?,
            b: store.add_uniform(&format!("{prefix}.b"), &[d_out], d_in)?,
        })
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut y = ops::matmul(x, store.value(self.w))?;
        ops::add_row_bias(&mut y, store.value(self.b))?;
        Ok(y)
    }

    /// Accumulates weight and bias gradients; returns `dx` when requested.
    pub fn backward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        need_dx: bool,
    ) -> Result<Option<Tensor<T>>> {
        let dw = ops::matmul_tn(x, dy)?;
        store.accumulate(self.w, &dw)?;
        store.accumulate(self.b, &ops::col_sum(dy))?;
        if need_dx {
            Ok(Some(ops::matmul_nt(dy, store.value(self.w))?))
        } else {
            Ok(None)
        }
    }
}

/// `fc2(relu(fc1(x)))`, width-preserving inside the M3 blocks.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct MlpCache<T> {
    z1: Tensor<T>,
    a1: Tensor<T>,
}

impl Mlp {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, d: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{prefix}.fc1"), d, d)?,
            fc2: Linear::new(store, &format!("{prefix}.fc2"), d, d)?,
        })
    }

    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
    ) -> Result<(Tensor<T>, MlpCache<T>)> {
        let z1 = self.fc1.forward(store, x)?;
        let a1 = ops::relu(&z1);
        let y = self.fc2.forward(store, &a1)?;
        Ok((y, MlpCache { z1, a1 }))
    }

    pub fn backward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        x: &Tensor<T>,
        cache: &MlpCache<T>,
        dy: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let da1 = self
            .fc2
            .backward(store, &cache.a1, dy, true)?
            .expect("requested dx");
        let dz1 = ops::relu_backward(&cache.z1, &da1)?;
        Ok(self.fc1.backward(store, x, &dz1, true)?.expect("requested dx"))
    }
}
