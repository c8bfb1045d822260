//! Fuses a history window with node, time-of-day and day-of-week embeddings.
//!
//! Each node's `L×C` history is flattened and projected to `d_feature`
//! columns. The node table row, the time-of-day row and the day-of-week row
//! follow in that order, giving `H` of width `d_feature + d_node + d_tod +
//! d_dow`. Temporal rows are looked up once per sample and repeated for every
//! node of that sample.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::ops;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone)]
pub struct Embedding {
    pub feature: Linear,
    pub node: ParamId,
    pub tod: ParamId,
    pub dow: ParamId,
    nodes: usize,
    input_len: usize,
    channels: usize,
    widths: [usize; 4],
}

#[derive(Debug, Clone)]
pub struct EmbeddingCache<T> {
    flat: Tensor<T>,
    tod: Vec<usize>,
    dow: Vec<usize>,
}

impl Embedding {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: &ModelConfig) -> Result<Self> {
        let flat = cfg.input_len * cfg.channels;
        let feature = Linear::new(store, "embed.feature", flat, cfg.d_feature)?;
        let node = store.add_uniform("embed.node", &[cfg.nodes, cfg.d_node], cfg.d_node)?;
        let tod = store.add_uniform("embed.tod", &[cfg.steps_per_day, cfg.d_tod], cfg.d_tod)?;
        let dow = store.add_uniform("embed.dow", &[cfg.days_per_week, cfg.d_dow], cfg.d_dow)?;
        Ok(Self {
            feature,
            node,
            tod,
            dow,
            nodes: cfg.nodes,
            input_len: cfg.input_len,
            channels: cfg.channels,
            widths: [cfg.d_feature, cfg.d_node, cfg.d_tod, cfg.d_dow],
        })
    }

    pub fn width(&self) -> usize {
        self.widths.iter().sum()
    }

    /// Per-node flattened history: `[B·N, L·C]` from `x: [B, L, N, C]`.
    fn flatten<T: Real>(&self, x: &Tensor<T>) -> Result<(usize, Tensor<T>)> {
        let (n, l, c) = (self.nodes, self.input_len, self.channels);
        let s = x.shape();
        if s.len() != 4 || s[1] != l || s[2] != n || s[3] != c {
            return Err(Error::Shape {
                op: "embed",
                left: s.to_vec(),
                right: vec![0, l, n, c],
            });
        }
        let b = s[0];
        let src = x.data();
        let mut flat = Vec::with_capacity(b * n * l * c);
        for bi in 0..b {
            for ni in 0..n {
                for li in 0..l {
                    let off = ((bi * l + li) * n + ni) * c;
                    flat.extend_from_slice(&src[off..off + c]);
                }
            }
        }
        Ok((b, Tensor::new(&[b * n, l * c], flat)?))
    }

    fn check_indices<T: Real>(
        &self,
        store: &ParamStore<T>,
        batch: usize,
        tod: &[usize],
        dow: &[usize],
    ) -> Result<()> {
        if tod.len() != batch || dow.len() != batch {
            return Err(Error::Shape {
                op: "embed indices",
                left: vec![batch],
                right: vec![tod.len(), dow.len()],
            });
        }
        let tod_size = store.value(self.tod).shape()[0];
        let dow_size = store.value(self.dow).shape()[0];
        if let Some(&index) = tod.iter().find(|&&i| i >= tod_size) {
            return Err(Error::Index {
                what: "time-of-day embedding",
                index,
                size: tod_size,
            });
        }
        if let Some(&index) = dow.iter().find(|&&i| i >= dow_size) {
            return Err(Error::Index {
                what: "day-of-week embedding",
                index,
                size: dow_size,
            });
        }
        Ok(())
    }

    /// `x: [B, L, N, C]`, one `(tod, dow)` pair per sample; returns `[B·N, D]`.
    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        tod: &[usize],
        dow: &[usize],
    ) -> Result<(Tensor<T>, EmbeddingCache<T>)> {
        let (b, flat) = self.flatten(x)?;
        self.check_indices(store, b, tod, dow)?;
        let n = self.nodes;
        let [_, ds, dd, dw] = self.widths;

        let feature = self.feature.forward(store, &flat)?;
        let node_table = store.value(self.node).data();
        let tod_table = store.value(self.tod).data();
        let dow_table = store.value(self.dow).data();
        let mut node = Vec::with_capacity(b * n * ds);
        let mut day = Vec::with_capacity(b * n * dd);
        let mut week = Vec::with_capacity(b * n * dw);
        for bi in 0..b {
            node.extend_from_slice(node_table);
            let d_row = &tod_table[tod[bi] * dd..(tod[bi] + 1) * dd];
            let w_row = &dow_table[dow[bi] * dw..(dow[bi] + 1) * dw];
            for _ in 0..n {
                day.extend_from_slice(d_row);
                week.extend_from_slice(w_row);
            }
        }
        let node = Tensor::new(&[b * n, ds], node)?;
        let day = Tensor::new(&[b * n, dd], day)?;
        let week = Tensor::new(&[b * n, dw], week)?;
        let h = ops::concat_last_dim(&[&feature, &node, &day, &week])?;
        Ok((
            h,
            EmbeddingCache {
                flat,
                tod: tod.to_vec(),
                dow: dow.to_vec(),
            },
        ))
    }

    /// Accumulates gradients; table gradients land only on looked-up rows.
    pub fn backward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        cache: &EmbeddingCache<T>,
        dh: &Tensor<T>,
    ) -> Result<()> {
        let parts = ops::split_last_dim(dh, &self.widths)?;
        self.feature.backward(store, &cache.flat, &parts[0], false)?;

        let n = self.nodes;
        let [_, ds, dd, dw] = self.widths;
        let b = cache.tod.len();

        let node_grad = store.grad_mut(self.node).data_mut();
        for block in parts[1].data().chunks(n * ds) {
            for (g, &v) in node_grad.iter_mut().zip(block) {
                *g += v;
            }
        }
        let tod_grad = store.grad_mut(self.tod).data_mut();
        for bi in 0..b {
            let row = &mut tod_grad[cache.tod[bi] * dd..(cache.tod[bi] + 1) * dd];
            for src in parts[2].data()[bi * n * dd..(bi + 1) * n * dd].chunks(dd) {
                for (g, &v) in row.iter_mut().zip(src) {
                    *g += v;
                }
            }
        }
        let dow_grad = store.grad_mut(self.dow).data_mut();
        for bi in 0..b {
            let row = &mut dow_grad[cache.dow[bi] * dw..(cache.dow[bi] + 1) * dw];
            for src in parts[3].data()[bi * n * dw..(bi + 1) * n * dw].chunks(dw) {
                for (g, &v) in row.iter_mut().zip(src) {
                    *g += v;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            nodes: 3,
            input_len: 4,
            channels: 2,
            d_feature: 2,
            d_node: 3,
            d_tod: 4,
            d_dow: 5,
            steps_per_day: 6,
            ..Default::default()
        }
    }

    fn input(cfg: &ModelConfig, b: usize, seed: u64) -> Tensor<f64> {
        crate::params::keyed_uniform(
            seed,
            "x",
            &[b, cfg.input_len, cfg.nodes, cfg.channels],
            1.0,
        )
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let cfg = small_cfg();
        let mut store = ParamStore::<f64>::new(0);
        let emb = Embedding::new(&mut store, &cfg).unwrap();
        for p in store.iter_mut() {
            p.value.fill(0.0);
        }
        let (h, _) = emb.forward(&store, &input(&cfg, 1, 1), &[2], &[3]).unwrap();
        assert_eq!(h.shape(), &[3, 14]);
        assert!(h.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn default_widths_give_128_columns() {
        let cfg = ModelConfig {
            nodes: 4,
            ..Default::default()
        };
        let mut store = ParamStore::<f32>::new(0);
        let emb = Embedding::new(&mut store, &cfg).unwrap();
        let x = Tensor::zeros(&[1, 12, 4, 1]);
        let (h, _) = emb.forward(&store, &x, &[0], &[0]).unwrap();
        assert_eq!(h.shape(), &[4, 128]);
    }

    #[test]
    fn tod_change_touches_only_tod_block() {
        let cfg = small_cfg();
        let mut store = ParamStore::<f64>::new(5);
        let emb = Embedding::new(&mut store, &cfg).unwrap();
        let x = input(&cfg, 1, 2);
        let (h1, _) = emb.forward(&store, &x, &[1], &[4]).unwrap();
        let (h2, _) = emb.forward(&store, &x, &[5], &[4]).unwrap();
        for i in 0..cfg.nodes {
            for j in 0..14 {
                let same = h1.get(&[i, j]) == h2.get(&[i, j]);
                assert_eq!(same, !(5..9).contains(&j), "row {i} col {j}");
            }
        }
    }

    #[test]
    fn out_of_range_index_reports_table_size() {
        let cfg = small_cfg();
        let mut store = ParamStore::<f64>::new(0);
        let emb = Embedding::new(&mut store, &cfg).unwrap();
        let err = emb.forward(&store, &input(&cfg, 1, 1), &[6], &[0]).unwrap_err();
        assert!(matches!(err, Error::Index { index: 6, size: 6, .. }));
        let err = emb.forward(&store, &input(&cfg, 1, 1), &[0], &[7]).unwrap_err();
        assert!(matches!(err, Error::Index { index: 7, size: 7, .. }));
    }

    #[test]
    fn tod_gradient_lands_on_looked_up_row_only() {
        let cfg = small_cfg();
        let mut store = ParamStore::<f64>::new(5);
        let emb = Embedding::new(&mut store, &cfg).unwrap();
        let (h, cache) = emb.forward(&store, &input(&cfg, 1, 2), &[4], &[2]).unwrap();
        emb.backward(&mut store, &cache, &Tensor::full(h.shape(), 1.0)).unwrap();
        let g = store.grad(emb.tod);
        for r in 0..cfg.steps_per_day {
            let nonzero = (0..cfg.d_tod).any(|c| g.get(&[r, c]) != 0.0);
            assert_eq!(nonzero, r == 4);
        }
        // each of the 3 nodes contributes 1.0 to every column of the row
        assert_eq!(g.get(&[4, 0]), 3.0);
    }

    #[test]
    fn feature_block_is_affine_in_x() {
        let cfg = small_cfg();
        let mut store = ParamStore::<f64>::new(9);
        let emb = Embedding::new(&mut store, &cfg).unwrap();
        let x1 = input(&cfg, 1, 1);
        let x2 = input(&cfg, 1, 2);
        let (a, b) = (0.3, -1.7);
        let mix = Tensor::new(
            x1.shape(),
            x1.data().iter().zip(x2.data()).map(|(p, q)| a * p + b * q).collect(),
        )
        .unwrap();
        let zero = Tensor::zeros(x1.shape());
        let f = |x: &Tensor<f64>| emb.forward(&store, x, &[0], &[0]).unwrap().0;
        let (h1, h2, hm, h0) = (f(&x1), f(&x2), f(&mix), f(&zero));
        for i in 0..cfg.nodes {
            for j in 0..cfg.d_feature {
                // affine: f(a x1 + b x2) = a f(x1) + b f(x2) + (1 - a - b) f(0)
                let expect = a * h1.get(&[i, j]) + b * h2.get(&[i, j])
                    + (1.0 - a - b) * h0.get(&[i, j]);
                assert!((hm.get(&[i, j]) - expect).abs() < 1e-12);
            }
        }
    }
}
