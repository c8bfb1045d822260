//! Straight-line reference implementations over nested `Vec`s, written
//! without any of the library's kernels.

#![allow(dead_code)]

use m3net::{ModelConfig, ParamStore, Tensor, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn param<'a>(store: &'a ParamStore<f64>, name: &str) -> (&'a [usize], &'a [f64]) {
    let p = store.get(name).unwrap_or_else(|| panic!("no parameter {name}"));
    (p.value.shape(), p.value.data())
}

pub fn to_mat(t: &Tensor<f64>) -> Mat {
    let (r, c) = t.dims2();
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

pub fn from_mat(m: &Mat) -> Tensor<f64> {
    let cols = m[0].len();
    Tensor::new(&[m.len(), cols], m.concat()).unwrap()
}

pub fn naive_matmul(a: &Mat, b: &Mat) -> Mat {
    let (m, k, n) = (a.len(), b.len(), b[0].len());
    let mut c = vec![vec![0.0; n]; m];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i][p] * b[p][j];
            }
            c[i][j] = s;
        }
    }
    c
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn linear(store: &ParamStore<f64>, prefix: &str, x: &Mat) -> Mat {
    let (ws, w) = param(store, &format!("{prefix}.w"));
    let (_, b) = param(store, &format!("{prefix}.b"));
    let (din, dout) = (ws[0], ws[1]);
    x.iter()
        .map(|row| {
            assert_eq!(row.len(), din);
            (0..dout)
                .map(|j| b[j] + (0..din).map(|p| row[p] * w[p * dout + j]).sum::<f64>())
                .collect()
        })
        .collect()
}

pub fn mlp(store: &ParamStore<f64>, prefix: &str, x: &Mat) -> Mat {
    let z = linear(store, &format!("{prefix}.fc1"), x);
    let a: Mat = z.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect();
    linear(store, &format!("{prefix}.fc2"), &a)
}

/// `H + G·MLP(GᵀH)` on one sample's `N×D` block.
pub fn spatial(store: &ParamStore<f64>, prefix: &str, h: &Mat, softmax_rows: bool) -> Mat {
    let (gs, g) = param(store, &format!("{prefix}.G"));
    let (n, groups) = (gs[0], gs[1]);
    let mut gm: Mat = (0..n).map(|i| g[i * groups..(i + 1) * groups].to_vec()).collect();
    if softmax_rows {
        gm = gm.iter().map(|r| softmax(r)).collect();
    }
    let d = h[0].len();
    let mut grouped = vec![vec![0.0; d]; groups];
    for q in 0..groups {
        for j in 0..d {
            grouped[q][j] = (0..n).map(|i| gm[i][q] * h[i][j]).sum();
        }
    }
    let m = mlp(store, &format!("{prefix}.mlp"), &grouped);
    let mut out = h.clone();
    for i in 0..n {
        for j in 0..d {
            out[i][j] += (0..groups).map(|q| gm[i][q] * m[q][j]).sum::<f64>();
        }
    }
    out
}

/// `[H_s +] Σ_k α_k ⊙ expert_k(H_s)` with a softmax gate.
pub fn moe(store: &ParamStore<f64>, prefix: &str, hs: &Mat, experts: usize, residual: bool) -> Mat {
    let logits = linear(store, &format!("{prefix}.gate"), hs);
    let alpha: Mat = logits.iter().map(|r| softmax(r)).collect();
    let outs: Vec<Mat> = (0..experts)
        .map(|k| mlp(store, &format!("{prefix}.expert{k}"), hs))
        .collect();
    let d = hs[0].len();
    (0..hs.len())
        .map(|r| {
            (0..d)
                .map(|j| {
                    let base = if residual { hs[r][j] } else { 0.0 };
                    base + (0..experts).map(|k| alpha[r][k] * outs[k][r][j]).sum::<f64>()
                })
                .collect()
        })
        .collect()
}

/// Embedding of one window `x[l][n][c]`.
pub fn embed(store: &ParamStore<f64>, cfg: &ModelConfig, x: &[f64], tod: usize, dow: usize) -> Mat {
    let (l, n, c) = (cfg.input_len, cfg.nodes, cfg.channels);
    let flat: Mat = (0..n)
        .map(|ni| {
            let mut v = Vec::with_capacity(l * c);
            for li in 0..l {
                for ci in 0..c {
                    v.push(x[(li * n + ni) * c + ci]);
                }
            }
            v
        })
        .collect();
    let feature = linear(store, "embed.feature", &flat);
    let (_, node) = param(store, "embed.node");
    let (_, tod_t) = param(store, "embed.tod");
    let (_, dow_t) = param(store, "embed.dow");
    (0..n)
        .map(|ni| {
            let mut row = feature[ni].clone();
            row.extend_from_slice(&node[ni * cfg.d_node..(ni + 1) * cfg.d_node]);
            row.extend_from_slice(&tod_t[tod * cfg.d_tod..(tod + 1) * cfg.d_tod]);
            row.extend_from_slice(&dow_t[dow * cfg.d_dow..(dow + 1) * cfg.d_dow]);
            row
        })
        .collect()
}

/// Normalized `N×F` forecast for one window.
pub fn model_forward(store: &ParamStore<f64>, cfg: &ModelConfig, x: &[f64], tod: usize, dow: usize) -> Mat {
    let experts = if cfg.variant == Variant::NoMoe { 1 } else { cfg.experts };
    let mut h = embed(store, cfg, x, tod, dow);
    for i in 0..cfg.layers {
        let sp = format!("layer{i}.spatial");
        let hs = match cfg.variant {
            Variant::Full | Variant::NoMoe => spatial(store, &sp, &h, cfg.grouping_softmax),
            Variant::NoGrouping => {
                let m = mlp(store, &format!("{sp}.mlp"), &h);
                h.iter()
                    .zip(&m)
                    .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect())
                    .collect()
            }
            Variant::NoSpatial => h.clone(),
        };
        h = moe(store, &format!("layer{i}.moe"), &hs, experts, cfg.moe_residual);
    }
    linear(store, "head", &h)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Small random architecture covering every variant and flag.
pub fn random_config(rng: &mut ChaCha8Rng, seed: u64) -> ModelConfig {
    ModelConfig {
        nodes: rng.gen_range(1..=6),
        input_len: rng.gen_range(1..=4),
        horizon: rng.gen_range(1..=3),
        channels: rng.gen_range(1..=2),
        d_feature: rng.gen_range(1..=4),
        d_node: rng.gen_range(1..=3),
        d_tod: rng.gen_range(1..=3),
        d_dow: rng.gen_range(1..=3),
        steps_per_day: 24,
        groups: rng.gen_range(1..=4),
        experts: rng.gen_range(1..=4),
        layers: rng.gen_range(1..=3),
        variant: Variant::ALL[rng.gen_range(0..4)],
        moe_residual: rng.gen_bool(0.8),
        grouping_softmax: rng.gen_bool(0.3),
        seed,
        ..Default::default()
    }
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + b.abs())
}
