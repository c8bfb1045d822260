//! Self-contained property suite run by `m3net verify`.
//!
//! Each group builds its own random instances from a fixed seed and compares
//! the library against finite differences or plain-loop transcriptions of
//! the layer formulas.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, Variant};
use crate::error::Result;
use crate::fixtures::{toy_config, toy_grad_problem, toy_problem, toy_splits};
use crate::gradcheck::{grad_check, FnObjective, GradCheckOptions};
use crate::m3::{ChannelMoe, SpatialMix};
use crate::metrics::MetricsAccumulator;
use crate::model::{Checkpoint, M3Net};
use crate::ops;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::trainer::{evaluate, train, TrainConfig};

#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    /// Random instances per property.
    pub instances: u64,
    /// Scales every analytic gradient by 1.01; the gradient groups must fail.
    pub corrupt_backward: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            instances: 100,
            corrupt_backward: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GroupResult {
    pub name: &'static str,
    pub checks: usize,
    /// First failing property, if any.
    pub failure: Option<String>,
    pub seconds: f64,
}

impl GroupResult {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }
}

impl fmt::Display for GroupResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.failure {
            None => write!(
                f,
                "PASS {:<24} {:>6} checks  {:.2}s",
                self.name, self.checks, self.seconds
            ),
            Some(why) => write!(f, "FAIL {:<24} {why}", self.name),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub groups: Vec<GroupResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(GroupResult::passed)
    }

    pub fn group(&self, name: &str) -> Option<&GroupResult> {
        self.groups.iter().find(|g| g.name == name)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for g in &self.groups {
            writeln!(f, "{g}")?;
        }
        Ok(())
    }
}

type Outcome = std::result::Result<(), String>;
type GroupFn = fn(&VerifyOptions, &mut usize) -> Outcome;

pub const GROUPS: [(&str, GroupFn); 8] = [
    ("kernel-gradients", kernel_gradients),
    ("model-gradients", model_gradients),
    ("matmul-oracle", matmul_oracle),
    ("softmax-rows", softmax_rows),
    ("layer-oracles", layer_oracles),
    ("degenerate-equivalences", degenerate_equivalences),
    ("metrics-oracle", metrics_oracle),
    ("determinism", determinism),
];

pub fn run_group(name: &str, opts: &VerifyOptions) -> Option<GroupResult> {
    let (name, f) = GROUPS.iter().find(|(n, _)| *n == name)?;
    let started = Instant::now();
    let mut checks = 0;
    let failure = f(opts, &mut checks).err();
    Some(GroupResult {
        name,
        checks,
        failure,
        seconds: started.elapsed().as_secs_f64(),
    })
}

pub fn run_suite(opts: &VerifyOptions) -> SuiteReport {
    let groups = GROUPS
        .iter()
        .map(|(name, _)| {
            let r = run_group(name, opts).expect("listed group");
            log::debug!("{r}");
            r
        })
        .collect();
    SuiteReport { groups }
}

fn fail(what: impl fmt::Display) -> Outcome {
    Err(what.to_string())
}

fn lib<V>(r: Result<V>) -> std::result::Result<V, String> {
    r.map_err(|e| e.to_string())
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("positive extents")
}

/// Uniform values kept at least `gap` away from zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    rand_tensor(rng, shape, 1.0).map(|v| if v < 0.0 { v - gap } else { v + gap })
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + b.abs())
}

// ---------------------------------------------------------------- gradients

type Fwd = fn(&[Tensor<f64>]) -> Result<Tensor<f64>>;
type Bwd = fn(&[Tensor<f64>], &Tensor<f64>, &Tensor<f64>) -> Result<Vec<Tensor<f64>>>;

struct KernelCase {
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    fwd: Fwd,
    bwd: Bwd,
}

fn kernel_cases(rng: &mut ChaCha8Rng) -> Vec<KernelCase> {
    let (m, k, n) = (rng.gen_range(1..=5), rng.gen_range(1..=5), rng.gen_range(1..=5));
    let mut r = |shape: &[usize]| rand_tensor(rng, shape, 2.0);
    let a = r(&[m, k]);
    let b = r(&[k, n]);
    let x = r(&[m, n]);
    let y = r(&[m, n]);
    let col = r(&[m, 1]);
    let bias = r(&[n]);
    let other = r(&[m, k]);
    let logits = r(&[m, n]);
    let relu_in = away_from_zero(rng, &[m, n], 0.05);
    vec![
        KernelCase {
            name: "matmul",
            inputs: vec![a.clone(), b],
            fwd: |t| ops::matmul(&t[0], &t[1]),
            bwd: |t, _, dy| {
                let (da, db) = ops::matmul_backward(&t[0], &t[1], dy)?;
                Ok(vec![da, db])
            },
        },
        KernelCase {
            name: "softmax_rows",
            inputs: vec![logits],
            fwd: |t| Ok(ops::softmax_rows(&t[0])),
            bwd: |_, out, dy| Ok(vec![ops::softmax_rows_backward(out, dy)?]),
        },
        KernelCase {
            name: "relu",
            inputs: vec![relu_in],
            fwd: |t| Ok(ops::relu(&t[0])),
            bwd: |t, _, dy| Ok(vec![ops::relu_backward(&t[0], dy)?]),
        },
        KernelCase {
            name: "add",
            inputs: vec![x.clone(), y.clone()],
            fwd: |t| ops::add(&t[0], &t[1]),
            bwd: |_, _, dy| Ok(vec![dy.clone(), dy.clone()]),
        },
        KernelCase {
            name: "sub",
            inputs: vec![x.clone(), y.clone()],
            fwd: |t| ops::sub(&t[0], &t[1]),
            bwd: |_, _, dy| Ok(vec![dy.clone(), ops::scale(dy, -1.0)]),
        },
        KernelCase {
            name: "scale",
            inputs: vec![x.clone()],
            fwd: |t| Ok(ops::scale(&t[0], 1.7)),
            bwd: |_, _, dy| Ok(vec![ops::scale(dy, 1.7)]),
        },
        KernelCase {
            name: "mul",
            inputs: vec![x.clone(), y.clone()],
            fwd: |t| ops::mul(&t[0], &t[1]),
            bwd: |t, _, dy| Ok(vec![ops::mul(dy, &t[1])?, ops::mul(dy, &t[0])?]),
        },
        KernelCase {
            name: "mul_column_broadcast",
            inputs: vec![col, y.clone()],
            fwd: |t| ops::mul(&t[0], &t[1]),
            bwd: |t, _, dy| {
                let (dcol, dm) = ops::mul_col_backward(&t[0], &t[1], dy)?;
                Ok(vec![dcol, dm])
            },
        },
        KernelCase {
            name: "row_dot",
            inputs: vec![x.clone(), y],
            fwd: |t| ops::row_dot(&t[0], &t[1]),
            bwd: |t, _, dy| Ok(vec![ops::mul(dy, &t[1])?, ops::mul(dy, &t[0])?]),
        },
        KernelCase {
            name: "add_row_bias",
            inputs: vec![x.clone(), bias],
            fwd: |t| {
                let mut out = t[0].clone();
                ops::add_row_bias(&mut out, &t[1])?;
                Ok(out)
            },
            bwd: |_, _, dy| Ok(vec![dy.clone(), ops::col_sum(dy)]),
        },
        KernelCase {
            name: "concat_last_dim",
            inputs: vec![x, other],
            fwd: |t| ops::concat_last_dim(&[&t[0], &t[1]]),
            bwd: |t, _, dy| ops::split_last_dim(dy, &[t[0].shape()[1], t[1].shape()[1]]),
        },
    ]
}

fn check_kernel(case: KernelCase, weights_seed: u64, corrupt: bool) -> Result<crate::gradcheck::GradCheckReport> {
    let mut store = ParamStore::new(0);
    for (i, t) in case.inputs.iter().enumerate() {
        store.insert(format!("{}.in{i}", case.name), t.clone())?;
    }
    let out_shape = (case.fwd)(&case.inputs)?.shape().to_vec();
    let w = rand_tensor(&mut ChaCha8Rng::seed_from_u64(weights_seed), &out_shape, 1.0);
    let (fwd, bwd) = (case.fwd, case.bwd);
    let w2 = w.clone();
    let mut obj = FnObjective {
        store,
        value: move |s: &ParamStore<f64>| {
            let inputs: Vec<_> = s.iter().map(|p| p.value.clone()).collect();
            let out = fwd(&inputs)?;
            Ok(out.data().iter().zip(w.data()).map(|(a, b)| a * b).sum())
        },
        grad: move |s: &mut ParamStore<f64>| {
            let inputs: Vec<_> = s.iter().map(|p| p.value.clone()).collect();
            let out = fwd(&inputs)?;
            let grads = bwd(&inputs, &out, &w2)?;
            let ids: Vec<_> = s.ids().collect();
            for (id, mut g) in ids.into_iter().zip(grads) {
                if corrupt {
                    g = ops::scale(&g, 1.01);
                }
                s.accumulate(id, &g)?;
            }
            Ok(())
        },
    };
    grad_check(&mut obj, GradCheckOptions::default())
}

/// Every kernel's backward against central differences on random inputs.
pub fn kernel_gradients(opts: &VerifyOptions, checks: &mut usize) -> Outcome {
    for seed in 0..opts.instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for case in kernel_cases(&mut rng) {
            let name = case.name;
            let report = lib(check_kernel(case, seed ^ 0x5eed, opts.corrupt_backward))?;
            *checks += 1;
            let first = report.failures().next().cloned();
            if let Some(bad) = first {
                return fail(format_args!(
                    "{name} (seed {seed}): `{}` max rel err {:.3e}",
                    bad.name, bad.max_rel_err
                ));
            }
        }
    }
    Ok(())
}

/// Whole-model gradients of the masked-MAE loss at toy size, every variant.
pub fn model_gradients(opts: &VerifyOptions, checks: &mut usize) -> Outcome {
    let seeds = opts.instances.clamp(1, 3);
    for variant in Variant::ALL {
        for seed in 0..seeds {
            let mut obj = lib(toy_grad_problem(&toy_config(variant, seed), 2, seed + 1))?;
            if opts.corrupt_backward {
                obj.grad_scale = 1.01;
            }
            let report = lib(grad_check(&mut obj, GradCheckOptions::default()))?;
            *checks += 1;
            let first = report.failures().next().cloned();
            if let Some(bad) = first {
                return fail(format_args!(
                    "{variant} (seed {seed}): `{}` max rel err {:.3e}",
                    bad.name, bad.max_rel_err
                ));
            }
        }
    }
    Ok(())
}

// ------------------------------------------------------------------ kernels

fn naive_product(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, ta: bool, tb: bool) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                let av = if ta { a[p * m + i] } else { a[i * k + p] };
                let bv = if tb { b[j * k + p] } else { b[p * n + j] };
                s += av * bv;
            }
            c[i * n + j] = s;
        }
    }
    c
}

/// The three product kernels equal a naive triple loop exactly.
pub fn matmul_oracle(opts: &VerifyOptions, checks: &mut usize) -> Outcome {
    for seed in 0..opts.instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, k, n) = (rng.gen_range(1..=8), rng.gen_range(1..=8), rng.gen_range(1..=8));
        let a = rand_tensor(&mut rng, &[m, k], 3.0);
        let b = rand_tensor(&mut rng, &[k, n], 3.0);
        let at = rand_tensor(&mut rng, &[k, m], 3.0);
        let bt = rand_tensor(&mut rng, &[n, k], 3.0);
        let cases = [
            ("matmul", lib(ops::matmul(&a, &b))?, naive_product(a.data(), b.data(), m, k, n, false, false)),
            ("matmul_tn", lib(ops::matmul_tn(&at, &b))?, naive_product(at.data(), b.data(), m, k, n, true, false)),
            ("matmul_nt", lib(ops::matmul_nt(&a, &bt))?, naive_product(a.data(), bt.data(), m, k, n, false, true)),
        ];
        for (name, got, want) in cases {
            *checks += 1;
            if got.shape() != [m, n] || got.data() != want.as_slice() {
                return fail(format_args!("{name} {m}x{k}x{n} (seed {seed}) differs from naive loop"));
            }
        }
    }
    Ok(())
}

/// Rows are distributions, including for extreme logits.
pub fn softmax_rows(opts: &VerifyOptions, checks: &mut usize) -> Outcome {
    let big = ops::softmax_rows(&Tensor::<f64>::from_rows(&[&[1000.0, 0.0]]).expect("literal"));
    *checks += 1;
    if !big.all_finite() || (big.data()[0] - 1.0).abs() > 1e-12 || big.data()[1] > 1e-12 {
        return fail("softmax [1000, 0] overflowed or lost mass");
    }
    for seed in 0..opts.instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, k) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
        let scale = [1.0, 50.0, 1000.0][seed as usize % 3];
        let y = ops::softmax_rows(&rand_tensor(&mut rng, &[n, k], scale));
        for row in y.data().chunks(k) {
            *checks += 1;
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&v| !(v >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
                return fail(format_args!("row {row:?} (seed {seed}) is not a distribution"));
            }
        }
    }
    Ok(())
}

// ------------------------------------------------------------------- layers

fn random_layer_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    ModelConfig {
        nodes: rng.gen_range(2..=6),
        groups: rng.gen_range(1..=3),
        experts: rng.gen_range(1..=4),
        d_feature: rng.gen_range(1..=3),
        d_node: rng.gen_range(1..=3),
        d_tod: 1,
        d_dow: 1,
        seed: rng.gen(),
        ..Default::default()
    }
}

type Rows = Vec<Vec<f64>>;

fn rows(t: &Tensor<f64>) -> Rows {
    let (_, c) = t.dims2();
    t.data().chunks(c).map(<[f64]>::to_vec).collect()
}

/// `x W + b` written out.
fn affine(x: &Rows, w: &Tensor<f64>, b: &Tensor<f64>) -> Rows {
    let (d_in, d_out) = w.dims2();
    x.iter()
        .map(|r| {
            (0..d_out)
                .map(|j| b.data()[j] + (0..d_in).map(|i| r[i] * w.get(&[i, j])).sum::<f64>())
                .collect()
        })
        .collect()
}

fn two_layer(x: &Rows, s: &ParamStore<f64>, mlp: &crate::layers::Mlp) -> Rows {
    let z = affine(x, s.value(mlp.fc1.w), s.value(mlp.fc1.b));
    let a: Rows = z.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect();
    affine(&a, s.value(mlp.fc2.w), s.value(mlp.fc2.b))
}

/// `H + G · MLP(Gᵀ H)` for one sample `h: N×D`.
fn spatial_transcription(s: &ParamStore<f64>, layer: &SpatialMix, h: &Rows) -> Rows {
    let g = s.value(layer.grouping);
    let (n, groups) = g.dims2();
    let d = h[0].len();
    let mut hg = vec![vec![0.0; d]; groups];
    for (j, row) in hg.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = (0..n).map(|i| g.get(&[i, j]) * h[i][c]).sum();
        }
    }
    let mixed = two_layer(&hg, s, &layer.mlp);
    (0..n)
        .map(|i| {
            (0..d)
                .map(|c| h[i][c] + (0..groups).map(|j| g.get(&[i, j]) * mixed[j][c]).sum::<f64>())
                .collect()
        })
        .collect()
}

/// `H + Σ_k α_k ⊙ O_k` with `α = softmax(H W_g + b_g)` per row.
fn moe_transcription(s: &ParamStore<f64>, layer: &ChannelMoe, h: &Rows) -> Rows {
    let logits = affine(h, s.value(layer.gate.w), s.value(layer.gate.b));
    let outs: Vec<Rows> = layer.experts.iter().map(|e| two_layer(h, s, e)).collect();
    h.iter()
        .enumerate()
        .map(|(r, hr)| {
            let max = logits[r].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits[r].iter().map(|l| (l - max).exp()).collect();
            let z: f64 = e.iter().sum();
            (0..hr.len())
                .map(|c| hr[c] + (0..outs.len()).map(|k| e[k] / z * outs[k][r][c]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn compare_rows(what: &str, seed: u64, got: &Tensor<f64>, want: &Rows) -> Outcome {
    for (r, (g, w)) in rows(got).iter().zip(want).enumerate() {
        for (c, (&a, &b)) in g.iter().zip(w).enumerate() {
            if !close(a, b, 1e-6) {
                return fail(format_args!(
                    "{what} (seed {seed}) [{r},{c}]: layer {a} vs transcription {b}"
                ));
            }
        }
    }
    Ok(())
}

/// Spatial mixing and channel MoE against loop transcriptions.
pub fn layer_oracles(opts: &VerifyOptions, checks: &mut usize) -> Outcome {
    for seed in 0..opts.instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = random_layer_config(&mut rng);
        let batch = rng.gen_range(1..=3);
        let d = cfg.hidden();
        let mut store = ParamStore::<f64>::new(cfg.seed);
        let spatial = lib(SpatialMix::new(&mut store, "s", &cfg))?;
        let moe = lib(ChannelMoe::new(&mut store, "m", d, cfg.experts, true))?;
        *store.value_mut(spatial.grouping) = rand_tensor(&mut rng, &[cfg.nodes, cfg.groups], 1.0);
        let h = rand_tensor(&mut rng, &[batch * cfg.nodes, d], 2.0);

        let (hs, _) = lib(spatial.forward(&store, &h))?;
        let hs_rows = rows(&hs);
        let want: Rows = rows(&h)
            .chunks(cfg.nodes)
            .flat_map(|sample: &[Vec<f64>]| spatial_transcription(&store, &spatial, &sample.to_vec()))
            .collect();
        compare_rows("spatial_mix", seed, &hs, &want)?;
        *checks += 1;

        let (hc, _) = lib(moe.forward(&store, &hs))?;
        compare_rows("channel_moe", seed, &hc, &moe_transcription(&store, &moe, &hs_rows))?;
        *checks += 1;
    }
    Ok(())
}

/// G = 0 gives the identity, K = 1 equals the single-expert variant and the
/// no-spatial variant ignores the spatial parameters.
pub fn degenerate_equivalences(opts: &VerifyOptions, checks: &mut usize) -> Outcome {
    for seed in 0..opts.instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = random_layer_config(&mut rng);
        let mut store = ParamStore::<f64>::new(cfg.seed);
        let spatial = lib(SpatialMix::new(&mut store, "s", &cfg))?;
        *store.value_mut(spatial.grouping) = Tensor::zeros(&[cfg.nodes, cfg.groups]);
        let h = rand_tensor(&mut rng, &[2 * cfg.nodes, cfg.hidden()], 2.0);
        let (hs, _) = lib(spatial.forward(&store, &h))?;
        *checks += 1;
        if hs != h {
            return fail(format_args!("G = 0 changed the input (seed {seed})"));
        }
    }

    let seeds = opts.instances.clamp(1, 10);
    for seed in 0..seeds {
        let single = ModelConfig {
            experts: 1,
            ..toy_config(Variant::Full, seed)
        };
        let (a, batch, _) = lib(toy_problem(&single, 3, seed))?;
        let (b, _, _) = lib(toy_problem(&toy_config(Variant::NoMoe, seed), 3, seed))?;
        let ya = lib(a.forward_batch(&batch.x, &batch.tod, &batch.dow))?.0;
        let yb = lib(b.forward_batch(&batch.x, &batch.tod, &batch.dow))?.0;
        *checks += 1;
        let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        if bits(&ya) != bits(&yb) {
            return fail(format_args!("K = 1 differs from no_moe (seed {seed})"));
        }

        let (mut m, batch, _) = lib(toy_problem(&toy_config(Variant::NoSpatial, seed), 3, seed))?;
        let before = lib(m.forward_batch(&batch.x, &batch.tod, &batch.dow))?.0;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in m.store_mut().iter_mut().filter(|p| p.name.contains(".spatial.")) {
            p.value = rand_tensor(&mut rng, p.value.shape(), 5.0);
        }
        let after = lib(m.forward_batch(&batch.x, &batch.tod, &batch.dow))?.0;
        *checks += 1;
        if bits(&before) != bits(&after) {
            return fail(format_args!("no_spatial output depends on spatial parameters (seed {seed})"));
        }
    }
    Ok(())
}

// ------------------------------------------------------------------ metrics

#[derive(Default)]
struct NaiveCell {
    abs: f64,
    sq: f64,
    n: f64,
    ape: f64,
    ape_n: f64,
}

impl NaiveCell {
    fn add(&mut self, p: f64, y: f64, threshold: f64) {
        self.abs += (p - y).abs();
        self.sq += (p - y) * (p - y);
        self.n += 1.0;
        if y.abs() > threshold {
            self.ape += ((p - y) / y).abs();
            self.ape_n += 1.0;
        }
    }

    fn values(&self) -> [f64; 3] {
        let mape = if self.ape_n > 0.0 { 100.0 * self.ape / self.ape_n } else { 0.0 };
        [self.abs / self.n, (self.sq / self.n).sqrt(), mape]
    }
}

fn compare_cells(what: &str, got: &crate::metrics::MetricCell, want: &NaiveCell) -> Outcome {
    let [mae, rmse, mape] = want.values();
    if close(got.mae, mae, 1e-6) && close(got.rmse, rmse, 1e-6) && close(got.mape, mape, 1e-6) {
        Ok(())
    } else {
        fail(format_args!("{what}: {got:?} vs oracle ({mae}, {rmse}, {mape})"))
    }
}

/// Hand case, the accumulator and `evaluate` against per-element loops.
pub fn metrics_oracle(opts: &VerifyOptions, checks: &mut usize) -> Outcome {
    let mut acc = MetricsAccumulator::new(1, 1.0);
    acc.push(
        &Tensor::<f64>::new(&[2, 1], vec![12.0, 16.0]).expect("literal"),
        &Tensor::new(&[2, 1], vec![10.0, 20.0]).expect("literal"),
    );
    let hand = acc.report().average;
    *checks += 1;
    if hand.mae != 3.0 || (hand.rmse - 10f64.sqrt()).abs() > 1e-12 || (hand.mape - 20.0).abs() > 1e-12 {
        return fail(format_args!("hand case gave {hand:?}"));
    }

    for seed in 0..opts.instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (rows_n, f) = (rng.gen_range(1..=20), 12);
        let pred = rand_tensor(&mut rng, &[rows_n, f], 50.0);
        let target = rand_tensor(&mut rng, &[rows_n, f], 50.0).map(|v| if v.abs() < 5.0 { v / 10.0 } else { v });
        let mut acc = MetricsAccumulator::new(f, 1.0);
        acc.push(&pred, &target);
        let report = acc.report();
        let mut per_h: Vec<NaiveCell> = (0..f).map(|_| NaiveCell::default()).collect();
        let mut all = NaiveCell::default();
        for r in 0..rows_n {
            for h in 0..f {
                let (p, y) = (pred.get(&[r, h]), target.get(&[r, h]));
                per_h[h].add(p, y, 1.0);
                all.add(p, y, 1.0);
            }
        }
        *checks += 1;
        compare_cells(&format!("average (seed {seed})"), &report.average, &all)?;
        for (h, cell) in &report.horizons {
            compare_cells(&format!("@{h} (seed {seed})"), cell, &per_h[h - 1])?;
        }
    }

    let seeds = opts.instances.clamp(1, 5);
    for seed in 0..seeds {
        let cfg = toy_config(Variant::Full, seed);
        let model = lib(M3Net::<f64>::new(cfg.clone()))?;
        let splits = lib(toy_splits(&cfg, 300, seed))?;
        let report = lib(evaluate(&model, &splits.test, &splits.stats, 7, 1.0))?;
        let mut all = NaiveCell::default();
        for i in 0..splits.test.len() {
            let s = splits.test.sample(i);
            let pred = lib(model.predict(&s.x.cast(), s.tod_idx, s.dow_idx, &splits.stats))?;
            for n in 0..cfg.nodes {
                for h in 0..cfg.horizon {
                    all.add(pred.get(&[n, h]), s.y.get(&[h, n]) as f64, 1.0);
                }
            }
        }
        *checks += 1;
        compare_cells(&format!("evaluate (seed {seed})"), &report.average, &all)?;
    }
    Ok(())
}

// -------------------------------------------------------------- persistence

/// Same seed and data give the same history; checkpoints round-trip exactly.
pub fn determinism(opts: &VerifyOptions, checks: &mut usize) -> Outcome {
    let seeds = opts.instances.clamp(1, 2);
    for seed in 0..seeds {
        let cfg = toy_config(Variant::Full, seed);
        let splits = lib(toy_splits(&cfg, 300, seed))?;
        let tcfg = TrainConfig {
            max_epochs: 2,
            batch_size: 16,
            seed,
            ..Default::default()
        };
        let run = || -> std::result::Result<(M3Net<f32>, Vec<String>), String> {
            let mut model = lib(M3Net::<f32>::new(cfg.clone()))?;
            let outcome = lib(train(&mut model, &splits, &tcfg))?;
            Ok((model, outcome.history.iter().map(|r| r.history_line()).collect()))
        };
        let (model, first) = run()?;
        let (_, second) = run()?;
        *checks += 1;
        if first != second {
            return fail(format_args!("training history differs between runs (seed {seed})"));
        }

        let ckpt = Checkpoint::from_model(&model, Some(&splits.stats));
        let mut bytes = Vec::new();
        lib(ckpt.write_to(&mut bytes))?;
        let back = lib(Checkpoint::read_from(&mut bytes.as_slice()))?;
        let restored: M3Net<f32> = lib(back.to_model())?;
        let mut again = Vec::new();
        lib(Checkpoint::from_model(&restored, back.stats.as_ref()).write_to(&mut again))?;
        *checks += 1;
        let same_values = model.store().iter().zip(restored.store().iter()).all(|(a, b)| {
            a.name == b.name
                && a.value.data().iter().map(|v| v.to_bits()).eq(b.value.data().iter().map(|v| v.to_bits()))
        });
        if back != ckpt || !same_values || bytes != again {
            return fail(format_args!("checkpoint round trip is not bit-exact (seed {seed})"));
        }
    }
    Ok(())
}
