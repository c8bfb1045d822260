mod common;

use common::*;
use m3net::m3::{ChannelMoe, SpatialMix};
use m3net::{M3Net, ModelConfig, ParamStore, Tensor, Variant};
use proptest::prelude::*;
use rand::Rng;

const TOL: f64 = 1e-6;

fn assert_close(got: &Mat, want: &Mat) {
    assert_eq!(got.len(), want.len());
    for (gr, wr) in got.iter().zip(want) {
        assert_eq!(gr.len(), wr.len());
        for (&g, &w) in gr.iter().zip(wr) {
            assert!(close(g, w, TOL), "{g} vs {w}");
        }
    }
}

fn spatial_cfg(r: &mut rand_chacha::ChaCha8Rng) -> ModelConfig {
    ModelConfig {
        nodes: r.gen_range(1..=8),
        groups: r.gen_range(1..=5),
        d_feature: r.gen_range(1..=4),
        d_node: r.gen_range(1..=3),
        d_tod: 1,
        d_dow: 1,
        grouping_softmax: r.gen_bool(0.3),
        ..Default::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn spatial_mix_matches_transcription(seed in any::<u64>()) {
        let mut r = rng(seed);
        let cfg = spatial_cfg(&mut r);
        let mut store = ParamStore::<f64>::new(seed);
        let layer = SpatialMix::new(&mut store, "s", &cfg).unwrap();
        let batch = r.gen_range(1..=3);
        let h = random_mat(&mut r, batch * cfg.nodes, cfg.hidden());
        let (got, _) = layer.forward(&store, &from_mat(&h)).unwrap();
        let got = to_mat(&got);
        for b in 0..batch {
            let block = h[b * cfg.nodes..(b + 1) * cfg.nodes].to_vec();
            let want = spatial(&store, "s", &block, cfg.grouping_softmax);
            assert_close(&got[b * cfg.nodes..(b + 1) * cfg.nodes].to_vec(), &want);
        }
    }

    #[test]
    fn moe_matches_transcription(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (rows, d, k) = (r.gen_range(1..=10), r.gen_range(1..=6), r.gen_range(1..=5));
        let residual = r.gen_bool(0.8);
        let mut store = ParamStore::<f64>::new(seed);
        let layer = ChannelMoe::new(&mut store, "m", d, k, residual).unwrap();
        let hs = random_mat(&mut r, rows, d);
        let (got, cache) = layer.forward(&store, &from_mat(&hs)).unwrap();
        assert_close(&to_mat(&got), &moe(&store, "m", &hs, k, residual));
        for row in to_mat(cache.gate_weights()) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn model_matches_transcription(seed in any::<u64>()) {
        let mut r = rng(seed);
        let cfg = random_config(&mut r, seed);
        let model = M3Net::<f64>::new(cfg.clone()).unwrap();
        let x = random_tensor(&mut r, &[cfg.input_len, cfg.nodes, cfg.channels]);
        let (tod, dow) = (r.gen_range(0..cfg.steps_per_day), r.gen_range(0..7));
        let got = model.forward(&x, tod, dow).unwrap();
        let want = model_forward(model.store(), &cfg, x.data(), tod, dow);
        assert_close(&to_mat(&got), &want);
        prop_assert_eq!(model.store().num_elements(), M3Net::<f64>::expected_param_count(&cfg));
    }

    #[test]
    fn node_permutation_equivariance(seed in any::<u64>()) {
        let mut r = rng(seed);
        let cfg = random_config(&mut r, seed);
        let mut model = M3Net::<f64>::new(cfg.clone()).unwrap();
        let n = cfg.nodes;
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, r.gen_range(0..=i));
        }
        let x = random_tensor(&mut r, &[cfg.input_len, n, cfg.channels]);
        let y = to_mat(&model.forward(&x, 3, 1).unwrap());

        // node i of the permuted problem is node perm[i] of the original
        let c = cfg.channels;
        let mut xp = x.clone();
        for l in 0..cfg.input_len {
            for i in 0..n {
                for ch in 0..c {
                    xp.set(&[l, i, ch], x.get(&[l, perm[i], ch]));
                }
            }
        }
        let names: Vec<String> = model
            .store()
            .iter()
            .filter(|p| p.name == "embed.node" || p.name.ends_with(".spatial.G"))
            .map(|p| p.name.clone())
            .collect();
        for name in names {
            let p = model.store_mut().get_mut(&name).unwrap();
            let old = to_mat(&p.value);
            let new: Mat = perm.iter().map(|&j| old[j].clone()).collect();
            p.value = from_mat(&new);
        }
        let yp = to_mat(&model.forward(&xp, 3, 1).unwrap());
        for i in 0..n {
            for (a, b) in yp[i].iter().zip(&y[perm[i]]) {
                prop_assert!(close(*a, *b, 1e-9), "{} vs {}", a, b);
            }
        }
    }

    #[test]
    fn zero_grouping_leaves_input(seed in any::<u64>()) {
        let mut r = rng(seed);
        let cfg = ModelConfig { grouping_softmax: false, ..spatial_cfg(&mut r) };
        let mut store = ParamStore::<f64>::new(seed);
        let layer = SpatialMix::new(&mut store, "s", &cfg).unwrap();
        store.value_mut(layer.grouping).fill(0.0);
        let h = random_tensor(&mut r, &[2 * cfg.nodes, cfg.hidden()]);
        let (out, _) = layer.forward(&store, &h).unwrap();
        prop_assert_eq!(out, h);
    }

    #[test]
    fn single_expert_equals_no_moe(seed in any::<u64>()) {
        let mut r = rng(seed);
        let base = random_config(&mut r, seed);
        let full = M3Net::<f64>::new(ModelConfig { variant: Variant::Full, experts: 1, ..base.clone() }).unwrap();
        let no_moe = M3Net::<f64>::new(ModelConfig { variant: Variant::NoMoe, experts: 3, ..base.clone() }).unwrap();
        prop_assert_eq!(no_moe.config().experts, 1);
        let x = random_tensor(&mut r, &[base.input_len, base.nodes, base.channels]);
        prop_assert_eq!(full.forward(&x, 5, 2).unwrap(), no_moe.forward(&x, 5, 2).unwrap());
    }

    #[test]
    fn no_spatial_ignores_spatial_parameters(seed in any::<u64>()) {
        let mut r = rng(seed);
        let cfg = ModelConfig { variant: Variant::NoSpatial, ..random_config(&mut r, seed) };
        let mut model = M3Net::<f64>::new(cfg.clone()).unwrap();
        let x = random_tensor(&mut r, &[cfg.input_len, cfg.nodes, cfg.channels]);
        let before = model.forward(&x, 0, 0).unwrap();
        for p in model.store_mut().iter_mut().filter(|p| p.name.contains(".spatial.")) {
            p.value = p.value.map(|v| 10.0 * v + 1.0);
        }
        prop_assert_eq!(model.forward(&x, 0, 0).unwrap(), before);
    }
}

#[test]
fn variants_allocate_identical_parameters() {
    let base = m3net::fixtures::toy_config(Variant::Full, 4);
    let full = M3Net::<f64>::new(base.clone()).unwrap();
    for v in [Variant::NoSpatial, Variant::NoGrouping] {
        let other = M3Net::<f64>::new(ModelConfig { variant: v, ..base.clone() }).unwrap();
        let a: Vec<_> = full.store().iter().map(|p| (&p.name, &p.value)).collect();
        let b: Vec<_> = other.store().iter().map(|p| (&p.name, &p.value)).collect();
        assert_eq!(a, b, "{v}");
    }
}

#[test]
fn one_hot_grouping_hand_case() {
    // two nodes in one group with an MLP that doubles its input:
    // grouped = h0 + h1, out_i = h_i + 2 (h0 + h1)
    let cfg = ModelConfig {
        nodes: 2,
        groups: 1,
        d_feature: 1,
        d_node: 1,
        d_tod: 1,
        d_dow: 1,
        ..Default::default()
    };
    let mut store = ParamStore::<f64>::new(0);
    let layer = SpatialMix::new(&mut store, "s", &cfg).unwrap();
    store.value_mut(layer.grouping).data_mut().copy_from_slice(&[1.0, 1.0]);
    *store.value_mut(layer.mlp.fc1.w) = Tensor::eye(4);
    *store.value_mut(layer.mlp.fc2.w) = Tensor::eye(4).map(|v| 2.0 * v);
    store.value_mut(layer.mlp.fc1.b).fill(0.0);
    store.value_mut(layer.mlp.fc2.b).fill(0.0);
    let h = Tensor::<f64>::from_rows(&[&[1.0, 2.0, 3.0, 4.0], &[0.5, 0.0, 1.0, 2.0]]).unwrap();
    let (out, _) = layer.forward(&store, &h).unwrap();
    assert_eq!(out.data(), &[4.0, 6.0, 11.0, 16.0, 3.5, 4.0, 9.0, 14.0]);
}
