//! Finite-difference verification for every differentiable op, plus
//! property tests for the pooling and softmax invariants.

use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use limn_core::numerics::gradcheck::{grad_check, GradCheckConfig, ScalarFn};
use limn_core::numerics::{Graph, ParamStore, PoolKind, Tensor, TensorId};

fn cfg(seed: u64) -> GradCheckConfig {
    GradCheckConfig { step: 1e-5, probes: 400, seed }
}

fn store(entries: &[(&str, &[usize], u64)]) -> ParamStore {
    let mut params = ParamStore::new();
    for (name, shape, seed) in entries {
        let mut rng = ChaCha8Rng::seed_from_u64(*seed);
        params.insert(*name, Tensor::uniform(shape, -1.0, 1.0, &mut rng));
    }
    params
}

/// Squares and sums the op output so every element feeds the scalar loss.
fn squared_sum(g: &mut Graph, y: TensorId) -> limn_core::Result<TensorId> {
    let sq = g.mul(y, y)?;
    Ok(g.sum_all(sq))
}

fn check(f: ScalarFn, params: &ParamStore, seed: u64) {
    let err = grad_check(f, params, &cfg(seed)).unwrap();
    assert!(err <= 1e-4, "max relative error {err}");
}

#[test]
fn matmul_gradients_match_finite_differences() {
    // The spec's 4x3 · 3x5 probe with a tighter tolerance than required.
    let params = store(&[("a", &[4, 3], 1), ("b", &[3, 5], 2)]);
    let f: ScalarFn = &|g, l: &BTreeMap<String, TensorId>| {
        let y = g.matmul(l["a"], l["b"])?;
        squared_sum(g, y)
    };
    let err = grad_check(f, &params, &cfg(11)).unwrap();
    assert!(err <= 1e-6, "max relative error {err}");
}

#[test]
fn elementwise_and_broadcast_gradients() {
    let params = store(&[("x", &[3, 4], 3), ("y", &[3, 4], 4), ("c", &[3], 5), ("r", &[4], 6)]);
    let f: ScalarFn = &|g, l| {
        let a = g.add(l["x"], l["y"])?;
        let s = g.sub(a, l["y"])?;
        let m = g.mul(s, l["y"])?;
        let sc = g.scale(m, 0.37);
        let cb = g.add_col_vec(sc, l["c"])?;
        let rb = g.add_row_vec(cb, l["r"])?;
        squared_sum(g, rb)
    };
    check(f, &params, 12);
}

#[test]
fn activation_gradients() {
    // Keep probes away from the relu kink.
    let mut params = store(&[("x", &[2, 6], 7)]);
    for v in params.get_mut("x").unwrap().data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1;
        }
    }
    let f: ScalarFn = &|g, l| {
        let r = g.relu(l["x"]);
        let s = g.sigmoid(l["x"]);
        let t = g.tanh(l["x"]);
        let a = g.add(r, s)?;
        let b = g.add(a, t)?;
        squared_sum(g, b)
    };
    check(f, &params, 13);
}

#[test]
fn softmax_and_logsumexp_gradients() {
    let params = store(&[("x", &[3, 5], 8)]);
    let f: ScalarFn = &|g, l| {
        let sm = g.softmax_rows(l["x"])?;
        let lse = g.logsumexp_rows(l["x"])?;
        let sm_sq = squared_sum(g, sm)?;
        let lse_sq = squared_sum(g, lse)?;
        g.add(sm_sq, lse_sq)
    };
    check(f, &params, 14);
}

#[test]
fn layer_norm_gradients() {
    let params = store(&[("x", &[3, 6], 9), ("gain", &[6], 10), ("bias", &[6], 11)]);
    let f: ScalarFn = &|g, l| {
        let y = g.layer_norm(l["x"], l["gain"], l["bias"], 1e-5)?;
        squared_sum(g, y)
    };
    let err = grad_check(f, &params, &cfg(15)).unwrap();
    assert!(err <= 1e-5, "max relative error {err}");
}

#[test]
fn l2_normalize_gradients() {
    let params = store(&[("x", &[4, 3], 16)]);
    let f: ScalarFn = &|g, l| {
        let y = g.l2_normalize_columns(l["x"], 1e-12)?;
        // Weight the columns so the loss is not norm-invariant by construction.
        let w = g.constant(Tensor::new(&[4, 3], (0..12).map(|i| 0.1 * i as f64 + 0.3).collect()).unwrap());
        let m = g.mul(y, w)?;
        squared_sum(g, m)
    };
    check(f, &params, 17);
}

#[test]
fn pool_gradients_for_all_kinds() {
    // Positive, well-separated entries: valid gem domain, no max-pool ties.
    let data: Vec<f64> = (0..18).map(|i| 0.3 + 0.17 * i as f64).collect();
    let mut params = ParamStore::new();
    params.insert("x", Tensor::new(&[2, 3, 3], data).unwrap());
    let f: ScalarFn = &|g, l| {
        let mx = g.pool(l["x"], PoolKind::Max, 1.0)?;
        let av = g.pool(l["x"], PoolKind::Avg, 1.0)?;
        let gm = g.pool(l["x"], PoolKind::Gem, 3.0)?;
        let a = g.add(mx, av)?;
        let b = g.add(a, gm)?;
        squared_sum(g, b)
    };
    check(f, &params, 18);
}

#[test]
fn conv2d_gradients() {
    let params = store(&[("x", &[2, 5, 5], 19), ("w", &[3, 2, 3, 3], 20), ("b", &[3], 21)]);
    let f: ScalarFn = &|g, l| {
        let y = g.conv2d(l["x"], l["w"], l["b"], 2, 1)?;
        squared_sum(g, y)
    };
    check(f, &params, 22);
}

#[test]
fn structural_op_gradients() {
    let params = store(&[("x", &[4, 6], 23)]);
    let f: ScalarFn = &|g, l| {
        let t = g.transpose(l["x"])?;
        let rows = g.slice_rows(t, 1, 3)?;
        let cols = g.slice_cols(rows, 0, 2)?;
        let gathered = g.gather_cols(l["x"], &[0, 2, 2, 5])?;
        let cat = g.concat_cols(&[cols, cols])?;
        let rcat = g.concat_rows(&[gathered, gathered])?;
        let re = g.reshape(rcat, &[4, 8])?;
        let a = squared_sum(g, cat)?;
        let b = squared_sum(g, re)?;
        g.add(a, b)
    };
    check(f, &params, 24);
}

#[test]
fn reduction_and_diag_gradients() {
    let params = store(&[("x", &[4, 4], 25)]);
    let f: ScalarFn = &|g, l| {
        let d = g.diag(l["x"])?;
        let s = g.sum_all(l["x"]);
        let m = g.mean_all(l["x"]);
        let dsq = squared_sum(g, d)?;
        let a = g.add(dsq, s)?;
        let b = g.add(a, m)?;
        squared_sum(g, b)
    };
    check(f, &params, 26);
}

#[test]
fn forward_backward_is_bitwise_deterministic() {
    let run = || {
        let params = store(&[("w", &[4, 4], 40), ("x", &[4, 2], 41)]);
        let mut g = Graph::new();
        let leaves = params.leaves(&mut g, true);
        let h = g.matmul(leaves["w"], leaves["x"]).unwrap();
        let a = g.tanh(h);
        let sm = g.softmax_rows(a).unwrap();
        let sq = g.mul(sm, sm).unwrap();
        let loss = g.sum_all(sq);
        g.backward(loss).unwrap();
        (
            g.value(loss).data().to_vec(),
            g.grad(leaves["w"]).unwrap().into_data(),
            g.grad(leaves["x"]).unwrap().into_data(),
        )
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant(
        xs in proptest::collection::vec(-50.0f64..50.0, 2..16),
        c in -100.0f64..100.0,
    ) {
        let n = xs.len();
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(&[1, n], xs.clone()).unwrap(), false);
        let y = g.softmax_rows(x).unwrap();
        let sum: f64 = g.value(y).data().iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-12);

        let shifted = g.leaf(Tensor::new(&[1, n], xs.iter().map(|v| v + c).collect()).unwrap(), false);
        let ys = g.softmax_rows(shifted).unwrap();
        for (a, b) in g.value(y).data().iter().zip(g.value(ys).data()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn gem_with_unit_exponent_equals_average(
        xs in proptest::collection::vec(0.0f64..10.0, 4..25),
    ) {
        let n = xs.len();
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(&[1, 1, n], xs).unwrap(), false);
        let gem = g.pool(x, PoolKind::Gem, 1.0).unwrap();
        let avg = g.pool(x, PoolKind::Avg, 1.0).unwrap();
        prop_assert!((g.value(gem).data()[0] - g.value(avg).data()[0]).abs() <= 1e-12);
    }

    #[test]
    fn gem_with_large_exponent_approaches_max_from_below(
        xs in proptest::collection::vec(0.1f64..10.0, 2..17),
    ) {
        // Exact sandwich: max·(1/n)^(1/p) <= gem <= max.
        let n = xs.len();
        let p = 64.0;
        let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(&[1, 1, n], xs).unwrap(), false);
        let gem = g.pool(x, PoolKind::Gem, p).unwrap();
        let v = g.value(gem).data()[0];
        let lower = max * (1.0 / n as f64).powf(1.0 / p);
        prop_assert!(v <= max * (1.0 + 1e-12));
        prop_assert!(v >= lower * (1.0 - 1e-12));
    }
}
