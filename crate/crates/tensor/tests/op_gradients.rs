//! Finite-difference checks for every differentiable graph op.
//!
//! Each case builds a scalar loss through the op under test, takes analytic
//! gradients, and compares them against central differences on sampled
//! coordinates. A wrong backward rule anywhere in the engine fails here.

use std::collections::BTreeMap;

use faceforge_tensor::gradcheck::check_gradients;
use faceforge_tensor::nn::{normal_init, GroupNorm, LayerNorm, MultiHeadAttention};
use faceforge_tensor::rng::rng_from_seed;
use faceforge_tensor::{Graph, ParamStore, Tensor, Unary};

fn check<F>(names: &[&str], store: &mut ParamStore, build: F, tol: f64)
where
    F: Fn(&mut Graph, &ParamStore) -> faceforge_tensor::NodeId,
{
    let run = |s: &ParamStore| -> (f64, BTreeMap<String, Tensor>) {
        let mut g = Graph::new();
        let loss = build(&mut g, s);
        let grads = g.backward(loss);
        (g.value(loss).item(), g.param_grads(&grads))
    };
    let (_, analytic) = run(store);
    let names: Vec<String> = names.iter().map(|s| s.to_string()).collect();
    let report = check_gradients(store, &names, &analytic, 60, 1e-5, 42, &mut |s| run(s).0);
    assert!(
        report.passes(tol),
        "max rel err {} at {:?}",
        report.max_rel_err,
        report.worst
    );
}

fn store_with(entries: &[(&str, &[usize])], seed: u64) -> ParamStore {
    let mut rng = rng_from_seed(seed);
    let mut store = ParamStore::new();
    for (name, shape) in entries {
        store.insert(name, normal_init(&mut rng, shape, 1.0));
    }
    store
}

#[test]
fn elementwise_ops() {
    let mut store = store_with(&[("a", &[3, 4]), ("b", &[3, 4])], 1);
    check(
        &["a", "b"],
        &mut store,
        |g, s| {
            let a = g.param(s, "a");
            let b = g.param(s, "b");
            let sum = g.add(a, b);
            let diff = g.sub(sum, b);
            let prod = g.mul(diff, b);
            let sc = g.scale(prod, 0.7);
            let sh = g.add_scalar(sc, 1.3);
            g.mean_all(sh)
        },
        1e-4,
    );
}

#[test]
fn unary_ops() {
    let mut store = store_with(&[("x", &[2, 5])], 2);
    // keep sqrt/recip inputs positive via square + offset
    check(
        &["x"],
        &mut store,
        |g, s| {
            let x = g.param(s, "x");
            let silu = g.silu(x);
            let sq = g.square(silu);
            let pos = g.add_scalar(sq, 0.5);
            let rt = g.unary(pos, Unary::Sqrt);
            let rc = g.unary(rt, Unary::Recip);
            let th = g.unary(rc, Unary::Tanh);
            let sg = g.unary(th, Unary::Sigmoid);
            let ex = g.unary(sg, Unary::Exp);
            g.mean_all(ex)
        },
        1e-4,
    );
}

#[test]
fn matmul_all_transpose_combos() {
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let shape_a: &[usize] = if ta { &[4, 3] } else { &[3, 4] };
        let shape_b: &[usize] = if tb { &[5, 4] } else { &[4, 5] };
        let mut store = store_with(&[("a", shape_a), ("b", shape_b)], 3);
        check(
            &["a", "b"],
            &mut store,
            move |g, s| {
                let a = g.param(s, "a");
                let b = g.param(s, "b");
                let y = g.matmul(a, b, ta, tb);
                let sq = g.square(y);
                g.mean_all(sq)
            },
            1e-6,
        );
    }
}

#[test]
fn conv2d_stride_and_padding() {
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        let mut store = store_with(&[("x", &[2, 6, 6]), ("w", &[3, 2, 3, 3]), ("bias", &[3])], 4);
        check(
            &["x", "w", "bias"],
            &mut store,
            move |g, s| {
                let x = g.param(s, "x");
                let w = g.param(s, "w");
                let b = g.param(s, "bias");
                let y = g.conv2d(x, w, stride, pad);
                let y = g.add_channel_bias(y, b);
                let y = g.silu(y);
                g.mean_all(y)
            },
            1e-6,
        );
    }
}

#[test]
fn conv2d_matches_naive_direct_convolution() {
    let mut rng = rng_from_seed(9);
    let x = normal_init(&mut rng, &[2, 5, 5], 1.0);
    let w = normal_init(&mut rng, &[3, 2, 3, 3], 1.0);
    let (stride, pad) = (2, 1);
    let mut g = Graph::new();
    let xn = g.constant(x.clone());
    let wn = g.constant(w.clone());
    let y = g.conv2d(xn, wn, stride, pad);
    let yv = g.value(y);
    let (ho, wo) = (3, 3);
    assert_eq!(yv.shape(), &[3, ho, wo]);
    for co in 0..3 {
        for oi in 0..ho {
            for oj in 0..wo {
                let mut acc = 0.0;
                for ci in 0..2 {
                    for ki in 0..3 {
                        for kj in 0..3 {
                            let hi = (oi * stride + ki) as isize - pad as isize;
                            let wi = (oj * stride + kj) as isize - pad as isize;
                            if hi < 0 || hi >= 5 || wi < 0 || wi >= 5 {
                                continue;
                            }
                            acc += x.data()[(ci * 5 + hi as usize) * 5 + wi as usize]
                                * w.data()[((co * 2 + ci) * 3 + ki) * 3 + kj];
                        }
                    }
                }
                let got = yv.data()[(co * ho + oi) * wo + oj];
                assert!((got - acc).abs() < 1e-12, "cell ({co},{oi},{oj})");
            }
        }
    }
}

#[test]
fn spatial_ops() {
    let mut store = store_with(&[("x", &[2, 3, 3]), ("y", &[3, 6, 6]), ("c", &[2])], 5);
    check(
        &["x", "y", "c"],
        &mut store,
        |g, s| {
            let x = g.param(s, "x");
            let y = g.param(s, "y");
            let c = g.param(s, "c");
            let up = g.upsample_nearest(x, 2);
            let xs = g.mul_channel(up, c);
            let cat = g.concat_channels(xs, y);
            let sq = g.square(cat);
            g.mean_all(sq)
        },
        1e-4,
    );
}

#[test]
fn reductions_and_broadcast() {
    let mut store = store_with(&[("x", &[4, 2, 3])], 6);
    check(
        &["x"],
        &mut store,
        |g, s| {
            let x = g.param(s, "x");
            let m = g.mean_last(x, 2);
            let b = g.broadcast_last(m, &[2, 3]);
            let d = g.sub(x, b);
            let sq = g.square(d);
            let t = g.sum_all(sq);
            g.scale(t, 0.25)
        },
        1e-4,
    );
}

#[test]
fn softmax_and_log_softmax() {
    let mut store = store_with(&[("x", &[3, 7])], 7);
    check(
        &["x"],
        &mut store,
        |g, s| {
            let x = g.param(s, "x");
            let sm = g.softmax_last(x);
            let lsm = g.log_softmax_last(x);
            let prod = g.mul(sm, lsm);
            g.sum_all(prod)
        },
        1e-4,
    );
}

#[test]
fn gather_pick_slice_concat() {
    let mut store = store_with(&[("table", &[6, 4]), ("m", &[5, 8])], 8);
    check(
        &["table", "m"],
        &mut store,
        |g, s| {
            let table = g.param(s, "table");
            let m = g.param(s, "m");
            let gathered = g.gather_rows(table, &[0, 3, 5, 3, 1]);
            let left = g.slice_cols(m, 0, 4);
            let right = g.slice_cols(m, 4, 4);
            let joined = g.concat_cols(&[gathered, left, right]);
            let sm = g.softmax_last(joined);
            let picked = g.pick_per_row(sm, &[0, 2, 5, 7, 1]);
            let sq = g.square(picked);
            g.sum_all(sq)
        },
        1e-4,
    );
}

#[test]
fn norm_layers() {
    let mut rng = rng_from_seed(10);
    let mut store = ParamStore::new();
    store.insert("x2", normal_init(&mut rng, &[5, 6], 2.0));
    store.insert("x3", normal_init(&mut rng, &[4, 3, 3], 2.0));
    let ln = LayerNorm::init(&mut store, "ln", 6);
    let gn = GroupNorm::init(&mut store, "gn", 4, 2);
    let names: Vec<&str> = vec!["x2", "x3", "ln.g", "ln.b", "gn.g", "gn.b"];
    check(
        &names,
        &mut store,
        move |g, s| {
            let x2 = g.param(s, "x2");
            let x3 = g.param(s, "x3");
            let a = ln.forward(g, s, x2);
            let b = gn.forward(g, s, x3);
            let am = g.mean_all(a);
            let asq = g.square(am);
            let bsq = g.square(b);
            let bm = g.mean_all(bsq);
            g.add(asq, bm)
        },
        1e-4,
    );
}

#[test]
fn attention_block() {
    let mut rng = rng_from_seed(11);
    let mut store = ParamStore::new();
    store.insert("x", normal_init(&mut rng, &[5, 8], 1.0));
    store.insert("ctx", normal_init(&mut rng, &[3, 6], 1.0));
    let attn = MultiHeadAttention::init(&mut store, &mut rng, "attn", 8, 6, 2);
    let names: Vec<String> = store.names().map(|s| s.to_string()).collect();
    let names: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    check(
        &names,
        &mut store,
        move |g, s| {
            let x = g.param(s, "x");
            let ctx = g.param(s, "ctx");
            let y = attn.forward(g, s, x, Some(ctx));
            let sq = g.square(y);
            g.mean_all(sq)
        },
        1e-4,
    );
}

#[test]
fn detach_blocks_gradient() {
    let store = store_with(&[("a", &[4]), ("b", &[4])], 12);
    let mut g = Graph::new();
    let a = g.param(&store, "a");
    let b = g.param(&store, "b");
    let da = g.detach(a);
    let prod = g.mul(da, b);
    let loss = g.sum_all(prod);
    let grads = g.backward(loss);
    let by_name = g.param_grads(&grads);
    assert!(!by_name.contains_key("a"), "detach leaked a gradient");
    let gb = by_name.get("b").unwrap();
    assert_eq!(gb.data(), store.get("a").data());
    let _ = store; // silence unused-mut lint path
}

#[test]
fn shared_param_accumulates_across_subgraphs() {
    // Two "samples" through the same parameter; grads must sum.
    let store = store_with(&[("w", &[2, 2])], 13);
    let mut g = Graph::new();
    let w = g.param(&store, "w");
    let x1 = g.constant(Tensor::new(&[1, 2], vec![1.0, 2.0]));
    let x2 = g.constant(Tensor::new(&[1, 2], vec![-0.5, 3.0]));
    let y1 = g.matmul(x1, w, false, false);
    let y2 = g.matmul(x2, w, false, false);
    let s1 = g.sum_all(y1);
    let s2 = g.sum_all(y2);
    let total = g.add(s1, s2);
    let grads = g.backward(total);
    let gw = g.param_grads(&grads)["w"].clone();
    // d total / d w[i][j] = x1[i] + x2[i]
    assert!((gw.data()[0] - 0.5).abs() < 1e-12);
    assert!((gw.data()[1] - 0.5).abs() < 1e-12);
    assert!((gw.data()[2] - 5.0).abs() < 1e-12);
    assert!((gw.data()[3] - 5.0).abs() < 1e-12);
    let _ = store;
}
