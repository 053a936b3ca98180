mod common;

use common::{check_gradients, probe_weights, random_tensor, rng};
use llavul::numerics::{AttentionLayout, Graph, Tensor};
use rand::Rng;

const TOL: f64 = 1e-4;
const H: f64 = 1e-5;

#[test]
fn matmul_gradients() {
    let mut r = rng(1);
    let a = random_tensor(&mut r, vec![3, 4], 1.0);
    let b = random_tensor(&mut r, vec![4, 2], 1.0);
    let w = probe_weights(&mut r, 6);
    let (err, n) = check_gradients(
        &[a, b],
        |g, v| {
            let c = g.matmul(v[0], v[1]).unwrap();
            g.weighted_sum(c, w.clone()).unwrap()
        },
        H,
        100,
    );
    assert_eq!(n, 20);
    assert!(err < TOL, "relative error {err}");
}

#[test]
fn transposed_matmul_gradients() {
    let mut r = rng(2);
    let a = random_tensor(&mut r, vec![5, 3], 1.0);
    let b = random_tensor(&mut r, vec![4, 3], 1.0);
    let w = probe_weights(&mut r, 20);
    let (err, _) = check_gradients(
        &[a, b],
        |g, v| {
            let c = g.matmul_ex(v[0], v[1], true).unwrap();
            g.weighted_sum(c, w.clone()).unwrap()
        },
        H,
        100,
    );
    assert!(err < TOL, "relative error {err}");
}

#[test]
fn elementwise_and_norm_gradients() {
    let mut r = rng(3);
    let x = random_tensor(&mut r, vec![4, 6], 2.0);
    let gain = random_tensor(&mut r, vec![6], 1.5);
    let bias = random_tensor(&mut r, vec![6], 0.5);
    let other = random_tensor(&mut r, vec![4, 6], 1.0);
    let w = probe_weights(&mut r, 24);
    let (err, n) = check_gradients(
        &[x, gain, bias, other],
        |g, v| {
            let ln = g.layer_norm(v[0], v[1], v[2]).unwrap();
            let act = g.gelu(ln);
            let biased = g.add_bias(act, v[2]).unwrap();
            let sum = g.add(biased, v[3]).unwrap();
            let scaled = g.scale(sum, 0.7);
            g.weighted_sum(scaled, w.clone()).unwrap()
        },
        H,
        100,
    );
    assert!(n >= 36);
    assert!(err < TOL, "relative error {err}");
}

#[test]
fn softmax_gradients_on_both_axes() {
    let mut r = rng(4);
    let x = random_tensor(&mut r, vec![3, 5], 2.0);
    let w = probe_weights(&mut r, 15);
    for axis in [0, 1] {
        let (err, _) = check_gradients(
            std::slice::from_ref(&x),
            |g, v| {
                let s = g.softmax(v[0], axis).unwrap();
                g.weighted_sum(s, w.clone()).unwrap()
            },
            H,
            100,
        );
        assert!(err < TOL, "axis {axis}: relative error {err}");
    }
}

#[test]
fn row_plumbing_gradients() {
    let mut r = rng(5);
    let table = random_tensor(&mut r, vec![6, 3], 1.0);
    let extra = random_tensor(&mut r, vec![2, 3], 1.0);
    let w = probe_weights(&mut r, 7 * 3);
    let (err, _) = check_gradients(
        &[table, extra],
        |g, v| {
            let e = g.embedding(v[0], &[1, 4, 1, 0]).unwrap();
            let c = g.concat_rows(&[e, v[1]]).unwrap();
            let gathered = g.gather_rows(c, vec![Some(5), None, Some(0), Some(2), Some(2), Some(4), Some(1)]).unwrap();
            let t = g.transpose(gathered).unwrap();
            let t = g.transpose(t).unwrap();
            g.weighted_sum(t, w.clone()).unwrap()
        },
        H,
        100,
    );
    assert!(err < TOL, "relative error {err}");
}

#[test]
fn pooling_gradients() {
    let mut r = rng(6);
    let x = random_tensor(&mut r, vec![7, 4], 1.0);
    let w = probe_weights(&mut r, 8);
    let (err, _) = check_gradients(
        &[x],
        |g, v| {
            let m = g.mean_rows(v[0], vec![(0, 3), (3, 4)]).unwrap();
            g.weighted_sum(m, w.clone()).unwrap()
        },
        H,
        100,
    );
    assert!(err < TOL, "relative error {err}");
}

#[test]
fn attention_gradients_causal_and_padded() {
    let mut r = rng(7);
    // two packed sequences of length 5, the second padded after 3 tokens
    let q = random_tensor(&mut r, vec![10, 8], 1.0);
    let k = random_tensor(&mut r, vec![10, 8], 1.0);
    let v = random_tensor(&mut r, vec![10, 8], 1.0);
    let w = probe_weights(&mut r, 80);
    for causal in [true, false] {
        let layout = AttentionLayout { heads: 2, seq: 5, lens: vec![5, 3], causal };
        let (err, n) = check_gradients(
            &[q.clone(), k.clone(), v.clone()],
            |g, vars| {
                let o = g.attention(vars[0], vars[1], vars[2], layout.clone()).unwrap();
                g.weighted_sum(o, w.clone()).unwrap()
            },
            H,
            100,
        );
        assert_eq!(n, 240);
        assert!(err < TOL, "causal={causal}: relative error {err}");
    }
}

#[test]
fn cross_entropy_gradients() {
    let mut r = rng(8);
    let logits = random_tensor(&mut r, vec![6, 5], 3.0);
    let targets: Vec<usize> = (0..6).map(|_| r.random_range(0..5)).collect();
    let mask = vec![true, false, true, true, false, true];
    let (err, _) = check_gradients(
        &[logits],
        |g, v| g.cross_entropy(v[0], &targets, &mask).unwrap(),
        H,
        100,
    );
    assert!(err < TOL, "relative error {err}");
}

#[test]
fn causal_attention_ignores_the_future() {
    let mut r = rng(9);
    let t = 8;
    let base: Vec<Tensor<f64>> = (0..3).map(|_| random_tensor(&mut r, vec![t, 8], 1.0)).collect();
    let run = |inputs: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let v: Vec<_> = inputs.iter().map(|x| g.input(x.clone(), false)).collect();
        let layout = AttentionLayout { heads: 4, seq: t, lens: vec![t], causal: true };
        let o = g.attention(v[0], v[1], v[2], layout).unwrap();
        g.value(o).to_vec()
    };
    let reference = run(&base);
    for cut in 0..t - 1 {
        let mut perturbed = base.clone();
        for x in perturbed.iter_mut() {
            for i in (cut + 1) * 8..t * 8 {
                x.data_mut()[i] += r.random_range(-3.0..3.0);
            }
        }
        let out = run(&perturbed);
        for i in 0..(cut + 1) * 8 {
            assert_eq!(out[i].to_bits(), reference[i].to_bits(), "position {} changed", i / 8);
        }
        assert_ne!(&out[(cut + 1) * 8..], &reference[(cut + 1) * 8..]);
    }
}
