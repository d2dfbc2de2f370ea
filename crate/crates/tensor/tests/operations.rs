//! Direct-evaluation examples for the tensor primitives.

mod common;

use std::sync::Arc;

use agct_tensor::{
    adam_step, AdamConfig, AdamState, ConvSpec, CsrMatrix, Tape, Tensor, TensorError,
};
use common::random;
use proptest::prelude::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn elementwise_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(&t(&[2], &[1.0, -1.0]));
    let sq = tape.square(x);
    let m = tape.mean(sq);
    assert_eq!(tape.scalar(m), 1.0);

    let zero = tape.constant(Tensor::scalar(0.0));
    let y = tape.add(x, zero).unwrap();
    assert_eq!(tape.value(y), &[1.0, -1.0]);

    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::scalar(3.0).with_grad());
    let sq = tape.square(x);
    let g = tape.backward(sq).unwrap();
    assert_eq!(g.get(x).unwrap(), &[6.0]);
}

#[test]
fn shape_mismatch_reports_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[3, 2]));
    let err = tape.add(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
}

#[test]
fn conv_identity_and_zero() {
    let mut tape = Tape::new();
    let x = random(&[2, 1, 5, 4], 1);
    let xv = tape.constant(x.clone());
    let w = tape.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
    let y = tape.conv(xv, w, None, ConvSpec::new(1, 0)).unwrap();
    assert_eq!(tape.value(y), x.data());

    let mut tape = Tape::new();
    let xz = tape.constant(Tensor::zeros(&[1, 2, 4, 4, 4]));
    let k = tape.leaf(&random(&[3, 2, 3, 3, 3], 2).with_grad());
    let y = tape.conv(xz, k, None, ConvSpec::SAME3).unwrap();
    assert!(tape.value(y).iter().all(|&v| v == 0.0));
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    assert!(g.get(k).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_output_size_and_kernel_check() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 1, 9, 7]));
    let w = tape.constant(Tensor::zeros(&[2, 1, 3, 3]));
    let y = tape.conv(x, w, None, ConvSpec::new(2, 1)).unwrap();
    // floor((9 + 2 - 3) / 2) + 1 = 5, floor((7 + 2 - 3) / 2) + 1 = 4
    assert_eq!(tape.shape(y), &[1, 2, 5, 4]);

    let big = tape.constant(Tensor::zeros(&[1, 1, 5, 5]));
    let err = tape.conv(x, big, None, ConvSpec::new(1, 0));
    assert!(err.is_ok());
    let small = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
    let err = tape.conv(small, big, None, ConvSpec::new(1, 1)).unwrap_err();
    assert!(matches!(err, TensorError::KernelTooLarge { .. }));
}

#[test]
fn activation_examples() {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::scalar(0.0));
    let s = tape.sigmoid(z);
    assert_eq!(tape.scalar(s), 0.5);

    let logits = tape.constant(Tensor::full(&[1, 4, 2, 2], 0.3));
    let p = tape.softmax_channels(logits).unwrap();
    assert!(tape.value(p).iter().all(|&v| (v - 0.25).abs() < 1e-15));

    let m = tape.constant(Tensor::scalar(-1.0));
    let l = tape.leaky_relu(m);
    assert_eq!(tape.scalar(l), -0.2);

}

#[test]
fn sigmoid_range_and_softmax_sums() {
    let mut tape = Tape::new();
    let x = random(&[2, 3, 4, 5], 7);
    let big = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * 50.0).collect()).unwrap();
    let xv = tape.constant(big);
    let s = tape.sigmoid(xv);
    assert!(tape.value(s).iter().all(|&v| (0.0..=1.0).contains(&v)));
    let p = tape.softmax_channels(xv).unwrap();
    let v = tape.value(p);
    for b in 0..2 {
        for site in 0..20 {
            let total: f64 = (0..3).map(|c| v[(b * 3 + c) * 20 + site]).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn pool_examples() {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::full(&[1, 2, 4, 6], 3.25));
    let p = tape.avg_pool2(c).unwrap();
    assert_eq!(tape.shape(p), &[1, 2, 2, 3]);
    assert!(tape.value(p).iter().all(|&v| v == 3.25));
    let u = tape.upsample2(p).unwrap();
    let back = tape.avg_pool2(u).unwrap();
    assert_eq!(tape.value(back), tape.value(p));

    let sq = tape.constant(t(&[1, 1, 2, 2], &[1.0, 3.0, 5.0, 7.0]));
    let m = tape.avg_pool2(sq).unwrap();
    assert_eq!(tape.value(m), &[4.0]);

    let odd = tape.constant(Tensor::zeros(&[1, 1, 3, 4]));
    assert!(matches!(tape.avg_pool2(odd), Err(TensorError::OddSpatial { .. })));

    let v3 = tape.constant(Tensor::full(&[1, 1, 2, 2, 2], 1.0));
    let w = tape.constant(Tensor::full(&[1, 2, 2, 2, 2], 0.5));
    let up = tape.conv_transpose2(v3, w, None).unwrap();
    assert_eq!(tape.shape(up), &[1, 2, 4, 4, 4]);
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(&random(&[2, 3, 4], 3).with_grad());
    let lonely = tape.leaf(&random(&[3], 4).with_grad());
    let s = tape.sum(x);
    let g = tape.backward(s).unwrap();
    assert!(g.get(x).unwrap().iter().all(|&v| v == 1.0));
    assert!(g.get(lonely).is_none());

    let mut param = random(&[3], 4).with_grad();
    g.accumulate_into(lonely, &mut param).unwrap();
    assert!(param.grad().is_none_or(|g| g.iter().all(|&v| v == 0.0)));

    let err = tape.backward(x).unwrap_err();
    assert!(matches!(err, TensorError::NonScalarLoss { .. }));
}

#[test]
fn repeated_backward_accumulates() {
    let mut param = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad();
    for _ in 0..3 {
        let mut tape = Tape::new();
        let v = tape.leaf(&param);
        let sq = tape.square(v);
        let s = tape.sum(sq);
        tape.backward(s).unwrap().accumulate_into(v, &mut param).unwrap();
    }
    assert_eq!(param.grad().unwrap(), &[6.0, 12.0]);
    param.zero_grad();
    assert_eq!(param.grad().unwrap(), &[0.0, 0.0]);
}

#[test]
fn every_path_node_gets_a_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(&random(&[4], 9).with_grad());
    let a = tape.square(x);
    let b = tape.sigmoid(a);
    let c = tape.mean(b);
    let g = tape.backward(c).unwrap();
    for v in [x, a, b, c] {
        assert!(g.get(v).is_some());
    }
    let g = tape.backward_leaves(c).unwrap();
    assert!(g.get(x).is_some() && g.get(a).is_none());
}

/// Reference Adam written independently of the library routine.
#[allow(clippy::too_many_arguments)]
fn adam_oracle(p: &mut [f64], m: &mut [f64], v: &mut [f64], t: i32, g: &[f64], lr: f64, b1: f64, b2: f64, eps: f64) {
    for i in 0..p.len() {
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        let mh = m[i] / (1.0 - b1.powi(t));
        let vh = v[i] / (1.0 - b2.powi(t));
        p[i] -= lr * mh / (vh.sqrt() + eps);
    }
}

#[test]
fn adam_matches_reference_over_two_steps() {
    let cfg = AdamConfig::new(2e-4, 0.5, 0.999);
    let p0 = random(&[7], 11).into_data();
    let g = random(&[7], 12).into_data();
    let mut state = AdamState::new(7, cfg);
    let mut p = p0.clone();
    let (mut q, mut m, mut v) = (p0.clone(), vec![0.0; 7], vec![0.0; 7]);
    for t in 1..=2 {
        adam_step(&mut state, &mut p, &g).unwrap();
        adam_oracle(&mut q, &mut m, &mut v, t, &g, cfg.lr, cfg.beta1, cfg.beta2, cfg.epsilon);
    }
    assert_eq!(state.t, 2);
    for (a, b) in p.iter().zip(&q) {
        assert!((a - b).abs() < 1e-12);
    }
}

fn random_matrix(rows: usize, cols: usize, seed: u64) -> CsrMatrix {
    let w = random(&[rows, cols], seed);
    let mask = random(&[rows, cols], seed + 1);
    let entries = (0..rows)
        .map(|r| {
            (0..cols)
                .filter(|&c| mask.data()[r * cols + c] > 0.4)
                .map(|c| (c as u32, w.data()[r * cols + c].abs()))
                .collect()
        })
        .collect();
    CsrMatrix::from_rows(cols, entries).unwrap()
}

#[test]
fn sparse_adjoint_identity() {
    let m = random_matrix(30, 17, 21);
    for seed in 0..20 {
        let x = random(&[17], 100 + seed).into_data();
        let y = random(&[30], 200 + seed).into_data();
        let mx = m.apply(&x, false).unwrap();
        let mty = m.apply(&y, true).unwrap();
        let lhs: f64 = mx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&mty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() / (lhs.abs() + 1e-30) < 1e-12);
    }
}

#[test]
fn sparse_backward_is_transpose_apply() {
    let m = Arc::new(random_matrix(12, 9, 31));
    let mut tape = Tape::new();
    let x = tape.leaf(&random(&[9], 32).with_grad());
    let y = tape.sparse_apply(&m, x, false).unwrap();
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    let expected = m.apply(&[1.0; 12], true).unwrap();
    assert_eq!(g.get(x).unwrap(), expected.as_slice());
}

#[test]
fn deterministic_repeat_is_bit_identical() {
    let run = || {
        let mut tape = Tape::new();
        let x = tape.leaf(&random(&[3, 2, 6, 6, 6], 41).with_grad());
        let w = tape.leaf(&random(&[4, 2, 3, 3, 3], 42).with_grad());
        let y = tape.conv(x, w, None, ConvSpec::SAME3).unwrap();
        let s = tape.square(y);
        let l = tape.mean(s);
        let g = tape.backward(l).unwrap();
        (tape.scalar(l).to_bits(), g.get(w).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn sparse_apply_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let m = random_matrix(11, 8, seed);
        let x = random(&[8], seed + 7).into_data();
        let y = random(&[8], seed + 9).into_data();
        let combo: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let lhs = m.apply(&combo, false).unwrap();
        let mx = m.apply(&x, false).unwrap();
        let my = m.apply(&y, false).unwrap();
        for i in 0..lhs.len() {
            let rhs = a * mx[i] + b * my[i];
            prop_assert!((lhs[i] - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
        }
    }

    #[test]
    fn tensor_length_matches_shape(dims in proptest::collection::vec(1usize..5, 1..4)) {
        let n: usize = dims.iter().product();
        prop_assert!(Tensor::new(dims.clone(), vec![0.0; n]).is_ok());
        prop_assert!(Tensor::new(dims, vec![0.0; n + 1]).is_err());
    }
}
