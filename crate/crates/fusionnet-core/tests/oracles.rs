//! Spot checks of the tensor engine against the independent oracle
//! implementations, at the specific geometries the engine exercises.

mod common;

use common::*;
use fusionnet_core::params::ParamStore;
use fusionnet_core::tensor::adam::{AdamConfig, AdamState};
use fusionnet_core::tensor::{PoolMode, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn unit_window_sum() {
    // all-ones 3x3 input against an all-ones 3x3 kernel: one output, 9.0
    let mut tape = Tape::new();
    let x = tape.constant(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap();
    let w = tape.constant(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap();
    let out = tape.conv2d(x, w, None, 1, 0, 1).unwrap();
    assert_eq!(tape.data(out), &[9.0]);
}

#[test]
fn identity_kernel_passthrough() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::new();
    let xt = Tensor::rand_uniform(vec![2, 1, 5, 5], -1.0, 1.0, &mut rng);
    let x = tape.leaf(&xt);
    let w = tape.constant(vec![1, 1, 1, 1], vec![1.0]).unwrap();
    let out = tape.conv2d(x, w, None, 1, 0, 1).unwrap();
    assert_eq!(tape.data(out), xt.data());
}

#[test]
fn dilated_convolution_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let xt = Tensor::rand_uniform(vec![2, 3, 8, 8], -1.0, 1.0, &mut rng);
    let wt = Tensor::rand_uniform(vec![4, 3, 3, 3], -1.0, 1.0, &mut rng);
    let mut tape = Tape::new();
    let x = tape.leaf(&xt);
    let w = tape.leaf(&wt);
    let out = tape.conv2d(x, w, None, 1, 3, 3).unwrap();
    let (reference, rs) = conv2d_reference(
        xt.data(),
        &[2, 3, 8, 8],
        wt.data(),
        &[4, 3, 3, 3],
        None,
        1,
        3,
        3,
    );
    assert_eq!(tape.shape(out), rs);
    assert!(max_abs_diff(tape.data(out), &reference) <= 1e-10);
}

#[test]
fn pooling_matches_loop_oracle_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let xt = Tensor::rand_uniform(vec![1, 2, 6, 6], -1.0, 1.0, &mut rng);
    for (mode, rp) in [(PoolMode::Max, RefPool::Max), (PoolMode::Avg, RefPool::Avg)] {
        let mut tape = Tape::new();
        let x = tape.leaf(&xt);
        let out = tape.pool2d(x, mode, 2, 2).unwrap();
        let (reference, _) = pool2d_reference(xt.data(), &[1, 2, 6, 6], rp, 2, 2);
        assert_eq!(tape.data(out), reference.as_slice());
    }
}

#[test]
fn pool_fixture_values() {
    let mut tape = Tape::new();
    let x = tape.constant(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let mx = tape.pool2d(x, PoolMode::Max, 2, 2).unwrap();
    let av = tape.pool2d(x, PoolMode::Avg, 2, 2).unwrap();
    assert_eq!(tape.data(mx), &[4.0]);
    assert_eq!(tape.data(av), &[2.5]);
}

#[test]
fn batch_norm_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let xt = Tensor::rand_uniform(vec![2, 3, 4, 4], -2.0, 2.0, &mut rng);
    let gt = Tensor::rand_uniform(vec![3], 0.5, 1.5, &mut rng);
    let bt = Tensor::rand_uniform(vec![3], -0.5, 0.5, &mut rng);
    let mut tape = Tape::new();
    let x = tape.leaf(&xt);
    let g = tape.leaf(&gt);
    let b = tape.leaf(&bt);
    let (out, _) = tape.batch_norm_train(x, g, b, 1e-5).unwrap();
    let reference = batchnorm_reference(xt.data(), &[2, 3, 4, 4], gt.data(), bt.data(), 1e-5);
    assert!(max_abs_diff(tape.data(out), &reference) <= 1e-10);
}

#[test]
fn uniform_logits_loss_is_ln_two() {
    let mut tape = Tape::new();
    let logits = tape.constant(vec![1, 2], vec![0.0, 0.0]).unwrap();
    for target in [0usize, 1] {
        let loss = tape.weighted_cross_entropy(logits, &[target], [1.0, 1.0]).unwrap();
        assert!((tape.data(loss)[0] - std::f64::consts::LN_2).abs() < 1e-12);
    }
}

#[test]
fn weights_cancel_for_symmetric_two_sample_batch() {
    // both samples carry the same (equal-class) logits, one per class:
    // the weighted mean equals the common per-sample loss.
    let mut tape = Tape::new();
    let logits = tape.constant(vec![2, 2], vec![0.7, 0.7, 0.7, 0.7]).unwrap();
    let weighted = tape.weighted_cross_entropy(logits, &[0, 1], [3.0, 1.0]).unwrap();
    let single = tape.weighted_cross_entropy(logits, &[0, 1], [1.0, 1.0]).unwrap();
    assert!((tape.data(weighted)[0] - tape.data(single)[0]).abs() < 1e-15);
    assert!((tape.data(weighted)[0] - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn weighted_cross_entropy_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let lt = Tensor::rand_uniform(vec![8, 2], -3.0, 3.0, &mut rng);
    let targets = [0usize, 1, 1, 1, 0, 1, 0, 1];
    let mut tape = Tape::new();
    let l = tape.leaf(&lt);
    let loss = tape.weighted_cross_entropy(l, &targets, [3.0, 1.0]).unwrap();
    let reference = wce_reference(lt.data(), &targets, [3.0, 1.0]);
    assert!((tape.data(loss)[0] - reference).abs() <= 1e-12);
}

#[test]
fn adam_three_step_trace_matches_scalar_oracle() {
    let grads = [1.0, -1.0, 0.5];
    let reference = adam_reference_scalar(0.3, &grads, 0.01, 0.9, 0.999, 1e-8);
    let mut store = ParamStore::new();
    let id = store.add("p", Tensor::from_vec(vec![1], vec![0.3]).unwrap(), true).unwrap();
    let mut adam = AdamState::new(AdamConfig {
        lr: 0.01,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    });
    let mut trace = Vec::new();
    for g in grads {
        store.tensor_mut(id).grad = Some(vec![g]);
        adam.step(&mut store).unwrap();
        trace.push(store.tensor(id).data()[0]);
    }
    for (a, b) in trace.iter().zip(&reference) {
        assert!((a - b).abs() <= 1e-14, "{a} vs {b}");
    }
}

#[test]
fn backward_fixtures() {
    // d(sum(x))/dx = 1
    let mut tape = Tape::new();
    let xt = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap().with_grad();
    let x = tape.leaf(&xt);
    let loss = tape.sum(x).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);

    // d(sum(x*x))/dx = 2x
    let mut tape = Tape::new();
    let xt = Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap().with_grad();
    let x = tape.leaf(&xt);
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum(sq).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let xt = Tensor::zeros(vec![2, 2]).with_grad();
    let x = tape.leaf(&xt);
    assert!(tape.backward(x).is_err());
}

#[test]
fn unreachable_tensors_keep_no_grad() {
    let mut tape = Tape::new();
    let a = tape.leaf(&Tensor::from_vec(vec![1], vec![2.0]).unwrap().with_grad());
    let b = tape.leaf(&Tensor::from_vec(vec![1], vec![5.0]).unwrap().with_grad());
    let loss = tape.sum(a).unwrap();
    tape.backward(loss).unwrap();
    assert!(tape.grad(a).is_some());
    assert!(tape.grad(b).is_none());
}
