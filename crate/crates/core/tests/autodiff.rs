use std::sync::Arc;

use fedalign::numkernel::{finite_diff_grad, relative_error, BlockSparse, CeTarget, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// relu(x·W1)·W2 → sum of squares
fn two_layer(tape: &mut Tape, x: Var, w1: Var, w2: Var) -> Var {
    let h = tape.matmul(x, w1).unwrap();
    let h = tape.relu(h).unwrap();
    let o = tape.matmul(h, w2).unwrap();
    let sq = tape.square(o).unwrap();
    tape.sum(sq).unwrap()
}

fn eval_two_layer(x: &Tensor, w1: &Tensor, w2: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let (x, w1, w2) = (tape.leaf(x.clone()), tape.leaf(w1.clone()), tape.leaf(w2.clone()));
    let l = two_layer(&mut tape, x, w1, w2);
    tape.value(l).item()
}

#[test]
fn two_layer_net_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&[4, 3], &mut rng);
    let w1 = random(&[3, 5], &mut rng);
    let w2 = random(&[5, 2], &mut rng);
    let mut tape = Tape::new();
    let (vx, v1, v2) = (tape.leaf(x.clone()), tape.leaf(w1.clone()), tape.leaf(w2.clone()));
    let l = two_layer(&mut tape, vx, v1, v2);
    let g = tape.backward(l, &[v1, v2]).unwrap();

    // keep away from ReLU kinks
    let pre = x.matmul(&w1);
    assert!(pre.data().iter().all(|v| v.abs() > 1e-4));

    let fd1 = finite_diff_grad(|w| eval_two_layer(&x, w, &w2), &w1, 1e-5);
    let fd2 = finite_diff_grad(|w| eval_two_layer(&x, &w1, w), &w2, 1e-5);
    assert!(relative_error(&g[0], &fd1, 1e-12) < 1e-5);
    assert!(relative_error(&g[1], &fd2, 1e-12) < 1e-5);
}

fn ce_graph(tape: &mut Tape, x: Var, w: Var, sp: &Arc<BlockSparse>, target: &Arc<CeTarget>) -> Var {
    // z = gather(x·w) with w holding one (3 × width) block per relation
    let xw = tape.matmul(x, w).unwrap();
    let z = tape.gather(xw, sp.clone()).unwrap();
    tape.softmax_cross_entropy(z, target.clone()).unwrap()
}

#[test]
fn cross_entropy_through_sparse_gather_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let sp = Arc::new(BlockSparse::new(
        4,
        4,
        2,
        vec![(0, 1, 0, 1.0), (0, 2, 1, 0.5), (0, 3, 1, 0.5), (2, 0, 0, 1.0), (3, 3, 1, 1.0)],
    ));
    let target = Arc::new(CeTarget {
        rows: vec![0, 2, 3],
        labels: vec![1, 0, 2],
    });
    let x = random(&[4, 3], &mut rng);
    let w = random(&[3, 6], &mut rng);
    let f = |x: &Tensor, w: &Tensor| {
        let mut tape = Tape::new();
        let (vx, vw) = (tape.leaf(x.clone()), tape.leaf(w.clone()));
        let l = ce_graph(&mut tape, vx, vw, &sp, &target);
        tape.value(l).item()
    };
    let mut tape = Tape::new();
    let (vx, vw) = (tape.leaf(x.clone()), tape.leaf(w.clone()));
    let l = ce_graph(&mut tape, vx, vw, &sp, &target);
    let g = tape.backward(l, &[vx, vw]).unwrap();
    let fdx = finite_diff_grad(|t| f(t, &w), &x, 1e-5);
    let fdw = finite_diff_grad(|t| f(&x, t), &w, 1e-5);
    assert!(relative_error(&g[0], &fdx, 1e-12) < 1e-6);
    assert!(relative_error(&g[1], &fdw, 1e-12) < 1e-6);
}

/// ‖∇ₓ f(w, x)‖₂ with f = cross-entropy of relu(x·w1)·w2.
fn grad_norm(tape: &mut Tape, x: Var, w1: Var, w2: Var, target: &Arc<CeTarget>) -> Var {
    let h = tape.matmul(x, w1).unwrap();
    let h = tape.relu(h).unwrap();
    let z = tape.matmul(h, w2).unwrap();
    let f = tape.softmax_cross_entropy(z, target.clone()).unwrap();
    let gx = tape.grad(f, &[x]).unwrap()[0];
    tape.l2_norm(gx).unwrap()
}

#[test]
fn second_order_gradient_of_input_gradient_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let target = Arc::new(CeTarget {
        rows: vec![0, 1, 3],
        labels: vec![2, 0, 1],
    });
    let x = random(&[4, 3], &mut rng);
    let w1 = random(&[3, 5], &mut rng);
    let w2 = random(&[5, 3], &mut rng);
    let eval = |w1: &Tensor, w2: &Tensor| {
        let mut tape = Tape::new();
        let (vx, v1, v2) = (tape.leaf(x.clone()), tape.leaf(w1.clone()), tape.leaf(w2.clone()));
        let n = grad_norm(&mut tape, vx, v1, v2, &target);
        tape.value(n).item()
    };
    let mut tape = Tape::new();
    let (vx, v1, v2) = (tape.leaf(x.clone()), tape.leaf(w1.clone()), tape.leaf(w2.clone()));
    let n = grad_norm(&mut tape, vx, v1, v2, &target);
    let g = tape.backward(n, &[v1, v2]).unwrap();
    let fd1 = finite_diff_grad(|t| eval(t, &w2), &w1, 1e-5);
    let fd2 = finite_diff_grad(|t| eval(&w1, t), &w2, 1e-5);
    assert!(relative_error(&g[0], &fd1, 1e-12) < 1e-3, "{}", relative_error(&g[0], &fd1, 1e-12));
    assert!(relative_error(&g[1], &fd2, 1e-12) < 1e-3);
}

#[test]
fn identical_tapes_are_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[3, 3], &mut rng);
        let w1 = random(&[3, 4], &mut rng);
        let w2 = random(&[4, 2], &mut rng);
        let mut tape = Tape::new();
        let (vx, v1, v2) = (tape.leaf(x), tape.leaf(w1), tape.leaf(w2));
        let l = two_layer(&mut tape, vx, v1, v2);
        let g = tape.backward(l, &[v1, v2]).unwrap();
        let mut bits = vec![tape.value(l).item().to_bits()];
        for t in g {
            bits.extend(t.data().iter().map(|v| v.to_bits()));
        }
        bits
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn backward_is_linear(seed in 0u64..10_000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[3, 2], &mut rng);
        let w = random(&[2, 2], &mut rng);
        let mut tape = Tape::new();
        let (vx, vw) = (tape.leaf(x), tape.leaf(w));
        let xw = tape.matmul(vx, vw).unwrap();
        let sq = tape.square(xw).unwrap();
        let f = tape.sum(sq).unwrap();
        let r = tape.relu(xw).unwrap();
        let g = tape.sum(r).unwrap();
        let fa = tape.scale(f, a).unwrap();
        let gb = tape.scale(g, b).unwrap();
        let comb = tape.add(fa, gb).unwrap();
        let dc = tape.backward(comb, &[vw]).unwrap().remove(0);
        let df = tape.backward(f, &[vw]).unwrap().remove(0);
        let dg = tape.backward(g, &[vw]).unwrap().remove(0);
        for i in 0..dc.len() {
            let expect = a * df.data()[i] + b * dg.data()[i];
            prop_assert!((dc.data()[i] - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
        }
    }

    #[test]
    fn composed_ops_match_finite_differences(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[3, 2], &mut rng);
        let w = random(&[2, 3], &mut rng);
        let c = random(&[3, 3], &mut rng);
        let f = |w: &Tensor| {
            let mut tape = Tape::new();
            let (vx, vw, vc) = (tape.leaf(x.clone()), tape.leaf(w.clone()), tape.leaf(c.clone()));
            let l = composed(&mut tape, vx, vw, vc);
            tape.value(l).item()
        };
        let mut tape = Tape::new();
        let (vx, vw, vc) = (tape.leaf(x.clone()), tape.leaf(w.clone()), tape.leaf(c.clone()));
        let l = composed(&mut tape, vx, vw, vc);
        let g = tape.backward(l, &[vw]).unwrap().remove(0);
        let fd = finite_diff_grad(f, &w, 1e-5);
        prop_assert!(relative_error(&g, &fd, 1e-8) < 1e-4);
    }
}

/// Smooth composition of sub, mul, transpose, scale_by, norm.
fn composed(tape: &mut Tape, x: Var, w: Var, c: Var) -> Var {
    let xw = tape.matmul(x, w).unwrap();
    let d = tape.sub(xw, c).unwrap();
    let t = tape.transpose(d).unwrap();
    let m = tape.mul(t, t).unwrap();
    let n = tape.l2_norm(d).unwrap();
    let s = tape.scale_by(m, n).unwrap();
    let s = tape.scale(s, 0.5).unwrap();
    tape.sum(s).unwrap()
}
