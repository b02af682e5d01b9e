use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::finite_diff_check;
use super::ops::{cross_entropy_smoothed, embedding_lookup, quantize_frozen_op, quantize_op};
use super::{Elem, Mask, Tensor};
use crate::error::Error;

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(shape, data.to_vec()).unwrap()
}

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

// ── matmul ──────────────────────────────────────────────────────────

#[test]
fn matmul_identity() {
    let i2 = t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
    let m = t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let y = i2.matmul(&m).unwrap();
    assert_eq!(y.data_vec(), vec![1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_projector_row_selection() {
    let p = t64(&[2, 2], &[1.0, 0.0, 0.0, 0.0]);
    let m = t64(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
    let y = p.matmul(&m).unwrap();
    assert_eq!(y.data_vec(), vec![5.0, 6.0, 0.0, 0.0]);
}

#[test]
fn matmul_matches_triple_loop_oracle_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for &(m, k, n) in &[(3usize, 4usize, 2usize), (16, 16, 16), (7, 13, 5)] {
        let a = rand_t(&[m, k], &mut rng, -1.0, 1.0);
        let b = rand_t(&[k, n], &mut rng, -1.0, 1.0);
        let y = a.matmul(&b).unwrap();
        let (ad, bd) = (a.data_vec(), b.data_vec());
        let mut expect = vec![0.0f64; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += ad[i * k + p] * bd[p * n + j];
                }
                expect[i * n + j] = s;
            }
        }
        assert_eq!(y.data_vec(), expect, "shape {m}x{k}x{n}");
    }
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let a = Tensor::<f64>::zeros(&[2, 3]);
    let b = Tensor::<f64>::zeros(&[4, 2]);
    let err = a.matmul(&b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

// ── elementwise ─────────────────────────────────────────────────────

#[test]
fn odd_activations_are_zero_at_zero() {
    let x = Tensor::<f64>::zeros(&[3]);
    assert_eq!(x.silu().unwrap().data_vec(), vec![0.0; 3]);
    assert_eq!(x.gelu().unwrap().data_vec(), vec![0.0; 3]);
    assert_eq!(x.tanh_op().unwrap().data_vec(), vec![0.0; 3]);
}

#[test]
fn silu_at_one_matches_scalar_oracle() {
    // independent evaluation of 1·σ(1) = 1/(1+e⁻¹)
    let oracle = 1.0 / (1.0 + (-1.0f64).exp());
    let y = Tensor::scalar(1.0f64).silu().unwrap().item();
    assert!((y - oracle).abs() < 1e-15, "{y} vs {oracle}");
}

#[test]
fn broadcast_rules() {
    let a = t64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let v = t64(&[3], &[10.0, 20.0, 30.0]);
    let y = a.add(&v).unwrap();
    assert_eq!(y.data_vec(), vec![11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
    let s = Tensor::scalar(2.0);
    assert_eq!(
        a.mul(&s).unwrap().data_vec(),
        vec![2.0, 4.0, 6.0, 8.0, 10.0, 12.0]
    );
    // non-broadcastable
    let bad = Tensor::<f64>::zeros(&[2]);
    let err = a.add(&bad).unwrap_err();
    assert!(matches!(err, Error::Shape { .. }));
}

// ── softmax ─────────────────────────────────────────────────────────

#[test]
fn softmax_uniform_row() {
    let x = Tensor::<f64>::zeros(&[3]);
    let y = x.softmax_lastdim(None).unwrap().data_vec();
    for v in y {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn softmax_symmetric_under_mask() {
    let x = t64(&[1, 3], &[10.0, 10.0, 123.0]);
    let mask = Mask::Explicit(vec![true, true, false]);
    let y = x.softmax_lastdim(Some(&mask)).unwrap().data_vec();
    assert!((y[0] - 0.5).abs() < 1e-15);
    assert!((y[1] - 0.5).abs() < 1e-15);
    assert_eq!(y[2], 0.0);
}

#[test]
fn softmax_rows_sum_to_one_and_shift_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_t(&[5], &mut rng, -4.0, 4.0);
    let y = x.softmax_lastdim(None).unwrap().data_vec();
    let sum: f64 = y.iter().sum();
    assert!((sum - 1.0).abs() < 1e-12);
    // invariance to adding a constant
    let shifted: Vec<f64> = x.data_vec().iter().map(|v| v + 3.21).collect();
    let ys = Tensor::from_vec(&[5], shifted)
        .unwrap()
        .softmax_lastdim(None)
        .unwrap()
        .data_vec();
    for (a, b) in y.iter().zip(ys.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn softmax_all_masked_row_is_an_error() {
    let x = t64(&[1, 2], &[1.0, 2.0]);
    let mask = Mask::Explicit(vec![false, false]);
    let err = x.softmax_lastdim(Some(&mask)).unwrap_err();
    assert!(matches!(err, Error::AllMaskedRow { row: 0 }));
}

#[test]
fn softmax_causal_lower_triangle() {
    let x = Tensor::<f64>::zeros(&[3, 3]);
    let y = x.softmax_lastdim(Some(&Mask::Causal)).unwrap().data_vec();
    // row t is uniform over t+1 entries
    assert!((y[0] - 1.0).abs() < 1e-15 && y[1] == 0.0 && y[2] == 0.0);
    assert!((y[3] - 0.5).abs() < 1e-15 && (y[4] - 0.5).abs() < 1e-15 && y[5] == 0.0);
    for v in &y[6..9] {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

// ── backward ────────────────────────────────────────────────────────

#[test]
fn backward_of_sum_is_ones() {
    let x = Tensor::from_vec(&[2, 3], vec![1.0f64, -2.0, 0.5, 3.0, 4.0, -1.0])
        .unwrap()
        .requires_grad(true);
    x.sum().unwrap().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
}

#[test]
fn backward_of_half_square_sum_is_x() {
    let x = t64(&[4], &[1.0, -2.0, 0.25, 3.0]).requires_grad(true);
    let loss = x.mul(&x).unwrap().sum().unwrap().scale(0.5).unwrap();
    loss.backward().unwrap();
    assert_eq!(x.grad().unwrap(), x.data_vec());
}

#[test]
fn backward_requires_scalar() {
    let x = t64(&[2], &[1.0, 2.0]).requires_grad(true);
    let y = x.mul(&x).unwrap();
    let err = y.backward().unwrap_err();
    assert!(err.to_string().contains("scalar"));
}

#[test]
fn second_backward_without_new_forward_is_rejected() {
    let x = t64(&[2], &[1.0, 2.0]).requires_grad(true);
    let loss = x.mul(&x).unwrap().sum().unwrap();
    loss.backward().unwrap();
    let err = loss.backward().unwrap_err();
    assert!(err.to_string().contains("consumed"), "{err}");
}

#[test]
fn building_on_consumed_graph_is_rejected() {
    let x = t64(&[2], &[1.0, 2.0]).requires_grad(true);
    let y = x.mul(&x).unwrap();
    y.sum().unwrap().backward().unwrap();
    let err = y.sum().unwrap_err();
    assert!(err.to_string().contains("consumed"), "{err}");
}

#[test]
fn fanout_gradients_accumulate() {
    let x = t64(&[3], &[1.0, 2.0, 3.0]).requires_grad(true);
    // loss = sum(x + x) → grad = 2
    x.add(&x).unwrap().sum().unwrap().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0; 3]);
}

#[test]
fn nonparticipating_leaf_has_zero_grad() {
    let x = t64(&[2], &[1.0, 2.0]).requires_grad(true);
    let unused = t64(&[2], &[5.0, 6.0]).requires_grad(true);
    unused.zero_grad();
    x.sum().unwrap().backward().unwrap();
    assert_eq!(unused.grad().unwrap(), vec![0.0, 0.0]);
}

#[test]
fn reverse_order_independence_across_branch_layout() {
    // The same mathematical graph built with the independent branches in the
    // two possible orders must agree to 1e-12.
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let data: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.5..1.5)).collect();
    let r1 = rand_t(&[6], &mut rng, -1.0, 1.0);
    let r2 = rand_t(&[6], &mut rng, -1.0, 1.0);

    let g = |first_silu: bool| -> Vec<f64> {
        let x = Tensor::from_vec(&[6], data.clone())
            .unwrap()
            .requires_grad(true);
        let a = x.silu().unwrap().mul(&r1).unwrap();
        let b = x.tanh_op().unwrap().mul(&r2).unwrap();
        let sum = if first_silu {
            a.add(&b).unwrap()
        } else {
            b.add(&a).unwrap()
        };
        sum.sum().unwrap().backward().unwrap();
        x.grad().unwrap()
    };
    let g1 = g(true);
    let g2 = g(false);
    for (a, b) in g1.iter().zip(g2.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn two_layer_composite_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_t(&[2, 3], &mut rng, -1.0, 1.0);
    let w1 = rand_t(&[4, 3], &mut rng, -1.0, 1.0).requires_grad(true);
    let w2 = rand_t(&[2, 4], &mut rng, -1.0, 1.0).requires_grad(true);
    let r = rand_t(&[2, 2], &mut rng, -1.0, 1.0);
    for p in [&w1, &w2] {
        let f = || {
            x.linear(&w1)?
                .silu()?
                .linear(&w2)?
                .tanh_op()?
                .mul(&r)?
                .sum()
        };
        let err = finite_diff_check(f, p, 1e-5, 1e-8).unwrap();
        assert!(err < 1e-5, "err {err}");
    }
}

// ── finite_diff_check ───────────────────────────────────────────────

#[test]
fn fd_check_linear_function_is_exact() {
    // Central differences are exact for a linear map; only the rounding of
    // the perturbed sums is left, far below any derivative scale.
    let x = t64(&[3], &[1.0, 2.0, 3.0]).requires_grad(true);
    let err = finite_diff_check(|| x.sum(), &x, 1e-5, 1e-8).unwrap();
    assert!(err < 1e-10, "err {err}");
}

#[test]
fn fd_check_quadratic() {
    let x = t64(&[3], &[1.0, 2.0, 3.0]).requires_grad(true);
    let err =
        finite_diff_check(|| x.mul(&x).unwrap().sum().unwrap().scale(0.5), &x, 1e-5, 1e-8).unwrap();
    assert!(err < 1e-7, "err {err}");
}

#[test]
fn fd_check_through_softmax_log() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let x = rand_t(&[4], &mut rng, -2.0, 2.0).requires_grad(true);
    let r = rand_t(&[4], &mut rng, 0.5, 1.5);
    let f = || {
        x.softmax_lastdim(None)?
            .log_op()?
            .mul(&r)?
            .sum()
    };
    let err = finite_diff_check(f, &x, 1e-5, 1e-8).unwrap();
    assert!(err < 1e-5, "err {err}");
}

#[test]
fn fd_check_rejects_nondeterministic_function() {
    use std::cell::Cell;
    let x = t64(&[2], &[1.0, 2.0]).requires_grad(true);
    let counter = Cell::new(0.0f64);
    let f = || {
        counter.set(counter.get() + 1.0);
        x.sum().unwrap().scale(counter.get())
    };
    let err = finite_diff_check(f, &x, 1e-5, 1e-8).unwrap_err();
    assert!(err.to_string().contains("non-deterministic"), "{err}");
}

// ── primitive gradient property ─────────────────────────────────────

fn assert_grad<F>(f: F, x: &Tensor<f64>, label: &str)
where
    F: Fn() -> crate::Result<Tensor<f64>>,
{
    let err = finite_diff_check(f, x, 1e-5, 1e-8).unwrap();
    assert!(err < 1e-5, "{label}: relative grad error {err}");
}

#[test]
fn every_primitive_matches_central_differences_on_100_random_inputs() {
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let r23 = rand_t(&[2, 3], &mut rng, -1.0, 1.0);

        let x = rand_t(&[2, 3], &mut rng, -2.0, 2.0).requires_grad(true);
        assert_grad(|| x.silu()?.mul(&r23)?.sum(), &x, "silu");
        assert_grad(|| x.gelu()?.mul(&r23)?.sum(), &x, "gelu");
        assert_grad(|| x.tanh_op()?.mul(&r23)?.sum(), &x, "tanh");
        assert_grad(|| x.exp_op()?.mul(&r23)?.sum(), &x, "exp");
        assert_grad(|| x.neg()?.mul(&r23)?.sum(), &x, "neg");
        assert_grad(|| x.scale(1.7)?.mul(&r23)?.sum(), &x, "scale");
        assert_grad(|| x.mean(), &x, "mean");

        let xp = rand_t(&[2, 3], &mut rng, 0.3, 3.0).requires_grad(true);
        assert_grad(|| xp.log_op()?.mul(&r23)?.sum(), &xp, "log");

        // binary with all broadcast patterns
        let a = rand_t(&[2, 3], &mut rng, -1.0, 1.0).requires_grad(true);
        let b = rand_t(&[2, 3], &mut rng, -1.0, 1.0).requires_grad(true);
        let v = rand_t(&[3], &mut rng, -1.0, 1.0).requires_grad(true);
        let s = rand_t(&[1], &mut rng, 0.3, 1.5).requires_grad(true);
        assert_grad(|| a.mul(&b)?.mul(&r23)?.sum(), &a, "mul lhs");
        assert_grad(|| a.mul(&b)?.mul(&r23)?.sum(), &b, "mul rhs");
        assert_grad(|| a.add(&v)?.mul(&r23)?.sum(), &v, "add lastaxis");
        assert_grad(|| a.sub(&s)?.mul(&r23)?.sum(), &s, "sub scalar");
        assert_grad(|| a.mul(&v)?.mul(&r23)?.sum(), &v, "mul lastaxis");

        // matmul / linear
        let ma = rand_t(&[2, 4], &mut rng, -1.0, 1.0).requires_grad(true);
        let mb = rand_t(&[4, 3], &mut rng, -1.0, 1.0).requires_grad(true);
        assert_grad(|| ma.matmul(&mb)?.mul(&r23)?.sum(), &ma, "matmul A");
        assert_grad(|| ma.matmul(&mb)?.mul(&r23)?.sum(), &mb, "matmul B");
        let w = rand_t(&[3, 4], &mut rng, -1.0, 1.0).requires_grad(true);
        assert_grad(|| ma.linear(&w)?.mul(&r23)?.sum(), &ma, "linear x");
        assert_grad(|| ma.linear(&w)?.mul(&r23)?.sum(), &w, "linear w");

        // batched matmuls
        let ba = rand_t(&[2, 2, 3], &mut rng, -1.0, 1.0).requires_grad(true);
        let bb = rand_t(&[2, 3, 2], &mut rng, -1.0, 1.0).requires_grad(true);
        let br = rand_t(&[2, 2, 2], &mut rng, -1.0, 1.0);
        assert_grad(|| ba.bmm_nn(&bb)?.mul(&br)?.sum(), &ba, "bmm_nn A");
        assert_grad(|| ba.bmm_nn(&bb)?.mul(&br)?.sum(), &bb, "bmm_nn B");
        let bt = rand_t(&[2, 2, 3], &mut rng, -1.0, 1.0).requires_grad(true);
        assert_grad(|| ba.bmm_nt(&bt)?.mul(&br)?.sum(), &ba, "bmm_nt A");
        assert_grad(|| ba.bmm_nt(&bt)?.mul(&br)?.sum(), &bt, "bmm_nt B");

        // softmax (masked and unmasked)
        let sm = rand_t(&[3, 3], &mut rng, -2.0, 2.0).requires_grad(true);
        let rr = rand_t(&[3, 3], &mut rng, -1.0, 1.0);
        assert_grad(|| sm.softmax_lastdim(None)?.mul(&rr)?.sum(), &sm, "softmax");
        assert_grad(
            || sm.softmax_lastdim(Some(&Mask::Causal))?.mul(&rr)?.sum(),
            &sm,
            "softmax causal",
        );

        // rope
        let rx = rand_t(&[2, 3, 4], &mut rng, -1.0, 1.0).requires_grad(true);
        let rw = rand_t(&[2, 3, 4], &mut rng, -1.0, 1.0);
        let positions: Vec<usize> = vec![0, 1, 2];
        assert_grad(
            || rx.rope_apply(&positions, 100.0)?.mul(&rw)?.sum(),
            &rx,
            "rope",
        );

        // norms
        let nx = rand_t(&[2, 4], &mut rng, -2.0, 2.0).requires_grad(true);
        let gain = rand_t(&[4], &mut rng, 0.5, 1.5).requires_grad(true);
        let nr = rand_t(&[2, 4], &mut rng, -1.0, 1.0);
        assert_grad(|| nx.rmsnorm(&gain, 1e-6)?.mul(&nr)?.sum(), &nx, "rmsnorm x");
        assert_grad(|| nx.rmsnorm(&gain, 1e-6)?.mul(&nr)?.sum(), &gain, "rmsnorm g");
        assert_grad(|| nx.layernorm(&gain, 1e-6)?.mul(&nr)?.sum(), &nx, "layernorm x");
        assert_grad(|| nx.layernorm(&gain, 1e-6)?.mul(&nr)?.sum(), &gain, "layernorm g");

        // head reshapes + row select
        let hx = rand_t(&[3, 4], &mut rng, -1.0, 1.0).requires_grad(true);
        let hr = rand_t(&[2, 3, 2], &mut rng, -1.0, 1.0);
        assert_grad(|| hx.split_heads(2)?.mul(&hr)?.sum(), &hx, "split_heads");
        let mx = rand_t(&[2, 3, 2], &mut rng, -1.0, 1.0).requires_grad(true);
        let mr = rand_t(&[3, 4], &mut rng, -1.0, 1.0);
        assert_grad(|| mx.merge_heads()?.mul(&mr)?.sum(), &mx, "merge_heads");
        let sr = rand_t(&[4], &mut rng, -1.0, 1.0);
        assert_grad(|| hx.select_row(1)?.mul(&sr)?.sum(), &hx, "select_row");

        // embedding
        let table = rand_t(&[5, 3], &mut rng, -1.0, 1.0).requires_grad(true);
        let ids = [0u32, 3, 3, 1];
        let er = rand_t(&[4, 3], &mut rng, -1.0, 1.0);
        assert_grad(
            || embedding_lookup(&table, &ids)?.mul(&er)?.sum(),
            &table,
            "embedding",
        );

        // label-smoothed cross entropy
        let logits = rand_t(&[3, 5], &mut rng, -2.0, 2.0).requires_grad(true);
        let targets = [1u32, 4, 0];
        assert_grad(
            || cross_entropy_smoothed(&logits, &targets, 0.1),
            &logits,
            "cross_entropy",
        );

        // frozen-sign quantize surrogate: both alpha and latent w
        let qw = rand_t(&[3, 4], &mut rng, -1.0, 1.0).requires_grad(true);
        let alpha = rand_t(&[1], &mut rng, 0.2, 1.0).requires_grad(true);
        let tau = crate::quant::compute_threshold(&qw.data());
        let signs = Rc::new(crate::quant::ternary_sign(&qw.data(), tau));
        let w_base = qw.data_vec();
        let qr = rand_t(&[3, 4], &mut rng, -1.0, 1.0);
        let fq = || {
            quantize_frozen_op(&qw, &alpha, Rc::clone(&signs), &w_base, true)?
                .mul(&qr)?
                .sum()
        };
        assert_grad(fq, &qw, "quantize w (STE surrogate)");
        assert_grad(fq, &alpha, "quantize alpha");
    }
}

#[test]
fn quantize_op_value_is_alpha_times_signs() {
    let w = t64(&[2, 2], &[0.9, -0.1, -2.0, 0.0]).requires_grad(true);
    let alpha = Tensor::scalar(2.0f64).requires_grad(true);
    let signs = Rc::new(vec![1i8, 0, -1, 1]);
    let wq = quantize_op(&w, &alpha, signs, true).unwrap();
    assert_eq!(wq.data_vec(), vec![2.0, 0.0, -2.0, 2.0]);
}

#[test]
fn no_grad_skips_node_recording() {
    let x = t64(&[2], &[1.0, 2.0]).requires_grad(true);
    let y = super::no_grad(|| x.mul(&x).unwrap());
    assert!(y.is_leaf());
    assert!(!y.requires_grad_flag());
}
