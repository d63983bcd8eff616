//! Gradient fuzzing: every recorded operation's analytic gradient is
//! compared against central finite differences on random inputs. Inputs
//! are kept away from kinks (relu at 0, clip bounds, ties in max-pool) so
//! the finite-difference reference itself is valid.

use freqlab_core::rng::Rng;
use freqlab_core::tensor::{concat, finite_difference_check, Tape, Tensor, TensorError, Var};
use freqlab_core::Real;
use proptest::prelude::*;
use std::sync::Arc;

const TOL: Real = 1e-4;
const STEP: Real = 1e-4;

/// Weighted sum with fixed pseudo-random weights; keeps the scalar root
/// sensitive to every element (a plain sum has degenerate gradients for
/// softmax-like ops).
fn weighted_sum<'t>(tape: &'t Tape, v: Var<'t>, seed: u64) -> Result<Var<'t>, TensorError> {
    let mut rng = Rng::new(seed);
    let w = tape.constant(Tensor::rand_uniform(&v.shape(), 0.25, 1.75, &mut rng));
    Ok(v.mul(w)?.sum())
}

fn vec_strategy(len: usize, lo: Real, hi: Real) -> impl Strategy<Value = Vec<Real>> {
    proptest::collection::vec(lo..hi, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn grad_elementwise_binary(a in vec_strategy(12, -2.0, 2.0), b in vec_strategy(12, 0.5, 2.5)) {
        let xa = Tensor::new(vec![3, 4], a).unwrap();
        let xb = Tensor::new(vec![3, 4], b).unwrap();
        for op in 0..4 {
            let rhs = xb.clone();
            let err = finite_difference_check(
                move |tape, v| {
                    let o = tape.constant(rhs.clone());
                    let y = match op {
                        0 => v.add(o)?,
                        1 => v.sub(o)?,
                        2 => v.mul(o)?,
                        _ => v.div(o)?,
                    };
                    weighted_sum(tape, y, 7)
                },
                &xa,
                STEP,
            ).unwrap();
            prop_assert!(err < TOL, "binary op {op}: {err}");
            // Also through the second operand (div denominator included).
            let lhs = xa.clone();
            let err2 = finite_difference_check(
                move |tape, v| {
                    let l = tape.constant(lhs.clone());
                    let y = match op {
                        0 => l.add(v)?,
                        1 => l.sub(v)?,
                        2 => l.mul(v)?,
                        _ => l.div(v)?,
                    };
                    weighted_sum(tape, y, 8)
                },
                &xb,
                STEP,
            ).unwrap();
            prop_assert!(err2 < TOL, "binary op {op} rhs: {err2}");
        }
    }

    #[test]
    fn grad_broadcast_bias(a in vec_strategy(3, -1.0, 1.0)) {
        let bias = Tensor::new(vec![3], a).unwrap();
        let err = finite_difference_check(
            |tape, v| {
                let x = tape.constant(Tensor::from_fn(&[4, 3], |i| i as Real * 0.1));
                weighted_sum(tape, x.add(v)?, 9)
            },
            &bias,
            STEP,
        ).unwrap();
        prop_assert!(err < TOL, "broadcast bias: {err}");
    }

    #[test]
    fn grad_scalar_ops(a in vec_strategy(8, -2.0, 2.0), s in -1.5..1.5f64) {
        let x = Tensor::new(vec![8], a).unwrap();
        let err = finite_difference_check(
            move |tape, v| weighted_sum(tape, v.mul_scalar(s).add_scalar(0.7), 10),
            &x,
            STEP,
        ).unwrap();
        prop_assert!(err < TOL, "scalar ops: {err}");
    }

    #[test]
    fn grad_matmul_both_sides(a in vec_strategy(12, -1.0, 1.0), b in vec_strategy(8, -1.0, 1.0)) {
        let xa = Tensor::new(vec![3, 4], a).unwrap();
        let xb = Tensor::new(vec![4, 2], b).unwrap();
        let rhs = xb.clone();
        let err = finite_difference_check(
            move |tape, v| weighted_sum(tape, v.matmul(tape.constant(rhs.clone()))?, 11),
            &xa,
            STEP,
        ).unwrap();
        prop_assert!(err < TOL, "matmul lhs: {err}");
        let lhs = xa.clone();
        let err2 = finite_difference_check(
            move |tape, v| weighted_sum(tape, tape.constant(lhs.clone()).matmul(v)?, 12),
            &xb,
            STEP,
        ).unwrap();
        prop_assert!(err2 < TOL, "matmul rhs: {err2}");
    }

    #[test]
    fn grad_batched_matmul(a in vec_strategy(12, -1.0, 1.0), b in vec_strategy(12, -1.0, 1.0)) {
        let xa = Tensor::new(vec![2, 3, 2], a).unwrap();
        let xb = Tensor::new(vec![2, 2, 3], b).unwrap();
        let rhs = xb.clone();
        let err = finite_difference_check(
            move |tape, v| weighted_sum(tape, v.matmul(tape.constant(rhs.clone()))?, 13),
            &xa,
            STEP,
        ).unwrap();
        prop_assert!(err < TOL, "batched matmul: {err}");
    }

    #[test]
    fn grad_conv_and_pools(x in vec_strategy(2 * 6 * 6, -1.0, 1.0), w in vec_strategy(3 * 2 * 9, -0.7, 0.7)) {
        let img = Tensor::new(vec![2, 6, 6], x).unwrap();
        let weight = Tensor::new(vec![3, 2, 3, 3], w).unwrap();
        let wt = weight.clone();
        let err = finite_difference_check(
            move |tape, v| {
                let wv = tape.constant(wt.clone());
                let b = tape.constant(Tensor::from_fn(&[3], |i| 0.1 * i as Real));
                weighted_sum(tape, v.conv2d(wv, Some(b), 1, 1)?, 14)
            },
            &img,
            STEP,
        ).unwrap();
        prop_assert!(err < TOL, "conv2d input: {err}");

        let imgc = img.clone();
        let err_w = finite_difference_check(
            move |tape, v| {
                let xv = tape.constant(imgc.clone());
                weighted_sum(tape, xv.conv2d(v, None, 2, 0)?, 15)
            },
            &weight,
            STEP,
        ).unwrap();
        prop_assert!(err_w < TOL, "conv2d weight: {err_w}");

        let err_avg = finite_difference_check(
            move |tape, v| weighted_sum(tape, v.avg_pool2d(2, 2)?, 16),
            &img,
            STEP,
        ).unwrap();
        prop_assert!(err_avg < TOL, "avg_pool2d: {err_avg}");

        let err_max = finite_difference_check(
            move |tape, v| weighted_sum(tape, v.max_pool2d(2, 2)?, 17),
            &img,
            STEP,
        ).unwrap();
        prop_assert!(err_max < TOL, "max_pool2d: {err_max}");
    }

    #[test]
    fn grad_activations(raw in vec_strategy(10, 0.05, 2.0), signs in vec_strategy(10, -1.0, 1.0)) {
        // Magnitudes at least 0.05 keep relu/abs away from their kinks.
        let data: Vec<Real> = raw
            .iter()
            .zip(&signs)
            .map(|(&m, &s)| if s >= 0.0 { m } else { -m })
            .collect();
        let x = Tensor::new(vec![10], data).unwrap();
        for op in 0..6 {
            let err = finite_difference_check(
                move |tape, v| {
                    let y = match op {
                        0 => v.relu(),
                        1 => v.gelu(),
                        2 => v.sin(),
                        3 => v.cos(),
                        4 => v.exp(),
                        _ => v.abs(),
                    };
                    weighted_sum(tape, y, 18 + op as u64)
                },
                &x,
                STEP,
            ).unwrap();
            prop_assert!(err < TOL, "activation {op}: {err}");
        }
    }

    #[test]
    fn grad_positive_domain_ops(x in vec_strategy(9, 0.2, 3.0)) {
        let t = Tensor::new(vec![9], x).unwrap();
        for op in 0..2 {
            let err = finite_difference_check(
                move |tape, v| {
                    let y = match op {
                        0 => v.sqrt(),
                        _ => v.log(),
                    };
                    weighted_sum(tape, y, 24 + op as u64)
                },
                &t,
                STEP,
            ).unwrap();
            prop_assert!(err < TOL, "positive-domain op {op}: {err}");
        }
    }

    #[test]
    fn grad_atan2_both_args(y in vec_strategy(8, 0.3, 2.0), x in vec_strategy(8, 0.3, 2.0)) {
        let ty = Tensor::new(vec![8], y).unwrap();
        let tx = Tensor::new(vec![8], x).unwrap();
        let xc = tx.clone();
        let err = finite_difference_check(
            move |tape, v| weighted_sum(tape, v.atan2(tape.constant(xc.clone()))?, 26),
            &ty,
            STEP,
        ).unwrap();
        prop_assert!(err < TOL, "atan2 y: {err}");
        let yc = ty.clone();
        let err2 = finite_difference_check(
            move |tape, v| weighted_sum(tape, tape.constant(yc.clone()).atan2(v)?, 27),
            &tx,
            STEP,
        ).unwrap();
        prop_assert!(err2 < TOL, "atan2 x: {err2}");
    }

    #[test]
    fn grad_row_normalizing_ops(x in vec_strategy(12, -2.0, 2.0)) {
        let t = Tensor::new(vec![3, 4], x).unwrap();
        for op in 0..3 {
            let err = finite_difference_check(
                move |tape, v| {
                    let y = match op {
                        0 => v.softmax()?,
                        1 => v.log_softmax()?,
                        _ => v.layer_norm(1e-6)?,
                    };
                    weighted_sum(tape, y, 28 + op as u64)
                },
                &t,
                STEP,
            ).unwrap();
            prop_assert!(err < TOL, "row op {op}: {err}");
        }
    }

    #[test]
    fn grad_shape_ops(x in vec_strategy(24, -1.0, 1.0)) {
        let t = Tensor::new(vec![2, 3, 4], x).unwrap();
        let cases: Vec<for<'t> fn(&'t Tape, Var<'t>) -> Result<Var<'t>, TensorError>> = vec![
            |_t, v| v.reshape(vec![6, 4]),
            |_t, v| v.permute(&[2, 0, 1]),
            |_t, v| v.slice(&[(0, 2), (1, 3), (0, 3)]),
            |_t, v| v.sum_axis(1),
            |_t, v| v.mean_axis(2),
            |tape, v| {
                let other = tape.constant(Tensor::from_fn(&[1, 3, 4], |i| 0.05 * i as Real));
                concat(&[v, other], 0)
            },
        ];
        for (i, case) in cases.iter().enumerate() {
            let err = finite_difference_check(
                move |tape, v| weighted_sum(tape, case(tape, v)?, 31 + i as u64),
                &t,
                STEP,
            ).unwrap();
            prop_assert!(err < TOL, "shape op {i}: {err}");
        }
    }

    #[test]
    fn grad_clip_away_from_bounds(x in vec_strategy(10, -0.9, 0.9)) {
        // Values in (-0.9, 0.9) stay away from the clip bounds at +-1 and
        // the step cannot cross them.
        let t = Tensor::new(vec![10], x).unwrap();
        let err = finite_difference_check(
            |tape, v| weighted_sum(tape, v.clip(-1.0, 1.0), 40),
            &t,
            STEP,
        ).unwrap();
        prop_assert!(err < TOL, "clip: {err}");
    }

    #[test]
    fn grad_gather_signed(x in vec_strategy(6, -1.0, 1.0)) {
        let t = Tensor::new(vec![6], x).unwrap();
        let map = Arc::new(vec![
            Some((0usize, 1.0)),
            Some((0, -1.0)),
            None,
            Some((3, 2.0)),
            Some((5, -0.5)),
            Some((1, 1.0)),
            None,
            Some((2, 1.0)),
        ]);
        let err = finite_difference_check(
            move |tape, v| weighted_sum(tape, v.gather_signed(vec![8], map.clone())?, 41),
            &t,
            STEP,
        ).unwrap();
        prop_assert!(err < TOL, "gather_signed: {err}");
    }

    #[test]
    fn grad_patchify(x in vec_strategy(2 * 4 * 4, -1.0, 1.0)) {
        let t = Tensor::new(vec![2, 4, 4], x).unwrap();
        let err = finite_difference_check(
            |tape, v| weighted_sum(tape, v.patchify(2)?, 42),
            &t,
            STEP,
        ).unwrap();
        prop_assert!(err < TOL, "patchify: {err}");
    }

    #[test]
    fn backward_linearity(x in vec_strategy(6, -1.0, 1.0), alpha in 0.5..3.0f64) {
        // Scaling the root scales every gradient by the same factor.
        let t = Tensor::new(vec![2, 3], x).unwrap();
        let tape = Tape::new();
        let v = tape.leaf(t.clone());
        let w = tape.constant(Tensor::from_fn(&[3, 2], |i| 0.3 + 0.1 * i as Real));
        let y = v.matmul(w).unwrap().sum();
        let g1 = tape.backward(y).unwrap().get(v).unwrap().clone();
        let y2 = y.mul_scalar(alpha);
        let g2 = tape.backward(y2).unwrap().get(v).unwrap().clone();
        for (a, b) in g1.data().iter().zip(g2.data()) {
            prop_assert!((b - alpha * a).abs() < 1e-9 * (1.0 + a.abs()));
        }
    }
}
