//! Central finite-difference gradient verification.

use super::{Tape, Tensor, TensorError, Var};
use crate::Real;

/// Absolute floor added to the analytic magnitude in the relative-error
/// denominator so zero gradients do not divide by zero.
const EPS_ABS: Real = 1e-6;

/// Compare the analytic gradient of a scalar-valued graph against central
/// finite differences at every element of `x`.
///
/// `f` rebuilds the computation from a fresh leaf each time it is called.
/// Returns the maximum over elements of
/// `|analytic - central| / (|analytic| + EPS_ABS)`.
pub fn finite_difference_check<F>(f: F, x: &Tensor, h: Real) -> Result<Real, TensorError>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>, TensorError>,
{
    assert!(h > 0.0, "step must be positive");

    // Analytic gradient.
    let tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let root = f(&tape, leaf)?;
    let grads = tape.backward(root)?;
    let analytic = grads.get_or_zeros(leaf);

    let eval = |t: &Tensor| -> Result<Real, TensorError> {
        let tape = Tape::new();
        let leaf = tape.constant(t.clone());
        let root = f(&tape, leaf)?;
        tape.scalar_value(root)
    };

    let mut worst: Real = 0.0;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let central = (fp - fm) / (2.0 * h);
        let a = analytic.data()[i];
        let rel = (a - central).abs() / (a.abs() + EPS_ABS);
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::new(vec![4], vec![0.3, -1.2, 2.0, 0.7]).unwrap();
        let err = finite_difference_check(|_t, v| Ok(v.sum()), &x, 1e-4).unwrap();
        assert!(err < 1e-9, "err {err}");
    }

    #[test]
    fn sum_of_sines_matches_cos() {
        let mut rng = Rng::new(11);
        let x = Tensor::rand_uniform(&[6], -1.5, 1.5, &mut rng);
        let err = finite_difference_check(|_t, v| Ok(v.sin().sum()), &x, 1e-4).unwrap();
        assert!(err < 1e-4, "err {err}");
    }

    #[test]
    fn two_layer_mlp_loss() {
        let mut rng = Rng::new(5);
        let w1 = Tensor::rand_normal(&[4, 5], 0.5, &mut rng);
        let w2 = Tensor::rand_normal(&[5, 1], 0.5, &mut rng);
        let x = Tensor::rand_uniform(&[1, 4], -1.0, 1.0, &mut rng);
        let err = finite_difference_check(
            |tape, v| {
                let w1 = tape.constant(w1.clone());
                let w2 = tape.constant(w2.clone());
                Ok(v.matmul(w1)?.relu().matmul(w2)?.sum())
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "err {err}");
    }
}
