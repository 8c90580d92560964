//! Finite-difference verification of tape gradients.

use crate::tape::Tape;
use crate::tensor::{Tensor, TensorError};

/// A differentiable scalar-valued function of several tensors. The closure
/// receives inputs already registered as leaves on the given tape and must be
/// deterministic (any randomness has to be reseeded inside the closure).
pub trait ScalarFn: Fn(&mut Tape, &[Tensor]) -> Result<Tensor, TensorError> {}
impl<F: Fn(&mut Tape, &[Tensor]) -> Result<Tensor, TensorError>> ScalarFn for F {}

/// Compares the tape's analytic gradient of `f` against central finite
/// differences with step `h`, returning the worst relative error over all
/// input coordinates. Relative error uses a `max(1, |analytic|, |numeric|)`
/// denominator.
pub fn grad_check<F: ScalarFn>(f: F, inputs: &[Tensor], h: f64) -> Result<f64, TensorError> {
    if h <= 0.0 {
        return Err(TensorError::Invalid {
            op: "grad_check",
            msg: format!("step must be positive, got {h}"),
        });
    }

    let mut tape = Tape::new();
    let tracked: Vec<Tensor> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &tracked)?;
    if !out.is_scalar() {
        return Err(TensorError::NotScalar {
            op: "grad_check",
            shape: out.shape().to_vec(),
        });
    }
    let grads = tape.backward(&out)?;
    let analytic: Vec<Tensor> = tracked
        .iter()
        .map(|t| grads.grad(t).map(Tensor::detached))
        .collect::<Result<_, _>>()?;

    let mut worst = 0.0_f64;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let plus = eval_perturbed(&f, inputs, i, j, h)?;
            let minus = eval_perturbed(&f, inputs, i, j, -h)?;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[i].data()[j];
            let denom = 1.0_f64.max(a.abs()).max(numeric.abs());
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

fn eval_perturbed<F: ScalarFn>(
    f: &F,
    inputs: &[Tensor],
    which: usize,
    coord: usize,
    delta: f64,
) -> Result<f64, TensorError> {
    let mut tape = Tape::new();
    let tracked: Vec<Tensor> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if i == which {
                let mut data = t.data().to_vec();
                data[coord] += delta;
                let bumped = Tensor::from_vec(t.shape().to_vec(), data)
                    .expect("perturbation preserves shape");
                tape.leaf(bumped)
            } else {
                tape.leaf(t.clone())
            }
        })
        .collect();
    f(&mut tape, &tracked)?.item()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::LossKind;
    use rand::SeedableRng;

    #[test]
    fn sum_of_squares_gradient_is_exact() {
        let x = Tensor::vector(&[0.5, -1.25, 2.0, 0.0]);
        let err = grad_check(
            |tape, inputs| {
                let sq = tape.mul(&inputs[0], &inputs[0])?;
                tape.sum(&sq)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "relative error {err}");
    }

    #[test]
    fn softmax_mse_composition_checks_out() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform(vec![4], -2.0, 2.0, &mut rng);
        let target = Tensor::vector(&[0.1, 0.2, 0.3, 0.4]);
        let err = grad_check(
            move |tape, inputs| {
                let sm = tape.softmax_lastdim(&inputs[0])?;
                tape.loss(&sm, &target, LossKind::Mse)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn constant_function_has_zero_gradient_both_ways() {
        let x = Tensor::vector(&[1.0, 2.0]);
        let err = grad_check(
            |tape, _inputs| {
                let c = tape.constant(Tensor::scalar(7.0));
                tape.sum(&c)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_scalar_outputs_are_rejected() {
        let x = Tensor::vector(&[1.0, 2.0]);
        let err = grad_check(|tape, inputs| tape.scale(&inputs[0], 2.0), &[x], 1e-5).unwrap_err();
        assert!(matches!(err, TensorError::NotScalar { .. }));
    }
}
