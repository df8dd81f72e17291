//! Finite-difference gradient verification.
//!
//! The harness is deliberately independent of the tape: it only evaluates
//! the scalar loss at perturbed parameter values, so it cross-checks the
//! analytic path rather than re-deriving it.

use super::Tensor;
use crate::error::{KbError, Result};

/// A deterministic scalar function of a parameter set.
pub type GradFn<'a> = dyn Fn(&[Tensor]) -> Result<f64> + 'a;

/// Central-difference check of `analytic` gradients of `f`.
///
/// Returns the maximum over all parameter entries of
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
pub fn grad_check(f: &GradFn, params: &[Tensor], analytic: &[Vec<f64>], eps: f64) -> Result<f64> {
    if analytic.len() != params.len() {
        return Err(KbError::Contract(format!(
            "{} gradient buffers for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = params.to_vec();
    for p in 0..params.len() {
        if analytic[p].len() != params[p].numel() {
            return Err(KbError::Shape(format!("gradient {p} length mismatch")));
        }
        for i in 0..params[p].numel() {
            let rel = central_difference_rel_err(&mut work, p, i, f, analytic[p][i], eps)?;
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

/// One coordinate's central-difference relative error. `work` is restored
/// before returning.
pub fn central_difference_rel_err(
    work: &mut [Tensor],
    tensor_index: usize,
    coord: usize,
    f: &GradFn,
    analytic: f64,
    eps: f64,
) -> Result<f64> {
    let orig = work[tensor_index].data()[coord];
    work[tensor_index].data_mut()[coord] = orig + eps;
    let loss_plus = f(work)?;
    work[tensor_index].data_mut()[coord] = orig - eps;
    let loss_minus = f(work)?;
    work[tensor_index].data_mut()[coord] = orig;
    let numeric = (loss_plus - loss_minus) / (2.0 * eps);
    Ok((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn quadratic_is_exact() {
        // f(x) = sum(x^2), analytic grad 2x. At x=3 the check must be
        // essentially exact in double precision.
        let f = |params: &[Tensor]| -> Result<f64> {
            Ok(params[0].data().iter().map(|v| v * v).sum())
        };
        let params = vec![Tensor::new(vec![1], vec![3.0]).unwrap()];
        let analytic = vec![vec![6.0]];
        let err = grad_check(&f, &params, &analytic, 1e-5).unwrap();
        assert!(err < 1e-9, "rel err {err}");
    }

    #[test]
    fn softmax_cross_entropy_composite() {
        let loss_of = |params: &[Tensor]| -> Result<f64> {
            let mut tape = Tape::new();
            let logits = tape.leaf_tensor(&params[0]);
            let loss = tape.cross_entropy(logits, 2)?;
            Ok(tape.scalar_value(loss))
        };
        let params =
            vec![Tensor::new(vec![5], vec![0.3, -1.2, 0.7, 2.1, -0.4]).unwrap()];
        // analytic gradient from one tape backward at the base point
        let mut tape = Tape::new();
        let logits = tape.leaf_tensor(&params[0]);
        let loss = tape.cross_entropy(logits, 2).unwrap();
        tape.backward(loss).unwrap();
        let analytic = vec![tape.grad(logits).to_vec()];
        let err = grad_check(&loss_of, &params, &analytic, 1e-5).unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn detects_wrong_gradient() {
        let f = |params: &[Tensor]| -> Result<f64> {
            Ok(params[0].data().iter().map(|v| v * v).sum())
        };
        let params = vec![Tensor::new(vec![1], vec![1.5]).unwrap()];
        let analytic = vec![vec![4.5]]; // wrong: should be 3.0
        let err = grad_check(&f, &params, &analytic, 1e-5).unwrap();
        assert!(err > 0.1, "should flag the bad gradient, got {err}");
    }
}
