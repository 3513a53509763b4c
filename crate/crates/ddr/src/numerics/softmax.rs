//! Numerically stabilized softmax / cross-entropy primitives.
//!
//! Shared by the scalar loss entry point and the tape op so both routes
//! compute the identical formula.

use crate::error::{DdrError, Result};
use crate::numerics::{Scalar, Tensor};

/// Softmax of one row, max-subtracted. Returns the probabilities.
pub(crate) fn softmax_row<F: Scalar>(logits: &[F]) -> Vec<F> {
    let max = logits
        .iter()
        .fold(F::neg_infinity(), |acc, &v| if v > acc { v } else { acc });
    let exps: Vec<F> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum = exps.iter().fold(F::zero(), |acc, &v| acc + v);
    exps.into_iter().map(|e| e / sum).collect()
}

/// `log(sum(exp(row)))`, max-subtracted.
pub(crate) fn log_sum_exp<F: Scalar>(logits: &[F]) -> F {
    let max = logits
        .iter()
        .fold(F::neg_infinity(), |acc, &v| if v > acc { v } else { acc });
    let sum = logits
        .iter()
        .fold(F::zero(), |acc, &v| acc + (v - max).exp());
    max + sum.ln()
}

/// Cross entropy of one row against a target index: `logsumexp(row) - row[t]`.
pub(crate) fn cross_entropy_row<F: Scalar>(logits: &[F], target: usize) -> F {
    log_sum_exp(logits) - logits[target]
}

/// Negative log softmax probability of `target_index` under `logits`.
///
/// The non-differentiable entry point; training goes through the tape op,
/// which evaluates the same row formula.
pub fn softmax_cross_entropy<F: Scalar>(logits: &Tensor<F>, target_index: usize) -> Result<F> {
    if logits.shape().len() != 1 || logits.numel() == 0 {
        return Err(DdrError::Shape(format!(
            "logits must be a non-empty vector, got shape {:?}",
            logits.shape()
        )));
    }
    if target_index >= logits.numel() {
        return Err(DdrError::Invalid(format!(
            "target index {target_index} out of range for {} classes",
            logits.numel()
        )));
    }
    let loss = cross_entropy_row(logits.data(), target_index);
    if !loss.is_finite() {
        return Err(DdrError::Numeric("softmax cross entropy".to_string()));
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_n() {
        let logits = Tensor::from_vec(&[4], vec![0.5f64; 4]).unwrap();
        let loss = softmax_cross_entropy(&logits, 2).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logit() {
        // ln(1 + e^{-20}) ~ 2.061e-9
        let logits = Tensor::from_vec(&[2], vec![10.0f64, -10.0]).unwrap();
        let loss = softmax_cross_entropy(&logits, 0).unwrap();
        assert!((loss - (-20.0f64).exp().ln_1p()).abs() < 1e-15);
        assert!((loss - 2.061e-9).abs() < 1e-11);
    }

    #[test]
    fn shift_invariance() {
        let base = vec![1.0f64, -2.0, 0.3, 4.0];
        let shifted: Vec<f64> = base.iter().map(|v| v + 123.456).collect();
        let a = softmax_cross_entropy(&Tensor::from_vec(&[4], base).unwrap(), 1).unwrap();
        let b = softmax_cross_entropy(&Tensor::from_vec(&[4], shifted).unwrap(), 1).unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn rejects_bad_inputs() {
        let logits = Tensor::from_vec(&[2], vec![0.0f32, 1.0]).unwrap();
        assert!(softmax_cross_entropy(&logits, 2).is_err());
        let matrix = Tensor::from_vec(&[1, 2], vec![0.0f32, 1.0]).unwrap();
        assert!(softmax_cross_entropy(&matrix, 0).is_err());
    }

    #[test]
    fn loss_is_nonnegative() {
        // p(target) <= 1 always, so -ln p >= 0.
        for seed in 0..50u64 {
            let vals: Vec<f64> = (0..6)
                .map(|i| ((seed as f64) * 0.37 + i as f64 * 1.3).sin() * 5.0)
                .collect();
            let t = Tensor::from_vec(&[6], vals).unwrap();
            let loss = softmax_cross_entropy(&t, (seed % 6) as usize).unwrap();
            assert!(loss >= 0.0);
        }
    }
}
