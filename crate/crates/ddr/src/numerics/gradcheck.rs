//! Central-difference verification of tape gradients.
//!
//! The loss builder is evaluated once on a tape for analytic gradients, then
//! twice per trainable scalar with that scalar nudged by ±eps. Run in f64;
//! the f32 instantiation exists to bound the 32-bit training path.

use std::collections::BTreeMap;

use crate::error::{DdrError, Result};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::{ParamSet, Scalar};

/// Builds a scalar loss node from bound parameter leaves.
pub trait LossBuilder<F: Scalar> {
    fn build(&self, tape: &mut Tape<F>, leaves: &BTreeMap<String, Var>) -> Result<Var>;
}

impl<F: Scalar, T> LossBuilder<F> for T
where
    T: Fn(&mut Tape<F>, &BTreeMap<String, Var>) -> Result<Var>,
{
    fn build(&self, tape: &mut Tape<F>, leaves: &BTreeMap<String, Var>) -> Result<Var> {
        self(tape, leaves)
    }
}

fn evaluate<F: Scalar>(params: &ParamSet<F>, f: &impl LossBuilder<F>, context: &str) -> Result<F> {
    let mut tape = Tape::new();
    let leaves = tape.bind(params);
    let loss = f.build(&mut tape, &leaves)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(DdrError::Numeric(format!(
            "loss is not finite while perturbing {context}"
        )));
    }
    Ok(value)
}

/// Max over all trainable scalars of
/// `|analytic - central_difference| / max(1, |central_difference|)`.
pub fn grad_check<F: Scalar>(
    params: &ParamSet<F>,
    eps: F,
    f: impl LossBuilder<F>,
) -> Result<F> {
    if eps <= F::zero() {
        return Err(DdrError::Invalid("grad_check eps must be positive".to_string()));
    }

    let mut tape = Tape::new();
    let leaves = tape.bind(params);
    let loss = f.build(&mut tape, &leaves)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(DdrError::Numeric(
            "loss is not finite at the base point".to_string(),
        ));
    }
    let grads = tape.backward(loss)?;

    let mut work = params.clone();
    let mut max_rel = F::zero();
    for name in params.trainable_names() {
        let analytic = grads
            .get(leaves[&name])
            .cloned()
            .unwrap_or_else(|| crate::numerics::Tensor::zeros(params.tensor(&name).unwrap().shape()));
        let numel = analytic.numel();
        for i in 0..numel {
            let original = work.tensor(&name)?.data()[i];
            let context = format!("`{name}`[{i}]");

            work.get_mut(&name).unwrap().tensor.data_mut()[i] = original + eps;
            let plus = evaluate(&work, &f, &context)?;
            work.get_mut(&name).unwrap().tensor.data_mut()[i] = original - eps;
            let minus = evaluate(&work, &f, &context)?;
            work.get_mut(&name).unwrap().tensor.data_mut()[i] = original;

            let two = F::from_f64(2.0);
            let fd = (plus - minus) / (two * eps);
            let rel = (analytic.data()[i] - fd).abs() / fd.abs().max(F::one());
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::{normal_tensor, seeded};
    use crate::numerics::{Tensor, Var};

    #[test]
    fn square_at_three() {
        // f(x) = x^2 at x = 3: analytic 6 against the central difference.
        let mut ps = ParamSet::new();
        ps.insert("x", Tensor::from_vec(&[1], vec![3.0f64]).unwrap(), true)
            .unwrap();
        let err = grad_check(&ps, 1e-6, |tape: &mut Tape<f64>, leaves: &BTreeMap<String, Var>| {
            let x = leaves["x"];
            tape.mul(x, x)
        })
        .unwrap();
        assert!(err < 1e-8, "rel err {err}");
    }

    #[test]
    fn linear_layer_with_mse() {
        // One linear layer + mean squared error on a random 4x4 input.
        let mut rng = seeded(42);
        let mut ps = ParamSet::new();
        ps.insert("w", normal_tensor::<f64>(&[4, 4], 1.0, &mut rng), true)
            .unwrap();
        ps.insert("b", normal_tensor::<f64>(&[4], 1.0, &mut rng), true)
            .unwrap();
        let x = normal_tensor::<f64>(&[4, 4], 1.0, &mut rng);
        let y = normal_tensor::<f64>(&[4, 4], 1.0, &mut rng);

        let err = grad_check(&ps, 1e-6, move |tape: &mut Tape<f64>, leaves: &BTreeMap<String, Var>| {
            let xv = tape.leaf(x.clone());
            let yv = tape.leaf(y.clone());
            let pred = tape.matmul(xv, leaves["w"])?;
            let pred = tape.add_row(pred, leaves["b"])?;
            let neg = tape.scale(yv, -1.0);
            let diff = tape.add(pred, neg)?;
            let sq = tape.mul(diff, diff)?;
            let flat_mask = vec![true; 4];
            let per_col = tape.mean_rows(sq, &flat_mask)?; // [1,4] column means
            let ones = tape.leaf(Tensor::filled(&[1, 4], 0.25));
            tape.dot(per_col, ones)
        })
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn softmax_ce_gradient_is_probs_minus_onehot() {
        // Closed form: d loss / d logits = softmax(logits) - onehot(target).
        let logits = normal_tensor::<f64>(&[1, 6], 2.0, &mut seeded(7));
        let target = 4usize;

        let mut tape = Tape::new();
        let v = tape.leaf(logits.clone());
        let loss = tape.cross_entropy_rows(v, &[target]).unwrap();
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.get(v).unwrap();

        let probs = crate::numerics::softmax::softmax_row(logits.data());
        for j in 0..6 {
            let expected = probs[j] - if j == target { 1.0 } else { 0.0 };
            let rel = (analytic.data()[j] - expected).abs() / expected.abs().max(1.0);
            assert!(rel < 1e-12, "closed-form mismatch at {j}: {rel}");
        }

        // and the same loss also passes the finite-difference check
        let mut ps = ParamSet::new();
        ps.insert("logits", logits, true).unwrap();
        let err = grad_check(&ps, 1e-6, move |tape: &mut Tape<f64>, leaves: &BTreeMap<String, Var>| {
            tape.cross_entropy_rows(leaves["logits"], &[target])
        })
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn frozen_entries_are_not_checked() {
        let mut ps = ParamSet::new();
        ps.insert("x", Tensor::from_vec(&[1], vec![2.0f64]).unwrap(), true)
            .unwrap();
        // relu is non-differentiable at 0; freezing keeps it out of the sweep
        ps.insert("dead", Tensor::from_vec(&[1], vec![0.0f64]).unwrap(), false)
            .unwrap();
        let err = grad_check(&ps, 1e-6, |tape: &mut Tape<f64>, leaves: &BTreeMap<String, Var>| {
            let r = tape.relu(leaves["dead"]);
            let x2 = tape.mul(leaves["x"], leaves["x"])?;
            let s = tape.sum_n(&[x2, r])?;
            Ok(s)
        })
        .unwrap();
        assert!(err < 1e-8);
    }

    #[test]
    fn rejects_bad_eps() {
        let ps: ParamSet<f64> = ParamSet::new();
        assert!(
            grad_check(&ps, 0.0, |t: &mut Tape<f64>, _: &BTreeMap<String, Var>| {
                Ok(t.leaf(Tensor::scalar(1.0)))
            })
            .is_err()
        );
    }
}
