//! Central finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::tape::{GradTape, Var};
use crate::tensor::Tensor;

/// Relative errors are measured against `max(|analytic|, |numeric|, FLOOR)`.
pub const DENOMINATOR_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
    /// `(input index, coordinate)` of the worst relative error.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

/// Compares `backward()` against central differences for a scalar function
/// of one tensor.
pub fn finite_difference_check<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheck>
where
    F: Fn(&mut GradTape, Var) -> Result<Var>,
{
    finite_difference_check_many(|tape, xs| f(tape, xs[0]), std::slice::from_ref(x), h)
}

/// Same as [`finite_difference_check`] over several inputs at once. The
/// closure receives one `Var` per input, registered as trainable leaves for
/// the analytic pass and as constants for the perturbed evaluations.
pub fn finite_difference_check_many<F>(f: F, xs: &[Tensor], h: f64) -> Result<GradCheck>
where
    F: Fn(&mut GradTape, &[Var]) -> Result<Var>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {h}")));
    }
    let mut tape = GradTape::new();
    let leaves: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
    let loss = f(&mut tape, &leaves)?;
    check_scalar(tape.value(loss))?;
    let grads = tape.backward(loss)?;

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = GradTape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        check_scalar(tape.value(out))
    };

    let mut report = GradCheck {
        max_relative_error: 0.0,
        max_absolute_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
    };
    let mut work: Vec<Tensor> = xs.to_vec();
    for (which, leaf) in leaves.iter().enumerate() {
        let analytic = grads.wrt(*leaf);
        for i in 0..xs[which].numel() {
            let orig = xs[which].data()[i];
            work[which].data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work[which].data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work[which].data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[i];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(DENOMINATOR_FLOOR);
            report.coordinates += 1;
            report.max_absolute_error = report.max_absolute_error.max(abs);
            if rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst = (which, i);
            }
        }
    }
    Ok(report)
}

fn check_scalar(t: &Tensor) -> Result<f64> {
    let v = t
        .item()
        .ok_or_else(|| Error::InvalidArgument(format!("expected a scalar, got {:?}", t.shape())))?;
    if !v.is_finite() {
        return Err(Error::NonFinite("function value in finite-difference check".into()));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let w = Tensor::matrix(3, 1, vec![0.5, -2.0, 1.25]);
        let x = Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]);
        let r = finite_difference_check(
            |t, x| {
                let w = t.constant(w.clone());
                let y = t.matmul(x, w)?;
                Ok(t.sum(y))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(r.max_relative_error < 1e-10, "{r:?}");
    }

    #[test]
    fn softmax_then_dot() {
        let c = Tensor::matrix(1, 4, vec![0.3, -1.0, 2.0, 0.7]);
        let x = Tensor::matrix(1, 4, vec![0.1, 0.4, -0.3, 1.2]);
        let r = finite_difference_check(
            |t, x| {
                let c = t.constant(c.clone());
                let p = t.softmax_rows(x);
                let y = t.mul(p, c)?;
                Ok(t.sum(y))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(r.max_relative_error < 1e-6, "{r:?}");
    }

    #[test]
    fn zero_step_rejected() {
        let x = Tensor::scalar(1.0);
        assert!(finite_difference_check(|t, x| Ok(t.sum(x)), &x, 0.0).is_err());
        assert!(finite_difference_check(|t, x| Ok(t.sum(x)), &x, -1e-3).is_err());
    }

    #[test]
    fn non_finite_function_rejected() {
        let x = Tensor::scalar(1.0);
        let r = finite_difference_check(|t, x| Ok(t.scale(x, f64::INFINITY)), &x, 1e-5);
        assert!(r.is_err());
    }
}
