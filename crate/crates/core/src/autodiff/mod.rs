//! Dense tensors with define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is rebuilt for every forward pass. Operations append nodes and
//! return [`Var`] handles; [`Tape::backward`] sweeps the tape once in reverse
//! and returns the gradient of a scalar with respect to every variable leaf.

mod tape;
mod tensor;

pub use tape::{sigmoid, Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: domain error: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("shape {shape:?} does not hold {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("non-finite function value at coordinate {coord} (eps {eps})")]
    NonFinite { coord: usize, eps: f64 },
}

/// Compares analytic gradients of a scalar function against central
/// differences and returns the largest relative discrepancy,
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F, E>(f: F, x: &Tensor, eps: f64) -> Result<f64, E>
where
    F: Fn(&mut Tape, Var) -> Result<Var, E>,
    E: From<TensorError>,
{
    grad_check_many(|tape, xs| f(tape, xs[0]), std::slice::from_ref(x), eps)
}

/// [`grad_check`] over several inputs at once; the maximum is taken over
/// every coordinate of every input.
pub fn grad_check_many<F, E>(f: F, xs: &[Tensor], eps: f64) -> Result<f64, E>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(TensorError::InvalidArgument {
            op: "grad_check",
            detail: format!("eps {eps} outside (0, 1e-3]"),
        }
        .into());
    }
    let eval = |inputs: &[Tensor]| -> Result<f64, E> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: v.shape().to_vec(),
            }
            .into());
        }
        Ok(v.item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut coord = 0;
    let mut inputs = xs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).clone();
        for i in 0..xs[k].len() {
            let orig = xs[k].data()[i];
            inputs[k].data_mut()[i] = orig + eps;
            let fp = eval(&inputs)?;
            inputs[k].data_mut()[i] = orig - eps;
            let fm = eval(&inputs)?;
            inputs[k].data_mut()[i] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(TensorError::NonFinite { coord, eps }.into());
            }
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic.data()[i];
            let denom = 1.0f64.max(a.abs()).max(numeric.abs());
            worst = worst.max((a - numeric).abs() / denom);
            coord += 1;
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::vector(v.to_vec())
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(0.0));
        let y = tape.sigmoid(x);
        assert_eq!(tape.value(y).item(), 0.5);
    }

    #[test]
    fn uniform_softmax() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 3, vec![0.0; 3]));
        let y = tape.row_softmax(x);
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_matmul() {
        let a = Tensor::matrix(3, 3, vec![0.3, -1.2, 2.0, 0.5, 0.1, -0.7, 1.1, 0.0, 4.2]);
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::eye(3));
        let av = tape.constant(a.clone());
        let y = tape.matmul(i, av).unwrap();
        assert_eq!(tape.value(y), &a);
    }

    #[test]
    fn square_sum_gradient() {
        let mut tape = Tape::new();
        let x = tape.variable(t(&[1.0, 2.0, 3.0]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn sigmoid_chain_gradient() {
        let mut tape = Tape::new();
        let w = tape.variable(Tensor::scalar(0.0));
        let s = tape.sigmoid(w);
        let loss = tape.scale(s, 4.0);
        let g = tape.backward(loss).unwrap();
        assert!((g.get(w).item() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn fan_out_accumulates_each_use() {
        // loss = x + x + x + x  →  dloss/dx = 4, one contribution per use.
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::scalar(2.5));
        let mut acc = x;
        for _ in 0..3 {
            acc = tape.add(acc, x).unwrap();
        }
        let g = tape.backward(acc).unwrap();
        assert_eq!(g.get(x).item(), 4.0);

        // Diamond: y = a*b with a = 2x, b = 3x → dy/dx = 12x.
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::scalar(1.5));
        let a = tape.scale(x, 2.0);
        let b = tape.scale(x, 3.0);
        let y = tape.mul(a, b).unwrap();
        let g = tape.backward(y).unwrap();
        assert!((g.get(x).item() - 18.0).abs() < 1e-12);
    }

    #[test]
    fn unused_variable_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.variable(t(&[1.0, 2.0]));
        let unused = tape.variable(t(&[5.0, 6.0, 7.0]));
        let loss = tape.sum(x);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(unused).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn errors_are_structured() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(2, 3, vec![1.0; 6]));
        let b = tape.constant(Tensor::matrix(2, 2, vec![1.0; 4]));
        match tape.add(a, b) {
            Err(TensorError::ShapeMismatch { op, lhs, rhs }) => {
                assert_eq!(op, "add");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 2]);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(tape.matmul(a, a), Err(TensorError::ShapeMismatch { op: "matmul", .. })));
        let z = tape.constant(t(&[0.0, 1.0]));
        assert!(matches!(tape.log(z), Err(TensorError::Domain { op: "log", .. })));
        let n = tape.constant(t(&[-1.0]));
        assert!(matches!(tape.sqrt(n), Err(TensorError::Domain { op: "sqrt", .. })));
        assert!(matches!(tape.div(a, a), Ok(_)));
        let zero = tape.constant(Tensor::matrix(2, 3, vec![0.0; 6]));
        assert!(matches!(tape.div(a, zero), Err(TensorError::Domain { .. })));
        assert!(matches!(tape.backward(a), Err(TensorError::NonScalarLoss { .. })));
    }

    #[test]
    fn grad_check_of_linear_function_is_exact() {
        let x = t(&[0.3, -1.0, 2.0, 7.5]);
        let err = grad_check(|tape, v| Ok::<_, TensorError>(tape.sum(v)), &x, 1e-3).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn grad_check_rejects_bad_eps_and_non_finite() {
        let x = t(&[1.0]);
        assert!(grad_check(|tape, v| Ok::<_, TensorError>(tape.sum(v)), &x, 0.1).is_err());
        let near_zero = t(&[1e-7]);
        let r = grad_check(
            |tape, v| {
                let l = tape.log(v)?;
                Ok::<_, TensorError>(tape.sum(l))
            },
            &near_zero,
            1e-6,
        );
        assert!(r.is_err());
    }
}
