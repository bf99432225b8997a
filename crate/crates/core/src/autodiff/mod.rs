//! Reverse-mode differentiation over small dense tensors.

mod params;
mod tape;
mod tensor;

pub use params::{ParamEntry, ParameterVector};
pub use tape::{Gradients, Primitive, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::softplus;
pub(crate) use tensor::gemm;

use crate::error::{Error, Result};

/// Loss value and flat gradient of `loss_fn` at `params`.
///
/// `loss_fn` receives a fresh tape and the registered parameter leaves and
/// must return a scalar node.
pub fn grad_at<F>(params: &ParameterVector, mut loss_fn: F) -> Result<(f64, Vec<f64>)>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let root = loss_fn(&mut tape, &vars)?;
    let loss = tape.scalar_value(root)?;
    if !loss.is_finite() {
        return Err(Error::Numeric { op: "loss" });
    }
    let grads = tape.backward(root)?;
    Ok((loss, grads.flat(&tape, &vars)))
}

/// Diagonal of the generalized Gauss-Newton matrix of a summed loss.
///
/// For each example, `outputs` builds the network on a fresh tape and returns
/// the scalar model outputs together with the second derivative of the
/// per-example loss with respect to that output. The result is
/// `sum_i sum_o h_io * (d out_io / d phi)^2`.
pub fn hessian_diag_ggn<F>(params: &ParameterVector, n_examples: usize, mut outputs: F) -> Result<Vec<f64>>
where
    F: FnMut(&mut Tape, &[Var], usize) -> Result<Vec<(Var, f64)>>,
{
    let mut diag = vec![0.0; params.len()];
    for i in 0..n_examples {
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        for (out, curvature) in outputs(&mut tape, &vars, i)? {
            if curvature < 0.0 || !curvature.is_finite() {
                return Err(Error::contract(format!(
                    "output curvature must be finite and nonnegative, got {curvature}"
                )));
            }
            if curvature == 0.0 {
                continue;
            }
            let g = tape.backward(out)?.flat(&tape, &vars);
            for (d, gi) in diag.iter_mut().zip(&g) {
                *d += curvature * gi * gi;
            }
        }
    }
    Ok(diag)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_squared_norm() {
        let p = ParameterVector::from_tensors(vec![("p".into(), Tensor::vector(vec![1.0, 2.0]))]);
        let (loss, g) = grad_at(&p, |t, v| {
            let sq = t.square(v[0])?;
            let s = t.sum(sq)?;
            t.scale(s, 0.5)
        })
        .unwrap();
        assert_eq!(loss, 2.5);
        assert_eq!(g, vec![1.0, 2.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let p = ParameterVector::from_tensors(vec![("p".into(), Tensor::vector(vec![1.0, 2.0]))]);
        let (loss, g) = grad_at(&p, |t, _| Ok(t.scalar(3.0))).unwrap();
        assert_eq!(loss, 3.0);
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn ggn_of_linear_model_is_squared_inputs() {
        let x = [0.5, -2.0, 3.0];
        let p = ParameterVector::from_tensors(vec![("w".into(), Tensor::matrix(3, 1, vec![0.3, 0.1, -0.2]).unwrap())]);
        let diag = hessian_diag_ggn(&p, 1, |t, v, _| {
            let xi = t.constant(Tensor::matrix(1, 3, x.to_vec()).unwrap());
            let out = t.matmul(xi, v[0])?;
            let s = t.sum(out)?;
            // squared error 1/2 (y - out)^2 has unit curvature
            Ok(vec![(s, 1.0)])
        })
        .unwrap();
        assert_eq!(diag, vec![0.25, 4.0, 9.0]);
    }

    #[test]
    fn ggn_of_empty_dataset_is_zero() {
        let p = ParameterVector::from_tensors(vec![("w".into(), Tensor::vector(vec![1.0; 4]))]);
        let diag = hessian_diag_ggn(&p, 0, |_, _, _| unreachable!()).unwrap();
        assert_eq!(diag, vec![0.0; 4]);
    }
}
