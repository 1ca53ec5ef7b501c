//! Central finite-difference gradient checking.

use crate::error::TensorError;
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

/// Compare the analytic gradient of a scalar-valued function against a
/// central finite difference, coordinate by coordinate.
///
/// `build` must deterministically construct the same scalar loss from the
/// given input var each time it is called. Returns the maximum over
/// coordinates of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
pub fn finite_difference_check<T, F>(
    build: F,
    input: &Tensor<T>,
    step: T,
) -> Result<T, TensorError>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, Var) -> Result<Var, TensorError>,
{
    assert!(step > T::zero(), "step must be positive");

    let mut graph = Graph::new();
    let x = graph.param(input.clone());
    let loss = build(&mut graph, x)?;
    if graph.value(loss).numel() != 1 {
        return Err(TensorError::NonScalarRoot {
            numel: graph.value(loss).numel(),
        });
    }
    graph.backward(loss)?;
    let analytic = graph
        .grad(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(input.shape()));

    let eval = |point: &Tensor<T>| -> Result<T, TensorError> {
        let mut graph = Graph::new();
        let x = graph.leaf(point.clone());
        let loss = build(&mut graph, x)?;
        Ok(graph.value(loss).item())
    };

    let floor = T::from_f64(1e-8);
    let two = T::from_f64(2.0);
    let mut max_rel = T::zero();
    let mut probe = input.clone();
    for i in 0..input.numel() {
        let original = probe.data()[i];
        probe.data_mut()[i] = original + step;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = original - step;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = original;

        let numeric = (plus - minus) / (two * step);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(floor);
        let rel = (a - numeric).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let input = Tensor::from_fn(&[5], |i| (i as f64 * 0.9).sin());
        let err = finite_difference_check(
            |g, x| Ok(g.sum(x)),
            &input,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-10, "max rel error {}", err);
    }

    #[test]
    fn sum_of_squares() {
        let input = Tensor::from_fn(&[6], |i| (i as f64) * 0.5 - 1.2);
        let err = finite_difference_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                Ok(g.sum(sq))
            },
            &input,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-6, "max rel error {}", err);
    }
}
