//! Finite-difference gradient verification.
//!
//! The checker rebuilds the graph through a caller-supplied closure, so the
//! finite-difference route never shares intermediate state with the
//! reverse-mode route it is auditing.

use rand::Rng;

use super::tape::{NodeId, Tape};
use super::tensor::Tensor;
use super::NumericError;

/// Builds a scalar graph from one input leaf.
pub trait ScalarGraph {
    fn build(&self, tape: &mut Tape, input: NodeId) -> Result<NodeId, NumericError>;
}

impl<F> ScalarGraph for F
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId, NumericError>,
{
    fn build(&self, tape: &mut Tape, input: NodeId) -> Result<NodeId, NumericError> {
        self(tape, input)
    }
}

fn eval<G: ScalarGraph>(graph: &G, point: &Tensor) -> Result<f64, NumericError> {
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone())?;
    let out = graph.build(&mut tape, x)?;
    let v = tape.value(out);
    if !v.is_scalar() {
        return Err(NumericError::InvalidShape {
            what: format!("grad_check needs a scalar function, got {:?}", v.shape()),
        });
    }
    Ok(v.scalar_value())
}

fn reverse_grad<G: ScalarGraph>(graph: &G, point: &Tensor) -> Result<Tensor, NumericError> {
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone())?;
    let out = graph.build(&mut tape, x)?;
    let mut grads = tape.backward(out)?;
    Ok(grads
        .take(x)
        .unwrap_or_else(|| Tensor::zeros(point.shape())))
}

fn central_diff<G: ScalarGraph>(
    graph: &G,
    point: &Tensor,
    coord: usize,
    eps: f64,
) -> Result<f64, NumericError> {
    let mut plus = point.clone();
    plus.as_mut_slice()[coord] += eps;
    let mut minus = point.clone();
    minus.as_mut_slice()[coord] -= eps;
    Ok((eval(graph, &plus)? - eval(graph, &minus)?) / (2.0 * eps))
}

fn relative_error(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / 1.0_f64.max(ad.abs()).max(fd.abs())
}

/// Compare the reverse-mode gradient against central finite differences on
/// every coordinate of `point`. Returns the max relative error
/// `|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)`.
pub fn grad_check<G: ScalarGraph>(
    graph: &G,
    point: &Tensor,
    eps: f64,
) -> Result<f64, NumericError> {
    let coords: Vec<usize> = (0..point.numel()).collect();
    grad_check_coords(graph, point, eps, &coords)
}

/// `grad_check` restricted to `max_coords` randomly chosen coordinates.
/// For large parameter tensors this keeps the finite-difference pass tractable
/// while still auditing the same reverse-mode gradient.
pub fn grad_check_sampled<G: ScalarGraph>(
    graph: &G,
    point: &Tensor,
    eps: f64,
    max_coords: usize,
    seed: u64,
) -> Result<f64, NumericError> {
    let n = point.numel();
    if n <= max_coords {
        return grad_check(graph, point, eps);
    }
    let mut rng = crate::rng::stream(seed, "grad_check/coords");
    let mut coords: Vec<usize> = (0..max_coords).map(|_| rng.gen_range(0..n)).collect();
    coords.sort_unstable();
    coords.dedup();
    grad_check_coords(graph, point, eps, &coords)
}

fn grad_check_coords<G: ScalarGraph>(
    graph: &G,
    point: &Tensor,
    eps: f64,
    coords: &[usize],
) -> Result<f64, NumericError> {
    let g_ad = reverse_grad(graph, point)?;
    let mut worst = 0.0_f64;
    for &c in coords {
        let fd = central_diff(graph, point, c, eps)?;
        worst = worst.max(relative_error(g_ad.as_slice()[c], fd));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = crate::rng::stream(seed, "grad_check/test_point");
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect();
        Tensor::from_vec(data, shape).unwrap()
    }

    #[test]
    fn sum_of_squares_matches_analytic_gradient() {
        // f(x) = sum(x^2) has gradient 2x; checker must agree to 1e-7.
        let f = |tape: &mut Tape, x: NodeId| -> Result<NodeId, NumericError> {
            let zero = tape.leaf(Tensor::zeros(tape.value(x).shape()))?;
            let m = tape.mse(x, zero)?;
            tape.scale(m, tape.value(x).numel() as f64)
        };
        for seed in 0..3 {
            let x = randn(&[4, 3], seed);
            let err = grad_check(&f, &x, 1e-5).unwrap();
            assert!(err <= 1e-7, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let f = |tape: &mut Tape, _x: NodeId| -> Result<NodeId, NumericError> {
            tape.leaf(Tensor::scalar(3.5))
        };
        let x = randn(&[5], 7);
        let err = grad_check(&f, &x, 1e-5).unwrap();
        assert!(err <= 1e-7, "rel err {err}");
    }

    #[test]
    fn sampled_check_agrees_with_full_check() {
        let f = |tape: &mut Tape, x: NodeId| -> Result<NodeId, NumericError> {
            let y = tape.tanh(x)?;
            let zero = tape.leaf(Tensor::zeros(tape.value(x).shape()))?;
            tape.mse(y, zero)
        };
        let x = randn(&[6, 6], 11);
        let full = grad_check(&f, &x, 1e-5).unwrap();
        let sampled = grad_check_sampled(&f, &x, 1e-5, 10, 42).unwrap();
        assert!(sampled <= full + 1e-12);
    }
}
