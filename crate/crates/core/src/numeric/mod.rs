//! Dense-matrix numeric kernel: tensors, a reverse-mode tape, and a
//! finite-difference gradient checker. Everything trains in 64-bit.

mod grad_check;
mod tape;
mod tensor;

pub use grad_check::{grad_check, grad_check_sampled, ScalarGraph};
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape: {what}")]
    InvalidShape { what: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
}

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Gaussian tensor with the given standard deviation, drawn from a labeled
/// deterministic stream.
pub fn randn(shape: &[usize], std: f64, seed: u64, label: &str) -> Tensor {
    let mut rng = crate::rng::stream(seed, label);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * std
        })
        .collect();
    Tensor::from_vec(data, shape).expect("shape/product always consistent")
}

/// Uniform tensor in [-bound, bound] from a labeled deterministic stream.
pub fn rand_uniform(shape: &[usize], bound: f64, seed: u64, label: &str) -> Tensor {
    let mut rng = crate::rng::stream(seed, label);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::from_vec(data, shape).expect("shape/product always consistent")
}

/// log(exp(a) + exp(b)) without overflow; identities with -inf handled.
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Log-sum-exp over a slice; empty input gives -inf.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let mx = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    mx + xs.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_add_matches_direct_computation() {
        let v = log_add((0.3f64).ln(), (0.7f64).ln());
        assert!((v - 0.0).abs() < 1e-12);
        assert_eq!(log_add(f64::NEG_INFINITY, -2.0), -2.0);
    }

    #[test]
    fn randn_is_label_deterministic() {
        let a = randn(&[3, 3], 0.1, 5, "w");
        let b = randn(&[3, 3], 0.1, 5, "w");
        let c = randn(&[3, 3], 0.1, 5, "v");
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
