//! Central-difference gradient verification.
//!
//! The comparator is independent of the graph: it perturbs one coordinate at
//! a time and compares (f(x+εe)−f(x−εe))/2ε against a supplied analytic
//! gradient, with the relative error denominator max(|analytic|, |numeric|,
//! 1e-8). The graph-aware wrapper obtains the analytic gradient by a single
//! backward pass before probing.

use super::graph::{Graph, Var};
use super::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Max relative error between an analytic gradient and central differences
/// of `f` around `x`.
pub fn finite_diff_against(
    mut f: impl FnMut(&Tensor<f64>) -> f64,
    x: &Tensor<f64>,
    analytic: &Tensor<f64>,
    eps: f64,
) -> f64 {
    assert_eq!(x.shape(), analytic.shape());
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (f(&plus) - f(&minus)) / (2.0 * eps);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if rel > worst {
            worst = rel;
        }
    }
    worst
}

/// Runs `build` once to obtain the analytic gradient of its scalar output
/// with respect to the leaf, then probes the same function numerically.
/// Returns the max relative error.
pub fn finite_diff_check(
    build: impl Fn(&mut Graph<f64>, Var) -> Var,
    x: &Tensor<f64>,
    eps: f64,
) -> f64 {
    let mut g = Graph::new();
    let leaf = g.leaf(x.clone(), true);
    let root = build(&mut g, leaf);
    assert_eq!(g.value(root).numel(), 1, "objective must be scalar");
    g.backward(root).expect("backward failed in gradient check");
    let analytic = g
        .grad(leaf)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));
    finite_diff_against(
        |probe| {
            let mut g = Graph::new();
            let leaf = g.leaf(probe.clone(), false);
            let root = build(&mut g, leaf);
            g.value(root).item()
        },
        x,
        &analytic,
        eps,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::rng::Rng;

    #[test]
    fn linear_function_error_is_tiny() {
        let x = Tensor::from_f64s(&[3], &[0.3, -1.0, 2.0]);
        let err = finite_diff_check(
            |g, v| {
                let s = g.scale(v, 2.5).unwrap();
                g.sum(s).unwrap()
            },
            &x,
            DEFAULT_EPS,
        );
        assert!(err <= 1e-10, "linear f should be exact, got {err}");
    }

    #[test]
    fn quadratic_function_error_small() {
        let mut rng = Rng::seed_from(9);
        let x = Tensor::rand_uniform(&[5], -1.0, 1.0, &mut rng);
        let err = finite_diff_check(
            |g, v| {
                let sq = g.mul(v, v).unwrap();
                g.sum(sq).unwrap()
            },
            &x,
            DEFAULT_EPS,
        );
        assert!(err <= 1e-7, "quadratic err {err}");
    }

    #[test]
    fn corrupted_adjoint_is_detected() {
        // negative control: a deliberately wrong analytic gradient must
        // produce a large reported error
        let x = Tensor::from_f64s(&[4], &[0.5, 1.5, -0.75, 2.0]);
        let mut g = Graph::new();
        let leaf = g.leaf(x.clone(), true);
        let sq = g.mul(leaf, leaf).unwrap();
        let root = g.sum(sq).unwrap();
        g.backward(root).unwrap();
        let corrupted = g.grad(leaf).unwrap().map(|v| v * 1.1 + 0.05);
        let err = finite_diff_against(
            |probe| {
                let mut g = Graph::new();
                let leaf = g.leaf(probe.clone(), false);
                let sq = g.mul(leaf, leaf).unwrap();
                let s = g.sum(sq).unwrap();
                g.value(s).item()
            },
            &x,
            &corrupted,
            DEFAULT_EPS,
        );
        assert!(err > 1e-2, "corrupted adjoint must be flagged, got {err}");
    }
}
