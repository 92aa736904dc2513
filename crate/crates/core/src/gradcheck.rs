//! Central finite-difference gradient verification.
//!
//! The oracle only ever calls the forward pass, so it stays independent of
//! the backward implementation it is used to check. All checks run in f64.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Default perturbation for central differences.
pub const FD_EPS: f64 = 1e-5;

/// Relative error with denominator max(|a|, |b|, 1e-8).
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Max elementwise relative error between two flat gradients.
pub fn max_rel_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| rel_error(x, y))
        .fold(0.0, f64::max)
}

/// Worst element found by [`check_gradients_detailed`].
#[derive(Debug, Clone, Copy)]
pub struct WorstElement {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Compare analytic gradients of a scalar-valued graph function against
/// central finite differences and return the max relative error over all
/// inputs and elements.
///
/// `build` receives a fresh graph plus one leaf per input tensor and must
/// return the scalar loss variable.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    check_gradients_detailed(inputs, h, build).map(|w| w.rel_error)
}

/// As [`check_gradients`], but reports where the worst disagreement sits.
pub fn check_gradients_detailed<F>(
    inputs: &[Tensor<f64>],
    h: f64,
    build: F,
) -> Result<WorstElement>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    // Analytic pass.
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs.iter())
        .map(|(v, t)| {
            g.grad(*v)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let eval = |tensors: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let loss = build(&mut g, &vars)?;
        g.value(loss).item()
    };

    let mut worst = WorstElement {
        input: 0,
        element: 0,
        analytic: 0.0,
        numeric: 0.0,
        rel_error: 0.0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for ei in 0..input.numel() {
            let orig = input.data()[ei];
            work[ti].data_mut()[ei] = orig + h;
            let plus = eval(&work)?;
            work[ti].data_mut()[ei] = orig - h;
            let minus = eval(&work)?;
            work[ti].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = rel_error(analytic[ti][ei], numeric);
            if err > worst.rel_error {
                worst = WorstElement {
                    input: ti,
                    element: ei,
                    analytic: analytic[ti][ei],
                    numeric,
                    rel_error: err,
                };
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn matmul_chain_passes_fd_check() {
        let mut rng = Rng::new(17);
        let a = Tensor::rand_uniform(&[3, 4], -1.0, 1.0, &mut rng);
        let b = Tensor::rand_uniform(&[4, 2], -1.0, 1.0, &mut rng);
        let err = check_gradients(&[a, b], FD_EPS, |g, vars| {
            let c = g.matmul(vars[0], vars[1])?;
            let t = g.tanh(c)?;
            g.sum_all(t)
        })
        .unwrap();
        assert!(err < 1e-3, "max rel err {err}");
    }

    #[test]
    fn rel_error_uses_floor_denominator() {
        assert_eq!(rel_error(0.0, 0.0), 0.0);
        assert!(rel_error(1e-12, 0.0) < 1e-3);
    }
}
