//! Finite-difference validation of reverse-mode gradients.
//!
//! The checker rebuilds the graph from scratch for every perturbed element,
//! so the op under test may hold internal sampling state (dropout masks and
//! the like) as long as the builder reproduces it deterministically.

use crate::error::Result;
use crate::tensor::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Outcome of a gradient check: worst relative error over all elements of
/// all checked inputs.
#[derive(Debug, Clone, Copy)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Relative error with a floor so near-zero gradient pairs compare on an
/// absolute scale.
fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom < 1e-7 {
        (a - b).abs()
    } else {
        (a - b).abs() / denom
    }
}

/// Check the reverse-mode gradient of a scalar-valued builder against central
/// finite differences with step `h`.
///
/// `build` receives a fresh graph plus one grad-tracking `Var` per input
/// tensor and must return the scalar loss. All inputs are checked.
pub fn check<F>(build: F, inputs: &[Tensor<f64>], h: f64) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors
            .iter()
            .map(|t| g.input(t))
            .collect::<Result<_>>()?;
        let loss = build(&mut g, &vars)?;
        Ok(g.scalar_value(loss))
    };

    // Analytic gradients.
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect::<Result<_>>()?;
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).expect("params track grads").to_vec())
        .collect();

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut max_rel_err: f64 = 0.0;
    let mut checked = 0;
    for (ti, grad) in analytic.iter().enumerate() {
        for ei in 0..grad.len() {
            let orig = work[ti].data()[ei];
            work[ti].data_mut()[ei] = orig + h;
            let fp = eval(&work)?;
            work[ti].data_mut()[ei] = orig - h;
            let fm = eval(&work)?;
            work[ti].data_mut()[ei] = orig;
            let fd = (fp - fm) / (2.0 * h);
            max_rel_err = max_rel_err.max(rel_err(grad[ei], fd));
            checked += 1;
        }
    }
    Ok(GradReport {
        max_rel_err,
        checked,
    })
}
