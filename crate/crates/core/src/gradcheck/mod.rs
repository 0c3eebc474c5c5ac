//! Central finite-difference oracle for analytic gradients.

mod suite;

pub use suite::{model_suite, op_suite, CheckCase, TOLERANCE};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Default two-sided step.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Builds a scalar loss from leaves holding the given parameter values.
pub type LossFn<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a;

/// Per-parameter outcome of a check.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub index: usize,
    pub coords_checked: usize,
    pub rel_error: f64,
}

fn eval(f: &LossFn<'_>, params: &[Tensor<f64>]) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let v = g.value(loss);
    if v.len() != 1 {
        return Err(Error::Contract("grad_check loss must be scalar".into()));
    }
    Ok(v.data()[0])
}

/// Max over parameters of the relative error between analytic and central
/// finite-difference gradients, checking every coordinate.
///
/// Relative error for one parameter tensor is
/// `max|analytic - numeric| / max(max|analytic|, max|numeric|)`.
pub fn grad_check(f: &LossFn<'_>, params: &[Tensor<f64>], eps: f64) -> Result<f64> {
    Ok(grad_check_detailed(f, params, eps, None, 0)?
        .iter()
        .map(|c| c.rel_error)
        .fold(0.0, f64::max))
}

/// Like [`grad_check`] but with at most `max_coords` randomly chosen
/// coordinates per parameter (all when `None`).
pub fn grad_check_detailed(
    f: &LossFn<'_>,
    params: &[Tensor<f64>],
    eps: f64,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<Vec<ParamCheck>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone(), true)).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let mut rng = Rng::new(seed);
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for (pi, var) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(params[pi].shape());
        let analytic = grads.wrt(*var).unwrap_or(&zeros);
        let n = params[pi].len();
        let coords: Vec<usize> = match max_coords {
            Some(k) if k < n => rng.choose_distinct(n, k),
            _ => (0..n).collect(),
        };
        let mut max_diff: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for &c in &coords {
            let orig = work[pi].data()[c];
            work[pi].data_mut()[c] = orig + eps;
            let up = eval(f, &work)?;
            work[pi].data_mut()[c] = orig - eps;
            let down = eval(f, &work)?;
            work[pi].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data()[c];
            max_diff = max_diff.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
        }
        let rel_error = if scale > 0.0 { max_diff / scale } else { 0.0 };
        out.push(ParamCheck {
            index: pi,
            coords_checked: coords.len(),
            rel_error,
        });
    }
    Ok(out)
}
