//! Finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::graph::{GradFault, Graph, Var};
use crate::nn::tensor::Tensor;

/// Denominator floor for the relative error, so gradients that are zero up
/// to round-off do not produce spurious huge ratios.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Tensors with more elements than this are probed on a random subsample
    /// of exactly this many elements.
    pub max_elems_per_tensor: usize,
    pub seed: u64,
    pub fault: Option<GradFault>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            max_elems_per_tensor: 200,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// (tensor index, element index) of the worst element.
    pub worst: Option<(usize, usize)>,
    pub tol: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
    (analytic - numeric).abs() / denom
}

fn evaluate<F>(f: &F, params: &[Tensor], fault: Option<GradFault>) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::with_fault(fault);
    let vars: Vec<Var> = params.iter().map(|p| g.param(p)).collect();
    let out = f(&mut g, &vars)?;
    Ok((g, vars, out))
}

/// Compares reverse-mode gradients of scalar `f` against central differences
/// `(f(θ+δ) − f(θ−δ)) / 2δ`, element by element.
pub fn grad_check<F>(f: F, params: &[Tensor], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    grad_check_with(
        f,
        params,
        &GradCheckOptions {
            step,
            tol,
            ..GradCheckOptions::default()
        },
    )
}

pub fn grad_check_with<F>(f: F, params: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (mut g, vars, out) = evaluate(&f, params, opts.fault)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| g.grad(v).map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec))
        .collect();
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = params.to_vec();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
        tol: opts.tol,
        passed: true,
    };
    for ti in 0..params.len() {
        let n = params[ti].len();
        let indices: Vec<usize> = if n > opts.max_elems_per_tensor {
            let mut idx = sample(&mut rng, n, opts.max_elems_per_tensor).into_vec();
            idx.sort_unstable();
            idx
        } else {
            (0..n).collect()
        };
        for ei in indices {
            let orig = params[ti].values()[ei];
            probe[ti].values_mut()[ei] = orig + opts.step;
            let (g, _, o) = evaluate(&f, &probe, None)?;
            let plus = g.scalar(o);
            probe[ti].values_mut()[ei] = orig - opts.step;
            let (g, _, o) = evaluate(&f, &probe, None)?;
            let minus = g.scalar(o);
            probe[ti].values_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let mut err = relative_error(analytic[ti][ei], numeric);
            if err.is_nan() {
                err = f64::INFINITY;
            }
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((ti, ei));
            }
        }
    }
    report.passed = report.max_rel_error <= opts.tol;
    Ok(report)
}
