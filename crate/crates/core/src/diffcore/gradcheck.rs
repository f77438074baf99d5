//! Reverse-mode gradients versus central finite differences.

use crate::error::{Error, Result};

use super::graph::{Graph, Var};
use super::params::{Bindings, Params};
use super::tensor::Tensor;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Relative errors use `max(|analytic|, |numeric|, FLOOR·max(1, |loss|))` as
/// the denominator, so entries far below the differencing round-off of the
/// loss are judged absolutely.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub index: usize,
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub loss: f64,
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn eval<F>(build: &F, tensors: &[Tensor], with_grad: bool) -> Result<(f64, Vec<Tensor>)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = tensors.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    if g.shape(loss) != (1, 1) {
        return Err(Error::Evaluation(format!("graph builder returned shape {:?}, expected a scalar", g.shape(loss))));
    }
    let value = g.scalar(loss);
    if !value.is_finite() {
        return Err(Error::Evaluation(format!("non-finite loss {value}")));
    }
    if !with_grad {
        return Ok((value, Vec::new()));
    }
    g.backward(loss)?;
    Ok((value, vars.iter().map(|&v| g.grad(v)).collect()))
}

/// Compares reverse-mode gradients of the scalar built by `build` against
/// central differences, entry by entry.
pub fn check_gradients<F>(build: F, params: &[Tensor], tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let names: Vec<String> = (0..params.len()).map(|i| format!("param{i}")).collect();
    check_named(&build, params, &names, tolerance)
}

/// [`check_gradients`] over a model's [`Params`], reporting by name.
pub fn check_params<F>(build: F, params: &Params, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &Bindings) -> Result<Var>,
{
    let names: Vec<String> = params.entries().iter().map(|e| e.name.clone()).collect();
    let wrapped = |g: &mut Graph, vars: &[Var]| build(g, &Bindings::from_vars(vars.to_vec()));
    check_named(&wrapped, &params.tensors(), &names, tolerance)
}

fn check_named<F>(build: &F, params: &[Tensor], names: &[String], tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (loss, analytic) = eval(build, params, true)?;
    let floor = REL_FLOOR * loss.abs().max(1.0);
    let mut work = params.to_vec();
    let mut checks = Vec::with_capacity(params.len());
    for (pi, grad) in analytic.iter().enumerate() {
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for k in 0..params[pi].len() {
            let orig = params[pi].data()[k];
            work[pi].data_mut()[k] = orig + FD_STEP;
            let (up, _) = eval(build, &work, false)?;
            work[pi].data_mut()[k] = orig - FD_STEP;
            let (down, _) = eval(build, &work, false)?;
            work[pi].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = grad.data()[k];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(floor);
            max_rel = max_rel.max(rel);
            max_abs = max_abs.max(abs);
        }
        checks.push(ParamCheck { index: pi, name: names[pi].clone(), max_rel_err: max_rel, max_abs_err: max_abs });
    }
    let max_rel_err = checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport { loss, params: checks, max_rel_err, tolerance, passed: max_rel_err < tolerance })
}
