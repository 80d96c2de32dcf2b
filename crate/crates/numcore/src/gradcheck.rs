use crate::error::{Error, Result};
use crate::graph::{Bindings, Graph, Var};
use crate::tensor::ParameterSet;

/// Largest relative disagreement between reverse-mode and central
/// finite-difference gradients of `f` over every coordinate of `inputs`.
///
/// The relative error of one coordinate is `|g_ad − g_fd| / max(1, |g_fd|)`.
pub fn grad_check<F>(f: F, inputs: &ParameterSet, eps: f64) -> Result<f64>
where
    F: FnMut(&mut Graph, &Bindings) -> Result<Var>,
{
    grad_check_strided(f, inputs, eps, usize::MAX)
}

/// Like [`grad_check`] but probes at most `per_tensor` evenly spaced
/// coordinates of each input, for networks too large to check exhaustively.
pub fn grad_check_strided<F>(mut f: F, inputs: &ParameterSet, eps: f64, per_tensor: usize) -> Result<f64>
where
    F: FnMut(&mut Graph, &Bindings) -> Result<Var>,
{
    if per_tensor == 0 {
        return Err(Error::Config("per_tensor must be positive".into()));
    }
    if !(1e-6..=1e-2).contains(&eps) {
        return Err(Error::Config(format!("eps must lie in [1e-6, 1e-2], got {eps}")));
    }
    let mut g = Graph::new();
    let bound = g.bind(inputs)?;
    let out = f(&mut g, &bound)?;
    check_finite(g.scalar(out))?;
    let grads = g.backward(out)?;

    let mut eval = |params: &ParameterSet| -> Result<f64> {
        let mut g = Graph::new();
        let b = g.bind(params)?;
        let out = f(&mut g, &b)?;
        check_finite(g.scalar(out))
    };

    let mut worst = 0.0f64;
    let mut probe = inputs.clone();
    let names: Vec<String> = inputs.names().map(str::to_string).collect();
    for name in &names {
        let var = bound.get(name)?;
        let n = inputs.get(name).map(|t| t.numel()).unwrap_or(0);
        let step = n.div_ceil(per_tensor).max(1);
        for i in (0..n).step_by(step) {
            let orig = inputs.get(name).unwrap().data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = orig + eps;
            let up = eval(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig - eps;
            let down = eval(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * eps);
            let ad = grads.get(var).map_or(0.0, |gv| gv[i]);
            worst = worst.max((ad - fd).abs() / fd.abs().max(1.0));
        }
    }
    Ok(worst)
}

fn check_finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Evaluation(format!("function value {v} is not finite")))
    }
}
