//! Central finite-difference checks against [`Graph::backward`].

use super::graph::{Graph, Var};
use super::value::Tensor;
use crate::error::Result;

/// Worst discrepancy found by [`check`].
#[derive(Clone, Copy, Debug, Default)]
pub struct GradCheck {
    /// `max |analytic − numeric| / max(1, |analytic|)` over every input entry.
    pub max_rel_error: f64,
    pub entries: usize,
}

/// Compares analytic gradients of a scalar function of `inputs` with
/// central differences of step `h`. `build` must reconstruct the whole
/// computation from the given leaves each time it is called.
pub fn check<F>(inputs: &[Tensor], h: f64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.parameter(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = GradCheck::default();
    let mut probe = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            probe[k].data_mut()[i] = orig + h;
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = orig - h;
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.entries += 1;
        }
    }
    Ok(report)
}
