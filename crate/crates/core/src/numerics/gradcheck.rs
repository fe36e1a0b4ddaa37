use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Outcome of a central finite-difference comparison.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    /// `(input, element)` where the largest error occurred.
    pub worst: (usize, usize),
    pub checked: usize,
}

pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Compares `analytic` against central differences of `f` around `inputs`.
/// A `None` gradient counts as zero.
pub fn finite_difference(
    inputs: &mut [Tensor],
    analytic: &[Option<Tensor>],
    h: f64,
    mut f: impl FnMut(&[Tensor]) -> Result<f64>,
) -> Result<GradCheck> {
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for t in 0..inputs.len() {
        for i in 0..inputs[t].len() {
            let x = inputs[t].data()[i];
            inputs[t].data_mut()[i] = x + h;
            let up = f(inputs)?;
            inputs[t].data_mut()[i] = x - h;
            let down = f(inputs)?;
            inputs[t].data_mut()[i] = x;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[t].as_ref().map_or(0.0, |g| g.data()[i]);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = err;
                report.worst = (t, i);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Checks the tape's gradients of a scalar-valued `f` with respect to every input.
pub fn check_gradients(
    inputs: &[Tensor],
    h: f64,
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> Result<GradCheck> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Option<Tensor>> = vars.iter().map(|&v| g.take_grad(v)).collect();
    let mut inputs = inputs.to_vec();
    finite_difference(&mut inputs, &analytic, h, |xs| {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    })
}
