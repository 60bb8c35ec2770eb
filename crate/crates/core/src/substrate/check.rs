//! Central finite-difference gradient checking.
//!
//! The numerical side only ever runs forward passes, so it stays independent
//! of the reverse-mode code it checks.

use super::{Graph, ParameterSet, Var};
use crate::error::Result;

/// Worst discrepancy found by [`check_gradients`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst: Option<(String, usize, f64, f64)>,
    pub checked: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps vanishing gradients from
/// turning round-off into huge ratios.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval(params: &ParameterSet<f64>, loss: &dyn Fn(&mut Graph<f64>) -> Var) -> f64 {
    let mut g = Graph::new();
    g.bind(params);
    let l = loss(&mut g);
    g.value(l).data()[0]
}

/// Compare reverse-mode gradients of `loss` against central differences with
/// step `h`, checking at most `per_param` coordinates of each parameter
/// (evenly strided). Parameters with no analytic gradient are treated as
/// having gradient zero.
pub fn check_gradients(
    params: &ParameterSet<f64>,
    loss: &dyn Fn(&mut Graph<f64>) -> Var,
    h: f64,
    per_param: usize,
) -> Result<GradCheck> {
    let mut g = Graph::new();
    g.bind(params);
    let l = loss(&mut g);
    let grads = g.backward(l)?;
    let mut out = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut probe = params.clone();
    for (name, t) in params.iter() {
        let n = t.len();
        let stride = n.div_ceil(per_param.max(1)).max(1);
        for i in (0..n).step_by(stride) {
            let orig = t.data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = orig + h;
            let up = eval(&probe, loss);
            probe.get_mut(name).unwrap().data_mut()[i] = orig - h;
            let down = eval(&probe, loss);
            probe.get_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.get(name).map_or(0.0, |g| g.data()[i]);
            let e = rel_error(analytic, numeric, 1e-5);
            out.checked += 1;
            if out.worst.is_none() || e > out.max_rel_error {
                out.max_rel_error = e;
                out.worst = Some((name.to_string(), i, analytic, numeric));
            }
        }
    }
    Ok(out)
}
