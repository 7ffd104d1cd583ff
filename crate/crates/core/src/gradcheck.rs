//! Central finite-difference checks of reverse-mode gradients.

use std::collections::BTreeMap;

use crate::autodiff::{ComputeGraph, Mode, NodeId};
use crate::error::Result;
use crate::tensor::Tensor;

/// Named parameter values handed to a graph builder.
pub type ParamValues = BTreeMap<String, Tensor>;

/// Step used for the central differences.
pub const FD_STEP: f64 = 1e-6;

/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `name[index]` of the element with the largest error.
    pub worst: Option<String>,
    pub checked: usize,
    pub tolerance: f64,
    /// Builder or backward failures; a nonempty list fails the check.
    pub errors: Vec<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.errors.is_empty() && self.checked > 0 && self.max_rel_err < self.tolerance
    }
}

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn eval_loss<F>(build: &F, params: &ParamValues, mode: Mode) -> Result<f64>
where
    F: Fn(&mut ComputeGraph, &ParamValues) -> Result<NodeId>,
{
    let mut g = ComputeGraph::new(mode);
    let loss = build(&mut g, params)?;
    Ok(g.value(loss).item())
}

/// Compares the graph's gradients for every element of every parameter with
/// central differences of the scalar loss produced by `build`.
pub fn grad_check<F>(params: &ParamValues, mode: Mode, build: F, tolerance: f64) -> GradCheckReport
where
    F: Fn(&mut ComputeGraph, &ParamValues) -> Result<NodeId>,
{
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        tolerance,
        errors: Vec::new(),
    };
    let mut g = ComputeGraph::new(mode);
    let grads = match build(&mut g, params).and_then(|loss| g.backward(loss)) {
        Ok(grads) => grads,
        Err(e) => {
            report.errors.push(e.to_string());
            return report;
        }
    };
    let mut probe = params.clone();
    for (name, value) in params {
        let analytic = grads
            .get(name)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(value.shape()));
        for i in 0..value.numel() {
            let orig = value.data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = orig + FD_STEP;
            let up = eval_loss(&build, &probe, mode);
            probe.get_mut(name).unwrap().data_mut()[i] = orig - FD_STEP;
            let down = eval_loss(&build, &probe, mode);
            probe.get_mut(name).unwrap().data_mut()[i] = orig;
            match (up, down) {
                (Ok(up), Ok(down)) => {
                    let numeric = (up - down) / (2.0 * FD_STEP);
                    let err = relative_error(analytic.data()[i], numeric);
                    report.checked += 1;
                    if err > report.max_rel_err || report.worst.is_none() {
                        report.max_rel_err = err;
                        report.worst = Some(format!("{name}[{i}]"));
                    }
                }
                (Err(e), _) | (_, Err(e)) => report.errors.push(format!("{name}[{i}]: {e}")),
            }
        }
    }
    report
}
