//! Central finite-difference verification of the reverse-mode gradients.
//! Always runs in `f64`.

use super::{GradGraph, Tensor4, Var};
use crate::error::TensorError;

/// Denominator floor of the relative error.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Probe entries with |value| below this are excluded: they may sit on an
/// activation kink (ReLU at 0) where one-sided derivatives disagree.
pub const KINK_EPS: f64 = 1e-6;

/// Outcome of a [`grad_check_report`] run.
#[derive(Clone, Copy, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Entries compared against central differences.
    pub checked: usize,
    /// Entries skipped by the kink policy: probe value at zero, or a
    /// piecewise-linear activation changing region within the step.
    pub skipped: usize,
}

/// Compare the analytic gradient of a scalar-valued function against central
/// finite differences, returning the maximum relative error over the probed
/// entries.
///
/// `build` constructs the output from the probe leaf on a fresh graph; it is
/// re-invoked for every perturbed evaluation, so it must be deterministic.
pub fn grad_check<F>(build: F, probe: &Tensor4<f64>, step: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut GradGraph<f64>, Var) -> Result<Var, TensorError>,
{
    Ok(grad_check_report(build, probe, step)?.max_rel_error)
}

pub fn grad_check_report<F>(
    build: F,
    probe: &Tensor4<f64>,
    step: f64,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut GradGraph<f64>, Var) -> Result<Var, TensorError>,
{
    if step <= 0.0 {
        return Err(TensorError::invalid("grad_check", "step must be > 0"));
    }
    let mut graph = GradGraph::new();
    let x = graph.leaf(probe.clone());
    let out = build(&mut graph, x)?;
    if graph.value(out).numel() != 1 {
        return Err(TensorError::invalid(
            "grad_check",
            format!("function must be scalar, got {}", graph.value(out).shape()),
        ));
    }
    if let Some(node) = graph.find_non_finite() {
        return Err(TensorError::NonFinite { node });
    }
    let grads = graph.backward(out)?;
    let analytic = grads
        .wrt(x)
        .cloned()
        .unwrap_or_else(|| Tensor4::zeros(probe.shape()));
    if !analytic.is_finite() {
        return Err(TensorError::NonFinite {
            node: graph.node_name(x),
        });
    }

    let eval = |t: &Tensor4<f64>| -> Result<(f64, Vec<bool>), TensorError> {
        let mut g = GradGraph::new();
        let v = g.leaf(t.clone());
        let out = build(&mut g, v)?;
        if let Some(node) = g.find_non_finite() {
            return Err(TensorError::NonFinite { node });
        }
        Ok((g.value(out).data()[0], g.kink_signature()))
    };

    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    let mut skipped = 0usize;
    for i in 0..probe.numel() {
        if probe.data()[i].abs() < KINK_EPS {
            skipped += 1;
            continue;
        }
        let mut plus = probe.clone();
        plus.data_mut()[i] += step;
        let mut minus = probe.clone();
        minus.data_mut()[i] -= step;
        let (fp, sig_p) = eval(&plus)?;
        let (fm, sig_m) = eval(&minus)?;
        if sig_p != sig_m {
            // The perturbation crossed an activation kink; the secant is not
            // a derivative estimate there.
            skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * step);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
        if rel > max_rel {
            max_rel = rel;
        }
        checked += 1;
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        checked,
        skipped,
    })
}
