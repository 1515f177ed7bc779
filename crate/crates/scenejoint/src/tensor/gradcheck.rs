//! Central finite-difference checking of tape gradients.
//!
//! The reference derivative perturbs one leaf coordinate at a time and
//! re-evaluates the recorded graph in f64 ([`Tape::eval_scalar_f64`]), so the
//! check is limited by the step size rather than by f32 forward noise. The
//! backward pass under test still runs in the ordinary f32 pipeline.

use super::tape::{NodeId, Tape};
use super::TensorError;

pub const FD_STEP: f64 = 1e-3;
pub const FD_REL_TOL: f64 = 1e-4;
pub const FD_ABS_TOL: f64 = 1e-6;

/// Worst elementwise deviation seen while checking one leaf.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel: f64,
    pub max_abs: f64,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

impl GradCheckReport {
    /// Applies the tolerance rule: coordinates whose larger magnitude exceeds
    /// `FD_ABS_TOL` must agree to `rel_tol` relatively; smaller ones to
    /// `FD_ABS_TOL` absolutely.
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel <= rel_tol && self.max_abs <= FD_ABS_TOL
    }
}

/// Compares the analytic gradient of `loss` w.r.t. every coordinate of
/// `leaf` against central finite differences.
pub fn check_leaf_gradient(
    tape: &Tape,
    loss: NodeId,
    leaf: NodeId,
    h: f64,
) -> Result<GradCheckReport, TensorError> {
    let coords: Vec<usize> = (0..tape.value(leaf).len()).collect();
    check_leaf_gradient_at(tape, loss, leaf, &coords, h)
}

/// Like [`check_leaf_gradient`] but probes only the given coordinates; used
/// to spot-check large parameter tensors where a full sweep is too slow.
pub fn check_leaf_gradient_at(
    tape: &Tape,
    loss: NodeId,
    leaf: NodeId,
    coords: &[usize],
    h: f64,
) -> Result<GradCheckReport, TensorError> {
    let grads = tape.backward(loss)?;
    let n = tape.value(leaf).len();
    let analytic = grads.dense(leaf, n);
    let base: Vec<f64> = tape.value(leaf).data().iter().map(|&v| v as f64).collect();

    let mut report = GradCheckReport {
        checked: coords.len(),
        max_rel: 0.0,
        max_abs: 0.0,
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    let mut probe = base.clone();
    for &i in coords {
        probe[i] = base[i] + h;
        let up = tape.eval_scalar_f64(loss, leaf, &probe)?;
        probe[i] = base[i] - h;
        let down = tape.eval_scalar_f64(loss, leaf, &probe)?;
        probe[i] = base[i];

        let numeric = (up - down) / (2.0 * h);
        let g = analytic[i] as f64;
        let diff = (g - numeric).abs();
        let scale = g.abs().max(numeric.abs());
        let (rel, abs) = if scale > FD_ABS_TOL {
            (diff / scale, 0.0)
        } else {
            (0.0, diff)
        };
        if rel > report.max_rel || abs > report.max_abs {
            report.worst_index = i;
            report.worst_analytic = g;
            report.worst_numeric = numeric;
        }
        report.max_rel = report.max_rel.max(rel);
        report.max_abs = report.max_abs.max(abs);
    }
    Ok(report)
}

/// Panics with coordinates and values when any leaf fails the check.
pub fn assert_gradients_match(tape: &Tape, loss: NodeId, leaves: &[(&str, NodeId)], rel_tol: f64) {
    for &(name, leaf) in leaves {
        let report = check_leaf_gradient(tape, loss, leaf, FD_STEP).expect("gradcheck evaluation");
        assert!(
            report.passes(rel_tol),
            "{name}: gradient mismatch at coordinate {} (analytic {:.9e}, numeric {:.9e}, \
             max_rel {:.3e}, max_abs {:.3e})",
            report.worst_index,
            report.worst_analytic,
            report.worst_numeric,
            report.max_rel,
            report.max_abs,
        );
    }
}
