use serde::{Deserialize, Serialize};

use crate::numerics::max_abs_diff;
use crate::sim::MetricsTrace;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub passed: bool,
    /// Largest coordinate difference between the averaged models.
    pub max_diff: f64,
    pub tol: f64,
    pub steps: usize,
    /// Record index at which `max_diff` occurs.
    pub worst_step: Option<usize>,
    /// Set when the traces cannot be compared.
    pub diagnostic: Option<String>,
}

/// Max over records of `‖x̄_a − x̄_b‖_∞`; passes iff it is at most `tol`.
pub fn equivalence_check(a: &MetricsTrace, b: &MetricsTrace, tol: f64) -> EquivalenceReport {
    let models = |t: &MetricsTrace| t.records.iter().map(|r| r.mean_model.clone()).collect::<Vec<_>>();
    compare_models(&models(a), &models(b), tol)
}

/// Same comparison on raw model sequences, e.g. from a reference
/// implementation.
pub fn compare_models(a: &[Vec<f64>], b: &[Vec<f64>], tol: f64) -> EquivalenceReport {
    let fail = |msg: String| EquivalenceReport {
        passed: false,
        max_diff: f64::INFINITY,
        tol,
        steps: a.len().min(b.len()),
        worst_step: None,
        diagnostic: Some(msg),
    };
    if a.len() != b.len() {
        return fail(format!("trace lengths differ: {} vs {}", a.len(), b.len()));
    }
    let mut max_diff = 0.0f64;
    let mut worst_step = None;
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        if x.len() != y.len() {
            return fail(format!("model dimensions differ at step {i}: {} vs {}", x.len(), y.len()));
        }
        let d = max_abs_diff(x, y);
        if d.is_nan() {
            return fail(format!("non-finite model at step {i}"));
        }
        if d > max_diff || worst_step.is_none() {
            max_diff = max_diff.max(d);
            worst_step = Some(i);
        }
    }
    EquivalenceReport {
        passed: max_diff <= tol,
        max_diff,
        tol,
        steps: a.len(),
        worst_step,
        diagnostic: None,
    }
}
