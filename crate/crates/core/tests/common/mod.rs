#![allow(dead_code, clippy::too_many_arguments)]

pub mod reference;

use serde_json::{json, Value};
use slowmo::harness::parse_config_str;
use slowmo::ExperimentConfig;

/// Builds a config from a JSON value, panicking on validation errors.
pub fn config(value: Value) -> ExperimentConfig {
    parse_config_str(&value.to_string()).unwrap_or_else(|e| panic!("{e}: {value}"))
}

/// Quadratic SlowMo experiment with a constant fast learning rate.
pub fn quadratic(workers: usize, dim: usize, protocol: Value, tau: u64, alpha: f64, beta: f64, gamma: f64, steps: u64, sigma: f64) -> Value {
    json!({
        "seed": 7,
        "workers": workers,
        "total_steps": steps,
        "problem": {"kind": "quadratic", "dim": dim, "shared_curvature": false, "heterogeneity": 1.0},
        "noise": {"kind": "additive-gaussian", "sigma": sigma},
        "protocol": protocol,
        "slowmo": {"alpha": alpha, "beta": beta, "tau": tau, "learning_rate": {"base": gamma}},
        "init": {"kind": "gaussian", "scale": 1.0}
    })
}

pub fn models(trace: &slowmo::MetricsTrace) -> Vec<Vec<f64>> {
    trace.records.iter().map(|r| r.mean_model.clone()).collect()
}
