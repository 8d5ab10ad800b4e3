//! Numerical evaluation of the non-convex convergence bound for SlowMo,
//! its step-count condition, and the direction-variance constant `V`.
//!
//! With `K = τT` total steps, `γ_eff = αγ/(1−β) = √(m/K)` and `V` bounding
//! `E‖d̄ − E d̄‖²`, the bound reads
//!
//! ```text
//! (1/K) ΣΣ E‖∇f(x_{t,k})‖² ≤ (2Δ + mVL)/√(mK) + bias
//!                           + 4mVL²(τ−1)/K · ((1−β)/α − 1)²
//!                           + 8mVL²τ/K · β²/(1−β²)
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::rng::gradient_stream;
use crate::numerics::{ordered_mean, NoiseSpec, ParameterVector, Problem, ProblemConstants};
use crate::optim::{local_direction, BaseOptimizerConfig, OptimizerBuffers};
use crate::protocol::ProtocolSpec;
use crate::sim::MetricsTrace;

/// Minimum number of Monte-Carlo draws `estimate_v` accepts.
pub const MIN_V_SAMPLES: usize = 100;

const GAMMA_EFF_RTOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    /// `f(x₀) − f_inf`.
    pub delta: f64,
    pub workers: usize,
    pub tau: u64,
    /// Outer iterations `T`.
    pub outer_iterations: u64,
    pub smoothness: f64,
    pub v: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Value used for the base-optimizer bias sum.
    pub bias_term: f64,
}

impl BoundInputs {
    pub fn total_steps(&self) -> u64 {
        self.tau * self.outer_iterations
    }

    fn validate(&self) -> Result<()> {
        if self.beta == 1.0 {
            return Err(Error::config("beta = 1 makes the momentum term divide by zero"));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::config(format!("beta must lie in [0, 1), got {}", self.beta)));
        }
        if self.alpha <= 0.0 || self.workers == 0 || self.total_steps() == 0 || self.smoothness <= 0.0 {
            return Err(Error::config("alpha, m, τT and L must all be positive"));
        }
        if self.delta < 0.0 || self.v < 0.0 || self.bias_term < 0.0 {
            return Err(Error::config("Δ, V and the bias term must be nonnegative"));
        }
        Ok(())
    }
}

/// The four additive pieces of the right-hand side.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RhsTerms {
    pub leading: f64,
    pub bias: f64,
    pub slow_tau: f64,
    pub slow_beta: f64,
}

impl RhsTerms {
    pub fn total(&self) -> f64 {
        self.leading + self.bias + self.slow_tau + self.slow_beta
    }
}

pub fn theorem1_terms(inputs: &BoundInputs) -> Result<RhsTerms> {
    inputs.validate()?;
    let m = inputs.workers as f64;
    let k = inputs.total_steps() as f64;
    let tau = inputs.tau as f64;
    let (l, v, a, b) = (inputs.smoothness, inputs.v, inputs.alpha, inputs.beta);
    let slow = (1.0 - b) / a - 1.0;
    Ok(RhsTerms {
        leading: (2.0 * inputs.delta + m * v * l) / (m * k).sqrt(),
        bias: inputs.bias_term,
        slow_tau: 4.0 * m * v * l * l * (tau - 1.0) / k * slow * slow,
        slow_beta: 8.0 * m * v * l * l * tau / k * b * b / (1.0 - b * b),
    })
}

pub fn theorem1_rhs(inputs: &BoundInputs) -> Result<f64> {
    theorem1_terms(inputs).map(|t| t.total())
}

/// Minimum `τT` for which the bound applies.
pub fn step_count_condition(workers: usize, smoothness: f64, tau: u64, alpha: f64, beta: f64) -> f64 {
    let tau = tau as f64;
    let branch = (3.0 * tau * (1.0 - beta - alpha) / alpha)
        .max(4.0 * tau * beta / (1.0 - beta))
        .max(1.0);
    workers as f64 * smoothness * smoothness * (1.0 + 3f64.sqrt() * branch)
}

/// `αγ/(1−β)`.
pub fn gamma_eff(alpha: f64, gamma: f64, beta: f64) -> f64 {
    alpha * gamma / (1.0 - beta)
}

/// Fast learning rate that makes `γ_eff = √(m/K)`.
pub fn prescribed_gamma(workers: usize, total_steps: u64, alpha: f64, beta: f64) -> f64 {
    (workers as f64 / total_steps as f64).sqrt() * (1.0 - beta) / alpha
}

/// Bias bound for the Local-SGD base, `3γ²L²σ²τ + 9γ²L²ζ²τ²`; valid when
/// `γLτ ≤ 1/6`.
pub fn local_sgd_bias(gamma: f64, constants: &ProblemConstants, tau: u64) -> f64 {
    let tau = tau as f64;
    let g2l2 = (gamma * constants.smoothness).powi(2);
    3.0 * g2l2 * constants.sigma2 * tau + 9.0 * g2l2 * constants.zeta2 * tau * tau
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VEstimate {
    pub value: f64,
    pub std_error: f64,
    pub samples: usize,
}

/// Monte-Carlo estimate of `E‖d̄ − E d̄‖²` with every worker at `x` and
/// fresh optimizer buffers.
pub fn estimate_v(
    problem: &Problem,
    base: &BaseOptimizerConfig,
    protocol: &ProtocolSpec,
    x: &[f64],
    samples: usize,
    seed: u64,
) -> Result<VEstimate> {
    if samples < MIN_V_SAMPLES {
        return Err(Error::config(format!(
            "estimate_v needs at least {MIN_V_SAMPLES} samples, got {samples}"
        )));
    }
    crate::error::check_dim(problem.dim(), x.len())?;
    let m = problem.workers();
    let mut rngs: Vec<_> = (0..m).map(|i| gradient_stream(seed, i)).collect();
    let fresh = OptimizerBuffers::zeros(problem.dim());

    let mut draws: Vec<ParameterVector> = Vec::with_capacity(samples);
    for _ in 0..samples {
        let grads = rngs
            .iter_mut()
            .enumerate()
            .map(|(i, rng)| problem.worker_stochastic_gradient(i, x, rng))
            .collect::<Result<Vec<_>>>()?;
        let mean_dir = if *protocol == ProtocolSpec::Allreduce {
            let g = ordered_mean(grads.iter().map(|g| &g[..]));
            local_direction(&base.rule, &mut fresh.clone(), &g)?
        } else {
            let dirs = grads
                .iter()
                .map(|g| local_direction(&base.rule, &mut fresh.clone(), g))
                .collect::<Result<Vec<_>>>()?;
            ordered_mean(dirs.iter().map(|d| &d[..]))
        };
        draws.push(mean_dir);
    }

    // Shift by the first draw so that deterministic directions give exactly 0.
    let shift = draws[0].clone();
    for d in draws.iter_mut() {
        d.axpy(-1.0, &shift);
    }
    let center = ordered_mean(draws.iter().map(|d| &d[..]));
    let n = samples as f64;
    let sq: Vec<f64> = draws.iter().map(|d| crate::numerics::dist_sq(d, &center)).collect();
    let mean_sq = sq.iter().sum::<f64>() / n;
    let value = mean_sq * n / (n - 1.0);
    let var_sq = sq.iter().map(|q| (q - mean_sq).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(VEstimate {
        value,
        std_error: (var_sq / n).sqrt() * n / (n - 1.0),
        samples,
    })
}

/// `σ²/m` for additive Gaussian noise with a plain gradient base.
pub fn expected_v(problem: &Problem) -> Option<f64> {
    match problem.noise() {
        NoiseSpec::AdditiveGaussian { sigma } => Some(sigma * sigma / problem.workers() as f64),
        NoiseSpec::Minibatch { .. } => None,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BiasMode {
    /// Mean of the per-step `base_bias_sq` recorded in the traces.
    Measured,
    /// Local-SGD surrogate `3γ²L²σ²τ + 9γ²L²ζ²τ²`.
    LocalSgdSurrogate,
}

/// Everything `check_bound` needs besides the traces.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundSetup {
    pub constants: ProblemConstants,
    pub workers: usize,
    pub tau: u64,
    pub alpha: f64,
    pub beta: f64,
    /// Constant fast learning rate used by the runs.
    pub gamma: f64,
    pub total_steps: u64,
    pub bias: BiasMode,
    /// Defaults to `σ²/m`.
    #[serde(default)]
    pub v: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundStatus {
    Pass,
    Fail,
    ConditionNotMet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub status: BoundStatus,
    /// Seed-averaged `(1/K) ΣΣ ‖∇f(x̄_{t,k})‖²`.
    pub lhs: f64,
    pub lhs_std_error: f64,
    pub rhs: f64,
    pub terms: RhsTerms,
    pub delta: f64,
    pub v: f64,
    pub gamma_eff: f64,
    pub gamma_eff_target: f64,
    pub required_steps: f64,
    pub total_steps: u64,
    pub seeds: usize,
    /// Reasons the theorem's preconditions do not hold.
    pub unmet: Vec<String>,
    pub estimated_constants: bool,
}

impl BoundReport {
    pub fn holds(&self) -> bool {
        self.status == BoundStatus::Pass
    }
}

/// Per-trace average of `‖∇f(x̄)‖²` over inner-step records.
pub fn trace_lhs(trace: &MetricsTrace) -> Result<f64> {
    let (sum, n) = trace
        .inner_records()
        .fold((0.0, 0usize), |(s, n), r| (s + r.grad_norm_sq, n + 1));
    if n == 0 {
        return Err(Error::Check("trace has no inner-step records".into()));
    }
    Ok(sum / n as f64)
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Compares the seed-averaged left-hand side against the bound.
pub fn check_bound(traces: &[MetricsTrace], setup: &BoundSetup) -> Result<BoundReport> {
    if traces.is_empty() {
        return Err(Error::Check("check_bound needs at least one trace".into()));
    }
    let lhs_values = traces.iter().map(trace_lhs).collect::<Result<Vec<_>>>()?;
    let (lhs, lhs_std_error) = mean_and_se(&lhs_values);

    let initial_losses: Vec<f64> = traces
        .iter()
        .map(|t| t.records.first().map(|r| r.loss))
        .collect::<Option<_>>()
        .ok_or_else(|| Error::Check("empty trace".into()))?;
    let f0 = initial_losses.iter().sum::<f64>() / initial_losses.len() as f64;
    let c = setup.constants;
    let delta = (f0 - c.f_inf).max(0.0);
    let m = setup.workers;
    let v = setup.v.unwrap_or(c.sigma2 / m as f64);

    let mut unmet = Vec::new();
    let bias_term = match setup.bias {
        BiasMode::Measured => {
            let per_trace: Vec<f64> = traces
                .iter()
                .map(|t| {
                    let (s, n) = t
                        .inner_records()
                        .fold((0.0, 0usize), |(s, n), r| (s + r.base_bias_sq, n + 1));
                    s / n.max(1) as f64
                })
                .collect();
            mean_and_se(&per_trace).0
        }
        BiasMode::LocalSgdSurrogate => {
            let gl_tau = setup.gamma * c.smoothness * setup.tau as f64;
            if gl_tau > 1.0 / 6.0 {
                unmet.push(format!("γLτ = {gl_tau} exceeds 1/6"));
            }
            local_sgd_bias(setup.gamma, &c, setup.tau)
        }
    };

    if !setup.total_steps.is_multiple_of(setup.tau) {
        unmet.push(format!(
            "total steps {} is not a multiple of τ = {}",
            setup.total_steps, setup.tau
        ));
    }
    let inputs = BoundInputs {
        delta,
        workers: m,
        tau: setup.tau,
        outer_iterations: setup.total_steps.div_ceil(setup.tau),
        smoothness: c.smoothness,
        v,
        alpha: setup.alpha,
        beta: setup.beta,
        bias_term,
    };
    let terms = theorem1_terms(&inputs)?;
    let rhs = terms.total();

    let k = inputs.total_steps();
    let g_eff = gamma_eff(setup.alpha, setup.gamma, setup.beta);
    let target = (m as f64 / k as f64).sqrt();
    if ((g_eff - target) / target).abs() > GAMMA_EFF_RTOL {
        unmet.push(format!("γ_eff = {g_eff} differs from √(m/K) = {target}"));
    }
    let required = step_count_condition(m, c.smoothness, setup.tau, setup.alpha, setup.beta);
    if (k as f64) < required {
        unmet.push(format!("K = {k} is below the required {required}"));
    }

    let status = if !unmet.is_empty() {
        BoundStatus::ConditionNotMet
    } else if lhs <= rhs {
        BoundStatus::Pass
    } else {
        BoundStatus::Fail
    };
    Ok(BoundReport {
        status,
        lhs,
        lhs_std_error,
        rhs,
        terms,
        delta,
        v,
        gamma_eff: g_eff,
        gamma_eff_target: target,
        required_steps: required,
        total_steps: k,
        seeds: traces.len(),
        unmet,
        estimated_constants: c.any_estimated(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inputs() -> BoundInputs {
        BoundInputs {
            delta: 1.0,
            workers: 1,
            tau: 1,
            outer_iterations: 100,
            smoothness: 1.0,
            v: 1.0,
            alpha: 1.0,
            beta: 0.0,
            bias_term: 0.0,
        }
    }

    #[test]
    fn all_reduce_specialization() {
        assert!((theorem1_rhs(&inputs()).unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn slow_terms_vanish_without_momentum() {
        let t = theorem1_terms(&BoundInputs { tau: 12, ..inputs() }).unwrap();
        assert_eq!((t.slow_tau, t.slow_beta), (0.0, 0.0));
    }

    #[test]
    fn tau_one_kills_tau_term() {
        let t = theorem1_terms(&BoundInputs {
            alpha: 0.3,
            beta: 0.7,
            ..inputs()
        })
        .unwrap();
        assert_eq!(t.slow_tau, 0.0);
        assert!(t.slow_beta > 0.0);
    }

    #[test]
    fn beta_one_is_rejected() {
        assert!(matches!(
            theorem1_rhs(&BoundInputs { beta: 1.0, ..inputs() }),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn step_condition_examples() {
        for tau in [1, 5, 48] {
            let c = step_count_condition(3, 2.0, tau, 1.0, 0.0);
            assert!((c - 12.0 * (1.0 + 3f64.sqrt())).abs() < 1e-12);
        }
        let c = step_count_condition(4, 2.0, 10, 1.0, 0.5);
        // Branches: 3·10·(1−0.5−1) = −15, 4·10·0.5/0.5 = 40, 1.
        let by_hand = 16.0 * (1.0 + 40.0 * 1.7320508075688772);
        assert!((c - by_hand).abs() < 1e-9);
        assert!((c - 1124.5125).abs() < 1e-3);
        let one = step_count_condition(1, 1.5, 7, 0.5, 0.3);
        assert!((step_count_condition(2, 1.5, 7, 0.5, 0.3) - 2.0 * one).abs() < 1e-12);
    }

    #[test]
    fn momentum_term_grows_with_beta() {
        let mut last = -1.0;
        for i in 0..=99 {
            let beta = i as f64 / 100.0;
            let t = theorem1_terms(&BoundInputs { beta, tau: 4, ..inputs() }).unwrap();
            assert!(t.slow_beta >= last);
            last = t.slow_beta;
        }
    }

    #[test]
    fn prescribed_gamma_hits_target() {
        let g = prescribed_gamma(2, 12_000, 1.0, 0.5);
        assert!((gamma_eff(1.0, g, 0.5) - (2.0f64 / 12_000.0).sqrt()).abs() < 1e-15);
    }
}
