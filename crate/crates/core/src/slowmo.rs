//! The outer loop: `τ` base-optimizer steps, an exact average, then the slow
//! momentum update
//!
//! ```text
//! u_{t+1}   = β u_t + (x_{t,0} − x_{t,τ}) / γ_t
//! x_{t+1,0} = x_{t,0} − α γ_t u_{t+1}
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ParameterVector;
use crate::optim::apply_buffer_strategy;
use crate::protocol::exact_average;
use crate::sim::Simulation;

/// Fast learning rate as a function of the outer iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub base: f64,
    /// Linear warm-up over this many outer iterations (0 disables it).
    #[serde(default)]
    pub warmup_outer: u64,
    /// Outer iterations at which the rate is multiplied by `decay`.
    #[serde(default)]
    pub milestones: Vec<u64>,
    #[serde(default = "default_decay")]
    pub decay: f64,
}

fn default_decay() -> f64 {
    0.1
}

impl LrSchedule {
    pub fn constant(base: f64) -> Self {
        Self {
            base,
            warmup_outer: 0,
            milestones: Vec::new(),
            decay: default_decay(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base > 0.0 && self.base.is_finite()) {
            return Err(Error::config(format!(
                "learning rate must be > 0, got {}",
                self.base
            )));
        }
        if !(self.decay > 0.0 && self.decay.is_finite()) {
            return Err(Error::config(format!(
                "learning-rate decay must be > 0, got {}",
                self.decay
            )));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("learning-rate milestones must be strictly increasing"));
        }
        Ok(())
    }

    /// `γ_t`, fixed for the whole outer iteration `t`.
    pub fn at(&self, t: u64) -> f64 {
        let decays = self.milestones.iter().filter(|&&m| m <= t).count();
        let mut gamma = self.base * self.decay.powi(decays as i32);
        if t < self.warmup_outer {
            gamma *= (t + 1) as f64 / self.warmup_outer as f64;
        }
        gamma
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlowMoConfig {
    /// Slow learning rate.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Slow momentum factor, in `[0, 1)`.
    #[serde(default)]
    pub beta: f64,
    /// Inner steps per outer iteration.
    pub tau: u64,
    /// Skip the exact average; each worker keeps its own slow state.
    #[serde(default)]
    pub noaverage: bool,
    pub learning_rate: LrSchedule,
}

fn default_alpha() -> f64 {
    1.0
}

impl SlowMoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::config(format!("beta must lie in [0, 1), got {}", self.beta)));
        }
        if self.tau < 1 {
            return Err(Error::config("tau must be at least 1"));
        }
        self.learning_rate.validate()
    }
}

/// Outer iterate and slow momentum buffer, one copy per worker. With
/// averaging enabled all copies are identical.
#[derive(Clone, Debug, PartialEq)]
pub struct SlowMoState {
    pub x_outer: Vec<ParameterVector>,
    pub u: Vec<ParameterVector>,
    pub t: u64,
}

impl SlowMoState {
    pub fn new(x0: &ParameterVector, workers: usize) -> Self {
        Self {
            x_outer: vec![x0.clone(); workers],
            u: vec![ParameterVector::zeros(x0.dim()); workers],
            t: 0,
        }
    }

    /// True if every worker holds bitwise the same `x_outer` and `u`.
    pub fn is_synchronized(&self) -> bool {
        self.x_outer.windows(2).all(|w| w[0] == w[1]) && self.u.windows(2).all(|w| w[0] == w[1])
    }
}

/// Returns `(u_next, x_next)`.
pub fn slow_update(
    x_start: &[f64],
    x_end: &[f64],
    u: &[f64],
    gamma: f64,
    alpha: f64,
    beta: f64,
) -> Result<(ParameterVector, ParameterVector)> {
    if !(gamma > 0.0) {
        return Err(Error::config(format!("fast learning rate must be > 0, got {gamma}")));
    }
    crate::error::check_dim(x_start.len(), x_end.len())?;
    crate::error::check_dim(x_start.len(), u.len())?;
    let u_next: ParameterVector = x_start
        .iter()
        .zip(x_end)
        .zip(u)
        .map(|((a, b), u)| beta * u + (a - b) / gamma)
        .collect();
    let x_next = x_start
        .iter()
        .zip(u_next.iter())
        .map(|(x, u)| x - alpha * gamma * u)
        .collect();
    Ok((u_next, x_next))
}

/// What one outer iteration did.
#[derive(Clone, Debug, PartialEq)]
pub struct OuterReport {
    pub t: u64,
    pub gamma: f64,
    /// Inner steps executed; below `τ` only for the final partial block.
    pub realized_steps: u64,
    /// `Σ_k d̄_{t,k}`.
    pub direction_sum: ParameterVector,
    /// Average over workers of `x_{t,τ}` (exact average when averaging).
    pub x_end: ParameterVector,
}

/// Runs outer iteration `sim.slowmo_state.t` and advances `t`.
pub fn run_outer_iteration(sim: &mut Simulation) -> Result<OuterReport> {
    let t = sim.slowmo_state.t;
    let cfg = sim.config.slowmo.clone();
    let gamma = cfg.learning_rate.at(t);
    let steps = sim.steps_in_outer(t);
    if steps == 0 {
        return Err(Error::Internal(format!("outer iteration {t} has no inner steps")));
    }

    {
        let mut buffers: Vec<_> = sim.workers.iter_mut().map(|w| &mut w.buffers).collect();
        apply_buffer_strategy(sim.config.base_optimizer.buffer_strategy, &mut buffers);
    }

    let mut direction_sum = ParameterVector::zeros(sim.problem.dim());
    for k in 0..steps {
        let record = if sim.should_record(k) {
            Some(sim.snapshot(t, k, gamma, steps < cfg.tau)?)
        } else {
            None
        };
        let mean_direction = sim.step(t, k, gamma)?;
        direction_sum.axpy(1.0, &mean_direction);
        if let Some(mut r) = record {
            r.mean_direction = Some(mean_direction.into_vec());
            sim.trace.records.push(r);
        }
    }

    sim.flush_network();

    let x_end = if cfg.noaverage {
        let state = &mut sim.slowmo_state;
        for (i, worker) in sim.workers.iter_mut().enumerate() {
            let (u, x_next) = slow_update(&state.x_outer[i], &worker.z, &state.u[i], gamma, cfg.alpha, cfg.beta)?;
            state.u[i] = u;
            worker.z.clone_from(&x_next);
            worker.x = x_next.clone();
            worker.x.scale(worker.w);
            state.x_outer[i] = x_next;
        }
        crate::numerics::ordered_mean(sim.workers.iter().map(|w| &w.z[..]))
    } else {
        let x_end = exact_average(&sim.workers);
        sim.comm.exact_averages += 1;
        let state = &mut sim.slowmo_state;
        let (u, x_next) = slow_update(&state.x_outer[0], &x_end, &state.u[0], gamma, cfg.alpha, cfg.beta)?;
        for worker in sim.workers.iter_mut() {
            worker.reset_to(&x_next);
        }
        state.u.iter_mut().for_each(|slot| slot.clone_from(&u));
        state.x_outer.iter_mut().for_each(|slot| slot.clone_from(&x_next));
        x_end
    };
    sim.check_finite_outer(t)?;
    sim.slowmo_state.t += 1;

    Ok(OuterReport {
        t,
        gamma,
        realized_steps: steps,
        direction_sum,
        x_end,
    })
}
