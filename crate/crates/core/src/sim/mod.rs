//! Lockstep execution of `m` simulated workers.
//!
//! Every inner step is one global round. Within a round each active worker
//! computes a gradient at its de-biased model and a local direction
//! (optionally in parallel, since workers only touch their own state and RNG
//! streams), then the communication effects of the protocol are applied in a
//! fixed worker-rank order.

mod metrics;
pub mod network;

use rayon::prelude::*;

pub use metrics::{CommStats, MetricsTrace, StepRecord};
use network::Network;

use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::numerics::rng::{delay_stream, gradient_stream, WorkerRng};
use crate::numerics::{dist_sq, ordered_mean, ParameterVector, Problem};
use crate::optim::local_direction;
use crate::protocol::{
    double_average, gossip_round, osgp_flush, osgp_poll, osgp_receive, osgp_send, pushsum_round,
    required_mixing, OverlapRound, ProtocolSpec, WorkerState,
};
use crate::slowmo::{run_outer_iteration, OuterReport, SlowMoState};
use crate::topology::{Stochasticity, TopologySchedule};

const MASS_TOL: f64 = 1e-9;

/// Round counter plus which workers sat out the most recent round.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SimClock {
    pub round: u64,
    pub stalled: Vec<bool>,
    /// Total worker-rounds lost to blocking.
    pub stalled_rounds: u64,
}

pub struct Simulation {
    pub(crate) config: ExperimentConfig,
    pub(crate) problem: Problem,
    topology: Option<TopologySchedule>,
    pub(crate) workers: Vec<WorkerState>,
    gradient_rngs: Vec<WorkerRng>,
    delay_rngs: Vec<WorkerRng>,
    network: Network,
    clock: SimClock,
    pub(crate) slowmo_state: SlowMoState,
    pub(crate) comm: CommStats,
    pub(crate) trace: MetricsTrace,
    outer_iterations: u64,
    finished: bool,
}

impl Simulation {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let m = config.workers;
        let problem = Problem::build(&config.problem, config.noise, m, config.seed)?;
        let x0 = config.init.initial_point(problem.dim(), config.seed)?;
        let topology = match required_mixing(&config.protocol) {
            Some(_) => Some(TopologySchedule::from_spec(&config.topology, m)?),
            None => None,
        };
        let tau = config.slowmo.tau;
        Ok(Self {
            problem,
            topology,
            workers: vec![WorkerState::new(x0.clone()); m],
            gradient_rngs: (0..m).map(|i| gradient_stream(config.seed, i)).collect(),
            delay_rngs: (0..m).map(|i| delay_stream(config.seed, i)).collect(),
            network: Network::new(),
            clock: SimClock {
                round: 0,
                stalled: vec![false; m],
                stalled_rounds: 0,
            },
            slowmo_state: SlowMoState::new(&x0, m),
            comm: CommStats::default(),
            trace: MetricsTrace::default(),
            outer_iterations: config.total_steps.div_ceil(tau),
            finished: false,
            config: config.clone(),
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn problem(&self) -> &Problem {
        &self.problem
    }

    pub fn workers(&self) -> &[WorkerState] {
        &self.workers
    }

    pub fn slowmo_state(&self) -> &SlowMoState {
        &self.slowmo_state
    }

    pub fn comm(&self) -> CommStats {
        self.comm
    }

    pub fn clock(&self) -> &SimClock {
        &self.clock
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    /// Position of worker `i`'s gradient stream, in 32-bit words drawn.
    pub fn gradient_stream_position(&self, worker: usize) -> u128 {
        self.gradient_rngs[worker].get_word_pos()
    }

    pub fn trace(&self) -> &MetricsTrace {
        &self.trace
    }

    pub fn into_trace(self) -> MetricsTrace {
        self.trace
    }

    /// Number of outer iterations, `⌈K/τ⌉`.
    pub fn outer_iterations(&self) -> u64 {
        self.outer_iterations
    }

    pub fn is_done(&self) -> bool {
        self.slowmo_state.t >= self.outer_iterations
    }

    pub(crate) fn steps_in_outer(&self, t: u64) -> u64 {
        let tau = self.config.slowmo.tau;
        tau.min(self.config.total_steps.saturating_sub(t * tau))
    }

    pub(crate) fn should_record(&self, k: u64) -> bool {
        k.is_multiple_of(self.config.metrics.every)
    }

    /// Runs the next outer iteration.
    pub fn run_outer(&mut self) -> Result<OuterReport> {
        if self.is_done() {
            return Err(Error::Internal("all outer iterations already ran".into()));
        }
        run_outer_iteration(self)
    }

    /// Runs every remaining outer iteration and appends the final record.
    pub fn run_to_end(&mut self) -> Result<()> {
        while !self.is_done() {
            self.run_outer()?;
        }
        self.finish()
    }

    /// Appends the record describing the final model (once).
    pub fn finish(&mut self) -> Result<()> {
        if self.finished {
            return Ok(());
        }
        let t = self.slowmo_state.t;
        let gamma = self.config.slowmo.learning_rate.at(t.saturating_sub(1));
        let record = self.snapshot(t, 0, gamma, false)?;
        self.trace.records.push(record);
        self.finished = true;
        Ok(())
    }

    /// Metrics of the current state; fails if push-sum mass has leaked.
    pub(crate) fn snapshot(&self, t: u64, k: u64, gamma: f64, partial_block: bool) -> Result<StepRecord> {
        let m = self.workers.len();
        let mean = ordered_mean(self.workers.iter().map(|w| &w.z[..]));
        let loss = self.problem.global_loss(&mean)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                what: "loss",
                worker: 0,
                t,
                k,
            });
        }
        let grad = self.problem.global_gradient(&mean)?;
        let consensus = self.workers.iter().map(|w| dist_sq(&w.z, &mean)).sum::<f64>() / m as f64;
        let mass = self.workers.iter().map(|w| w.w).sum::<f64>() + self.network.in_flight_mass();
        if (mass - m as f64).abs() > MASS_TOL {
            return Err(Error::protocol(format!(
                "push-sum weight mass {mass} drifted from {m} at round {}",
                self.clock.round
            )));
        }
        let local = self
            .workers
            .iter()
            .enumerate()
            .map(|(i, w)| self.problem.worker_full_gradient(i, &w.z))
            .collect::<Result<Vec<_>>>()?;
        let expected = ordered_mean(local.iter().map(|g| &g[..]));
        Ok(StepRecord {
            t,
            k,
            round: self.clock.round,
            gamma,
            loss,
            grad_norm_sq: grad.norm_sq(),
            consensus_distance: consensus,
            weight_mass: mass,
            base_bias_sq: dist_sq(&grad, &expected),
            partial_block,
            mean_model: mean.into_vec(),
            mean_direction: None,
        })
    }

    /// Gradient of worker `i` at its de-biased model, plus weight decay.
    fn gradient(
        problem: &Problem,
        weight_decay: f64,
        i: usize,
        worker: &WorkerState,
        rng: &mut WorkerRng,
    ) -> Result<ParameterVector> {
        let mut g = problem.worker_stochastic_gradient(i, &worker.z, rng)?;
        if weight_decay != 0.0 {
            g.axpy(weight_decay, &worker.z);
        }
        Ok(g)
    }

    /// Local gradients for the active workers; `None` for stalled ones.
    fn gradients(&mut self, active: &[bool]) -> Result<Vec<Option<ParameterVector>>> {
        let problem = &self.problem;
        let wd = self.config.weight_decay;
        let job = |(i, (worker, rng)): (usize, (&WorkerState, &mut WorkerRng))| {
            if active[i] {
                Self::gradient(problem, wd, i, worker, rng).map(Some)
            } else {
                Ok(None)
            }
        };
        if self.config.parallel {
            self.workers
                .par_iter()
                .zip(self.gradient_rngs.par_iter_mut())
                .enumerate()
                .map(job)
                .collect()
        } else {
            self.workers
                .iter()
                .zip(self.gradient_rngs.iter_mut())
                .enumerate()
                .map(job)
                .collect()
        }
    }

    /// Executes inner step `k` of outer iteration `t` and returns `d̄`.
    pub(crate) fn step(&mut self, t: u64, k: u64, gamma: f64) -> Result<ParameterVector> {
        let m = self.workers.len();
        let dim = self.problem.dim();
        let round = self.clock.round;
        let active: Vec<bool> = self.workers.iter().map(|w| !w.overlap.blocked).collect();

        let mut grads = self.gradients(&active)?;
        for (i, g) in grads.iter().enumerate() {
            if g.as_ref().is_some_and(|g| !g.is_finite()) {
                return Err(Error::NonFinite {
                    what: "gradient",
                    worker: i,
                    t,
                    k,
                });
            }
        }
        if self.config.protocol == ProtocolSpec::Allreduce {
            let mean = ordered_mean(grads.iter().flatten().map(|g| &g[..]));
            self.comm.gradient_allreduces += 1;
            grads.iter_mut().for_each(|g| *g = Some(mean.clone()));
        }

        let rule = self.config.base_optimizer.rule;
        let dir_job = |(worker, g): (&mut WorkerState, Option<ParameterVector>)| -> Result<ParameterVector> {
            match g {
                Some(g) => local_direction(&rule, &mut worker.buffers, &g),
                None => Ok(ParameterVector::zeros(g_dim(worker))),
            }
        };
        let directions: Vec<ParameterVector> = if self.config.parallel {
            self.workers.par_iter_mut().zip(grads.into_par_iter()).map(dir_job).collect::<Result<_>>()?
        } else {
            self.workers.iter_mut().zip(grads).map(dir_job).collect::<Result<_>>()?
        };

        let mut half_steps = Vec::with_capacity(m);
        for (i, (worker, d)) in self.workers.iter().zip(&directions).enumerate() {
            let mut half = worker.x.clone();
            if active[i] {
                half.axpy(-gamma, d);
            }
            if !half.is_finite() {
                return Err(Error::NonFinite {
                    what: "parameters",
                    worker: i,
                    t,
                    k,
                });
            }
            half_steps.push(half);
        }
        let mean_direction = if m == 0 {
            ParameterVector::zeros(dim)
        } else {
            ordered_mean(directions.iter().map(|d| &d[..]))
        };

        self.communicate(k, round, &active, half_steps)?;

        for (i, w) in self.workers.iter().enumerate() {
            if !w.z.is_finite() {
                return Err(Error::NonFinite {
                    what: "parameters",
                    worker: i,
                    t,
                    k,
                });
            }
        }
        self.clock.stalled_rounds += active.iter().filter(|a| !**a).count() as u64;
        self.clock.stalled = active.iter().map(|a| !a).collect();
        self.clock.round += 1;
        Ok(mean_direction)
    }

    fn mixing(&self, round: u64, kind: Stochasticity) -> Result<crate::topology::MixingMatrix> {
        self.topology
            .as_ref()
            .ok_or_else(|| Error::Internal("protocol needs a topology".into()))?
            .mixing_matrix(round, kind)
    }

    fn communicate(&mut self, k: u64, round: u64, active: &[bool], half_steps: Vec<ParameterVector>) -> Result<()> {
        match self.config.protocol.clone() {
            ProtocolSpec::Allreduce | ProtocolSpec::Local => {
                self.set_local(half_steps);
            }
            ProtocolSpec::DoubleAverage { period } => {
                self.set_local(half_steps);
                if (k + 1).is_multiple_of(period) {
                    double_average(&mut self.workers);
                    self.comm.double_averages += 1;
                }
            }
            ProtocolSpec::Dpsgd => {
                let p = self.mixing(round, Stochasticity::Doubly)?;
                gossip_round(&mut self.workers, &p, &half_steps)?;
                self.comm.gossip_rounds += 1;
            }
            ProtocolSpec::Sgp => {
                let p = self.mixing(round, Stochasticity::Column)?;
                pushsum_round(&mut self.workers, &p, &half_steps)?;
                self.comm.pushsum_rounds += 1;
                self.comm.messages_sent += self.topology.as_ref().map_or(0, |s| s.edges(round).len()) as u64;
            }
            ProtocolSpec::Osgp { delay, staleness } => {
                let p = self.mixing(round, Stochasticity::Column)?;
                let schedule = self.topology.as_ref().expect("osgp has a topology");
                let ctx = OverlapRound {
                    schedule,
                    mixing: &p,
                    round,
                    delay,
                    staleness,
                };
                for (i, half) in half_steps.into_iter().enumerate() {
                    if active[i] {
                        let before = self.network.len();
                        osgp_send(&mut self.workers[i], i, half, &ctx, &mut self.network, &mut self.delay_rngs[i]);
                        self.comm.messages_sent += (self.network.len() - before) as u64;
                    }
                }
                for (i, worker) in self.workers.iter_mut().enumerate() {
                    if active[i] {
                        osgp_receive(worker, i, &ctx, &mut self.network);
                    } else {
                        osgp_poll(worker, i, round, &mut self.network);
                    }
                }
                self.comm.pushsum_rounds += 1;
                if self.workers.iter().all(|w| w.overlap.blocked) && self.network.is_empty() {
                    return Err(Error::protocol(format!(
                        "every worker is blocked with no message in transit at round {round}"
                    )));
                }
            }
        }
        Ok(())
    }

    fn set_local(&mut self, half_steps: Vec<ParameterVector>) {
        for (worker, half) in self.workers.iter_mut().zip(half_steps) {
            worker.z.clone_from(&half);
            worker.x = half;
        }
    }

    /// Delivers every in-flight message (synchronization barrier).
    pub(crate) fn flush_network(&mut self) {
        if self.network.is_empty() && self.workers.iter().all(|w| !w.overlap.blocked) {
            return;
        }
        for (i, worker) in self.workers.iter_mut().enumerate() {
            osgp_flush(worker, i, &mut self.network);
        }
        debug_assert!(self.network.is_empty());
    }

    pub(crate) fn check_finite_outer(&self, t: u64) -> Result<()> {
        let steps = self.steps_in_outer(t);
        let s = &self.slowmo_state;
        for (i, (x, u)) in s.x_outer.iter().zip(&s.u).enumerate() {
            if !x.is_finite() || !u.is_finite() {
                return Err(Error::NonFinite {
                    what: "slow momentum state",
                    worker: i,
                    t,
                    k: steps,
                });
            }
        }
        Ok(())
    }
}

fn g_dim(worker: &WorkerState) -> usize {
    worker.x.dim()
}

/// Runs `config` to completion and returns its trace.
pub fn run(config: &ExperimentConfig) -> Result<MetricsTrace> {
    let mut sim = Simulation::new(config)?;
    sim.run_to_end()?;
    Ok(sim.into_trace())
}
