//! Communication mechanisms used inside the inner loop: exact averaging,
//! doubly stochastic gossip, push-sum and its overlapping variant with
//! delayed delivery, and double averaging of parameters plus momentum.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::rng::WorkerRng;
use crate::numerics::{ordered_mean, ParameterVector};
use crate::optim::OptimizerBuffers;
use crate::sim::network::{InFlightMessage, Network};
use crate::topology::{MixingMatrix, Stochasticity, TopologySchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProtocolSpec {
    /// Gradients are averaged across all workers before every step.
    Allreduce,
    /// No communication inside the inner loop.
    Local,
    /// Gossip over a doubly stochastic symmetric pairing.
    Dpsgd,
    /// Synchronous push-sum over column-stochastic mixing.
    Sgp,
    /// Overlapping push-sum with delayed messages and bounded staleness.
    Osgp {
        delay: DelayModel,
        /// A worker that has gone this many rounds without receiving blocks
        /// until a message arrives.
        staleness: u64,
    },
    /// Local steps with parameters and momentum buffers averaged every
    /// `period` inner steps.
    DoubleAverage {
        #[serde(default = "default_period")]
        period: u64,
    },
}

fn default_period() -> u64 {
    1
}

impl ProtocolSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ProtocolSpec::Allreduce => "allreduce",
            ProtocolSpec::Local => "local",
            ProtocolSpec::Dpsgd => "dpsgd",
            ProtocolSpec::Sgp => "sgp",
            ProtocolSpec::Osgp { .. } => "osgp",
            ProtocolSpec::DoubleAverage { .. } => "double-average",
        }
    }

    /// Whether workers carry push-sum weights and de-bias by them.
    pub fn is_push_sum(&self) -> bool {
        matches!(self, ProtocolSpec::Sgp | ProtocolSpec::Osgp { .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DelayModel {
    /// Every message takes exactly `rounds` rounds.
    Fixed { rounds: u64 },
    /// Number of failures before the first success of a Bernoulli(`p`)
    /// trial, capped at the staleness limit.
    Geometric { p: f64 },
}

impl DelayModel {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DelayModel::Fixed { .. } => Ok(()),
            DelayModel::Geometric { p } if p > 0.0 && p <= 1.0 => Ok(()),
            DelayModel::Geometric { p } => Err(Error::config(format!(
                "geometric delay probability must lie in (0, 1], got {p}"
            ))),
        }
    }

    pub fn sample(&self, rng: &mut WorkerRng, cap: u64) -> u64 {
        match *self {
            DelayModel::Fixed { rounds } => rounds,
            DelayModel::Geometric { p } => {
                let mut delay = 0;
                while delay < cap && rng.random::<f64>() >= p {
                    delay += 1;
                }
                delay
            }
        }
    }
}

/// Overlap push-sum bookkeeping for one worker.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OverlapState {
    /// Rounds since the last round in which at least one message was drained.
    pub count_since_last: u64,
    /// Waiting for a message before the next local step.
    pub blocked: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorkerState {
    /// Biased parameters.
    pub x: ParameterVector,
    /// Push-sum weight; identically 1 for non push-sum protocols.
    pub w: f64,
    /// De-biased parameters `x / w`; gradients are evaluated here.
    pub z: ParameterVector,
    pub buffers: OptimizerBuffers,
    pub overlap: OverlapState,
}

impl WorkerState {
    pub fn new(x0: ParameterVector) -> Self {
        let dim = x0.dim();
        Self {
            z: x0.clone(),
            x: x0,
            w: 1.0,
            buffers: OptimizerBuffers::zeros(dim),
            overlap: OverlapState::default(),
        }
    }

    /// Recomputes `z = x / w`.
    pub fn debias(&mut self) {
        assert!(self.w > 0.0, "push-sum weight must stay positive, got {}", self.w);
        let w = self.w;
        for (z, x) in self.z.iter_mut().zip(self.x.iter()) {
            *z = x / w;
        }
    }

    /// Moves the worker to `x` with unit weight.
    pub fn reset_to(&mut self, x: &ParameterVector) {
        self.x.clone_from(x);
        self.z.clone_from(x);
        self.w = 1.0;
        self.overlap = OverlapState::default();
    }
}

/// `(1/m) Σ z^(i)`, summed in ascending rank order. For non push-sum
/// protocols `z ≡ x`.
pub fn exact_average(states: &[WorkerState]) -> ParameterVector {
    ordered_mean(states.iter().map(|s| &s.z[..]))
}

fn check_shapes(states: &[WorkerState], mixing: &MixingMatrix, half_steps: &[ParameterVector]) -> Result<()> {
    if mixing.workers() != states.len() || half_steps.len() != states.len() {
        return Err(Error::protocol(format!(
            "{} workers, {}×{} mixing matrix, {} half steps",
            states.len(),
            mixing.workers(),
            mixing.workers(),
            half_steps.len()
        )));
    }
    Ok(())
}

/// Receiver `i`'s combination `p_ii·v_i + Σ_{j≠i} p_ij·v_j`, self term first
/// and senders in ascending order. The overlap variant accumulates in the
/// same order, which keeps the two bitwise equal at zero delay.
fn combine(mixing: &MixingMatrix, i: usize, values: &[ParameterVector]) -> ParameterVector {
    let mut out = values[i].clone();
    out.scale(mixing.get(i, i));
    for (j, v) in values.iter().enumerate() {
        if j == i {
            continue;
        }
        let p = mixing.get(i, j);
        if p != 0.0 {
            let mut term = v.clone();
            term.scale(p);
            out.axpy(1.0, &term);
        }
    }
    out
}

/// D-PSGD mixing: `x^(i) ← Σ_j p_ij · half^(j)`.
pub fn gossip_round(
    states: &mut [WorkerState],
    mixing: &MixingMatrix,
    half_steps: &[ParameterVector],
) -> Result<()> {
    check_shapes(states, mixing, half_steps)?;
    if !mixing.is_doubly_stochastic() {
        return Err(Error::protocol("gossip requires a doubly stochastic mixing matrix"));
    }
    for (i, s) in states.iter_mut().enumerate() {
        s.x = combine(mixing, i, half_steps);
        s.w = 1.0;
        s.z.clone_from(&s.x);
    }
    Ok(())
}

/// Synchronous push-sum: mixes both the half-step parameters and the
/// weights, then de-biases.
pub fn pushsum_round(
    states: &mut [WorkerState],
    mixing: &MixingMatrix,
    half_steps: &[ParameterVector],
) -> Result<()> {
    check_shapes(states, mixing, half_steps)?;
    if !mixing.is_column_stochastic() {
        return Err(Error::protocol(
            "push-sum requires a column-stochastic mixing matrix",
        ));
    }
    let weights: Vec<f64> = states.iter().map(|s| s.w).collect();
    for (i, s) in states.iter_mut().enumerate() {
        s.x = combine(mixing, i, half_steps);
        let mut w = mixing.get(i, i) * weights[i];
        for (j, wj) in weights.iter().enumerate() {
            if j != i && mixing.get(i, j) != 0.0 {
                w += mixing.get(i, j) * wj;
            }
        }
        s.w = w;
        s.debias();
    }
    Ok(())
}

/// Replaces every worker's parameters and momentum buffer by the
/// across-worker means.
pub fn double_average(states: &mut [WorkerState]) {
    let x = ordered_mean(states.iter().map(|s| &s.x[..]));
    let h = ordered_mean(states.iter().map(|s| &s.buffers.first[..]));
    for s in states.iter_mut() {
        s.x.clone_from(&x);
        s.z.clone_from(&x);
        s.w = 1.0;
        s.buffers.first.clone_from(&h);
    }
}

/// Context shared by all workers for one overlap push-sum round.
pub struct OverlapRound<'a> {
    pub schedule: &'a TopologySchedule,
    pub mixing: &'a MixingMatrix,
    pub round: u64,
    pub delay: DelayModel,
    pub staleness: u64,
}

/// Send phase of an overlap push-sum step for an active worker: ships
/// `(p_ji·half, p_ji·w)` to each out-neighbor and keeps the self share.
pub fn osgp_send(
    state: &mut WorkerState,
    worker: usize,
    half_step: ParameterVector,
    ctx: &OverlapRound<'_>,
    network: &mut Network,
    delay_rng: &mut WorkerRng,
) {
    for j in ctx.schedule.out_neighbors(worker, ctx.round) {
        let p = ctx.mixing.get(j, worker);
        let mut payload_x = half_step.clone();
        payload_x.scale(p);
        let delay = ctx.delay.sample(delay_rng, ctx.staleness);
        network.send(InFlightMessage {
            payload_x,
            payload_w: p * state.w,
            sender: worker,
            receiver: j,
            send_round: ctx.round,
            deliver_round: ctx.round + delay,
        });
    }
    let keep = ctx.mixing.get(worker, worker);
    state.x = half_step;
    state.x.scale(keep);
    state.w *= keep;
}

/// Receive phase for an active worker. Applies the staleness rule, drains
/// delivered messages and de-biases. Returns the number of messages drained.
pub fn osgp_receive(state: &mut WorkerState, worker: usize, ctx: &OverlapRound<'_>, network: &mut Network) -> usize {
    let must_receive = state.overlap.count_since_last >= ctx.staleness;
    if !must_receive {
        state.overlap.count_since_last += 1;
    }
    let got = accumulate(state, network.deliver(worker, ctx.round));
    if got > 0 {
        state.overlap.count_since_last = 0;
        state.debias();
    } else if must_receive {
        state.overlap.blocked = true;
    } else {
        state.debias();
    }
    got
}

/// Retries the blocked receive of a stalled worker.
pub fn osgp_poll(state: &mut WorkerState, worker: usize, round: u64, network: &mut Network) -> usize {
    let got = accumulate(state, network.deliver(worker, round));
    if got > 0 {
        state.overlap = OverlapState::default();
        state.debias();
    }
    got
}

/// Delivers everything still queued for `worker` (synchronization barrier).
pub fn osgp_flush(state: &mut WorkerState, worker: usize, network: &mut Network) -> usize {
    let got = accumulate(state, network.drain_all(worker));
    state.overlap = OverlapState::default();
    state.debias();
    got
}

fn accumulate(state: &mut WorkerState, messages: Vec<InFlightMessage>) -> usize {
    let n = messages.len();
    for m in messages {
        state.x.axpy(1.0, &m.payload_x);
        state.w += m.payload_w;
    }
    n
}

/// Mixing stochasticity a protocol needs, if any.
pub fn required_mixing(spec: &ProtocolSpec) -> Option<Stochasticity> {
    match spec {
        ProtocolSpec::Dpsgd => Some(Stochasticity::Doubly),
        ProtocolSpec::Sgp | ProtocolSpec::Osgp { .. } => Some(Stochasticity::Column),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::delay_stream;

    fn states(xs: &[&[f64]]) -> Vec<WorkerState> {
        xs.iter().map(|x| WorkerState::new(x.to_vec().into())).collect()
    }

    fn halves(states: &[WorkerState]) -> Vec<ParameterVector> {
        states.iter().map(|s| s.x.clone()).collect()
    }

    fn half_half() -> MixingMatrix {
        MixingMatrix::from_rows(vec![vec![0.5, 0.5], vec![0.5, 0.5]], Stochasticity::Column)
    }

    #[test]
    fn exact_average_cases() {
        let s = states(&[&[1.5, -2.0], &[1.5, -2.0]]);
        assert_eq!(&exact_average(&s)[..], &[1.5, -2.0]);
        let s = states(&[&[0.0, 2.0], &[2.0, 0.0]]);
        assert_eq!(&exact_average(&s)[..], &[1.0, 1.0]);
        let s = states(&[&[1.0], &[2.0], &[4.0]]);
        assert_eq!(exact_average(&s)[0], ((1.0 + 2.0) + 4.0) / 3.0);
    }

    #[test]
    fn gossip_identity_leaves_states() {
        let mut s = states(&[&[1.0, 2.0], &[3.0, -1.0], &[0.5, 0.5]]);
        let before = s.clone();
        let h = halves(&s);
        gossip_round(&mut s, &MixingMatrix::identity(3, Stochasticity::Doubly), &h).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn gossip_pair_averages() {
        let mut s = states(&[&[1.0], &[3.0]]);
        let h = halves(&s);
        gossip_round(&mut s, &half_half(), &h).unwrap();
        assert_eq!((s[0].x[0], s[1].x[0]), (2.0, 2.0));
    }

    #[test]
    fn gossip_rejects_column_only_matrix() {
        let mut s = states(&[&[1.0], &[3.0]]);
        let h = halves(&s);
        let p = MixingMatrix::from_rows(vec![vec![1.0, 0.5], vec![0.0, 0.5]], Stochasticity::Column);
        assert!(matches!(gossip_round(&mut s, &p, &h), Err(Error::Protocol(_))));
    }

    #[test]
    fn pushsum_symmetric_split() {
        let mut s = states(&[&[1.0], &[3.0]]);
        let h = halves(&s);
        pushsum_round(&mut s, &half_half(), &h).unwrap();
        for st in &s {
            assert_eq!((st.x[0], st.w, st.z[0]), (2.0, 1.0, 2.0));
        }
    }

    #[test]
    fn pushsum_rejects_bad_columns() {
        let mut s = states(&[&[1.0], &[3.0]]);
        let h = halves(&s);
        let p = MixingMatrix::from_rows(vec![vec![0.5, 0.5], vec![0.5, 0.4]], Stochasticity::Column);
        assert!(pushsum_round(&mut s, &p, &h).is_err());
    }

    #[test]
    fn pushsum_keeps_unit_weights_on_exponential_graph() {
        let sched = TopologySchedule::exponential(8);
        let mut s: Vec<WorkerState> = (0..8).map(|i| WorkerState::new(vec![i as f64].into())).collect();
        for round in 0..10 {
            let p = sched.mixing_matrix(round, Stochasticity::Column).unwrap();
            let h = halves(&s);
            pushsum_round(&mut s, &p, &h).unwrap();
            assert!(s.iter().all(|st| st.w == 1.0));
        }
    }

    #[test]
    fn complete_graph_reaches_consensus_in_one_round() {
        let sched = TopologySchedule::complete(5);
        let mut s: Vec<WorkerState> = (0..5)
            .map(|i| WorkerState::new(vec![i as f64 * 1.3, -(i as f64)].into()))
            .collect();
        let p = sched.mixing_matrix(0, Stochasticity::Column).unwrap();
        let h = halves(&s);
        pushsum_round(&mut s, &p, &h).unwrap();
        for st in &s[1..] {
            assert!(crate::numerics::max_abs_diff(&st.z, &s[0].z) <= 1e-12);
        }
    }

    #[test]
    fn double_average_means() {
        let mut s = states(&[&[0.0], &[4.0]]);
        s[0].buffers.first[0] = 1.0;
        s[1].buffers.first[0] = 3.0;
        double_average(&mut s);
        assert_eq!((s[0].buffers.first[0], s[1].buffers.first[0]), (2.0, 2.0));
        assert_eq!((s[0].x[0], s[1].x[0]), (2.0, 2.0));
        let mut same = states(&[&[1.0], &[1.0]]);
        let before = same.clone();
        double_average(&mut same);
        assert_eq!(same, before);
    }

    #[test]
    fn geometric_delay_respects_cap() {
        let mut rng = delay_stream(0, 0);
        let model = DelayModel::Geometric { p: 0.05 };
        for _ in 0..1000 {
            assert!(model.sample(&mut rng, 3) <= 3);
        }
        assert_eq!(DelayModel::Fixed { rounds: 4 }.sample(&mut rng, 0), 4);
        assert!(DelayModel::Geometric { p: 0.0 }.validate().is_err());
    }

    #[test]
    fn protocol_spec_parses() {
        let spec: ProtocolSpec = serde_json::from_str(
            r#"{"kind": "osgp", "delay": {"kind": "fixed", "rounds": 1}, "staleness": 2}"#,
        )
        .unwrap();
        assert!(spec.is_push_sum());
        assert!(serde_json::from_str::<ProtocolSpec>(r#"{"kind": "osgp", "staleness": 1}"#).is_err());
    }
}
