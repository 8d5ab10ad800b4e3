use std::collections::{BTreeMap, VecDeque};

use crate::numerics::ParameterVector;

/// A push-sum payload in transit. Both parts are already scaled by the
/// mixing weight of the edge.
#[derive(Clone, Debug, PartialEq)]
pub struct InFlightMessage {
    pub payload_x: ParameterVector,
    pub payload_w: f64,
    pub sender: usize,
    pub receiver: usize,
    pub send_round: u64,
    pub deliver_round: u64,
}

/// Per-edge FIFO queues keyed by `(receiver, sender)`.
#[derive(Clone, Debug, Default)]
pub struct Network {
    queues: BTreeMap<(usize, usize), VecDeque<InFlightMessage>>,
}

impl Network {
    pub fn new() -> Self {
        Self::default()
    }

    /// Enqueues `msg`. A message never overtakes an earlier one on the same
    /// edge: its delivery round is raised to that of the queue tail if
    /// needed.
    pub fn send(&mut self, mut msg: InFlightMessage) {
        assert!(msg.payload_w > 0.0, "push-sum payload weight must be positive");
        msg.deliver_round = msg.deliver_round.max(msg.send_round);
        let queue = self.queues.entry((msg.receiver, msg.sender)).or_default();
        if let Some(tail) = queue.back() {
            msg.deliver_round = msg.deliver_round.max(tail.deliver_round);
        }
        queue.push_back(msg);
    }

    /// Pops every message for `receiver` with `deliver_round ≤ round`,
    /// ordered by `(send_round, sender)`.
    pub fn deliver(&mut self, receiver: usize, round: u64) -> Vec<InFlightMessage> {
        self.take(receiver, |m| m.deliver_round <= round)
    }

    /// Pops every queued message for `receiver` regardless of delay.
    pub fn drain_all(&mut self, receiver: usize) -> Vec<InFlightMessage> {
        self.take(receiver, |_| true)
    }

    fn take(&mut self, receiver: usize, ready: impl Fn(&InFlightMessage) -> bool) -> Vec<InFlightMessage> {
        let mut out = Vec::new();
        for (_, queue) in self.queues.range_mut((receiver, 0)..=(receiver, usize::MAX)) {
            while queue.front().is_some_and(&ready) {
                out.extend(queue.pop_front());
            }
        }
        out.sort_by_key(|m| (m.send_round, m.sender));
        out
    }

    pub fn len(&self) -> usize {
        self.queues.values().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn has_pending_for(&self, receiver: usize) -> bool {
        self.queues
            .range((receiver, 0)..=(receiver, usize::MAX))
            .any(|(_, q)| !q.is_empty())
    }

    /// Total push-sum weight currently in transit.
    pub fn in_flight_mass(&self) -> f64 {
        self.messages().map(|m| m.payload_w).sum()
    }

    /// Sum of in-transit parameter payloads (zero vector of `dim` if empty).
    pub fn in_flight_sum(&self, dim: usize) -> ParameterVector {
        let mut sum = ParameterVector::zeros(dim);
        for m in self.messages() {
            sum.axpy(1.0, &m.payload_x);
        }
        sum
    }

    fn messages(&self) -> impl Iterator<Item = &InFlightMessage> {
        self.queues.values().flatten()
    }
}
