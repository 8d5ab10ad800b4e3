use serde::{Deserialize, Serialize};

/// Metrics captured before inner step `k` of outer iteration `t`. The run
/// ends with one extra record at `(T, 0)` describing the final model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRecord {
    pub t: u64,
    pub k: u64,
    /// Global communication round.
    pub round: u64,
    pub gamma: f64,
    /// `f(x̄)` where `x̄` is the average of the de-biased worker models.
    pub loss: f64,
    /// `‖∇f(x̄)‖²`.
    pub grad_norm_sq: f64,
    /// `(1/m) Σ ‖z_i − x̄‖²`.
    pub consensus_distance: f64,
    /// `Σ w_i` plus the weight carried by messages in transit.
    pub weight_mass: f64,
    /// `‖∇f(x̄) − (1/m) Σ ∇f_i(z_i)‖²`: distance between the full gradient
    /// and the expected averaged plain-gradient direction.
    pub base_bias_sq: f64,
    /// Part of a final outer iteration shorter than `τ`.
    pub partial_block: bool,
    pub mean_model: Vec<f64>,
    /// `d̄ = (1/m) Σ d_i` for the step taken right after this record;
    /// stalled workers contribute zero.
    pub mean_direction: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsTrace {
    pub records: Vec<StepRecord>,
}

impl MetricsTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records taken inside outer iterations (excludes the trailing final
    /// record).
    pub fn inner_records(&self) -> impl Iterator<Item = &StepRecord> {
        self.records.iter().filter(|r| r.mean_direction.is_some())
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    pub fn final_record(&self) -> Option<&StepRecord> {
        self.records.last()
    }
}

/// Counts of communication operations performed during a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommStats {
    /// Exact model averages at outer-iteration boundaries.
    pub exact_averages: u64,
    /// Per-step gradient all-reduces.
    pub gradient_allreduces: u64,
    pub gossip_rounds: u64,
    pub pushsum_rounds: u64,
    /// Point-to-point push-sum messages.
    pub messages_sent: u64,
    pub double_averages: u64,
}
