//! Time-varying communication graphs and their mixing matrices.
//!
//! On the directed exponential graph, node `i` sends to `(i + 2^(k mod P)) mod m`
//! at round `k`, with `P = ⌊log₂(m−1)⌋ + 1`. Every node sends exactly one
//! message and receives exactly one message per round.

use std::collections::{BTreeSet, VecDeque};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const STOCHASTIC_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TopologySpec {
    ExponentialDirected,
    RingDirected,
    Complete,
    /// Per-round adjacency lists loaded from a JSON file.
    Custom { path: PathBuf },
}

/// On-disk format for custom graphs: `rounds[k][i]` lists the out-neighbors
/// of node `i` at round `k mod rounds.len()`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomGraph {
    pub rounds: Vec<Vec<Vec<usize>>>,
}

#[derive(Clone, Debug, PartialEq)]
enum Kind {
    Exponential,
    Ring,
    Complete,
    Custom(Vec<Vec<Vec<usize>>>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TopologySchedule {
    kind: Kind,
    workers: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stochasticity {
    Column,
    Doubly,
}

impl TopologySchedule {
    pub fn exponential(workers: usize) -> Self {
        Self {
            kind: Kind::Exponential,
            workers,
        }
    }

    pub fn ring(workers: usize) -> Self {
        Self {
            kind: Kind::Ring,
            workers,
        }
    }

    pub fn complete(workers: usize) -> Self {
        Self {
            kind: Kind::Complete,
            workers,
        }
    }

    /// Builds a custom schedule, validating node ids and strong
    /// connectivity of the union graph over one period.
    pub fn custom(workers: usize, graph: CustomGraph) -> Result<Self> {
        if graph.rounds.is_empty() {
            return Err(Error::config("custom topology needs at least one round"));
        }
        let mut union = Vec::new();
        for (k, round) in graph.rounds.iter().enumerate() {
            if round.len() != workers {
                return Err(Error::config(format!(
                    "custom topology round {k} lists {} nodes, expected {workers}",
                    round.len()
                )));
            }
            for (i, outs) in round.iter().enumerate() {
                for &j in outs {
                    if j >= workers {
                        return Err(Error::config(format!(
                            "custom topology round {k}: node {i} sends to unknown node {j}"
                        )));
                    }
                    if j != i {
                        union.push((i, j));
                    }
                }
            }
        }
        if !is_strongly_connected(workers, &union) {
            return Err(Error::config(
                "custom topology is not strongly connected over one period",
            ));
        }
        Ok(Self {
            kind: Kind::Custom(graph.rounds),
            workers,
        })
    }

    pub fn from_spec(spec: &TopologySpec, workers: usize) -> Result<Self> {
        match spec {
            TopologySpec::ExponentialDirected => Ok(Self::exponential(workers)),
            TopologySpec::RingDirected => Ok(Self::ring(workers)),
            TopologySpec::Complete => Ok(Self::complete(workers)),
            TopologySpec::Custom { path } => Self::custom(workers, load_custom(path)?),
        }
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    /// Number of distinct rounds before the schedule repeats.
    pub fn period(&self) -> usize {
        match &self.kind {
            Kind::Exponential => exponential_period(self.workers),
            Kind::Ring | Kind::Complete => 1,
            Kind::Custom(rounds) => rounds.len(),
        }
    }

    fn hop(&self, round: u64) -> Option<usize> {
        match self.kind {
            Kind::Exponential => {
                let p = exponential_period(self.workers) as u64;
                Some(1usize << (round % p))
            }
            Kind::Ring => Some(1),
            _ => None,
        }
    }

    /// The single out-neighbor of `worker` at `round` on one-peer graphs.
    pub fn out_neighbor(&self, worker: usize, round: u64) -> Result<usize> {
        if worker >= self.workers {
            return Err(Error::config(format!("unknown worker {worker}")));
        }
        if self.workers == 1 {
            return Ok(worker);
        }
        match self.hop(round) {
            Some(h) => Ok((worker + h) % self.workers),
            None => Err(Error::config(
                "out_neighbor is only defined for one-peer (exponential or ring) graphs",
            )),
        }
    }

    /// Out-neighbors of `worker` at `round`, excluding itself.
    pub fn out_neighbors(&self, worker: usize, round: u64) -> Vec<usize> {
        let m = self.workers;
        match &self.kind {
            Kind::Exponential | Kind::Ring => {
                let j = self.out_neighbor(worker, round).expect("valid worker");
                if j == worker {
                    vec![]
                } else {
                    vec![j]
                }
            }
            Kind::Complete => (0..m).filter(|&j| j != worker).collect(),
            Kind::Custom(rounds) => {
                let outs: BTreeSet<usize> = rounds[(round % rounds.len() as u64) as usize][worker]
                    .iter()
                    .copied()
                    .filter(|&j| j != worker)
                    .collect();
                outs.into_iter().collect()
            }
        }
    }

    /// Directed edges `(sender, receiver)` active at `round`.
    pub fn edges(&self, round: u64) -> Vec<(usize, usize)> {
        (0..self.workers)
            .flat_map(|i| {
                self.out_neighbors(i, round)
                    .into_iter()
                    .map(move |j| (i, j))
            })
            .collect()
    }

    /// Mixing matrix for `round`.
    ///
    /// The column-stochastic variant splits each sender's mass uniformly over
    /// itself and its out-neighbors (½/½ on one-peer graphs). The doubly
    /// stochastic variant pairs nodes symmetrically: on one-peer graphs node
    /// `i` is matched with `i ± h` for the round's hop `h`, which requires
    /// `m` to be a multiple of `2h`; on custom graphs the symmetrized edges
    /// must form a matching. The complete graph always mixes uniformly.
    pub fn mixing_matrix(&self, round: u64, stochasticity: Stochasticity) -> Result<MixingMatrix> {
        let m = self.workers;
        if matches!(self.kind, Kind::Complete) {
            return Ok(MixingMatrix {
                workers: m,
                entries: vec![1.0 / m as f64; m * m],
                stochasticity,
            });
        }
        let mut mix = MixingMatrix::identity(m, stochasticity);
        match stochasticity {
            Stochasticity::Column => {
                for j in 0..m {
                    let outs = self.out_neighbors(j, round);
                    let share = 1.0 / (outs.len() + 1) as f64;
                    mix.set(j, j, share);
                    for i in outs {
                        mix.set(i, j, share);
                    }
                }
            }
            Stochasticity::Doubly => {
                for (i, partner) in self.matching(round)?.into_iter().enumerate() {
                    if let Some(j) = partner {
                        mix.set(i, i, 0.5);
                        mix.set(i, j, 0.5);
                    }
                }
            }
        }
        Ok(mix)
    }

    fn matching(&self, round: u64) -> Result<Vec<Option<usize>>> {
        let m = self.workers;
        if m == 1 {
            return Ok(vec![None]);
        }
        if let Some(h) = self.hop(round) {
            if !m.is_multiple_of(2 * h) {
                return Err(Error::config(format!(
                    "round {round}: hop {h} edges on {m} nodes cannot be paired into a perfect matching"
                )));
            }
            return Ok((0..m)
                .map(|i| Some(if (i / h) % 2 == 0 { i + h } else { i - h }))
                .collect());
        }
        let mut partner: Vec<Option<usize>> = vec![None; m];
        for (i, j) in self.edges(round) {
            for (a, b) in [(i, j), (j, i)] {
                match partner[a] {
                    None => partner[a] = Some(b),
                    Some(p) if p == b => {}
                    Some(_) => {
                        return Err(Error::config(format!(
                            "round {round}: node {a} has more than one peer; edges do not form a matching"
                        )))
                    }
                }
            }
        }
        Ok(partner)
    }
}

fn exponential_period(m: usize) -> usize {
    if m <= 2 {
        1
    } else {
        (usize::BITS - 1 - (m - 1).leading_zeros()) as usize + 1
    }
}

fn load_custom(path: &Path) -> Result<CustomGraph> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Reachability check on the directed graph `(sender, receiver)` edges.
pub fn is_strongly_connected(nodes: usize, edges: &[(usize, usize)]) -> bool {
    if nodes <= 1 {
        return true;
    }
    let reach_all = |forward: bool| {
        let mut adj = vec![Vec::new(); nodes];
        for &(a, b) in edges {
            if forward {
                adj[a].push(b);
            } else {
                adj[b].push(a);
            }
        }
        let mut seen = vec![false; nodes];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(v) = queue.pop_front() {
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    queue.push_back(w);
                }
            }
        }
        seen.into_iter().all(|s| s)
    };
    reach_all(true) && reach_all(false)
}

/// Dense `m × m` mixing matrix; entry `(i, j)` is the weight receiver `i`
/// applies to sender `j`'s payload.
#[derive(Clone, Debug, PartialEq)]
pub struct MixingMatrix {
    workers: usize,
    entries: Vec<f64>,
    stochasticity: Stochasticity,
}

impl MixingMatrix {
    pub fn identity(workers: usize, stochasticity: Stochasticity) -> Self {
        let mut entries = vec![0.0; workers * workers];
        for i in 0..workers {
            entries[i * workers + i] = 1.0;
        }
        Self {
            workers,
            entries,
            stochasticity,
        }
    }

    /// Builds a matrix from rows; `rows[i][j]` is receiver `i`, sender `j`.
    pub fn from_rows(rows: Vec<Vec<f64>>, stochasticity: Stochasticity) -> Self {
        let workers = rows.len();
        Self {
            workers,
            entries: rows.into_iter().flatten().collect(),
            stochasticity,
        }
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn stochasticity(&self) -> Stochasticity {
        self.stochasticity
    }

    pub fn get(&self, receiver: usize, sender: usize) -> f64 {
        self.entries[receiver * self.workers + sender]
    }

    fn set(&mut self, receiver: usize, sender: usize, value: f64) {
        self.entries[receiver * self.workers + sender] = value;
    }

    pub fn column_sums(&self) -> Vec<f64> {
        (0..self.workers)
            .map(|j| (0..self.workers).map(|i| self.get(i, j)).sum())
            .collect()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.entries.chunks_exact(self.workers).map(|r| r.iter().sum()).collect()
    }

    pub fn is_column_stochastic(&self) -> bool {
        self.entries.iter().all(|&p| p >= 0.0)
            && self
                .column_sums()
                .iter()
                .all(|s| (s - 1.0).abs() <= STOCHASTIC_TOL)
    }

    pub fn is_doubly_stochastic(&self) -> bool {
        self.is_column_stochastic()
            && self
                .row_sums()
                .iter()
                .all(|s| (s - 1.0).abs() <= STOCHASTIC_TOL)
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.entries.chunks_exact(self.workers).map(<[f64]>::to_vec).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_hops_for_eight_nodes() {
        let s = TopologySchedule::exponential(8);
        assert_eq!(s.period(), 3);
        let got: Vec<usize> = (0..4).map(|k| s.out_neighbor(0, k).unwrap()).collect();
        assert_eq!(got, vec![1, 2, 4, 1]);
    }

    #[test]
    fn two_nodes_always_swap() {
        let s = TopologySchedule::exponential(2);
        for k in 0..5 {
            assert_eq!(s.out_neighbor(0, k).unwrap(), 1);
            assert_eq!(s.out_neighbor(1, k).unwrap(), 0);
        }
    }

    #[test]
    fn single_node_sends_to_itself() {
        let s = TopologySchedule::exponential(1);
        assert_eq!(s.out_neighbor(0, 7).unwrap(), 0);
        assert!(s.out_neighbors(0, 7).is_empty());
        let p = s.mixing_matrix(3, Stochasticity::Doubly).unwrap();
        assert_eq!(p.rows(), vec![vec![1.0]]);
    }

    #[test]
    fn non_power_of_two_period() {
        assert_eq!(TopologySchedule::exponential(15).period(), 4);
        assert_eq!(TopologySchedule::exponential(9).period(), 4);
        assert_eq!(TopologySchedule::exponential(5).period(), 3);
        assert_eq!(TopologySchedule::exponential(3).period(), 2);
    }

    #[test]
    fn two_node_mixing_is_both_kinds() {
        let s = TopologySchedule::exponential(2);
        for st in [Stochasticity::Column, Stochasticity::Doubly] {
            let p = s.mixing_matrix(4, st).unwrap();
            assert_eq!(p.rows(), vec![vec![0.5, 0.5], vec![0.5, 0.5]]);
            assert!(p.is_doubly_stochastic());
        }
    }

    #[test]
    fn edgeless_custom_graph_is_identity() {
        let s = TopologySchedule {
            kind: Kind::Custom(vec![vec![vec![], vec![]]]),
            workers: 2,
        };
        for st in [Stochasticity::Column, Stochasticity::Doubly] {
            assert_eq!(
                s.mixing_matrix(0, st).unwrap(),
                MixingMatrix::identity(2, st)
            );
        }
    }

    #[test]
    fn complete_graph_is_uniform() {
        let p = TopologySchedule::complete(4)
            .mixing_matrix(0, Stochasticity::Column)
            .unwrap();
        assert!(p.rows().iter().flatten().all(|&v| v == 0.25));
        assert!(p.is_doubly_stochastic());
    }

    #[test]
    fn unpairable_round_is_a_config_error() {
        let s = TopologySchedule::exponential(6);
        // hop 4 on six nodes has no perfect matching
        assert!(matches!(
            s.mixing_matrix(2, Stochasticity::Doubly),
            Err(Error::Config(_))
        ));
        assert!(s.mixing_matrix(0, Stochasticity::Doubly).is_ok());
        assert!(TopologySchedule::exponential(3)
            .mixing_matrix(0, Stochasticity::Doubly)
            .is_err());
    }

    #[test]
    fn custom_graph_must_be_strongly_connected() {
        let graph = CustomGraph {
            rounds: vec![vec![vec![1], vec![0], vec![]]],
        };
        assert!(TopologySchedule::custom(3, graph).is_err());
        let ring = CustomGraph {
            rounds: vec![vec![vec![1], vec![2], vec![0]]],
        };
        assert!(TopologySchedule::custom(3, ring).is_ok());
    }

    #[test]
    fn custom_doubly_requires_matching() {
        let graph = CustomGraph {
            rounds: vec![vec![vec![1, 2], vec![0], vec![0]]],
        };
        let s = TopologySchedule::custom(3, graph).unwrap();
        assert!(s.mixing_matrix(0, Stochasticity::Column).unwrap().is_column_stochastic());
        assert!(s.mixing_matrix(0, Stochasticity::Doubly).is_err());
    }

    #[test]
    fn custom_graph_loads_from_json() {
        let dir = std::env::temp_dir().join(format!("slowmo-topo-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("graph.json");
        std::fs::write(&path, r#"{"rounds": [[[1], [0]]]}"#).unwrap();
        let s = TopologySchedule::from_spec(&TopologySpec::Custom { path: path.clone() }, 2).unwrap();
        assert_eq!(s.out_neighbors(0, 5), vec![1]);
        std::fs::remove_file(path).unwrap();
    }
}
