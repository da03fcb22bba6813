//! Time-varying directed topologies, the joint clock, and the relaxed
//! connectivity check.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ClientId, Result, SabreError};

/// Directed edge `[from, to]`: `from` can send to `to`.
pub type Edge = [u32; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BaseGraph {
    Complete,
    Edges { edges: Vec<Edge> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Schedule {
    #[default]
    Static,
    /// Drops `fraction` of the base graph's directed edges. With `period = None`
    /// the same edges stay dropped forever; otherwise a fresh set is drawn every
    /// `period` joint ticks.
    RandomDrop {
        fraction: f64,
        #[serde(default)]
        period: Option<u64>,
        seed: u64,
    },
    /// Explicit edge lists, cycled through one per joint tick. The base graph is ignored.
    Scripted { snapshots: Vec<Vec<Edge>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    pub nodes: usize,
    pub base: BaseGraph,
    #[serde(default)]
    pub schedule: Schedule,
}

/// Square boolean matrix; `get(i, j)` is true iff `j` can send to `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency {
    n: usize,
    cells: Vec<bool>,
}

impl Adjacency {
    pub fn empty(n: usize) -> Self {
        Self {
            n,
            cells: vec![false; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut a = Self::empty(n);
        for i in 0..n {
            a.set(i, i, true);
        }
        a
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, to: usize, from: usize) -> bool {
        self.cells[to * self.n + from]
    }

    pub fn set(&mut self, to: usize, from: usize, v: bool) {
        self.cells[to * self.n + from] = v;
    }

    /// Zero-based in-neighbors of `to`, excluding `to` itself.
    pub fn in_neighbors(&self, to: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.n).filter(move |&j| j != to && self.get(to, j))
    }

    pub fn edge_count(&self) -> usize {
        (0..self.n)
            .map(|i| self.in_neighbors(i).count())
            .sum()
    }

    fn with_self_loops(&self) -> Self {
        let mut a = self.clone();
        for i in 0..self.n {
            a.set(i, i, true);
        }
        a
    }

    /// Boolean product `self * rhs`.
    pub fn product(&self, rhs: &Adjacency) -> Adjacency {
        let n = self.n;
        let mut out = Adjacency::empty(n);
        for i in 0..n {
            for k in 0..n {
                if self.get(i, k) {
                    for j in 0..n {
                        if rhs.get(k, j) {
                            out.set(i, j, true);
                        }
                    }
                }
            }
        }
        out
    }

    /// Restriction to the given zero-based node subset, in order.
    pub fn restrict(&self, nodes: &[usize]) -> Adjacency {
        let mut out = Adjacency::empty(nodes.len());
        for (a, &i) in nodes.iter().enumerate() {
            for (b, &j) in nodes.iter().enumerate() {
                out.set(a, b, self.get(i, j));
            }
        }
        out
    }

    /// Whether the directed graph is strongly connected.
    pub fn is_strongly_connected(&self) -> bool {
        if self.n <= 1 {
            return true;
        }
        let reach = |forward: bool| {
            let mut seen = vec![false; self.n];
            let mut stack = vec![0usize];
            seen[0] = true;
            while let Some(u) = stack.pop() {
                for v in 0..self.n {
                    let edge = if forward { self.get(v, u) } else { self.get(u, v) };
                    if edge && !seen[v] {
                        seen[v] = true;
                        stack.push(v);
                    }
                }
            }
            seen.into_iter().all(|s| s)
        };
        reach(true) && reach(false)
    }
}

impl Topology {
    pub fn complete(nodes: usize) -> Self {
        Self {
            nodes,
            base: BaseGraph::Complete,
            schedule: Schedule::Static,
        }
    }

    /// Static graph from undirected pairs, each turned into two directed edges.
    pub fn undirected(nodes: usize, pairs: &[(u32, u32)]) -> Self {
        let edges = pairs.iter().flat_map(|&(a, b)| [[a, b], [b, a]]).collect();
        Self {
            nodes,
            base: BaseGraph::Edges { edges },
            schedule: Schedule::Static,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nodes == 0 {
            return Err(SabreError::config("topology.nodes must be >= 1"));
        }
        let check = |edges: &[Edge], what: &str| -> Result<()> {
            for &[a, b] in edges {
                if a == 0 || b == 0 || a as usize > self.nodes || b as usize > self.nodes {
                    return Err(SabreError::config(format!(
                        "{what}: edge [{a}, {b}] references a node outside 1..={}",
                        self.nodes
                    )));
                }
                if a == b {
                    return Err(SabreError::config(format!("{what}: self-loop on node {a}")));
                }
            }
            Ok(())
        };
        if let BaseGraph::Edges { edges } = &self.base {
            check(edges, "topology.base.edges")?;
        }
        match &self.schedule {
            Schedule::Static => {}
            Schedule::RandomDrop { fraction, period, .. } => {
                if !(0.0..1.0).contains(fraction) {
                    return Err(SabreError::config(format!(
                        "topology.schedule.fraction must be in [0, 1), got {fraction}"
                    )));
                }
                if *period == Some(0) {
                    return Err(SabreError::config("topology.schedule.period must be >= 1"));
                }
            }
            Schedule::Scripted { snapshots } => {
                if snapshots.is_empty() {
                    return Err(SabreError::config("topology.schedule.snapshots is empty"));
                }
                for (t, s) in snapshots.iter().enumerate() {
                    check(s, &format!("topology.schedule.snapshots[{t}]"))?;
                }
            }
        }
        Ok(())
    }

    fn from_edges(&self, edges: &[Edge]) -> Adjacency {
        let mut a = Adjacency::empty(self.nodes);
        for &[from, to] in edges {
            a.set(to as usize - 1, from as usize - 1, true);
        }
        a
    }

    fn base_adjacency(&self) -> Adjacency {
        match &self.base {
            BaseGraph::Complete => {
                let mut a = Adjacency::empty(self.nodes);
                for i in 0..self.nodes {
                    for j in 0..self.nodes {
                        a.set(i, j, i != j);
                    }
                }
                a
            }
            BaseGraph::Edges { edges } => self.from_edges(edges),
        }
    }

    /// Identifier of the snapshot in force at `tick`; equal keys mean equal graphs.
    pub fn epoch(&self, tick: u64) -> u64 {
        match &self.schedule {
            Schedule::Static => 0,
            Schedule::RandomDrop { period, .. } => period.map_or(0, |p| tick / p),
            Schedule::Scripted { snapshots } => tick % snapshots.len() as u64,
        }
    }

    /// Adjacency in force during joint tick `tick` (no self-loops).
    pub fn adjacency(&self, tick: u64) -> Adjacency {
        match &self.schedule {
            Schedule::Static => self.base_adjacency(),
            Schedule::RandomDrop { fraction, seed, .. } => {
                let mut a = self.base_adjacency();
                let edges: Vec<(usize, usize)> = (0..self.nodes)
                    .flat_map(|i| (0..self.nodes).map(move |j| (i, j)))
                    .filter(|&(i, j)| a.get(i, j))
                    .collect();
                let count = (fraction * edges.len() as f64).round() as usize;
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                rng.set_stream(self.epoch(tick));
                for e in index::sample(&mut rng, edges.len(), count) {
                    let (i, j) = edges[e];
                    a.set(i, j, false);
                }
                a
            }
            Schedule::Scripted { snapshots } => self.from_edges(&snapshots[self.epoch(tick) as usize]),
        }
    }

    fn check_client(&self, client: ClientId) -> Result<()> {
        if client.0 == 0 || client.0 as usize > self.nodes {
            return Err(SabreError::UnknownClient(client));
        }
        Ok(())
    }

    /// Clients whose messages `client` receives during `tick`, including itself.
    pub fn neighbors_in(&self, tick: u64, client: ClientId) -> Result<Vec<ClientId>> {
        self.check_client(client)?;
        Ok(neighbors_from(&self.adjacency(tick), client))
    }

    /// Clients that receive `client`'s messages during `tick`, including itself.
    pub fn neighbors_out(&self, tick: u64, client: ClientId) -> Result<Vec<ClientId>> {
        self.check_client(client)?;
        let a = self.adjacency(tick);
        let i = client.index();
        Ok((0..self.nodes)
            .filter(|&k| k == i || a.get(k, i))
            .map(ClientId::from_index)
            .collect())
    }
}

pub(crate) fn neighbors_from(a: &Adjacency, client: ClientId) -> Vec<ClientId> {
    let i = client.index();
    (0..a.size())
        .filter(|&j| j == i || a.get(i, j))
        .map(ClientId::from_index)
        .collect()
}

/// Outcome of the relaxed connectivity check.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "kebab-case")]
pub enum ConnectivityVerdict {
    /// Consecutive windows `[start, end]` (inclusive joint ticks) whose
    /// products are strongly connected, covering the horizon.
    Satisfied { windows: Vec<(u64, u64)> },
    /// Starting at `start`, `searched` ticks never produced a strongly
    /// connected product.
    Violated {
        start: u64,
        searched: u64,
        windows: Vec<(u64, u64)>,
    },
}

impl ConnectivityVerdict {
    pub fn is_satisfied(&self) -> bool {
        matches!(self, ConnectivityVerdict::Satisfied { .. })
    }
}

/// Greedy window search over `[0, horizon)`: each window is extended until the
/// boolean product of `(A_t + I)` over it, restricted to `subset`, is strongly
/// connected. A window may not exceed `window_limit` ticks.
pub fn check_relaxed_connectivity(
    topology: &Topology,
    horizon: u64,
    window_limit: u64,
    subset: Option<&[ClientId]>,
) -> ConnectivityVerdict {
    let nodes: Vec<usize> = match subset {
        Some(s) => {
            let mut v: Vec<usize> = s.iter().map(|c| c.index()).filter(|&i| i < topology.nodes).collect();
            v.sort_unstable();
            v.dedup();
            v
        }
        None => (0..topology.nodes).collect(),
    };
    let n = nodes.len();
    let window_limit = window_limit.max(1);
    let mut windows = Vec::new();
    let mut start = 0u64;
    let mut product = Adjacency::identity(n);
    let mut cache: Option<(u64, Adjacency)> = None;
    let mut t = 0u64;
    while start < horizon.max(1) {
        if t - start >= window_limit {
            return ConnectivityVerdict::Violated {
                start,
                searched: window_limit,
                windows,
            };
        }
        let epoch = topology.epoch(t);
        let step = match &cache {
            Some((e, a)) if *e == epoch => a.clone(),
            _ => {
                let a = topology.adjacency(t).restrict(&nodes).with_self_loops();
                cache = Some((epoch, a.clone()));
                a
            }
        };
        product = step.product(&product);
        if product.is_strongly_connected() {
            windows.push((start, t));
            start = t + 1;
            product = Adjacency::identity(n);
        }
        t += 1;
    }
    ConnectivityVerdict::Satisfied { windows }
}

/// Maps clients' local cycles, measured in abstract time units, onto joint ticks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JointClock {
    cycle_lengths: Vec<u64>,
    phases: Vec<u64>,
    tick_length: u64,
}

impl JointClock {
    pub fn new(cycle_lengths: Vec<u64>, phases: Vec<u64>) -> Result<Self> {
        if cycle_lengths.is_empty() || cycle_lengths.len() != phases.len() {
            return Err(SabreError::config("cycle lengths and phases must be nonempty and equally long"));
        }
        for (i, (&l, &p)) in cycle_lengths.iter().zip(&phases).enumerate() {
            if l == 0 || p >= l {
                return Err(SabreError::config(format!(
                    "client {}: need cycle length >= 1 and phase < cycle length, got {l} and {p}",
                    i + 1
                )));
            }
        }
        let tick_length = *cycle_lengths.iter().max().expect("nonempty");
        Ok(Self {
            cycle_lengths,
            phases,
            tick_length,
        })
    }

    pub fn uniform(clients: usize) -> Self {
        Self::new(vec![1; clients], vec![0; clients]).expect("valid")
    }

    /// Length of one joint tick in time units.
    pub fn tick_length(&self) -> u64 {
        self.tick_length
    }

    pub fn joint_tick(&self, unit: u64) -> u64 {
        unit / self.tick_length
    }

    /// Whether client `index` finishes a local cycle at time unit `unit`.
    pub fn completes_cycle(&self, index: usize, unit: u64) -> bool {
        let (l, p) = (self.cycle_lengths[index], self.phases[index]);
        unit + 1 >= p + l && (unit + 1 - p) % l == 0
    }

    /// Number of local cycles client `index` completes by the end of `unit`.
    pub fn cycles_completed(&self, index: usize, unit: u64) -> u64 {
        let (l, p) = (self.cycle_lengths[index], self.phases[index]);
        (unit + 1).saturating_sub(p) / l
    }
}
