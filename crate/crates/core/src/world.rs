//! Agent and target state plus the communication and measurement graphs
//! derived from it at each time step.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

/// A point in the deployment space (2D or 3D).
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<f64>", into = "Vec<f64>")]
pub struct Position(DVector<f64>);

impl Position {
    pub fn new(coords: Vec<f64>) -> Self {
        Position(DVector::from_vec(coords))
    }

    pub fn xy(x: f64, y: f64) -> Self {
        Position::new(vec![x, y])
    }

    pub fn from_vector(v: DVector<f64>) -> Self {
        Position(v)
    }

    pub fn zeros(dim: usize) -> Self {
        Position(DVector::zeros(dim))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn coords(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|c| c.is_finite())
    }

    pub fn norm_squared(&self) -> f64 {
        self.0.norm_squared()
    }

    pub fn distance(&self, other: &Position) -> f64 {
        debug_assert_eq!(self.dim(), other.dim());
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn offset(&self, delta: &[f64]) -> Position {
        Position(DVector::from_iterator(
            self.dim(),
            self.0.iter().zip(delta).map(|(a, d)| a + d),
        ))
    }
}

impl fmt::Debug for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.0.iter()).finish()
    }
}

impl From<Vec<f64>> for Position {
    fn from(v: Vec<f64>) -> Self {
        Position::new(v)
    }
}

impl From<Position> for Vec<f64> {
    fn from(p: Position) -> Self {
        p.0.as_slice().to_vec()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub id: usize,
    pub pos: Position,
    pub comm_range: f64,
    /// `f64::INFINITY` means the agent ranges every target.
    pub fov_range: f64,
}

impl Agent {
    pub fn new(id: usize, pos: Position, comm_range: f64) -> Self {
        Agent {
            id,
            pos,
            comm_range,
            fov_range: f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub id: usize,
    pub pos: Position,
}

/// Undirected communication graph over agents. Neighbor sets are stored by
/// index into the agent slice the graph was built from and always contain
/// the agent itself.
#[derive(Debug, Clone, PartialEq)]
pub struct CommGraph {
    ids: Vec<usize>,
    neighbors: Vec<Vec<usize>>,
}

impl CommGraph {
    /// Builds a graph directly from index-based adjacency (self loops are added).
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut sets: Vec<BTreeSet<usize>> = (0..n).map(|i| BTreeSet::from([i])).collect();
        for &(a, b) in edges {
            sets[a].insert(b);
            sets[b].insert(a);
        }
        CommGraph {
            ids: (0..n).collect(),
            neighbors: sets.into_iter().map(|s| s.into_iter().collect()).collect(),
        }
    }

    pub fn complete(n: usize) -> Self {
        CommGraph {
            ids: (0..n).collect(),
            neighbors: (0..n).map(|_| (0..n).collect()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    /// Closed neighborhood `N_i` (indices, ascending, includes `i`).
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    /// Closed neighborhood expressed in agent ids.
    pub fn neighbor_ids(&self, i: usize) -> Vec<usize> {
        self.neighbors[i].iter().map(|&j| self.ids[j]).collect()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        i != j && self.neighbors[i].binary_search(&j).is_ok()
    }

    /// Undirected edges `(i, j)` with `i < j`, by index.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, set) in self.neighbors.iter().enumerate() {
            out.extend(set.iter().filter(|&&j| j > i).map(|&j| (i, j)));
        }
        out
    }

    /// Open degree (self excluded).
    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len() - 1
    }

    pub fn mean_degree(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        (0..self.len()).map(|i| self.degree(i)).sum::<usize>() as f64 / self.len() as f64
    }
}

/// Bipartite agent/target ranging graph, edges as `(agent_id, target_id)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MeasGraph {
    edges: BTreeSet<(usize, usize)>,
}

impl MeasGraph {
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn contains(&self, agent_id: usize, target_id: usize) -> bool {
        self.edges.contains(&(agent_id, target_id))
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }
}

/// Edge `(i, j)` exists iff `‖s_i − s_j‖ ≤ min(range_i, range_j)`.
pub fn build_comm_graph(agents: &[Agent]) -> CommGraph {
    let n = agents.len();
    let mut neighbors: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    for i in 0..n {
        for j in (i + 1)..n {
            let range = agents[i].comm_range.min(agents[j].comm_range);
            if agents[i].pos.distance(&agents[j].pos) <= range {
                neighbors[i].push(j);
                neighbors[j].push(i);
            }
        }
    }
    for set in &mut neighbors {
        set.sort_unstable();
    }
    CommGraph {
        ids: agents.iter().map(|a| a.id).collect(),
        neighbors,
    }
}

pub fn build_meas_graph(agents: &[Agent], targets: &[Target]) -> MeasGraph {
    let mut edges = BTreeSet::new();
    for a in agents {
        for t in targets {
            if a.pos.distance(&t.pos) <= a.fov_range {
                edges.insert((a.id, t.id));
            }
        }
    }
    MeasGraph { edges }
}

pub fn is_connected(g: &CommGraph) -> bool {
    if g.len() <= 1 {
        return true;
    }
    let mut seen = vec![false; g.len()];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    let mut count = 1;
    while let Some(i) = queue.pop_front() {
        for &j in g.neighbors(i) {
            if !seen[j] {
                seen[j] = true;
                count += 1;
                queue.push_back(j);
            }
        }
    }
    count == g.len()
}

/// Snapshot of the world at one outer time step.
#[derive(Debug, Clone)]
pub struct WorldState {
    pub t: usize,
    pub agents: Vec<Agent>,
    pub targets: Vec<Target>,
    pub comm: CommGraph,
    pub meas: MeasGraph,
}

impl WorldState {
    pub fn new(t: usize, agents: Vec<Agent>, targets: Vec<Target>) -> Self {
        let comm = build_comm_graph(&agents);
        let meas = build_meas_graph(&agents, &targets);
        WorldState {
            t,
            agents,
            targets,
            comm,
            meas,
        }
    }

    pub fn rebuild_graphs(&mut self) {
        self.comm = build_comm_graph(&self.agents);
        self.meas = build_meas_graph(&self.agents, &self.targets);
    }

    pub fn dim(&self) -> usize {
        self.agents
            .first()
            .map(|a| a.pos.dim())
            .or_else(|| self.targets.first().map(|t| t.pos.dim()))
            .unwrap_or(2)
    }
}
