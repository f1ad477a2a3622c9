//! Distributed fusion of per-agent information pairs `(P_i, z_i)`.
//!
//! [`SchemeKind::IseeU`] mixes neighbor states with row-stochastic weights
//! and injects the fresh, unweighted contributions of the whole closed
//! neighborhood:
//!
//! ```text
//! P_i(τ+1) = τ/(τ+1) Σ_{j∈N_i} W_ij P_j(τ) + 1/(τ+1) Σ_{j∈N_i} M_j(τ+1)
//! z_i(τ+1) = τ/(τ+1) Σ_{j∈N_i} W_ij z_j(τ) + 1/(τ+1) Σ_{j∈N_i} v_j(τ+1)
//! ```
//!
//! The baselines share the state shape so the simulator can swap them in.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linmodel::{self, Estimate, LinRow};
use crate::world::CommGraph;

#[derive(Debug, Clone, PartialEq)]
pub struct InfoState {
    pub info: DMatrix<f64>,
    pub vector: DVector<f64>,
    pub tau: u32,
}

impl InfoState {
    /// `P = 0`, `z = 0`, `τ = 0`.
    pub fn zero(m: usize) -> Self {
        InfoState {
            info: DMatrix::zeros(m, m),
            vector: DVector::zeros(m),
            tau: 0,
        }
    }

    pub fn new(info: DMatrix<f64>, vector: DVector<f64>, tau: u32) -> Self {
        InfoState { info, vector, tau }
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// Row `i` of the mixing matrix: `(neighbor index, weight)` over `N_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightRow {
    pub entries: Vec<(usize, f64)>,
}

impl WeightRow {
    pub fn sum(&self) -> f64 {
        self.entries.iter().map(|(_, w)| w).sum()
    }

    pub fn weight(&self, j: usize) -> f64 {
        self.entries
            .iter()
            .find(|(k, _)| *k == j)
            .map_or(0.0, |(_, w)| *w)
    }
}

/// Equal weights `1/|N_i|` over each closed neighborhood.
pub fn uniform_weights(g: &CommGraph) -> Vec<WeightRow> {
    (0..g.len())
        .map(|i| {
            let nbrs = g.neighbors(i);
            let w = 1.0 / nbrs.len() as f64;
            let mut entries: Vec<(usize, f64)> = nbrs.iter().map(|&j| (j, w)).collect();
            // absorb rounding so the row sums to one
            let rest: f64 = entries[..entries.len() - 1].iter().map(|(_, w)| w).sum();
            entries.last_mut().unwrap().1 = 1.0 - rest;
            WeightRow { entries }
        })
        .collect()
}

/// One agent's share of the centralized normal equations.
#[derive(Debug, Clone, PartialEq)]
pub struct Contribution {
    /// `w · a aᵀ`
    pub matrix: DMatrix<f64>,
    /// `w · a · y`
    pub vector: DVector<f64>,
}

impl Contribution {
    pub fn zero(m: usize) -> Self {
        Contribution {
            matrix: DMatrix::zeros(m, m),
            vector: DVector::zeros(m),
        }
    }

    pub fn clear(&mut self) {
        self.matrix.fill(0.0);
        self.vector.fill(0.0);
    }

    /// Accumulates one more row (an agent ranging several times, or the
    /// swap step of the controller).
    pub fn add_row(&mut self, row: &LinRow) {
        self.matrix.ger(row.w_inv, &row.a, &row.a, 1.0);
        self.vector.axpy(row.w_inv * row.y, &row.a, 1.0);
    }
}

pub fn local_contribution(row: &LinRow) -> Contribution {
    let mut c = Contribution::zero(row.a.len());
    c.add_row(row);
    c
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SchemeKind {
    #[serde(rename = "iseeu")]
    IseeU,
    /// Plain averaging, seeded with each agent's first own contribution.
    #[serde(rename = "c")]
    Consensus,
    /// Innovation from the agent's own contribution only.
    #[serde(rename = "ci")]
    ConsInnov,
    /// Neighborhood innovation multiplied by the mixing weights.
    #[serde(rename = "mci")]
    ModConsInnov,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 4] = [
        SchemeKind::IseeU,
        SchemeKind::Consensus,
        SchemeKind::ConsInnov,
        SchemeKind::ModConsInnov,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            SchemeKind::IseeU => "iseeu",
            SchemeKind::Consensus => "c",
            SchemeKind::ConsInnov => "ci",
            SchemeKind::ModConsInnov => "mci",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        SchemeKind::ALL
            .into_iter()
            .find(|k| k.short_name().eq_ignore_ascii_case(s))
    }
}

impl std::fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.short_name())
    }
}

fn add_scaled(dst: &mut DMatrix<f64>, s: f64, src: &DMatrix<f64>) {
    for (d, x) in dst.as_mut_slice().iter_mut().zip(src.as_slice()) {
        *d += s * x;
    }
}

/// Writes the `τ+1` states into `next`. `prev`, `next`, `weights` and
/// `contributions` are indexed like the graph's agents.
pub fn step_into(
    kind: SchemeKind,
    graph: &CommGraph,
    weights: &[WeightRow],
    prev: &[InfoState],
    contributions: &[Contribution],
    next: &mut [InfoState],
) {
    let n = graph.len();
    assert!(prev.len() == n && next.len() == n && contributions.len() == n && weights.len() == n);
    for i in 0..n {
        let tau = prev[i].tau;
        let keep = tau as f64 / (tau as f64 + 1.0);
        let fresh = 1.0 / (tau as f64 + 1.0);
        let out = &mut next[i];
        out.tau = tau + 1;
        out.info.fill(0.0);
        out.vector.fill(0.0);

        if kind == SchemeKind::Consensus {
            if tau == 0 {
                out.info.copy_from(&contributions[i].matrix);
                out.vector.copy_from(&contributions[i].vector);
            } else {
                for &(j, w) in &weights[i].entries {
                    add_scaled(&mut out.info, w, &prev[j].info);
                    out.vector.axpy(w, &prev[j].vector, 1.0);
                }
            }
            continue;
        }

        if tau > 0 {
            for &(j, w) in &weights[i].entries {
                add_scaled(&mut out.info, keep * w, &prev[j].info);
                out.vector.axpy(keep * w, &prev[j].vector, 1.0);
            }
        }
        match kind {
            SchemeKind::IseeU => {
                for &j in graph.neighbors(i) {
                    add_scaled(&mut out.info, fresh, &contributions[j].matrix);
                    out.vector.axpy(fresh, &contributions[j].vector, 1.0);
                }
            }
            SchemeKind::ModConsInnov => {
                for &(j, w) in &weights[i].entries {
                    add_scaled(&mut out.info, fresh * w, &contributions[j].matrix);
                    out.vector.axpy(fresh * w, &contributions[j].vector, 1.0);
                }
            }
            SchemeKind::ConsInnov => {
                add_scaled(&mut out.info, fresh, &contributions[i].matrix);
                out.vector.axpy(fresh, &contributions[i].vector, 1.0);
            }
            SchemeKind::Consensus => unreachable!(),
        }
    }
}

fn step_alloc(
    kind: SchemeKind,
    graph: &CommGraph,
    weights: &[WeightRow],
    states: &[InfoState],
    contributions: &[Contribution],
) -> Vec<InfoState> {
    let mut next: Vec<InfoState> = states.iter().map(|s| InfoState::zero(s.dim())).collect();
    step_into(kind, graph, weights, states, contributions, &mut next);
    next
}

pub fn step_iseeu(
    graph: &CommGraph,
    weights: &[WeightRow],
    states: &[InfoState],
    contributions: &[Contribution],
) -> Vec<InfoState> {
    step_alloc(SchemeKind::IseeU, graph, weights, states, contributions)
}

pub fn step_baseline(
    kind: SchemeKind,
    graph: &CommGraph,
    weights: &[WeightRow],
    states: &[InfoState],
    contributions: &[Contribution],
) -> Vec<InfoState> {
    step_alloc(kind, graph, weights, states, contributions)
}

/// `x̂ = P⁻¹z`, `cov = P⁻¹`; fails while `P` is rank deficient.
pub fn extract_estimate(st: &InfoState) -> Result<Estimate> {
    linmodel::solve_information(&st.info, &st.vector)
}

/// `‖P_i − P_ref‖_F / ‖P_ref‖_F`.
pub fn normalized_info_error(st: &InfoState, reference: &DMatrix<f64>) -> Result<f64> {
    if st.info.shape() != reference.shape() {
        return Err(Error::DimensionMismatch {
            expected: reference.nrows(),
            got: st.info.nrows(),
        });
    }
    let denom = reference.norm();
    if denom == 0.0 {
        return Err(Error::ZeroReferenceNorm);
    }
    Ok((&st.info - reference).norm() / denom)
}

/// `‖z_i − z_ref‖₂ / ‖z_ref‖₂`.
pub fn normalized_vector_error(st: &InfoState, reference: &DVector<f64>) -> Result<f64> {
    if st.vector.len() != reference.len() {
        return Err(Error::DimensionMismatch {
            expected: reference.len(),
            got: st.vector.len(),
        });
    }
    let denom = reference.norm();
    if denom == 0.0 {
        return Err(Error::ZeroReferenceNorm);
    }
    Ok((&st.vector - reference).norm() / denom)
}

/// Double-buffered network of agent states running one scheme over a
/// graph frozen for the estimation phase.
#[derive(Debug, Clone)]
pub struct ConsensusNetwork {
    kind: SchemeKind,
    graph: CommGraph,
    weights: Vec<WeightRow>,
    states: Vec<InfoState>,
    scratch: Vec<InfoState>,
}

impl ConsensusNetwork {
    pub fn new(kind: SchemeKind, graph: CommGraph, dim: usize) -> Self {
        let m = dim + 1;
        let n = graph.len();
        ConsensusNetwork {
            kind,
            weights: uniform_weights(&graph),
            graph,
            states: vec![InfoState::zero(m); n],
            scratch: vec![InfoState::zero(m); n],
        }
    }

    pub fn kind(&self) -> SchemeKind {
        self.kind
    }

    pub fn graph(&self) -> &CommGraph {
        &self.graph
    }

    pub fn weights(&self) -> &[WeightRow] {
        &self.weights
    }

    pub fn states(&self) -> &[InfoState] {
        &self.states
    }

    pub fn tau(&self) -> u32 {
        self.states.first().map_or(0, |s| s.tau)
    }

    /// One synchronous exchange: every agent reads its neighbors' round-τ
    /// states and the fresh round-(τ+1) contributions.
    pub fn round(&mut self, contributions: &[Contribution]) {
        step_into(
            self.kind,
            &self.graph,
            &self.weights,
            &self.states,
            contributions,
            &mut self.scratch,
        );
        std::mem::swap(&mut self.states, &mut self.scratch);
    }
}

/// Logged message from `from` to `to` in one round (matrices row-major).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusMessage {
    pub round: u32,
    pub from: usize,
    pub to: usize,
    #[serde(rename = "P")]
    pub p: Vec<f64>,
    pub z: Vec<f64>,
    #[serde(rename = "M")]
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

/// Messages exchanged in the round that turns `states` (round τ) into
/// round τ+1, for every ordered neighbor pair including self delivery.
pub fn round_messages(
    graph: &CommGraph,
    states: &[InfoState],
    contributions: &[Contribution],
) -> Vec<ConsensusMessage> {
    let mut out = Vec::new();
    for to in 0..graph.len() {
        for &from in graph.neighbors(to) {
            out.push(ConsensusMessage {
                round: states[from].tau + 1,
                from: graph.ids()[from],
                to: graph.ids()[to],
                p: row_major(&states[from].info),
                z: states[from].vector.as_slice().to_vec(),
                m: row_major(&contributions[from].matrix),
                v: contributions[from].vector.as_slice().to_vec(),
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linmodel::{build_row, build_row_noiseless, LinSystem, WeightMode};
    use crate::world::{build_comm_graph, Agent, Position};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rows_for(agents: &[Position], target: &Position) -> Vec<LinRow> {
        agents
            .iter()
            .map(|s| build_row_noiseless(s, s.distance(target)))
            .collect()
    }

    fn random_graph(rng: &mut ChaCha8Rng, n: usize, range: f64) -> (Vec<Position>, CommGraph) {
        let pos: Vec<Position> = (0..n)
            .map(|_| Position::xy(rng.random_range(0.0..10.0), rng.random_range(0.0..10.0)))
            .collect();
        let agents: Vec<Agent> = pos
            .iter()
            .enumerate()
            .map(|(i, p)| Agent::new(i, p.clone(), range))
            .collect();
        (pos, build_comm_graph(&agents))
    }

    #[test]
    fn contribution_of_unit_row() {
        let row = LinRow {
            y: 2.0,
            a: DVector::from_vec(vec![1.0, 0.0, 0.0]),
            w_inv: 1.0,
        };
        let c = local_contribution(&row);
        let mut e1 = DMatrix::zeros(3, 3);
        e1[(0, 0)] = 1.0;
        assert_eq!(c.matrix, e1);
        assert_eq!(c.vector.as_slice(), &[2.0, 0.0, 0.0]);

        let masked = local_contribution(&LinRow { w_inv: 0.0, ..row });
        assert_eq!(masked.matrix.norm(), 0.0);
        assert_eq!(masked.vector.norm(), 0.0);
    }

    #[test]
    fn uniform_weights_are_row_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (_, g) = random_graph(&mut rng, 30, 3.0);
        for (i, row) in uniform_weights(&g).iter().enumerate() {
            assert!((row.sum() - 1.0).abs() <= 1e-15);
            assert!(row.entries.iter().all(|&(j, w)| w >= 0.0 && g.neighbors(i).contains(&j)));
            assert!(row.weight(i) > 0.0);
        }
    }

    #[test]
    fn first_round_is_neighborhood_innovation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (pos, g) = random_graph(&mut rng, 8, 4.0);
        let target = Position::xy(5.0, 5.0);
        let contribs: Vec<_> = rows_for(&pos, &target).iter().map(local_contribution).collect();
        let states = vec![InfoState::zero(3); 8];
        let next = step_iseeu(&g, &uniform_weights(&g), &states, &contribs);
        for i in 0..8 {
            let mut expect = DMatrix::zeros(3, 3);
            for &j in g.neighbors(i) {
                expect += &contribs[j].matrix;
            }
            assert!((&next[i].info - expect).norm() <= 1e-12 * next[i].info.norm());
            assert_eq!(next[i].tau, 1);
        }
    }

    #[test]
    fn single_agent_running_average() {
        let g = CommGraph::complete(1);
        let w = uniform_weights(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut states = vec![InfoState::zero(3)];
        let mut sum = DMatrix::zeros(3, 3);
        for tau in 1..=10 {
            let s = Position::xy(rng.random_range(0.0..5.0), rng.random_range(0.0..5.0));
            let c = local_contribution(&build_row(&s, 3.0, 0.1, 3.0, WeightMode::Unbiased).unwrap());
            sum += &c.matrix;
            let ci = step_baseline(SchemeKind::ConsInnov, &g, &w, &states, std::slice::from_ref(&c));
            states = step_iseeu(&g, &w, &states, &[c]);
            assert_eq!(ci, states);
            assert!((&states[0].info - &sum / tau as f64).norm() <= 1e-12 * sum.norm());
        }
    }

    #[test]
    fn complete_graph_noiseless_is_exact_every_round() {
        let pos = vec![
            Position::xy(0.0, 0.0),
            Position::xy(10.0, 0.0),
            Position::xy(0.0, 10.0),
            Position::xy(7.0, 9.0),
        ];
        let target = Position::xy(2.0, 3.0);
        let g = CommGraph::complete(4);
        let mut net = ConsensusNetwork::new(SchemeKind::IseeU, g, 2);
        let contribs: Vec<_> = rows_for(&pos, &target).iter().map(local_contribution).collect();
        let x = DVector::from_vec(vec![13.0, 2.0, 3.0]);
        for _ in 0..5 {
            net.round(&contribs);
            for st in net.states() {
                let est = extract_estimate(st).unwrap();
                assert!((&est.x_hat - &x).norm() < 1e-9);
                assert_eq!(st, &net.states()[0]);
            }
        }
    }

    #[test]
    fn consensus_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (_, g) = random_graph(&mut rng, 6, 5.0);
        let w = uniform_weights(&g);
        let p = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.1, 0.5, 3.0, 0.2, 0.1, 0.2, 1.0]);
        let z = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let mut states = vec![InfoState::new(p.clone(), z.clone(), 3); 6];
        let junk = vec![Contribution::zero(3); 6];
        for _ in 0..10 {
            states = step_baseline(SchemeKind::Consensus, &g, &w, &states, &junk);
            for s in &states {
                assert!((&s.info - &p).norm() < 1e-14);
                assert!((&s.vector - &z).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn modified_innovation_on_complete_graph() {
        let pos = vec![
            Position::xy(0.0, 0.0),
            Position::xy(4.0, 1.0),
            Position::xy(2.0, 6.0),
        ];
        let target = Position::xy(1.0, 1.0);
        let contribs: Vec<_> = rows_for(&pos, &target).iter().map(local_contribution).collect();
        let g = CommGraph::complete(3);
        let w = uniform_weights(&g);
        let zero = vec![InfoState::zero(3); 3];
        let iseeu = step_iseeu(&g, &w, &zero, &contribs);
        let mci = step_baseline(SchemeKind::ModConsInnov, &g, &w, &zero, &contribs);
        for i in 0..3 {
            assert!((&iseeu[i].info / 3.0 - &mci[i].info).norm() < 1e-12 * mci[i].info.norm());
        }
    }

    #[test]
    fn cons_innov_first_round_is_singular() {
        let pos = vec![Position::xy(0.0, 0.0), Position::xy(4.0, 1.0), Position::xy(2.0, 6.0)];
        let contribs: Vec<_> = rows_for(&pos, &Position::xy(1.0, 1.0))
            .iter()
            .map(local_contribution)
            .collect();
        let g = CommGraph::complete(3);
        let s = step_baseline(SchemeKind::ConsInnov, &g, &uniform_weights(&g), &vec![InfoState::zero(3); 3], &contribs);
        assert!(matches!(extract_estimate(&s[0]), Err(Error::SingularInformation { .. })));
    }

    #[test]
    fn extraction_identity() {
        let st = InfoState::new(DMatrix::identity(3, 3), DVector::from_vec(vec![14.0, 2.0, 3.0]), 1);
        let est = extract_estimate(&st).unwrap();
        assert_eq!(est.x_hat.as_slice(), &[14.0, 2.0, 3.0]);
        assert_eq!(est.p_hat.coords(), &[2.0, 3.0]);
        assert!(extract_estimate(&InfoState::zero(3)).is_err());
    }

    #[test]
    fn normalized_errors() {
        let p = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let st = InfoState::new(p.clone(), DVector::from_vec(vec![1.0, 1.0]), 0);
        assert_eq!(normalized_info_error(&st, &p).unwrap(), 0.0);
        let twice = InfoState::new(&p * 2.0, DVector::from_vec(vec![2.0, 2.0]), 0);
        assert!((normalized_info_error(&twice, &p).unwrap() - 1.0).abs() < 1e-15);
        assert!((normalized_vector_error(&twice, &DVector::from_vec(vec![1.0, 1.0])).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(
            normalized_info_error(&st, &DMatrix::zeros(2, 2)),
            Err(Error::ZeroReferenceNorm)
        ));

        let q = DMatrix::from_row_slice(2, 2, &[5.0, -1.0, -1.0, 4.0]);
        let manual = {
            let d = [2.0 - 5.0, 1.0 + 1.0, 1.0 + 1.0, 3.0 - 4.0f64];
            let r = [5.0, -1.0, -1.0, 4.0f64];
            (d.iter().map(|v| v * v).sum::<f64>() / r.iter().map(|v| v * v).sum::<f64>()).sqrt()
        };
        assert!((normalized_info_error(&st, &q).unwrap() - manual).abs() < 1e-12);
    }

    #[test]
    fn messages_cover_closed_neighborhoods() {
        let g = CommGraph::from_edges(3, &[(0, 1)]);
        let states = vec![InfoState::zero(3); 3];
        let contribs = vec![Contribution::zero(3); 3];
        let msgs = round_messages(&g, &states, &contribs);
        assert_eq!(msgs.len(), 2 + 2 + 1);
        assert!(msgs.iter().all(|m| m.round == 1 && m.p.len() == 9 && m.v.len() == 3));
        let json = serde_json::to_string(&msgs[0]).unwrap();
        assert!(json.contains("\"P\"") && json.contains("\"M\""));
    }

    #[test]
    fn local_sums_match_centralized() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let target = Position::xy(3.0, 4.0);
        let rows: Vec<LinRow> = (0..7)
            .map(|_| {
                let s = Position::xy(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
                let d = s.distance(&target);
                build_row(&s, d * 1.01, 0.01 * d, d, WeightMode::Quadratic).unwrap()
            })
            .collect();
        let (info, vec) = LinSystem::new(rows.clone(), 2, WeightMode::Quadratic).normal_equations();
        let mut sm = DMatrix::zeros(3, 3);
        let mut sv = DVector::zeros(3);
        for r in &rows {
            let c = local_contribution(r);
            sm += c.matrix;
            sv += c.vector;
        }
        assert!((sm - &info).norm() <= 1e-12 * info.norm());
        assert!((sv - &vec).norm() <= 1e-12 * vec.norm());
    }

    proptest! {
        #[test]
        fn states_stay_symmetric_psd(seed in 0u64..500, kind_idx in 0usize..4) {
            let kind = SchemeKind::ALL[kind_idx];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (pos, g) = random_graph(&mut rng, 10, 4.0);
            let target = Position::xy(5.0, 5.0);
            let mut net = ConsensusNetwork::new(kind, g, 2);
            for _ in 0..8 {
                let contribs: Vec<_> = pos.iter().map(|s| {
                    let d = s.distance(&target);
                    let r = d + 0.01 * d * rng.random_range(-1.0..1.0);
                    local_contribution(&build_row(s, r, 0.01 * d, r, WeightMode::Unbiased).unwrap())
                }).collect();
                net.round(&contribs);
                for st in net.states() {
                    let asym = (&st.info - st.info.transpose()).amax();
                    prop_assert!(asym <= 1e-12 * st.info.amax().max(1e-300));
                    let min = linmodel::symmetrized(&st.info).symmetric_eigenvalues().min();
                    prop_assert!(min >= -1e-9 * st.info.norm());
                }
            }
        }

        #[test]
        fn noiseless_information_identity(seed in 0u64..500) {
            // z_i(τ) = P_i(τ) x for every agent and round when data are exact
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (pos, g) = random_graph(&mut rng, 9, 4.0);
            let target = Position::xy(rng.random_range(0.0..10.0), rng.random_range(0.0..10.0));
            let x = DVector::from_vec(vec![target.norm_squared(), target.coords()[0], target.coords()[1]]);
            let contribs: Vec<_> = rows_for(&pos, &target).iter().map(local_contribution).collect();
            let mut net = ConsensusNetwork::new(SchemeKind::IseeU, g, 2);
            for _ in 0..6 {
                net.round(&contribs);
                for st in net.states() {
                    let r = &st.info * &x - &st.vector;
                    prop_assert!(r.norm() <= 1e-9 * (1.0 + st.vector.norm()));
                }
            }
        }

        #[test]
        fn averaging_contracts_toward_stationary_mean(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (pos, g) = loop {
                let (p, g) = random_graph(&mut rng, 8, 5.0);
                if crate::world::is_connected(&g) { break (p, g); }
            };
            let target = Position::xy(5.0, 5.0);
            let contribs: Vec<_> = rows_for(&pos, &target).iter().map(local_contribution).collect();
            let w = uniform_weights(&g);
            let mut states = vec![InfoState::zero(3); 8];
            for _ in 0..3 {
                states = step_iseeu(&g, &w, &states, &contribs);
            }
            // stationary distribution of D⁻¹(A+I) is proportional to |N_i|
            let total: f64 = (0..8).map(|i| g.neighbors(i).len() as f64).sum();
            let mean = (0..8).fold(DMatrix::zeros(3, 3), |acc, i| {
                acc + &states[i].info * (g.neighbors(i).len() as f64 / total)
            });
            let spread = |s: &[InfoState]| s.iter().map(|st| (&st.info - &mean).norm()).fold(0.0, f64::max);
            let mut last = spread(&states);
            for _ in 0..30 {
                states = step_baseline(SchemeKind::Consensus, &g, &w, &states, &contribs);
                let now = spread(&states);
                prop_assert!(now <= last * (1.0 + 1e-12) + 1e-12);
                last = now;
            }
        }
    }
}
