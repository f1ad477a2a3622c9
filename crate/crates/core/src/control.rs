//! D-optimal greedy motion on a grid.
//!
//! An agent removes its own information contribution from its current
//! estimate of the network information matrix, re-adds the contribution it
//! would have at each reachable cell, and moves to the cell whose error
//! ellipsoid has the smallest volume.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::consensus::Contribution;
use crate::error::{Error, Result};
use crate::linmodel::{build_row, build_row_noiseless, WeightMode};
use crate::sensing::NoiseModel;
use crate::world::{Position, WorldState};

/// Relative tolerance for the symmetry check on covariance input.
const SYMMETRY_RTOL: f64 = 1e-9;

fn factorial(n: u32) -> f64 {
    (1..=n).map(f64::from).product()
}

/// Volume of the unit ball in `m` dimensions, via the even/odd closed forms.
pub fn unit_ball_volume(m: usize) -> f64 {
    let eps = (m / 2) as u32;
    if m.is_multiple_of(2) {
        std::f64::consts::PI.powi(eps as i32) / factorial(eps)
    } else {
        2.0 * factorial(eps) * (4.0 * std::f64::consts::PI).powi(eps as i32)
            / factorial(2 * eps + 1)
    }
}

/// `χ²_{dof,θ}` quantile.
pub fn chi2_quantile(dof: usize, theta: f64) -> Result<f64> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "confidence level must lie in (0,1), got {theta}"
        )));
    }
    let dist = ChiSquared::new(dof as f64)
        .map_err(|e| Error::InvalidArgument(format!("chi-squared dof {dof}: {e}")))?;
    Ok(dist.inverse_cdf(theta))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EllipsoidSpec {
    pub half_axes: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub chi2: f64,
    pub theta: f64,
}

impl EllipsoidSpec {
    pub fn from_cov(cov: &DMatrix<f64>, theta: f64) -> Result<Self> {
        check_symmetric(cov)?;
        let chi2 = chi2_quantile(cov.nrows(), theta)?;
        let mut lambdas: Vec<f64> = cov
            .clone()
            .symmetric_eigenvalues()
            .iter()
            .map(|&l| l.max(0.0))
            .collect();
        lambdas.sort_by(f64::total_cmp);
        let half_axes = lambdas.iter().map(|l| (chi2 * l).sqrt()).collect();
        Ok(EllipsoidSpec {
            half_axes,
            lambdas,
            chi2,
            theta,
        })
    }

    pub fn volume(&self) -> f64 {
        unit_ball_volume(self.half_axes.len()) * self.half_axes.iter().product::<f64>()
    }
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(Error::DimensionMismatch {
            expected: m.nrows(),
            got: m.ncols(),
        });
    }
    let asym = (m - m.transpose()).amax();
    if asym > SYMMETRY_RTOL * m.amax().max(f64::MIN_POSITIVE) {
        return Err(Error::NonSymmetric { asymmetry: asym });
    }
    Ok(())
}

/// θ-confidence ellipsoid volume of a covariance matrix.
pub fn ellipsoid_volume(cov: &DMatrix<f64>, theta: f64) -> Result<f64> {
    Ok(EllipsoidSpec::from_cov(cov, theta)?.volume())
}

/// Log-volume of the ellipsoid of `cov = info⁻¹` from a Cholesky factor of
/// `info`; `None` when `info` is not positive definite.
pub fn log_volume_from_info(info: &DMatrix<f64>, chi2: f64) -> Option<f64> {
    let m = info.nrows();
    let chol = info.clone().cholesky()?;
    let l = chol.l_dirty();
    let mut log_det_info = 0.0;
    for k in 0..m {
        let d = l[(k, k)];
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        log_det_info += 2.0 * d.ln();
    }
    Some(unit_ball_volume(m).ln() + 0.5 * m as f64 * chi2.ln() - 0.5 * log_det_info)
}

/// Axis-aligned deployment area discretized with a square cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoveGrid {
    pub cell: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl MoveGrid {
    pub fn new(cell: f64, lower: Vec<f64>, upper: Vec<f64>) -> Self {
        MoveGrid { cell, lower, upper }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    fn tol(&self) -> f64 {
        1e-9 * self.cell
    }

    pub fn contains(&self, p: &Position) -> bool {
        let tol = self.tol();
        p.coords()
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(&c, (&lo, &hi))| c >= lo - tol && c <= hi + tol)
    }

    /// Nearest grid node, clipped to the bounds.
    pub fn snap(&self, p: &Position) -> Position {
        Position::new(
            p.coords()
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .map(|(&c, (&lo, &hi))| {
                    let max_k = ((hi - lo) / self.cell + 1e-9).floor();
                    let k = ((c - lo) / self.cell).round().clamp(0.0, max_k);
                    lo + k * self.cell
                })
                .collect(),
        )
    }

    pub fn is_on_grid(&self, p: &Position) -> bool {
        self.contains(p) && self.snap(p).distance(p) <= self.tol()
    }
}

/// Current cell plus every neighbor one cell away (8 in 2D, 26 in 3D),
/// restricted to the bounds, in row-major scan order (last axis outermost).
pub fn candidate_positions(pos: &Position, grid: &MoveGrid) -> Vec<Position> {
    let d = pos.dim();
    let total = 3usize.pow(d as u32);
    let mut out = Vec::with_capacity(total);
    for code in 0..total {
        // axis 0 varies fastest
        let mut rem = code;
        let mut delta = vec![0.0; d];
        for slot in delta.iter_mut() {
            *slot = ((rem % 3) as f64 - 1.0) * grid.cell;
            rem /= 3;
        }
        let cand = pos.offset(&delta);
        if grid.contains(&cand) {
            out.push(grid.snap(&cand));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlParams {
    pub noise: NoiseModel,
    pub mode: WeightMode,
    pub theta: f64,
    /// Floor on the plug-in distance from a candidate cell to the estimate.
    pub min_distance: f64,
}

/// The agent's belief about one target: its own information matrix and
/// position estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetBelief {
    pub info: DMatrix<f64>,
    pub p_hat: Position,
}

/// Everything one agent needs to pick its next cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlProblem {
    pub agent_id: usize,
    pub position: Position,
    pub beliefs: Vec<TargetBelief>,
    pub grid: MoveGrid,
    pub params: ControlParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlDecision {
    pub agent_id: usize,
    pub from: Position,
    pub chosen_pos: Position,
    pub old_volume: f64,
    pub new_volume: f64,
    /// Candidates in scan order with their volume (`None` = rejected, not PD).
    pub evaluated: Vec<(Position, Option<f64>)>,
    /// Set when the current information was not invertible and the agent stayed.
    pub singular: bool,
}

/// Information an agent at `pos` would add about a target believed at `p_hat`.
pub fn control_contribution(pos: &Position, p_hat: &Position, params: &ControlParams) -> Contribution {
    let row = if params.noise.is_noiseless() {
        build_row_noiseless(pos, 0.0)
    } else {
        let dist = pos.distance(p_hat).max(params.min_distance);
        build_row(pos, dist, params.noise.sigma_at(dist), dist, params.mode)
            .unwrap_or_else(|_| build_row_noiseless(pos, 0.0))
    };
    let mut c = Contribution::zero(row.a.len());
    c.matrix.ger(row.w_inv, &row.a, &row.a, 1.0);
    c
}

pub fn greedy_move(problem: &ControlProblem) -> Result<ControlDecision> {
    let m = problem.position.dim() + 1;
    let chi2 = chi2_quantile(m, problem.params.theta)?;
    let candidates = candidate_positions(&problem.position, &problem.grid);

    let stay = |singular: bool, old: f64| ControlDecision {
        agent_id: problem.agent_id,
        from: problem.position.clone(),
        chosen_pos: problem.position.clone(),
        old_volume: old,
        new_volume: old,
        evaluated: Vec::new(),
        singular,
    };

    let mut old_volume = 0.0;
    let mut reduced = Vec::with_capacity(problem.beliefs.len());
    for belief in &problem.beliefs {
        match log_volume_from_info(&belief.info, chi2) {
            Some(lv) => old_volume += lv.exp(),
            None => return Ok(stay(true, f64::INFINITY)),
        }
        let own = control_contribution(&problem.position, &belief.p_hat, &problem.params);
        reduced.push(&belief.info - &own.matrix);
    }

    let mut evaluated = Vec::with_capacity(candidates.len());
    let mut best: Option<(usize, f64)> = None;
    for (idx, cand) in candidates.iter().enumerate() {
        let volume = if *cand == problem.position {
            Some(old_volume)
        } else {
            let mut total = Some(0.0);
            for (belief, minus) in problem.beliefs.iter().zip(&reduced) {
                let add = control_contribution(cand, &belief.p_hat, &problem.params);
                let trial = minus + &add.matrix;
                total = match (total, log_volume_from_info(&trial, chi2)) {
                    (Some(acc), Some(lv)) => Some(acc + lv.exp()),
                    _ => None,
                };
            }
            total
        };
        if let Some(v) = volume {
            if best.is_none_or(|(_, bv)| v < bv) {
                best = Some((idx, v));
            }
        }
        evaluated.push((cand.clone(), volume));
    }

    let (idx, new_volume) = best.expect("staying is always a feasible candidate");
    Ok(ControlDecision {
        agent_id: problem.agent_id,
        from: problem.position.clone(),
        chosen_pos: candidates[idx].clone(),
        old_volume,
        new_volume,
        evaluated,
        singular: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerMode {
    /// One uniformly drawn agent estimates and moves per outer iteration.
    RandomSingle,
    /// Every agent, in id order, estimates and moves.
    SequentialAll,
}

/// Agent indices that get to move in one outer iteration, in order.
pub fn movers<R: Rng + ?Sized>(mode: SchedulerMode, world: &WorldState, rng: &mut R) -> Vec<usize> {
    let n = world.agents.len();
    if n == 0 {
        return Vec::new();
    }
    match mode {
        SchedulerMode::RandomSingle => vec![rng.random_range(0..n)],
        SchedulerMode::SequentialAll => {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by_key(|&i| world.agents[i].id);
            order
        }
    }
}

/// Runs one outer iteration: for each mover, `estimate_and_decide` runs the
/// estimation phase and returns the control decision, which is then applied
/// to the world (graphs rebuilt after each move).
pub fn scheduler_step<R, F>(
    world: &mut WorldState,
    mode: SchedulerMode,
    rng: &mut R,
    mut estimate_and_decide: F,
) -> Result<Vec<ControlDecision>>
where
    R: Rng + ?Sized,
    F: FnMut(&WorldState, usize) -> Result<ControlDecision>,
{
    let mut decisions = Vec::new();
    for i in movers(mode, world, rng) {
        let decision = estimate_and_decide(world, i)?;
        world.agents[i].pos = decision.chosen_pos.clone();
        world.rebuild_graphs();
        decisions.push(decision);
    }
    Ok(decisions)
}
