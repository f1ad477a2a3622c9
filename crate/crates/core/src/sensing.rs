//! Noisy range measurements with distance-proportional Gaussian noise.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::world::{Agent, Position, Target, WorldState};

/// `σ_i = β · ‖s_i − p‖ · σ̂`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub sigma_hat: f64,
    pub beta: f64,
}

impl NoiseModel {
    pub fn new(sigma_hat: f64, beta: f64) -> Self {
        NoiseModel { sigma_hat, beta }
    }

    /// Model parametrized by the dimensionless product `βσ̂` alone.
    pub fn proportional(beta_sigma: f64) -> Self {
        NoiseModel {
            sigma_hat: beta_sigma,
            beta: 1.0,
        }
    }

    pub fn noiseless() -> Self {
        NoiseModel::proportional(0.0)
    }

    /// The dimensionless product `βσ̂`.
    pub fn scale(&self) -> f64 {
        self.beta * self.sigma_hat
    }

    pub fn is_noiseless(&self) -> bool {
        self.scale() == 0.0
    }

    /// Standard deviation at a given agent/target distance.
    pub fn sigma_at(&self, distance: f64) -> f64 {
        self.scale() * distance
    }
}

pub fn sigma_of(agent_pos: &Position, target_pos: &Position, nm: &NoiseModel) -> f64 {
    nm.sigma_at(agent_pos.distance(target_pos))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub agent_id: usize,
    pub target_id: usize,
    /// Position of the measuring agent (known to it).
    pub agent_pos: Position,
    pub range: f64,
    /// Standard deviation the noise was drawn with.
    pub sigma: f64,
    pub t: usize,
    /// Set when the raw noisy range was negative and clamped to zero.
    pub clamped: bool,
}

/// Source of per-agent random streams. A single generator can serve every
/// agent; the simulator hands out one independent stream per agent.
pub trait NoiseSource {
    type Rng: Rng;
    fn rng_for(&mut self, agent_index: usize) -> &mut Self::Rng;
}

/// Adapter that serves every agent from one shared generator.
pub struct Shared<'a, R: Rng>(pub &'a mut R);

impl<R: Rng> NoiseSource for Shared<'_, R> {
    type Rng = R;
    fn rng_for(&mut self, _agent_index: usize) -> &mut R {
        self.0
    }
}

impl<R: Rng> NoiseSource for Vec<R> {
    type Rng = R;
    fn rng_for(&mut self, agent_index: usize) -> &mut R {
        &mut self[agent_index]
    }
}

pub fn measure<R: Rng + ?Sized>(
    agent: &Agent,
    target: &Target,
    nm: &NoiseModel,
    t: usize,
    rng: &mut R,
) -> Measurement {
    let dist = agent.pos.distance(&target.pos);
    let sigma = nm.sigma_at(dist);
    let raw = if sigma > 0.0 {
        let w: f64 = StandardNormal.sample(rng);
        dist + sigma * w
    } else {
        dist
    };
    Measurement {
        agent_id: agent.id,
        target_id: target.id,
        agent_pos: agent.pos.clone(),
        range: raw.max(0.0),
        sigma,
        t,
        clamped: raw < 0.0,
    }
}

/// One measurement per measurement-graph edge, in `(agent_id, target_id)`
/// order. `noise` is indexed by the agent's position in `world.agents`.
pub fn measure_all<S: NoiseSource>(
    world: &WorldState,
    nm: &NoiseModel,
    noise: &mut S,
) -> Vec<Measurement> {
    let mut order: Vec<usize> = (0..world.agents.len()).collect();
    order.sort_by_key(|&i| world.agents[i].id);
    let mut targets: Vec<&Target> = world.targets.iter().collect();
    targets.sort_by_key(|t| t.id);

    let mut out = Vec::with_capacity(world.meas.len());
    for i in order {
        let agent = &world.agents[i];
        for target in &targets {
            if world.meas.contains(agent.id, target.id) {
                out.push(measure(agent, target, nm, world.t, noise.rng_for(i)));
            }
        }
    }
    out
}

pub const MEASUREMENT_CSV_HEADER: &str = "t,agent_id,target_id,range,sigma";

/// Writes the replay log: `t,agent_id,target_id,range,sigma`.
pub fn write_measurement_log<W: Write>(out: &mut W, log: &[Measurement]) -> std::io::Result<()> {
    writeln!(out, "{MEASUREMENT_CSV_HEADER}")?;
    for m in log {
        writeln!(
            out,
            "{},{},{},{},{}",
            m.t, m.agent_id, m.target_id, m.range, m.sigma
        )?;
    }
    Ok(())
}
