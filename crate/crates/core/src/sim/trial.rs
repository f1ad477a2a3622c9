//! The outer estimate → control loop and the Monte Carlo harness.

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::consensus::{
    extract_estimate, round_messages, ConsensusMessage, ConsensusNetwork, Contribution,
};
use crate::control::{
    chi2_quantile, greedy_move, log_volume_from_info, movers, ControlDecision, ControlProblem,
    TargetBelief,
};
use crate::error::{Error, Result};
use crate::refine::{refine_bb, RangeObs, RefineConfig};
use crate::sensing::{measure_all, Measurement};
use crate::world::{Position, WorldState};

use super::motion::{step_target, TargetState};
use super::rng::{agent_streams, stream, StreamRole};
use super::scenario::ScenarioConfig;

/// One agent's belief about one target after an estimation phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentEstimate {
    pub p_hat: Position,
    /// Covariance of the lifted estimate, row-major `m×m`.
    pub cov: Vec<f64>,
    /// Confidence-ellipsoid volume at the configured θ.
    pub volume: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refined: Option<Position>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refined_projected: Option<Position>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepFlags {
    /// Agent/target pairs whose information was not invertible.
    pub singular: usize,
    /// Measurements clamped at zero.
    pub clamped: usize,
    /// Measurements dropped because their weight was undefined.
    pub degenerate_rows: usize,
    /// The communication graph was disconnected during some phase.
    pub disconnected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    /// Agent positions at the end of the iteration.
    pub agents: Vec<Position>,
    pub targets: Vec<Position>,
    /// `[target][agent]`; `None` where the information was singular.
    pub estimates: Vec<Vec<Option<AgentEstimate>>>,
    pub decisions: Vec<ControlDecision>,
    /// Range measurements taken during the iteration.
    pub measurements: usize,
    pub flags: StepFlags,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialTrace {
    pub trial: usize,
    pub steps: Vec<StepRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub measurement_log: Vec<Measurement>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub message_log: Vec<ConsensusMessage>,
}

/// Hooks into a running trial.
pub trait TrialObserver {
    fn on_control(&mut self, _world: &WorldState, _problem: &ControlProblem, _decision: &ControlDecision) {}
}

pub struct NoObserver;

impl TrialObserver for NoObserver {}

pub struct PhaseOutput {
    pub networks: Vec<ConsensusNetwork>,
    /// Measurements of the final round.
    pub last_round: Vec<Measurement>,
}

struct TrialState<'a> {
    cfg: &'a ScenarioConfig,
    streams: Vec<ChaCha8Rng>,
    priors: Vec<Vec<Option<Position>>>,
    chi2: f64,
    measurement_log: Vec<Measurement>,
    message_log: Vec<ConsensusMessage>,
}

/// Runs `cfg.estimation.rounds` rounds with fresh measurements on the
/// frozen world, one network per target. `priors[k][i]` is agent `i`'s
/// previous estimate of target `k`. Agent ids must equal their index.
pub fn estimation_phase<S: crate::sensing::NoiseSource>(
    cfg: &ScenarioConfig,
    world: &WorldState,
    priors: &[Vec<Option<Position>>],
    noise: &mut S,
    flags: &mut StepFlags,
    mut on_round: impl FnMut(&[Measurement], &[ConsensusNetwork], &[Vec<Contribution>]),
) -> Result<PhaseOutput> {
    let n = world.agents.len();
    let m = world.dim() + 1;
    let policy = cfg.row_policy();
    let mut networks: Vec<ConsensusNetwork> = world
        .targets
        .iter()
        .map(|_| ConsensusNetwork::new(cfg.estimation.scheme, world.comm.clone(), world.dim()))
        .collect();
    let mut contributions = vec![vec![Contribution::zero(m); n]; world.targets.len()];
    let mut last_round = Vec::new();
    for _ in 0..cfg.estimation.rounds {
        let ms = measure_all(world, &cfg.noise_model(), noise);
        for per_target in contributions.iter_mut() {
            per_target.iter_mut().for_each(Contribution::clear);
        }
        for meas in &ms {
            flags.clamped += meas.clamped as usize;
            let i = meas.agent_id;
            let k = meas.target_id;
            let truth = &world.targets[k].pos;
            match policy.row(meas, priors[k][i].as_ref(), Some(truth)) {
                Ok(row) => contributions[k][i].add_row(&row),
                Err(Error::DegenerateWeight { .. }) => flags.degenerate_rows += 1,
                Err(e) => return Err(e),
            }
        }
        on_round(&ms, &networks, &contributions);
        for (net, c) in networks.iter_mut().zip(&contributions) {
            net.round(c);
        }
        last_round = ms;
    }
    Ok(PhaseOutput { networks, last_round })
}

impl TrialState<'_> {
    fn run_phase(&mut self, world: &WorldState, flags: &mut StepFlags) -> Result<PhaseOutput> {
        let log_meas = self.cfg.logging.measurements;
        let log_msgs = self.cfg.logging.messages;
        let measurement_log = &mut self.measurement_log;
        let message_log = &mut self.message_log;
        let out = estimation_phase(
            self.cfg,
            world,
            &self.priors,
            &mut self.streams,
            flags,
            |ms, nets, contribs| {
                if log_meas {
                    measurement_log.extend_from_slice(ms);
                }
                if log_msgs {
                    for (net, c) in nets.iter().zip(contribs) {
                        message_log.extend(round_messages(net.graph(), net.states(), c));
                    }
                }
            },
        )?;
        if !crate::world::is_connected(&world.comm) {
            flags.disconnected = true;
        }
        Ok(out)
    }

    /// Per-target, per-agent estimates; updates the priors.
    fn estimates(
        &mut self,
        world: &WorldState,
        phase: &PhaseOutput,
        flags: &mut StepFlags,
    ) -> Vec<Vec<Option<AgentEstimate>>> {
        let mut out = Vec::with_capacity(phase.networks.len());
        for (k, net) in phase.networks.iter().enumerate() {
            let mut row = Vec::with_capacity(net.states().len());
            for (i, st) in net.states().iter().enumerate() {
                let est = extract_estimate(st).ok().and_then(|e| {
                    let volume = log_volume_from_info(&st.info, self.chi2)?.exp();
                    Some(AgentEstimate {
                        p_hat: e.p_hat,
                        cov: e.cov.transpose().as_slice().to_vec(),
                        volume,
                        refined: None,
                        refined_projected: None,
                    })
                });
                match &est {
                    Some(e) => self.priors[k][i] = Some(e.p_hat.clone()),
                    None => flags.singular += 1,
                }
                row.push(est);
            }
            out.push(row);
        }
        if let Some(rcfg) = &self.cfg.refine {
            self.refine_all(world, &phase.last_round, rcfg, &mut out);
        }
        out
    }

    fn refine_all(
        &self,
        world: &WorldState,
        last_round: &[Measurement],
        rcfg: &RefineConfig,
        estimates: &mut [Vec<Option<AgentEstimate>>],
    ) {
        let nm = self.cfg.noise_model();
        let projected = RefineConfig {
            bounds: Some((self.cfg.area.lower.clone(), self.cfg.area.upper.clone())),
            ..rcfg.clone()
        };
        for (k, row) in estimates.iter_mut().enumerate() {
            let id = world.targets[k].id;
            let ms: Vec<Measurement> = last_round.iter().filter(|m| m.target_id == id).cloned().collect();
            let obs = RangeObs::from_measurements(&ms, &nm);
            if obs.is_empty() {
                continue;
            }
            for est in row.iter_mut().flatten() {
                est.refined = refine_bb(&est.p_hat, &obs, rcfg).ok().map(|o| o.position);
                est.refined_projected = refine_bb(&est.p_hat, &obs, &projected).ok().map(|o| o.position);
            }
        }
    }
}

fn stay(world: &WorldState, i: usize) -> ControlDecision {
    let pos = world.agents[i].pos.clone();
    ControlDecision {
        agent_id: world.agents[i].id,
        from: pos.clone(),
        chosen_pos: pos,
        old_volume: f64::INFINITY,
        new_volume: f64::INFINITY,
        evaluated: Vec::new(),
        singular: true,
    }
}

pub fn run_trial(cfg: &ScenarioConfig, trial: usize) -> Result<TrialTrace> {
    run_trial_observed(cfg, trial, &mut NoObserver)
}

pub fn run_trial_observed<O: TrialObserver>(
    cfg: &ScenarioConfig,
    trial: usize,
    observer: &mut O,
) -> Result<TrialTrace> {
    cfg.validate()?;
    let mut world = cfg.initial_world(trial)?;
    let n = world.agents.len();
    let seed = cfg.run.seed;
    let mut targets: Vec<TargetState> = cfg.initial_targets();
    let mut motion_rngs: Vec<ChaCha8Rng> = (0..targets.len())
        .map(|k| stream(seed, trial as u64, StreamRole::TargetMotion, k as u64))
        .collect();
    let mut sched_rng = stream(seed, trial as u64, StreamRole::Scheduler, 0);
    let grid = cfg.grid();
    let params = cfg.control_params();

    let mut st = TrialState {
        cfg,
        streams: agent_streams(seed, trial as u64, n),
        priors: vec![vec![None; n]; targets.len()],
        chi2: chi2_quantile(world.dim() + 1, cfg.control.theta)?,
        measurement_log: Vec::new(),
        message_log: Vec::new(),
    };

    let mut steps = Vec::with_capacity(cfg.run.iterations);
    for t in 1..=cfg.run.iterations {
        for (k, s) in targets.iter_mut().enumerate() {
            *s = step_target(s, &cfg.targets[k].motion, t, &mut motion_rngs[k]);
            world.targets[k].pos = s.p.clone();
        }
        world.t = t;
        world.rebuild_graphs();

        let mut flags = StepFlags::default();
        let mut measurements = 0;
        let mut decisions = Vec::new();
        let estimates;
        if cfg.control.enabled {
            let order = movers(cfg.control.scheduler, &world, &mut sched_rng);
            let mut last = None;
            for i in order {
                let phase = st.run_phase(&world, &mut flags)?;
                measurements += phase.last_round.len() * cfg.estimation.rounds as usize;
                let est = st.estimates(&world, &phase, &mut flags);
                let beliefs: Option<Vec<TargetBelief>> = phase
                    .networks
                    .iter()
                    .zip(&est)
                    .map(|(net, e)| {
                        e[i].as_ref().map(|a| TargetBelief {
                            info: net.states()[i].info.clone(),
                            p_hat: a.p_hat.clone(),
                        })
                    })
                    .collect();
                let decision = match beliefs {
                    Some(beliefs) => {
                        let problem = ControlProblem {
                            agent_id: world.agents[i].id,
                            position: world.agents[i].pos.clone(),
                            beliefs,
                            grid: grid.clone(),
                            params,
                        };
                        let d = greedy_move(&problem)?;
                        observer.on_control(&world, &problem, &d);
                        d
                    }
                    None => stay(&world, i),
                };
                world.agents[i].pos = decision.chosen_pos.clone();
                world.rebuild_graphs();
                decisions.push(decision);
                last = Some(est);
            }
            estimates = last.unwrap_or_default();
        } else {
            let phase = st.run_phase(&world, &mut flags)?;
            measurements += phase.last_round.len() * cfg.estimation.rounds as usize;
            estimates = st.estimates(&world, &phase, &mut flags);
        }

        steps.push(StepRecord {
            t,
            agents: world.agents.iter().map(|a| a.pos.clone()).collect(),
            targets: world.targets.iter().map(|x| x.pos.clone()).collect(),
            estimates,
            decisions,
            measurements,
            flags,
        });
    }
    Ok(TrialTrace {
        trial,
        steps,
        measurement_log: st.measurement_log,
        message_log: st.message_log,
    })
}

/// All trials of a scenario, in trial order. Runs on the current rayon pool.
pub fn run_monte_carlo(cfg: &ScenarioConfig) -> Result<Vec<TrialTrace>> {
    cfg.validate()?;
    (0..cfg.run.trials)
        .into_par_iter()
        .map(|k| run_trial(cfg, k))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::scenario::{CommRange, Placement};

    fn small() -> ScenarioConfig {
        let mut c = ScenarioConfig::preset("fig3").unwrap();
        c.run.iterations = 15;
        c.run.trials = 3;
        c
    }

    #[test]
    fn trace_shape_and_bounds() {
        let c = small();
        let tr = run_trial(&c, 0).unwrap();
        assert_eq!(tr.steps.len(), 15);
        let grid = c.grid();
        for s in &tr.steps {
            assert_eq!(s.decisions.len(), 1);
            assert!(s.agents.iter().all(|p| grid.is_on_grid(p)));
            assert_eq!(s.estimates.len(), 1);
            assert_eq!(s.estimates[0].len(), 4);
            assert_eq!(s.measurements, 4 * 20);
            for d in &s.decisions {
                assert!(d.new_volume <= d.old_volume);
                assert!(d.from.distance(&d.chosen_pos) <= 2f64.sqrt() + 1e-12);
            }
        }
    }

    #[test]
    fn deterministic_and_order_independent() {
        let c = small();
        let all = run_monte_carlo(&c).unwrap();
        assert_eq!(all[2], run_trial(&c, 2).unwrap());
        assert_eq!(all[0], run_trial(&c, 0).unwrap());
        assert_ne!(all[0], all[1]);
        let mut one = c.clone();
        one.run.trials = 1;
        assert_eq!(run_monte_carlo(&one).unwrap()[0], all[0]);
    }

    #[test]
    fn single_agent_is_flagged_rank_deficient() {
        let mut c = small();
        c.agents.count = 1;
        c.agents.placement = Placement::Explicit { positions: vec![vec![0.0, 0.0]] };
        c.noise.beta_sigma = 0.0;
        c.run.iterations = 1;
        let tr = run_trial(&c, 0).unwrap();
        let s = &tr.steps[0];
        assert!(s.estimates[0][0].is_none());
        assert_eq!(s.flags.singular, 1);
        assert!(s.decisions[0].singular);
        assert_eq!(s.agents[0], Position::xy(0.0, 0.0));
    }

    #[test]
    fn noiseless_static_run_is_exact() {
        let mut c = small();
        c.noise.beta_sigma = 0.0;
        c.control.enabled = false;
        c.run.iterations = 2;
        let tr = run_trial(&c, 0).unwrap();
        let truth = Position::xy(7.5, 6.5);
        for e in tr.steps[1].estimates[0].iter() {
            assert!(e.as_ref().unwrap().p_hat.distance(&truth) < 1e-6);
        }
        assert!(tr.steps.iter().all(|s| s.decisions.is_empty()));
    }

    #[test]
    fn logs_are_collected_on_request() {
        let mut c = small();
        c.run.iterations = 1;
        c.estimation.rounds = 2;
        c.logging.measurements = true;
        c.logging.messages = true;
        c.agents.comm_range = CommRange::Absolute(100.0);
        let tr = run_trial(&c, 0).unwrap();
        assert_eq!(tr.measurement_log.len(), 8);
        // complete graph on 4 agents: 16 ordered pairs per round
        assert_eq!(tr.message_log.len(), 32);
    }

    #[test]
    fn refinement_fills_both_variants() {
        let mut c = ScenarioConfig::preset("fig2").unwrap();
        c.run.iterations = 3;
        let tr = run_trial(&c, 0).unwrap();
        let e = tr.steps[2].estimates[0][0].as_ref().unwrap();
        assert!(e.refined.is_some() && e.refined_projected.is_some());
        let p = e.refined_projected.as_ref().unwrap();
        assert!(c.grid().contains(p));
    }
}
