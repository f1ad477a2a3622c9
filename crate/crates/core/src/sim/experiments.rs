//! Static single-target consensus studies: scheme comparison, variance
//! plateau and centeredness. Agents and target stay put; only the first
//! target is estimated. Every scheme sees the same measurement streams in a
//! given trial.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::consensus::{
    extract_estimate, normalized_info_error, normalized_vector_error, ConsensusNetwork, Contribution,
    SchemeKind,
};
use crate::error::{Error, Result};
use crate::sensing::measure_all;
use crate::world::WorldState;

use super::rng::agent_streams;
use super::scenario::ScenarioConfig;

/// Runs `rounds` rounds of `scheme` on a frozen world and calls `on_round`
/// after each with `(τ, network, contributions of that round)`.
pub fn static_rounds(
    cfg: &ScenarioConfig,
    world: &WorldState,
    trial: usize,
    scheme: SchemeKind,
    rounds: u32,
    mut on_round: impl FnMut(u32, &ConsensusNetwork, &[Contribution]) -> Result<()>,
) -> Result<()> {
    let n = world.agents.len();
    let m = world.dim() + 1;
    let target = world
        .targets
        .first()
        .ok_or_else(|| Error::InvalidArgument("study needs a target".into()))?;
    let policy = cfg.row_policy();
    let nm = cfg.noise_model();
    let mut streams = agent_streams(cfg.run.seed, trial as u64, n);
    let mut net = ConsensusNetwork::new(scheme, world.comm.clone(), world.dim());
    let mut contributions = vec![Contribution::zero(m); n];
    for tau in 1..=rounds {
        contributions.iter_mut().for_each(Contribution::clear);
        for meas in measure_all(world, &nm, &mut streams) {
            if meas.target_id != target.id {
                continue;
            }
            match policy.row(&meas, None, Some(&target.pos)) {
                Ok(row) => contributions[meas.agent_id].add_row(&row),
                Err(Error::DegenerateWeight { .. }) => {}
                Err(e) => return Err(e),
            }
        }
        net.round(&contributions);
        on_round(tau, &net, &contributions)?;
    }
    Ok(())
}

/// Normalized errors at the final round, pooled over trials (trial-major,
/// then agent). The reference is the centralized pair averaged over rounds,
/// `(1/T)Σ_τ Σ_j M_j(τ)` and `(1/T)Σ_τ Σ_j v_j(τ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusComparison {
    pub schemes: Vec<SchemeKind>,
    /// `[scheme]` → errors of `P`.
    pub info_errors: Vec<Vec<f64>>,
    /// `[scheme]` → errors of `z`.
    pub vector_errors: Vec<Vec<f64>>,
}

pub fn compare_consensus(cfg: &ScenarioConfig) -> Result<ConsensusComparison> {
    cfg.validate()?;
    let schemes = cfg.study.schemes.clone();
    let rounds = cfg.estimation.rounds;
    let per_trial: Vec<Vec<(Vec<f64>, Vec<f64>)>> = (0..cfg.run.trials)
        .into_par_iter()
        .map(|trial| {
            let world = cfg.initial_world(trial)?;
            let m = world.dim() + 1;
            schemes
                .iter()
                .map(|&scheme| {
                    let mut sum_m = DMatrix::zeros(m, m);
                    let mut sum_v = DVector::zeros(m);
                    let mut errors = (Vec::new(), Vec::new());
                    static_rounds(cfg, &world, trial, scheme, rounds, |tau, net, contribs| {
                        for c in contribs {
                            sum_m += &c.matrix;
                            sum_v += &c.vector;
                        }
                        if tau == rounds {
                            let p_ref = &sum_m / rounds as f64;
                            let z_ref = &sum_v / rounds as f64;
                            for st in net.states() {
                                errors.0.push(normalized_info_error(st, &p_ref)?);
                                errors.1.push(normalized_vector_error(st, &z_ref)?);
                            }
                        }
                        Ok(())
                    })?;
                    Ok(errors)
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let mut info_errors = vec![Vec::new(); schemes.len()];
    let mut vector_errors = vec![Vec::new(); schemes.len()];
    for trial in per_trial {
        for (s, (p, z)) in trial.into_iter().enumerate() {
            info_errors[s].extend(p);
            vector_errors[s].extend(z);
        }
    }
    Ok(ConsensusComparison {
        schemes,
        info_errors,
        vector_errors,
    })
}

/// Monte Carlo ensemble of lifted estimates `x̂_i(τ)`:
/// `samples[round][agent]` holds one vector per trial where the agent's
/// information was invertible, in trial order.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateEnsemble {
    pub scheme: SchemeKind,
    pub rounds: Vec<u32>,
    pub agents: Vec<usize>,
    pub samples: Vec<Vec<Vec<DVector<f64>>>>,
    /// True lifted unknown `[‖p‖², pᵀ]` of the first target.
    pub truth: DVector<f64>,
    pub trials: usize,
}

/// Records `x̂` of `agents` at each round in `rounds` for every trial.
pub fn collect_estimates(
    cfg: &ScenarioConfig,
    scheme: SchemeKind,
    rounds: &[u32],
    agents: &[usize],
) -> Result<EstimateEnsemble> {
    cfg.validate()?;
    if rounds.is_empty() || agents.is_empty() {
        return Err(Error::InvalidArgument("need at least one round and one agent".into()));
    }
    if let Some(&a) = agents.iter().find(|&&a| a >= cfg.agents.count) {
        return Err(Error::InvalidArgument(format!("agent {a} out of range")));
    }
    let last = *rounds.iter().max().unwrap();
    let per_trial: Vec<Vec<Vec<Option<DVector<f64>>>>> = (0..cfg.run.trials)
        .into_par_iter()
        .map(|trial| {
            let world = cfg.initial_world(trial)?;
            let mut out = vec![vec![None; agents.len()]; rounds.len()];
            static_rounds(cfg, &world, trial, scheme, last, |tau, net, _| {
                for (r, _) in rounds.iter().enumerate().filter(|(_, &r)| r == tau) {
                    for (a, &i) in agents.iter().enumerate() {
                        out[r][a] = extract_estimate(&net.states()[i]).ok().map(|e| e.x_hat);
                    }
                }
                Ok(())
            })?;
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let mut samples = vec![vec![Vec::new(); agents.len()]; rounds.len()];
    for trial in per_trial {
        for (r, row) in trial.into_iter().enumerate() {
            for (a, x) in row.into_iter().enumerate() {
                if let Some(x) = x {
                    samples[r][a].push(x);
                }
            }
        }
    }
    let p = &cfg.targets[0].start;
    let mut truth = vec![p.iter().map(|c| c * c).sum()];
    truth.extend_from_slice(p);
    Ok(EstimateEnsemble {
        scheme,
        rounds: rounds.to_vec(),
        agents: agents.to_vec(),
        samples,
        truth: DVector::from_vec(truth),
        trials: cfg.run.trials,
    })
}

/// Probe-agent estimates at every round `1..=T`, one ensemble per scheme.
pub fn variance_study(cfg: &ScenarioConfig) -> Result<Vec<EstimateEnsemble>> {
    let rounds: Vec<u32> = (1..=cfg.estimation.rounds).collect();
    cfg.study
        .schemes
        .iter()
        .map(|&s| collect_estimates(cfg, s, &rounds, &[cfg.study.probe_agent]))
        .collect()
}

/// Estimates of every agent at the configured checkpoints (those not
/// exceeding the round count) under the configured scheme.
pub fn centeredness_study(cfg: &ScenarioConfig) -> Result<EstimateEnsemble> {
    let rounds: Vec<u32> = cfg
        .study
        .checkpoints
        .iter()
        .copied()
        .filter(|&c| c <= cfg.estimation.rounds)
        .collect();
    let agents: Vec<usize> = (0..cfg.agents.count).collect();
    collect_estimates(cfg, cfg.estimation.scheme, &rounds, &agents)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small45() -> ScenarioConfig {
        let mut c = ScenarioConfig::preset("fig45").unwrap();
        c.agents.count = 20;
        c.run.trials = 3;
        c.estimation.rounds = 5;
        c
    }

    #[test]
    fn comparison_shapes_and_reproducibility() {
        let c = small45();
        let a = compare_consensus(&c).unwrap();
        assert_eq!(a.schemes.len(), 4);
        assert!(a.info_errors.iter().all(|e| e.len() == 60));
        assert!(a.vector_errors.iter().flatten().all(|e| e.is_finite() && *e >= 0.0));
        assert_eq!(a, compare_consensus(&c).unwrap());
    }

    #[test]
    fn noiseless_estimates_are_exact_after_one_round() {
        let mut c = small45();
        c.noise.beta_sigma = 0.0;
        let e = collect_estimates(&c, SchemeKind::IseeU, &[1, 3], &[0, 5, 19]).unwrap();
        for per_round in &e.samples {
            for per_agent in per_round {
                for x in per_agent {
                    assert!((x - &e.truth).norm() <= 1e-7 * e.truth.norm(), "{x}");
                }
            }
        }
    }

    #[test]
    fn ensemble_layout() {
        let mut c = ScenarioConfig::preset("fig8").unwrap();
        c.run.trials = 4;
        c.estimation.rounds = 6;
        let v = variance_study(&c).unwrap();
        assert_eq!(v.len(), 2);
        assert_eq!(v[0].rounds, vec![1, 2, 3, 4, 5, 6]);
        assert_eq!(v[0].samples.len(), 6);
        assert_eq!(v[0].samples[5][0].len(), 4);
        let cz = centeredness_study(&c).unwrap();
        assert_eq!(cz.rounds, vec![1, 5]);
        assert_eq!(cz.samples[0].len(), 50);
    }
}
