//! Centralized maximum-likelihood refinement of a position estimate using
//! gradient descent with spectral (Barzilai-Borwein) step sizes and a
//! nonmonotone line search, optionally projected onto a box.

use std::collections::VecDeque;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sensing::{Measurement, NoiseModel};
use crate::world::Position;

/// Minimum distance to an anchor at which the range gradient is defined.
pub const SINGULAR_DISTANCE: f64 = 1e-9;
const DIVERGENCE_FACTOR: f64 = 1e6;
const ARMIJO: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    /// `Σ (‖s_i − p‖ − r_i)² / σ_i²`
    MlRange,
    /// `Σ (‖s_i − p‖² − r_i²)²`
    Srls,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub max_iters: usize,
    pub grad_tol: f64,
    /// Length of the first step.
    pub step_init: f64,
    pub step_min: f64,
    pub step_max: f64,
    /// Nonmonotone reference window.
    pub window: usize,
    pub cost_kind: CostKind,
    /// Optional `(lower, upper)` box every iterate is projected onto.
    pub bounds: Option<(Vec<f64>, Vec<f64>)>,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            max_iters: 200,
            grad_tol: 1e-9,
            step_init: 0.1,
            step_min: 1e-8,
            step_max: 1e8,
            window: 10,
            cost_kind: CostKind::MlRange,
            bounds: None,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.max_iters > 0
            && self.grad_tol > 0.0
            && self.step_init > 0.0
            && self.step_min > 0.0
            && self.step_min < self.step_max
            && self.step_max.is_finite()
            && self.window > 0;
        if !ok {
            return Err(Error::InvalidArgument(format!("invalid refine config {self:?}")));
        }
        if let Some((lo, hi)) = &self.bounds {
            if lo.len() != hi.len() || lo.iter().zip(hi).any(|(a, b)| a > b) {
                return Err(Error::InvalidArgument("refine bounds must satisfy lower ≤ upper".into()));
            }
        }
        Ok(())
    }
}

/// One range observation with the standard deviation used to weight it.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeObs {
    pub anchor: Position,
    pub range: f64,
    pub sigma: f64,
}

impl RangeObs {
    /// Weights from the measured range (`σ_i = βσ̂ r_i`); unit weights when
    /// the model is noiseless.
    pub fn from_measurements(ms: &[Measurement], nm: &NoiseModel) -> Vec<RangeObs> {
        ms.iter()
            .map(|m| {
                let sigma = if nm.is_noiseless() {
                    1.0
                } else {
                    nm.sigma_at(m.range).max(f64::MIN_POSITIVE.sqrt())
                };
                RangeObs {
                    anchor: m.agent_pos.clone(),
                    range: m.range,
                    sigma,
                }
            })
            .collect()
    }
}

pub fn ml_cost_and_grad(p: &Position, obs: &[RangeObs]) -> Result<(f64, DVector<f64>)> {
    let mut cost = 0.0;
    let mut grad = DVector::zeros(p.dim());
    for (i, o) in obs.iter().enumerate() {
        let diff = p.as_vector() - o.anchor.as_vector();
        let dist = diff.norm();
        if dist < SINGULAR_DISTANCE {
            return Err(Error::GradientSingularity { anchor: i, distance: dist });
        }
        let w = 1.0 / (o.sigma * o.sigma);
        let res = dist - o.range;
        cost += w * res * res;
        grad.axpy(2.0 * w * res / dist, &diff, 1.0);
    }
    Ok((cost, grad))
}

pub fn srls_cost_and_grad(p: &Position, obs: &[RangeObs]) -> (f64, DVector<f64>) {
    let mut cost = 0.0;
    let mut grad = DVector::zeros(p.dim());
    for o in obs {
        let diff = p.as_vector() - o.anchor.as_vector();
        let res = diff.norm_squared() - o.range * o.range;
        cost += res * res;
        grad.axpy(4.0 * res, &diff, 1.0);
    }
    (cost, grad)
}

fn cost_and_grad(kind: CostKind, p: &Position, obs: &[RangeObs]) -> Result<(f64, DVector<f64>)> {
    match kind {
        CostKind::MlRange => ml_cost_and_grad(p, obs),
        CostKind::Srls => Ok(srls_cost_and_grad(p, obs)),
    }
}

/// Clamps each coordinate into the box.
pub fn project(p: &DVector<f64>, bounds: Option<&(Vec<f64>, Vec<f64>)>) -> DVector<f64> {
    match bounds {
        None => p.clone(),
        Some((lo, hi)) => DVector::from_iterator(
            p.len(),
            p.iter().enumerate().map(|(k, &c)| c.clamp(lo[k], hi[k])),
        ),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineOutcome {
    pub position: Position,
    pub cost: f64,
    pub initial_cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Cost blew past the divergence guard; `position` is the best iterate.
    pub diverged: bool,
}

fn stationarity(x: &DVector<f64>, g: &DVector<f64>, bounds: Option<&(Vec<f64>, Vec<f64>)>) -> f64 {
    match bounds {
        None => g.norm(),
        Some(_) => (project(&(x - g), bounds) - x).norm(),
    }
}

pub fn refine_bb(p0: &Position, obs: &[RangeObs], cfg: &RefineConfig) -> Result<RefineOutcome> {
    cfg.validate()?;
    if !p0.is_finite() {
        return Err(Error::InvalidArgument("initial point must be finite".into()));
    }
    let bounds = cfg.bounds.as_ref();
    let mut x = project(p0.as_vector(), bounds);
    let (mut f, mut g) = cost_and_grad(cfg.cost_kind, &Position::from_vector(x.clone()), obs)?;
    let initial_cost = f;
    let mut best = (x.clone(), f);
    let mut history: VecDeque<f64> = VecDeque::from([f]);
    let mut alpha = (cfg.step_init / g.norm().max(f64::MIN_POSITIVE)).clamp(cfg.step_min, cfg.step_max);
    let mut iterations = 0;
    let mut converged = stationarity(&x, &g, bounds) <= cfg.grad_tol;
    let mut diverged = false;

    while !converged && iterations < cfg.max_iters {
        iterations += 1;
        let f_ref = history.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut step = alpha;
        let accepted = loop {
            let x_new = project(&(&x - &g * step), bounds);
            let d = &x_new - &x;
            if d.norm() == 0.0 {
                break None;
            }
            if let Ok((f_new, g_new)) =
                cost_and_grad(cfg.cost_kind, &Position::from_vector(x_new.clone()), obs)
            {
                if f_new <= f_ref + ARMIJO * g.dot(&d) {
                    break Some((x_new, f_new, g_new));
                }
            }
            step *= 0.5;
            if step < cfg.step_min {
                break None;
            }
        };
        let Some((x_new, f_new, g_new)) = accepted else {
            break;
        };

        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        alpha = if sy > 0.0 {
            (s.dot(&s) / sy).clamp(cfg.step_min, cfg.step_max)
        } else {
            cfg.step_max
        };
        x = x_new;
        f = f_new;
        g = g_new;
        if f < best.1 {
            best = (x.clone(), f);
        }
        history.push_back(f);
        if history.len() > cfg.window {
            history.pop_front();
        }
        if f > DIVERGENCE_FACTOR * initial_cost.max(f64::MIN_POSITIVE) {
            diverged = true;
            break;
        }
        converged = stationarity(&x, &g, bounds) <= cfg.grad_tol;
    }

    Ok(RefineOutcome {
        position: Position::from_vector(best.0),
        cost: best.1,
        initial_cost,
        iterations,
        converged,
        diverged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn exact_obs(anchors: &[(f64, f64)], p: &Position) -> Vec<RangeObs> {
        anchors
            .iter()
            .map(|&(x, y)| {
                let a = Position::xy(x, y);
                RangeObs { range: a.distance(p), anchor: a, sigma: 1.0 }
            })
            .collect()
    }

    #[test]
    fn hand_evaluated_cost_and_gradient() {
        let obs = vec![RangeObs { anchor: Position::xy(0.0, 0.0), range: 5.0, sigma: 1.0 }];
        let (c, g) = ml_cost_and_grad(&Position::xy(10.0, 0.0), &obs).unwrap();
        assert_eq!(c, 25.0);
        assert_eq!(g.as_slice(), &[10.0, 0.0]);
    }

    #[test]
    fn minimum_at_truth() {
        let p = Position::xy(2.0, 3.0);
        let obs = exact_obs(&[(0.0, 0.0), (10.0, 0.0), (0.0, 10.0)], &p);
        let (c, g) = ml_cost_and_grad(&p, &obs).unwrap();
        assert!(c < 1e-28);
        assert!(g.norm() < 1e-13);
    }

    #[test]
    fn singular_at_anchor() {
        let obs = vec![RangeObs { anchor: Position::xy(1.0, 1.0), range: 1.0, sigma: 1.0 }];
        assert!(matches!(
            ml_cost_and_grad(&Position::xy(1.0, 1.0), &obs),
            Err(Error::GradientSingularity { anchor: 0, .. })
        ));
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let obs: Vec<RangeObs> = (0..5)
            .map(|_| RangeObs {
                anchor: Position::xy(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)),
                range: rng.random_range(1.0..12.0),
                sigma: rng.random_range(0.1..2.0),
            })
            .collect();
        let h = 1e-6;
        for _ in 0..50 {
            let p = Position::xy(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
            let (_, g) = srls_cost_and_grad(&p, &obs);
            for k in 0..2 {
                let mut e = [0.0; 2];
                e[k] = h;
                let fp = srls_cost_and_grad(&p.offset(&e), &obs).0;
                e[k] = -h;
                let fm = srls_cost_and_grad(&p.offset(&e), &obs).0;
                let fd = (fp - fm) / (2.0 * h);
                assert!((fd - g[k]).abs() <= 1e-5 * g.norm().max(1.0));
            }
        }
    }

    #[test]
    fn converges_from_perturbed_start() {
        let p = Position::xy(6.3, 4.1);
        let obs = exact_obs(&[(0.0, 0.0), (10.0, 0.0), (0.0, 10.0), (10.0, 10.0)], &p);
        let out = refine_bb(&Position::xy(6.8, 3.6), &obs, &RefineConfig::default()).unwrap();
        assert!(out.position.distance(&p) < 1e-6, "{:?}", out);
        assert!(out.iterations < 100);
        assert!(out.converged);
    }

    #[test]
    fn exact_start_returns_immediately() {
        let p = Position::xy(6.0, 4.0);
        let obs = exact_obs(&[(0.0, 0.0), (10.0, 0.0), (0.0, 10.0), (10.0, 10.0)], &p);
        let out = refine_bb(&p, &obs, &RefineConfig::default()).unwrap();
        assert_eq!(out.iterations, 0);
        assert_eq!(out.position, p);
    }

    #[test]
    fn projection_is_idempotent_and_respected() {
        let b = (vec![0.0, 0.0], vec![5.0, 5.0]);
        let v = DVector::from_vec(vec![-1.0, 7.0]);
        let once = project(&v, Some(&b));
        assert_eq!(project(&once, Some(&b)), once);
        assert_eq!(once.as_slice(), &[0.0, 5.0]);

        let p = Position::xy(8.0, 2.0);
        let obs = exact_obs(&[(0.0, 0.0), (10.0, 0.0), (0.0, 10.0)], &p);
        let cfg = RefineConfig { bounds: Some(b), ..RefineConfig::default() };
        let out = refine_bb(&Position::xy(3.0, 3.0), &obs, &cfg).unwrap();
        let c = out.position.coords();
        assert!((0.0..=5.0).contains(&c[0]) && (0.0..=5.0).contains(&c[1]));
        assert!((c[0] - 5.0).abs() < 1e-6);
    }

    #[test]
    fn srls_refinement() {
        let p = Position::xy(6.3, 4.1);
        let obs = exact_obs(&[(0.0, 0.0), (10.0, 0.0), (0.0, 10.0), (10.0, 10.0)], &p);
        let cfg = RefineConfig { cost_kind: CostKind::Srls, grad_tol: 1e-8, max_iters: 500, ..RefineConfig::default() };
        let out = refine_bb(&Position::xy(5.0, 5.0), &obs, &cfg).unwrap();
        assert!(out.position.distance(&p) < 1e-6);
    }

    #[test]
    fn bad_config_rejected() {
        let cfg = RefineConfig { step_min: 1.0, step_max: 0.5, ..RefineConfig::default() };
        assert!(refine_bb(&Position::xy(0.0, 0.0), &[], &cfg).is_err());
    }
}
