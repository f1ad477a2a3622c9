//! Target motion models.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::Position;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MotionModel {
    Static,
    /// `p(t) = p(t−1) + velocity` (one time unit per iteration).
    Linear { velocity: Vec<f64> },
    /// Clockwise spiral in the plane, advanced by the increments of the
    /// waypoint curve `W(t) = R(t)·[cos(π − φ(t)), sin(π − φ(t))] + c`,
    /// where `φ` accumulates `speed / R(t)` per step and `R` is multiplied
    /// by `decay` every `decay_period` steps. Gaussian process noise
    /// `Λ q(t)`, `q ~ N(0, q_var I₂)`, is added to the 4-dim state.
    Spiral {
        speed: f64,
        radius0: f64,
        #[serde(default = "default_decay")]
        decay: f64,
        #[serde(default = "default_decay_period")]
        decay_period: usize,
        center: Vec<f64>,
        #[serde(default)]
        q_var: f64,
        /// 4×2 rows; defaults to `[I₂; 0]`.
        #[serde(default)]
        noise_gain: Option<Vec<Vec<f64>>>,
    },
    /// Position at step `t` is `waypoints[t]`, holding the last one.
    Scripted { waypoints: Vec<Vec<f64>> },
}

fn default_decay() -> f64 {
    0.97
}

fn default_decay_period() -> usize {
    10
}

/// Position and velocity of a target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetState {
    pub p: Position,
    pub v: Vec<f64>,
}

impl TargetState {
    pub fn at_rest(p: Position) -> Self {
        let d = p.dim();
        TargetState { p, v: vec![0.0; d] }
    }
}

impl MotionModel {
    pub fn validate(&self, dim: usize, field: &str) -> Result<()> {
        let bad = |msg: &str| Err(Error::config(field, msg));
        match self {
            MotionModel::Static => Ok(()),
            MotionModel::Linear { velocity } => {
                if velocity.len() != dim || velocity.iter().any(|v| !v.is_finite()) {
                    return bad("velocity must be finite with one entry per dimension");
                }
                Ok(())
            }
            MotionModel::Spiral {
                speed,
                radius0,
                decay,
                decay_period,
                center,
                q_var,
                noise_gain,
            } => {
                if dim != 2 {
                    return bad("spiral motion is planar (dim = 2)");
                }
                if !(*speed >= 0.0 && speed.is_finite()) {
                    return bad("speed must be ≥ 0");
                }
                if !(*radius0 > 0.0 && radius0.is_finite()) {
                    return bad("radius0 must be > 0");
                }
                if !(*decay > 0.0 && *decay <= 1.0) {
                    return bad("decay must lie in (0, 1]");
                }
                if *decay_period == 0 {
                    return bad("decay_period must be ≥ 1");
                }
                if center.len() != 2 {
                    return bad("center must have two coordinates");
                }
                if !(*q_var >= 0.0 && q_var.is_finite()) {
                    return bad("q_var must be ≥ 0");
                }
                if let Some(g) = noise_gain {
                    if g.len() != 4 || g.iter().any(|r| r.len() != 2) {
                        return bad("noise_gain must be 4×2");
                    }
                }
                Ok(())
            }
            MotionModel::Scripted { waypoints } => {
                if waypoints.is_empty() || waypoints.iter().any(|w| w.len() != dim) {
                    return bad("waypoints must be non-empty with one entry per dimension");
                }
                Ok(())
            }
        }
    }
}

/// Spiral radius after `t` steps.
pub fn spiral_radius(radius0: f64, decay: f64, decay_period: usize, t: usize) -> f64 {
    radius0 * decay.powi((t / decay_period) as i32)
}

fn spiral_waypoint(
    speed: f64,
    radius0: f64,
    decay: f64,
    decay_period: usize,
    center: &[f64],
    t: usize,
) -> [f64; 2] {
    let phase: f64 = (1..=t)
        .map(|u| speed / spiral_radius(radius0, decay, decay_period, u))
        .sum();
    let r = spiral_radius(radius0, decay, decay_period, t);
    let angle = std::f64::consts::PI - phase;
    [r * angle.cos() + center[0], r * angle.sin() + center[1]]
}

/// Advances a target from step `t − 1` to step `t` (`t ≥ 1`).
pub fn step_target<R: Rng + ?Sized>(
    state: &TargetState,
    model: &MotionModel,
    t: usize,
    rng: &mut R,
) -> TargetState {
    match model {
        MotionModel::Static => state.clone(),
        MotionModel::Linear { velocity } => TargetState {
            p: state.p.offset(velocity),
            v: velocity.clone(),
        },
        MotionModel::Spiral {
            speed,
            radius0,
            decay,
            decay_period,
            center,
            q_var,
            noise_gain,
        } => {
            let now = spiral_waypoint(*speed, *radius0, *decay, *decay_period, center, t);
            let before = spiral_waypoint(*speed, *radius0, *decay, *decay_period, center, t.saturating_sub(1));
            let mut x = DVector::from_vec(vec![
                state.p.coords()[0] + now[0] - before[0],
                state.p.coords()[1] + now[1] - before[1],
                state.v[0],
                state.v[1],
            ]);
            if *q_var > 0.0 {
                let sd = q_var.sqrt();
                let q = DVector::from_fn(2, |_, _| {
                    let w: f64 = StandardNormal.sample(rng);
                    sd * w
                });
                let gain = match noise_gain {
                    Some(rows) => DMatrix::from_fn(4, 2, |i, j| rows[i][j]),
                    None => DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]),
                };
                x += gain * q;
            }
            TargetState {
                p: Position::xy(x[0], x[1]),
                v: vec![x[2], x[3]],
            }
        }
        MotionModel::Scripted { waypoints } => {
            let w = &waypoints[t.min(waypoints.len() - 1)];
            TargetState {
                p: Position::new(w.clone()),
                v: state.v.clone(),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spiral(decay: f64, q_var: f64) -> MotionModel {
        MotionModel::Spiral {
            speed: 0.7,
            radius0: 20.0,
            decay,
            decay_period: 10,
            center: vec![20.0, 0.0],
            q_var,
            noise_gain: None,
        }
    }

    fn run(model: &MotionModel, steps: usize, seed: u64) -> Vec<TargetState> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = TargetState::at_rest(Position::xy(50.0, 0.0));
        let mut out = vec![s.clone()];
        for t in 1..=steps {
            s = step_target(&s, model, t, &mut rng);
            out.push(s.clone());
        }
        out
    }

    #[test]
    fn static_never_moves() {
        let traj = run(&MotionModel::Static, 50, 0);
        assert!(traj.iter().all(|s| s.p == Position::xy(50.0, 0.0)));
    }

    #[test]
    fn radius_schedule() {
        for k in 0..10 {
            let r = spiral_radius(20.0, 0.97, 10, 10 * k);
            assert!((r - 20.0 * 0.97f64.powi(k as i32)).abs() < 1e-12);
            assert_eq!(spiral_radius(20.0, 0.97, 10, 10 * k + 9), r);
        }
    }

    #[test]
    fn noiseless_spiral_is_reproducible_and_on_curve() {
        let m = spiral(0.97, 0.0);
        let a = run(&m, 150, 1);
        let b = run(&m, 150, 2);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.p.coords()[0].to_bits(), y.p.coords()[0].to_bits());
        }
        // start offset W(0) = (0,0) for c = (20,0), so the curve is p0 + W(t)
        for (t, s) in a.iter().enumerate() {
            let w = spiral_waypoint(0.7, 20.0, 0.97, 10, &[20.0, 0.0], t);
            assert!((s.p.coords()[0] - 50.0 - w[0]).abs() < 1e-9);
            assert!((s.p.coords()[1] - w[1]).abs() < 1e-9);
        }
        // spiral center sits at p0 + c = (70, 0)
        let r0 = a[0].p.distance(&Position::xy(70.0, 0.0));
        assert!((r0 - 20.0).abs() < 1e-12);
        // clockwise: first move goes up-left of the leftmost point → y increases
        assert!(a[1].p.coords()[1] > 0.0);
    }

    #[test]
    fn step_length_matches_speed() {
        let a = run(&spiral(1.0, 0.0), 20, 0);
        for w in a.windows(2) {
            let step = w[0].p.distance(&w[1].p);
            assert!((step - 0.7).abs() < 0.01, "{step}");
        }
    }

    #[test]
    fn undecayed_spiral_stays_bounded() {
        let a = run(&spiral(1.0, 0.0), 1000, 0);
        let c = Position::xy(70.0, 0.0);
        assert!(a.iter().all(|s| (s.p.distance(&c) - 20.0).abs() < 1e-6));
    }

    #[test]
    fn noisy_spiral_depends_on_seed() {
        let m = spiral(0.97, 1e-5);
        assert_ne!(run(&m, 30, 1), run(&m, 30, 2));
        assert_eq!(run(&m, 30, 1), run(&m, 30, 1));
    }

    #[test]
    fn linear_and_scripted() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = TargetState::at_rest(Position::xy(0.0, 0.0));
        let lin = MotionModel::Linear { velocity: vec![1.0, -0.5] };
        let s1 = step_target(&s, &lin, 1, &mut rng);
        assert_eq!(s1.p, Position::xy(1.0, -0.5));
        let scr = MotionModel::Scripted { waypoints: vec![vec![0.0, 0.0], vec![3.0, 3.0]] };
        assert_eq!(step_target(&s, &scr, 1, &mut rng).p, Position::xy(3.0, 3.0));
        assert_eq!(step_target(&s, &scr, 9, &mut rng).p, Position::xy(3.0, 3.0));
    }

    #[test]
    fn validation() {
        assert!(spiral(0.97, 1e-5).validate(2, "m").is_ok());
        assert!(spiral(0.97, 1e-5).validate(3, "m").is_err());
        assert!(spiral(1.5, 0.0).validate(2, "m").is_err());
        assert!(MotionModel::Scripted { waypoints: vec![] }.validate(2, "m").is_err());
    }
}
