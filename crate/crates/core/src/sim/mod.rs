//! Scenario configuration, target motion and the Monte Carlo driver.

pub mod experiments;
pub mod motion;
pub mod rng;
pub mod scenario;
pub mod trial;

pub use motion::{step_target, MotionModel, TargetState};
pub use scenario::{ScenarioConfig, PRESETS};
pub use trial::{run_monte_carlo, run_trial, run_trial_observed, AgentEstimate, StepRecord, TrialTrace};
