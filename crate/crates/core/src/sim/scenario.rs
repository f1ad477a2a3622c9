//! Declarative scenario files (TOML) and the shipped presets.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::consensus::SchemeKind;
use crate::control::{ControlParams, MoveGrid, SchedulerMode};
use crate::error::{Error, Result};
use crate::linmodel::{RowPolicy, WeightMode, WeightSource};
use crate::refine::RefineConfig;
use crate::sensing::NoiseModel;
use crate::world::{build_comm_graph, is_connected, Agent, Position, Target, WorldState};

use super::motion::{MotionModel, TargetState};
use super::rng::{stream, StreamRole};

const PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub area: AreaConfig,
    pub agents: AgentsConfig,
    pub noise: NoiseConfig,
    pub estimation: EstimationConfig,
    #[serde(default)]
    pub control: ControlConfig,
    pub run: RunConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refine: Option<RefineConfig>,
    #[serde(default)]
    pub study: StudyConfig,
    #[serde(default)]
    pub logging: LoggingConfig,
    pub targets: Vec<TargetConfig>,
}

/// Axis-aligned box with a square movement cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AreaConfig {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub cell: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentsConfig {
    pub count: usize,
    pub comm_range: CommRange,
    /// Sensing radius; every target is ranged when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fov_range: Option<f64>,
    pub placement: Placement,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommRange {
    /// Fraction of the area diagonal.
    DiagonalFraction(f64),
    /// Range chosen on the initial placement so the mean degree (without
    /// self loops) is as close as possible to this value.
    MeanDegree(f64),
    Absolute(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Placement {
    Explicit {
        positions: Vec<Vec<f64>>,
    },
    /// Uniform over the area (or a sub-box). With `seed` the layout is the
    /// same in every trial, otherwise each trial draws its own.
    Random {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
        #[serde(default)]
        on_grid: bool,
        #[serde(default)]
        require_connected: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        region: Option<Region>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    pub start: Vec<f64>,
    #[serde(default = "static_motion")]
    pub motion: MotionModel,
}

fn static_motion() -> MotionModel {
    MotionModel::Static
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    /// The product `βσ̂`.
    pub beta_sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimationConfig {
    #[serde(default = "default_scheme")]
    pub scheme: SchemeKind,
    #[serde(default = "default_weight_mode")]
    pub weight_mode: WeightMode,
    pub rounds: u32,
    #[serde(default = "default_weight_source")]
    pub weight_source: WeightSource,
    /// Floor on plug-in distances used for row weights.
    #[serde(default = "default_min_distance")]
    pub min_distance: f64,
}

fn default_scheme() -> SchemeKind {
    SchemeKind::IseeU
}

fn default_weight_mode() -> WeightMode {
    WeightMode::Unbiased
}

fn default_weight_source() -> WeightSource {
    WeightSource::Plugin
}

fn default_min_distance() -> f64 {
    1e-3
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlConfig {
    pub enabled: bool,
    pub scheduler: SchedulerMode,
    pub theta: f64,
}

impl Default for ControlConfig {
    fn default() -> Self {
        ControlConfig {
            enabled: true,
            scheduler: SchedulerMode::RandomSingle,
            theta: 0.95,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub iterations: usize,
    pub trials: usize,
    pub seed: u64,
}

/// Parameters of the static consensus studies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub schemes: Vec<SchemeKind>,
    pub probe_agent: usize,
    pub checkpoints: Vec<u32>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            schemes: SchemeKind::ALL.to_vec(),
            probe_agent: 0,
            checkpoints: vec![1, 5, 20],
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoggingConfig {
    pub measurements: bool,
    pub messages: bool,
}

pub const PRESETS: &[&str] = &["fig2", "fig3", "fig45", "fig8", "fig10-11"];

fn preset_source(name: &str) -> Option<&'static str> {
    Some(match name {
        "fig2" => include_str!("../../presets/fig2.toml"),
        "fig3" => include_str!("../../presets/fig3.toml"),
        "fig45" => include_str!("../../presets/fig45.toml"),
        "fig8" => include_str!("../../presets/fig8.toml"),
        "fig10-11" => include_str!("../../presets/fig10-11.toml"),
        _ => return None,
    })
}

impl ScenarioConfig {
    /// Parses and validates. `origin` is only used in error messages.
    pub fn from_toml_str(src: &str, origin: &Path) -> Result<Self> {
        let cfg: ScenarioConfig = toml::from_str(src).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            message: e.to_string().trim_end().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let src = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&src, path)
    }

    pub fn preset(name: &str) -> Result<Self> {
        let src = preset_source(name).ok_or_else(|| {
            Error::config(
                "preset",
                format!("unknown preset `{name}` (available: {})", PRESETS.join(", ")),
            )
        })?;
        Self::from_toml_str(src, Path::new(&format!("<preset {name}>")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn dim(&self) -> usize {
        self.area.lower.len()
    }

    pub fn grid(&self) -> MoveGrid {
        MoveGrid::new(self.area.cell, self.area.lower.clone(), self.area.upper.clone())
    }

    pub fn noise_model(&self) -> NoiseModel {
        NoiseModel::proportional(self.noise.beta_sigma)
    }

    pub fn row_policy(&self) -> RowPolicy {
        RowPolicy {
            mode: self.estimation.weight_mode,
            source: self.estimation.weight_source,
            noise: self.noise_model(),
            min_distance: self.estimation.min_distance,
        }
    }

    pub fn control_params(&self) -> ControlParams {
        ControlParams {
            noise: self.noise_model(),
            mode: self.estimation.weight_mode,
            theta: self.control.theta,
            min_distance: self.estimation.min_distance,
        }
    }

    pub fn diagonal(&self) -> f64 {
        self.area
            .lower
            .iter()
            .zip(&self.area.upper)
            .map(|(a, b)| (b - a).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |field: &str, msg: String| Err(Error::config(field, msg));
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());

        let dim = self.dim();
        if !(2..=3).contains(&dim) {
            return err("area.lower", format!("dimension must be 2 or 3, got {dim}"));
        }
        if self.area.upper.len() != dim {
            return err("area.upper", format!("expected {dim} coordinates"));
        }
        if !finite(&self.area.lower) || !finite(&self.area.upper) {
            return err("area", "bounds must be finite".into());
        }
        if self.area.lower.iter().zip(&self.area.upper).any(|(a, b)| a >= b) {
            return err("area.upper", "must exceed area.lower on every axis".into());
        }
        if !(self.area.cell > 0.0 && self.area.cell.is_finite()) {
            return err("area.cell", "must be > 0".into());
        }

        let grid = self.grid();
        if self.agents.count == 0 {
            return err("agents.count", "must be ≥ 1".into());
        }
        let range_value = match self.agents.comm_range {
            CommRange::DiagonalFraction(f) | CommRange::MeanDegree(f) | CommRange::Absolute(f) => f,
        };
        if !(range_value > 0.0 && range_value.is_finite()) {
            return err("agents.comm_range", "must be > 0".into());
        }
        if let Some(f) = self.agents.fov_range {
            if !(f > 0.0) {
                return err("agents.fov_range", "must be > 0".into());
            }
        }
        match &self.agents.placement {
            Placement::Explicit { positions } => {
                if positions.len() != self.agents.count {
                    return err(
                        "agents.placement.positions",
                        format!("{} positions for {} agents", positions.len(), self.agents.count),
                    );
                }
                for (i, p) in positions.iter().enumerate() {
                    let field = format!("agents.placement.positions[{i}]");
                    if p.len() != dim || !finite(p) {
                        return err(&field, format!("expected {dim} finite coordinates"));
                    }
                    let pos = Position::new(p.clone());
                    if !grid.contains(&pos) {
                        return err(&field, "outside the area".into());
                    }
                    if self.control.enabled && !grid.is_on_grid(&pos) {
                        return err(&field, "not on a grid node (required when control is enabled)".into());
                    }
                }
            }
            Placement::Random { region, .. } => {
                if let Some(r) = region {
                    let inside = r.lower.len() == dim
                        && r.upper.len() == dim
                        && r.lower.iter().zip(&r.upper).all(|(a, b)| a <= b)
                        && grid.contains(&Position::new(r.lower.clone()))
                        && grid.contains(&Position::new(r.upper.clone()));
                    if !inside {
                        return err("agents.placement.region", "must be a box inside the area".into());
                    }
                }
            }
        }

        if self.targets.is_empty() {
            return err("targets", "at least one target is required".into());
        }
        for (k, t) in self.targets.iter().enumerate() {
            if t.start.len() != dim || !finite(&t.start) {
                return err(&format!("targets[{k}].start"), format!("expected {dim} finite coordinates"));
            }
            t.motion.validate(dim, &format!("targets[{k}].motion"))?;
        }

        let b = self.noise.beta_sigma;
        if !(b >= 0.0 && b.is_finite()) {
            return err("noise.beta_sigma", "must be ≥ 0".into());
        }
        if self.estimation.rounds == 0 {
            return err("estimation.rounds", "must be ≥ 1".into());
        }
        let md = self.estimation.min_distance;
        if !(md > 0.0 && md.is_finite()) {
            return err("estimation.min_distance", "must be > 0".into());
        }
        let th = self.control.theta;
        if !(th > 0.0 && th < 1.0) {
            return err("control.theta", "must lie in (0, 1)".into());
        }
        if self.run.iterations == 0 {
            return err("run.iterations", "must be ≥ 1".into());
        }
        if self.run.trials == 0 {
            return err("run.trials", "must be ≥ 1".into());
        }
        if self.run.trials >= 1 << 32 || self.agents.count >= 1 << 24 || self.targets.len() >= 1 << 24 {
            return err("run.trials", "too many trials, agents or targets".into());
        }
        if let Some(r) = &self.refine {
            if r.bounds.is_some() {
                return err("refine.bounds", "the projected variant always uses the area bounds".into());
            }
            r.validate().map_err(|e| Error::config("refine", e.to_string()))?;
        }
        if self.study.schemes.is_empty() {
            return err("study.schemes", "must list at least one scheme".into());
        }
        if self.study.probe_agent >= self.agents.count {
            return err("study.probe_agent", format!("must be < agents.count ({})", self.agents.count));
        }
        if self.study.checkpoints.contains(&0) {
            return err("study.checkpoints", "rounds are counted from 1".into());
        }
        Ok(())
    }

    fn placement_rng(&self, trial: usize) -> ChaCha8Rng {
        match &self.agents.placement {
            Placement::Random { seed: Some(s), .. } => ChaCha8Rng::seed_from_u64(*s),
            _ => stream(self.run.seed, trial as u64, StreamRole::Placement, 0),
        }
    }

    fn draw_positions(&self, rng: &mut ChaCha8Rng) -> Vec<Position> {
        let Placement::Random { on_grid, region, .. } = &self.agents.placement else {
            unreachable!()
        };
        let (lo, hi) = match region {
            Some(r) => (r.lower.clone(), r.upper.clone()),
            None => (self.area.lower.clone(), self.area.upper.clone()),
        };
        let grid = self.grid();
        let mut out: Vec<Position> = Vec::with_capacity(self.agents.count);
        while out.len() < self.agents.count {
            let p = if *on_grid {
                let coords = lo
                    .iter()
                    .zip(&hi)
                    .zip(&self.area.lower)
                    .map(|((&a, &b), &base)| {
                        let k0 = ((a - base) / self.area.cell - 1e-9).ceil() as i64;
                        let k1 = ((b - base) / self.area.cell + 1e-9).floor() as i64;
                        base + rng.random_range(k0..=k1) as f64 * self.area.cell
                    })
                    .collect();
                let p = grid.snap(&Position::new(coords));
                if out.contains(&p) {
                    continue;
                }
                p
            } else {
                Position::new(lo.iter().zip(&hi).map(|(&a, &b)| rng.random_range(a..=b)).collect())
            };
            out.push(p);
        }
        out
    }

    /// Communication range for a given initial layout.
    pub fn comm_range_for(&self, positions: &[Position]) -> f64 {
        match self.agents.comm_range {
            CommRange::Absolute(r) => r,
            CommRange::DiagonalFraction(f) => f * self.diagonal(),
            CommRange::MeanDegree(deg) => {
                let n = positions.len();
                let mut d: Vec<f64> = Vec::with_capacity(n * (n - 1) / 2);
                for i in 0..n {
                    for j in i + 1..n {
                        d.push(positions[i].distance(&positions[j]));
                    }
                }
                if d.is_empty() {
                    return self.diagonal();
                }
                d.sort_by(f64::total_cmp);
                let edges = ((deg * n as f64 / 2.0).round() as usize).clamp(1, d.len());
                d[edges - 1]
            }
        }
    }

    /// Agents for a trial, with ids equal to their index.
    pub fn place_agents(&self, trial: usize) -> Result<Vec<Agent>> {
        let build = |positions: Vec<Position>| -> Vec<Agent> {
            let range = self.comm_range_for(&positions);
            positions
                .into_iter()
                .enumerate()
                .map(|(i, p)| {
                    let mut a = Agent::new(i, p, range);
                    if let Some(f) = self.agents.fov_range {
                        a.fov_range = f;
                    }
                    a
                })
                .collect()
        };
        match &self.agents.placement {
            Placement::Explicit { positions } => Ok(build(
                positions.iter().map(|p| Position::new(p.clone())).collect(),
            )),
            Placement::Random { require_connected, .. } => {
                let mut rng = self.placement_rng(trial);
                for _ in 0..PLACEMENT_ATTEMPTS {
                    let agents = build(self.draw_positions(&mut rng));
                    if !require_connected || is_connected(&build_comm_graph(&agents)) {
                        return Ok(agents);
                    }
                }
                Err(Error::InvalidArgument(format!(
                    "no connected placement after {PLACEMENT_ATTEMPTS} draws"
                )))
            }
        }
    }

    pub fn initial_targets(&self) -> Vec<TargetState> {
        self.targets
            .iter()
            .map(|t| TargetState::at_rest(Position::new(t.start.clone())))
            .collect()
    }

    /// World at `t = 0` for a trial.
    pub fn initial_world(&self, trial: usize) -> Result<WorldState> {
        let agents = self.place_agents(trial)?;
        let targets = self
            .initial_targets()
            .into_iter()
            .enumerate()
            .map(|(id, s)| Target { id, pos: s.p })
            .collect();
        Ok(WorldState::new(0, agents, targets))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::is_connected;

    #[test]
    fn presets_parse_and_validate() {
        for name in PRESETS {
            let cfg = ScenarioConfig::preset(name).unwrap();
            assert_eq!(&cfg.name, name);
            let again = ScenarioConfig::from_toml_str(&cfg.to_toml(), Path::new("x")).unwrap();
            assert_eq!(cfg, again);
        }
        assert!(ScenarioConfig::preset("nope").is_err());
    }

    #[test]
    fn preset_values() {
        let c = ScenarioConfig::preset("fig3").unwrap();
        assert_eq!(c.agents.count, 4);
        assert_eq!(c.estimation.rounds, 20);
        assert_eq!(c.run.iterations, 100);
        assert_eq!(c.run.trials, 20);
        assert_eq!(c.noise.beta_sigma, 0.001);

        let c = ScenarioConfig::preset("fig10-11").unwrap();
        assert_eq!(c.run.iterations, 150);
        assert_eq!(c.run.trials, 5);
        assert_eq!(c.noise.beta_sigma, 0.1);
        assert!((c.diagonal() - 200.0 * 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut src = preset_source("fig3").unwrap().to_string();
        src = src.replace("[noise]", "[noise]\nbogus = 1");
        let e = ScenarioConfig::from_toml_str(&src, Path::new("f.toml")).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("f.toml") && msg.contains("bogus") && msg.contains("line"), "{msg}");
    }

    #[test]
    fn semantic_errors_name_the_field() {
        let src = preset_source("fig3").unwrap().replace("rounds = 20", "rounds = 0");
        match ScenarioConfig::from_toml_str(&src, Path::new("f")).unwrap_err() {
            Error::Config { field, .. } => assert_eq!(field, "estimation.rounds"),
            e => panic!("{e}"),
        }
        let mut c = ScenarioConfig::preset("fig3").unwrap();
        c.agents.count = 5;
        assert!(matches!(c.validate(), Err(Error::Config { field, .. }) if field == "agents.placement.positions"));
    }

    #[test]
    fn mean_degree_range_hits_target() {
        let c = ScenarioConfig::preset("fig8").unwrap();
        let agents = c.place_agents(0).unwrap();
        let g = build_comm_graph(&agents);
        assert!(is_connected(&g));
        let deg = g.mean_degree();
        assert!((deg - 8.44).abs() < 0.05, "{deg}");
        assert_eq!(agents, c.place_agents(7).unwrap());
    }

    #[test]
    fn random_placement_varies_per_trial_and_stays_inside() {
        let c = ScenarioConfig::preset("fig10-11").unwrap();
        let a = c.place_agents(0).unwrap();
        let b = c.place_agents(1).unwrap();
        assert_ne!(a, b);
        assert_eq!(a, c.place_agents(0).unwrap());
        let grid = c.grid();
        assert!(a.iter().all(|x| grid.is_on_grid(&x.pos)));
    }
}
