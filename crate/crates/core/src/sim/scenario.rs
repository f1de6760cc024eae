//! World description: arena, obstacles, start pose and every tunable of
//! the control stack.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamics::{InputBounds, State, WORLD_DT};
use crate::error::{Error, Result};
use crate::filter::FilterConfig;
use crate::governor::{GovernorConfig, SwitchState};
use crate::intent::{GOAL_HORIZON, HISTORY_LEN};
use crate::policy::{Obstacle, PolicyId, PolicySet};

pub const SCENARIO_VERSION: u32 = 1;

/// Physical cone radius of the default scenario.
pub const CONE_RADIUS: f64 = 0.15;
/// Half the robot length, added to obstacle radii.
pub const ROBOT_HALF_LENGTH: f64 = 0.35;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Arena {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Arena {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        (self.min[0]..=self.max[0]).contains(&p[0]) && (self.min[1]..=self.max[1]).contains(&p[1])
    }
}

impl Default for Arena {
    fn default() -> Self {
        Self { min: [-4.0, -4.0], max: [4.0, 4.0] }
    }
}

/// Distances at which the operator is warned about the obstacle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeedbackThresholds {
    pub warn_h: f64,
    pub alert_h: f64,
}

impl Default for FeedbackThresholds {
    fn default() -> Self {
        Self { warn_h: 0.5, alert_h: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub version: u32,
    pub name: String,
    pub arena: Arena,
    pub obstacles: Vec<Obstacle>,
    pub start: State,
    pub initial_policy: PolicyId,
    /// Input bounds shared by the filter, the backup laws and the drivers.
    pub bounds: InputBounds,
    pub filter: FilterConfig,
    pub policies: PolicySet,
    pub governor: GovernorConfig,
    pub tick_dt: f64,
    /// Horizon over which the driver's command is extrapolated for features.
    pub goal_horizon: f64,
    /// Window length fed to the reward model.
    pub history: usize,
    pub thresholds: FeedbackThresholds,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            version: SCENARIO_VERSION,
            name: "cone".into(),
            arena: Arena::default(),
            obstacles: vec![Obstacle::cone([0.0, 0.0], CONE_RADIUS, ROBOT_HALF_LENGTH).expect("valid constant")],
            start: State::new(-2.5, 0.0, std::f64::consts::FRAC_PI_2),
            initial_policy: PolicyId(0),
            bounds: InputBounds::default(),
            filter: FilterConfig::default(),
            policies: PolicySet::default(),
            governor: GovernorConfig::default(),
            tick_dt: WORLD_DT,
            goal_horizon: GOAL_HORIZON,
            history: HISTORY_LEN,
            thresholds: FeedbackThresholds::default(),
        }
    }
}

impl Scenario {
    /// Copy the shared input bounds into the filter and policy settings.
    pub fn normalized(mut self) -> Self {
        self.filter.bounds = self.bounds;
        self.policies.params.bounds = self.bounds;
        self
    }

    /// Structural checks, without the start-state safety check.
    pub fn validate_structure(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidScenario(msg));
        if self.version != SCENARIO_VERSION {
            return Err(Error::VersionMismatch {
                expected: SCENARIO_VERSION.to_string(),
                found: self.version.to_string(),
            });
        }
        if !(self.tick_dt > 0.0 && self.tick_dt.is_finite()) {
            return bad(format!("tick_dt must be positive, got {}", self.tick_dt));
        }
        if !(self.goal_horizon >= 0.0 && self.goal_horizon.is_finite()) {
            return bad(format!("goal_horizon must be non-negative, got {}", self.goal_horizon));
        }
        if self.history == 0 {
            return bad("history length must be positive".into());
        }
        if self.arena.min[0] >= self.arena.max[0] || self.arena.min[1] >= self.arena.max[1] {
            return bad(format!("arena bounds are empty: {:?}", self.arena));
        }
        if self.obstacles.is_empty() {
            return bad("at least one obstacle is required".into());
        }
        for o in &self.obstacles {
            o.validate().map_err(|e| Error::InvalidScenario(e.to_string()))?;
        }
        if !(self.thresholds.alert_h < self.thresholds.warn_h) {
            return bad(format!("alert_h must be below warn_h: {:?}", self.thresholds));
        }
        if self.filter.bounds != self.bounds || self.policies.params.bounds != self.bounds {
            return bad("filter and policy bounds must equal the scenario bounds".into());
        }
        self.filter.validate()?;
        self.policies.validate()?;
        self.policies.kind(self.initial_policy)?;
        if !self.start.is_finite() || !self.arena.contains(self.start.position()) {
            return bad(format!("start {:?} is not a finite pose inside the arena", self.start));
        }
        Ok(())
    }

    /// Full validation, including that the start lies in the implicit safe
    /// set of the initial policy.
    pub fn validate(&self) -> Result<()> {
        self.validate_structure()?;
        SwitchState::initialize(&self.start, self.initial_policy, &self.obstacles, &self.filter, &self.policies)?;
        Ok(())
    }

    pub fn m_k(&self) -> usize {
        self.policies.len()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let sc: Scenario = serde_json::from_str(text)?;
        let sc = sc.normalized();
        sc.validate()?;
        Ok(sc)
    }

    pub fn load_path(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }
}
