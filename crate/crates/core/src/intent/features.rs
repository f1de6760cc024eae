//! Per-tick feature vectors fed to the reward model.

use serde::{Deserialize, Serialize};

use crate::dynamics::{vector_field, ConstantInput, Input, State};
use crate::error::{Error, Result};
use crate::flow::flow_state;
use crate::policy::{h_min, Obstacle};

pub const FEATURE_COUNT: usize = 12;

pub const FEATURE_NAMES: [&str; FEATURE_COUNT] = [
    "x", "y", "z", "theta", "dx", "dy", "dz", "dtheta", "v_cmd", "omega_cmd", "h_at_x", "h_at_goal",
];

/// Default horizon over which the driver's command is extrapolated.
pub const GOAL_HORIZON: f64 = 1.0;

/// Step used when extrapolating the driver's command.
const GOAL_DT: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVector(pub [f64; FEATURE_COUNT]);

impl FeatureVector {
    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn h_at_x(&self) -> f64 {
        self.0[10]
    }

    pub fn h_at_goal(&self) -> f64 {
        self.0[11]
    }
}

/// Planar velocity of the robot.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StateDerivative {
    pub dx: f64,
    pub dy: f64,
    pub dtheta: f64,
}

impl StateDerivative {
    /// Velocity produced by applying `u` at `x`.
    pub fn of(x: &State, u: &Input) -> Self {
        let f = vector_field(x, u);
        Self { dx: f[0], dy: f[1], dtheta: f[2] }
    }
}

/// Where the driver's command would take the robot after `horizon` seconds
/// if held constant.
pub fn extrapolated_goal(x: &State, u_d: Input, horizon: f64) -> Result<State> {
    flow_state(x, &ConstantInput(u_d), horizon, GOAL_DT)
}

/// Build the feature vector. The heading is wrapped to `(-pi, pi]` so the
/// feature stays bounded over long episodes.
pub fn extract_features(
    x: &State,
    xdot: &StateDerivative,
    u_d: Input,
    obstacles: &[Obstacle],
    goal_horizon: f64,
) -> Result<FeatureVector> {
    let goal = extrapolated_goal(x, u_d, goal_horizon)?;
    let features = FeatureVector([
        x.x,
        x.y,
        0.0,
        crate::dynamics::wrap_angle(x.theta),
        xdot.dx,
        xdot.dy,
        0.0,
        xdot.dtheta,
        u_d.v,
        u_d.omega,
        h_min(x, obstacles),
        h_min(&goal, obstacles),
    ]);
    if !features.is_finite() {
        return Err(Error::NonFinite("feature vector"));
    }
    Ok(features)
}
