//! Scripted stand-ins for a human driver.
//!
//! Every driver is a pose-feedback law emitting a desired input. Commands
//! are not clamped here; the filter clamps them to the input bounds.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{wrap_angle, Input, State};
use crate::error::{Error, Result};
use crate::policy::{Obstacle, PolicyId};

/// Proportional heading gain shared by the steering drivers (1/s).
const HEADING_GAIN: f64 = 2.0;
/// Distance at which a waypoint counts as reached.
const WAYPOINT_TOLERANCE: f64 = 0.15;
/// Distance at which the goal seeker stops.
const GOAL_STOP: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub point: [f64; 2],
    /// Signed speed; negative drives there in reverse.
    pub speed: f64,
    /// Controller the driver considers correct while heading here.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<PolicyId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DriverKind {
    /// Always commands zero.
    Idle,
    /// Steers to `target` at `cruise` speed and stops there.
    GoalSeeker { target: [f64; 2], #[serde(default = "default_cruise")] cruise: f64 },
    /// Circles the first obstacle at `radius`; `direction` +1 is
    /// counter-clockwise.
    Orbiter { radius: f64, #[serde(default = "default_direction")] direction: f64 },
    /// Steers straight at the nearest obstacle center.
    Rammer { #[serde(default = "default_cruise")] speed: f64 },
    WaypointSequence { waypoints: Vec<Waypoint> },
    /// Plays back a recorded command stream, then zero.
    Replay { commands: Vec<Input> },
}

fn default_cruise() -> f64 {
    0.5
}

fn default_direction() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriverSpec {
    #[serde(flatten)]
    pub kind: DriverKind,
    /// Standard deviation of Gaussian noise added to both command channels.
    #[serde(default)]
    pub noise: f64,
}

impl DriverSpec {
    pub fn new(kind: DriverKind) -> Self {
        Self { kind, noise: 0.0 }
    }

    pub fn with_noise(mut self, noise: f64) -> Self {
        self.noise = noise;
        self
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            DriverKind::Idle => "idle",
            DriverKind::GoalSeeker { .. } => "goal_seeker",
            DriverKind::Orbiter { .. } => "orbiter",
            DriverKind::Rammer { .. } => "rammer",
            DriverKind::WaypointSequence { .. } => "waypoint_sequence",
            DriverKind::Replay { .. } => "replay",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        let ok = self.noise >= 0.0
            && self.noise.is_finite()
            && match &self.kind {
                DriverKind::Idle => true,
                DriverKind::GoalSeeker { target, cruise } => finite(target) && cruise.is_finite(),
                DriverKind::Orbiter { radius, direction } => *radius > 0.0 && radius.is_finite() && direction.is_finite(),
                DriverKind::Rammer { speed } => speed.is_finite(),
                DriverKind::WaypointSequence { waypoints } => {
                    waypoints.iter().all(|w| finite(&w.point) && w.speed.is_finite())
                }
                DriverKind::Replay { commands } => commands.iter().all(Input::is_finite),
            };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("invalid driver {self:?}")))
        }
    }

    /// Goal point for drivers that have one.
    pub fn goal(&self) -> Option<[f64; 2]> {
        match &self.kind {
            DriverKind::GoalSeeker { target, .. } => Some(*target),
            DriverKind::WaypointSequence { waypoints } => waypoints.last().map(|w| w.point),
            _ => None,
        }
    }
}

/// A running driver: spec plus progress and noise state.
#[derive(Debug, Clone)]
pub struct Driver {
    spec: DriverSpec,
    waypoint: usize,
    tick: usize,
    rng: ChaCha8Rng,
}

fn steer(x: &State, target: [f64; 2], speed: f64) -> Input {
    let (dx, dy) = (target[0] - x.x, target[1] - x.y);
    let bearing = dy.atan2(dx);
    // Reversing points the rear at the target.
    let facing = if speed < 0.0 { x.theta + std::f64::consts::PI } else { x.theta };
    let err = wrap_angle(bearing - facing);
    Input::new(speed * err.cos().max(0.0), HEADING_GAIN * err)
}

impl Driver {
    pub fn new(spec: DriverSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec, waypoint: 0, tick: 0, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    pub fn spec(&self) -> &DriverSpec {
        &self.spec
    }

    /// Label attached to the current waypoint, if any.
    pub fn label(&self) -> Option<PolicyId> {
        match &self.spec.kind {
            DriverKind::WaypointSequence { waypoints } => {
                waypoints.get(self.waypoint.min(waypoints.len().saturating_sub(1))).and_then(|w| w.label)
            }
            _ => None,
        }
    }

    pub fn command(&mut self, x: &State, obstacles: &[Obstacle]) -> Input {
        let tick = self.tick;
        self.tick += 1;
        let clean = match &self.spec.kind {
            DriverKind::Idle => Input::ZERO,
            DriverKind::GoalSeeker { target, cruise } => {
                let dist = (target[0] - x.x).hypot(target[1] - x.y);
                if dist < GOAL_STOP {
                    Input::ZERO
                } else {
                    steer(x, *target, cruise.min(dist.max(0.1)))
                }
            }
            DriverKind::Orbiter { radius, direction } => {
                let c = obstacles.first().map_or([0.0, 0.0], |o| o.center);
                let (dx, dy) = (x.x - c[0], x.y - c[1]);
                let rho = dx.hypot(dy).max(1e-9);
                let radial = dy.atan2(dx);
                // Tangent heading, bent inwards when outside the circle.
                let correction = (HEADING_GAIN * (rho - radius)).clamp(-1.2, 1.2);
                let desired = radial + direction.signum() * (std::f64::consts::FRAC_PI_2 + correction);
                let err = wrap_angle(desired - x.theta);
                Input::new(0.5 * err.cos().max(0.0), HEADING_GAIN * err)
            }
            DriverKind::Rammer { speed } => {
                let target = obstacles
                    .iter()
                    .min_by(|a, b| {
                        let da = (a.center[0] - x.x).hypot(a.center[1] - x.y);
                        let db = (b.center[0] - x.x).hypot(b.center[1] - x.y);
                        da.total_cmp(&db)
                    })
                    .map_or([0.0, 0.0], |o| o.center);
                let bearing = (target[1] - x.y).atan2(target[0] - x.x);
                Input::new(*speed, HEADING_GAIN * wrap_angle(bearing - x.theta))
            }
            DriverKind::WaypointSequence { waypoints } => {
                while let Some(w) = waypoints.get(self.waypoint) {
                    let reached = (w.point[0] - x.x).hypot(w.point[1] - x.y) < WAYPOINT_TOLERANCE;
                    if reached && self.waypoint + 1 < waypoints.len() {
                        self.waypoint += 1;
                    } else {
                        break;
                    }
                }
                match waypoints.get(self.waypoint) {
                    Some(w) if (w.point[0] - x.x).hypot(w.point[1] - x.y) >= GOAL_STOP => steer(x, w.point, w.speed),
                    _ => Input::ZERO,
                }
            }
            DriverKind::Replay { commands } => commands.get(tick).copied().unwrap_or(Input::ZERO),
        };
        if self.spec.noise > 0.0 {
            let n = Normal::new(0.0, self.spec.noise).expect("validated noise");
            Input::new(clean.v + n.sample(&mut self.rng), clean.omega + n.sample(&mut self.rng))
        } else {
            clean
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cone() -> Vec<Obstacle> {
        vec![Obstacle::new([0.0, 0.0], 0.5).unwrap()]
    }

    #[test]
    fn idle_and_replay() {
        let mut d = Driver::new(DriverSpec::new(DriverKind::Idle), 0).unwrap();
        assert_eq!(d.command(&State::new(1.0, 1.0, 0.0), &cone()), Input::ZERO);
        let cmds = vec![Input::new(0.1, 0.2), Input::new(-0.3, 0.0)];
        let mut r = Driver::new(DriverSpec::new(DriverKind::Replay { commands: cmds.clone() }), 0).unwrap();
        let x = State::new(0.0, 0.0, 0.0);
        assert_eq!(r.command(&x, &cone()), cmds[0]);
        assert_eq!(r.command(&x, &cone()), cmds[1]);
        assert_eq!(r.command(&x, &cone()), Input::ZERO);
    }

    #[test]
    fn goal_seeker_turns_towards_target_and_stops() {
        let spec = DriverSpec::new(DriverKind::GoalSeeker { target: [2.0, 0.0], cruise: 0.5 });
        let mut d = Driver::new(spec, 0).unwrap();
        let u = d.command(&State::new(0.0, 0.0, 0.0), &cone());
        assert_eq!(u, Input::new(0.5, 0.0));
        let u = d.command(&State::new(0.0, -1.0, 0.0), &cone());
        assert!(u.omega > 0.0);
        assert_eq!(d.command(&State::new(2.0, 0.01, 0.0), &cone()), Input::ZERO);
    }

    #[test]
    fn rammer_aims_at_obstacle() {
        let mut d = Driver::new(DriverSpec::new(DriverKind::Rammer { speed: 0.5 }), 0).unwrap();
        let u = d.command(&State::new(-2.0, 0.0, 0.0), &cone());
        assert_eq!(u, Input::new(0.5, 0.0));
        let u = d.command(&State::new(-2.0, 0.0, 0.5), &cone());
        assert!(u.omega < 0.0);
    }

    #[test]
    fn reverse_waypoints_drive_backwards_and_advance() {
        let spec = DriverSpec::new(DriverKind::WaypointSequence {
            waypoints: vec![
                Waypoint { point: [-1.0, 0.0], speed: -0.3, label: Some(PolicyId(2)) },
                Waypoint { point: [-1.0, 2.0], speed: 0.5, label: Some(PolicyId(0)) },
            ],
        });
        let mut d = Driver::new(spec, 0).unwrap();
        let u = d.command(&State::new(0.0, 0.0, 0.0), &cone());
        assert!((u.v + 0.3).abs() < 1e-12 && u.omega.abs() < 1e-12);
        assert_eq!(d.label(), Some(PolicyId(2)));
        d.command(&State::new(-0.95, 0.0, 0.0), &cone());
        assert_eq!(d.label(), Some(PolicyId(0)));
    }

    #[test]
    fn noise_is_seeded() {
        let spec = DriverSpec::new(DriverKind::Rammer { speed: 0.5 }).with_noise(0.1);
        let x = State::new(-2.0, 0.0, 0.0);
        let a: Vec<Input> = {
            let mut d = Driver::new(spec.clone(), 3).unwrap();
            (0..5).map(|_| d.command(&x, &cone())).collect()
        };
        let mut d = Driver::new(spec, 3).unwrap();
        let b: Vec<Input> = (0..5).map(|_| d.command(&x, &cone())).collect();
        assert_eq!(a, b);
        assert!(a.iter().any(|u| u.v != 0.5));
    }

    #[test]
    fn spec_json_shape() {
        let spec: DriverSpec = serde_json::from_str(r#"{"kind":"orbiter","radius":1.2,"noise":0.05}"#).unwrap();
        assert_eq!(spec.kind, DriverKind::Orbiter { radius: 1.2, direction: 1.0 });
        assert!(Driver::new(DriverSpec::new(DriverKind::Orbiter { radius: -1.0, direction: 1.0 }), 0).is_err());
    }
}
