//! Canned missions used for demonstrations and acceptance runs.

use serde::{Deserialize, Serialize};

use super::driver::{DriverKind, DriverSpec, Waypoint};
use super::scenario::Scenario;
use crate::dynamics::State;
use crate::error::{Error, Result};
use crate::policy::PolicyId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mission {
    pub name: String,
    pub scenario: Scenario,
    pub driver: DriverSpec,
    pub duration: f64,
    /// Distance at which the final waypoint counts as reached.
    pub goal_tolerance: f64,
}

impl Mission {
    pub fn goal(&self) -> [f64; 2] {
        self.driver.goal().expect("missions end at a goal")
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "dock_and_pass" => Ok(dock_and_pass()),
            "pass" => Ok(pass()),
            other => Err(Error::InvalidParameter(format!("unknown mission {other:?} (known: dock_and_pass, pass)"))),
        }
    }
}

/// Approach the cone slowly and stop close in front of it, back out
/// diagonally, then drive past it to a goal on the far side.
///
/// Docking that close is only admissible under the retreat controller, and
/// the final leg needs the turn-away controller's clearance while the robot
/// is moving forward, so a good switching law uses all three controllers.
pub fn dock_and_pass() -> Mission {
    let wps = vec![
        Waypoint { point: [-0.55, 0.0], speed: 0.2, label: Some(PolicyId(1)) },
        Waypoint { point: [-1.6, -0.9], speed: -0.3, label: Some(PolicyId(2)) },
        Waypoint { point: [1.0, 2.5], speed: 0.5, label: Some(PolicyId(0)) },
    ];
    Mission {
        name: "dock_and_pass".into(),
        scenario: Scenario {
            name: "dock_and_pass".into(),
            start: State::new(-3.0, 0.0, 0.3),
            initial_policy: PolicyId(1),
            ..Scenario::default()
        },
        driver: DriverSpec::new(DriverKind::WaypointSequence { waypoints: wps }),
        duration: 45.0,
        goal_tolerance: 0.2,
    }
}

/// Cruise past the cone with a clear line of sight to the goal.
pub fn pass() -> Mission {
    Mission {
        name: "pass".into(),
        scenario: Scenario {
            name: "pass".into(),
            start: State::new(-3.0, 0.9, 0.0),
            initial_policy: PolicyId(1),
            ..Scenario::default()
        },
        driver: DriverSpec::new(DriverKind::GoalSeeker { target: [3.0, 0.9], cruise: 0.5 }),
        duration: 20.0,
        goal_tolerance: 0.2,
    }
}
