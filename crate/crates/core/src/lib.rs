//! Safety filtering for a teleoperated unicycle robot with backup control
//! barrier functions and learned switching between backup controllers.
//!
//! The pipeline for one control tick is: driver command, intent features,
//! reward model, switch governor, safety filter, world step. Each stage is a
//! module here; [`sim`] wires them together and [`session`] serves them over
//! TCP.

pub mod dynamics;
pub mod error;
pub mod filter;
pub mod flow;
pub mod governor;
pub mod intent;
pub mod policy;
pub mod qp;
pub mod session;
pub mod sim;
pub mod verify;

pub use dynamics::{Input, InputBounds, State};
pub use error::{Error, Result};
pub use filter::{filter, FilterConfig, FilterOutput};
pub use flow::{FlowConfig, FlowResult};
pub use governor::{GovernorConfig, SwitchEvent, SwitchState};
pub use policy::{BackupKind, Obstacle, PolicyId, PolicyParams, PolicySet};
pub use qp::{HalfPlane, QProblem, QSolution};
