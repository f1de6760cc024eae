//! Simulated world: scenarios, scripted drivers, the episode loop, data
//! collection and replay.

pub mod collect;
pub mod driver;
pub mod episode;
pub mod mission;
pub mod replay;
pub mod scenario;

pub use collect::{collect_dataset, collect_episode, default_curriculum, CurriculumItem, LabelSchedule};
pub use driver::{Driver, DriverKind, DriverSpec, Waypoint};
pub use episode::{
    run_episode, run_episode_labeled, tick_count, EpisodeLog, EpisodeOptions, EpisodeRunner, EpisodeSummary, LogHeader,
    Selector, TickRecord, ENGINE_VERSION, LOG_FORMAT, LOG_VERSION,
};
pub use mission::Mission;
pub use replay::{replay, ReplayReport, Verdict};
pub use scenario::{Arena, FeedbackThresholds, Scenario, CONE_RADIUS, ROBOT_HALF_LENGTH, SCENARIO_VERSION};
