//! Labeled dataset generation from scripted curricula.
//!
//! Each curriculum item pairs a driver with a schedule naming the correct
//! backup policy on every tick. During collection the label also drives the
//! switching governor, so the recorded motion is the one a driver pressing
//! that button would have produced.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::driver::{Driver, DriverKind, DriverSpec, Waypoint};
use super::episode::{run_episode_labeled, tick_count, EpisodeOptions, Selector};
use super::scenario::Scenario;
use crate::dynamics::State;
use crate::error::{Error, Result};
use crate::governor::SwitchState;
use crate::intent::{Dataset, DatasetRow};
use crate::policy::PolicyId;

/// Correct policy over an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LabelSchedule {
    Constant { policy: PolicyId },
    /// `(first_tick, policy)` pairs in increasing tick order; the first
    /// phase must start at tick 0.
    Phases { phases: Vec<(u64, PolicyId)> },
    PerTick { labels: Vec<PolicyId> },
    /// The label of the waypoint the driver is heading to.
    FromDriver,
}

impl LabelSchedule {
    fn validate(&self, ticks: usize, m_k: usize) -> Result<()> {
        let check = |p: PolicyId| {
            if p.0 < m_k {
                Ok(())
            } else {
                Err(Error::UnknownPolicy { index: p.0, count: m_k })
            }
        };
        match self {
            Self::Constant { policy } => check(*policy),
            Self::Phases { phases } => {
                if phases.first().map(|p| p.0) != Some(0) {
                    return Err(Error::Dataset("label phases must start at tick 0".into()));
                }
                if phases.windows(2).any(|w| w[1].0 <= w[0].0) {
                    return Err(Error::Dataset("label phases must be strictly increasing".into()));
                }
                phases.iter().try_for_each(|p| check(p.1))
            }
            Self::PerTick { labels } => {
                if labels.len() != ticks {
                    return Err(Error::Dataset(format!(
                        "label schedule has {} entries for an episode of {ticks} ticks",
                        labels.len()
                    )));
                }
                labels.iter().try_for_each(|p| check(*p))
            }
            Self::FromDriver => Ok(()),
        }
    }

    fn label(&self, tick: u64, driver: &Driver) -> Option<PolicyId> {
        match self {
            Self::Constant { policy } => Some(*policy),
            Self::Phases { phases } => phases.iter().take_while(|p| p.0 <= tick).last().map(|p| p.1),
            Self::PerTick { labels } => labels.get(tick as usize).copied(),
            Self::FromDriver => driver.label(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumItem {
    pub driver: DriverSpec,
    /// Start pose; the scenario's start when absent.
    #[serde(default)]
    pub start: Option<State>,
    pub schedule: LabelSchedule,
    pub duration: f64,
}

/// Run one labeled episode and return its rows.
pub fn collect_episode(sc: &Scenario, item: &CurriculumItem, episode: u64, seed: u64) -> Result<Vec<DatasetRow>> {
    let ticks = tick_count(item.duration, sc.tick_dt);
    item.schedule.validate(ticks, sc.m_k())?;
    let probe = Driver::new(item.driver.clone(), seed)?;
    let first = item
        .schedule
        .label(0, &probe)
        .ok_or_else(|| Error::Dataset(format!("episode {episode}: driver supplies no label")))?;
    let sc_ep = Scenario { start: item.start.unwrap_or(sc.start), initial_policy: first, ..sc.clone() };
    let opts = EpisodeOptions { model: None, selector: Selector::Labels, duration: item.duration, seed };
    let mut missing = false;
    let log = run_episode_labeled(&sc_ep, &item.driver, opts, |t, d| {
        let l = item.schedule.label(t, d);
        missing |= l.is_none();
        l
    })?;
    if missing {
        return Err(Error::Dataset(format!("episode {episode}: schedule left a tick unlabeled")));
    }
    Ok(log
        .ticks
        .iter()
        .map(|t| DatasetRow {
            episode,
            tick: t.tick,
            gamma: t.gamma,
            label: t.label.expect("checked above").0,
            active: t.active.0,
        })
        .collect())
}

/// Collect `episodes` episodes, cycling through the curriculum. Episodes
/// run on all available cores; the result does not depend on the thread
/// count.
pub fn collect_dataset(sc: &Scenario, curriculum: &[CurriculumItem], episodes: usize, seed: u64) -> Result<Dataset> {
    if curriculum.is_empty() {
        return Err(Error::Dataset("empty curriculum".into()));
    }
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(episodes.max(1));
    let run = |i: usize| collect_episode(sc, &curriculum[i % curriculum.len()], i as u64, seed.wrapping_add(i as u64));
    let mut per_episode: Vec<Result<Vec<DatasetRow>>> = Vec::with_capacity(episodes);
    if threads <= 1 {
        per_episode.extend((0..episodes).map(run));
    } else {
        let run = &run;
        let chunks: Vec<Vec<Result<Vec<DatasetRow>>>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads)
                .map(|k| s.spawn(move || (k..episodes).step_by(threads).map(run).collect::<Vec<_>>()))
                .collect();
            handles.into_iter().map(|h| h.join().expect("collection thread panicked")).collect()
        });
        let mut iters: Vec<_> = chunks.into_iter().map(Vec::into_iter).collect();
        for i in 0..episodes {
            per_episode.push(iters[i % threads].next().expect("every episode ran"));
        }
    }
    let mut rows = Vec::new();
    for r in per_episode {
        rows.extend(r?);
    }
    Dataset::new(sc.m_k(), rows)
}

fn rotate(p: [f64; 2], phi: f64) -> [f64; 2] {
    let (s, c) = phi.sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1]]
}

fn polar(r: f64, a: f64) -> [f64; 2] {
    [r * a.cos(), r * a.sin()]
}

/// Randomized curriculum of three driving styles around the first obstacle,
/// each mapped to the backup policy that suits it:
///
/// * passing at cruise speed: policy 0;
/// * docking slowly, then backing out: policy 1, then 2;
/// * reversing in, then driving off forwards: policy 2, then 0.
///
/// Starts are rejection-sampled until they lie in the implicit safe set of
/// their first label.
pub fn default_curriculum(sc: &Scenario, episodes: usize, seed: u64) -> Result<Vec<CurriculumItem>> {
    if sc.m_k() < 3 {
        return Err(Error::InvalidScenario("the default curriculum needs three backup policies".into()));
    }
    let center = sc.obstacles[0].center;
    let r_o = sc.obstacles[0].radius;
    let v_max = sc.bounds.v_max();
    let shift = |p: [f64; 2]| [p[0] + center[0], p[1] + center[1]];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(episodes);
    for i in 0..episodes {
        let mut attempt = 0;
        let item = loop {
            attempt += 1;
            if attempt > 1000 {
                return Err(Error::InvalidScenario("could not place curriculum starts in the safe set".into()));
            }
            let phi = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let (start_local, heading_local, waypoints, label0) = match i % 3 {
                0 => {
                    let y0 = rng.random_range(-1.5..1.5);
                    let y1 = rng.random_range(-1.5..1.5);
                    let speed = v_max * rng.random_range(0.9..1.0);
                    let wps = vec![Waypoint { point: [3.2, y1], speed, label: Some(PolicyId(0)) }];
                    ([-3.2, y0], rng.random_range(-0.3..0.3), wps, PolicyId(0))
                }
                1 => {
                    let r0 = rng.random_range(2.6..3.2);
                    let dock = r_o + rng.random_range(0.25..0.5);
                    let out = rng.random_range(2.2..3.0);
                    let a = rng.random_range(-0.4..0.4);
                    let wps = vec![
                        Waypoint { point: polar(dock, std::f64::consts::PI + a), speed: rng.random_range(0.15..0.25), label: Some(PolicyId(1)) },
                        Waypoint {
                            point: polar(out, std::f64::consts::PI + a + rng.random_range(-0.6..0.6)),
                            speed: -rng.random_range(0.2..0.35),
                            label: Some(PolicyId(2)),
                        },
                    ];
                    ([-r0, 0.0], rng.random_range(-0.3..0.3), wps, PolicyId(1))
                }
                _ => {
                    let r0 = rng.random_range(2.6..3.2);
                    let near = r_o + rng.random_range(0.4..0.7);
                    let a = rng.random_range(-0.4..0.4);
                    let wps = vec![
                        Waypoint { point: polar(near, std::f64::consts::PI + a), speed: -rng.random_range(0.2..0.35), label: Some(PolicyId(2)) },
                        Waypoint {
                            point: polar(3.0, std::f64::consts::PI + a + rng.random_range(1.0..2.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 }),
                            speed: v_max * rng.random_range(0.9..1.0),
                            label: Some(PolicyId(0)),
                        },
                    ];
                    // Facing away from the obstacle to reverse towards it.
                    ([-r0, 0.0], std::f64::consts::PI + rng.random_range(-0.3..0.3), wps, PolicyId(2))
                }
            };
            let p = shift(rotate(start_local, phi));
            let start = State::new(p[0], p[1], crate::dynamics::wrap_angle(heading_local + phi));
            let waypoints = waypoints
                .into_iter()
                .map(|w| Waypoint { point: shift(rotate(w.point, phi)), ..w })
                .collect::<Vec<_>>();
            let inside = |q: [f64; 2]| sc.arena.contains(q);
            if !inside(start.position()) || !waypoints.iter().all(|w| inside(w.point)) {
                continue;
            }
            if SwitchState::initialize(&start, label0, &sc.obstacles, &sc.filter, &sc.policies).is_err() {
                continue;
            }
            break CurriculumItem {
                driver: DriverSpec::new(DriverKind::WaypointSequence { waypoints }).with_noise(0.02),
                start: Some(start),
                schedule: LabelSchedule::FromDriver,
                duration: 15.0,
            };
        };
        items.push(item);
    }
    Ok(items)
}
