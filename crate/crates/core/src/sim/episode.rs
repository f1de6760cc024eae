//! The per-tick control loop and episode logs.
//!
//! One tick: the driver command becomes a feature vector, the history
//! window is scored by the reward model, the governor may switch the
//! active backup controller, the filter produces the safe input, and the
//! world advances by one RK4 step under that input held constant.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::driver::{Driver, DriverSpec};
use super::scenario::Scenario;
use crate::dynamics::{step_closed_loop, ConstantInput, Input, State};
use crate::error::{Error, Result};
use crate::filter::{filter, FilterOutput};
use crate::governor::{self, SwitchEvent, SwitchState};
use crate::intent::{extract_features, FeatureVector, History, RewardModel, StateDerivative};
use crate::policy::PolicyId;

pub const LOG_FORMAT: &str = "mbcbf-episode-log";
pub const LOG_VERSION: u32 = 1;
pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// How the reward vector fed to the governor is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    /// No switching; the initial policy stays active.
    Fixed,
    /// Rewards from the reward model once the history is full.
    Model,
    /// One-hot rewards from externally supplied labels.
    Labels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub tick: u64,
    pub t: f64,
    /// State at the start of the tick.
    pub state: State,
    pub u_d: Input,
    pub u_safe: Input,
    /// Policy used by the filter on this tick.
    pub active: PolicyId,
    pub rewards: Vec<f64>,
    pub h: f64,
    pub flow_min: f64,
    pub terminal: f64,
    pub feasible: bool,
    pub intervention: f64,
    pub gamma: FeatureVector,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<PolicyId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub switch: Option<SwitchEvent>,
}

/// The control stack of one episode, advanced one tick at a time.
#[derive(Debug, Clone)]
pub struct EpisodeRunner<'a> {
    scenario: &'a Scenario,
    model: Option<&'a RewardModel>,
    selector: Selector,
    state: State,
    switch: SwitchState,
    history: History,
    last_u_safe: Input,
    tick: u64,
}

fn one_hot(m_k: usize, id: PolicyId) -> Vec<f64> {
    (0..m_k).map(|k| if k == id.0 { 1.0 } else { 0.0 }).collect()
}

impl<'a> EpisodeRunner<'a> {
    pub fn new(scenario: &'a Scenario, model: Option<&'a RewardModel>, selector: Selector) -> Result<Self> {
        scenario.validate_structure()?;
        let switch = SwitchState::initialize(
            &scenario.start,
            scenario.initial_policy,
            &scenario.obstacles,
            &scenario.filter,
            &scenario.policies,
        )?;
        if selector == Selector::Model {
            let m = model.ok_or_else(|| Error::InvalidParameter("model selector requires a model".into()))?;
            if m.config.outputs != scenario.m_k() || m.config.input != crate::intent::FEATURE_COUNT {
                return Err(Error::Model(format!(
                    "model maps {} features to {} rewards; scenario has {} policies",
                    m.config.input,
                    m.config.outputs,
                    scenario.m_k()
                )));
            }
        }
        Ok(Self {
            scenario,
            model,
            selector,
            state: scenario.start,
            switch,
            history: History::new(model.map_or(scenario.history, |m| m.config.steps)),
            last_u_safe: Input::ZERO,
            tick: 0,
        })
    }

    pub fn state(&self) -> State {
        self.state
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn active(&self) -> PolicyId {
        self.switch.active
    }

    pub fn switch_state(&self) -> &SwitchState {
        &self.switch
    }

    pub fn selector(&self) -> Selector {
        self.selector
    }

    pub fn scenario(&self) -> &Scenario {
        self.scenario
    }

    /// Advance one tick with desired input `u_d`; `label` is the externally
    /// supplied correct policy (used by [`Selector::Labels`] and recorded).
    pub fn step(&mut self, u_d: Input, label: Option<PolicyId>) -> Result<TickRecord> {
        let sc = self.scenario;
        if !u_d.is_finite() {
            return Err(Error::NonFinite("driver command"));
        }
        let x = self.state;
        let xdot = StateDerivative::of(&x, &self.last_u_safe);
        let gamma = extract_features(&x, &xdot, u_d, &sc.obstacles, sc.goal_horizon)?;
        self.history.push(gamma);

        let m_k = sc.m_k();
        let rewards = match (self.selector, self.model, self.history.window()) {
            (Selector::Model, Some(m), Some(w)) => m.rewards(&w)?,
            (Selector::Labels, _, _) => one_hot(m_k, label.unwrap_or(self.switch.active)),
            _ => one_hot(m_k, self.switch.active),
        };

        let mut event = None;
        if self.selector != Selector::Fixed {
            let (next, ev) = governor::step(
                &self.switch,
                &rewards,
                &x,
                u_d,
                &sc.obstacles,
                &sc.filter,
                &sc.governor,
                &sc.policies,
            )?;
            self.switch = next;
            event = ev;
        }

        let out: FilterOutput = filter(&x, u_d, self.switch.active, &sc.obstacles, &sc.filter, &sc.policies)?;
        let next = step_closed_loop(&x, &ConstantInput(out.u_safe), sc.tick_dt)?;

        let record = TickRecord {
            tick: self.tick,
            t: self.tick as f64 * sc.tick_dt,
            state: x,
            u_d,
            u_safe: out.u_safe,
            active: self.switch.active,
            rewards,
            h: out.h_now,
            flow_min: out.min_flow_margin,
            terminal: out.terminal_margin,
            feasible: out.feasible,
            intervention: out.intervention,
            gamma,
            label,
            switch: event,
        };
        self.state = next;
        self.last_u_safe = out.u_safe;
        self.tick += 1;
        Ok(record)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub format: String,
    pub version: u32,
    pub engine_version: String,
    pub scenario: Scenario,
    /// `None` for externally driven episodes.
    pub driver: Option<DriverSpec>,
    pub seed: u64,
    pub duration: f64,
    pub selector: Selector,
    pub model_fingerprint: Option<String>,
    /// Set when the log was re-simulated with a different model.
    #[serde(default)]
    pub counterfactual: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub ticks: usize,
    pub min_h: f64,
    pub max_intervention: f64,
    pub mean_intervention: f64,
    pub infeasible_ticks: usize,
    pub switches: usize,
    pub rejected_switches: u64,
    /// Every applied input within the bounds.
    pub bounds_respected: bool,
    /// Closest approach to the driver's goal, for drivers with one.
    pub min_goal_distance: Option<f64>,
    pub policies_used: Vec<PolicyId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub header: LogHeader,
    pub ticks: Vec<TickRecord>,
    pub final_state: State,
    pub rejected_switches: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum LogLine {
    Header(LogHeader),
    Tick(TickRecord),
    Footer { final_state: State, rejected_switches: u64, summary: EpisodeSummary },
}

impl EpisodeLog {
    pub fn switches(&self) -> impl Iterator<Item = &SwitchEvent> {
        self.ticks.iter().filter_map(|t| t.switch.as_ref())
    }

    pub fn summary(&self) -> EpisodeSummary {
        let bounds = self.header.scenario.bounds;
        let n = self.ticks.len();
        let mut policies_used: Vec<PolicyId> = self.ticks.iter().map(|t| t.active).collect();
        policies_used.sort();
        policies_used.dedup();
        let goal = self.header.driver.as_ref().and_then(DriverSpec::goal);
        let min_goal_distance = goal.map(|g| {
            self.ticks
                .iter()
                .map(|t| t.state)
                .chain(std::iter::once(self.final_state))
                .map(|s| (s.x - g[0]).hypot(s.y - g[1]))
                .fold(f64::INFINITY, f64::min)
        });
        let min_h_end = crate::policy::h_min(&self.final_state, &self.header.scenario.obstacles);
        EpisodeSummary {
            ticks: n,
            min_h: self.ticks.iter().map(|t| t.h).fold(min_h_end, f64::min),
            max_intervention: self.ticks.iter().map(|t| t.intervention).fold(0.0, f64::max),
            mean_intervention: if n > 0 { self.ticks.iter().map(|t| t.intervention).sum::<f64>() / n as f64 } else { 0.0 },
            infeasible_ticks: self.ticks.iter().filter(|t| !t.feasible).count(),
            switches: self.switches().count(),
            rejected_switches: self.rejected_switches,
            bounds_respected: self.ticks.iter().all(|t| bounds.contains(&t.u_safe)),
            min_goal_distance,
            policies_used,
        }
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        let mut line = |l: &LogLine| -> Result<()> {
            serde_json::to_writer(&mut out, l)?;
            out.write_all(b"\n")?;
            Ok(())
        };
        line(&LogLine::Header(self.header.clone()))?;
        for t in &self.ticks {
            line(&LogLine::Tick(t.clone()))?;
        }
        line(&LogLine::Footer {
            final_state: self.final_state,
            rejected_switches: self.rejected_switches,
            summary: self.summary(),
        })?;
        out.flush()?;
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut header = None;
        let mut ticks = Vec::new();
        let mut footer = None;
        for line in input.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<LogLine>(&line)? {
                LogLine::Header(h) => {
                    if h.format != LOG_FORMAT || h.version != LOG_VERSION {
                        return Err(Error::VersionMismatch {
                            expected: format!("{LOG_FORMAT} v{LOG_VERSION}"),
                            found: format!("{} v{}", h.format, h.version),
                        });
                    }
                    header = Some(h);
                }
                LogLine::Tick(t) => ticks.push(t),
                LogLine::Footer { final_state, rejected_switches, .. } => footer = Some((final_state, rejected_switches)),
            }
        }
        let header = header.ok_or_else(|| Error::InvalidParameter("episode log has no header".into()))?;
        let (final_state, rejected_switches) =
            footer.ok_or_else(|| Error::InvalidParameter("episode log is truncated (no footer)".into()))?;
        Ok(Self { header, ticks, final_state, rejected_switches })
    }

    pub fn save_path(&self, path: &Path) -> Result<()> {
        self.write_jsonl(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load_path(path: &Path) -> Result<Self> {
        Self::read_jsonl(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Number of ticks in an episode of `duration` seconds.
pub fn tick_count(duration: f64, tick_dt: f64) -> usize {
    (duration / tick_dt - 1e-9).ceil().max(0.0) as usize
}

/// Options for [`run_episode`] beyond the scenario and driver.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeOptions<'a> {
    pub model: Option<&'a RewardModel>,
    pub selector: Selector,
    pub duration: f64,
    pub seed: u64,
}

impl<'a> EpisodeOptions<'a> {
    /// Learned switching when a model is given, otherwise a fixed policy.
    pub fn new(model: Option<&'a RewardModel>, duration: f64, seed: u64) -> Self {
        let selector = if model.is_some() { Selector::Model } else { Selector::Fixed };
        Self { model, selector, duration, seed }
    }
}

/// Run a scripted episode. `labels` supplies a per-tick label (used by
/// [`Selector::Labels`] and recorded in the log).
pub fn run_episode_labeled(
    sc: &Scenario,
    driver: &DriverSpec,
    opts: EpisodeOptions<'_>,
    mut labels: impl FnMut(u64, &Driver) -> Option<PolicyId>,
) -> Result<EpisodeLog> {
    if !(opts.duration >= 0.0 && opts.duration.is_finite()) {
        return Err(Error::InvalidParameter(format!("duration must be non-negative, got {}", opts.duration)));
    }
    let mut runner = EpisodeRunner::new(sc, opts.model, opts.selector)?;
    let mut drv = Driver::new(driver.clone(), opts.seed)?;
    let n = tick_count(opts.duration, sc.tick_dt);
    let mut ticks = Vec::with_capacity(n);
    for _ in 0..n {
        let u_d = drv.command(&runner.state(), &sc.obstacles);
        let label = labels(runner.tick(), &drv);
        ticks.push(runner.step(u_d, label)?);
    }
    Ok(EpisodeLog {
        header: LogHeader {
            format: LOG_FORMAT.into(),
            version: LOG_VERSION,
            engine_version: ENGINE_VERSION.into(),
            scenario: sc.clone(),
            driver: Some(driver.clone()),
            seed: opts.seed,
            duration: opts.duration,
            selector: opts.selector,
            model_fingerprint: opts.model.map(RewardModel::fingerprint),
            counterfactual: false,
        },
        ticks,
        final_state: runner.state(),
        rejected_switches: runner.switch_state().rejected_switches,
    })
}

pub fn run_episode(sc: &Scenario, driver: &DriverSpec, opts: EpisodeOptions<'_>) -> Result<EpisodeLog> {
    run_episode_labeled(sc, driver, opts, |_, _| None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::driver::DriverKind;

    #[test]
    fn idle_driver_stays_put() {
        let sc = Scenario::default();
        let log = run_episode(&sc, &DriverSpec::new(DriverKind::Idle), EpisodeOptions::new(None, 5.0, 0)).unwrap();
        assert_eq!(log.ticks.len(), 100);
        assert_eq!(log.final_state, sc.start);
        let s = log.summary();
        assert_eq!(s.max_intervention, 0.0);
        assert!(log.ticks.iter().all(|t| t.h == log.ticks[0].h));
    }

    #[test]
    fn rammer_is_stopped_short_of_the_cone() {
        let sc = Scenario { initial_policy: PolicyId(1), ..Scenario::default() };
        let log =
            run_episode(&sc, &DriverSpec::new(DriverKind::Rammer { speed: 0.5 }), EpisodeOptions::new(None, 30.0, 0)).unwrap();
        let s = log.summary();
        assert!(s.min_h >= -1e-3, "{s:?}");
        assert!(s.min_h < 0.5, "the rammer should get close: {s:?}");
        assert!(s.bounds_respected);
        assert!(log.ticks.iter().all(|t| t.active == PolicyId(1)));
    }

    #[test]
    fn episodes_are_deterministic_and_logs_round_trip() {
        let sc = Scenario::default();
        let d = DriverSpec::new(DriverKind::Orbiter { radius: 1.0, direction: -1.0 }).with_noise(0.05);
        let a = run_episode(&sc, &d, EpisodeOptions::new(None, 3.0, 9)).unwrap();
        let b = run_episode(&sc, &d, EpisodeOptions::new(None, 3.0, 9)).unwrap();
        assert_eq!(a, b);
        let mut buf = Vec::new();
        a.write_jsonl(&mut buf).unwrap();
        assert_eq!(EpisodeLog::read_jsonl(buf.as_slice()).unwrap(), a);
    }

    #[test]
    fn label_selector_switches_to_the_labeled_policy() {
        let sc = Scenario::default();
        let d = DriverSpec::new(DriverKind::Idle);
        let opts = EpisodeOptions { model: None, selector: Selector::Labels, duration: 1.0, seed: 0 };
        let log = run_episode_labeled(&sc, &d, opts, |_, _| Some(PolicyId(1))).unwrap();
        let events: Vec<_> = log.switches().collect();
        assert_eq!(events.len(), 1);
        assert_eq!((events[0].tick, events[0].to), (0, PolicyId(1)));
        assert!(log.ticks.iter().all(|t| t.active == PolicyId(1) && t.label == Some(PolicyId(1))));
    }

    #[test]
    fn model_selector_needs_matching_model() {
        let sc = Scenario::default();
        assert!(EpisodeRunner::new(&sc, None, Selector::Model).is_err());
        let m = RewardModel::zeros(crate::intent::ModelConfig { outputs: 2, ..Default::default() }).unwrap();
        assert!(EpisodeRunner::new(&sc, Some(&m), Selector::Model).is_err());
    }

    #[test]
    fn truncated_log_is_rejected() {
        let sc = Scenario::default();
        let log = run_episode(&sc, &DriverSpec::new(DriverKind::Idle), EpisodeOptions::new(None, 0.2, 0)).unwrap();
        let mut buf = Vec::new();
        log.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let without_footer: String = text.lines().filter(|l| !l.contains("\"footer\"")).collect::<Vec<_>>().join("\n");
        assert!(EpisodeLog::read_jsonl(without_footer.as_bytes()).is_err());
    }
}
