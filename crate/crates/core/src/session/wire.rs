//! Line-delimited JSON messages exchanged with session clients.
//!
//! Every message is one JSON object on its own line, discriminated by its
//! `type` field. The server opens each connection with a `config` frame
//! carrying [`SCHEMA_VERSION`].

use serde::{Deserialize, Serialize};

use crate::flow::integrate_backup_flow;
use crate::governor::SwitchEvent;
use crate::policy::{h_distance, Obstacle};
use crate::sim::{Arena, FeedbackThresholds, Scenario, TickRecord};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Driver,
    Observer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundsInfo {
    pub v_max: f64,
    pub omega_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigFrame {
    pub schema_version: u32,
    pub role: Role,
    pub scenario: String,
    pub m_k: usize,
    pub bounds: BoundsInfo,
    pub tick_dt: f64,
    pub thresholds: FeedbackThresholds,
    pub arena: Arena,
    pub obstacles: Vec<Obstacle>,
    /// Controller names, indexed by policy id.
    pub policies: Vec<String>,
    /// Silence after which the held command drops to zero.
    pub hold_timeout: f64,
}

impl ConfigFrame {
    pub fn new(sc: &Scenario, role: Role, hold_timeout: f64) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            role,
            scenario: sc.name.clone(),
            m_k: sc.m_k(),
            bounds: BoundsInfo { v_max: sc.bounds.v_max(), omega_max: sc.bounds.omega_max() },
            tick_dt: sc.tick_dt,
            thresholds: sc.thresholds,
            arena: sc.arena,
            obstacles: sc.obstacles.clone(),
            policies: sc
                .policies
                .ids()
                .map(|id| sc.policies.kind(id).map(|k| format!("{k:?}")).unwrap_or_default())
                .collect(),
            hold_timeout,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Margins {
    pub flow_min: f64,
    pub terminal: f64,
}

/// Feedback level derived from `h` and the scenario thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cue {
    None,
    Warn,
    Alert,
}

impl Cue {
    pub fn for_h(h: f64, t: &FeedbackThresholds) -> Self {
        if h < t.alert_h {
            Cue::Alert
        } else if h < t.warn_h {
            Cue::Warn
        } else {
            Cue::None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateFrame {
    pub tick: u64,
    pub t: f64,
    pub pose: [f64; 3],
    pub u_d: [f64; 2],
    pub u_safe: [f64; 2],
    pub active: usize,
    pub rewards: Vec<f64>,
    pub h: f64,
    /// `tanh(h)`, the saturated safety value shown on the dial.
    pub dial: f64,
    pub margins: Margins,
    pub feasible: bool,
    pub cue: Cue,
    /// Label in force on this tick, if the driver has pressed one.
    pub label: Option<usize>,
    /// Highest driver `seq` applied up to and including this tick.
    pub ack_seq: Option<u64>,
}

impl StateFrame {
    pub fn from_record(r: &TickRecord, thresholds: &FeedbackThresholds, ack_seq: Option<u64>) -> Self {
        Self {
            tick: r.tick,
            t: r.t,
            pose: [r.state.x, r.state.y, r.state.theta],
            u_d: [r.u_d.v, r.u_d.omega],
            u_safe: [r.u_safe.v, r.u_safe.omega],
            active: r.active.0,
            rewards: r.rewards.clone(),
            h: r.h,
            dial: r.h.tanh(),
            margins: Margins { flow_min: r.flow_min, terminal: r.terminal },
            feasible: r.feasible,
            cue: Cue::for_h(r.h, thresholds),
            label: r.label.map(|l| l.0),
            ack_seq,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowPolyline {
    pub policy: usize,
    pub points: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowsFrame {
    pub tick: u64,
    pub flows: Vec<FlowPolyline>,
}

impl FlowsFrame {
    /// Backup flows of every policy from `x`, against the nearest obstacle.
    pub fn compute(tick: u64, x: &crate::dynamics::State, sc: &Scenario) -> Self {
        let nearest = sc
            .obstacles
            .iter()
            .min_by(|a, b| h_distance(x, a).total_cmp(&h_distance(x, b)))
            .expect("scenarios have obstacles");
        let cfg = sc.filter.flow();
        let flows = sc
            .policies
            .ids()
            .filter_map(|id| {
                let f = integrate_backup_flow(x, id, nearest, &sc.policies, &cfg).ok()?;
                Some(FlowPolyline { policy: id.0, points: f.samples.iter().map(|s| s.state.position()).collect() })
            })
            .collect();
        Self { tick, flows }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorFrame {
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WireMessage {
    Config(ConfigFrame),
    State(StateFrame),
    Switch(SwitchEvent),
    Flows(FlowsFrame),
    Error(ErrorFrame),
    Cmd { v: f64, w: f64, seq: u64 },
    Label { policy: usize, seq: u64 },
}

impl WireMessage {
    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("wire messages serialize");
        s.push('\n');
        s
    }

    pub fn parse(line: &str) -> serde_json::Result<Self> {
        serde_json::from_str(line.trim_end())
    }

    /// Whether a client is allowed to send this message.
    pub fn is_client_message(&self) -> bool {
        matches!(self, WireMessage::Cmd { .. } | WireMessage::Label { .. })
    }
}
