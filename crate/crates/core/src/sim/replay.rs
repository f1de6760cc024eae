//! Re-simulation of recorded episodes.

use serde::{Deserialize, Serialize};

use super::episode::{EpisodeLog, EpisodeRunner, LogHeader, Selector, TickRecord, ENGINE_VERSION};
use crate::error::{Error, Result};
use crate::intent::RewardModel;

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayReport {
    pub log: EpisodeLog,
    /// First tick whose re-simulated record differs from the recording.
    pub first_divergence: Option<u64>,
    pub counterfactual: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    BitExact,
    Diverged,
    Counterfactual,
}

impl ReplayReport {
    pub fn bit_exact(&self) -> bool {
        self.first_divergence.is_none()
    }

    pub fn verdict(&self) -> Verdict {
        match (self.counterfactual, self.first_divergence) {
            (true, _) => Verdict::Counterfactual,
            (false, None) => Verdict::BitExact,
            (false, Some(_)) => Verdict::Diverged,
        }
    }
}

fn records_equal(a: &TickRecord, b: &TickRecord) -> bool {
    // Compare the serialized form so that NaN payloads and signed zeros count.
    a == b && serde_json::to_string(a).ok() == serde_json::to_string(b).ok()
}

/// Re-run the recorded command and label streams through the current
/// engine. With `model` set to a different reward model than the one
/// recorded, the result is a counterfactual episode.
pub fn replay(log: &EpisodeLog, model: Option<&RewardModel>) -> Result<ReplayReport> {
    let h = &log.header;
    if h.engine_version != ENGINE_VERSION {
        return Err(Error::VersionMismatch { expected: ENGINE_VERSION.into(), found: h.engine_version.clone() });
    }
    if h.selector == Selector::Model && model.is_none() {
        return Err(Error::InvalidParameter("log was recorded with a reward model; supply one to replay".into()));
    }
    let counterfactual = h.selector == Selector::Model
        && model.map(RewardModel::fingerprint) != h.model_fingerprint;
    let model = if h.selector == Selector::Model { model } else { None };

    let mut runner = EpisodeRunner::new(&h.scenario, model, h.selector)?;
    let mut ticks = Vec::with_capacity(log.ticks.len());
    let mut first_divergence = None;
    for rec in &log.ticks {
        let r = runner.step(rec.u_d, rec.label)?;
        if first_divergence.is_none() && !records_equal(&r, rec) {
            first_divergence = Some(rec.tick);
        }
        ticks.push(r);
    }
    let final_state = runner.state();
    if first_divergence.is_none() && final_state != log.final_state {
        first_divergence = Some(log.ticks.len() as u64);
    }
    Ok(ReplayReport {
        log: EpisodeLog {
            header: LogHeader {
                model_fingerprint: model.map(RewardModel::fingerprint),
                counterfactual,
                ..h.clone()
            },
            ticks,
            final_state,
            rejected_switches: runner.switch_state().rejected_switches,
        },
        first_divergence,
        counterfactual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::Input;
    use crate::sim::driver::{DriverKind, DriverSpec};
    use crate::sim::episode::{run_episode, EpisodeOptions};
    use crate::sim::scenario::Scenario;

    fn recorded() -> EpisodeLog {
        let sc = Scenario::default();
        let d = DriverSpec::new(DriverKind::Rammer { speed: 0.5 }).with_noise(0.1);
        run_episode(&sc, &d, EpisodeOptions::new(None, 8.0, 4)).unwrap()
    }

    #[test]
    fn fresh_log_replays_bit_exactly() {
        let log = recorded();
        let r = replay(&log, None).unwrap();
        assert_eq!(r.verdict(), Verdict::BitExact);
        assert_eq!(r.log, log);
    }

    #[test]
    fn perturbed_command_is_reported_at_its_tick() {
        let mut log = recorded();
        log.ticks[37].u_d = Input::new(log.ticks[37].u_d.v, log.ticks[37].u_d.omega + 1e-3);
        let r = replay(&log, None).unwrap();
        assert_eq!(r.first_divergence, Some(37));
        assert_eq!(r.verdict(), Verdict::Diverged);
    }

    #[test]
    fn engine_version_mismatch_is_refused() {
        let mut log = recorded();
        log.header.engine_version = "0.0.0-other".into();
        assert!(matches!(replay(&log, None), Err(Error::VersionMismatch { .. })));
    }

    #[test]
    fn different_model_gives_a_flagged_counterfactual() {
        use rand::SeedableRng;
        let cfg = crate::intent::ModelConfig::default();
        let a = RewardModel::new(cfg.clone(), &mut rand_chacha::ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = RewardModel::new(cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(2)).unwrap();
        let sc = Scenario::default();
        let d = DriverSpec::new(DriverKind::Orbiter { radius: 1.2, direction: 1.0 });
        let log = run_episode(&sc, &d, EpisodeOptions::new(Some(&a), 3.0, 0)).unwrap();
        assert!(replay(&log, None).is_err());
        let same = replay(&log, Some(&a)).unwrap();
        assert_eq!(same.verdict(), Verdict::BitExact);
        let other = replay(&log, Some(&b)).unwrap();
        assert!(other.counterfactual && other.log.header.counterfactual);
        assert_eq!(other.verdict(), Verdict::Counterfactual);
        assert_eq!(other.log.header.model_fingerprint, Some(b.fingerprint()));
        assert_ne!(other.log.ticks[20].rewards, log.ticks[20].rewards);
    }
}
