//! Selection of the active backup controller.
//!
//! Each tick the reward model scores every backup controller. The governor
//! proposes the best-scoring one and switches to it only when the
//! candidate's backup flow certifies the current state and its filter QP
//! is solvable for the current desired input. A dwell time suppresses
//! chattering between nearly tied rewards.

use serde::{Deserialize, Serialize};

use crate::dynamics::{Input, State};
use crate::error::{Error, Result};
use crate::filter::{evaluate_policy, FilterConfig};
use crate::policy::{Obstacle, PolicyId, PolicySet};
use crate::qp::solve;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GovernorConfig {
    /// Minimum number of ticks between executed switches.
    pub dwell_ticks: u32,
    /// When the best proposal fails validation, try the next best ones
    /// that still outscore the active controller.
    pub try_runner_up: bool,
}

impl Default for GovernorConfig {
    fn default() -> Self {
        Self { dwell_ticks: 10, try_runner_up: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwitchState {
    pub active: PolicyId,
    pub dwell_remaining: u32,
    pub last_switch_tick: Option<u64>,
    /// Tick index of the next call to [`step`].
    pub tick: u64,
    pub rejected_switches: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchEvent {
    pub tick: u64,
    pub from: PolicyId,
    pub to: PolicyId,
    pub rewards: Vec<f64>,
    pub validated: bool,
}

impl SwitchState {
    /// Start with `initial` active, failing if `x` is outside its implicit
    /// safe set.
    pub fn initialize(
        x: &State,
        initial: PolicyId,
        obstacles: &[Obstacle],
        cfg: &FilterConfig,
        policies: &PolicySet,
    ) -> Result<Self> {
        let eval = evaluate_policy(x, initial, obstacles, cfg, policies).map_err(|e| match e {
            Error::UnknownPolicy { .. } => e,
            other => Error::InvalidScenario(format!("cannot evaluate {initial} at the start state: {other}")),
        })?;
        if !eval.in_safe_set() {
            return Err(Error::InvalidScenario(format!(
                "start state is outside the implicit safe set of {initial} \
                 (flow margin {:.4}, terminal margin {:.4})",
                eval.min_flow_margin, eval.terminal_margin
            )));
        }
        Ok(Self::unchecked(initial))
    }

    /// Start with `initial` active without checking the start state.
    pub fn unchecked(initial: PolicyId) -> Self {
        Self { active: initial, dwell_remaining: 0, last_switch_tick: None, tick: 0, rejected_switches: 0 }
    }
}

fn check_rewards(rewards: &[f64]) -> Result<()> {
    if rewards.is_empty() {
        return Err(Error::InvalidParameter("reward vector is empty".into()));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite("rewards"));
    }
    Ok(())
}

/// Index of the largest reward; ties go to `active`, then to the lowest
/// index.
pub fn propose(rewards: &[f64], active: PolicyId) -> Result<PolicyId> {
    check_rewards(rewards)?;
    let best = rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if rewards.get(active.0) == Some(&best) {
        return Ok(active);
    }
    Ok(PolicyId(rewards.iter().position(|&r| r == best).expect("maximum is attained")))
}

/// Whether switching to `candidate` at `x` is certified: its flow margins
/// are non-negative and its filter QP is feasible at `u_d`.
pub fn validate_switch(
    x: &State,
    candidate: PolicyId,
    u_d: Input,
    obstacles: &[Obstacle],
    cfg: &FilterConfig,
    policies: &PolicySet,
) -> bool {
    match evaluate_policy(x, candidate, obstacles, cfg, policies) {
        Ok(eval) => eval.in_safe_set() && solve(&eval.qp(u_d, cfg.bounds)).feasible,
        Err(_) => false,
    }
}

/// Advance the governor by one tick.
#[allow(clippy::too_many_arguments)]
pub fn step(
    ss: &SwitchState,
    rewards: &[f64],
    x: &State,
    u_d: Input,
    obstacles: &[Obstacle],
    cfg: &FilterConfig,
    gov: &GovernorConfig,
    policies: &PolicySet,
) -> Result<(SwitchState, Option<SwitchEvent>)> {
    check_rewards(rewards)?;
    if rewards.len() != policies.len() {
        return Err(Error::InvalidParameter(format!(
            "expected {} rewards, got {}",
            policies.len(),
            rewards.len()
        )));
    }
    let mut next = SwitchState { tick: ss.tick + 1, ..*ss };
    if ss.dwell_remaining > 0 {
        next.dwell_remaining -= 1;
        return Ok((next, None));
    }
    let proposal = propose(rewards, ss.active)?;
    if proposal == ss.active {
        return Ok((next, None));
    }

    let mut candidates = vec![proposal];
    if gov.try_runner_up {
        let mut rest: Vec<PolicyId> = policies
            .ids()
            .filter(|&id| id != proposal && id != ss.active && rewards[id.0] > rewards[ss.active.0])
            .collect();
        // Stable sort keeps lower indices first among equal rewards.
        rest.sort_by(|a, b| rewards[b.0].total_cmp(&rewards[a.0]));
        candidates.extend(rest);
    }
    for candidate in candidates {
        if validate_switch(x, candidate, u_d, obstacles, cfg, policies) {
            next.active = candidate;
            next.dwell_remaining = gov.dwell_ticks;
            next.last_switch_tick = Some(ss.tick);
            let event = SwitchEvent { tick: ss.tick, from: ss.active, to: candidate, rewards: rewards.to_vec(), validated: true };
            return Ok((next, Some(event)));
        }
    }
    next.rejected_switches += 1;
    Ok((next, None))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::flow_state;
    use crate::policy::h_distance;

    fn origin() -> Obstacle {
        Obstacle::new([0.0, 0.0], 0.5).unwrap()
    }

    #[test]
    fn propose_examples() {
        assert_eq!(propose(&[0.2, 0.9, 0.4], PolicyId(0)).unwrap(), PolicyId(1));
        assert_eq!(propose(&[0.5, 0.5, 0.1], PolicyId(1)).unwrap(), PolicyId(1));
        assert_eq!(propose(&[0.5, 0.5, 0.5], PolicyId(2)).unwrap(), PolicyId(2));
        assert_eq!(propose(&[0.5, 0.5, 0.1], PolicyId(2)).unwrap(), PolicyId(0));
        assert!(propose(&[], PolicyId(0)).is_err());
        assert!(propose(&[f64::NAN, 0.1], PolicyId(0)).is_err());
    }

    #[test]
    fn far_states_validate_every_candidate() {
        let x = State::new(3.0, -3.0, 2.0);
        let policies = PolicySet::default();
        for id in policies.ids() {
            assert!(validate_switch(&x, id, Input::new(0.5, 1.0), &[origin()], &FilterConfig::default(), &policies));
        }
    }

    /// Independent check: sample the candidate flow directly and test the
    /// margins, without the filter machinery.
    fn direct_flow_check(x: &State, id: PolicyId, cfg: &FilterConfig, policies: &PolicySet) -> bool {
        let o = origin();
        let law = policies.law(id, &o).unwrap();
        let mut ok = true;
        for i in 0..=cfg.n_tau {
            let tau = i as f64 * cfg.horizon / cfg.n_tau as f64;
            let s = flow_state(x, &law, tau, cfg.max_dt).unwrap();
            ok &= h_distance(&s, &o) >= 0.0;
            if i == cfg.n_tau {
                ok &= policies.barrier(id, &s, &o).unwrap() >= 0.0;
            }
        }
        ok
    }

    #[test]
    fn validation_matches_direct_flow_simulation() {
        let policies = PolicySet::default();
        let cfg = FilterConfig::default();
        for (x, id) in [
            (State::new(-0.52, 0.02, 0.0), PolicyId(0)),
            (State::new(-0.52, 0.1, -0.2), PolicyId(0)),
            (State::new(-0.6, 0.0, std::f64::consts::PI), PolicyId(2)),
            (State::new(-1.5, 0.3, 0.0), PolicyId(1)),
        ] {
            // The QP at the backup input itself is feasible whenever the
            // margins are, so the flow check decides the outcome.
            let u_b = policies.control(id, &x, &origin()).unwrap();
            assert_eq!(
                validate_switch(&x, id, u_b, &[origin()], &cfg, &policies),
                direct_flow_check(&x, id, &cfg, &policies),
                "{x:?} {id}"
            );
        }
    }

    #[test]
    fn reverse_flow_through_obstacle_is_rejected() {
        let policies = PolicySet::default();
        let cfg = FilterConfig::default();
        // Adjacent to the obstacle and facing away: reversing drives into it.
        let x = State::new(-0.55, 0.0, std::f64::consts::PI);
        assert!(!direct_flow_check(&x, PolicyId(2), &cfg, &policies));
        assert!(!validate_switch(&x, PolicyId(2), Input::ZERO, &[origin()], &cfg, &policies));

        let ss = SwitchState::unchecked(PolicyId(0));
        let (next, event) =
            step(&ss, &[0.1, 0.2, 0.9], &x, Input::ZERO, &[origin()], &cfg, &GovernorConfig::default(), &policies)
                .unwrap();
        assert!(event.is_none());
        assert_eq!(next.active, PolicyId(0));
        assert_eq!(next.rejected_switches, 1);
    }

    #[test]
    fn step_rules() {
        let policies = PolicySet::default();
        let cfg = FilterConfig::default();
        let gov = GovernorConfig::default();
        let x = State::new(3.0, 3.0, 0.0);
        let u = Input::new(0.2, 0.0);
        let ss = SwitchState::unchecked(PolicyId(0));

        let (same, event) = step(&ss, &[0.9, 0.1, 0.1], &x, u, &[origin()], &cfg, &gov, &policies).unwrap();
        assert!(event.is_none());
        assert_eq!(same, SwitchState { tick: 1, ..ss });

        let (switched, event) = step(&ss, &[0.1, 0.9, 0.1], &x, u, &[origin()], &cfg, &gov, &policies).unwrap();
        let event = event.unwrap();
        assert_eq!((event.from, event.to, event.tick, event.validated), (PolicyId(0), PolicyId(1), 0, true));
        assert_eq!(switched.dwell_remaining, gov.dwell_ticks);
        assert_eq!(switched.last_switch_tick, Some(0));

        // During the dwell period nothing changes even with a strong proposal.
        let mut s = switched;
        for _ in 0..gov.dwell_ticks {
            let (n, e) = step(&s, &[0.0, 0.0, 1.0], &x, u, &[origin()], &cfg, &gov, &policies).unwrap();
            assert!(e.is_none());
            s = n;
        }
        let (n, e) = step(&s, &[0.0, 0.0, 1.0], &x, u, &[origin()], &cfg, &gov, &policies).unwrap();
        assert_eq!(e.unwrap().tick, u64::from(gov.dwell_ticks) + 1);
        assert_eq!(n.active, PolicyId(2));

        assert!(step(&ss, &[0.1, 0.9], &x, u, &[origin()], &cfg, &gov, &policies).is_err());
    }

    #[test]
    fn runner_up_is_tried_only_when_enabled() {
        let policies = PolicySet::default();
        let cfg = FilterConfig::default();
        let x = State::new(-0.55, 0.0, std::f64::consts::PI);
        let ss = SwitchState::unchecked(PolicyId(0));
        let rewards = [0.1, 0.5, 0.9];
        let gov = GovernorConfig { try_runner_up: true, ..Default::default() };
        let (next, event) = step(&ss, &rewards, &x, Input::ZERO, &[origin()], &cfg, &gov, &policies).unwrap();
        assert_eq!(event.map(|e| e.to), Some(PolicyId(1)));
        assert_eq!(next.active, PolicyId(1));
    }

    #[test]
    fn initialization_checks_the_safe_set() {
        let policies = PolicySet::default();
        let cfg = FilterConfig::default();
        assert!(SwitchState::initialize(&State::new(-2.5, 0.0, std::f64::consts::FRAC_PI_2), PolicyId(0), &[origin()], &cfg, &policies).is_ok());
        let head_on = State::new(-0.6, 0.0, 0.0);
        assert!(matches!(
            SwitchState::initialize(&head_on, PolicyId(0), &[origin()], &cfg, &policies),
            Err(Error::InvalidScenario(_))
        ));
        assert!(matches!(
            SwitchState::initialize(&head_on, PolicyId(7), &[origin()], &cfg, &policies),
            Err(Error::UnknownPolicy { .. })
        ));
    }
}
