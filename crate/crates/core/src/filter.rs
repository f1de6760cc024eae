//! The backup-CBF quadratic program.
//!
//! For the active backup policy the filter integrates the backup flow
//! from the current state (one flow per obstacle, since each backup law is
//! defined relative to an obstacle) and asks that the input keeps every
//! sampled point of that flow from degrading faster than a linear class-K
//! rate:
//!
//! ```text
//! (dh/dx(phi_i) Q_i) (f(x) + g(x) u) >= -alpha (h(phi_i) - delta)   for each tau_i
//! (dh_b/dx(phi_N) Q_N) (f(x) + g(x) u) >= -alpha_b h_b(phi_N)
//! ```
//!
//! where `Q_i` is the flow sensitivity. The safe input is the Euclidean
//! projection of the desired input onto those half-planes and the input box.

use nalgebra::RowVector3;
use serde::{Deserialize, Serialize};

use crate::dynamics::{drift, input_matrix, Input, InputBounds, State};
use crate::error::{Error, Result};
use crate::flow::{integrate_backup_flow, FlowConfig, FlowResult, JacobianMethod};
use crate::policy::{h_distance, h_distance_gradient, h_min, Obstacle, PolicyId, PolicySet};
use crate::qp::{solve, HalfPlane, QProblem};

/// What the filter does when the QP has no solution.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfeasibleFallback {
    /// Apply the active backup controller for this tick.
    #[default]
    ApplyBackup,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    /// Backup horizon `T` in seconds.
    pub horizon: f64,
    pub n_tau: usize,
    pub max_dt: f64,
    pub jacobian: JacobianMethod,
    /// Gain of the class-K function on the flow rows (1/s).
    pub alpha_gain: f64,
    /// Gain of the class-K function on the terminal row (1/s).
    pub alpha_b_gain: f64,
    pub bounds: InputBounds,
    /// Uniform margin subtracted from `h` along the flow.
    pub tighten_margin: f64,
    pub infeasible_fallback: InfeasibleFallback,
}

impl Default for FilterConfig {
    fn default() -> Self {
        let flow = FlowConfig::default();
        Self {
            horizon: flow.horizon,
            n_tau: flow.n_tau,
            max_dt: flow.max_dt,
            jacobian: flow.jacobian,
            alpha_gain: 1.0,
            alpha_b_gain: 1.0,
            bounds: InputBounds::default(),
            tighten_margin: 0.0,
            infeasible_fallback: InfeasibleFallback::ApplyBackup,
        }
    }
}

impl FilterConfig {
    pub fn flow(&self) -> FlowConfig {
        FlowConfig { horizon: self.horizon, n_tau: self.n_tau, max_dt: self.max_dt, jacobian: self.jacobian }
    }

    pub fn validate(&self) -> Result<()> {
        self.flow().validate()?;
        for (name, gain) in [("alpha_gain", self.alpha_gain), ("alpha_b_gain", self.alpha_b_gain)] {
            if !(gain > 0.0 && gain.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {gain}")));
            }
        }
        if !(self.tighten_margin >= 0.0 && self.tighten_margin.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "tighten_margin must be non-negative, got {}",
                self.tighten_margin
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterOutput {
    pub u_safe: Input,
    pub feasible: bool,
    /// `h(x)`, minimum over obstacles.
    pub h_now: f64,
    /// `min_i h(phi_b(tau_i, x))`.
    pub min_flow_margin: f64,
    /// `h_b(phi_b(T, x))`.
    pub terminal_margin: f64,
    /// `|u_safe - u_d|` with `u_d` after clamping.
    pub intervention: f64,
}

/// Constraints and margins of one backup policy at one state.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyEvaluation {
    pub policy: PolicyId,
    pub constraints: Vec<HalfPlane>,
    pub min_flow_margin: f64,
    pub terminal_margin: f64,
}

impl PolicyEvaluation {
    /// Whether the state lies in the implicit safe set of the policy.
    pub fn in_safe_set(&self) -> bool {
        self.min_flow_margin >= 0.0 && self.terminal_margin >= 0.0
    }

    pub fn qp(&self, u_d: Input, bounds: InputBounds) -> QProblem {
        QProblem { target: bounds.clamp(u_d), constraints: self.constraints.clone(), bounds }
    }
}

fn row(grad: RowVector3<f64>, flow_sample_q: &nalgebra::Matrix3<f64>, x: &State, rate_bound: f64) -> HalfPlane {
    let lhs = grad * flow_sample_q;
    let a = lhs * input_matrix(x);
    let lf = (lhs * drift(x))[0];
    HalfPlane::new([a[0], a[1]], rate_bound - lf)
}

/// Rows for one flow, in `tau` order, followed by the terminal row.
pub fn assemble_constraints(
    flow: &FlowResult,
    x: &State,
    o: &Obstacle,
    cfg: &FilterConfig,
    policies: &PolicySet,
) -> Result<Vec<HalfPlane>> {
    let mut rows = Vec::with_capacity(flow.samples.len() + 1);
    for sample in &flow.samples {
        let h = h_distance(&sample.state, o);
        let grad = h_distance_gradient(&sample.state, o)?;
        rows.push(row(grad, &sample.sensitivity, x, -cfg.alpha_gain * (h - cfg.tighten_margin)));
    }
    let end = flow.terminal();
    let hb = policies.barrier(flow.policy, &end.state, o)?;
    let grad = policies.barrier_gradient(flow.policy, &end.state, o)?;
    rows.push(row(grad, &end.sensitivity, x, -cfg.alpha_b_gain * hb));
    Ok(rows)
}

/// Integrate the flows of `policy` (one per obstacle) and assemble all
/// constraint rows and margins.
pub fn evaluate_policy(
    x: &State,
    policy: PolicyId,
    obstacles: &[Obstacle],
    cfg: &FilterConfig,
    policies: &PolicySet,
) -> Result<PolicyEvaluation> {
    let flow_cfg = cfg.flow();
    let mut eval = PolicyEvaluation {
        policy,
        constraints: Vec::with_capacity(obstacles.len() * (cfg.n_tau + 2)),
        min_flow_margin: f64::INFINITY,
        terminal_margin: f64::INFINITY,
    };
    for o in obstacles {
        let flow = integrate_backup_flow(x, policy, o, policies, &flow_cfg)?;
        for s in &flow.samples {
            eval.min_flow_margin = eval.min_flow_margin.min(h_distance(&s.state, o));
        }
        let hb = policies.barrier(policy, &flow.terminal().state, o)?;
        eval.terminal_margin = eval.terminal_margin.min(hb);
        eval.constraints.extend(assemble_constraints(&flow, x, o, cfg, policies)?);
    }
    Ok(eval)
}

/// Backup input of `policy` relative to the nearest obstacle, or zero when
/// the geometry is degenerate.
pub fn fallback_input(x: &State, policy: PolicyId, obstacles: &[Obstacle], policies: &PolicySet) -> Input {
    let nearest = obstacles.iter().min_by(|a, b| h_distance(x, a).total_cmp(&h_distance(x, b)));
    match nearest.map(|o| policies.control(policy, x, o)) {
        Some(Ok(u)) if u.is_finite() => policies.params.bounds.clamp(u),
        _ => Input::ZERO,
    }
}

/// Run the safety filter for one tick.
///
/// Errors only on non-finite inputs or an unknown policy; geometric
/// degeneracy is reported through the fallback branch.
pub fn filter(
    x: &State,
    u_d: Input,
    active: PolicyId,
    obstacles: &[Obstacle],
    cfg: &FilterConfig,
    policies: &PolicySet,
) -> Result<FilterOutput> {
    if !x.is_finite() {
        return Err(Error::NonFinite("filter state"));
    }
    if !u_d.is_finite() {
        return Err(Error::NonFinite("desired input"));
    }
    policies.kind(active)?;
    let u_d = cfg.bounds.clamp(u_d);
    let h_now = h_min(x, obstacles);

    let (u_safe, feasible, min_flow_margin, terminal_margin) = match evaluate_policy(x, active, obstacles, cfg, policies) {
        Ok(eval) => {
            let sol = solve(&eval.qp(u_d, cfg.bounds));
            if sol.feasible {
                (sol.u_star, true, eval.min_flow_margin, eval.terminal_margin)
            } else {
                let u = cfg.bounds.clamp(fallback_input(x, active, obstacles, policies));
                (u, false, eval.min_flow_margin, eval.terminal_margin)
            }
        }
        Err(Error::UnknownPolicy { index, count }) => return Err(Error::UnknownPolicy { index, count }),
        Err(_) => {
            let u = cfg.bounds.clamp(fallback_input(x, active, obstacles, policies));
            (u, false, f64::NEG_INFINITY, f64::NEG_INFINITY)
        }
    };
    Ok(FilterOutput {
        u_safe,
        feasible,
        h_now,
        min_flow_margin,
        terminal_margin,
        intervention: u_safe.norm_to(&u_d),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{step_closed_loop, ConstantInput};
    use crate::flow::flow_state;
    use proptest::prelude::*;

    fn origin() -> Obstacle {
        Obstacle::new([0.0, 0.0], 0.5).unwrap()
    }

    #[test]
    fn far_from_obstacle_passes_input_through() {
        let x = State::new(-3.5, 3.0, 0.3);
        let u_d = Input::new(0.31, -0.7);
        let policies = PolicySet::default();
        for id in policies.ids() {
            let out = filter(&x, u_d, id, &[origin()], &FilterConfig::default(), &policies).unwrap();
            assert!(out.feasible);
            assert_eq!(out.u_safe, u_d);
            assert_eq!(out.intervention, 0.0);
        }
    }

    #[test]
    fn far_rows_have_very_negative_offsets() {
        let x = State::new(30.0, -20.0, 1.0);
        let policies = PolicySet::default();
        let eval = evaluate_policy(&x, PolicyId(1), &[origin()], &FilterConfig::default(), &policies).unwrap();
        let b = policies.params.bounds;
        for c in &eval.constraints[..eval.constraints.len() - 1] {
            let worst = c.a[0].abs() * b.v_max() + c.a[1].abs() * b.omega_max();
            assert!(c.b < -worst, "{c:?}");
        }
    }

    #[test]
    fn first_row_is_the_plain_cbf_condition() {
        let cfg = FilterConfig { n_tau: 1, ..FilterConfig::default() };
        let policies = PolicySet::default();
        let x = State::new(-0.7, 0.2, 0.4);
        let eval = evaluate_policy(&x, PolicyId(0), &[origin()], &cfg, &policies).unwrap();
        let lgh = h_distance_gradient(&x, &origin()).unwrap() * input_matrix(&x);
        assert!((eval.constraints[0].a[0] - lgh[0]).abs() < 1e-15);
        assert!((eval.constraints[0].a[1] - lgh[1]).abs() < 1e-15);
        assert!((eval.constraints[0].b + h_distance(&x, &origin())).abs() < 1e-15);
    }

    #[test]
    fn rows_match_finite_differences_of_flow_barrier() {
        let policies = PolicySet::default();
        let cfg = FilterConfig::default();
        let o = origin();
        let x = State::new(-1.2, 0.4, 0.5);
        for id in policies.ids() {
            let law = policies.law(id, &o).unwrap();
            let eval = evaluate_policy(&x, id, &[o], &cfg, &policies).unwrap();
            let g = input_matrix(&x);
            for (i, c) in eval.constraints.iter().take(cfg.n_tau + 1).enumerate() {
                let tau = i as f64 * cfg.horizon / cfg.n_tau as f64;
                let step = 1e-5;
                let mut grad = RowVector3::zeros();
                for j in 0..3 {
                    let mut plus = x.to_vector();
                    let mut minus = x.to_vector();
                    plus[j] += step;
                    minus[j] -= step;
                    let hp = h_distance(&flow_state(&State::from_vector(&plus), &law, tau, cfg.max_dt).unwrap(), &o);
                    let hm = h_distance(&flow_state(&State::from_vector(&minus), &law, tau, cfg.max_dt).unwrap(), &o);
                    grad[j] = (hp - hm) / (2.0 * step);
                }
                let a = grad * g;
                assert!((a[0] - c.a[0]).abs() < 1e-4, "{id} tau={tau}: {a} vs {:?}", c.a);
                assert!((a[1] - c.a[1]).abs() < 1e-4, "{id} tau={tau}: {a} vs {:?}", c.a);
            }
        }
    }

    #[test]
    fn backup_input_is_not_modified_deep_in_safe_set() {
        let policies = PolicySet::default();
        let cfg = FilterConfig::default();
        let o = origin();
        for (id, x) in [
            (PolicyId(0), State::new(-2.0, 0.5, 3.0)),
            (PolicyId(1), State::new(-2.0, 0.5, 3.0)),
            (PolicyId(2), State::new(-2.0, 0.5, 0.1)),
        ] {
            let mut s = x;
            for _ in 0..40 {
                let u_b = policies.control(id, &s, &o).unwrap();
                let out = filter(&s, u_b, id, &[o], &cfg, &policies).unwrap();
                assert!(out.feasible && out.min_flow_margin > 0.0 && out.terminal_margin > 0.0);
                assert!(out.intervention <= 1e-6, "{id}: {out:?}");
                s = step_closed_loop(&s, &ConstantInput(out.u_safe), 0.05).unwrap();
            }
        }
    }

    #[test]
    fn adversarial_driver_never_enters_the_obstacle() {
        let policies = PolicySet::default();
        let cfg = FilterConfig::default();
        let o = origin();
        for id in policies.ids() {
            // Start 0.3 m from the surface, offset so the start lies in the
            // implicit safe set of every policy.
            let mut s = State::new(-0.8, 0.05, 0.1);
            let mut min_h = f64::INFINITY;
            for _ in 0..200 {
                let aim = (-s.y).atan2(-s.x);
                let u_d = Input::new(0.5, 2.0 * crate::dynamics::wrap_angle(aim - s.theta));
                let out = filter(&s, u_d, id, &[o], &cfg, &policies).unwrap();
                assert!(cfg.bounds.contains(&out.u_safe));
                s = step_closed_loop(&s, &ConstantInput(out.u_safe), 0.05).unwrap();
                min_h = min_h.min(h_distance(&s, &o));
            }
            assert!(min_h >= 0.0, "{id}: min h = {min_h}");
        }
    }

    #[test]
    fn degenerate_flow_falls_back_to_zero() {
        let policies = PolicySet::default();
        let x = State::new(0.0, 0.0, 0.0);
        let out = filter(&x, Input::new(0.5, 0.0), PolicyId(0), &[origin()], &FilterConfig::default(), &policies).unwrap();
        assert!(!out.feasible);
        assert_eq!(out.u_safe, Input::ZERO);
    }

    #[test]
    fn rejects_bad_configuration() {
        for cfg in [
            FilterConfig { alpha_gain: 0.0, ..Default::default() },
            FilterConfig { alpha_b_gain: f64::NAN, ..Default::default() },
            FilterConfig { tighten_margin: -0.1, ..Default::default() },
            FilterConfig { n_tau: 0, ..Default::default() },
        ] {
            assert!(cfg.validate().is_err());
        }
    }

    fn arb_state() -> impl Strategy<Value = State> {
        (-2.5..2.5f64, -2.5..2.5f64, -3.1..3.1f64).prop_map(|(x, y, t)| State::new(x, y, t))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn output_respects_bounds(s in arb_state(), v in -3.0..3.0f64, w in -3.0..3.0f64, id in 0usize..3) {
            let policies = PolicySet::default();
            let cfg = FilterConfig::default();
            let out = filter(&s, Input::new(v, w), PolicyId(id), &[origin()], &cfg, &policies).unwrap();
            prop_assert!(cfg.bounds.contains(&out.u_safe));
        }

        #[test]
        fn minimal_intervention_is_bitwise(s in arb_state(), v in -0.5..0.5f64, w in -1.0..1.0f64, id in 0usize..3) {
            let policies = PolicySet::default();
            let cfg = FilterConfig::default();
            let u_d = Input::new(v, w);
            let Ok(eval) = evaluate_policy(&s, PolicyId(id), &[origin()], &cfg, &policies) else { return Ok(()) };
            prop_assume!(eval.constraints.iter().all(|c| c.slack([v, w]) >= 0.0));
            let out = filter(&s, u_d, PolicyId(id), &[origin()], &cfg, &policies).unwrap();
            prop_assert_eq!(out.u_safe, u_d);
        }

        #[test]
        fn larger_gain_never_tightens_inside_safe_set(s in arb_state(), id in 0usize..3, scale in 1.0..10.0f64) {
            let policies = PolicySet::default();
            let base = FilterConfig::default();
            let Ok(lo) = evaluate_policy(&s, PolicyId(id), &[origin()], &base, &policies) else { return Ok(()) };
            prop_assume!(lo.in_safe_set());
            let big = FilterConfig { alpha_gain: base.alpha_gain * scale, alpha_b_gain: base.alpha_b_gain * scale, ..base };
            let hi = evaluate_policy(&s, PolicyId(id), &[origin()], &big, &policies).unwrap();
            for (a, b) in lo.constraints.iter().zip(&hi.constraints) {
                prop_assert_eq!(a.a, b.a);
                prop_assert!(b.b <= a.b);
            }
        }
    }
}
