//! Backup flows `phi_b(tau, x)` and their sensitivities `d phi_b / dx`.
//!
//! The sensitivity matrix obeys the variational equation
//! `Q' = (d f_b / dx)(phi) Q`, `Q(0) = I`, and is integrated jointly with the
//! flow by the same RK4 scheme, so it is the exact derivative of the
//! discrete flow map up to the accuracy of the closed-loop Jacobian.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    analytic_closed_loop_jacobian, closed_loop_jacobian, step_closed_loop, vector_field, ControlLaw, State, FLOW_DT,
};
use crate::error::{Error, Result};
use crate::policy::{Obstacle, PolicyId, PolicySet};

/// Perturbation used by [`sensitivity_fd_oracle`].
pub const ORACLE_PERTURBATION: f64 = 1e-5;

/// How `d f_b / dx` is obtained inside the variational equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JacobianMethod {
    /// Use the law's analytic Jacobian, falling back to finite differences
    /// when it has none.
    #[default]
    Analytic,
    FiniteDifference,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    /// Backup horizon `T` (s).
    pub horizon: f64,
    /// Number of constraint intervals `N_tau`.
    pub n_tau: usize,
    /// Upper bound on the RK4 step (s).
    #[serde(default = "default_max_dt")]
    pub max_dt: f64,
    #[serde(default)]
    pub jacobian: JacobianMethod,
}

fn default_max_dt() -> f64 {
    FLOW_DT
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self { horizon: 2.0, n_tau: 20, max_dt: FLOW_DT, jacobian: JacobianMethod::Analytic }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) || self.n_tau == 0 || !(self.max_dt > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "flow horizon and max_dt must be positive and n_tau >= 1, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Integration substeps per constraint interval and the resulting step.
    fn substeps(&self) -> (usize, f64) {
        let interval = self.horizon / self.n_tau as f64;
        let m = (interval / self.max_dt - 1e-9).ceil().max(1.0) as usize;
        (m, interval / m as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowSample {
    pub tau: f64,
    pub state: State,
    /// `d phi_b(tau, x) / dx`.
    pub sensitivity: Matrix3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowResult {
    pub samples: Vec<FlowSample>,
    pub policy: PolicyId,
}

impl FlowResult {
    pub fn terminal(&self) -> &FlowSample {
        self.samples.last().expect("flow has at least two samples")
    }
}

fn jacobian<L: ControlLaw + ?Sized>(s: &State, law: &L, method: JacobianMethod) -> Result<Matrix3<f64>> {
    match method {
        JacobianMethod::Analytic => match analytic_closed_loop_jacobian(s, law) {
            Some(j) => j,
            None => closed_loop_jacobian(s, law),
        },
        JacobianMethod::FiniteDifference => closed_loop_jacobian(s, law),
    }
}

fn augmented_field<L: ControlLaw + ?Sized>(
    x: &Vector3<f64>,
    q: &Matrix3<f64>,
    law: &L,
    method: JacobianMethod,
) -> Result<(Vector3<f64>, Matrix3<f64>)> {
    let s = State::from_vector(x);
    let u = law.control(&s)?;
    if !u.is_finite() {
        return Err(Error::NonFinite("backup control"));
    }
    Ok((vector_field(&s, &u), jacobian(&s, law, method)? * q))
}

/// Integrate the closed loop under `law` from `x0` together with its
/// sensitivity, returning samples at `tau_i = i T / N_tau`.
pub fn integrate_flow<L: ControlLaw + ?Sized>(x0: &State, law: &L, cfg: &FlowConfig) -> Result<Vec<FlowSample>> {
    cfg.validate()?;
    let (substeps, dt) = cfg.substeps();
    let mut x = x0.to_vector();
    let mut q = Matrix3::identity();
    let mut samples = Vec::with_capacity(cfg.n_tau + 1);
    samples.push(FlowSample { tau: 0.0, state: *x0, sensitivity: q });
    for i in 1..=cfg.n_tau {
        for _ in 0..substeps {
            let (k1x, k1q) = augmented_field(&x, &q, law, cfg.jacobian)?;
            let (k2x, k2q) = augmented_field(&(x + k1x * (dt / 2.0)), &(q + k1q * (dt / 2.0)), law, cfg.jacobian)?;
            let (k3x, k3q) = augmented_field(&(x + k2x * (dt / 2.0)), &(q + k2q * (dt / 2.0)), law, cfg.jacobian)?;
            let (k4x, k4q) = augmented_field(&(x + k3x * dt), &(q + k3q * dt), law, cfg.jacobian)?;
            x += (k1x + k2x * 2.0 + k3x * 2.0 + k4x) / 6.0 * dt;
            q += (k1q + k2q * 2.0 + k3q * 2.0 + k4q) / 6.0 * dt;
        }
        if x.iter().chain(q.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("backup flow"));
        }
        samples.push(FlowSample {
            tau: i as f64 * cfg.horizon / cfg.n_tau as f64,
            state: State::from_vector(&x),
            sensitivity: q,
        });
    }
    Ok(samples)
}

/// Backup flow of policy `id` w.r.t. obstacle `o`.
pub fn integrate_backup_flow(
    x0: &State,
    id: PolicyId,
    o: &Obstacle,
    policies: &PolicySet,
    cfg: &FlowConfig,
) -> Result<FlowResult> {
    let law = policies.law(id, o)?;
    Ok(FlowResult { samples: integrate_flow(x0, &law, cfg)?, policy: id })
}

/// Flow state at `tau` without sensitivities, using the same step-size
/// rule as [`integrate_flow`].
pub fn flow_state<L: ControlLaw + ?Sized>(x0: &State, law: &L, tau: f64, max_dt: f64) -> Result<State> {
    if tau == 0.0 {
        return Ok(*x0);
    }
    let steps = (tau / max_dt - 1e-9).ceil().max(1.0) as usize;
    let dt = tau / steps as f64;
    let mut s = *x0;
    for _ in 0..steps {
        s = step_closed_loop(&s, law, dt)?;
    }
    Ok(s)
}

/// `d phi_b(tau, x0) / dx` by central differences of the whole flow.
pub fn sensitivity_fd_oracle<L: ControlLaw + ?Sized>(
    x0: &State,
    law: &L,
    tau: f64,
    max_dt: f64,
) -> Result<Matrix3<f64>> {
    let base = x0.to_vector();
    let mut jac = Matrix3::zeros();
    for j in 0..3 {
        let mut plus = base;
        let mut minus = base;
        plus[j] += ORACLE_PERTURBATION;
        minus[j] -= ORACLE_PERTURBATION;
        let fp = flow_state(&State::from_vector(&plus), law, tau, max_dt)?.to_vector();
        let fm = flow_state(&State::from_vector(&minus), law, tau, max_dt)?.to_vector();
        jac.set_column(j, &((fp - fm) / (2.0 * ORACLE_PERTURBATION)));
    }
    Ok(jac)
}
