//! Unicycle kinematics, fixed-step RK4 closed-loop integration and
//! closed-loop Jacobians.
//!
//! The drift term of the unicycle is zero, so the closed-loop field of a
//! control law `k` is simply `g(x) k(x)`.

use nalgebra::{Matrix2x3, Matrix3, Matrix3x2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default integration step for backup flows (s).
pub const FLOW_DT: f64 = 0.01;
/// Default world simulation step (s).
pub const WORLD_DT: f64 = 0.05;
/// Central-difference step for closed-loop Jacobians.
pub const JACOBIAN_STEP: f64 = 1e-6;

/// Planar pose. `theta` is kept unwrapped.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct State {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl State {
    pub const fn new(x: f64, y: f64, theta: f64) -> Self {
        Self { x, y, theta }
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.theta)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.theta.is_finite()
    }

    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }
}

/// Velocity command `(v, omega)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Input {
    pub v: f64,
    pub omega: f64,
}

impl Input {
    pub const ZERO: Input = Input { v: 0.0, omega: 0.0 };

    pub const fn new(v: f64, omega: f64) -> Self {
        Self { v, omega }
    }

    pub fn is_finite(&self) -> bool {
        self.v.is_finite() && self.omega.is_finite()
    }

    pub fn norm_to(&self, other: &Input) -> f64 {
        (self.v - other.v).hypot(self.omega - other.omega)
    }
}

impl std::ops::Neg for Input {
    type Output = Input;

    fn neg(self) -> Input {
        Input::new(-self.v, -self.omega)
    }
}

/// Component-wise hard input bounds `|v| <= v_max`, `|omega| <= omega_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBounds")]
pub struct InputBounds {
    v_max: f64,
    omega_max: f64,
}

#[derive(Deserialize)]
struct RawBounds {
    v_max: f64,
    omega_max: f64,
}

impl TryFrom<RawBounds> for InputBounds {
    type Error = Error;

    fn try_from(raw: RawBounds) -> Result<Self> {
        InputBounds::new(raw.v_max, raw.omega_max)
    }
}

impl InputBounds {
    pub fn new(v_max: f64, omega_max: f64) -> Result<Self> {
        if !(v_max > 0.0 && v_max.is_finite() && omega_max > 0.0 && omega_max.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "input bounds must be finite and strictly positive, got v_max={v_max}, omega_max={omega_max}"
            )));
        }
        Ok(Self { v_max, omega_max })
    }

    pub fn v_max(&self) -> f64 {
        self.v_max
    }

    pub fn omega_max(&self) -> f64 {
        self.omega_max
    }

    pub fn clamp(&self, u: Input) -> Input {
        Input::new(
            u.v.clamp(-self.v_max, self.v_max),
            u.omega.clamp(-self.omega_max, self.omega_max),
        )
    }

    pub fn contains(&self, u: &Input) -> bool {
        u.v.abs() <= self.v_max && u.omega.abs() <= self.omega_max
    }
}

impl Default for InputBounds {
    fn default() -> Self {
        Self { v_max: 0.5, omega_max: 1.0 }
    }
}

/// A state-feedback law `x -> u`.
pub trait ControlLaw {
    fn control(&self, s: &State) -> Result<Input>;

    /// Analytic `du/dx` if the law provides one.
    fn control_jacobian(&self, _s: &State) -> Option<Result<Matrix2x3<f64>>> {
        None
    }
}

impl<F> ControlLaw for F
where
    F: Fn(&State) -> Input,
{
    fn control(&self, s: &State) -> Result<Input> {
        Ok(self(s))
    }
}

/// The law that always returns the same input.
#[derive(Debug, Clone, Copy)]
pub struct ConstantInput(pub Input);

impl ControlLaw for ConstantInput {
    fn control(&self, _s: &State) -> Result<Input> {
        Ok(self.0)
    }

    fn control_jacobian(&self, _s: &State) -> Option<Result<Matrix2x3<f64>>> {
        Some(Ok(Matrix2x3::zeros()))
    }
}

/// Input matrix of the unicycle.
pub fn input_matrix(s: &State) -> Matrix3x2<f64> {
    let (sin, cos) = s.theta.sin_cos();
    Matrix3x2::new(cos, 0.0, sin, 0.0, 0.0, 1.0)
}

/// Drift term; identically zero for the unicycle.
pub fn drift(_s: &State) -> Vector3<f64> {
    Vector3::zeros()
}

/// `f(x) + g(x) u`.
pub fn vector_field(s: &State, u: &Input) -> Vector3<f64> {
    let (sin, cos) = s.theta.sin_cos();
    Vector3::new(u.v * cos, u.v * sin, u.omega)
}

fn closed_loop_field<L: ControlLaw + ?Sized>(s: &State, law: &L) -> Result<Vector3<f64>> {
    let u = law.control(s)?;
    if !u.is_finite() {
        return Err(Error::NonFinite("control law output"));
    }
    Ok(vector_field(s, &u))
}

/// One classical RK4 step of the closed loop `x' = f(x) + g(x) k(x)`.
pub fn step_closed_loop<L: ControlLaw + ?Sized>(s: &State, law: &L, dt: f64) -> Result<State> {
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter(format!("step size must be positive, got {dt}")));
    }
    let x = s.to_vector();
    let k1 = closed_loop_field(s, law)?;
    let k2 = closed_loop_field(&State::from_vector(&(x + k1 * (dt / 2.0))), law)?;
    let k3 = closed_loop_field(&State::from_vector(&(x + k2 * (dt / 2.0))), law)?;
    let k4 = closed_loop_field(&State::from_vector(&(x + k3 * dt)), law)?;
    let next = State::from_vector(&(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) / 6.0 * dt));
    if !next.is_finite() {
        return Err(Error::NonFinite("closed-loop integration"));
    }
    Ok(next)
}

/// Central finite-difference Jacobian of the closed-loop field, step
/// [`JACOBIAN_STEP`] per coordinate.
pub fn closed_loop_jacobian<L: ControlLaw + ?Sized>(s: &State, law: &L) -> Result<Matrix3<f64>> {
    let x = s.to_vector();
    let mut jac = Matrix3::zeros();
    for j in 0..3 {
        let mut plus = x;
        let mut minus = x;
        plus[j] += JACOBIAN_STEP;
        minus[j] -= JACOBIAN_STEP;
        let fp = closed_loop_field(&State::from_vector(&plus), law)?;
        let fm = closed_loop_field(&State::from_vector(&minus), law)?;
        jac.set_column(j, &((fp - fm) / (2.0 * JACOBIAN_STEP)));
    }
    if jac.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("closed-loop Jacobian"));
    }
    Ok(jac)
}

/// Closed-loop Jacobian from the law's analytic `du/dx`, if it has one:
/// `d(g(x) u(x))/dx = (dg/dtheta u) e_theta^T + g(x) du/dx`.
pub fn analytic_closed_loop_jacobian<L: ControlLaw + ?Sized>(
    s: &State,
    law: &L,
) -> Option<Result<Matrix3<f64>>> {
    let du = law.control_jacobian(s)?;
    Some(du.and_then(|du| {
        let u = law.control(s)?;
        let (sin, cos) = s.theta.sin_cos();
        let mut jac = input_matrix(s) * du;
        jac[(0, 2)] += -u.v * sin;
        jac[(1, 2)] += u.v * cos;
        if jac.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("closed-loop Jacobian"));
        }
        Ok(jac)
    }))
}

/// Wrap an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let mut w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn vector_field_examples() {
        let f = vector_field(&State::new(0.0, 0.0, 0.0), &Input::new(1.0, 0.5));
        assert_eq!(f, Vector3::new(1.0, 0.0, 0.5));

        let f = vector_field(&State::new(0.0, 0.0, FRAC_PI_2), &Input::new(2.0, 0.0));
        assert_relative_eq!(f, Vector3::new(0.0, 2.0, 0.0), epsilon = 1e-15);

        let f = vector_field(&State::new(5.0, -3.0, 0.7), &Input::ZERO);
        assert_eq!(f, Vector3::zeros());
    }

    #[test]
    fn rk4_constant_inputs() {
        let s = State::new(0.3, -1.2, 0.4);
        assert_eq!(step_closed_loop(&s, &ConstantInput(Input::ZERO), 0.05).unwrap(), s);

        let s = step_closed_loop(&State::default(), &ConstantInput(Input::new(1.0, 0.0)), 0.1).unwrap();
        assert_eq!(s, State::new(0.1, 0.0, 0.0));

        let s = step_closed_loop(&State::default(), &ConstantInput(Input::new(0.0, 1.0)), 0.1).unwrap();
        assert_eq!(s, State::new(0.0, 0.0, 0.1));
    }

    #[test]
    fn rk4_straight_line_is_exact() {
        let law = ConstantInput(Input::new(0.7, 0.0));
        let mut s = State::new(1.0, 2.0, 0.9);
        for _ in 0..100 {
            s = step_closed_loop(&s, &law, 0.01).unwrap();
        }
        assert_relative_eq!(s.x, 1.0 + 0.7 * 0.9_f64.cos(), epsilon = 1e-13);
        assert_relative_eq!(s.y, 2.0 + 0.7 * 0.9_f64.sin(), epsilon = 1e-13);
        assert_eq!(s.theta, 0.9);
    }

    #[test]
    fn rk4_matches_closed_form_arc() {
        let (v, w) = (0.8, -1.3);
        let s0 = State::new(-0.5, 0.25, 0.3);
        let law = ConstantInput(Input::new(v, w));
        let mut s = s0;
        for _ in 0..100 {
            s = step_closed_loop(&s, &law, 0.01).unwrap();
        }
        let th = s0.theta + w * 1.0;
        let x = s0.x + v / w * (th.sin() - s0.theta.sin());
        let y = s0.y - v / w * (th.cos() - s0.theta.cos());
        assert!((s.x - x).abs() < 1e-8);
        assert!((s.y - y).abs() < 1e-8);
        assert!((s.theta - th).abs() < 1e-12);
    }

    #[test]
    fn non_finite_policy_is_an_error() {
        let law = |_: &State| Input::new(f64::NAN, 0.0);
        assert!(matches!(
            step_closed_loop(&State::default(), &law, 0.05),
            Err(Error::NonFinite(_))
        ));
        assert!(closed_loop_jacobian(&State::default(), &law).is_err());
    }

    #[test]
    fn jacobian_of_constant_input() {
        let jac = closed_loop_jacobian(&State::default(), &ConstantInput(Input::new(1.0, 0.0))).unwrap();
        assert_relative_eq!(jac.column(2).into_owned(), Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-9);
        assert_eq!(jac.column(0).into_owned(), Vector3::zeros());
        assert_eq!(jac.column(1).into_owned(), Vector3::zeros());

        let jac = closed_loop_jacobian(&State::new(1.0, 1.0, 1.0), &ConstantInput(Input::ZERO)).unwrap();
        assert_eq!(jac, Matrix3::zeros());
    }

    #[test]
    fn bounds_validation_and_clamp() {
        assert!(InputBounds::new(0.0, 1.0).is_err());
        assert!(InputBounds::new(1.0, f64::INFINITY).is_err());
        let b = InputBounds::new(0.5, 1.0).unwrap();
        assert_eq!(b.clamp(Input::new(2.0, -3.0)), Input::new(0.5, -1.0));
        assert!(serde_json::from_str::<InputBounds>(r#"{"v_max":-1,"omega_max":1}"#).is_err());
    }

    #[test]
    fn wrap_angle_range() {
        use std::f64::consts::PI;
        assert_relative_eq!(wrap_angle(3.0 * PI), PI, epsilon = 1e-12);
        assert_relative_eq!(wrap_angle(-PI), PI, epsilon = 1e-12);
        assert_relative_eq!(wrap_angle(0.5 + 4.0 * PI), 0.5, epsilon = 1e-12);
    }
}
