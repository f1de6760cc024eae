//! Obstacle geometry, the safety constraint `h`, and the backup control
//! laws with their backup barrier functions.
//!
//! With `n` the unit vector from the obstacle to the robot, `q` the heading
//! and `r` the heading rotated by +90 degrees:
//!
//! | id | law                                   | barrier                  |
//! |----|---------------------------------------|--------------------------|
//! | 0  | `(v_max, w_max tanh(n.r / eps))`      | `n.(q v_max - v_o)`      |
//! | 1  | `(v_max tanh(n.q / eps), 0)`          | `|p - p_o| - R_o`        |
//! | 2  | `-k_0(x)`                             | `-h_0(x)`                |

use nalgebra::{Matrix2, Matrix2x3, RowVector3, Vector2};
use serde::{Deserialize, Serialize};

use crate::dynamics::{ControlLaw, Input, InputBounds, State};
use crate::error::{Error, Result};

/// Circular obstacle; `radius` already includes the robot-size buffer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub center: [f64; 2],
    pub radius: f64,
    #[serde(default)]
    pub velocity: [f64; 2],
}

impl Obstacle {
    pub fn new(center: [f64; 2], radius: f64) -> Result<Self> {
        let o = Self { center, radius, velocity: [0.0, 0.0] };
        o.validate()?;
        Ok(o)
    }

    /// A cone of physical radius `cone_radius`, inflated by half the robot
    /// length since the robot position is measured at its center.
    pub fn cone(center: [f64; 2], cone_radius: f64, robot_half_length: f64) -> Result<Self> {
        Self::new(center, cone_radius + robot_half_length)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0 && self.radius.is_finite())
            || !self.center.iter().chain(&self.velocity).all(|v| v.is_finite())
        {
            return Err(Error::InvalidParameter(format!("invalid obstacle {self:?}")));
        }
        Ok(())
    }

    fn offset(&self, s: &State) -> Vector2<f64> {
        Vector2::new(s.x - self.center[0], s.y - self.center[1])
    }
}

/// Unit vectors `(n, q, r)` at a state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geometry {
    pub n: Vector2<f64>,
    pub q: Vector2<f64>,
    pub r: Vector2<f64>,
    /// Distance `|p - p_o|`.
    pub dist: f64,
}

impl Geometry {
    /// `(I - n n^T) / |p - p_o|`, the derivative of `n` w.r.t. `p`.
    fn dn_dp(&self) -> Matrix2<f64> {
        (Matrix2::identity() - self.n * self.n.transpose()) / self.dist
    }
}

pub fn geometry_vectors(s: &State, o: &Obstacle) -> Result<Geometry> {
    let d = o.offset(s);
    let dist = d.norm();
    if !(dist > 0.0) {
        return Err(Error::DegenerateGeometry);
    }
    let (sin, cos) = s.theta.sin_cos();
    Ok(Geometry {
        n: d / dist,
        q: Vector2::new(cos, sin),
        r: Vector2::new(-sin, cos),
        dist,
    })
}

/// Safety constraint `h(x) = |p - p_o| - R_o`.
pub fn h_distance(s: &State, o: &Obstacle) -> f64 {
    o.offset(s).norm() - o.radius
}

/// Minimum of [`h_distance`] over all obstacles (`+inf` with none).
pub fn h_min(s: &State, obstacles: &[Obstacle]) -> f64 {
    obstacles.iter().map(|o| h_distance(s, o)).fold(f64::INFINITY, f64::min)
}

/// Gradient of [`h_distance`] w.r.t. the state, `(n, 0)`.
pub fn h_distance_gradient(s: &State, o: &Obstacle) -> Result<RowVector3<f64>> {
    let g = geometry_vectors(s, o)?;
    Ok(RowVector3::new(g.n[0], g.n[1], 0.0))
}

/// Index of a backup controller in a [`PolicySet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PolicyId(pub usize);

impl std::fmt::Display for PolicyId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "k_b{}", self.0)
    }
}

/// The three backup maneuvers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackupKind {
    /// Turn away from the obstacle and drive forward.
    TurnAway,
    /// Drive straight away from the obstacle without turning.
    Retreat,
    /// Turn towards the obstacle and drive in reverse.
    ReverseToward,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub bounds: InputBounds,
    /// tanh smoothing parameter.
    pub epsilon: f64,
}

impl Default for PolicyParams {
    fn default() -> Self {
        Self { bounds: InputBounds::default(), epsilon: 0.1 }
    }
}

impl BackupKind {
    pub fn control(&self, s: &State, o: &Obstacle, params: &PolicyParams) -> Result<Input> {
        let g = geometry_vectors(s, o)?;
        let (v_max, w_max, eps) = (params.bounds.v_max(), params.bounds.omega_max(), params.epsilon);
        Ok(match self {
            BackupKind::TurnAway => Input::new(v_max, w_max * (g.n.dot(&g.r) / eps).tanh()),
            BackupKind::Retreat => Input::new(v_max * (g.n.dot(&g.q) / eps).tanh(), 0.0),
            BackupKind::ReverseToward => -BackupKind::TurnAway.control(s, o, params)?,
        })
    }

    /// `du/dx` of [`BackupKind::control`].
    pub fn control_jacobian(&self, s: &State, o: &Obstacle, params: &PolicyParams) -> Result<Matrix2x3<f64>> {
        let g = geometry_vectors(s, o)?;
        let (v_max, w_max, eps) = (params.bounds.v_max(), params.bounds.omega_max(), params.epsilon);
        let dn = g.dn_dp();
        let mut jac = Matrix2x3::zeros();
        match self {
            BackupKind::TurnAway | BackupKind::ReverseToward => {
                let t = (g.n.dot(&g.r) / eps).tanh();
                let scale = w_max * (1.0 - t * t) / eps;
                let dp = dn * g.r;
                let sign = if *self == BackupKind::TurnAway { 1.0 } else { -1.0 };
                jac[(1, 0)] = sign * scale * dp[0];
                jac[(1, 1)] = sign * scale * dp[1];
                jac[(1, 2)] = sign * scale * -g.n.dot(&g.q);
            }
            BackupKind::Retreat => {
                let t = (g.n.dot(&g.q) / eps).tanh();
                let scale = v_max * (1.0 - t * t) / eps;
                let dp = dn * g.q;
                jac[(0, 0)] = scale * dp[0];
                jac[(0, 1)] = scale * dp[1];
                jac[(0, 2)] = scale * g.n.dot(&g.r);
            }
        }
        Ok(jac)
    }

    /// Backup barrier `h_b` whose 0-superlevel set the law keeps invariant.
    pub fn barrier(&self, s: &State, o: &Obstacle, params: &PolicyParams) -> Result<f64> {
        let g = geometry_vectors(s, o)?;
        let v_o = Vector2::from(o.velocity);
        Ok(match self {
            BackupKind::TurnAway => g.n.dot(&(g.q * params.bounds.v_max() - v_o)),
            BackupKind::Retreat => g.dist - o.radius,
            BackupKind::ReverseToward => -BackupKind::TurnAway.barrier(s, o, params)?,
        })
    }

    /// Gradient of [`BackupKind::barrier`] w.r.t. the state.
    pub fn barrier_gradient(&self, s: &State, o: &Obstacle, params: &PolicyParams) -> Result<RowVector3<f64>> {
        let g = geometry_vectors(s, o)?;
        let v_max = params.bounds.v_max();
        Ok(match self {
            BackupKind::TurnAway | BackupKind::ReverseToward => {
                let dp = g.dn_dp() * (g.q * v_max - Vector2::from(o.velocity));
                let grad = RowVector3::new(dp[0], dp[1], v_max * g.n.dot(&g.r));
                if *self == BackupKind::TurnAway {
                    grad
                } else {
                    -grad
                }
            }
            BackupKind::Retreat => RowVector3::new(g.n[0], g.n[1], 0.0),
        })
    }
}

/// A backup kind bound to an obstacle and parameters, usable as a
/// [`ControlLaw`].
#[derive(Debug, Clone, Copy)]
pub struct BackupLaw<'a> {
    pub kind: BackupKind,
    pub obstacle: &'a Obstacle,
    pub params: &'a PolicyParams,
}

impl ControlLaw for BackupLaw<'_> {
    fn control(&self, s: &State) -> Result<Input> {
        self.kind.control(s, self.obstacle, self.params)
    }

    fn control_jacobian(&self, s: &State) -> Option<Result<Matrix2x3<f64>>> {
        Some(self.kind.control_jacobian(s, self.obstacle, self.params))
    }
}

/// The registry `K` of backup controllers together with their shared
/// parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySet {
    pub registry: Vec<BackupKind>,
    pub params: PolicyParams,
}

impl Default for PolicySet {
    fn default() -> Self {
        Self {
            registry: vec![BackupKind::TurnAway, BackupKind::Retreat, BackupKind::ReverseToward],
            params: PolicyParams::default(),
        }
    }
}

impl PolicySet {
    pub fn new(registry: Vec<BackupKind>, params: PolicyParams) -> Result<Self> {
        let set = Self { registry, params };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.registry.is_empty() {
            return Err(Error::InvalidParameter("policy registry is empty".into()));
        }
        if !(self.params.epsilon > 0.0 && self.params.epsilon.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "smoothing parameter must be positive, got {}",
                self.params.epsilon
            )));
        }
        Ok(())
    }

    /// Number of backup controllers `m_k`.
    pub fn len(&self) -> usize {
        self.registry.len()
    }

    pub fn is_empty(&self) -> bool {
        self.registry.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = PolicyId> {
        (0..self.registry.len()).map(PolicyId)
    }

    pub fn kind(&self, id: PolicyId) -> Result<BackupKind> {
        self.registry
            .get(id.0)
            .copied()
            .ok_or(Error::UnknownPolicy { index: id.0, count: self.registry.len() })
    }

    pub fn law<'a>(&'a self, id: PolicyId, o: &'a Obstacle) -> Result<BackupLaw<'a>> {
        Ok(BackupLaw { kind: self.kind(id)?, obstacle: o, params: &self.params })
    }

    pub fn control(&self, id: PolicyId, s: &State, o: &Obstacle) -> Result<Input> {
        self.kind(id)?.control(s, o, &self.params)
    }

    pub fn barrier(&self, id: PolicyId, s: &State, o: &Obstacle) -> Result<f64> {
        self.kind(id)?.barrier(s, o, &self.params)
    }

    pub fn barrier_gradient(&self, id: PolicyId, s: &State, o: &Obstacle) -> Result<RowVector3<f64>> {
        self.kind(id)?.barrier_gradient(s, o, &self.params)
    }
}

/// `policy_control(id, s, o, params)` against the default three-policy registry.
pub fn policy_control(id: PolicyId, s: &State, o: &Obstacle, params: &PolicyParams) -> Result<Input> {
    default_kind(id)?.control(s, o, params)
}

/// `policy_barrier(id, s, o, params)` against the default three-policy registry.
pub fn policy_barrier(id: PolicyId, s: &State, o: &Obstacle, params: &PolicyParams) -> Result<f64> {
    default_kind(id)?.barrier(s, o, params)
}

fn default_kind(id: PolicyId) -> Result<BackupKind> {
    const DEFAULT: [BackupKind; 3] = [BackupKind::TurnAway, BackupKind::Retreat, BackupKind::ReverseToward];
    DEFAULT.get(id.0).copied().ok_or(Error::UnknownPolicy { index: id.0, count: 3 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{closed_loop_jacobian, analytic_closed_loop_jacobian};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn origin_obstacle(radius: f64) -> Obstacle {
        Obstacle::new([0.0, 0.0], radius).unwrap()
    }

    #[test]
    fn h_distance_examples() {
        let o = origin_obstacle(1.0);
        assert_eq!(h_distance(&State::new(3.0, 4.0, 0.0), &o), 4.0);
        assert_eq!(h_distance(&State::new(0.0, 0.0, 0.0), &o), -1.0);
        assert_relative_eq!(h_distance(&State::new(0.6, 0.8, 2.0), &o), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn geometry_examples() {
        let o = origin_obstacle(1.0);
        let g = geometry_vectors(&State::new(2.0, 0.0, 0.0), &o).unwrap();
        assert_eq!(g.q, Vector2::new(1.0, 0.0));
        assert_eq!(g.r, Vector2::new(0.0, 1.0));
        assert_eq!(g.n, Vector2::new(1.0, 0.0));
        assert!(matches!(
            geometry_vectors(&State::new(0.0, 0.0, 1.0), &o),
            Err(Error::DegenerateGeometry)
        ));
    }

    #[test]
    fn policy_examples() {
        let o = origin_obstacle(1.0);
        let params = PolicyParams::default();
        let s = State::new(2.0, 0.0, 0.0);
        let v_max = params.bounds.v_max();

        assert_eq!(policy_control(PolicyId(0), &s, &o, &params).unwrap(), Input::new(v_max, 0.0));
        let u1 = policy_control(PolicyId(1), &s, &o, &params).unwrap();
        assert!((u1.v - v_max).abs() < 1e-8 * v_max);
        assert_eq!(u1.v, v_max * 10f64.tanh());
        assert_eq!(u1.omega, 0.0);
        let u2 = policy_control(PolicyId(2), &s, &o, &params).unwrap();
        assert_eq!(u2.v, -v_max);
        assert_eq!(u2.omega, 0.0);

        assert_eq!(policy_barrier(PolicyId(0), &s, &o, &params).unwrap(), v_max);
        assert_eq!(policy_barrier(PolicyId(2), &s, &o, &params).unwrap(), -v_max);
        assert_eq!(policy_barrier(PolicyId(1), &State::new(3.0, 4.0, 0.0), &o, &params).unwrap(), 4.0);

        assert!(matches!(
            policy_control(PolicyId(3), &s, &o, &params),
            Err(Error::UnknownPolicy { index: 3, count: 3 })
        ));
        assert!(matches!(
            policy_barrier(PolicyId(0), &State::default(), &o, &params),
            Err(Error::DegenerateGeometry)
        ));
    }

    #[test]
    fn obstacle_validation() {
        assert!(Obstacle::new([0.0, 0.0], 0.0).is_err());
        assert!(Obstacle::new([f64::NAN, 0.0], 1.0).is_err());
        let cone = Obstacle::cone([1.0, 1.0], 0.15, 0.35).unwrap();
        assert_relative_eq!(cone.radius, 0.5);
    }

    fn arb_state() -> impl Strategy<Value = State> {
        (-4.0..4.0f64, -4.0..4.0f64, -10.0..10.0f64)
            .prop_filter("away from center", |(x, y, _)| x.hypot(*y) > 0.05)
            .prop_map(|(x, y, t)| State::new(x, y, t))
    }

    proptest! {
        #[test]
        fn controls_respect_bounds(s in arb_state(), eps in 0.01..1.0f64, id in 0usize..3) {
            let o = origin_obstacle(0.5);
            let params = PolicyParams { epsilon: eps, ..Default::default() };
            let u = policy_control(PolicyId(id), &s, &o, &params).unwrap();
            prop_assert!(params.bounds.contains(&u));
        }

        #[test]
        fn reverse_policy_is_exact_negation(s in arb_state()) {
            let o = origin_obstacle(0.5);
            let params = PolicyParams::default();
            let u0 = policy_control(PolicyId(0), &s, &o, &params).unwrap();
            let u2 = policy_control(PolicyId(2), &s, &o, &params).unwrap();
            prop_assert_eq!(u2, -u0);
            let h0 = policy_barrier(PolicyId(0), &s, &o, &params).unwrap();
            let h2 = policy_barrier(PolicyId(2), &s, &o, &params).unwrap();
            prop_assert_eq!(h2, -h0);
        }

        #[test]
        fn geometry_is_orthonormal(s in arb_state()) {
            let g = geometry_vectors(&s, &origin_obstacle(0.5)).unwrap();
            prop_assert!(g.q.dot(&g.r).abs() < 1e-15);
            prop_assert!((g.n.norm() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn analytic_jacobians_match_finite_differences(s in arb_state(), id in 0usize..3) {
            prop_assume!(s.x.hypot(s.y) > 0.3);
            let o = origin_obstacle(0.5);
            let set = PolicySet::default();
            let law = set.law(PolicyId(id), &o).unwrap();
            let fd = closed_loop_jacobian(&s, &law).unwrap();
            let exact = analytic_closed_loop_jacobian(&s, &law).unwrap().unwrap();
            let scale = exact.norm().max(1.0);
            prop_assert!((fd - exact).norm() <= 1e-6 * scale, "fd={fd} exact={exact}");
        }

        #[test]
        fn barrier_gradients_match_finite_differences(s in arb_state(), id in 0usize..3) {
            prop_assume!(s.x.hypot(s.y) > 0.3);
            let o = origin_obstacle(0.5);
            let set = PolicySet::default();
            let grad = set.barrier_gradient(PolicyId(id), &s, &o).unwrap();
            let eta = 1e-6;
            for j in 0..3 {
                let mut plus = s.to_vector();
                let mut minus = s.to_vector();
                plus[j] += eta;
                minus[j] -= eta;
                let fd = (set.barrier(PolicyId(id), &State::from_vector(&plus), &o).unwrap()
                    - set.barrier(PolicyId(id), &State::from_vector(&minus), &o).unwrap()) / (2.0 * eta);
                prop_assert!((fd - grad[j]).abs() < 1e-6, "j={j} fd={fd} grad={}", grad[j]);
            }
        }
    }

    /// Five-point stencil with a different step than the production
    /// central difference.
    fn five_point_jacobian<L: ControlLaw>(s: &State, law: &L) -> nalgebra::Matrix3<f64> {
        let h = 1e-4;
        let field = |v: nalgebra::Vector3<f64>| {
            let st = State::from_vector(&v);
            crate::dynamics::vector_field(&st, &law.control(&st).unwrap())
        };
        let x = s.to_vector();
        let mut jac = nalgebra::Matrix3::zeros();
        for j in 0..3 {
            let mut e = nalgebra::Vector3::zeros();
            e[j] = h;
            let col = (-field(x + e * 2.0) + field(x + e) * 8.0 - field(x - e) * 8.0 + field(x - e * 2.0)) / (12.0 * h);
            jac.set_column(j, &col);
        }
        jac
    }

    #[test]
    fn fd_jacobian_matches_five_point_oracle_near_obstacle() {
        let o = origin_obstacle(0.5);
        let set = PolicySet::default();
        let law = set.law(PolicyId(1), &o).unwrap();
        for s in [State::new(0.62, 0.1, 2.9), State::new(-0.3, 0.55, -0.4), State::new(0.0, -0.7, 1.3)] {
            let fd = closed_loop_jacobian(&s, &law).unwrap();
            let oracle = five_point_jacobian(&s, &law);
            assert!((fd - oracle).norm() <= 1e-6 * oracle.norm().max(1.0), "{fd} vs {oracle}");
        }
        for id in 0..3 {
            let law = set.law(PolicyId(id), &o).unwrap();
            let s = State::new(1.1, -0.4, 0.8);
            let fd = closed_loop_jacobian(&s, &law).unwrap();
            let oracle = five_point_jacobian(&s, &law);
            assert!((fd - oracle).norm() <= 1e-5 * oracle.norm().max(1e-12));
        }
    }
}
