//! Euclidean projection of a target input onto a polygon of half-planes
//! intersected with the input box:
//!
//! ```text
//! minimize   |u - target|^2
//! subject to a_i . u >= b_i           (i < n)
//!            -v_max <= u_0 <= v_max, -omega_max <= u_1 <= omega_max
//! ```
//!
//! [`solve`] is a Goldfarb-Idnani dual active-set method specialized to an
//! identity Hessian in two dimensions. It starts from the unconstrained
//! minimizer and adds the most violated constraint until primal
//! feasibility, so an empty feasible region is detected when no dual step
//! exists. [`kkt_enumeration_oracle`] is a brute-force reference.
//!
//! Constraint indices in [`QSolution::active_set`] refer to the
//! half-planes first, followed by the four box faces in the order
//! `v <= v_max`, `v >= -v_max`, `omega <= omega_max`, `omega >= -omega_max`.

use serde::{Deserialize, Serialize};

use crate::dynamics::{Input, InputBounds};

/// Feasibility tolerance, relative to the row norm.
pub const FEAS_TOL: f64 = 1e-9;
const MAX_ITERATIONS: usize = 64;

/// Half-plane `a . u >= b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HalfPlane {
    pub a: [f64; 2],
    pub b: f64,
}

impl HalfPlane {
    pub const fn new(a: [f64; 2], b: f64) -> Self {
        Self { a, b }
    }

    pub fn slack(&self, u: [f64; 2]) -> f64 {
        self.a[0] * u[0] + self.a[1] * u[1] - self.b
    }

    fn norm(&self) -> f64 {
        self.a[0].hypot(self.a[1])
    }

    fn holds(&self, u: [f64; 2]) -> bool {
        self.slack(u) >= -FEAS_TOL * self.norm().max(1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QProblem {
    pub target: Input,
    pub constraints: Vec<HalfPlane>,
    pub bounds: InputBounds,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QSolution {
    pub u_star: Input,
    pub feasible: bool,
    pub active_set: Vec<usize>,
    pub objective: f64,
}

impl QSolution {
    fn infeasible(target: Input) -> Self {
        Self { u_star: target, feasible: false, active_set: Vec::new(), objective: f64::INFINITY }
    }
}

impl QProblem {
    /// Half-planes followed by the four box faces.
    pub fn all_constraints(&self) -> Vec<HalfPlane> {
        let (v, w) = (self.bounds.v_max(), self.bounds.omega_max());
        let mut all = self.constraints.clone();
        all.extend([
            HalfPlane::new([-1.0, 0.0], -v),
            HalfPlane::new([1.0, 0.0], -v),
            HalfPlane::new([0.0, -1.0], -w),
            HalfPlane::new([0.0, 1.0], -w),
        ]);
        all
    }

    fn finish(&self, u: [f64; 2], mut active: Vec<usize>) -> QSolution {
        // The box is hard: project the last rounding error away.
        let u = self.bounds.clamp(Input::new(u[0], u[1]));
        active.sort_unstable();
        let objective = (u.v - self.target.v).powi(2) + (u.omega - self.target.omega).powi(2);
        QSolution { u_star: u, feasible: true, active_set: active, objective }
    }
}

fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

struct Active {
    index: usize,
    normal: [f64; 2],
    multiplier: f64,
}

/// Solve the projection problem with the dual active-set method.
pub fn solve(p: &QProblem) -> QSolution {
    let cons = p.all_constraints();
    if cons.iter().any(|c| !(c.a[0].is_finite() && c.a[1].is_finite() && c.b.is_finite()))
        || !p.target.is_finite()
    {
        return QSolution::infeasible(p.target);
    }
    let mut x = [p.target.v, p.target.omega];
    let mut active: Vec<Active> = Vec::with_capacity(2);

    for _ in 0..MAX_ITERATIONS {
        // Most violated constraint by normalized slack; lowest index on ties.
        let mut chosen: Option<(usize, f64)> = None;
        for (i, c) in cons.iter().enumerate() {
            if active.iter().any(|a| a.index == i) || c.holds(x) {
                continue;
            }
            let score = c.slack(x) / c.norm().max(1e-300);
            if chosen.is_none_or(|(_, best)| score < best) {
                chosen = Some((i, score));
            }
        }
        let Some((p_idx, _)) = chosen else {
            return p.finish(x, active.iter().map(|a| a.index).collect());
        };
        let np = cons[p_idx].a;
        let mut u_p = 0.0;

        loop {
            // Primal direction z (projection of np onto the null space of the
            // active normals) and dual direction r (least-squares multipliers).
            let (z, r): ([f64; 2], Vec<f64>) = match active.len() {
                0 => (np, Vec::new()),
                1 => {
                    let n1 = active[0].normal;
                    let r1 = dot(n1, np) / dot(n1, n1);
                    ([np[0] - r1 * n1[0], np[1] - r1 * n1[1]], vec![r1])
                }
                _ => {
                    let (n1, n2) = (active[0].normal, active[1].normal);
                    let det = n1[0] * n2[1] - n2[0] * n1[1];
                    let r1 = (np[0] * n2[1] - n2[0] * np[1]) / det;
                    let r2 = (n1[0] * np[1] - np[0] * n1[1]) / det;
                    ([0.0, 0.0], vec![r1, r2])
                }
            };

            // Largest dual step keeping active multipliers nonnegative.
            let mut t1 = f64::INFINITY;
            let mut drop = None;
            for (j, rj) in r.iter().enumerate() {
                if *rj > 0.0 {
                    let t = active[j].multiplier / rj;
                    if t < t1 {
                        t1 = t;
                        drop = Some(j);
                    }
                }
            }
            let zz = dot(z, z);
            let t2 = if zz > 1e-24 * dot(np, np).max(1e-300) {
                -cons[p_idx].slack(x) / dot(z, np)
            } else {
                f64::INFINITY
            };
            let t = t1.min(t2);
            if !t.is_finite() {
                return QSolution::infeasible(p.target);
            }
            for (a, rj) in active.iter_mut().zip(&r) {
                a.multiplier -= t * rj;
            }
            u_p += t;
            if t2.is_finite() {
                x = [x[0] + t * z[0], x[1] + t * z[1]];
            }
            if t2 <= t1 {
                active.push(Active { index: p_idx, normal: np, multiplier: u_p });
                break;
            }
            active.remove(drop.expect("partial step drops a constraint"));
        }
    }
    QSolution::infeasible(p.target)
}

/// Reference solution by enumerating every candidate active set of size
/// at most two, solving the equality-constrained projection for each, and
/// keeping the best feasible candidate. Ties go to the lexicographically
/// first active set.
pub fn kkt_enumeration_oracle(p: &QProblem) -> QSolution {
    let cons = p.all_constraints();
    let t = [p.target.v, p.target.omega];
    let feasible = |u: [f64; 2]| u[0].is_finite() && u[1].is_finite() && cons.iter().all(|c| c.holds(u));
    let objective = |u: [f64; 2]| (u[0] - t[0]).powi(2) + (u[1] - t[1]).powi(2);

    let mut candidates: Vec<(Vec<usize>, [f64; 2])> = vec![(vec![], t)];
    for (i, c) in cons.iter().enumerate() {
        let nn = dot(c.a, c.a);
        if nn > 0.0 {
            let step = -c.slack(t) / nn;
            candidates.push((vec![i], [t[0] + step * c.a[0], t[1] + step * c.a[1]]));
        }
    }
    for i in 0..cons.len() {
        for j in i + 1..cons.len() {
            let (a, b) = (cons[i], cons[j]);
            let det = a.a[0] * b.a[1] - b.a[0] * a.a[1];
            if det.abs() <= 1e-14 * a.norm() * b.norm() {
                continue;
            }
            let u = [(a.b * b.a[1] - b.b * a.a[1]) / det, (a.a[0] * b.b - b.a[0] * a.b) / det];
            candidates.push((vec![i, j], u));
        }
    }

    let mut best: Option<(Vec<usize>, [f64; 2], f64)> = None;
    for (set, u) in candidates {
        if !feasible(u) {
            continue;
        }
        let f = objective(u);
        let better = match &best {
            None => true,
            Some((bset, _, bf)) => f < *bf - 1e-15 || ((f - bf).abs() <= 1e-15 && set < *bset),
        };
        if better {
            best = Some((set, u, f));
        }
    }
    match best {
        Some((set, u, _)) => p.finish(u, set),
        None => QSolution::infeasible(p.target),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_box() -> InputBounds {
        InputBounds::new(1.0, 1.0).unwrap()
    }

    #[test]
    fn interior_target_is_returned_unchanged() {
        let p = QProblem {
            target: Input::new(0.3, -0.2),
            constraints: vec![HalfPlane::new([1.0, 0.0], -0.5)],
            bounds: unit_box(),
        };
        let s = solve(&p);
        assert!(s.feasible);
        assert_eq!(s.u_star, p.target);
        assert_eq!(s.objective, 0.0);
        assert!(s.active_set.is_empty());
    }

    #[test]
    fn single_axis_constraint() {
        let p = QProblem {
            target: Input::ZERO,
            constraints: vec![HalfPlane::new([1.0, 0.0], 0.5)],
            bounds: unit_box(),
        };
        for s in [solve(&p), kkt_enumeration_oracle(&p)] {
            assert!(s.feasible);
            assert!((s.u_star.v - 0.5).abs() < 1e-15);
            assert_eq!(s.u_star.omega, 0.0);
            assert_eq!(s.active_set, vec![0]);
        }
    }

    #[test]
    fn out_of_box_target_is_clamped() {
        let p = QProblem { target: Input::new(3.0, -0.4), constraints: vec![], bounds: unit_box() };
        for s in [solve(&p), kkt_enumeration_oracle(&p)] {
            assert!(s.feasible);
            assert_eq!(s.u_star, Input::new(1.0, -0.4));
            assert_eq!(s.active_set, vec![0]);
        }
    }

    #[test]
    fn contradictory_half_planes_are_infeasible() {
        let p = QProblem {
            target: Input::ZERO,
            constraints: vec![HalfPlane::new([1.0, 0.0], 1.0), HalfPlane::new([-1.0, 0.0], 1.0)],
            bounds: unit_box(),
        };
        assert!(!solve(&p).feasible);
        assert!(!kkt_enumeration_oracle(&p).feasible);
    }

    #[test]
    fn constraint_beyond_box_is_infeasible() {
        let p = QProblem {
            target: Input::ZERO,
            constraints: vec![HalfPlane::new([1.0, 1.0], 2.5)],
            bounds: unit_box(),
        };
        assert!(!solve(&p).feasible);
        assert!(!kkt_enumeration_oracle(&p).feasible);
    }

    #[test]
    fn zero_row_behaves_like_a_constant() {
        let ok = QProblem { target: Input::ZERO, constraints: vec![HalfPlane::new([0.0, 0.0], -1.0)], bounds: unit_box() };
        assert!(solve(&ok).feasible);
        let bad = QProblem { target: Input::ZERO, constraints: vec![HalfPlane::new([0.0, 0.0], 1.0)], bounds: unit_box() };
        assert!(!solve(&bad).feasible);
        assert!(!kkt_enumeration_oracle(&bad).feasible);
    }

    #[test]
    fn parallel_duplicate_constraints() {
        let p = QProblem {
            target: Input::new(-0.5, 0.5),
            constraints: vec![
                HalfPlane::new([1.0, 1.0], 0.4),
                HalfPlane::new([2.0, 2.0], 0.8),
                HalfPlane::new([1.0, 1.0], 0.2),
            ],
            bounds: unit_box(),
        };
        let s = solve(&p);
        let o = kkt_enumeration_oracle(&p);
        assert!(s.feasible && o.feasible);
        assert!((s.objective - o.objective).abs() < 1e-12);
        assert!((s.u_star.v + 0.3).abs() < 1e-12 && (s.u_star.omega - 0.7).abs() < 1e-12);
    }

    fn random_problem(rng: &mut ChaCha8Rng, n: usize) -> QProblem {
        let bounds = InputBounds::new(rng.random_range(0.2..2.0), rng.random_range(0.2..2.0)).unwrap();
        let constraints = (0..n)
            .map(|_| {
                let ang: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let scale = rng.random_range(0.1..5.0);
                HalfPlane::new([scale * ang.cos(), scale * ang.sin()], scale * rng.random_range(-1.5..0.8))
            })
            .collect();
        QProblem { target: Input::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)), constraints, bounds }
    }

    #[test]
    fn agrees_with_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut infeasible = 0;
        for _ in 0..2000 {
            let n = rng.random_range(0..8);
            let p = random_problem(&mut rng, n);
            let s = solve(&p);
            let o = kkt_enumeration_oracle(&p);
            assert_eq!(s.feasible, o.feasible, "{p:?}");
            if s.feasible {
                assert!((s.objective - o.objective).abs() <= 1e-8, "{p:?}\n{s:?}\n{o:?}");
                assert!(p.bounds.contains(&s.u_star));
                for c in &p.constraints {
                    assert!(c.slack([s.u_star.v, s.u_star.omega]) >= -1e-9 * c.norm().max(1.0));
                }
            } else {
                infeasible += 1;
            }
        }
        assert!(infeasible > 0, "generator should exercise infeasible instances");
    }

    proptest! {
        #[test]
        fn projection_is_idempotent(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_problem(&mut rng, 5);
            let s = solve(&p);
            prop_assume!(s.feasible);
            let again = solve(&QProblem { target: s.u_star, ..p.clone() });
            prop_assert!(again.feasible);
            prop_assert!((again.u_star.v - s.u_star.v).abs() < 1e-12);
            prop_assert!((again.u_star.omega - s.u_star.omega).abs() < 1e-12);
        }
    }
}
