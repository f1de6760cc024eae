//! End-to-end property suites: safety invariance, backup invariance,
//! sensitivity and QP oracles, gradient checks, learning, switching safety
//! and utility, determinism, and real-time budget.
//!
//! Each check returns a [`CheckResult`]; sizes come from a [`VerifyScale`]
//! so the same code serves quick smoke runs and full acceptance runs.

use std::time::Instant;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{step_closed_loop, Input, InputBounds, State};
use crate::error::Result;
use crate::flow::{integrate_backup_flow, sensitivity_fd_oracle, FlowConfig};
use crate::intent::model::{batch_loss, DropoutMasks, Parameters};
use crate::intent::{shift_labels, train, Dataset, DatasetRow, FeatureVector, ModelConfig, RewardModel, TrainConfig};
use crate::policy::{h_distance, PolicyId};
use crate::qp::{kkt_enumeration_oracle, solve, HalfPlane, QProblem};
use crate::session::{run_scripted_client, spawn, ClientOptions, SessionOptions};
use crate::sim::{
    collect_dataset, default_curriculum, mission, replay, run_episode, DriverKind, DriverSpec, EpisodeLog,
    EpisodeOptions, EpisodeRunner, Scenario, Selector,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub id: u32,
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl CheckResult {
    pub fn line(&self) -> String {
        format!(
            "[{}] {:>2}. {} ({:.1} s): {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.seconds,
            self.detail
        )
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let t = Instant::now();
    let out = f();
    (out, t.elapsed().as_secs_f64())
}

fn result(id: u32, name: &str, passed: bool, detail: String, seconds: f64) -> CheckResult {
    CheckResult { id, name: name.into(), passed, detail, seconds }
}

fn errored(id: u32, name: &str, e: crate::Error, seconds: f64) -> CheckResult {
    result(id, name, false, format!("error: {e}"), seconds)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyScale {
    pub safety_seeds: u64,
    pub safety_duration: f64,
    pub invariance_samples: usize,
    pub invariance_duration: f64,
    pub sensitivity_cases: usize,
    pub qp_instances: usize,
    pub curriculum_episodes: usize,
    pub max_epochs: usize,
    pub target_accuracy: f64,
    pub session_ticks: usize,
    pub seed: u64,
}

impl VerifyScale {
    pub fn full() -> Self {
        Self {
            safety_seeds: 100,
            safety_duration: 8.0,
            invariance_samples: 1000,
            invariance_duration: 5.0,
            sensitivity_cases: 100,
            qp_instances: 200,
            curriculum_episodes: 64,
            max_epochs: 50,
            target_accuracy: 0.9,
            session_ticks: 200,
            seed: 2024,
        }
    }

    /// Small sizes for smoke runs; pass/fail thresholds are unchanged.
    /// The curriculum keeps its full size: a smaller one trains for many
    /// more epochs and can stall below the accuracy target.
    pub fn quick() -> Self {
        Self {
            safety_seeds: 4,
            safety_duration: 6.0,
            invariance_samples: 50,
            sensitivity_cases: 20,
            qp_instances: 200,
            session_ticks: 60,
            ..Self::full()
        }
    }
}

/// Map `f` over `0..n` on all cores; output order matches input order.
pub fn parallel_map<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let threads = std::thread::available_parallelism().map_or(1, |t| t.get()).min(n.max(1));
    if threads <= 1 {
        return (0..n).map(f).collect();
    }
    let f = &f;
    let mut chunks: Vec<std::vec::IntoIter<T>> = std::thread::scope(|s| {
        let handles: Vec<_> =
            (0..threads).map(|k| s.spawn(move || (k..n).step_by(threads).map(f).collect::<Vec<T>>())).collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked").into_iter()).collect()
    });
    (0..n).map(|i| chunks[i % threads].next().expect("every item ran")).collect()
}

/// A state in the arena with `h >= h_min_value`, heading uniform.
fn sample_state(rng: &mut ChaCha8Rng, sc: &Scenario, h_min_value: f64) -> State {
    loop {
        let x = rng.random_range(sc.arena.min[0]..sc.arena.max[0]);
        let y = rng.random_range(sc.arena.min[1]..sc.arena.max[1]);
        let s = State::new(x, y, rng.random_range(-std::f64::consts::PI..std::f64::consts::PI));
        if crate::policy::h_min(&s, &sc.obstacles) >= h_min_value {
            return s;
        }
    }
}

/// Closed-loop runs of each backup law from states well inside its own
/// backup set keep that set and the obstacle constraint.
pub fn check_backup_invariance(samples: usize, duration: f64, seed: u64) -> CheckResult {
    const NAME: &str = "backup forward invariance";
    let sc = Scenario::default();
    let o = sc.obstacles[0];
    let dt = 0.01;
    let steps = (duration / dt).round() as usize;
    let (per_policy, secs) = timed(|| {
        sc.policies
            .ids()
            .map(|id| -> Result<(f64, f64)> {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (id.0 as u64 + 1).wrapping_mul(0x9E37_79B9));
                let law = sc.policies.law(id, &o)?;
                let (mut min_hb, mut min_h) = (f64::INFINITY, f64::INFINITY);
                let mut drawn = 0;
                while drawn < samples {
                    let mut s = sample_state(&mut rng, &sc, 0.0);
                    if sc.policies.barrier(id, &s, &o)? < 0.05 {
                        continue;
                    }
                    drawn += 1;
                    for _ in 0..steps {
                        s = step_closed_loop(&s, &law, dt)?;
                        min_hb = min_hb.min(sc.policies.barrier(id, &s, &o)?);
                        min_h = min_h.min(h_distance(&s, &o));
                    }
                }
                Ok((min_hb, min_h))
            })
            .collect::<Result<Vec<_>>>()
    });
    match per_policy {
        Err(e) => errored(2, NAME, e, secs),
        Ok(v) => {
            let passed = v.iter().all(|&(hb, h)| hb >= -1e-6 && h >= 0.0);
            let detail = v
                .iter()
                .enumerate()
                .map(|(i, (hb, h))| format!("k_b{i}: min h_b {hb:.3e}, min h {h:.3e}"))
                .collect::<Vec<_>>()
                .join("; ");
            result(2, NAME, passed, format!("{samples} states per policy, {duration} s each; {detail}"), secs)
        }
    }
}

/// Variational sensitivities against central differences of the flow.
pub fn check_sensitivity(cases: usize, seed: u64) -> CheckResult {
    const NAME: &str = "sensitivity correctness";
    let sc = Scenario::default();
    let cfg = FlowConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (worst, secs) = timed(|| -> Result<f64> {
        let mut worst: f64 = 0.0;
        for _ in 0..cases {
            let x = sample_state(&mut rng, &sc, 0.05);
            let id = PolicyId(rng.random_range(0..sc.m_k()));
            let flow = integrate_backup_flow(&x, id, &sc.obstacles[0], &sc.policies, &cfg)?;
            let k = rng.random_range(1..flow.samples.len());
            let sample = &flow.samples[k];
            let law = sc.policies.law(id, &sc.obstacles[0])?;
            let fd = sensitivity_fd_oracle(&x, &law, sample.tau, cfg.max_dt)?;
            let err = (sample.sensitivity - fd).norm() / fd.norm().max(1e-12);
            worst = worst.max(err);
        }
        Ok(worst)
    });
    match worst {
        Err(e) => errored(3, NAME, e, secs),
        Ok(w) => result(3, NAME, w <= 1e-4, format!("{cases} cases, worst relative Frobenius error {w:.2e} (limit 1e-4)"), secs),
    }
}

fn random_qp(rng: &mut ChaCha8Rng) -> QProblem {
    let n = rng.random_range(0..8);
    let bounds = InputBounds::new(rng.random_range(0.2..2.0), rng.random_range(0.2..2.0)).expect("positive bounds");
    let constraints = (0..n)
        .map(|_| {
            let ang: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let scale = rng.random_range(0.1..5.0);
            HalfPlane::new([scale * ang.cos(), scale * ang.sin()], scale * rng.random_range(-1.5..0.8))
        })
        .collect();
    QProblem { target: Input::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)), constraints, bounds }
}

/// Active-set solutions against exhaustive KKT enumeration.
pub fn check_qp_oracle(instances: usize, seed: u64) -> CheckResult {
    const NAME: &str = "QP oracle equivalence";
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ((flag_mismatch, worst, infeasible), secs) = timed(|| {
        let (mut mismatch, mut worst, mut infeasible) = (0usize, 0.0f64, 0usize);
        for _ in 0..instances {
            let p = random_qp(&mut rng);
            let (s, o) = (solve(&p), kkt_enumeration_oracle(&p));
            if s.feasible != o.feasible {
                mismatch += 1;
            } else if s.feasible {
                worst = worst.max((s.objective - o.objective).abs());
            } else {
                infeasible += 1;
            }
        }
        (mismatch, worst, infeasible)
    });
    result(
        4,
        NAME,
        flag_mismatch == 0 && worst <= 1e-8,
        format!(
            "{instances} instances ({infeasible} infeasible), {flag_mismatch} feasibility mismatches, worst objective gap {worst:.2e} (limit 1e-8)"
        ),
        secs,
    )
}

/// Backpropagation through time against central differences on a tiny
/// model, every parameter, dropout active.
pub fn check_gradients(seed: u64) -> CheckResult {
    const NAME: &str = "gradient check";
    let (out, secs) = timed(|| -> Result<(f64, usize)> {
        let cfg = ModelConfig {
            input: crate::intent::FEATURE_COUNT,
            hidden: 4,
            layers: 1,
            decoder: vec![5, 4],
            outputs: 3,
            steps: 3,
            ..ModelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = RewardModel::new(cfg.clone(), &mut rng)?;
        // Keep ReLU pre-activations off the kink, where the derivative is
        // one-sided and differences are meaningless.
        for layer in &mut m.params.dense {
            layer.b.mapv_inplace(|_| rng.random_range(0.1..0.3) * if rng.random::<bool>() { 1.0 } else { -1.0 });
        }
        let batch = Array3::from_shape_fn((4, cfg.steps, cfg.input), |_| rng.random_range(-1.0..1.0));
        let labels = [0, 2, 1, 2];
        let masks = DropoutMasks::sample(&cfg, 4, &mut rng);
        let (_, grad) = m.gradients(&batch, &labels, Some(&masks))?;
        let eta = 1e-5;
        let loss_at = |p: &Parameters| -> Result<f64> {
            let probe = RewardModel { params: p.clone(), ..m.clone() };
            Ok(batch_loss(&probe.logits(&batch, Some(&masks))?, &labels, cfg.logits_mode).0)
        };
        let analytic: Vec<Vec<f64>> = grad.tensors().into_iter().map(|(_, t)| t.iter().copied().collect()).collect();
        let (mut worst, mut count) = (0.0f64, 0usize);
        for (ti, a_t) in analytic.iter().enumerate() {
            for (k, &a) in a_t.iter().enumerate() {
                let mut plus = m.params.clone();
                let mut minus = m.params.clone();
                *plus.tensors_mut()[ti].iter_mut().nth(k).expect("index in range") += eta;
                *minus.tensors_mut()[ti].iter_mut().nth(k).expect("index in range") -= eta;
                let n = (loss_at(&plus)? - loss_at(&minus)?) / (2.0 * eta);
                worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(1e-6));
                count += 1;
            }
        }
        Ok((worst, count))
    });
    match out {
        Err(e) => errored(5, NAME, e, secs),
        Ok((w, n)) => result(5, NAME, w <= 1e-4, format!("{n} parameters, worst relative error {w:.2e} (limit 1e-4)"), secs),
    }
}

/// Collect the default curriculum and train until the target validation
/// accuracy, then retrain to confirm the run is reproducible.
pub fn check_learning(scale: &VerifyScale) -> (CheckResult, Option<RewardModel>, Option<Dataset>) {
    const NAME: &str = "learning surrogate";
    let sc = Scenario::default();
    let (out, secs) = timed(|| -> Result<(RewardModel, Dataset, f64, usize, bool)> {
        let items = default_curriculum(&sc, scale.curriculum_episodes, scale.seed)?;
        let d = collect_dataset(&sc, &items, items.len(), scale.seed)?;
        let cfg = TrainConfig {
            epochs: scale.max_epochs,
            target_accuracy: Some(scale.target_accuracy),
            seed: scale.seed,
            ..TrainConfig::default()
        };
        let (m, report) = train(&d, &cfg)?;
        let (again, _) = train(&d, &cfg)?;
        Ok((m.clone(), d, report.best_val_accuracy(), report.epochs.len(), again.fingerprint() == m.fingerprint()))
    });
    match out {
        Err(e) => (errored(6, NAME, e, secs), None, None),
        Ok((m, d, acc, epochs, reproducible)) => {
            let passed = acc >= scale.target_accuracy && epochs <= scale.max_epochs && reproducible;
            let detail = format!(
                "{} rows, label counts {:?}; validation accuracy {acc:.4} after {epochs} epoch(s) (target {:.2} within {}); retrain {}",
                d.rows.len(),
                d.label_counts(),
                scale.target_accuracy,
                scale.max_epochs,
                if reproducible { "bit-identical" } else { "DIFFERS" }
            );
            (result(6, NAME, passed, detail, secs), Some(m), Some(d))
        }
    }
}

/// Safety-suite scripted drivers.
pub const SAFETY_DRIVERS: [&str; 3] = ["rammer", "orbiter", "goal_seeker"];

/// Randomized start, initial policy and driver for one safety episode.
pub fn safety_case(sc: &Scenario, driver: &str, policy: Option<PolicyId>, seed: u64) -> (Scenario, DriverSpec) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let r = rng.random_range(1.2..3.0);
        let a: f64 = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let start = State::new(r * a.cos(), r * a.sin(), rng.random_range(-std::f64::consts::PI..std::f64::consts::PI));
        let initial = policy.unwrap_or(PolicyId(rng.random_range(0..sc.m_k())));
        let case = Scenario { start, initial_policy: initial, ..sc.clone() };
        if case.validate().is_err() {
            continue;
        }
        let kind = match driver {
            "rammer" => DriverKind::Rammer { speed: sc.bounds.v_max() },
            "orbiter" => DriverKind::Orbiter {
                radius: rng.random_range(0.3..1.5),
                direction: if rng.random_bool(0.5) { 1.0 } else { -1.0 },
            },
            _ => {
                let b: f64 = rng.random_range(-0.6..0.6);
                let (s, c) = b.sin_cos();
                DriverKind::GoalSeeker { target: [-(c * start.x - s * start.y), -(s * start.x + c * start.y)], cruise: 0.5 }
            }
        };
        return (case, DriverSpec::new(kind).with_noise(0.05));
    }
}

#[derive(Debug, Clone)]
pub struct SafetyOutcome {
    pub safety: CheckResult,
    pub switching: CheckResult,
    pub learned_logs: usize,
}

/// Every fixed policy and learned switching against every scripted
/// driver; min `h` and input bounds over every tick, plus switch validity
/// for the learned runs.
pub fn check_safety(model: Option<&RewardModel>, scale: &VerifyScale) -> SafetyOutcome {
    let sc = Scenario::default();
    let mut selectors: Vec<Option<PolicyId>> = sc.policies.ids().map(Some).collect();
    if model.is_some() {
        selectors.push(None);
    }
    let mut cases = Vec::new();
    for seed in 0..scale.safety_seeds {
        for d in SAFETY_DRIVERS {
            for sel in &selectors {
                cases.push((seed, d, *sel));
            }
        }
    }
    let (logs, secs) = timed(|| {
        parallel_map(cases.len(), |i| {
            let (seed, d, sel) = cases[i];
            let (case, drv) = safety_case(&sc, d, sel, scale.seed.wrapping_mul(1_000_003).wrapping_add(seed));
            let opts = match sel {
                Some(_) => EpisodeOptions::new(None, scale.safety_duration, seed),
                None => EpisodeOptions::new(model, scale.safety_duration, seed),
            };
            run_episode(&case, &drv, opts)
        })
    });
    let mut failure = None;
    let (mut min_h, mut bound_violations, mut ticks) = (f64::INFINITY, 0usize, 0usize);
    let (mut switches, mut unvalidated, mut infeasible_after, mut learned) = (0usize, 0usize, 0usize, 0usize);
    for (log, (seed, d, sel)) in logs.iter().zip(&cases) {
        let log = match log {
            Ok(l) => l,
            Err(e) => {
                failure.get_or_insert(format!("{d} seed {seed} {sel:?}: {e}"));
                continue;
            }
        };
        let s = log.summary();
        ticks += s.ticks;
        if s.min_h < min_h {
            min_h = s.min_h;
        }
        if s.min_h < -1e-3 {
            failure.get_or_insert(format!("{d} seed {seed} {sel:?}: min h {:.3e}", s.min_h));
        }
        bound_violations += log.ticks.iter().filter(|t| !sc.bounds.contains(&t.u_safe)).count();
        if sel.is_none() {
            learned += 1;
            for (i, t) in log.ticks.iter().enumerate() {
                if let Some(ev) = &t.switch {
                    switches += 1;
                    if !ev.validated || ev.to != t.active {
                        unvalidated += 1;
                    }
                    let next_ok = log.ticks.get(i + 1).is_none_or(|n| n.feasible);
                    if !t.feasible || !next_ok {
                        infeasible_after += 1;
                    }
                }
            }
        }
    }
    let safety = result(
        1,
        "safety invariance",
        failure.is_none() && bound_violations == 0 && min_h >= -1e-3,
        format!(
            "{} episodes x {} s ({ticks} ticks), {} selectors x {} drivers; min h {min_h:.3e} (limit -1e-3); {bound_violations} bound violations{}",
            cases.len(),
            scale.safety_duration,
            selectors.len(),
            SAFETY_DRIVERS.len(),
            failure.map(|f| format!("; first failure: {f}")).unwrap_or_default()
        ),
        secs,
    );
    let switching = if model.is_none() {
        result(7, "switch safety", false, "no trained model available".into(), 0.0)
    } else {
        result(
            7,
            "switch safety",
            unvalidated == 0 && infeasible_after == 0 && switches > 0,
            format!(
                "{learned} learned-switching episodes, {switches} switches; {unvalidated} unvalidated, {infeasible_after} infeasible on or after the switch tick"
            ),
            0.0,
        )
    };
    SafetyOutcome { safety, switching, learned_logs: learned }
}

/// The dock-and-pass mission: learned switching must reach the goal while
/// at least one fixed controller does not.
pub fn check_switching_utility(model: &RewardModel) -> CheckResult {
    const NAME: &str = "switching utility";
    let m = mission::dock_and_pass();
    let (out, secs) = timed(|| -> Result<(f64, Vec<PolicyId>, usize, Vec<f64>)> {
        let learned = run_episode(&m.scenario, &m.driver, EpisodeOptions::new(Some(model), m.duration, 0))?;
        let s = learned.summary();
        let mut fixed = Vec::new();
        for id in m.scenario.policies.ids() {
            let sc = Scenario { initial_policy: id, ..m.scenario.clone() };
            let log = run_episode(&sc, &m.driver, EpisodeOptions::new(None, m.duration, 0))?;
            fixed.push(log.summary().min_goal_distance.unwrap_or(f64::INFINITY));
        }
        Ok((s.min_goal_distance.unwrap_or(f64::INFINITY), s.policies_used, s.switches, fixed))
    });
    match out {
        Err(e) => errored(8, NAME, e, secs),
        Ok((d, used, switches, fixed)) => {
            let baseline_fails = fixed.iter().any(|&f| f > m.goal_tolerance);
            let passed = d <= m.goal_tolerance && baseline_fails;
            let fixed_s = fixed.iter().enumerate().map(|(i, f)| format!("k_b{i} {f:.3}")).collect::<Vec<_>>().join(", ");
            result(
                8,
                NAME,
                passed,
                format!(
                    "learned: closest approach to goal {d:.3} m (limit {}), {switches} switches, controllers used {:?}; fixed baselines: {fixed_s}",
                    m.goal_tolerance,
                    used.iter().map(|p| p.0).collect::<Vec<_>>()
                ),
                secs,
            )
        }
    }
}

fn label_shift_fixtures() -> std::result::Result<(), String> {
    let row = |episode: u64, tick: u64, label: usize| DatasetRow {
        episode,
        tick,
        gamma: FeatureVector([tick as f64; crate::intent::FEATURE_COUNT]),
        label,
        active: 0,
    };
    let d = Dataset::new(3, vec![row(0, 0, 0), row(0, 1, 0), row(0, 2, 1), row(0, 3, 1)]).map_err(|e| e.to_string())?;
    let s = shift_labels(&d, 1);
    let got: Vec<usize> = s.rows.iter().map(|r| r.label).collect();
    if got != vec![0, 1, 1] {
        return Err(format!("[A,A,B,B] shifted by 1 gave {got:?}"));
    }
    if s.rows.iter().map(|r| r.gamma.0[0]).collect::<Vec<_>>() != vec![0.0, 1.0, 2.0] {
        return Err("shift moved features instead of labels".into());
    }
    if shift_labels(&d, 0) != d {
        return Err("shift by 0 is not the identity".into());
    }
    let two = Dataset::new(3, vec![row(0, 0, 0), row(0, 1, 2), row(1, 0, 1), row(1, 1, 0), row(1, 2, 2)])
        .map_err(|e| e.to_string())?;
    let s = shift_labels(&two, 1);
    let got: Vec<(u64, usize)> = s.rows.iter().map(|r| (r.episode, r.label)).collect();
    if got != vec![(0, 2), (1, 0), (1, 2)] {
        return Err(format!("per-episode shift gave {got:?}"));
    }
    if !shift_labels(&d, 4).rows.is_empty() {
        return Err("shift longer than the episode kept rows".into());
    }
    Ok(())
}

/// Recorded episodes replay bit-exactly after a trip through the log file
/// format, perturbations are located, and label shifting follows its
/// fixtures.
pub fn check_determinism(model: Option<&RewardModel>) -> CheckResult {
    const NAME: &str = "determinism and replay";
    let (out, secs) = timed(|| -> Result<String> {
        let sc = Scenario::default();
        let mut logs: Vec<EpisodeLog> = Vec::new();
        for (i, d) in SAFETY_DRIVERS.iter().enumerate() {
            let (case, drv) = safety_case(&sc, d, Some(PolicyId(i)), 77 + i as u64);
            logs.push(run_episode(&case, &drv, EpisodeOptions::new(None, 6.0, i as u64))?);
            if model.is_some() {
                let (case, drv) = safety_case(&sc, d, None, 91 + i as u64);
                logs.push(run_episode(&case, &drv, EpisodeOptions::new(model, 6.0, i as u64))?);
            }
        }
        if let Some(m) = model {
            let dm = mission::dock_and_pass();
            logs.push(run_episode(&dm.scenario, &dm.driver, EpisodeOptions::new(Some(m), dm.duration, 0))?);
        }
        let mut exact = 0;
        for log in &logs {
            let mut buf = Vec::new();
            log.write_jsonl(&mut buf)?;
            let back = EpisodeLog::read_jsonl(buf.as_slice())?;
            if back != *log {
                return Err(crate::Error::InvalidParameter("log changed in a file round trip".into()));
            }
            let r = replay(&back, model)?;
            if !r.bit_exact() || r.log != *log {
                return Err(crate::Error::InvalidParameter(format!(
                    "replay diverged at tick {:?}",
                    r.first_divergence
                )));
            }
            exact += 1;
        }
        let mut bent = logs[0].clone();
        let k = bent.ticks.len() / 2;
        bent.ticks[k].u_d.omega += 1e-6;
        let r = replay(&bent, None)?;
        if r.first_divergence != Some(k as u64) {
            return Err(crate::Error::InvalidParameter(format!(
                "perturbation at tick {k} reported at {:?}",
                r.first_divergence
            )));
        }
        label_shift_fixtures().map_err(crate::Error::InvalidParameter)?;
        Ok(format!(
            "{exact} logs replayed bit-exactly through the file format; perturbation located at tick {k}; label-shift fixtures hold"
        ))
    });
    match out {
        Err(e) => errored(9, NAME, e, secs),
        Ok(detail) => result(9, NAME, true, detail, secs),
    }
}

/// Median headless per-tick compute (flow, QP and model forward) and
/// broadcast cadence of a live session driven by the scripted client.
pub fn check_realtime(model: Option<&RewardModel>, scale: &VerifyScale) -> CheckResult {
    const NAME: &str = "real-time budget";
    let (out, secs) = timed(|| -> Result<(f64, f64, f64, f64, usize)> {
        let sc = Scenario::default();
        let (case, drv) = safety_case(&sc, "orbiter", None, 5);
        let selector = if model.is_some() { Selector::Model } else { Selector::Fixed };
        let mut runner = EpisodeRunner::new(&case, model, selector)?;
        let mut driver = crate::sim::Driver::new(drv, 0)?;
        let mut times = Vec::with_capacity(400);
        for _ in 0..400 {
            let u = driver.command(&runner.state(), &case.obstacles);
            let t = Instant::now();
            runner.step(u, None)?;
            times.push(t.elapsed().as_secs_f64());
        }
        times.sort_by(f64::total_cmp);
        let median = times[times.len() / 2];

        let live = Scenario { start: State::new(-2.5, 0.3, 0.0), initial_policy: PolicyId(1), ..sc.clone() };
        let opts = SessionOptions { max_ticks: Some(scale.session_ticks as u64 + 40), ..Default::default() };
        let (addr, _stop, handle) = spawn("127.0.0.1:0", live, model.cloned(), opts)?;
        let client = run_scripted_client(
            addr,
            DriverSpec::new(DriverKind::Rammer { speed: 0.5 }),
            0,
            &ClientOptions { max_states: scale.session_ticks, ..Default::default() },
        )?;
        let report = handle.join().map_err(|_| crate::Error::Session("session thread panicked".into()))??;
        let mut dev: Vec<f64> = client.arrival_intervals.iter().map(|i| (i - sc.tick_dt).abs()).collect();
        dev.sort_by(f64::total_cmp);
        let p95 = dev[((dev.len() - 1) as f64 * 0.95).round() as usize];
        let server_p95 = report.stats.jitter_quantile(sc.tick_dt, 0.95);
        let mut lat = client.latencies.clone();
        lat.sort_by(f64::total_cmp);
        let lat_med = lat.get(lat.len() / 2).copied().unwrap_or(f64::NAN);
        Ok((median, p95, server_p95, lat_med, client.states.len()))
    });
    match out {
        Err(e) => errored(10, NAME, e, secs),
        Ok((median, p95, server_p95, lat, states)) => {
            let limit = 0.2 * 0.05;
            result(
                10,
                NAME,
                median < 0.010 && p95 <= limit,
                format!(
                    "median tick compute {:.3} ms (limit 10 ms); session over {states} states: p95 |interval - 50 ms| {:.2} ms at the client, {:.2} ms at the server (limit 10 ms); median command latency {:.1} ms",
                    median * 1e3,
                    p95 * 1e3,
                    server_p95 * 1e3,
                    lat * 1e3
                ),
                secs,
            )
        }
    }
}

/// Run every suite in criterion order. A model trained by the learning
/// check feeds the safety, switching, replay and timing checks; `model`
/// skips training when given.
pub fn run_all(scale: &VerifyScale, model: Option<RewardModel>, mut on_result: impl FnMut(&CheckResult)) -> Vec<CheckResult> {
    let mut out = Vec::new();
    let mut push = |r: CheckResult, out: &mut Vec<CheckResult>| {
        on_result(&r);
        out.push(r);
    };
    push(check_backup_invariance(scale.invariance_samples, scale.invariance_duration, scale.seed), &mut out);
    push(check_sensitivity(scale.sensitivity_cases, scale.seed), &mut out);
    push(check_qp_oracle(scale.qp_instances, scale.seed), &mut out);
    push(check_gradients(scale.seed), &mut out);
    let model = match model {
        Some(m) => Some(m),
        None => {
            let (r, m, _) = check_learning(scale);
            push(r, &mut out);
            m
        }
    };
    let safety = check_safety(model.as_ref(), scale);
    push(safety.safety, &mut out);
    push(safety.switching, &mut out);
    match &model {
        Some(m) => push(check_switching_utility(m), &mut out),
        None => push(result(8, "switching utility", false, "no trained model available".into(), 0.0), &mut out),
    }
    push(check_determinism(model.as_ref()), &mut out);
    push(check_realtime(model.as_ref(), scale), &mut out);
    out.sort_by_key(|r| r.id);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_shift_fixtures_hold() {
        label_shift_fixtures().unwrap();
    }

    #[test]
    fn small_checks_pass() {
        assert!(check_qp_oracle(50, 1).passed);
        assert!(check_sensitivity(5, 1).passed);
        assert!(check_gradients(1).passed);
        let r = check_backup_invariance(5, 2.0, 1);
        assert!(r.passed, "{}", r.line());
    }

    #[test]
    fn safety_cases_start_inside_the_safe_set() {
        let sc = Scenario::default();
        for seed in 0..20 {
            for d in SAFETY_DRIVERS {
                let (case, drv) = safety_case(&sc, d, None, seed);
                case.validate().unwrap();
                drv.validate().unwrap();
            }
        }
    }

    #[test]
    fn safety_suite_without_model_runs_fixed_policies() {
        let scale = VerifyScale { safety_seeds: 1, safety_duration: 2.0, ..VerifyScale::quick() };
        let out = check_safety(None, &scale);
        assert!(out.safety.passed, "{}", out.safety.line());
        assert!(!out.switching.passed);
        assert_eq!(out.learned_logs, 0);
    }
}
