use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;

use anyhow::{bail, Context, Result};
use log::info;
use serde_json::json;

use mbcbf_core::intent::{evaluate, shift_labels, train_with, Dataset, RewardModel, TrainConfig, WindowSet};
use mbcbf_core::session::{Server, SessionOptions};
use mbcbf_core::sim::{
    collect_dataset, default_curriculum, run_episode, CurriculumItem, DriverKind, DriverSpec, EpisodeLog,
    EpisodeOptions, EpisodeSummary, Mission, Scenario, Verdict,
};
use mbcbf_core::verify::{parallel_map, run_all, safety_case, VerifyScale, SAFETY_DRIVERS};
use mbcbf_core::PolicyId;

use crate::{exit, CollectArgs, EvalArgs, ReplayArgs, ServeArgs, SimulateArgs, TrainArgs, VerifyArgs};

/// A command-line path that cannot be used.
#[derive(Debug)]
pub struct PathError(pub String);

impl std::error::Error for PathError {}

impl std::fmt::Display for PathError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

fn input_file(p: &Path) -> Result<()> {
    if !p.is_file() {
        return Err(PathError(format!("input file {} does not exist", p.display())).into());
    }
    Ok(())
}

fn output_file(p: &Path) -> Result<()> {
    let parent = p.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if !parent.is_dir() {
        return Err(PathError(format!("output directory {} does not exist", parent.display())).into());
    }
    if p.is_dir() {
        return Err(PathError(format!("output path {} is a directory", p.display())).into());
    }
    Ok(())
}

fn output_dir(p: &Path) -> Result<()> {
    if p.exists() && !p.is_dir() {
        return Err(PathError(format!("output path {} is not a directory", p.display())).into());
    }
    let parent = p.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if !parent.is_dir() {
        return Err(PathError(format!("parent of {} does not exist", p.display())).into());
    }
    Ok(())
}

fn print_config(command: &str, value: serde_json::Value) {
    println!("{}", json!({ "config": { "command": command, "resolved": value } }));
}

fn load_model(p: Option<&PathBuf>) -> Result<Option<RewardModel>> {
    p.map(|p| RewardModel::load_path(p).with_context(|| format!("loading model {}", p.display())))
        .transpose()
}

fn load_scenario(p: Option<&PathBuf>) -> Result<Scenario> {
    match p {
        Some(p) => Scenario::load_path(p).with_context(|| format!("loading scenario {}", p.display())),
        None => Ok(Scenario::default()),
    }
}

enum DriverChoice {
    Named(String),
    Spec(DriverSpec),
}

fn resolve_driver(arg: Option<&str>, mission: Option<&Mission>) -> Result<DriverChoice> {
    match (arg, mission) {
        (None, Some(m)) => Ok(DriverChoice::Spec(m.driver.clone())),
        (None, None) => Ok(DriverChoice::Named("rammer".into())),
        (Some(name), _) if SAFETY_DRIVERS.contains(&name) || name == "idle" => Ok(DriverChoice::Named(name.into())),
        (Some(path), _) => {
            let p = Path::new(path);
            if !p.is_file() {
                return Err(PathError(format!(
                    "driver {path:?} is neither a built-in driver ({}, idle) nor a driver file",
                    SAFETY_DRIVERS.join(", ")
                ))
                .into());
            }
            let spec: DriverSpec = serde_json::from_str(&fs::read_to_string(p)?)
                .with_context(|| format!("parsing driver {}", p.display()))?;
            spec.validate()?;
            Ok(DriverChoice::Spec(spec))
        }
    }
}

/// A named driver against a fixed start.
fn named_spec(name: &str, sc: &Scenario) -> DriverSpec {
    let kind = match name {
        "rammer" => DriverKind::Rammer { speed: sc.bounds.v_max() },
        "orbiter" => DriverKind::Orbiter { radius: 1.0, direction: 1.0 },
        "goal_seeker" => DriverKind::GoalSeeker { target: [-sc.start.x, -sc.start.y], cruise: sc.bounds.v_max() },
        _ => DriverKind::Idle,
    };
    DriverSpec::new(kind)
}

fn write_table(log: &EpisodeLog, path: &Path) -> Result<()> {
    let mut s = String::from("tick,t,x,y,theta,v_d,w_d,v,w,active,h,flow_min,terminal,feasible,intervention\n");
    for r in &log.ticks {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.tick,
            r.t,
            r.state.x,
            r.state.y,
            r.state.theta,
            r.u_d.v,
            r.u_d.omega,
            r.u_safe.v,
            r.u_safe.omega,
            r.active.0,
            r.h,
            r.flow_min,
            r.terminal,
            r.feasible,
            r.intervention
        )?;
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn simulate(a: &SimulateArgs) -> Result<u8> {
    if let Some(p) = &a.scenario {
        input_file(p)?;
    }
    if let Some(p) = &a.model {
        input_file(p)?;
    }
    if let Some(d) = &a.out {
        output_dir(d)?;
    }
    if a.seeds == 0 {
        bail!(mbcbf_core::Error::InvalidParameter("--seeds must be at least 1".into()));
    }
    let mission = a.mission.as_deref().map(Mission::by_name).transpose()?;
    let base = match &mission {
        Some(m) => m.scenario.clone(),
        None => load_scenario(a.scenario.as_ref())?,
    };
    base.validate_structure()?;
    if let Some(k) = a.policy {
        if k >= base.m_k() {
            bail!(mbcbf_core::Error::UnknownPolicy { index: k, count: base.m_k() });
        }
    }
    let driver = resolve_driver(a.driver.as_deref(), mission.as_ref())?;
    let model = load_model(a.model.as_ref())?;
    let duration = a.duration.or(mission.as_ref().map(|m| m.duration)).unwrap_or(8.0);
    if !(duration > 0.0) {
        bail!(mbcbf_core::Error::InvalidParameter("--duration must be positive".into()));
    }
    let policy = a.policy.map(PolicyId);
    let randomized = matches!(driver, DriverChoice::Named(_)) && !a.fixed_start;
    print_config(
        "simulate",
        json!({
            "args": a,
            "scenario": base,
            "duration": duration,
            "driver": match &driver {
                DriverChoice::Named(n) => json!(n),
                DriverChoice::Spec(s) => json!(s),
            },
            "randomized_start": randomized,
            "selector": if model.is_some() { "model" } else { "fixed" },
            "model_fingerprint": model.as_ref().map(|m| m.fingerprint()),
        }),
    );
    // Without a model and without --policy, randomized runs draw the
    // controller per seed like the safety suite does.
    let runs = parallel_map(a.seeds as usize, |i| {
        let seed = a.seed + i as u64;
        let (sc, drv) = match &driver {
            DriverChoice::Named(name) if randomized => {
                let probe = if name == "idle" { "rammer" } else { name.as_str() };
                let (sc, drv) = safety_case(&base, probe, policy, seed);
                (sc, if name == "idle" { DriverSpec::new(DriverKind::Idle) } else { drv })
            }
            DriverChoice::Named(name) => {
                let sc = Scenario { initial_policy: policy.unwrap_or(base.initial_policy), ..base.clone() };
                let drv = named_spec(name, &sc);
                (sc, drv)
            }
            DriverChoice::Spec(s) => {
                (Scenario { initial_policy: policy.unwrap_or(base.initial_policy), ..base.clone() }, s.clone())
            }
        };
        run_episode(&sc, &drv, EpisodeOptions::new(model.as_ref(), duration, seed))
    });
    let logs = runs.into_iter().collect::<mbcbf_core::Result<Vec<_>>>()?;

    if let Some(dir) = &a.out {
        fs::create_dir_all(dir)?;
        for log in &logs {
            log.save_path(&dir.join(format!("episode_{}.jsonl", log.header.seed)))?;
            if a.tables {
                write_table(log, &dir.join(format!("episode_{}.csv", log.header.seed)))?;
            }
        }
    }
    let summaries: Vec<EpisodeSummary> = logs.iter().map(|l| l.summary()).collect();
    let ticks: usize = summaries.iter().map(|s| s.ticks).sum();
    let (worst, min_h) = summaries
        .iter()
        .zip(&logs)
        .map(|(s, l)| (l.header.seed, s.min_h))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("at least one episode");
    let goal = summaries.iter().filter_map(|s| s.min_goal_distance).min_by(f64::total_cmp);
    let mut out = json!({
        "episodes": logs.len(),
        "ticks": ticks,
        "min_h": min_h,
        "min_h_seed": worst,
        "safe": min_h >= -1e-3,
        "bounds_respected": summaries.iter().all(|s| s.bounds_respected),
        "max_intervention": summaries.iter().map(|s| s.max_intervention).fold(0.0, f64::max),
        "mean_intervention": summaries.iter().map(|s| s.mean_intervention * s.ticks as f64).sum::<f64>() / ticks.max(1) as f64,
        "intervened_ticks": logs.iter().flat_map(|l| &l.ticks).filter(|t| t.intervention > 1e-9).count(),
        "infeasible_ticks": summaries.iter().map(|s| s.infeasible_ticks).sum::<usize>(),
        "switches": summaries.iter().map(|s| s.switches).sum::<usize>(),
        "rejected_switches": summaries.iter().map(|s| s.rejected_switches).sum::<u64>(),
        "min_goal_distance": goal,
    });
    if let Some(m) = &mission {
        out["goal_reached"] =
            json!(summaries.iter().filter(|s| s.min_goal_distance.is_some_and(|d| d <= m.goal_tolerance)).count());
    }
    if a.per_episode {
        out["per_episode"] =
            json!(logs.iter().zip(&summaries).map(|(l, s)| json!({"seed": l.header.seed, "summary": s})).collect::<Vec<_>>());
    }
    println!("{}", json!({ "summary": out }));
    Ok(0)
}

pub fn collect(a: &CollectArgs) -> Result<u8> {
    if let Some(p) = &a.scenario {
        input_file(p)?;
    }
    if let Some(p) = &a.curriculum {
        input_file(p)?;
    }
    output_file(&a.out)?;
    let sc = load_scenario(a.scenario.as_ref())?;
    sc.validate()?;
    let items: Vec<CurriculumItem> = match &a.curriculum {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => default_curriculum(&sc, a.episodes, a.seed)?,
    };
    if items.is_empty() {
        bail!(mbcbf_core::Error::InvalidParameter("curriculum is empty".into()));
    }
    print_config("collect", json!({ "args": a, "scenario": sc, "curriculum_items": items.len() }));
    let d = collect_dataset(&sc, &items, a.episodes, a.seed)?;
    d.save_path(&a.out)?;
    println!(
        "{}",
        json!({ "dataset": { "path": a.out, "rows": d.rows.len(), "episodes": d.episodes().len(), "label_counts": d.label_counts() } })
    );
    Ok(0)
}

pub fn train(a: &TrainArgs) -> Result<u8> {
    input_file(&a.dataset)?;
    if let Some(p) = &a.config {
        input_file(p)?;
    }
    output_file(&a.out_model)?;
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(t) = a.target_accuracy {
        cfg.target_accuracy = Some(t);
    }
    cfg.validate()?;
    let d = Dataset::load_path(&a.dataset).with_context(|| format!("loading dataset {}", a.dataset.display()))?;
    print_config("train", json!({ "args": a, "train": cfg, "rows": d.rows.len() }));
    let (model, report) = train_with(&d, &cfg, |e| info!("epoch {}: {}", e.epoch, serde_json::to_string(e).unwrap_or_default()))?;
    model.save_path(&a.out_model)?;
    println!(
        "{}",
        json!({ "trained": {
            "model": a.out_model,
            "fingerprint": model.fingerprint(),
            "epochs": report.epochs.len(),
            "best_val_accuracy": report.best_val_accuracy(),
            "final": report.epochs.last(),
            "train_windows": report.train_windows,
            "val_windows": report.val_windows,
        }})
    );
    Ok(0)
}

pub fn eval(a: &EvalArgs) -> Result<u8> {
    input_file(&a.dataset)?;
    input_file(&a.model)?;
    let d = Dataset::load_path(&a.dataset)?;
    let model = RewardModel::load_path(&a.model)?;
    if d.m_k != model.config.outputs {
        bail!(mbcbf_core::Error::Model(format!(
            "model has {} outputs but the dataset has {} classes",
            model.config.outputs, d.m_k
        )));
    }
    print_config("eval", json!({ "args": a, "model_fingerprint": model.fingerprint(), "rows": d.rows.len() }));
    let windows = WindowSet::build(&shift_labels(&d, a.label_shift), model.config.steps, None);
    let m = evaluate(&model, &windows)?;
    println!("{}", json!({ "eval": m }));
    Ok(0)
}

pub fn replay(a: &ReplayArgs) -> Result<u8> {
    input_file(&a.log)?;
    if let Some(p) = &a.model {
        input_file(p)?;
    }
    let log = EpisodeLog::load_path(&a.log).with_context(|| format!("loading log {}", a.log.display()))?;
    let model = load_model(a.model.as_ref())?;
    print_config(
        "replay",
        json!({ "args": a, "header": log.header, "model_fingerprint": model.as_ref().map(|m| m.fingerprint()) }),
    );
    let r = mbcbf_core::sim::replay(&log, model.as_ref())?;
    let verdict = match r.verdict() {
        Verdict::BitExact => "bit-exact",
        Verdict::Diverged => "diverged",
        Verdict::Counterfactual => "counterfactual",
    };
    println!(
        "{}",
        json!({ "replay": { "verdict": verdict, "ticks": log.ticks.len(), "first_divergence": r.first_divergence, "summary": r.log.summary() } })
    );
    Ok(if r.verdict() == Verdict::Diverged { exit::DIVERGED } else { 0 })
}

pub fn serve(a: &ServeArgs) -> Result<u8> {
    if let Some(p) = &a.scenario {
        input_file(p)?;
    }
    if let Some(p) = &a.model {
        input_file(p)?;
    }
    for p in [&a.out_log, &a.out_dataset].into_iter().flatten() {
        output_file(p)?;
    }
    let sc = match &a.mission {
        Some(name) => Mission::by_name(name)?.scenario,
        None => load_scenario(a.scenario.as_ref())?,
    };
    sc.validate()?;
    let model = load_model(a.model.as_ref())?;
    let opts = SessionOptions { hold_timeout: a.hold_timeout, max_ticks: a.max_ticks, ..SessionOptions::default() };
    let server = Server::bind((a.bind.as_str(), a.port))?;
    let addr = server.local_addr()?;
    print_config(
        "serve",
        json!({ "args": a, "scenario": sc, "session": opts, "model_fingerprint": model.as_ref().map(|m| m.fingerprint()) }),
    );
    println!("{}", json!({ "listening": addr.to_string() }));
    let stop = AtomicBool::new(false);
    let report = server.run(&sc, model.as_ref(), &opts, &stop)?;
    if let Some(p) = &a.out_log {
        report.log.save_path(p)?;
    }
    if let Some(p) = &a.out_dataset {
        report.dataset.save_path(p)?;
    }
    let s = &report.stats;
    println!(
        "{}",
        json!({ "session": {
            "ticks": s.ticks,
            "clients_served": s.clients_served,
            "stale_dropped": s.stale_dropped,
            "rejected_messages": s.rejected_messages,
            "median_compute_ms": s.median_compute() * 1e3,
            "p95_jitter_ms": s.jitter_quantile(sc.tick_dt, 0.95) * 1e3,
            "labeled_rows": report.dataset.rows.len(),
            "summary": report.log.summary(),
        }})
    );
    Ok(0)
}

pub fn verify(a: &VerifyArgs) -> Result<u8> {
    if let Some(p) = &a.model {
        input_file(p)?;
    }
    let mut scale = if a.quick { VerifyScale::quick() } else { VerifyScale::full() };
    if let Some(s) = a.seed {
        scale.seed = s;
    }
    let model = load_model(a.model.as_ref())?;
    print_config("verify", json!({ "args": a, "scale": scale }));
    let results = run_all(&scale, model, |r| println!("{}", json!({ "check": r })));
    let failed: Vec<u32> = results.iter().filter(|r| !r.passed).map(|r| r.id).collect();
    println!("{}", json!({ "verify": { "passed": failed.is_empty(), "checks": results.len(), "failed": failed } }));
    Ok(if failed.is_empty() { 0 } else { exit::FAILURE })
}
