use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use sepsis_core::bifurcation::{
    detect_limit_cycle_traj, phase_csv, phase_export, pitchfork_search, sweep, sweep_subsystem, BifurcationDiagram,
    Pitchfork,
};
use sepsis_core::bo::dataset::{generate_dataset, ControlDataset};
use sepsis_core::bo::derive_seed;
use sepsis_core::bo::window::{receding_horizon, RecedingPlan, Searcher};
use sepsis_core::control::{
    evaluate_from, evaluate_objective, evaluate_uncontrolled, ControlSignal, ObjectiveEval, ScenarioSetting,
};
use sepsis_core::integrator::{integrate, Trajectory};
use sepsis_core::presets::{analysis_params, oscillation_start, perturbed_settings, scenario_preset, ScenarioPreset};
use sepsis_core::rnn::{rollout, train_on_dataset, RnnModel};
use sepsis_core::{Error, ParameterSet, Result, Subsystem};

use crate::config::RunConfig;
use crate::manifest::Run;

// Stream tags for seeds derived from the top-level seed.
const STREAM_TRAIN_SETTINGS: u64 = 1;
const STREAM_HELD_OUT: u64 = 2;

fn base() -> ParameterSet {
    ParameterSet::default()
}

/// The configured scenario preset with config-level overrides applied.
pub fn resolve_preset(cfg: &RunConfig, name: &str) -> Result<ScenarioPreset> {
    let mut pr = scenario_preset(name, cfg.t_f, cfg.d)?;
    pr.setting.overrides.extend(cfg.params.iter().map(|(k, v)| (k.clone(), *v)));
    if let Some(init) = &cfg.initial {
        pr.setting.initial = init.apply(&pr.setting.initial)?;
    }
    pr.objective = cfg.objective.for_scenario(pr.setting.scenario);
    pr.setting.validate()?;
    pr.objective.validate()?;
    Ok(pr)
}

fn objective_csv(eval: &ObjectiveEval) -> String {
    let mut out = String::from("time,instantaneous,accumulated\n");
    for ((t, i), a) in eval.trajectory.times.iter().zip(&eval.instantaneous).zip(&eval.accumulated) {
        writeln!(out, "{t},{i},{a}").unwrap();
    }
    out
}

/// Largest TNF to IL-10 ratio along a trajectory.
pub fn peak_tnf_ratio(traj: &Trajectory, eps: f64) -> f64 {
    traj.states.iter().map(|s| s.t() / s.c_a().max(eps)).fold(0.0, f64::max)
}

pub fn simulate(cfg: &RunConfig, run: &mut Run) -> Result<()> {
    if cfg.subsystem != Subsystem::Full {
        let (sub, p) = analysis_params(&cfg.bifurcation.analysis)?;
        if sub != cfg.subsystem {
            return Err(Error::Config(format!(
                "analysis preset `{}` is for the {} subsystem",
                cfg.bifurcation.analysis,
                sub.name()
            )));
        }
        let p = p.with_overrides(&cfg.params)?;
        let start = oscillation_start(sub, &p);
        let x0 = match &cfg.initial {
            Some(i) => i.apply(&start)?,
            None => start,
        };
        let traj = integrate(sub, &x0, &p, None, (0.0, cfg.t_f as f64), &cfg.integrator)?;
        run.write("trajectory.csv", traj.to_csv().as_bytes())?;
        return Ok(());
    }
    let pr = resolve_preset(cfg, &cfg.preset)?;
    let params = pr.setting.params(&base())?;
    let control = match &cfg.control_file {
        Some(path) => {
            let text = String::from_utf8(run.read_input(path)?)
                .map_err(|_| Error::Config("control file is not UTF-8".into()))?;
            let c = ControlSignal::from_csv(&text)?;
            c.check_bounds(&params)?;
            c
        }
        None => ControlSignal::lower(pr.setting.scenario.channel(), 0.0, 1.0, pr.setting.t_f, &params),
    };
    let eval = evaluate_from(&pr.setting.initial, &params, &control, pr.setting.horizon(), &pr.objective, &cfg.integrator)?;
    run.write("trajectory.csv", eval.trajectory.to_csv().as_bytes())?;
    run.write("objective.csv", objective_csv(&eval).as_bytes())?;
    run.write_json(
        "summary.json",
        &json!({
            "preset": pr.name,
            "objective": eval.j,
            "peak_tnf_il10_ratio": peak_tnf_ratio(&eval.trajectory, pr.objective.epsilon_floor),
        }),
    )?;
    Ok(())
}

pub fn bifurcate(cfg: &RunConfig, run: &mut Run) -> Result<()> {
    let b = &cfg.bifurcation;
    let grid = b.grid.values()?;
    let t0 = Instant::now();
    let diagram: BifurcationDiagram = if b.pitchfork {
        sweep(|mu| Ok(Pitchfork { mu }), "mu", &grid, &pitchfork_search(), &b.classify)?
    } else {
        let (sub, p) = analysis_params(&b.analysis)?;
        let p = p.with_overrides(&cfg.params)?;
        sweep_subsystem(sub, &p, &b.param, &grid, &b.search, &b.classify)?
    };
    run.metric("sweep_seconds", t0.elapsed().as_secs_f64());
    run.write("diagram.csv", diagram.to_csv().as_bytes())?;
    run.write_json("diagram.json", &diagram)?;

    if b.cycle.enabled && !b.pitchfork {
        let (sub, p) = analysis_params(&b.analysis)?;
        let p = p.with_overrides(&cfg.params)?;
        let x0 = oscillation_start(sub, &p);
        let traj = integrate(sub, &x0, &p, None, (0.0, b.cycle.t_end), &cfg.integrator)?;
        let vars: Vec<&str> = b.cycle.variables.iter().map(String::as_str).collect();
        let report = detect_limit_cycle_traj(&traj, &p, &vars, &b.cycle.thresholds)?;
        run.write_json("cycle.json", &report)?;
        if (2..=3).contains(&vars.len()) {
            run.write("phase.csv", phase_csv(&vars, &phase_export(&traj, &vars)?).as_bytes())?;
        }
        run.write("cycle_trajectory.csv", traj.to_csv().as_bytes())?;
    }
    Ok(())
}

#[derive(Serialize)]
struct MethodSummary {
    objective: f64,
    eval_count: usize,
    peak_tnf_il10_ratio: f64,
}

const METHODS: [(Searcher, &str); 3] =
    [(Searcher::Improved, "improved"), (Searcher::Standard, "standard"), (Searcher::Random, "random")];

fn plans(cfg: &RunConfig, pr: &ScenarioPreset) -> Result<Vec<(RecedingPlan, ObjectiveEval)>> {
    METHODS
        .par_iter()
        .map(|(s, _)| {
            let plan = receding_horizon(&pr.setting, &base(), &cfg.bo, *s, &pr.objective, &cfg.integrator)?;
            let eval = evaluate_objective(&pr.setting, &base(), &plan.control, &pr.objective, &cfg.integrator)?;
            Ok((plan, eval))
        })
        .collect()
}

fn accumulated_csv(names: &[&str], evals: &[&ObjectiveEval]) -> String {
    let mut out = String::from("time");
    for n in names {
        write!(out, ",{n}").unwrap();
    }
    out.push('\n');
    for (k, t) in evals[0].trajectory.times.iter().enumerate() {
        write!(out, "{t}").unwrap();
        for e in evals {
            write!(out, ",{}", e.accumulated[k]).unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn optimize(cfg: &RunConfig, run: &mut Run) -> Result<()> {
    let pr = resolve_preset(cfg, &cfg.preset)?;
    let t0 = Instant::now();
    let unc = evaluate_uncontrolled(&pr.setting, &base(), &pr.objective, &cfg.integrator)?;
    let results = plans(cfg, &pr)?;
    run.metric("optimize_seconds", t0.elapsed().as_secs_f64());

    let mut summary = BTreeMap::new();
    let mut budget = String::from("window_start");
    for (_, name) in METHODS {
        write!(budget, ",{name}_evals").unwrap();
    }
    budget.push('\n');
    for (w, _) in results[0].0.windows.iter().enumerate() {
        write!(budget, "{}", results[0].0.windows[w].window_start).unwrap();
        for (plan, _) in &results {
            write!(budget, ",{}", plan.windows[w].eval_count).unwrap();
        }
        budget.push('\n');
    }
    for ((plan, eval), (_, name)) in results.iter().zip(METHODS) {
        run.write_json(&format!("windows_{name}.json"), &plan.windows)?;
        run.write(&format!("control_{name}.csv"), plan.control.to_csv().as_bytes())?;
        summary.insert(
            name,
            MethodSummary {
                objective: eval.j,
                eval_count: plan.eval_count(),
                peak_tnf_il10_ratio: peak_tnf_ratio(&eval.trajectory, pr.objective.epsilon_floor),
            },
        );
    }
    let mut names = vec!["uncontrolled"];
    names.extend(METHODS.iter().map(|m| m.1));
    let mut evals = vec![&unc];
    evals.extend(results.iter().map(|r| &r.1));
    run.write("comparison.csv", accumulated_csv(&names, &evals).as_bytes())?;
    run.write("budget.csv", budget.as_bytes())?;
    let windows = results[0].0.windows.len();
    run.write_json(
        "summary.json",
        &json!({
            "preset": pr.name,
            "uncontrolled_objective": unc.j,
            "uncontrolled_peak_tnf_il10_ratio": peak_tnf_ratio(&unc.trajectory, pr.objective.epsilon_floor),
            "methods": summary,
            "windows": windows,
            "budget_per_window": {
                "improved": cfg.bo.budget(),
                "standard": cfg.bo.standard().budget(),
                "random": cfg.bo.budget(),
            },
        }),
    )?;
    Ok(())
}

/// Training settings drawn around the preset.
pub fn training_settings(cfg: &RunConfig, pr: &ScenarioPreset) -> Vec<ScenarioSetting> {
    perturbed_settings(
        &pr.setting,
        cfg.dataset.n_settings,
        cfg.dataset.spread,
        derive_seed(cfg.seed, STREAM_TRAIN_SETTINGS, 0),
    )
}

/// Held-out settings for prediction; the preset itself when none are requested.
pub fn held_out_settings(cfg: &RunConfig, pr: &ScenarioPreset) -> Vec<ScenarioSetting> {
    if cfg.predict.n_settings == 0 {
        return vec![pr.setting.clone()];
    }
    perturbed_settings(&pr.setting, cfg.predict.n_settings, cfg.predict.spread, derive_seed(cfg.seed, STREAM_HELD_OUT, 0))
}

pub fn generate_data(cfg: &RunConfig, run: &mut Run) -> Result<()> {
    let pr = resolve_preset(cfg, &cfg.preset)?;
    if cfg.dataset.n_settings == 0 {
        return Err(Error::Config("dataset.n_settings must be positive".into()));
    }
    let settings = training_settings(cfg, &pr);
    let t0 = Instant::now();
    let ds = generate_dataset(&settings, &base(), &cfg.bo, &pr.objective, &cfg.integrator)?;
    run.metric("generate_seconds", t0.elapsed().as_secs_f64());
    run.metric("records", ds.records.len() as f64);
    let mut buf = Vec::new();
    ds.write_jsonl(&mut buf)?;
    run.write("dataset.jsonl", &buf)?;
    if !ds.header.complete {
        let f = &ds.header.failures[0];
        return Err(Error::Numeric(format!(
            "{} setting(s) failed; first: setting {} at window {}: {}",
            ds.header.failures.len(),
            f.setting_id,
            f.window_start,
            f.error
        )));
    }
    Ok(())
}

pub fn train(cfg: &RunConfig, run: &mut Run) -> Result<()> {
    let path = cfg.dataset_path.as_ref().ok_or_else(|| Error::Config("train needs dataset_path".into()))?;
    let bytes = run.read_input(path)?;
    let ds = ControlDataset::read_jsonl(bytes.as_slice())?;
    let t0 = Instant::now();
    let (model, report) = train_on_dataset(&ds, &base(), &cfg.train)?;
    run.metric("train_seconds", t0.elapsed().as_secs_f64());
    let epochs = report.epoch_seconds.len().max(1) as f64;
    run.metric("mean_epoch_seconds", report.epoch_seconds.iter().sum::<f64>() / epochs);
    run.write("model.json", model.to_json()?.as_bytes())?;
    let mut loss = String::from("epoch,train_loss,validation_loss\n");
    for (e, (t, v)) in report.train_loss.iter().zip(&report.validation_loss).enumerate() {
        writeln!(loss, "{e},{t},{v}").unwrap();
    }
    run.write("loss.csv", loss.as_bytes())?;
    run.write_json(
        "train_report.json",
        &json!({
            "epochs_run": report.train_loss.len(),
            "best_epoch": report.best_epoch,
            "final_validation_mse": report.final_validation_mse,
            "n_train": report.n_train,
            "n_validation": report.n_validation,
        }),
    )?;
    Ok(())
}

fn load_model(cfg: &RunConfig, run: &mut Run) -> Result<RnnModel> {
    let path = cfg.model_path.as_ref().ok_or_else(|| Error::Config("model_path is required".into()))?;
    let bytes = run.read_input(path)?;
    RnnModel::from_json(std::str::from_utf8(&bytes).map_err(|_| Error::Config("model file is not UTF-8".into()))?)
}

pub fn predict(cfg: &RunConfig, run: &mut Run) -> Result<()> {
    let model = load_model(cfg, run)?;
    let pr = resolve_preset(cfg, &cfg.preset)?;
    let mut rows = Vec::new();
    for (i, s) in held_out_settings(cfg, &pr).iter().enumerate() {
        let r = rollout(&model, s, &base(), cfg.predict.mode, &pr.objective, &cfg.integrator)?;
        let unc = evaluate_uncontrolled(s, &base(), &pr.objective, &cfg.integrator)?;
        run.metric(&format!("predict_seconds_{i}"), r.predict_seconds);
        run.write(&format!("predicted_control_{i}.csv"), r.control.to_csv().as_bytes())?;
        if let Some(e) = &r.evaluation {
            run.write(&format!("trajectory_{i}.csv"), e.trajectory.to_csv().as_bytes())?;
        }
        rows.push(json!({
            "setting": i,
            "objective": r.evaluation.as_ref().map(|e| e.j),
            "uncontrolled_objective": unc.j,
            "below_uncontrolled": r.evaluation.as_ref().map(|e| e.j < unc.j),
            "failure": r.failure,
        }));
    }
    run.write_json("evaluation.json", &rows)?;
    if let Some(f) = rows.iter().find_map(|r| r["failure"].as_str().map(String::from)) {
        return Err(Error::Numeric(format!("rollout stopped early: {f}")));
    }
    Ok(())
}

pub fn compare(cfg: &RunConfig, run: &mut Run) -> Result<()> {
    let model = match &cfg.model_path {
        Some(_) => Some(load_model(cfg, run)?),
        None => None,
    };
    let mut summary = BTreeMap::new();
    for name in &cfg.compare_presets {
        let pr = resolve_preset(cfg, name)?;
        let eps = pr.objective.epsilon_floor;
        let unc = evaluate_uncontrolled(&pr.setting, &base(), &pr.objective, &cfg.integrator)?;
        let results = plans(cfg, &pr)?;
        let mut names = vec!["uncontrolled"];
        let mut evals = vec![&unc];
        names.extend(METHODS.iter().map(|m| m.1));
        evals.extend(results.iter().map(|r| &r.1));
        let rnn_eval = match &model {
            Some(m) if m.channel == Some(pr.setting.scenario.channel()) => {
                let r = rollout(m, &pr.setting, &base(), cfg.predict.mode, &pr.objective, &cfg.integrator)?;
                run.metric(&format!("{name}_rnn_predict_seconds"), r.predict_seconds);
                r.evaluation
            }
            _ => None,
        };
        if let Some(e) = &rnn_eval {
            names.push("rnn");
            evals.push(e);
        }
        run.write(&format!("{name}/accumulated.csv"), accumulated_csv(&names, &evals).as_bytes())?;
        let mut entry = BTreeMap::new();
        let mut best_peak = f64::INFINITY;
        for (n, e) in names.iter().zip(&evals) {
            run.write(&format!("{name}/trajectory_{n}.csv"), e.trajectory.to_csv().as_bytes())?;
            let peak = peak_tnf_ratio(&e.trajectory, eps);
            if *n != "uncontrolled" {
                best_peak = best_peak.min(peak);
            }
            entry.insert(n.to_string(), json!({ "objective": e.j, "peak_tnf_il10_ratio": peak, "below_uncontrolled": e.j < unc.j }));
        }
        entry.insert("peak_ratio_factor".into(), json!(peak_tnf_ratio(&unc.trajectory, eps) / best_peak));
        summary.insert(name.clone(), entry);
    }
    run.write_json("summary.json", &summary)?;
    Ok(())
}

