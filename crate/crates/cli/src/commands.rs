use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::Context;
use hzdlab_core::analysis::{self, FixedPointOptions};
use hzdlab_core::control::TorqueLimits;
use hzdlab_core::gait::{self, BezierGait, GaitSearchOptions};
use hzdlab_core::learn::{self, PolicyCheckpoint, RlController, TrainSetup};
use hzdlab_core::model::{scale_params, RobotParams, RobotState};
use hzdlab_core::sim::{self, Controller, IoController};
use serde::Serialize;

use crate::config::{ControllerKind, ExperimentConfig};
use crate::ConfigError;

fn out_path(cfg: &ExperimentConfig, name: &str) -> anyhow::Result<PathBuf> {
    let dir = &cfg.experiment.output_dir;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir.join(name))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn model_params(cfg: &ExperimentConfig) -> anyhow::Result<RobotParams> {
    Ok(match &cfg.robot.params {
        Some(p) => RobotParams::load(p)?,
        None => RobotParams::default(),
    })
}

fn load_gait(cfg: &ExperimentConfig, params: &RobotParams) -> anyhow::Result<BezierGait> {
    Ok(match &cfg.gait.path {
        Some(p) => BezierGait::load(p)?,
        None => gait::rabbit_seed(params),
    })
}

fn search_options(cfg: &ExperimentConfig) -> GaitSearchOptions {
    GaitSearchOptions { tolerance: cfg.gait.tolerance, max_evals: cfg.gait.max_evals, control: cfg.finite_time(), sim: cfg.sim }
}

fn limits(cfg: &ExperimentConfig) -> anyhow::Result<Option<TorqueLimits>> {
    Ok(cfg.controller.u_max.map(TorqueLimits::symmetric).transpose()?)
}

fn load_policy(cfg: &ExperimentConfig) -> anyhow::Result<PolicyCheckpoint> {
    let path = cfg.controller.policy.as_ref().ok_or_else(|| ConfigError("the rl controller needs a policy checkpoint".into()))?;
    if !path.exists() {
        return Err(ConfigError(format!("policy {} does not exist", path.display())).into());
    }
    Ok(PolicyCheckpoint::load(path)?)
}

fn build_controller(cfg: &ExperimentConfig, model: &RobotParams, gait: &BezierGait) -> anyhow::Result<Box<dyn Controller>> {
    let lim = limits(cfg)?;
    Ok(match cfg.controller.kind {
        ControllerKind::Original => {
            let lim = if cfg.controller.saturate_original { lim } else { None };
            Box::new(IoController::new(*model, gait.clone(), cfg.finite_time()).with_limits(lim))
        }
        ControllerKind::Rl => {
            let ck = load_policy(cfg)?;
            Box::new(RlController::new(*model, gait.clone(), cfg.finite_time(), ck.actor, ck.action_scale).with_limits(lim))
        }
    })
}

/// Model, plant, gait and the post-impact state of the nominal orbit.
fn world(cfg: &ExperimentConfig) -> anyhow::Result<(RobotParams, RobotParams, BezierGait, RobotState)> {
    let model = model_params(cfg)?;
    let plant = scale_params(&model, cfg.robot.scale)?;
    let gait = load_gait(cfg, &model)?;
    let (x0, residual, _) = gait::periodic_state(&model, &gait, &search_options(cfg))?;
    log::info!("nominal orbit residual {residual:.2e}");
    Ok((model, plant, gait, x0))
}

#[derive(Serialize)]
struct GaitReport {
    label: String,
    residual: f64,
    evaluations: usize,
    max_hip_height: f64,
    initial_state: RobotState,
}

pub fn gait_gen(cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let params = model_params(cfg)?;
    let mut seed = load_gait(cfg, &params)?;
    if cfg.gait.hip_offset != 0.0 {
        seed = gait::hip_height_variant(&params, &seed, cfg.gait.hip_offset)?;
    }
    let found = gait::find_periodic_gait(&params, &seed, &search_options(cfg))?;
    found.gait.save(&out_path(cfg, "gait.json")?)?;
    let report = GaitReport {
        label: found.gait.label.clone(),
        residual: found.residual,
        evaluations: found.evaluations,
        max_hip_height: found.gait.max_hip_height,
        initial_state: found.initial_state,
    };
    write_json(&out_path(cfg, "gait_report.json")?, &report)?;
    println!("gait {} residual {:.3e} max hip height {:.4} m", report.label, report.residual, report.max_hip_height);
    Ok(())
}

#[derive(Serialize)]
struct SimulateSummary {
    controller: ControllerKind,
    scale: f64,
    u_max: Option<f64>,
    status: sim::Status,
    steps_completed: usize,
    mean_y_norm: f64,
    max_y_norm: f64,
    max_torque: f64,
    step_durations: Vec<f64>,
    failure: Option<String>,
}

pub fn simulate(cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let (model, plant, gait, x0) = world(cfg)?;
    let mut ctrl = build_controller(cfg, &model, &gait)?;
    let log = sim::simulate_walk(ctrl.as_mut(), &plant, &gait, &x0, cfg.experiment.steps, &cfg.sim)?;
    log.write_csv(BufWriter::new(File::create(out_path(cfg, "log.csv")?)?))?;
    let m = analysis::tracking_metrics(&log)?;
    let summary = SimulateSummary {
        controller: cfg.controller.kind,
        scale: cfg.robot.scale,
        u_max: cfg.controller.u_max,
        status: log.status,
        steps_completed: log.steps_completed,
        mean_y_norm: m.mean_y_norm,
        max_y_norm: m.max_y_norm,
        max_torque: m.max_torque,
        step_durations: log.step_durations(),
        failure: log.failure.clone(),
    };
    write_json(&out_path(cfg, "summary.json")?, &summary)?;
    println!("{:?}: {} steps, mean |y| {:.4}, max |u| {:.1}", summary.status, summary.steps_completed, summary.mean_y_norm, summary.max_torque);
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    seed: u64,
    scale: f64,
    u_max: Option<f64>,
    episodes_run: usize,
    updates: usize,
    best_eval_steps: usize,
}

pub fn train(cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let (model, plant, gait, x_star) = world(cfg)?;
    let setup = TrainSetup { plant, model, gait, control: cfg.finite_time(), limits: limits(cfg)?, sim: cfg.sim, x_star };
    let seed = cfg.experiment.seed;
    let outcome = learn::train(&setup, &cfg.ddpg, seed)?;
    PolicyCheckpoint::new(outcome.actor.clone(), cfg.ddpg, seed).save(&out_path(cfg, "policy.json")?)?;
    let mut w = csv::Writer::from_path(out_path(cfg, "training_curve.csv")?)?;
    w.write_record(["episode", "return", "steps_survived", "mean_loss", "transitions", "eval_steps"])?;
    for e in &outcome.curve {
        w.write_record([
            e.episode.to_string(),
            format!("{:.9e}", e.episode_return),
            e.steps_survived.to_string(),
            format!("{:.9e}", e.mean_loss),
            e.transitions.to_string(),
            e.eval_steps.map(|s| s.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    let summary = TrainSummary {
        seed,
        scale: cfg.robot.scale,
        u_max: cfg.controller.u_max,
        episodes_run: outcome.curve.len(),
        updates: outcome.updates,
        best_eval_steps: outcome.best_eval_steps,
    };
    write_json(&out_path(cfg, "train_summary.json")?, &summary)?;
    println!("trained {} episodes, {} updates, best evaluation {} steps", summary.episodes_run, summary.updates, summary.best_eval_steps);
    Ok(())
}

#[derive(Serialize)]
struct AnalyzeOutput {
    #[serde(flatten)]
    report: Option<analysis::AnalysisReport>,
    fixed_point_converged: bool,
    fixed_point_residual: f64,
    tracking: Tracking,
}

#[derive(Serialize)]
struct Tracking {
    steps_completed: usize,
    mean_y_norm: f64,
    max_y_norm: f64,
    max_torque: f64,
}

pub fn analyze(cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let (model, plant, gait, x0) = world(cfg)?;
    let mut ctrl = build_controller(cfg, &model, &gait)?;
    let log = sim::simulate_walk(ctrl.as_mut(), &plant, &gait, &x0, cfg.experiment.steps, &cfg.sim)?;
    let m = analysis::tracking_metrics(&log)?;
    let mut w = csv::Writer::from_path(out_path(cfg, "tracking.csv")?)?;
    w.write_record(["t", "y_norm", "step_index"])?;
    for (s, y) in log.samples.iter().zip(&m.y_norm_series) {
        w.write_record([format!("{:.6}", s.t), format!("{y:.9e}"), s.step_index.to_string()])?;
    }
    w.flush()?;
    let tracking = Tracking { steps_completed: m.steps_completed, mean_y_norm: m.mean_y_norm, max_y_norm: m.max_y_norm, max_torque: m.max_torque };

    let opts = FixedPointOptions::default();
    // Start from the last post-impact state reached; the orbit of a
    // mismatched plant differs from the nominal one.
    let guess = log.impacts.last().map(|i| i.post).unwrap_or(x0);
    let fp = analysis::find_fixed_point(ctrl.as_mut(), &plant, &gait, &guess, &cfg.sim, &opts);
    let path = out_path(cfg, "analysis.json")?;
    let fp = match fp {
        Ok(fp) => fp,
        Err(e) => {
            write_json(&path, &AnalyzeOutput { report: None, fixed_point_converged: false, fixed_point_residual: f64::NAN, tracking })?;
            return Err(e.into());
        }
    };
    if !(fp.residual < opts.accept_residual) {
        write_json(&path, &AnalyzeOutput { report: None, fixed_point_converged: false, fixed_point_residual: fp.residual, tracking })?;
        println!("no fixed point: best residual {:.3e}", fp.residual);
        return Err(hzdlab_core::Error::NonConvergence { residual: fp.residual }.into());
    }
    let (_, report) =
        analysis::stability_report(ctrl.as_mut(), &plant, &gait, &fp.fixed_point, cfg.experiment.perturbation, &cfg.sim, &opts)?;
    println!(
        "dominant eigenvalue {:.4} ({}), refinement ratio {:.2e}",
        report.dominant,
        if report.stable { "stable" } else { "unstable" },
        report.refinement_ratio
    );
    write_json(&path, &AnalyzeOutput { fixed_point_converged: fp.converged, fixed_point_residual: fp.residual, report: Some(report), tracking })?;
    Ok(())
}

#[derive(Serialize)]
struct GaitEval {
    label: String,
    max_hip_height: f64,
    status: Option<sim::Status>,
    steps_completed: usize,
    mean_y_norm: f64,
    max_torque: f64,
    note: Option<String>,
}

pub fn eval_gaits(cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let model = model_params(cfg)?;
    let plant = scale_params(&model, cfg.robot.scale)?;
    let base = load_gait(cfg, &model)?;
    let ck = load_policy(cfg)?;
    let mut gaits = vec![base.clone()];
    for p in &cfg.experiment.eval_gaits {
        gaits.push(BezierGait::load(p)?);
    }
    for &h in &cfg.experiment.eval_hip_offsets {
        gaits.push(gait::hip_height_variant(&model, &base, h)?);
    }
    let mut rows = Vec::new();
    for g in &gaits {
        let row = match gait::periodic_state(&model, g, &search_options(cfg)) {
            Err(e) => GaitEval {
                label: g.label.clone(),
                max_hip_height: g.max_hip_height,
                status: None,
                steps_completed: 0,
                mean_y_norm: f64::NAN,
                max_torque: f64::NAN,
                note: Some(format!("no nominal orbit: {e}")),
            },
            Ok((x0, _, _)) => {
                let setup =
                    TrainSetup { plant, model, gait: g.clone(), control: cfg.finite_time(), limits: limits(cfg)?, sim: cfg.sim, x_star: x0 };
                let log = learn::evaluate_policy(&setup, &ck.actor, &ck.action_scale, cfg.experiment.steps)?;
                let m = analysis::tracking_metrics(&log)?;
                GaitEval {
                    label: g.label.clone(),
                    max_hip_height: gait::max_hip_height(&model, g),
                    status: Some(log.status),
                    steps_completed: log.steps_completed,
                    mean_y_norm: m.mean_y_norm,
                    max_torque: m.max_torque,
                    note: log.failure,
                }
            }
        };
        println!("{:<32} hip {:.4} m: {} steps", row.label, row.max_hip_height, row.steps_completed);
        rows.push(row);
    }
    let mut w = csv::Writer::from_path(out_path(cfg, "eval_gaits.csv")?)?;
    w.write_record(["label", "max_hip_height", "steps_completed", "mean_y_norm", "max_torque"])?;
    for r in &rows {
        w.write_record([
            r.label.clone(),
            format!("{:.6}", r.max_hip_height),
            r.steps_completed.to_string(),
            format!("{:.6e}", r.mean_y_norm),
            format!("{:.6e}", r.max_torque),
        ])?;
    }
    w.flush()?;
    write_json(&out_path(cfg, "eval_gaits.json")?, &rows)?;
    Ok(())
}
