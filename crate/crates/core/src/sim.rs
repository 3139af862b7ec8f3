//! Hybrid simulation: RK4 over single support, bisection on the guard,
//! the impact map at foot strike, fall detection and episode logs.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::control::{self, FiniteTimeParams, TorqueLimits};
use crate::error::{Error, Result};
use crate::gait::{output_value, phasing, BezierGait};
use crate::model::{self, RobotParams, RobotState, Vec4, IQ5, IY};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FallConfig {
    pub min_hip_height: f64,
    pub max_torso_angle: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub dt: f64,
    pub event_tol: f64,
    pub max_step_time: f64,
    pub fall: FallConfig,
    /// Impact detection is armed once the normalized phase exceeds this.
    pub guard_arm_phase: f64,
    /// Evaluate the controller inside every RK4 stage instead of holding the
    /// torque over the step.
    pub stage_continuous: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        let leg = RobotParams::default().leg_length();
        Self {
            dt: 1e-3,
            event_tol: 1e-12,
            max_step_time: 2.0,
            fall: FallConfig { min_hip_height: 0.5 * leg, max_torso_angle: 1.0 },
            guard_arm_phase: 0.5,
            stage_continuous: false,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.event_tol > 0.0 && self.max_step_time > self.dt) {
            return Err(Error::Config("sim needs dt > 0, event_tol > 0 and max_step_time > dt".into()));
        }
        Ok(())
    }
}

/// What a controller produced at one sample.
#[derive(Clone, Copy, Debug)]
pub struct ControlSample {
    pub u: Vec4,
    pub v: Vec4,
    pub y: Vec4,
    pub ydot: Vec4,
    pub theta: f64,
}

pub trait Controller {
    fn control(&mut self, state: &RobotState) -> Result<ControlSample>;
}

/// The original linearizing controller on a model, optionally saturated.
#[derive(Clone, Debug)]
pub struct IoController {
    pub model: RobotParams,
    pub gait: BezierGait,
    pub params: FiniteTimeParams,
    pub limits: Option<TorqueLimits>,
}

impl IoController {
    pub fn new(model: RobotParams, gait: BezierGait, params: FiniteTimeParams) -> Self {
        Self { model, gait, params, limits: None }
    }

    pub fn with_limits(mut self, limits: Option<TorqueLimits>) -> Self {
        self.limits = limits;
        self
    }
}

impl Controller for IoController {
    fn control(&mut self, state: &RobotState) -> Result<ControlSample> {
        let e = control::evaluate(&self.model, &self.gait, &self.params, state)?;
        let u = match &self.limits {
            Some(l) => control::saturate(&e.u_io, l),
            None => e.u_io,
        };
        Ok(ControlSample { u, v: e.v, y: e.output.y, ydot: e.output.ydot, theta: e.output.theta })
    }
}

impl<C: Controller + ?Sized> Controller for &mut C {
    fn control(&mut self, state: &RobotState) -> Result<ControlSample> {
        (**self).control(state)
    }
}

fn derivative(plant: &RobotParams, s: &RobotState, u: &Vec4) -> Result<RobotState> {
    let (qdd, _) = model::constrained_accel(plant, s, u)?;
    Ok(RobotState { q: s.dq, dq: qdd })
}

fn axpy(s: &RobotState, h: f64, k: &RobotState) -> RobotState {
    RobotState { q: s.q + h * k.q, dq: s.dq + h * k.dq }
}

fn rk4(state: &RobotState, dt: f64, f: &mut dyn FnMut(&RobotState) -> Result<RobotState>) -> Result<RobotState> {
    let k1 = f(state)?;
    let k2 = f(&axpy(state, 0.5 * dt, &k1))?;
    let k3 = f(&axpy(state, 0.5 * dt, &k2))?;
    let k4 = f(&axpy(state, dt, &k3))?;
    let next = RobotState {
        q: state.q + dt / 6.0 * (k1.q + 2.0 * k2.q + 2.0 * k3.q + k4.q),
        dq: state.dq + dt / 6.0 * (k1.dq + 2.0 * k2.dq + 2.0 * k3.dq + k4.dq),
    };
    if !next.is_finite() {
        return Err(Error::Divergence { t: f64::NAN });
    }
    Ok(next)
}

/// One classical RK4 step; `input` supplies the torque at each stage state.
pub fn rk4_with(
    plant: &RobotParams,
    state: &RobotState,
    dt: f64,
    input: &mut dyn FnMut(&RobotState) -> Result<Vec4>,
) -> Result<RobotState> {
    rk4(state, dt, &mut |s| derivative(plant, s, &input(s)?))
}

/// RK4 step of the robot in flight, no contact at all.
pub fn rk4_free(plant: &RobotParams, state: &RobotState, u: &Vec4, dt: f64) -> Result<RobotState> {
    rk4(state, dt, &mut |s| Ok(RobotState { q: s.dq, dq: model::free_accel(plant, s, u)? }))
}

/// RK4 step with the torque held constant.
pub fn rk4_hold(plant: &RobotParams, state: &RobotState, u: &Vec4, dt: f64) -> Result<RobotState> {
    rk4_with(plant, state, dt, &mut |_| Ok(*u))
}

/// One zero-order-hold step of the closed loop.
pub fn integrate(controller: &mut dyn Controller, plant: &RobotParams, state: &RobotState, dt: f64) -> Result<RobotState> {
    let u = controller.control(state)?.u;
    rk4_hold(plant, state, &u, dt)
}

pub fn fall_detect(state: &RobotState, cfg: &SimConfig) -> bool {
    // The frame origin is always the stance foot, so q[IY] is hip height.
    state.q[IY] < cfg.fall.min_hip_height || state.q[IQ5].abs() > cfg.fall.max_torso_angle
}

fn armed(gait: &BezierGait, state: &RobotState, cfg: &SimConfig) -> bool {
    gait.phase_normalize(phasing(&state.q)) > cfg.guard_arm_phase
}

/// Look for a foot strike between two consecutive samples: the swing foot
/// crosses the ground downward, ahead of the stance foot, in the second
/// half of the step. `propagate(tau)`
/// must return the state a fraction `tau` of the way through the step.
/// Returns the crossing fraction and the state there, with
/// `|guard| <= event_tol`.
pub fn detect_impact(
    plant: &RobotParams,
    gait: &BezierGait,
    cfg: &SimConfig,
    before: &RobotState,
    after: &RobotState,
    propagate: &mut dyn FnMut(f64) -> Result<RobotState>,
) -> Result<Option<(f64, RobotState)>> {
    let g0 = model::guard_value(plant, before);
    let g1 = model::guard_value(plant, after);
    if !(g0 > 0.0 && g1 <= 0.0) || !armed(gait, after, cfg) {
        return Ok(None);
    }
    if model::swing_foot_velocity(plant, after).y >= 0.0 {
        return Ok(None);
    }
    let k = model::forward_kinematics(plant, &after.q);
    if k.swing_foot.x <= k.stance_foot.x {
        return Ok(None);
    }
    if g1.abs() <= cfg.event_tol {
        return Ok(Some((1.0, *after)));
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    let mut best = (1.0, *after);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let s = propagate(mid)?;
        let g = model::guard_value(plant, &s);
        best = (mid, s);
        if g.abs() <= cfg.event_tol {
            break;
        }
        if g > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Some(best))
}

/// Outcome of advancing the plant by one control period.
#[derive(Clone, Copy, Debug)]
pub enum Advance {
    Continue(RobotState),
    Impact { fraction: f64, pre: RobotState, post: RobotState, impulse: Vector2<f64> },
}

/// Integrate one control period with torque `u` held, resolving a foot
/// strike inside the period if there is one.
pub fn advance(plant: &RobotParams, gait: &BezierGait, cfg: &SimConfig, state: &RobotState, u: &Vec4) -> Result<Advance> {
    let next = rk4_hold(plant, state, u, cfg.dt)?;
    let hit = detect_impact(plant, gait, cfg, state, &next, &mut |tau| rk4_hold(plant, state, u, tau * cfg.dt))?;
    match hit {
        None => Ok(Advance::Continue(next)),
        Some((fraction, pre)) => {
            let out = model::impact(plant, &pre)?;
            Ok(Advance::Impact { fraction, pre, post: out.state, impulse: out.impulse })
        }
    }
}

fn advance_continuous(
    controller: &mut dyn Controller,
    plant: &RobotParams,
    gait: &BezierGait,
    cfg: &SimConfig,
    state: &RobotState,
) -> Result<Advance> {
    let mut input = |s: &RobotState| controller.control(s).map(|c| c.u);
    let next = rk4_with(plant, state, cfg.dt, &mut input)?;
    let hit = detect_impact(plant, gait, cfg, state, &next, &mut |tau| rk4_with(plant, state, tau * cfg.dt, &mut input))?;
    match hit {
        None => Ok(Advance::Continue(next)),
        Some((fraction, pre)) => {
            let out = model::impact(plant, &pre)?;
            Ok(Advance::Impact { fraction, pre, post: out.state, impulse: out.impulse })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    StepComplete,
    Fell,
    Timeout,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct LogSample {
    pub t: f64,
    pub state: RobotState,
    pub u: Vec4,
    pub lambda: Vector2<f64>,
    pub y: Vec4,
    pub ydot: Vec4,
    pub v: Vec4,
    pub theta: f64,
    pub step_index: usize,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ImpactRecord {
    pub t: f64,
    pub step_index: usize,
    pub pre: RobotState,
    pub post: RobotState,
    pub impulse: Vector2<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct EpisodeLog {
    pub samples: Vec<LogSample>,
    pub impacts: Vec<ImpactRecord>,
    pub status: Status,
    pub steps_completed: usize,
    /// Why the episode ended early, when it did.
    pub failure: Option<String>,
}

impl EpisodeLog {
    fn empty(status: Status) -> Self {
        Self { samples: Vec::new(), impacts: Vec::new(), status, steps_completed: 0, failure: None }
    }

    /// Duration of each completed step.
    pub fn step_durations(&self) -> Vec<f64> {
        let mut prev = 0.0;
        self.impacts
            .iter()
            .map(|i| {
                let d = i.t - prev;
                prev = i.t;
                d
            })
            .collect()
    }

    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut header = vec!["t".to_string()];
        header.extend((0..7).map(|i| format!("q{i}")));
        header.extend((0..7).map(|i| format!("dq{i}")));
        header.extend((1..=4).map(|i| format!("u{i}")));
        header.extend(["lam_x".into(), "lam_y".into()]);
        header.extend((1..=4).map(|i| format!("y{i}")));
        header.extend(["theta".into(), "step_index".into()]);
        writeln!(w, "{}", header.join(","))?;
        for s in &self.samples {
            let mut row: Vec<String> = vec![format!("{:.6}", s.t)];
            row.extend(s.state.q.iter().chain(s.state.dq.iter()).map(|v| format!("{v:.9e}")));
            row.extend(s.u.iter().map(|v| format!("{v:.9e}")));
            row.extend(s.lambda.iter().map(|v| format!("{v:.9e}")));
            row.extend(s.y.iter().map(|v| format!("{v:.9e}")));
            row.push(format!("{:.9e}", s.theta));
            row.push(s.step_index.to_string());
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Simulate from a post-impact state until the next foot strike (which is
/// applied), a fall, or the step time limit.
pub fn simulate_step(
    controller: &mut dyn Controller,
    plant: &RobotParams,
    gait: &BezierGait,
    state0: &RobotState,
    cfg: &SimConfig,
) -> Result<(EpisodeLog, RobotState)> {
    simulate_step_at(controller, plant, gait, state0, cfg, 0.0, 0)
}

fn simulate_step_at(
    controller: &mut dyn Controller,
    plant: &RobotParams,
    gait: &BezierGait,
    state0: &RobotState,
    cfg: &SimConfig,
    t0: f64,
    step_index: usize,
) -> Result<(EpisodeLog, RobotState)> {
    cfg.validate()?;
    state0.validate()?;
    if fall_detect(state0, cfg) {
        let mut log = EpisodeLog::empty(Status::Fell);
        log.failure = Some("initial state already fallen".into());
        return Ok((log, *state0));
    }
    let mut log = EpisodeLog::empty(Status::Timeout);
    let mut state = *state0;
    let mut t = t0;
    let n_max = (cfg.max_step_time / cfg.dt).ceil() as usize;
    for _ in 0..n_max {
        let sample = match controller.control(&state) {
            Ok(s) => s,
            Err(e) => {
                log.status = Status::Fell;
                log.failure = Some(e.to_string());
                return Ok((log, state));
            }
        };
        let lambda = model::constrained_accel(plant, &state, &sample.u).map(|(_, l)| l).unwrap_or_else(|_| Vector2::repeat(f64::NAN));
        log.samples.push(LogSample {
            t,
            state,
            u: sample.u,
            lambda,
            y: sample.y,
            ydot: sample.ydot,
            v: sample.v,
            theta: sample.theta,
            step_index,
        });
        let step = if cfg.stage_continuous {
            advance_continuous(controller, plant, gait, cfg, &state)
        } else {
            advance(plant, gait, cfg, &state, &sample.u)
        };
        let step = match step {
            Ok(a) => a,
            Err(e) => {
                log.status = Status::Fell;
                log.failure = Some(e.to_string());
                return Ok((log, state));
            }
        };
        match step {
            Advance::Continue(next) => {
                t += cfg.dt;
                state = next;
                if fall_detect(&state, cfg) {
                    log.status = Status::Fell;
                    log.failure = Some("hip or torso limit exceeded".into());
                    return Ok((log, state));
                }
            }
            Advance::Impact { fraction, pre, post, impulse } => {
                let t_hit = t + fraction * cfg.dt;
                log.impacts.push(ImpactRecord { t: t_hit, step_index, pre, post, impulse });
                log.status = Status::StepComplete;
                log.steps_completed = 1;
                if fall_detect(&post, cfg) {
                    log.status = Status::Fell;
                    log.failure = Some("fallen after impact".into());
                }
                return Ok((log, post));
            }
        }
    }
    log.failure = Some(format!("no foot strike within {} s", cfg.max_step_time));
    Ok((log, state))
}

/// Chain steps across impacts; stops early on a fall or timeout.
pub fn simulate_walk(
    controller: &mut dyn Controller,
    plant: &RobotParams,
    gait: &BezierGait,
    state0: &RobotState,
    n_steps: usize,
    cfg: &SimConfig,
) -> Result<EpisodeLog> {
    if n_steps == 0 {
        return Err(Error::Domain("n_steps must be at least 1".into()));
    }
    let mut total = EpisodeLog::empty(Status::StepComplete);
    let mut state = *state0;
    let mut t = 0.0;
    for k in 0..n_steps {
        let (log, next) = simulate_step_at(controller, plant, gait, &state, cfg, t, k)?;
        if let Some(last) = log.impacts.last() {
            t = last.t;
        }
        total.samples.extend(log.samples);
        total.impacts.extend(log.impacts);
        total.steps_completed += log.steps_completed;
        total.status = log.status;
        total.failure = log.failure;
        state = next;
        if total.status != Status::StepComplete {
            break;
        }
    }
    Ok(total)
}

/// Measured output acceleration of the plant at a logged sample.
pub fn plant_output_accel(plant: &RobotParams, gait: &BezierGait, state: &RobotState, u: &Vec4) -> Result<Vec4> {
    let out = output_value(gait, state);
    let (qdd, _) = model::constrained_accel(plant, state, u)?;
    Ok(out.jy * qdd + out.curvature)
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Summary {
    pub status: Status,
    pub steps_completed: usize,
    pub mean_y_norm: f64,
    pub max_torque: f64,
}

pub fn summarize(log: &EpisodeLog) -> Summary {
    let n = log.samples.len().max(1) as f64;
    Summary {
        status: log.status,
        steps_completed: log.steps_completed,
        mean_y_norm: log.samples.iter().map(|s| s.y.norm()).sum::<f64>() / n,
        max_torque: log.samples.iter().map(|s| s.u.amax()).fold(0.0, f64::max),
    }
}
