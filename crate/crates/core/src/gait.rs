//! Virtual constraints: the phasing variable, Bezier reference outputs and
//! the output function `y = q_act - h_d(theta(q))`.

use nalgebra::SMatrix;
use serde::{Deserialize, Serialize};

use crate::control::FiniteTimeParams;
use crate::error::{Error, Result};
use crate::model::{self, RobotParams, RobotState, Vec4, Vec7, IQ1, IQ3, IQ5};
use crate::optim::{nelder_mead, NelderMeadOptions};
use crate::sim::{simulate_step, IoController, SimConfig, Status};

pub type Mat4x7 = SMatrix<f64, 4, 7>;

/// Gradient of the phasing variable `theta = q5 + q1 + q3/2`.
pub const PHASE_GRADIENT: [f64; 7] = [0.0, 0.0, 1.0, 0.0, 0.5, 0.0, 1.0];

pub fn phasing(q: &Vec7) -> f64 {
    q[IQ5] + q[IQ1] + 0.5 * q[IQ3]
}

pub fn phasing_rate(dq: &Vec7) -> f64 {
    PHASE_GRADIENT.iter().zip(dq.iter()).map(|(c, v)| c * v).sum()
}

/// Bezier virtual constraints for the four actuated joints, parameterized by
/// the stance leg angle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BezierGait {
    pub degree: usize,
    pub theta_start: f64,
    pub theta_end: f64,
    /// Row `i` holds the `degree + 1` control values of actuated joint `i`.
    pub coefficients: [Vec<f64>; 4],
    #[serde(default)]
    pub label: String,
    #[serde(default)]
    pub max_hip_height: f64,
}

/// Reference values and their first two derivatives with respect to theta.
#[derive(Clone, Copy, Debug)]
pub struct Reference {
    pub hd: Vec4,
    pub dhd: Vec4,
    pub d2hd: Vec4,
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Bernstein-weighted sum of `ctrl` at `s`.
fn bezier(ctrl: &[f64], s: f64) -> f64 {
    let n = ctrl.len() - 1;
    ctrl.iter()
        .enumerate()
        .map(|(k, c)| c * binomial(n, k) * s.powi(k as i32) * (1.0 - s).powi((n - k) as i32))
        .sum()
}

impl BezierGait {
    pub fn new(theta_start: f64, theta_end: f64, coefficients: [Vec<f64>; 4]) -> Result<Self> {
        let gait = Self {
            degree: coefficients[0].len().saturating_sub(1),
            theta_start,
            theta_end,
            coefficients,
            label: String::new(),
            max_hip_height: 0.0,
        };
        gait.validate()?;
        Ok(gait)
    }

    pub fn validate(&self) -> Result<()> {
        if self.degree < 3 {
            return Err(Error::Domain(format!("Bezier degree must be at least 3, got {}", self.degree)));
        }
        if self.coefficients.iter().any(|r| r.len() != self.degree + 1) {
            return Err(Error::Domain("every coefficient row needs degree + 1 entries".into()));
        }
        if self.coefficients.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::Domain("non-finite Bezier coefficient".into()));
        }
        if !(self.theta_end - self.theta_start).is_normal() {
            return Err(Error::Domain("theta_end must differ from theta_start".into()));
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let gait: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        gait.validate()?;
        Ok(gait)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn column(&self, k: usize) -> Vec4 {
        Vec4::from_fn(|i, _| self.coefficients[i][k])
    }

    pub fn set_column(&mut self, k: usize, v: &Vec4) {
        for i in 0..4 {
            self.coefficients[i][k] = v[i];
        }
    }

    pub fn phase_normalize(&self, theta: f64) -> f64 {
        ((theta - self.theta_start) / (self.theta_end - self.theta_start)).clamp(0.0, 1.0)
    }

    /// Reference and derivatives at `theta`. Outside the nominal range the
    /// reference is held at its endpoint and the derivatives vanish.
    pub fn desired_outputs(&self, theta: f64) -> Reference {
        let span = self.theta_end - self.theta_start;
        let raw = (theta - self.theta_start) / span;
        let s = raw.clamp(0.0, 1.0);
        let inside = (0.0..=1.0).contains(&raw);
        let m = self.degree;
        let mut r = Reference { hd: Vec4::zeros(), dhd: Vec4::zeros(), d2hd: Vec4::zeros() };
        for i in 0..4 {
            let c = &self.coefficients[i];
            r.hd[i] = bezier(c, s);
            if inside {
                let d1: Vec<f64> = c.windows(2).map(|w| w[1] - w[0]).collect();
                let d2: Vec<f64> = d1.windows(2).map(|w| w[1] - w[0]).collect();
                r.dhd[i] = m as f64 * bezier(&d1, s) / span;
                r.d2hd[i] = (m * (m - 1)) as f64 * bezier(&d2, s) / (span * span);
            }
        }
        r
    }

    /// Add `offset` to every control value of joint `row`.
    pub fn shifted(&self, row: usize, offset: f64) -> Self {
        let mut g = self.clone();
        g.coefficients[row].iter_mut().for_each(|c| *c += offset);
        g
    }
}

/// Outputs `y`, their rate, the Jacobian `dy/dq` and the curvature term
/// `dq^T (d2y/dq2) dq`, so that `y'' = Jy q'' + curvature`.
#[derive(Clone, Copy, Debug)]
pub struct OutputValue {
    pub y: Vec4,
    pub ydot: Vec4,
    pub jy: Mat4x7,
    pub curvature: Vec4,
    pub theta: f64,
    pub theta_dot: f64,
}

pub fn output_jacobian(gait: &BezierGait, q: &Vec7) -> Mat4x7 {
    let r = gait.desired_outputs(phasing(q));
    let c = SMatrix::<f64, 1, 7>::from_row_slice(&PHASE_GRADIENT);
    let mut jy = Mat4x7::zeros();
    for i in 0..4 {
        jy[(i, IQ1 + i)] = 1.0;
    }
    jy - r.dhd * c
}

pub fn output_value(gait: &BezierGait, state: &RobotState) -> OutputValue {
    let theta = phasing(&state.q);
    let theta_dot = phasing_rate(&state.dq);
    let r = gait.desired_outputs(theta);
    let c = SMatrix::<f64, 1, 7>::from_row_slice(&PHASE_GRADIENT);
    let mut jy = Mat4x7::zeros();
    for i in 0..4 {
        jy[(i, IQ1 + i)] = 1.0;
    }
    jy -= r.dhd * c;
    let q_act = state.q.fixed_rows::<4>(IQ1).into_owned();
    OutputValue {
        y: q_act - r.hd,
        ydot: jy * state.dq,
        jy,
        curvature: -r.d2hd * theta_dot * theta_dot,
        theta,
        theta_dot,
    }
}

/// Post-impact state lying on the zero-dynamics surface at `theta_start`
/// with phase rate `theta_dot`, stance foot at the origin.
pub fn state_on_orbit(params: &RobotParams, gait: &BezierGait, theta: f64, theta_dot: f64) -> RobotState {
    let r = gait.desired_outputs(theta);
    let q5 = theta - r.hd[0] - 0.5 * r.hd[2];
    let rates = r.dhd * theta_dot;
    let dq5 = theta_dot - rates[0] - 0.5 * rates[2];
    RobotState::with_stance_foot_at_origin(
        params,
        [r.hd[0], r.hd[1], r.hd[2], r.hd[3], q5],
        [rates[0], rates[1], rates[2], rates[3], dq5],
    )
}

/// Pre-impact configuration implied by the last control column.
pub fn end_configuration(params: &RobotParams, gait: &BezierGait) -> RobotState {
    state_on_orbit(params, gait, gait.theta_end, 0.0)
}

/// Impose the impact-consistency conditions on the boundary columns:
/// the first column is the relabeled last column, `theta_start` is the
/// relabeled phase, and the second column makes the post-impact velocity
/// tangent to the zero-dynamics surface.
pub fn make_impact_consistent(params: &RobotParams, gait: &mut BezierGait) -> Result<()> {
    let m = gait.degree;
    let last = gait.column(m);
    let first = Vec4::new(last[1], last[0], last[3], last[2]);
    gait.set_column(0, &first);
    let q5 = gait.theta_end - last[0] - 0.5 * last[2];
    gait.theta_start = q5 + last[1] + 0.5 * last[3];
    // Unit phase rate before impact; the condition is homogeneous in it.
    let mut pre = state_on_orbit(params, gait, gait.theta_end, 1.0);
    // Put the swing foot exactly on the ground so the strike is well posed
    // even when the end column is only approximately a double-support pose.
    pre.q[model::IY] -= model::guard_value(params, &pre);
    let post = model::impact(params, &pre)
        .map_err(|e| Error::SynthesisInfeasible(format!("end configuration is not a foot strike: {e}")))?
        .state;
    let theta_dot_post = phasing_rate(&post.dq);
    if theta_dot_post <= 0.0 {
        return Err(Error::SynthesisInfeasible("impact reverses the phase rate".into()));
    }
    let slope = post.dq.fixed_rows::<4>(IQ1) / theta_dot_post;
    let span = gait.theta_end - gait.theta_start;
    let second = first + slope * span / m as f64;
    gait.set_column(1, &second);
    Ok(())
}

/// Highest hip point along the nominal path, sampled in theta.
pub fn max_hip_height(params: &RobotParams, gait: &BezierGait) -> f64 {
    (0..=100)
        .map(|k| {
            let th = gait.theta_start + (gait.theta_end - gait.theta_start) * k as f64 / 100.0;
            state_on_orbit(params, gait, th, 0.0).q[model::IY]
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Swing-foot height along the nominal path.
pub fn swing_clearance(params: &RobotParams, gait: &BezierGait, samples: usize) -> Vec<(f64, f64)> {
    (0..=samples)
        .map(|k| {
            let s = k as f64 / samples as f64;
            let th = gait.theta_start + (gait.theta_end - gait.theta_start) * s;
            let st = state_on_orbit(params, gait, th, 0.0);
            (s, model::guard_value(params, &st))
        })
        .collect()
}

/// Restricted step-to-step dynamics on the zero-dynamics surface, obtained
/// from the angular momentum `sigma` about the stance foot. Along the orbit
/// `sigma = I(theta) theta_dot` and `d(sigma^2/2)/dtheta = -m g x_com I(theta)`,
/// so one step maps `sigma_minus^2` to `delta^2 sigma_minus^2 + gain`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ZeroDynamics {
    /// Ratio of post- to pre-impact angular momentum.
    pub delta: f64,
    /// Energy-like gain `2 * integral` accumulated over one step.
    pub gain: f64,
    /// Pre-impact `sigma^2` at the periodic orbit, if one exists.
    pub sigma_minus_sq: Option<f64>,
    /// Phase rate right after impact on the periodic orbit.
    pub theta_dot_start: Option<f64>,
    pub theta_dot_end: Option<f64>,
    /// Smallest `sigma^2` along the orbit relative to its pre-impact value.
    pub min_sigma_ratio: Option<f64>,
    /// Eigenvalue of the restricted return map (`delta^2`).
    pub eigenvalue: f64,
}

pub fn zero_dynamics(params: &RobotParams, gait: &BezierGait, samples: usize) -> Result<ZeroDynamics> {
    let origin = nalgebra::Vector2::zeros();
    let g = params.gravity * params.total_mass();
    let n = samples.max(8);
    let span = gait.theta_end - gait.theta_start;
    let mut inertia = Vec::with_capacity(n + 1);
    let mut integrand = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let th = gait.theta_start + span * k as f64 / n as f64;
        let st = state_on_orbit(params, gait, th, 1.0);
        let i_th = model::angular_momentum(params, &st, &origin);
        let x_com = model::forward_kinematics(params, &st.q).com.x;
        inertia.push(i_th);
        integrand.push(-g * x_com * i_th);
    }
    let h = span / n as f64;
    let mut cumulative = vec![0.0; n + 1];
    for k in 1..=n {
        cumulative[k] = cumulative[k - 1] + 0.5 * h * (integrand[k - 1] + integrand[k]);
    }
    let gain = 2.0 * cumulative[n];

    let mut pre = state_on_orbit(params, gait, gait.theta_end, 1.0);
    pre.q[model::IY] -= model::guard_value(params, &pre);
    let post = model::impact(params, &pre)?.state;
    let sigma_minus = inertia[n];
    let delta = model::angular_momentum(params, &post, &origin) / sigma_minus;
    let d2 = delta * delta;

    let mut zd = ZeroDynamics {
        delta,
        gain,
        sigma_minus_sq: None,
        theta_dot_start: None,
        theta_dot_end: None,
        min_sigma_ratio: None,
        eigenvalue: d2,
    };
    if gain > 0.0 && d2 < 1.0 {
        let s2 = gain / (1.0 - d2);
        let min_cum = cumulative.iter().copied().fold(f64::INFINITY, f64::min);
        zd.sigma_minus_sq = Some(s2);
        zd.min_sigma_ratio = Some((d2 * s2 + 2.0 * min_cum) / s2);
        let sm = s2.sqrt() * sigma_minus.signum();
        zd.theta_dot_end = Some(sm / inertia[n]);
        zd.theta_dot_start = Some(delta * sm / inertia[0]);
    }
    Ok(zd)
}

/// Built-in degree-5 walking gait for the default parameters, about
/// 0.43 m/s with a 0.65 s step.
pub fn rabbit_seed(params: &RobotParams) -> BezierGait {
    let coefficients = [
        vec![-0.3408610079412598, -0.3347984074731531, -0.1649584421517269, -0.08740509435390975, -0.031647930074709923, 0.014328201933382856],
        vec![0.014328201933382856, 0.04229193042755555, -0.16763948869701334, -0.47230007138788466, -0.3776806905427347, -0.3408610079412598],
        vec![0.21136743936554236, 0.3632156934069132, 0.14614615404765474, 0.2539378814461297, 0.12074863559053191, 0.21136743936554236],
        vec![0.21136743936554236, 0.31537374669380935, 0.9534833809922209, 1.249501080222232, 0.49744194371194295, 0.21136743936554236],
    ];
    let mut gait = BezierGait {
        degree: 5,
        theta_start: -0.17759460493732132,
        theta_end: 0.17759460493732132,
        coefficients,
        label: "rabbit-seed".into(),
        max_hip_height: 0.0,
    };
    gait.max_hip_height = max_hip_height(params, &gait);
    gait
}

/// Variant of `gait` with the stance knee bent further by `knee_offset`
/// through the interior of the step, which lowers the hip. The stance
/// femur is moved by half as much in the opposite direction so the torso
/// keeps its phase relation. Boundary columns are recomputed.
pub fn hip_height_variant(params: &RobotParams, gait: &BezierGait, knee_offset: f64) -> Result<BezierGait> {
    let mut g = gait.clone();
    for k in 2..g.degree {
        g.coefficients[2][k] += knee_offset;
        g.coefficients[0][k] -= 0.5 * knee_offset;
    }
    make_impact_consistent(params, &mut g)?;
    g.max_hip_height = max_hip_height(params, &g);
    g.label = format!("{} knee{:+.3}", gait.label, knee_offset);
    Ok(g)
}

#[derive(Clone, Copy, Debug)]
pub struct GaitSearchOptions {
    /// Bound on the one-step periodicity residual.
    pub tolerance: f64,
    pub max_evals: usize,
    pub control: FiniteTimeParams,
    pub sim: SimConfig,
}

impl Default for GaitSearchOptions {
    fn default() -> Self {
        Self { tolerance: 1e-6, max_evals: 400, control: FiniteTimeParams::default(), sim: SimConfig::default() }
    }
}

#[derive(Clone, Debug)]
pub struct PeriodicGait {
    pub gait: BezierGait,
    /// Post-impact state of the periodic orbit.
    pub initial_state: RobotState,
    pub residual: f64,
    pub evaluations: usize,
}

/// One closed-loop step of the nominal IO controller from the orbit state
/// with phase rate `theta_dot`.
fn one_step(params: &RobotParams, gait: &BezierGait, theta_dot: f64, opts: &GaitSearchOptions) -> Option<(RobotState, RobotState)> {
    let x0 = state_on_orbit(params, gait, gait.theta_start, theta_dot);
    let mut ctrl = IoController::new(*params, gait.clone(), opts.control);
    let (log, x1) = simulate_step(&mut ctrl, params, gait, &x0, &opts.sim).ok()?;
    (log.status == Status::StepComplete).then_some((x0, x1))
}

fn periodicity_residual(x0: &RobotState, x1: &RobotState) -> f64 {
    (x1.to_vector() - x0.to_vector()).norm()
}

/// Closed-loop periodic orbit of the nominal IO controller on `gait`.
/// The phase rate on the zero-dynamics surface is solved first by secant
/// iteration, which lands within the small discretization offset of the
/// orbit; the remaining error is removed by iterating the step map.
pub fn periodic_state(params: &RobotParams, gait: &BezierGait, opts: &GaitSearchOptions) -> Result<(RobotState, f64, usize)> {
    let guess = zero_dynamics(params, gait, 200)?
        .theta_dot_start
        .ok_or_else(|| Error::SynthesisInfeasible("zero dynamics admit no periodic orbit".into()))?;
    let mut evals = 0;
    let mut map = |td: f64| {
        evals += 1;
        one_step(params, gait, td, opts).map(|(x0, x1)| (phasing_rate(&x1.dq) - td, x0, x1))
    };
    let (f0, x0, x1) = map(guess).ok_or_else(|| Error::SynthesisInfeasible("seed gait does not complete a step".into()))?;
    let mut best = (periodicity_residual(&x0, &x1), x0);
    let (mut t_prev, mut f_prev) = (guess, f0);
    let mut t = guess * (1.0 + 1e-3);
    for _ in 0..20 {
        let Some((f, x0, x1)) = map(t) else { break };
        let res = periodicity_residual(&x0, &x1);
        if res < best.0 {
            best = (res, x0);
        }
        if f == f_prev || (t - t_prev).abs() < 1e-10 {
            break;
        }
        let next = t - f * (t - t_prev) / (f - f_prev);
        (t_prev, f_prev) = (t, f);
        t = next;
    }
    let mut ctrl = IoController::new(*params, gait.clone(), opts.control);
    let mut x = best.1;
    let mut residual = best.0;
    for _ in 0..opts.max_evals {
        if residual < opts.tolerance {
            break;
        }
        evals += 1;
        let (log, next) = simulate_step(&mut ctrl, params, gait, &x, &opts.sim)?;
        if log.status != Status::StepComplete {
            break;
        }
        residual = periodicity_residual(&x, &next);
        x = next;
    }
    Ok((x, residual, evals))
}

/// Periodic gait search by single shooting. The seed is first made impact
/// consistent; if the phase-rate solve alone leaves a residual above
/// tolerance the interior coefficients are searched as well.
pub fn find_periodic_gait(params: &RobotParams, seed: &BezierGait, opts: &GaitSearchOptions) -> Result<PeriodicGait> {
    seed.validate()?;
    let mut gait = seed.clone();
    make_impact_consistent(params, &mut gait)?;
    let moved = (0..4).any(|i| {
        gait.coefficients[i].iter().zip(&seed.coefficients[i]).any(|(a, b)| (a - b).abs() > 1e-12)
    }) || (gait.theta_start - seed.theta_start).abs() > 1e-12;
    if !moved {
        gait = seed.clone();
    }
    let (x0, residual, mut evaluations) = periodic_state(params, &gait, opts)?;
    if residual < opts.tolerance {
        gait.max_hip_height = max_hip_height(params, &gait);
        return Ok(PeriodicGait { gait, initial_state: x0, residual, evaluations });
    }

    let m = gait.degree;
    let interior: Vec<(usize, usize)> = (0..4).flat_map(|i| (2..m).map(move |k| (i, k))).collect();
    let base = gait.clone();
    let build = |z: &[f64]| -> Option<BezierGait> {
        let mut g = base.clone();
        for (&(i, k), v) in interior.iter().zip(z) {
            g.coefficients[i][k] = *v;
        }
        make_impact_consistent(params, &mut g).ok()?;
        Some(g)
    };
    let td0 = phasing_rate(&x0.dq);
    let mut z0: Vec<f64> = interior.iter().map(|&(i, k)| gait.coefficients[i][k]).collect();
    z0.push(td0);
    let n = z0.len();
    let mut cost = |z: &[f64]| -> f64 {
        evaluations += 1;
        match build(&z[..n - 1]).and_then(|g| one_step(params, &g, z[n - 1], opts)) {
            Some((a, b)) => periodicity_residual(&a, &b),
            None => 1e3,
        }
    };
    // The on-surface residual cannot reach the closed-loop tolerance because
    // of the sampled control, so it only shapes the gait; the orbit itself
    // comes from `periodic_state` afterwards.
    let nm = NelderMeadOptions { max_evals: opts.max_evals, initial_step: 0.02, ..Default::default() };
    let best = nelder_mead(&mut cost, &z0, &nm);
    let mut gait = build(&best.x[..n - 1]).ok_or(Error::NonConvergence { residual })?;
    let (initial_state, residual, more) = periodic_state(params, &gait, opts)?;
    evaluations += more;
    if !(residual < opts.tolerance) {
        return Err(Error::NonConvergence { residual });
    }
    gait.max_hip_height = max_hip_height(params, &gait);
    Ok(PeriodicGait { gait, initial_state, residual, evaluations })
}
