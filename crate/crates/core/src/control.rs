//! Input-output linearizing control on the model dynamics, the finite-time
//! convergence law and the learned correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gait::{output_value, BezierGait, OutputValue};
use crate::model::{ContactDynamics, Mat4, RobotParams, RobotState, Vec4};

/// Default bound on the decoupling-matrix condition number.
pub const MAX_DECOUPLING_COND: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiniteTimeParams {
    pub a: f64,
    pub epsilon: f64,
}

impl Default for FiniteTimeParams {
    fn default() -> Self {
        Self { a: 0.9, epsilon: 0.1 }
    }
}

impl FiniteTimeParams {
    pub fn new(a: f64, epsilon: f64) -> Result<Self> {
        let p = Self { a, epsilon };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0 && self.a < 1.0) {
            return Err(Error::Domain(format!("a must lie in (0, 1), got {}", self.a)));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Domain(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TorqueLimits {
    pub u_min: Vec4,
    pub u_max: Vec4,
}

impl TorqueLimits {
    pub fn symmetric(limit: f64) -> Result<Self> {
        Self::new(Vec4::repeat(-limit), Vec4::repeat(limit))
    }

    pub fn new(u_min: Vec4, u_max: Vec4) -> Result<Self> {
        if u_min.iter().zip(u_max.iter()).any(|(lo, hi)| !(lo < hi)) {
            return Err(Error::Domain("torque limits need u_min < u_max".into()));
        }
        Ok(Self { u_min, u_max })
    }

    pub fn contains(&self, u: &Vec4) -> bool {
        (0..4).all(|i| u[i] >= self.u_min[i] && u[i] <= self.u_max[i])
    }
}

pub fn saturate(u: &Vec4, limits: &TorqueLimits) -> Vec4 {
    Vec4::from_fn(|i, _| u[i].clamp(limits.u_min[i], limits.u_max[i]))
}

/// Additive learned term `alpha v + beta`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct LearnedTerm {
    pub alpha: Mat4,
    pub beta: Vec4,
}

#[derive(Clone, Copy, Debug)]
pub struct LinearizingTerms {
    pub lf2y: Vec4,
    pub lglfy: Mat4,
}

fn signed_pow(x: f64, p: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x.signum() * x.abs().powf(p)
    }
}

/// `psi_a(y, z)` with `z = epsilon * ydot`.
pub fn psi(y: f64, z: f64, a: f64) -> f64 {
    let phi = y + signed_pow(z, 2.0 - a) / (2.0 - a);
    -signed_pow(z, a) - signed_pow(phi, a / (2.0 - a))
}

pub fn phi(y: f64, z: f64, a: f64) -> f64 {
    y + signed_pow(z, 2.0 - a) / (2.0 - a)
}

/// Finite-time stabilizing virtual input, componentwise.
pub fn finite_time_v(y: &Vec4, ydot: &Vec4, p: &FiniteTimeParams) -> Vec4 {
    let e2 = p.epsilon * p.epsilon;
    Vec4::from_fn(|i, _| psi(y[i], p.epsilon * ydot[i], p.a) / e2)
}

/// Integrate the scalar double integrator `y'' = v(y, y')` under the
/// finite-time law with RK4 and return the first time after which `|y|`
/// stays below `tol` until `t_max`.
pub fn double_integrator_settle(y0: f64, ydot0: f64, p: &FiniteTimeParams, dt: f64, t_max: f64, tol: f64) -> Option<f64> {
    let e2 = p.epsilon * p.epsilon;
    let f = |y: f64, z: f64| (z, psi(y, p.epsilon * z, p.a) / e2);
    let (mut y, mut z) = (y0, ydot0);
    let mut settled: Option<f64> = None;
    let n = (t_max / dt).ceil() as usize;
    for k in 0..n {
        let (a1, b1) = f(y, z);
        let (a2, b2) = f(y + 0.5 * dt * a1, z + 0.5 * dt * b1);
        let (a3, b3) = f(y + 0.5 * dt * a2, z + 0.5 * dt * b2);
        let (a4, b4) = f(y + dt * a3, z + dt * b3);
        y += dt / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4);
        z += dt / 6.0 * (b1 + 2.0 * b2 + 2.0 * b3 + b4);
        if y.abs() < tol {
            settled.get_or_insert((k + 1) as f64 * dt);
        } else {
            settled = None;
        }
    }
    settled
}

/// Everything the controller computes at one state, kept for logging and
/// for the learning loop.
#[derive(Clone, Copy, Debug)]
pub struct ControlEval {
    pub output: OutputValue,
    pub terms: LinearizingTerms,
    pub lglfy_inv: Mat4,
    pub v: Vec4,
    /// Unsaturated linearizing torque `LgLf^-1 (-Lf2 + v)`.
    pub u_io: Vec4,
}

/// Second-order Lie derivatives of the outputs along the constrained model
/// dynamics. Accelerations are affine in torque, so the drift and the
/// torque-to-acceleration map come out of one factorization.
pub fn lie_derivatives(model: &RobotParams, gait: &BezierGait, state: &RobotState) -> Result<LinearizingTerms> {
    let out = output_value(gait, state);
    let (terms, _) = lie_terms_with(model, &out, state)?;
    Ok(terms)
}

fn lie_terms_with(model: &RobotParams, out: &OutputValue, state: &RobotState) -> Result<(LinearizingTerms, Mat4)> {
    let cd = ContactDynamics::new(model, state)?;
    let (qdd0, _) = cd.accel(&Vec4::zeros());
    let lf2y = out.jy * qdd0 + out.curvature;
    let lglfy = out.jy * cd.accel_per_torque();
    let inv = lglfy.try_inverse().ok_or(Error::RelativeDegree { cond: f64::INFINITY })?;
    let cond = lglfy.abs().row_sum().max() * inv.abs().row_sum().max();
    if !(cond < MAX_DECOUPLING_COND) {
        return Err(Error::RelativeDegree { cond });
    }
    Ok((LinearizingTerms { lf2y, lglfy }, inv))
}

pub fn evaluate(model: &RobotParams, gait: &BezierGait, p: &FiniteTimeParams, state: &RobotState) -> Result<ControlEval> {
    let output = output_value(gait, state);
    let (terms, lglfy_inv) = lie_terms_with(model, &output, state)?;
    let v = finite_time_v(&output.y, &output.ydot, p);
    let u_io = lglfy_inv * (v - terms.lf2y);
    Ok(ControlEval { output, terms, lglfy_inv, v, u_io })
}

/// The original input-output linearizing law `u = LgLf^-1 (-Lf2 y + v)`.
pub fn io_controller(model: &RobotParams, gait: &BezierGait, p: &FiniteTimeParams, state: &RobotState) -> Result<Vec4> {
    evaluate(model, gait, p, state).map(|e| e.u_io)
}

/// Linearizing torque plus the learned term, before saturation.
pub fn rl_torque(eval: &ControlEval, term: &LearnedTerm) -> Vec4 {
    eval.u_io + term.alpha * eval.v + term.beta
}

pub fn rl_controller(
    model: &RobotParams,
    gait: &BezierGait,
    p: &FiniteTimeParams,
    state: &RobotState,
    term: &LearnedTerm,
    limits: &TorqueLimits,
) -> Result<Vec4> {
    let eval = evaluate(model, gait, p, state)?;
    Ok(saturate(&rl_torque(&eval, term), limits))
}
