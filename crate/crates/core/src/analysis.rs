//! Step-to-step return map on the post-impact section, its fixed point and
//! finite-difference linearization, plus tracking metrics for logs.

use nalgebra::SMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gait::BezierGait;
use crate::model::{RobotParams, RobotState};
use crate::sim::{simulate_step, Controller, EpisodeLog, SimConfig, Status};

pub type Jacobian = SMatrix<f64, 14, 14>;

#[derive(Clone, Debug)]
pub struct PoincareResult {
    pub fixed_point: RobotState,
    pub jacobian: Option<Jacobian>,
    /// Sorted descending; empty until the Jacobian has been computed.
    pub eigenvalue_magnitudes: Vec<f64>,
    pub converged: bool,
    pub residual: f64,
    pub iterations: usize,
}

impl PoincareResult {
    pub fn dominant(&self) -> Option<f64> {
        self.eigenvalue_magnitudes.first().copied()
    }

    pub fn stable(&self) -> bool {
        self.dominant().is_some_and(|d| d < 1.0)
    }
}

/// Post-impact state after exactly one completed step.
pub fn poincare_map(
    controller: &mut dyn Controller,
    plant: &RobotParams,
    gait: &BezierGait,
    x: &RobotState,
    cfg: &SimConfig,
) -> Result<RobotState> {
    let (log, next) = simulate_step(controller, plant, gait, x, cfg)?;
    match log.status {
        Status::StepComplete => Ok(next),
        s => Err(Error::SectionEscape(format!("{s:?}: {}", log.failure.unwrap_or_default()))),
    }
}

fn distance(a: &RobotState, b: &RobotState) -> f64 {
    (a.to_vector() - b.to_vector()).norm()
}

#[derive(Clone, Copy, Debug)]
pub struct FixedPointOptions {
    pub tolerance: f64,
    pub max_iter: usize,
    /// Weight of the new iterate in x <- x + damping (P(x) - x).
    pub damping: f64,
    /// Largest residual at which linearization still proceeds. The guard
    /// bisection and fixed-step integration floor the residual near 1e-8.
    pub accept_residual: f64,
    /// Give up after this many iterations without a new best residual.
    pub patience: usize,
    /// Newton steps with the finite-difference Jacobian when iteration
    /// stalls above `accept_residual`. These can land on unstable orbits.
    pub newton_steps: usize,
    pub newton_perturbation: f64,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        Self { tolerance: 1e-8, max_iter: 200, damping: 1.0, accept_residual: 1e-6, patience: 10, newton_steps: 8, newton_perturbation: 1e-6 }
    }
}

/// Damped fixed-point iteration of the return map, then Newton if that
/// stalls. Never errors on slow convergence: the best iterate comes back
/// with `converged = false`. A fall from the guess itself is an error.
pub fn find_fixed_point(
    controller: &mut dyn Controller,
    plant: &RobotParams,
    gait: &BezierGait,
    x_guess: &RobotState,
    cfg: &SimConfig,
    opts: &FixedPointOptions,
) -> Result<PoincareResult> {
    let mut x = *x_guess;
    let mut px = poincare_map(controller, plant, gait, &x, cfg)?;
    let mut best = (x, distance(&px, &x));
    let mut iterations = 0;
    let mut since_best = 0;
    while best.1 >= opts.tolerance && iterations < opts.max_iter && since_best < opts.patience {
        iterations += 1;
        let next = RobotState::from_vector(&(x.to_vector() + opts.damping * (px.to_vector() - x.to_vector())));
        let p_next = match poincare_map(controller, plant, gait, &next, cfg) {
            Ok(p) => p,
            Err(_) => break,
        };
        x = next;
        px = p_next;
        let r = distance(&px, &x);
        if !r.is_finite() {
            break;
        }
        if r < best.1 {
            best = (x, r);
            since_best = 0;
        } else {
            since_best += 1;
        }
    }
    if best.1 >= opts.accept_residual {
        for _ in 0..opts.newton_steps {
            iterations += 1;
            match newton_step(controller, plant, gait, &best.0, best.1, cfg, opts.newton_perturbation) {
                Some(better) => best = better,
                None => break,
            }
            if best.1 < opts.tolerance {
                break;
            }
        }
    }
    Ok(PoincareResult {
        fixed_point: best.0,
        jacobian: None,
        eigenvalue_magnitudes: Vec::new(),
        converged: best.1 < opts.tolerance,
        residual: best.1,
        iterations,
    })
}

/// Solve `(J - I) dx = x - P(x)` by pseudo-inverse and backtrack until the
/// residual drops. Neutral directions make `J - I` nearly singular.
fn newton_step(
    controller: &mut dyn Controller,
    plant: &RobotParams,
    gait: &BezierGait,
    x: &RobotState,
    residual: f64,
    cfg: &SimConfig,
    perturbation: f64,
) -> Option<(RobotState, f64)> {
    let jac = poincare_jacobian(controller, plant, gait, x, perturbation, cfg).ok()?;
    let x0 = x.to_vector();
    let f = poincare_map(controller, plant, gait, x, cfg).ok()?.to_vector() - x0;
    let a = jac - Jacobian::identity();
    let dx = a.svd(true, true).solve(&(-f), 1e-10 * a.norm()).ok()?;
    let mut step = 1.0;
    for _ in 0..8 {
        let trial = RobotState::from_vector(&(x0 + step * dx));
        if let Ok(p) = poincare_map(controller, plant, gait, &trial, cfg) {
            let r = distance(&p, &trial);
            if r < residual {
                return Some((trial, r));
            }
        }
        step *= 0.5;
    }
    None
}

/// Central-difference Jacobian of the return map on all 14 post-impact
/// coordinates. The step on coordinate i is `perturbation * max(1, |x_i|)`.
pub fn poincare_jacobian(
    controller: &mut dyn Controller,
    plant: &RobotParams,
    gait: &BezierGait,
    x_star: &RobotState,
    perturbation: f64,
    cfg: &SimConfig,
) -> Result<Jacobian> {
    if !(perturbation > 0.0) {
        return Err(Error::Domain("perturbation must be positive".into()));
    }
    let x0 = x_star.to_vector();
    let mut jac = Jacobian::zeros();
    for i in 0..14 {
        let h = perturbation * x0[i].abs().max(1.0);
        let mut side = |sign: f64| -> Result<_> {
            let mut x = x0;
            x[i] += sign * h;
            poincare_map(controller, plant, gait, &RobotState::from_vector(&x), cfg)
                .map(|p| p.to_vector())
                .map_err(|e| Error::SectionEscape(format!("column {i}: {e}")))
        };
        let plus = side(1.0)?;
        let minus = side(-1.0)?;
        jac.set_column(i, &((plus - minus) / (2.0 * h)));
    }
    Ok(jac)
}

pub fn eigenvalue_magnitudes(jac: &Jacobian) -> Vec<f64> {
    let mut mags: Vec<f64> = jac.complex_eigenvalues().iter().map(|z| z.norm()).collect();
    mags.sort_by(|a, b| b.total_cmp(a));
    mags
}

/// Linearize at `x_star` and attach the sorted eigenvalue magnitudes.
pub fn poincare_eigenvalues(
    controller: &mut dyn Controller,
    plant: &RobotParams,
    gait: &BezierGait,
    x_star: &RobotState,
    perturbation: f64,
    cfg: &SimConfig,
) -> Result<PoincareResult> {
    let residual = distance(&poincare_map(controller, plant, gait, x_star, cfg)?, x_star);
    let jac = poincare_jacobian(controller, plant, gait, x_star, perturbation, cfg)?;
    Ok(PoincareResult {
        fixed_point: *x_star,
        eigenvalue_magnitudes: eigenvalue_magnitudes(&jac),
        jacobian: Some(jac),
        converged: true,
        residual,
        iterations: 0,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AnalysisReport {
    pub residual: f64,
    pub eigenvalue_magnitudes: Vec<f64>,
    pub dominant: f64,
    pub stable: bool,
    pub perturbation: f64,
    /// |dominant(h) - dominant(h/2)| / dominant(h).
    pub refinement_ratio: f64,
    pub converged: bool,
    /// Magnitudes within 0.05 of one. Not removed: without eliminating
    /// section coordinates these can belong to neutral directions.
    pub near_unity: Vec<f64>,
}

impl AnalysisReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Fixed point, eigenvalues at `perturbation` and at half of it.
pub fn stability_report(
    controller: &mut dyn Controller,
    plant: &RobotParams,
    gait: &BezierGait,
    x_guess: &RobotState,
    perturbation: f64,
    cfg: &SimConfig,
    opts: &FixedPointOptions,
) -> Result<(PoincareResult, AnalysisReport)> {
    let fp = find_fixed_point(controller, plant, gait, x_guess, cfg, opts)?;
    if !(fp.residual < opts.accept_residual) {
        return Err(Error::NonConvergence { residual: fp.residual });
    }
    let mut full = poincare_eigenvalues(controller, plant, gait, &fp.fixed_point, perturbation, cfg)?;
    let half = poincare_eigenvalues(controller, plant, gait, &fp.fixed_point, perturbation / 2.0, cfg)?;
    let dominant = full.dominant().unwrap_or(f64::NAN);
    let refined = half.dominant().unwrap_or(f64::NAN);
    full.iterations = fp.iterations;
    let report = AnalysisReport {
        residual: full.residual,
        eigenvalue_magnitudes: full.eigenvalue_magnitudes.clone(),
        dominant,
        stable: full.stable(),
        perturbation,
        refinement_ratio: (dominant - refined).abs() / dominant,
        converged: fp.converged,
        near_unity: full.eigenvalue_magnitudes.iter().copied().filter(|m| (m - 1.0).abs() < 0.05).collect(),
    };
    Ok((full, report))
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TrackingMetrics {
    pub y_norm_series: Vec<f64>,
    pub mean_y_norm: f64,
    pub max_y_norm: f64,
    pub max_torque: f64,
    pub steps_completed: usize,
}

pub fn tracking_metrics(log: &EpisodeLog) -> Result<TrackingMetrics> {
    if log.samples.is_empty() {
        return Err(Error::Domain("empty log".into()));
    }
    let y_norm_series: Vec<f64> = log.samples.iter().map(|s| s.y.norm()).collect();
    Ok(TrackingMetrics {
        mean_y_norm: y_norm_series.iter().sum::<f64>() / y_norm_series.len() as f64,
        max_y_norm: y_norm_series.iter().copied().fold(0.0, f64::max),
        max_torque: log.samples.iter().map(|s| s.u.amax()).fold(0.0, f64::max),
        steps_completed: log.steps_completed,
        y_norm_series,
    })
}
