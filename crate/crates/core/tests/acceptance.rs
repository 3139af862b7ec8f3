//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! The learning criteria train real policies, so this takes tens of minutes
//! on one core. Set `HZDLAB_ACCEPTANCE_ONLY=1,4,11` to run a subset.

use std::io::Write;
use std::time::Instant;

use hzdlab_core::analysis::{stability_report, AnalysisReport, FixedPointOptions};
use hzdlab_core::control::{double_integrator_settle, FiniteTimeParams, TorqueLimits};
use hzdlab_core::gait::{hip_height_variant, periodic_state, rabbit_seed, BezierGait, GaitSearchOptions};
use hzdlab_core::learn::*;
use hzdlab_core::model::*;
use hzdlab_core::sim::*;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [1, 2, 3];
const STEPS: usize = 10;

/// Written straight to stdout so the lines survive the test harness capture.
fn say(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

struct Verdict {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn verdict(id: usize, name: &'static str, pass: bool, detail: String) -> Verdict {
    say(&format!("criterion {id:>2} {name:<34} {}  {detail}", if pass { "PASS" } else { "FAIL" }));
    Verdict { id, name, pass, detail }
}

struct Nominal {
    p: RobotParams,
    g: BezierGait,
    x: RobotState,
}

fn nominal() -> Nominal {
    let p = RobotParams::default();
    let g = rabbit_seed(&p);
    let (x, _, _) = periodic_state(&p, &g, &GaitSearchOptions::default()).expect("nominal orbit");
    Nominal { p, g, x }
}

fn io(n: &Nominal, limits: Option<TorqueLimits>) -> IoController {
    IoController::new(n.p, n.g.clone(), FiniteTimeParams::default()).with_limits(limits)
}

fn sat(limit: f64) -> Option<TorqueLimits> {
    Some(TorqueLimits::symmetric(limit).unwrap())
}

fn max_abs_u(samples: &[LogSample]) -> f64 {
    samples.iter().map(|s| s.u.amax()).fold(0.0, f64::max)
}

fn c1_dynamics(n: &Nominal) -> Verdict {
    let p = &n.p;
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut sym, mut min_eig, mut skew, mut resid) = (0.0f64, f64::INFINITY, 0.0f64, 0.0f64);
    for _ in 0..500 {
        let q = Vec7::from_fn(|i, _| match i {
            0 => rng.random_range(-1.0..1.0),
            1 => rng.random_range(0.5..1.0),
            4 | 5 => rng.random_range(0.0..1.2),
            _ => rng.random_range(-1.0..1.0),
        });
        let s = RobotState { q, dq: Vec7::from_fn(|_, _| rng.random_range(-3.0..3.0)) };
        let d = mass_matrix(p, &s.q);
        sym = sym.max((d - d.transpose()).amax());
        min_eig = min_eig.min(d.symmetric_eigenvalues().min());
        let h = 1e-6;
        let d_dot = (mass_matrix(p, &(s.q + h * s.dq)) - mass_matrix(p, &(s.q - h * s.dq))) / (2.0 * h);
        let t = dynamics_terms(p, &s).unwrap();
        let nmat = d_dot - 2.0 * t.c;
        skew = skew.max((nmat + nmat.transpose()).amax());
        let u = Vec4::from_fn(|_, _| rng.random_range(-100.0..100.0));
        let (qdd, _) = constrained_accel(p, &s, &u).unwrap();
        resid = resid.max((t.j * qdd + t.jdot * s.dq).norm());
    }

    let e0 = total_energy(p, &n.x);
    let mut s = n.x;
    for _ in 0..10_000 {
        s = rk4_free(p, &s, &Vec4::zeros(), 1e-4).unwrap();
    }
    let drift = (total_energy(p, &s) - e0).abs() / e0.abs();

    let log = simulate_walk(&mut io(n, None), p, &n.g, &n.x, STEPS, &SimConfig::default()).unwrap();
    let mut ke_gain = f64::NEG_INFINITY;
    let mut foot_v = 0.0f64;
    for hit in &log.impacts {
        ke_gain = ke_gain.max(kinetic_energy(p, &hit.post) - kinetic_energy(p, &hit.pre));
        foot_v = foot_v.max((stance_foot_jacobian(p, &hit.post.q) * hit.post.dq).norm());
    }
    let pass = sym <= 1e-12
        && min_eig > 0.0
        && skew <= 1e-5
        && drift <= 1e-6
        && resid <= 1e-9
        && !log.impacts.is_empty()
        && ke_gain <= 0.0
        && foot_v <= 1e-8;
    verdict(
        1,
        "dynamics correctness",
        pass,
        format!(
            "sym {sym:.1e}, min eig {min_eig:.2e}, skew {skew:.1e}, drift {drift:.1e}, constraint {resid:.1e}, \
             KE change {ke_gain:.2e} J, stance foot speed {foot_v:.1e} over {} impacts",
            log.impacts.len()
        ),
    )
}

fn c2_cancellation(n: &Nominal) -> Verdict {
    let (log, _) = simulate_step(&mut io(n, None), &n.p, &n.g, &n.x, &SimConfig::default()).unwrap();
    let worst = log
        .samples
        .iter()
        .map(|s| (plant_output_accel(&n.p, &n.g, &s.state, &s.u).unwrap() - s.v).norm())
        .fold(0.0, f64::max);
    let pass = log.status == Status::StepComplete && worst <= 1e-4;
    verdict(2, "exact cancellation", pass, format!("max |y'' - v| = {worst:.2e} over {} samples", log.samples.len()))
}

fn c3_finite_time() -> Verdict {
    let times: Vec<Option<f64>> = [0.05, 0.1, 0.2]
        .iter()
        .map(|&e| double_integrator_settle(1.0, 0.0, &FiniteTimeParams::new(0.9, e).unwrap(), 1e-4, 5.0, 1e-6))
        .collect();
    let pass = times.iter().all(Option::is_some) && times.windows(2).all(|w| w[0] < w[1]);
    verdict(3, "finite-time law", pass, format!("settle times for eps 0.05/0.1/0.2: {times:.3?} s"))
}

fn c4_nominal(n: &Nominal) -> Verdict {
    let log = simulate_walk(&mut io(n, None), &n.p, &n.g, &n.x, STEPS, &SimConfig::default()).unwrap();
    let max_y = log.samples.iter().map(|s| s.y.norm()).fold(0.0, f64::max);
    let pass = log.status == Status::StepComplete && log.steps_completed == STEPS && max_y < 0.05;
    verdict(4, "nominal walking", pass, format!("{} steps, max |y| = {max_y:.2e}", log.steps_completed))
}

fn c5_mismatch(n: &Nominal) -> Verdict {
    let mut detail = Vec::new();
    let mut pass = true;
    for scale in [1.5, 3.0] {
        let plant = scale_params(&n.p, scale).unwrap();
        let log = simulate_walk(&mut io(n, None), &plant, &n.g, &n.x, STEPS, &SimConfig::default()).unwrap();
        pass &= log.status != Status::StepComplete && log.steps_completed < STEPS;
        detail.push(format!("scale {scale}: {:?} after {} steps", log.status, log.steps_completed));
    }
    verdict(5, "mismatch failure", pass, detail.join(", "))
}

struct Experiment {
    scale: f64,
    limit: f64,
    action: ActionScale,
}

impl Experiment {
    fn setup(&self, n: &Nominal, limits: Option<TorqueLimits>) -> TrainSetup {
        TrainSetup {
            plant: scale_params(&n.p, self.scale).unwrap(),
            model: n.p,
            gait: n.g.clone(),
            control: FiniteTimeParams::default(),
            limits,
            sim: SimConfig::default(),
            x_star: n.x,
        }
    }

    fn config(&self) -> DdpgConfig {
        DdpgConfig { action_scale: self.action, ..DdpgConfig::default() }
    }
}

/// A trained policy and how it fared in each evaluation setting.
struct Trained {
    label: String,
    actor: Mlp,
    action: ActionScale,
    experiment_scale: f64,
    /// (limits, steps walked, max |u|)
    evals: Vec<(Option<TorqueLimits>, usize, f64)>,
}

impl Trained {
    fn success(&self) -> bool {
        self.evals.iter().all(|e| e.1 >= STEPS)
    }
}

/// Train with saturation in the loop, then evaluate the greedy policy in
/// every requested setting.
fn train_seeds(n: &Nominal, exp: &Experiment, eval_limits: &[Option<TorqueLimits>]) -> Vec<Trained> {
    let train_setup = exp.setup(n, sat(exp.limit));
    let cfg = exp.config();
    SEEDS
        .iter()
        .map(|&seed| {
            let t0 = Instant::now();
            let out = train(&train_setup, &cfg, seed).expect("training runs");
            let evals = eval_limits
                .iter()
                .map(|&lim| {
                    let log = evaluate_policy(&exp.setup(n, lim), &out.actor, &exp.action, STEPS).unwrap();
                    (lim, log.steps_completed, max_abs_u(&log.samples))
                })
                .collect::<Vec<_>>();
            let label = format!("scale {} seed {seed}", exp.scale);
            say(&format!(
                "  {label}: {} episodes, {:.0} s, {}",
                out.curve.len(),
                t0.elapsed().as_secs_f64(),
                evals
                    .iter()
                    .map(|(l, s, u)| format!("{} -> {s} steps, max |u| {u:.1}", describe(l)))
                    .collect::<Vec<_>>()
                    .join("; ")
            ));
            Trained { label, actor: out.actor, action: exp.action, experiment_scale: exp.scale, evals }
        })
        .collect()
}

fn describe(l: &Option<TorqueLimits>) -> String {
    match l {
        Some(l) => format!("sat {:.0}", l.u_max[0]),
        None => "no sat".into(),
    }
}

fn majority(id: usize, name: &'static str, runs: &[Trained]) -> Verdict {
    let ok = runs.iter().filter(|t| t.success()).count();
    verdict(id, name, ok >= 2, format!("{ok}/{} seeds walk {STEPS} steps with and without saturation", runs.len()))
}

fn c8_saturation_only(n: &Nominal, runs: &[Trained]) -> Verdict {
    let log = simulate_walk(&mut io(n, sat(45.0)), &n.p, &n.g, &n.x, STEPS, &SimConfig::default()).unwrap();
    let original_fails = log.steps_completed <= 1 && log.status != Status::StepComplete;
    let ok = runs.iter().filter(|t| t.success()).count();
    verdict(
        8,
        "saturation-only experiment",
        ok >= 2 && original_fails,
        format!(
            "{ok}/{} seeds walk {STEPS} steps at +-45; original controller: {:?} after {} steps",
            runs.len(),
            log.status,
            log.steps_completed
        ),
    )
}

fn c9_stability(n: &Nominal, policies: &[&Trained]) -> Verdict {
    let opts = FixedPointOptions::default();
    let mut pass = !policies.is_empty();
    let mut detail = Vec::new();
    for t in policies {
        for (lim, _, _) in &t.evals {
            let plant = scale_params(&n.p, t.experiment_scale).unwrap();
            let mut c = RlController::new(n.p, n.g.clone(), FiniteTimeParams::default(), t.actor.clone(), t.action).with_limits(*lim);
            let r: Result<(_, AnalysisReport), _> = stability_report(&mut c, &plant, &n.g, &n.x, 1e-5, &SimConfig::default(), &opts);
            match r {
                Ok((_, rep)) => {
                    pass &= rep.dominant < 1.0 && rep.refinement_ratio < 0.01;
                    detail.push(format!("{} {}: {:.3} ({:.2}%)", t.label, describe(lim), rep.dominant, 100.0 * rep.refinement_ratio));
                }
                Err(e) => {
                    pass = false;
                    detail.push(format!("{} {}: {e}", t.label, describe(lim)));
                }
            }
        }
    }
    verdict(9, "stability certificate", pass, detail.join(", "))
}

fn c10_generalization(n: &Nominal, policy: Option<&Trained>, exp: &Experiment) -> Verdict {
    let Some(t) = policy else {
        return verdict(10, "untrained-gait generalization", false, "no successful scale-3 policy".into());
    };
    let mut walked = Vec::new();
    for offset in [0.02, 0.15] {
        let g = hip_height_variant(&n.p, &n.g, offset).unwrap();
        let steps = match periodic_state(&n.p, &g, &GaitSearchOptions::default()) {
            Ok((x, _, _)) => {
                let setup = TrainSetup { gait: g.clone(), x_star: x, ..exp.setup(n, sat(exp.limit)) };
                evaluate_policy(&setup, &t.actor, &t.action, STEPS).unwrap().steps_completed
            }
            Err(_) => 0,
        };
        walked.push((offset, g.max_hip_height, steps));
    }
    let pass = walked[0].2 >= STEPS && walked[1].2 < STEPS;
    verdict(
        10,
        "untrained-gait generalization",
        pass,
        format!(
            "{} at +-{:.0}: near (knee {:+}, hip {:.4} m) {} steps, far (knee {:+}, hip {:.4} m) {} steps",
            t.label, exp.limit, walked[0].0, walked[0].1, walked[0].2, walked[1].0, walked[1].1, walked[1].2
        ),
    )
}

fn fd_gradient_error(net: &Mlp, x: &Array2<f64>, w: &Array2<f64>) -> f64 {
    let objective = |n: &Mlp, x: &Array2<f64>| (n.forward(x.view()) * w).sum();
    let (grads, d_in) = net.backward(&net.forward_trace(x.view()), w);
    let rel = |fd: f64, an: f64| (fd - an).abs() / (fd.abs() + an.abs() + 1e-9);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for (l, layer) in net.layers.iter().enumerate() {
        for idx in [(0, 0), (layer.weights.nrows() - 1, layer.weights.ncols() - 1), (layer.weights.nrows() / 2, layer.weights.ncols() / 2)] {
            let (mut p, mut m) = (net.clone(), net.clone());
            p.layers[l].weights[idx] += h;
            m.layers[l].weights[idx] -= h;
            worst = worst.max(rel((objective(&p, x) - objective(&m, x)) / (2.0 * h), grads.weights[l][idx]));
        }
        for j in [0, layer.bias.len() - 1] {
            let (mut p, mut m) = (net.clone(), net.clone());
            p.layers[l].bias[j] += h;
            m.layers[l].bias[j] -= h;
            worst = worst.max(rel((objective(&p, x) - objective(&m, x)) / (2.0 * h), grads.bias[l][j]));
        }
    }
    for idx in [(0, 0), (x.nrows() - 1, x.ncols() - 1)] {
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp[idx] += h;
        xm[idx] -= h;
        worst = worst.max(rel((objective(net, &xp) - objective(net, &xm)) / (2.0 * h), d_in[idx]));
    }
    worst
}

fn c11_infrastructure(n: &Nominal) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut grad_err = 0.0f64;
    for (hidden, out, sizes) in [
        (Activation::Tanh, Activation::Tanh, [OBS_DIM, 16, 12, ACTION_DIM]),
        (Activation::Relu, Activation::Identity, [OBS_DIM + ACTION_DIM, 16, 12, 1]),
    ] {
        let net = Mlp::new(&sizes, hidden, out, 0.5, &mut rng);
        let x = Array2::from_shape_fn((5, sizes[0]), |_| rng.random_range(-1.0..1.0));
        let w = Array2::from_shape_fn((5, sizes[3]), |_| rng.random_range(-1.0..1.0));
        grad_err = grad_err.max(fd_gradient_error(&net, &x, &w));
    }

    let exp = Experiment { scale: 1.5, limit: 105.0, action: ActionScale { alpha: 2.0, beta: 60.0 } };
    let setup = exp.setup(n, sat(exp.limit));
    let cfg = DdpgConfig { episodes: 3, warmup: 300, batch_size: 32, update_every: 10, eval_every: 1, ..exp.config() };
    let a = train(&setup, &cfg, 7).unwrap();
    let b = train(&setup, &cfg, 7).unwrap();
    let reproducible = a.updates > 0
        && a.actor == b.actor
        && serde_json::to_string(&a.curve).unwrap() == serde_json::to_string(&b.curve).unwrap();

    let td_cfg = DdpgConfig { gamma: 0.0, lr_critic: 1e-4, lr_actor: 0.0, ..DdpgConfig::default() };
    let mut agent = Agent::new(&td_cfg, &mut rng);
    let data: Vec<Transition> = (0..64)
        .map(|_| {
            let x: [f64; OBS_DIM] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let action: [f64; ACTION_DIM] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let reward = x[1] - 0.3 * action[7] + 0.5 * x[2] * action[2];
            Transition { x, action, reward, x_next: x, done: false }
        })
        .collect();
    let batch: Vec<&Transition> = data.iter().collect();
    let td: Vec<f64> = (0..100).map(|_| ddpg_update(&mut agent, &batch, &td_cfg).0).collect();
    let monotone = td.windows(2).all(|w| w[1] < w[0]);

    verdict(
        11,
        "learning infrastructure",
        grad_err <= 1e-4 && reproducible && monotone,
        format!(
            "worst gradient rel. error {grad_err:.1e}, bit-reproducible {reproducible}, TD {:.3e} -> {:.3e} monotone {monotone}",
            td[0], td[99]
        ),
    )
}

fn c12_torque_parity(n: &Nominal, runs: &[Trained]) -> Verdict {
    let plant = scale_params(&n.p, 1.5).unwrap();
    let log = simulate_walk(&mut io(n, None), &plant, &n.g, &n.x, STEPS, &SimConfig::default()).unwrap();
    // Samples up to the last completed impact.
    let t_end = log.impacts.last().map_or(0.0, |i| i.t);
    let surviving: Vec<LogSample> = log.samples.iter().filter(|s| s.t < t_end).copied().collect();
    let reference = max_abs_u(&surviving);
    let bound = 1.25 * reference;
    let mut pass = !surviving.is_empty() && runs.iter().any(Trained::success);
    let mut detail = vec![format!("original {reference:.1} N m over {} steps, bound {bound:.1}", log.steps_completed)];
    for t in runs.iter().filter(|t| t.success()) {
        for (lim, _, u) in &t.evals {
            pass &= *u <= bound;
            detail.push(format!("{} {}: {u:.1}", t.label, describe(lim)));
        }
    }
    verdict(12, "torque magnitude parity", pass, detail.join(", "))
}

fn selected() -> Option<Vec<usize>> {
    std::env::var("HZDLAB_ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect())
}

#[test]
fn acceptance() {
    let only = selected();
    let want = |id: usize| only.as_ref().is_none_or(|v| v.contains(&id));
    let n = nominal();
    let mut verdicts = Vec::new();

    if want(1) {
        verdicts.push(c1_dynamics(&n));
    }
    if want(2) {
        verdicts.push(c2_cancellation(&n));
    }
    if want(3) {
        verdicts.push(c3_finite_time());
    }
    if want(4) {
        verdicts.push(c4_nominal(&n));
    }
    if want(5) {
        verdicts.push(c5_mismatch(&n));
    }

    let e15 = Experiment { scale: 1.5, limit: 105.0, action: ActionScale { alpha: 2.0, beta: 60.0 } };
    let e3 = Experiment { scale: 3.0, limit: 155.0, action: ActionScale { alpha: 4.0, beta: 120.0 } };
    let e1 = Experiment { scale: 1.0, limit: 45.0, action: ActionScale { alpha: 1.0, beta: 45.0 } };
    let needs = |ids: &[usize]| ids.iter().any(|&i| want(i));

    let runs15 = if needs(&[6, 9, 12]) { train_seeds(&n, &e15, &[sat(105.0), None]) } else { Vec::new() };
    if want(6) {
        verdicts.push(majority(6, "learning at scale 1.5", &runs15));
    }
    let runs3 = if needs(&[7, 9, 10]) { train_seeds(&n, &e3, &[sat(155.0), None]) } else { Vec::new() };
    if want(7) {
        verdicts.push(majority(7, "learning at scale 3", &runs3));
    }
    let runs1 = if needs(&[8, 9]) { train_seeds(&n, &e1, &[sat(45.0)]) } else { Vec::new() };
    if want(8) {
        verdicts.push(c8_saturation_only(&n, &runs1));
    }
    if want(9) {
        let ok: Vec<&Trained> = runs15.iter().chain(&runs3).chain(&runs1).filter(|t| t.success()).collect();
        verdicts.push(c9_stability(&n, &ok));
    }
    if want(10) {
        verdicts.push(c10_generalization(&n, runs3.iter().find(|t| t.success()), &e3));
    }
    if want(11) {
        verdicts.push(c11_infrastructure(&n));
    }
    if want(12) {
        verdicts.push(c12_torque_parity(&n, &runs15));
    }

    let failed: Vec<String> = verdicts.iter().filter(|v| !v.pass).map(|v| format!("{} ({})", v.id, v.name)).collect();
    say(&format!("acceptance: {}/{} criteria pass", verdicts.len() - failed.len(), verdicts.len()));
    for v in verdicts.iter().filter(|v| !v.pass) {
        say(&format!("  failed {}: {}", v.id, v.detail));
    }
    // Verdicts are the report. Set HZDLAB_ACCEPTANCE_STRICT=1 to turn any FAIL into a test failure.
    if std::env::var("HZDLAB_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        assert!(failed.is_empty(), "failed criteria: {}", failed.join(", "));
    }
}
