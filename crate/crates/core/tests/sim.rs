use hzdlab_core::control::{FiniteTimeParams, TorqueLimits};
use hzdlab_core::gait::{periodic_state, rabbit_seed, BezierGait, GaitSearchOptions};
use hzdlab_core::model::{guard_value, scale_params, total_energy, RobotParams, RobotState, Vec4};
use hzdlab_core::sim::*;

fn setup() -> (RobotParams, BezierGait, RobotState) {
    let p = RobotParams::default();
    let g = rabbit_seed(&p);
    let (x, _, _) = periodic_state(&p, &g, &GaitSearchOptions::default()).unwrap();
    (p, g, x)
}

fn io(p: &RobotParams, g: &BezierGait) -> IoController {
    IoController::new(*p, g.clone(), FiniteTimeParams::default())
}

#[test]
fn free_flight_conserves_energy() {
    let (p, _, x) = setup();
    let e0 = total_energy(&p, &x);
    let mut s = x;
    let dt = 1e-4;
    for _ in 0..10_000 {
        s = rk4_free(&p, &s, &Vec4::zeros(), dt).unwrap();
    }
    let drift = (total_energy(&p, &s) - e0).abs() / e0.abs();
    assert!(drift <= 1e-6, "relative drift {drift:.3e}");
}

#[test]
fn rk4_is_fourth_order() {
    let (p, _, x) = setup();
    let u = Vec4::new(20.0, -10.0, 5.0, 3.0);
    let run = |dt: f64, n: usize| (0..n).fold(x, |s, _| rk4_hold(&p, &s, &u, dt).unwrap());
    let reference = run(0.1 / 64.0, 64);
    let e1 = (run(0.1 / 4.0, 4).to_vector() - reference.to_vector()).norm();
    let e2 = (run(0.1 / 8.0, 8).to_vector() - reference.to_vector()).norm();
    let ratio = e1 / e2;
    assert!((10.0..24.0).contains(&ratio), "error ratio {ratio}");
}

#[test]
fn weightless_robot_at_rest_does_not_move() {
    let (p, _, x) = setup();
    let p0 = RobotParams { gravity: 0.0, ..p };
    let still = RobotState { dq: Default::default(), ..x };
    assert_eq!(rk4_hold(&p0, &still, &Vec4::zeros(), 1e-3).unwrap(), still);
}

#[test]
fn guard_event_is_refined() {
    let (p, g, x) = setup();
    let cfg = SimConfig::default();
    let mut c = io(&p, &g);
    let (log, _) = simulate_step(&mut c, &p, &g, &x, &cfg).unwrap();
    let hit = &log.impacts[0];
    assert!(guard_value(&p, &hit.pre).abs() <= cfg.event_tol);

    // Oracle: march the last control period with ten fixed substeps.
    let last = log.samples.last().unwrap();
    let dt_fine = cfg.dt / 10.0;
    let k = (1..=10)
        .find(|&k| guard_value(&p, &rk4_hold(&p, &last.state, &last.u, k as f64 * dt_fine).unwrap()) <= 0.0)
        .expect("crossing inside the period");
    let t_event = hit.t - last.t;
    assert!((t_event - k as f64 * dt_fine).abs() <= 2.0 * dt_fine, "{t_event} vs step {k}");
}

#[test]
fn no_event_when_guard_stays_positive() {
    let (p, g, x) = setup();
    let next = rk4_hold(&p, &x, &Vec4::zeros(), 1e-3).unwrap();
    let r = detect_impact(&p, &g, &SimConfig::default(), &x, &next, &mut |_| unreachable!()).unwrap();
    assert!(r.is_none());
}

#[test]
fn fallen_start_returns_immediately() {
    let (p, g, x) = setup();
    let cfg = SimConfig::default();
    let mut low = x;
    low.q[1] = 0.1;
    assert!(fall_detect(&low, &cfg));
    assert!(!fall_detect(&x, &cfg));
    let (log, _) = simulate_step(&mut io(&p, &g), &p, &g, &low, &cfg).unwrap();
    assert_eq!(log.status, Status::Fell);
    assert!(log.samples.is_empty());
}

#[test]
fn one_step_walk_equals_simulate_step() {
    let (p, g, x) = setup();
    let cfg = SimConfig::default();
    let (a, xa) = simulate_step(&mut io(&p, &g), &p, &g, &x, &cfg).unwrap();
    let b = simulate_walk(&mut io(&p, &g), &p, &g, &x, 1, &cfg).unwrap();
    assert_eq!(a.samples.len(), b.samples.len());
    assert_eq!(a.impacts[0].post, xa);
    assert_eq!(b.impacts[0].post, xa);
    assert!(simulate_walk(&mut io(&p, &g), &p, &g, &x, 0, &cfg).is_err());
}

#[test]
fn nominal_walk_never_falls_and_has_regular_steps() {
    let (p, g, x) = setup();
    let cfg = SimConfig::default();
    let log = simulate_walk(&mut io(&p, &g), &p, &g, &x, 10, &cfg).unwrap();
    assert_eq!(log.steps_completed, 10);
    assert!(log.samples.iter().all(|s| !fall_detect(&s.state, &cfg)));
    let d = log.step_durations();
    let last = *d.last().unwrap();
    assert!(d[5..].iter().all(|t| (t - last).abs() / last < 0.01), "{d:?}");
}

#[test]
fn mismatched_plant_falls_under_the_original_controller() {
    let (p, g, x) = setup();
    for scale in [1.5, 3.0] {
        let plant = scale_params(&p, scale).unwrap();
        let log = simulate_walk(&mut io(&p, &g), &plant, &g, &x, 10, &SimConfig::default()).unwrap();
        assert_eq!(log.status, Status::Fell, "scale {scale}");
        assert!(log.steps_completed < 10);
    }
}

#[test]
fn logged_torques_respect_limits() {
    let (p, g, x) = setup();
    let lim = TorqueLimits::symmetric(45.0).unwrap();
    let mut c = io(&p, &g).with_limits(Some(lim));
    let log = simulate_walk(&mut c, &p, &g, &x, 3, &SimConfig::default()).unwrap();
    assert!(log.samples.iter().all(|s| lim.contains(&s.u)));
}

#[test]
fn log_csv_has_one_row_per_sample() {
    let (p, g, x) = setup();
    let (log, _) = simulate_step(&mut io(&p, &g), &p, &g, &x, &SimConfig::default()).unwrap();
    let mut buf = Vec::new();
    log.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), log.samples.len() + 1);
    assert!(text.starts_with("t,q0,"));
}
