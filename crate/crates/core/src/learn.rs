//! Learned correction of the linearizing controller: small dense networks
//! with hand-written backpropagation, Adam, a replay buffer and DDPG.

use std::collections::VecDeque;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::control::{self, ControlEval, FiniteTimeParams, LearnedTerm, TorqueLimits};
use crate::error::{Error, Result};
use crate::gait::{output_value, BezierGait};
use crate::model::{Mat4, RobotParams, RobotState, Vec4};
use crate::sim::{self, Advance, ControlSample, Controller, SimConfig};

pub const OBS_DIM: usize = 14;
pub const ACTION_DIM: usize = 20;
pub const HIDDEN: [usize; 2] = [400, 300];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: &mut Array2<f64>) {
        match self {
            Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
            Activation::Tanh => z.mapv_inplace(f64::tanh),
            Activation::Identity => {}
        }
    }

    /// Derivative expressed through the activation output.
    fn grad_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `inputs x outputs`, so a batch forward pass is `x.dot(w) + b`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Per-layer gradients, same shapes as the parameters.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub bias: Vec<Array1<f64>>,
}

/// Layer outputs kept from a forward pass, input first.
pub struct Trace {
    pub activations: Vec<Array2<f64>>,
}

impl Trace {
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("trace holds at least the input")
    }
}

impl Mlp {
    /// Hidden layers use `hidden`, the last layer `output`. Weights are
    /// uniform in `+-1/sqrt(fan_in)`; the last layer is uniform in
    /// `+-final_range` (zero gives an exactly zero initial output).
    pub fn new(sizes: &[usize], hidden: Activation, output: Activation, final_range: f64, rng: &mut impl Rng) -> Self {
        assert!(sizes.len() >= 2, "a network needs input and output sizes");
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
                let last = l + 1 == n;
                let r = if last { final_range } else { 1.0 / (fan_in as f64).sqrt() };
                let mut draw = || if r > 0.0 { rng.random_range(-r..r) } else { 0.0 };
                Layer {
                    weights: Array2::from_shape_fn((fan_in, fan_out), |_| draw()),
                    bias: Array1::from_shape_fn(fan_out, |_| draw()),
                    activation: if last { output } else { hidden },
                }
            })
            .collect();
        Self { layers }
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].weights.nrows()];
        s.extend(self.layers.iter().map(|l| l.weights.ncols()));
        s
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut a = x.to_owned();
        for l in &self.layers {
            let mut z = a.dot(&l.weights) + &l.bias;
            l.activation.apply(&mut z);
            a = z;
        }
        a
    }

    pub fn forward_trace(&self, x: ArrayView2<f64>) -> Trace {
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.to_owned());
        for l in &self.layers {
            let mut z = activations.last().unwrap().dot(&l.weights) + &l.bias;
            l.activation.apply(&mut z);
            activations.push(z);
        }
        Trace { activations }
    }

    /// Backpropagate `d_out = dL/d(output)`; returns parameter gradients and
    /// `dL/d(input)`.
    pub fn backward(&self, trace: &Trace, d_out: &Array2<f64>) -> (Gradients, Array2<f64>) {
        let n = self.layers.len();
        let mut gw = Vec::with_capacity(n);
        let mut gb = Vec::with_capacity(n);
        let mut delta = d_out.clone();
        for l in (0..n).rev() {
            let layer = &self.layers[l];
            let out = &trace.activations[l + 1];
            let act = layer.activation;
            if act != Activation::Identity {
                ndarray::Zip::from(&mut delta).and(out).for_each(|d, &a| *d *= act.grad_from_output(a));
            }
            gw.push(trace.activations[l].t().dot(&delta));
            gb.push(delta.sum_axis(Axis(0)));
            delta = delta.dot(&layer.weights.t());
        }
        gw.reverse();
        gb.reverse();
        (Gradients { weights: gw, bias: gb }, delta)
    }

    /// `self <- tau * other + (1 - tau) * self`.
    pub fn blend_from(&mut self, other: &Mlp, tau: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.zip_mut_with(&b.weights, |x, &y| *x = tau * y + (1.0 - tau) * *x);
            a.bias.zip_mut_with(&b.bias, |x, &y| *x = tau * y + (1.0 - tau) * *x);
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Gradients,
    v: Gradients,
}

impl Gradients {
    fn zeros_like(net: &Mlp) -> Self {
        Self {
            weights: net.layers.iter().map(|l| Array2::zeros(l.weights.raw_dim())).collect(),
            bias: net.layers.iter().map(|l| Array1::zeros(l.bias.raw_dim())).collect(),
        }
    }
}

impl Adam {
    pub fn new(net: &Mlp, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Gradients::zeros_like(net), v: Gradients::zeros_like(net) }
    }

    /// One descent step on `grads`.
    pub fn step(&mut self, net: &mut Mlp, grads: &Gradients) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let (lr, eps) = (self.lr, self.eps);
        let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        };
        for (l, layer) in net.layers.iter_mut().enumerate() {
            ndarray::Zip::from(&mut layer.weights)
                .and(&mut self.m.weights[l])
                .and(&mut self.v.weights[l])
                .and(&grads.weights[l])
                .for_each(|p, m, v, &g| update(p, m, v, g));
            ndarray::Zip::from(&mut layer.bias)
                .and(&mut self.m.bias[l])
                .and(&mut self.v.bias[l])
                .and(&grads.bias[l])
                .for_each(|p, m, v, &g| update(p, m, v, g));
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub x: [f64; OBS_DIM],
    pub action: [f64; ACTION_DIM],
    pub reward: f64,
    pub x_next: [f64; OBS_DIM],
    pub done: bool,
}

/// Fixed-capacity FIFO store with uniform sampling.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    data: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self { capacity, data: VecDeque::with_capacity(capacity.min(1 << 16)) }
    }

    pub fn push(&mut self, t: Transition) {
        if self.data.len() == self.capacity {
            self.data.pop_front();
        }
        self.data.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.data.get(i)
    }

    /// `n` transitions drawn uniformly with replacement.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Vec<&Transition> {
        if self.data.is_empty() {
            return Vec::new();
        }
        (0..n).map(|_| &self.data[rng.random_range(0..self.data.len())]).collect()
    }
}

/// Bounds of the unpacked actor output: every entry of alpha lies in
/// `+-alpha` and every entry of beta in `+-beta` N m.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionScale {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for ActionScale {
    fn default() -> Self {
        Self { alpha: 2.0, beta: 60.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DdpgConfig {
    pub gamma: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub tau: f64,
    pub buffer_capacity: usize,
    pub batch_size: usize,
    /// Std of the Gaussian exploration noise on the normalized action.
    pub sigma: f64,
    pub episodes: usize,
    /// Walking steps per episode.
    pub steps_per_episode: usize,
    pub r_bonus: f64,
    pub r_penalty: f64,
    pub action_scale: ActionScale,
    /// Std of the perturbation of the fixed point's angles and rates.
    pub init_state_noise: f64,
    /// Weight on the linearization loss in the reward.
    pub loss_weight: f64,
    /// Upper bound on the weighted loss of a single transition.
    pub loss_clip: Option<f64>,
    /// Control steps between gradient updates.
    pub update_every: usize,
    /// Transitions collected before the first update.
    pub warmup: usize,
    /// Episodes between greedy evaluation walks.
    pub eval_every: usize,
    pub eval_steps: usize,
    /// Extra greedy steps walked after `eval_steps` to check that the gait
    /// settles onto a periodic orbit. Zero disables the check.
    pub settle_steps: usize,
    /// Largest change between the last two post-impact states of a settled
    /// evaluation walk.
    pub settle_tol: f64,
    /// Stop as soon as an evaluation walk succeeds.
    pub stop_on_success: bool,
}

impl Default for DdpgConfig {
    fn default() -> Self {
        Self {
            gamma: 0.9,
            lr_actor: 1e-5,
            lr_critic: 1e-3,
            tau: 5e-3,
            buffer_capacity: 1_000_000,
            batch_size: 128,
            sigma: 0.1,
            episodes: 80,
            steps_per_episode: 10,
            r_bonus: 0.1,
            r_penalty: -10.0,
            action_scale: ActionScale::default(),
            init_state_noise: 0.01,
            loss_weight: 1e-3,
            loss_clip: Some(10.0),
            update_every: 5,
            warmup: 1000,
            eval_every: 5,
            eval_steps: 10,
            settle_steps: 40,
            settle_tol: 1e-3,
            stop_on_success: true,
        }
    }
}

impl DdpgConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("ddpg.gamma must lie in (0, 1]");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("ddpg.tau must lie in (0, 1]");
        }
        if !(self.sigma >= 0.0) || !(self.init_state_noise >= 0.0) {
            return bad("noise levels must be nonnegative");
        }
        if self.buffer_capacity == 0 || self.batch_size == 0 || self.update_every == 0 || self.eval_every == 0 {
            return bad("capacities and intervals must be positive");
        }
        if self.steps_per_episode == 0 || self.eval_steps == 0 {
            return bad("step counts must be positive");
        }
        if !(self.settle_tol > 0.0) {
            return bad("ddpg.settle_tol must be positive");
        }
        if !(self.lr_actor >= 0.0 && self.lr_critic >= 0.0) {
            return bad("learning rates must be nonnegative");
        }
        if !(self.action_scale.alpha >= 0.0 && self.action_scale.beta >= 0.0) {
            return bad("action scales must be nonnegative");
        }
        Ok(())
    }
}

pub fn new_actor(rng: &mut impl Rng) -> Mlp {
    Mlp::new(&[OBS_DIM, HIDDEN[0], HIDDEN[1], ACTION_DIM], Activation::Relu, Activation::Tanh, 0.0, rng)
}

pub fn new_critic(rng: &mut impl Rng) -> Mlp {
    Mlp::new(&[OBS_DIM + ACTION_DIM, HIDDEN[0], HIDDEN[1], 1], Activation::Relu, Activation::Identity, 3e-3, rng)
}

pub fn observation(state: &RobotState) -> [f64; OBS_DIM] {
    let v = state.to_vector();
    std::array::from_fn(|i| v[i])
}

/// Scale a normalized action in `[-1, 1]^20` into the learned term; the
/// first 16 entries fill alpha row-major, the last 4 beta.
pub fn unpack_action(a: &[f64], scale: &ActionScale) -> LearnedTerm {
    LearnedTerm {
        alpha: Mat4::from_fn(|i, j| scale.alpha * a[4 * i + j]),
        beta: Vec4::from_fn(|i, _| scale.beta * a[16 + i]),
    }
}

pub fn actor_action(net: &Mlp, x: &[f64; OBS_DIM]) -> [f64; ACTION_DIM] {
    let out = net.forward(ArrayView2::from_shape((1, OBS_DIM), x).expect("observation shape"));
    std::array::from_fn(|i| out[(0, i)])
}

pub fn actor_forward(net: &Mlp, x: &[f64; OBS_DIM], scale: &ActionScale) -> LearnedTerm {
    unpack_action(&actor_action(net, x), scale)
}

/// Central second difference of three consecutive output samples.
pub fn measure_yddot(y_prev: &Vec4, y_now: &Vec4, y_next: &Vec4, dt: f64) -> Vec4 {
    (y_next - 2.0 * y_now + y_prev) / (dt * dt)
}

/// Per-step reward: negative linearization loss plus the survival term.
pub fn reward(v: &Vec4, yddot: &Vec4, fell: bool, cfg: &DdpgConfig) -> f64 {
    let re = if fell { cfg.r_penalty } else { cfg.r_bonus };
    let mut loss = cfg.loss_weight * (v - yddot).norm_squared();
    if let Some(c) = cfg.loss_clip {
        loss = loss.min(c);
    }
    -loss + re
}

#[derive(Clone, Debug)]
pub struct Agent {
    pub actor: Mlp,
    pub critic: Mlp,
    pub actor_target: Mlp,
    pub critic_target: Mlp,
    pub actor_opt: Adam,
    pub critic_opt: Adam,
}

impl Agent {
    pub fn new(cfg: &DdpgConfig, rng: &mut impl Rng) -> Self {
        let actor = new_actor(rng);
        let critic = new_critic(rng);
        Self::from_networks(actor, critic, cfg)
    }

    pub fn from_networks(actor: Mlp, critic: Mlp, cfg: &DdpgConfig) -> Self {
        Self {
            actor_opt: Adam::new(&actor, cfg.lr_actor),
            critic_opt: Adam::new(&critic, cfg.lr_critic),
            actor_target: actor.clone(),
            critic_target: critic.clone(),
            actor,
            critic,
        }
    }
}

fn stack<const N: usize>(rows: impl Iterator<Item = [f64; N]>, n: usize) -> Array2<f64> {
    let mut a = Array2::zeros((n, N));
    for (i, r) in rows.enumerate() {
        a.row_mut(i).assign(&ndarray::ArrayView1::from(&r));
    }
    a
}

/// One DDPG update on `batch`. Returns the critic's mean squared TD error
/// (before the step) and the mean Q of the actor's actions.
pub fn ddpg_update(agent: &mut Agent, batch: &[&Transition], cfg: &DdpgConfig) -> (f64, f64) {
    assert!(!batch.is_empty(), "ddpg_update needs a nonempty batch");
    let n = batch.len();
    let x = stack(batch.iter().map(|t| t.x), n);
    let a = stack(batch.iter().map(|t| t.action), n);
    let x1 = stack(batch.iter().map(|t| t.x_next), n);
    let r = Array1::from_iter(batch.iter().map(|t| t.reward));
    let notdone = Array1::from_iter(batch.iter().map(|t| if t.done { 0.0 } else { 1.0 }));

    let a1 = agent.actor_target.forward(x1.view());
    let q1 = agent.critic_target.forward(concatenate![Axis(1), x1, a1].view());
    let target = &r + &(cfg.gamma * &notdone * &q1.column(0));

    let trace = agent.critic.forward_trace(concatenate![Axis(1), x, a].view());
    let err = &trace.output().column(0) - &target;
    let critic_loss = err.mapv(|e| e * e).mean().unwrap_or(0.0);
    let d_q = (2.0 / n as f64 * &err).insert_axis(Axis(1));
    let (g, _) = agent.critic.backward(&trace, &d_q);
    agent.critic_opt.step(&mut agent.critic, &g);

    let actor_trace = agent.actor.forward_trace(x.view());
    let a_pi = actor_trace.output().clone();
    let q_trace = agent.critic.forward_trace(concatenate![Axis(1), x, a_pi].view());
    let objective = q_trace.output().mean().unwrap_or(0.0);
    let d_obj = Array2::from_elem((n, 1), 1.0 / n as f64);
    let (_, d_in) = agent.critic.backward(&q_trace, &d_obj);
    // Ascend Q: descend on -dQ/da.
    let d_action = -d_in.slice(s![.., OBS_DIM..]).to_owned();
    let (ga, _) = agent.actor.backward(&actor_trace, &d_action);
    agent.actor_opt.step(&mut agent.actor, &ga);

    agent.actor_target.blend_from(&agent.actor, cfg.tau);
    agent.critic_target.blend_from(&agent.critic, cfg.tau);
    (critic_loss, objective)
}

/// Learned-correction controller. With `noise` set, Gaussian exploration
/// noise is added to the normalized action.
pub struct RlController {
    pub model: RobotParams,
    pub gait: BezierGait,
    pub params: FiniteTimeParams,
    pub actor: Mlp,
    pub scale: ActionScale,
    pub limits: Option<TorqueLimits>,
    noise: Option<(f64, ChaCha8Rng)>,
    /// Action and controller terms of the most recent call.
    pub last_action: [f64; ACTION_DIM],
    pub last_eval: Option<ControlEval>,
}

impl RlController {
    pub fn new(model: RobotParams, gait: BezierGait, params: FiniteTimeParams, actor: Mlp, scale: ActionScale) -> Self {
        Self { model, gait, params, actor, scale, limits: None, noise: None, last_action: [0.0; ACTION_DIM], last_eval: None }
    }

    pub fn with_limits(mut self, limits: Option<TorqueLimits>) -> Self {
        self.limits = limits;
        self
    }

    pub fn with_noise(mut self, sigma: f64, rng: ChaCha8Rng) -> Self {
        self.noise = (sigma > 0.0).then_some((sigma, rng));
        self
    }

    pub fn into_rng(self) -> Option<ChaCha8Rng> {
        self.noise.map(|(_, r)| r)
    }
}

impl Controller for RlController {
    fn control(&mut self, state: &RobotState) -> Result<ControlSample> {
        let e = control::evaluate(&self.model, &self.gait, &self.params, state)?;
        let mut a = actor_action(&self.actor, &observation(state));
        if let Some((sigma, rng)) = &mut self.noise {
            for ai in a.iter_mut() {
                let w: f64 = StandardNormal.sample(rng);
                *ai = (*ai + *sigma * w).clamp(-1.0, 1.0);
            }
        }
        let term = unpack_action(&a, &self.scale);
        let raw = control::rl_torque(&e, &term);
        let u = match &self.limits {
            Some(l) => control::saturate(&raw, l),
            None => raw,
        };
        self.last_action = a;
        self.last_eval = Some(e);
        Ok(ControlSample { u, v: e.v, y: e.output.y, ydot: e.output.ydot, theta: e.output.theta })
    }
}

/// Everything needed to rebuild the trained controller.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyCheckpoint {
    pub version: u32,
    pub layer_sizes: Vec<usize>,
    pub actor: Mlp,
    pub action_scale: ActionScale,
    pub config: DdpgConfig,
    pub seed: u64,
}

impl PolicyCheckpoint {
    pub const VERSION: u32 = 1;

    pub fn new(actor: Mlp, config: DdpgConfig, seed: u64) -> Self {
        Self { version: Self::VERSION, layer_sizes: actor.sizes(), action_scale: config.action_scale, actor, config, seed }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let c: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if c.version != Self::VERSION {
            return Err(Error::Config(format!("unsupported checkpoint version {}", c.version)));
        }
        if c.layer_sizes != c.actor.sizes() {
            return Err(Error::Config("checkpoint layer sizes disagree with its weights".into()));
        }
        Ok(c)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EpisodeStats {
    pub episode: usize,
    pub episode_return: f64,
    pub steps_survived: usize,
    pub mean_loss: f64,
    pub transitions: usize,
    /// Steps walked by the greedy policy, when evaluated after this episode.
    pub eval_steps: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub actor: Mlp,
    pub curve: Vec<EpisodeStats>,
    pub best_eval_steps: usize,
    pub updates: usize,
}

/// Everything a training run needs besides the hyperparameters.
#[derive(Clone, Debug)]
pub struct TrainSetup {
    pub plant: RobotParams,
    pub model: RobotParams,
    pub gait: BezierGait,
    pub control: FiniteTimeParams,
    pub limits: Option<TorqueLimits>,
    pub sim: SimConfig,
    /// Post-impact state of the nominal periodic orbit.
    pub x_star: RobotState,
}

/// Fixed point with the five angles and rates perturbed; the hip position
/// and its rate follow from the stance-foot constraint.
pub fn sample_initial_state(setup: &TrainSetup, std: f64, rng: &mut impl Rng) -> RobotState {
    if std == 0.0 {
        return setup.x_star;
    }
    let n = Normal::new(0.0, std).expect("finite std");
    let q = &setup.x_star.q;
    let dq = &setup.x_star.dq;
    let angles: [f64; 5] = std::array::from_fn(|i| q[2 + i] + n.sample(rng));
    let rates: [f64; 5] = std::array::from_fn(|i| dq[2 + i] + n.sample(rng));
    RobotState::with_stance_foot_at_origin(&setup.model, angles, rates)
}

/// Greedy walk of `actor` from the fixed point.
pub fn evaluate_policy(setup: &TrainSetup, actor: &Mlp, scale: &ActionScale, steps: usize) -> Result<sim::EpisodeLog> {
    let mut c = RlController::new(setup.model, setup.gait.clone(), setup.control, actor.clone(), *scale).with_limits(setup.limits);
    sim::simulate_walk(&mut c, &setup.plant, &setup.gait, &setup.x_star, steps, &setup.sim)
}

struct Rollout {
    ret: f64,
    loss_sum: f64,
    transitions: usize,
    steps: usize,
}

/// Ranking of greedy evaluation walks: settled first, then steps walked,
/// then tracking error.
#[derive(Clone, Copy, Debug, Default, PartialEq, PartialOrd)]
struct EvalScore {
    settled: bool,
    steps: usize,
    neg_mean_y: f64,
}

impl EvalScore {
    fn of(log: &sim::EpisodeLog, cfg: &DdpgConfig) -> Self {
        let walked = log.steps_completed >= cfg.eval_steps + cfg.settle_steps;
        let settled = walked
            && (cfg.settle_steps == 0
                || match log.impacts.as_slice() {
                    [.., a, b] => (b.post.to_vector() - a.post.to_vector()).norm() < cfg.settle_tol,
                    _ => false,
                });
        let mean_y = sim::summarize(log).mean_y_norm;
        Self { settled, steps: log.steps_completed, neg_mean_y: if mean_y.is_finite() { -mean_y } else { f64::NEG_INFINITY } }
    }

    fn success(&self, cfg: &DdpgConfig) -> bool {
        self.steps >= cfg.eval_steps && (cfg.settle_steps == 0 || self.settled)
    }
}

/// Run DDPG on the plant. Transitions are stored at the control rate; a
/// transition whose output samples straddle an impact is skipped.
pub fn train(setup: &TrainSetup, cfg: &DdpgConfig, seed: u64) -> Result<TrainOutcome> {
    cfg.validate()?;
    setup.sim.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut agent = Agent::new(cfg, &mut rng);
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity);
    let mut curve = Vec::with_capacity(cfg.episodes);
    let mut best = (agent.actor.clone(), EvalScore::default());
    let mut updates = 0usize;
    let mut ever_stepped = false;
    let mut control_steps = 0usize;

    for episode in 0..cfg.episodes {
        let x0 = sample_initial_state(setup, cfg.init_state_noise, &mut rng);
        let noise_rng = ChaCha8Rng::seed_from_u64(rng.random());
        let mut ctrl = RlController::new(setup.model, setup.gait.clone(), setup.control, agent.actor.clone(), cfg.action_scale)
            .with_limits(setup.limits)
            .with_noise(cfg.sigma, noise_rng);
        let mut ro = Rollout { ret: 0.0, loss_sum: 0.0, transitions: 0, steps: 0 };
        let mut state = x0;
        // Output sample preceding the current state within this step.
        let mut y_prev: Option<Vec4> = None;
        let max_controls = (cfg.steps_per_episode as f64 * setup.sim.max_step_time / setup.sim.dt).ceil() as usize;
        let mut since_impact = 0usize;
        for _ in 0..max_controls {
            let sample = match ctrl.control(&state) {
                Ok(s) => s,
                Err(_) => break,
            };
            let obs = observation(&state);
            let action = ctrl.last_action;
            let next = sim::advance(&setup.plant, &setup.gait, &setup.sim, &state, &sample.u);
            match next {
                Ok(Advance::Continue(x1)) => {
                    let fell = sim::fall_detect(&x1, &setup.sim);
                    since_impact += 1;
                    let y1 = output_value(&setup.gait, &x1).y;
                    if let Some(yp) = y_prev {
                        let ydd = measure_yddot(&yp, &sample.y, &y1, setup.sim.dt);
                        let r = reward(&sample.v, &ydd, fell, cfg);
                        ro.ret += r;
                        ro.loss_sum += (sample.v - ydd).norm_squared();
                        ro.transitions += 1;
                        buffer.push(Transition { x: obs, action, reward: r, x_next: observation(&x1), done: fell });
                    }
                    y_prev = Some(sample.y);
                    state = x1;
                    if fell || since_impact as f64 * setup.sim.dt > setup.sim.max_step_time {
                        break;
                    }
                }
                Ok(Advance::Impact { post, .. }) => {
                    ro.steps += 1;
                    y_prev = None;
                    since_impact = 0;
                    state = post;
                    if sim::fall_detect(&post, &setup.sim) || ro.steps >= cfg.steps_per_episode {
                        break;
                    }
                }
                Err(_) => break,
            }
            control_steps += 1;
            if buffer.len() >= cfg.warmup.max(cfg.batch_size) && control_steps % cfg.update_every == 0 {
                let batch = buffer.sample(cfg.batch_size, &mut rng);
                ddpg_update(&mut agent, &batch, cfg);
                updates += 1;
                ctrl.actor.clone_from(&agent.actor);
            }
        }
        ever_stepped |= ro.steps > 0;

        let mut eval_steps = None;
        if (episode + 1) % cfg.eval_every == 0 || episode + 1 == cfg.episodes {
            let log = evaluate_policy(setup, &agent.actor, &cfg.action_scale, cfg.eval_steps + cfg.settle_steps)?;
            let score = EvalScore::of(&log, cfg);
            eval_steps = Some(log.steps_completed);
            if score > best.1 {
                best = (agent.actor.clone(), score);
            }
            log::info!(
                "episode {episode}: eval walked {} steps, settled {}, mean |y| {:.4}",
                log.steps_completed,
                score.settled,
                -score.neg_mean_y
            );
        }
        curve.push(EpisodeStats {
            episode,
            episode_return: ro.ret,
            steps_survived: ro.steps,
            mean_loss: if ro.transitions > 0 { ro.loss_sum / ro.transitions as f64 } else { 0.0 },
            transitions: ro.transitions,
            eval_steps,
        });
        if cfg.stop_on_success && best.1.success(cfg) {
            break;
        }
    }
    if !ever_stepped {
        return Err(Error::TrainingInfeasible("no training episode completed a step".into()));
    }
    Ok(TrainOutcome { actor: best.0, curve, best_eval_steps: best.1.steps.min(cfg.eval_steps), updates })
}
