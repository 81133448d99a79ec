//! Vectorized analytic control tasks.
//!
//! Every task steps `E` independent copies in lockstep. An environment that
//! terminates or hits its step limit is reset inside [`VecEnv::step`]; the
//! observation it reached before the reset is returned separately so the
//! replay buffer can store the true successor.
//!
//! Task definitions (all dynamics use semi-implicit Euler):
//!
//! * `pointmass2d`: double integrator in a `[-2, 2]^2` arena with walls that
//!   stop motion along the blocked axis. Start uniform in `[-1, 1]^2` at rest;
//!   goal uniform in `[-0.5, 0.5]^2`. Reward `-w_dist |p - g|^2 - w_ctrl |a|^2`
//!   plus `w_bonus` on termination, which happens within 0.05 of the goal.
//!   The actor sees the goal-relative position and velocity; the critic also
//!   sees the absolute goal.
//! * `pendulum`: swing-up from a uniform angle and `|theta'| < 1`,
//!   `theta'' = 15 sin(theta) + 3 u`
//!   with torque `u = 2 a` and speed limit 8. Reward
//!   `-(w_angle theta^2 + w_vel theta'^2 + w_ctrl a^2)` with `theta` wrapped to
//!   `(-pi, pi]`, upright at zero.
//! * `reacher2`: planar two-link arm (links 0.5 and 0.5) with damped joint
//!   accelerations `q'' = 10 a - q'`. Reward
//!   `-w_dist |tip - target| - w_ctrl |a|^2`.
//!
//! For pendulum and reacher2 the actor sees joint velocities quantized to
//! 0.1 while the critic sees them exactly.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor2;
use crate::error::{config_err, numeric_err, shape_err, Error, Result};

const POINTMASS_ARENA: f64 = 2.0;
const POINTMASS_GOAL_RADIUS: f64 = 0.05;
const PENDULUM_MAX_SPEED: f64 = 8.0;
const REACHER_LINKS: (f64, f64) = (0.5, 0.5);
const REACHER_MAX_SPEED: f64 = 10.0;
const VELOCITY_QUANTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskName {
    #[serde(rename = "pointmass2d")]
    PointMass2d,
    Pendulum,
    Reacher2,
}

impl TaskName {
    pub const ALL: [TaskName; 3] = [
        TaskName::PointMass2d,
        TaskName::Pendulum,
        TaskName::Reacher2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskName::PointMass2d => "pointmass2d",
            TaskName::Pendulum => "pendulum",
            TaskName::Reacher2 => "reacher2",
        }
    }
}

impl fmt::Display for TaskName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskName::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| {
                config_err!(
                    "unknown task '{s}', expected one of {{pointmass2d, pendulum, reacher2}}"
                )
            })
    }
}

/// Static description of a task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: TaskName,
    pub obs_dim: usize,
    pub critic_obs_dim: usize,
    pub action_dim: usize,
    pub dt: f64,
    pub episode_limit: u32,
    /// Task units per unit of normalized action.
    pub action_scale: f64,
    /// Default critic support.
    pub v_min: f32,
    pub v_max: f32,
    /// Mean evaluation return at which the task counts as solved.
    pub solved_threshold: f64,
    pub reward_weights: BTreeMap<String, f64>,
}

fn weights(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

impl TaskSpec {
    pub fn builtin(name: TaskName) -> Self {
        match name {
            TaskName::PointMass2d => TaskSpec {
                name,
                obs_dim: 4,
                critic_obs_dim: 6,
                action_dim: 2,
                dt: 0.05,
                episode_limit: 100,
                action_scale: 1.0,
                v_min: -60.0,
                v_max: 10.0,
                solved_threshold: -12.0,
                reward_weights: weights(&[("w_bonus", 5.0), ("w_ctrl", 0.1), ("w_dist", 1.0)]),
            },
            TaskName::Pendulum => TaskSpec {
                name,
                obs_dim: 3,
                critic_obs_dim: 3,
                action_dim: 1,
                dt: 0.05,
                episode_limit: 200,
                action_scale: 2.0,
                v_min: -900.0,
                v_max: 10.0,
                solved_threshold: -250.0,
                reward_weights: weights(&[("w_angle", 1.0), ("w_ctrl", 0.01), ("w_vel", 0.1)]),
            },
            TaskName::Reacher2 => TaskSpec {
                name,
                obs_dim: 10,
                critic_obs_dim: 10,
                action_dim: 2,
                dt: 0.05,
                episode_limit: 100,
                action_scale: 10.0,
                v_min: -60.0,
                v_max: 5.0,
                solved_threshold: -14.0,
                reward_weights: weights(&[("w_ctrl", 0.05), ("w_dist", 1.0)]),
            },
        }
    }

    pub fn reward_term_names(&self) -> Vec<&str> {
        self.reward_weights.keys().map(String::as_str).collect()
    }

    pub fn weight(&self, term: &str) -> f64 {
        self.reward_weights[term]
    }

    /// Returns a copy with `overrides` merged into the reward weights.
    pub fn set_reward_weights(&self, overrides: &BTreeMap<String, f64>) -> Result<TaskSpec> {
        let mut spec = self.clone();
        for (name, &value) in overrides {
            match spec.reward_weights.get_mut(name) {
                Some(w) => {
                    if !value.is_finite() {
                        return Err(config_err!("reward weight {name} must be finite"));
                    }
                    *w = value;
                }
                None => {
                    return Err(config_err!(
                        "unknown reward term '{name}' for {}; valid terms: {}",
                        self.name,
                        self.reward_term_names().join(", ")
                    ))
                }
            }
        }
        Ok(spec)
    }
}

/// Physical state of one environment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PhysState {
    PointMass {
        pos: [f64; 2],
        vel: [f64; 2],
        goal: [f64; 2],
    },
    Pendulum {
        theta: f64,
        omega: f64,
    },
    Reacher {
        q: [f64; 2],
        qd: [f64; 2],
        target: [f64; 2],
    },
}

impl PhysState {
    fn is_finite(&self) -> bool {
        let all = |xs: &[f64]| xs.iter().all(|x| x.is_finite());
        match self {
            PhysState::PointMass { pos, vel, goal } => all(pos) && all(vel) && all(goal),
            PhysState::Pendulum { theta, omega } => theta.is_finite() && omega.is_finite(),
            PhysState::Reacher { q, qd, target } => all(q) && all(qd) && all(target),
        }
    }
}

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let t = (theta + PI).rem_euclid(2.0 * PI) - PI;
    if t <= -PI {
        t + 2.0 * PI
    } else {
        t
    }
}

fn quantize(v: f64) -> f64 {
    (v / VELOCITY_QUANTUM).round() * VELOCITY_QUANTUM
}

pub fn reacher_tip(q: [f64; 2]) -> [f64; 2] {
    let (l1, l2) = REACHER_LINKS;
    [
        l1 * q[0].cos() + l2 * (q[0] + q[1]).cos(),
        l1 * q[0].sin() + l2 * (q[0] + q[1]).sin(),
    ]
}

fn initial_state(name: TaskName, rng: &mut ChaCha8Rng) -> PhysState {
    match name {
        TaskName::PointMass2d => PhysState::PointMass {
            pos: [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
            vel: [0.0, 0.0],
            goal: [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)],
        },
        TaskName::Pendulum => PhysState::Pendulum {
            theta: rng.random_range(-PI..PI),
            omega: rng.random_range(-1.0..1.0),
        },
        TaskName::Reacher2 => {
            let radius: f64 = rng.random_range(0.2..0.9);
            let angle: f64 = rng.random_range(-PI..PI);
            PhysState::Reacher {
                q: [rng.random_range(-PI..PI), rng.random_range(-PI..PI)],
                qd: [0.0, 0.0],
                target: [radius * angle.cos(), radius * angle.sin()],
            }
        }
    }
}

/// Writes the actor and critic observations of `state`.
pub fn observe(state: &PhysState, obs: &mut [f32], critic_obs: &mut [f32]) {
    match *state {
        PhysState::PointMass { pos, vel, goal } => {
            let rel = [pos[0] - goal[0], pos[1] - goal[1]];
            let actor = [rel[0], rel[1], vel[0], vel[1]];
            fill(obs, &actor);
            fill(&mut critic_obs[..4], &actor);
            fill(&mut critic_obs[4..], &goal);
        }
        PhysState::Pendulum { theta, omega } => {
            fill(obs, &[theta.cos(), theta.sin(), quantize(omega)]);
            fill(critic_obs, &[theta.cos(), theta.sin(), omega]);
        }
        PhysState::Reacher { q, qd, target } => {
            let tip = reacher_tip(q);
            let common = [
                q[0].cos(),
                q[0].sin(),
                q[1].cos(),
                q[1].sin(),
                0.0,
                0.0,
                target[0],
                target[1],
                tip[0] - target[0],
                tip[1] - target[1],
            ];
            fill(obs, &common);
            fill(critic_obs, &common);
            obs[4] = quantize(qd[0]) as f32;
            obs[5] = quantize(qd[1]) as f32;
            critic_obs[4] = qd[0] as f32;
            critic_obs[5] = qd[1] as f32;
        }
    }
}

fn fill(dst: &mut [f32], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *s as f32;
    }
}

/// Result of advancing one environment by one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition1 {
    pub state: PhysState,
    pub reward: f64,
    pub terminated: bool,
}

/// Advances `state` under the normalized `action`, which is clipped to
/// `[-1, 1]` first.
pub fn dynamics(spec: &TaskSpec, state: &PhysState, action: &[f32]) -> Transition1 {
    let a: Vec<f64> = action
        .iter()
        .map(|&x| (x as f64).clamp(-1.0, 1.0))
        .collect();
    let ctrl: f64 = a.iter().map(|x| x * x).sum();
    let dt = spec.dt;
    let w = |k: &str| spec.reward_weights.get(k).copied().unwrap_or(0.0);
    match *state {
        PhysState::PointMass {
            mut pos,
            mut vel,
            goal,
        } => {
            for i in 0..2 {
                vel[i] += a[i] * spec.action_scale * dt;
                pos[i] += vel[i] * dt;
                if pos[i].abs() > POINTMASS_ARENA {
                    pos[i] = pos[i].clamp(-POINTMASS_ARENA, POINTMASS_ARENA);
                    vel[i] = 0.0;
                }
            }
            let d2 = (pos[0] - goal[0]).powi(2) + (pos[1] - goal[1]).powi(2);
            let terminated = d2.sqrt() < POINTMASS_GOAL_RADIUS;
            let mut reward = -w("w_dist") * d2 - w("w_ctrl") * ctrl;
            if terminated {
                reward += w("w_bonus");
            }
            Transition1 {
                state: PhysState::PointMass { pos, vel, goal },
                reward,
                terminated,
            }
        }
        PhysState::Pendulum { theta, omega } => {
            let torque = a[0] * spec.action_scale;
            let alpha = 15.0 * theta.sin() + 3.0 * torque;
            let omega = (omega + alpha * dt).clamp(-PENDULUM_MAX_SPEED, PENDULUM_MAX_SPEED);
            let theta = theta + omega * dt;
            let th = wrap_angle(theta);
            let reward =
                -(w("w_angle") * th * th + w("w_vel") * omega * omega + w("w_ctrl") * ctrl);
            Transition1 {
                state: PhysState::Pendulum { theta, omega },
                reward,
                terminated: false,
            }
        }
        PhysState::Reacher {
            mut q,
            mut qd,
            target,
        } => {
            for i in 0..2 {
                let acc = a[i] * spec.action_scale - qd[i];
                qd[i] = (qd[i] + acc * dt).clamp(-REACHER_MAX_SPEED, REACHER_MAX_SPEED);
                q[i] += qd[i] * dt;
            }
            let tip = reacher_tip(q);
            let dist = ((tip[0] - target[0]).powi(2) + (tip[1] - target[1]).powi(2)).sqrt();
            let reward = -w("w_dist") * dist - w("w_ctrl") * ctrl;
            Transition1 {
                state: PhysState::Reacher { q, qd, target },
                reward,
                terminated: false,
            }
        }
    }
}

/// Observation pair captured for an environment before it was reset.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalObservation {
    pub obs: Vec<f32>,
    pub critic_obs: Vec<f32>,
}

/// Output of one lockstep step.
#[derive(Debug, Clone)]
pub struct StepResult {
    /// Observation to act on next; post-reset for rows that ended.
    pub next_obs: Tensor2<f32>,
    pub next_critic_obs: Tensor2<f32>,
    pub reward: Vec<f32>,
    pub terminated: Vec<bool>,
    pub truncated: Vec<bool>,
    /// True successor for rows that ended, `None` elsewhere.
    pub final_obs: Vec<Option<FinalObservation>>,
}

impl StepResult {
    pub fn done(&self, i: usize) -> bool {
        self.terminated[i] || self.truncated[i]
    }

    /// True successor observations: `final_obs` where an episode ended,
    /// `next_obs` elsewhere.
    pub fn successor_obs(&self) -> (Tensor2<f32>, Tensor2<f32>) {
        let mut obs = self.next_obs.clone();
        let mut critic = self.next_critic_obs.clone();
        for (i, f) in self.final_obs.iter().enumerate() {
            if let Some(f) = f {
                obs.row_mut(i).copy_from_slice(&f.obs);
                critic.row_mut(i).copy_from_slice(&f.critic_obs);
            }
        }
        (obs, critic)
    }

    /// 0 where the episode terminated, 1 otherwise (truncation bootstraps).
    pub fn bootstrap_mask(&self) -> Vec<f32> {
        self.terminated
            .iter()
            .map(|&t| if t { 0.0 } else { 1.0 })
            .collect()
    }
}

/// `E` environments of one task stepped in lockstep.
#[derive(Debug, Clone)]
pub struct VecEnv {
    spec: TaskSpec,
    states: Vec<PhysState>,
    steps: Vec<u32>,
    rngs: Vec<ChaCha8Rng>,
    obs: Tensor2<f32>,
    critic_obs: Tensor2<f32>,
}

impl VecEnv {
    /// Creates `num_envs` environments using rng streams `0..num_envs`.
    pub fn reset_all(spec: &TaskSpec, num_envs: usize, seed: u64) -> Result<VecEnv> {
        let streams: Vec<u64> = (0..num_envs as u64).collect();
        Self::with_streams(spec, seed, &streams)
    }

    /// Creates one environment per entry of `streams`. Environment `i` draws
    /// every reset from stream `streams[i]` of the seed's counter-based
    /// generator, so its trajectory does not depend on its neighbours.
    pub fn with_streams(spec: &TaskSpec, seed: u64, streams: &[u64]) -> Result<VecEnv> {
        if streams.is_empty() {
            return Err(config_err!("need at least one environment"));
        }
        if spec.critic_obs_dim < spec.obs_dim || spec.episode_limit == 0 {
            return Err(config_err!("invalid task spec for {}", spec.name));
        }
        let n = streams.len();
        let mut rngs: Vec<ChaCha8Rng> = streams
            .iter()
            .map(|&s| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(s);
                rng
            })
            .collect();
        let states: Vec<PhysState> = rngs
            .iter_mut()
            .map(|r| initial_state(spec.name, r))
            .collect();
        let mut env = VecEnv {
            spec: spec.clone(),
            states,
            steps: vec![0; n],
            rngs,
            obs: Tensor2::zeros(n, spec.obs_dim),
            critic_obs: Tensor2::zeros(n, spec.critic_obs_dim),
        };
        for i in 0..n {
            env.refresh_obs(i);
        }
        Ok(env)
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn num_envs(&self) -> usize {
        self.states.len()
    }

    pub fn obs(&self) -> &Tensor2<f32> {
        &self.obs
    }

    pub fn critic_obs(&self) -> &Tensor2<f32> {
        &self.critic_obs
    }

    pub fn state(&self, i: usize) -> &PhysState {
        &self.states[i]
    }

    pub fn step_count(&self, i: usize) -> u32 {
        self.steps[i]
    }

    /// Overwrites one environment's physical state and step counter.
    pub fn set_state(&mut self, i: usize, state: PhysState, step_count: u32) -> Result<()> {
        let matches = matches!(
            (self.spec.name, &state),
            (TaskName::PointMass2d, PhysState::PointMass { .. })
                | (TaskName::Pendulum, PhysState::Pendulum { .. })
                | (TaskName::Reacher2, PhysState::Reacher { .. })
        );
        if !matches {
            return Err(config_err!(
                "state does not belong to task {}",
                self.spec.name
            ));
        }
        if step_count >= self.spec.episode_limit {
            return Err(config_err!(
                "step counter {step_count} beyond episode limit"
            ));
        }
        self.states[i] = state;
        self.steps[i] = step_count;
        self.refresh_obs(i);
        Ok(())
    }

    fn refresh_obs(&mut self, i: usize) {
        let state = self.states[i];
        observe(&state, self.obs.row_mut(i), self.critic_obs.row_mut(i));
    }

    /// Steps every environment; `actions` is `[E x action_dim]`.
    pub fn step(&mut self, actions: &Tensor2<f32>) -> Result<StepResult> {
        let n = self.num_envs();
        if actions.shape() != (n, self.spec.action_dim) {
            return Err(shape_err!(
                "actions are {:?}, expected ({n}, {})",
                actions.shape(),
                self.spec.action_dim
            ));
        }
        let mut reward = vec![0.0f32; n];
        let mut terminated = vec![false; n];
        let mut truncated = vec![false; n];
        let mut final_obs = vec![None; n];
        for i in 0..n {
            let t = dynamics(&self.spec, &self.states[i], actions.row(i));
            if !t.state.is_finite() || !t.reward.is_finite() {
                return Err(numeric_err!("environment {i} reached a non-finite state"));
            }
            self.states[i] = t.state;
            self.steps[i] += 1;
            reward[i] = t.reward as f32;
            terminated[i] = t.terminated;
            truncated[i] = !t.terminated && self.steps[i] >= self.spec.episode_limit;
            self.refresh_obs(i);
            if terminated[i] || truncated[i] {
                final_obs[i] = Some(FinalObservation {
                    obs: self.obs.row(i).to_vec(),
                    critic_obs: self.critic_obs.row(i).to_vec(),
                });
                self.states[i] = initial_state(self.spec.name, &mut self.rngs[i]);
                self.steps[i] = 0;
                self.refresh_obs(i);
            }
        }
        Ok(StepResult {
            next_obs: self.obs.clone(),
            next_critic_obs: self.critic_obs.clone(),
            reward,
            terminated,
            truncated,
            final_obs,
        })
    }
}
