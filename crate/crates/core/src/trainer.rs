//! The training loop and the TD3 / SAC update steps.
//!
//! One parallel step collects `num_envs` transitions, after which `utd`
//! updates each sample `batch_size` transitions from replay. The critic
//! regresses onto a projected clipped-double-Q target; the deterministic
//! actor follows the critic every `policy_delay` updates, and target copies
//! trail the online nets by Polyak averaging.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AdamConfig, AdamState, FlatAdam, MlpGrads, MlpParams, Tensor2};
use crate::checkpoint::{find, NamedTensor};
use crate::config::{ActorQ, Agent, TrainConfig};
use crate::distributional::{
    clipped_double_target, cross_entropy_loss, project_target, softmax_rows, AtomGrid,
    CategoricalDistribution, CdqMode,
};
use crate::envsuite::{TaskSpec, VecEnv};
use crate::error::{numeric_err, shape_err, Error, Result};
use crate::exploration::{apply_exploration_noise, target_policy_smoothing, NoiseSchedule};
use crate::metrics::{MetricsSink, TrainMetricsRow};
use crate::networks::{
    polyak_update, Actor, ActorNet, CriticHead, CriticPair, GaussianActor, NetworkSizes, Policy,
    TargetSet,
};
use crate::replay::{ReplayBuffer, TransitionBatch};

const NOISE_SALT: u64 = 0x6e6f_6973_655f_7331;
const LEARN_SALT: u64 = 0x6c65_6172_6e5f_7332;
const INIT_SALT: u64 = 0x696e_6974_5f5f_7333;
/// Evaluation environments draw from `seed ^ EVAL_SALT`.
pub const EVAL_SALT: u64 = 0x6576_616c_5f5f_7334;

/// Scalars the update steps read from the config.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateSettings {
    pub gamma: f32,
    pub tau: f32,
    pub policy_delay: usize,
    pub target_noise: f32,
    pub target_noise_clip: f32,
    pub cdq: CdqMode,
    pub actor_q: ActorQ,
    pub target_entropy: f32,
    pub tune_alpha: bool,
}

impl UpdateSettings {
    pub fn from_config(cfg: &TrainConfig, action_dim: usize) -> Self {
        Self {
            gamma: cfg.gamma,
            tau: cfg.tau,
            policy_delay: cfg.policy_delay,
            target_noise: cfg.target_noise,
            target_noise_clip: cfg.target_noise_clip,
            cdq: cfg.cdq,
            actor_q: cfg.actor_q,
            target_entropy: cfg.target_entropy.unwrap_or(-(action_dim as f64)) as f32,
            tune_alpha: cfg.alpha_lr > 0.0,
        }
    }
}

/// Online nets, targets and optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Learner {
    pub actor: Actor,
    pub critics: CriticPair,
    pub targets: TargetSet,
    pub actor_opt: AdamState<f32>,
    pub q1_opt: AdamState<f32>,
    pub q2_opt: AdamState<f32>,
    /// SAC temperature, `alpha = exp(log_alpha)`.
    pub log_alpha: f32,
    pub alpha_opt: FlatAdam,
    /// Completed update calls.
    pub update_count: u64,
}

/// What one update reports.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateStats {
    /// Sum of both critics' losses.
    pub critic_loss: f32,
    /// Present only on steps that updated the actor.
    pub actor_loss: Option<f32>,
    /// Mean expected value of the first online critic on the batch.
    pub mean_q: f32,
    /// SAC temperature after the step.
    pub alpha: Option<f32>,
}

impl Learner {
    pub fn new<R: Rng + ?Sized>(cfg: &TrainConfig, spec: &TaskSpec, rng: &mut R) -> Result<Self> {
        let sizes = NetworkSizes::scaled(cfg.width_mult)?;
        let head = if cfg.distributional {
            CriticHead::Categorical(cfg.grid()?)
        } else {
            CriticHead::Scalar
        };
        let actor = match cfg.agent {
            Agent::FastTd3 => Actor::Deterministic(ActorNet::new(
                spec.obs_dim,
                spec.action_dim,
                &sizes.actor_hidden,
                rng,
            )?),
            Agent::FastSac => Actor::Gaussian(GaussianActor::new(
                spec.obs_dim,
                spec.action_dim,
                &sizes.actor_hidden,
                rng,
            )?),
        };
        let critics = CriticPair::new(
            spec.critic_obs_dim,
            spec.action_dim,
            &sizes.critic_hidden,
            head,
            rng,
        )?;
        let critic_adam = AdamConfig {
            lr: cfg.critic_lr,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            ..AdamConfig::default()
        };
        let actor_adam = AdamConfig {
            lr: cfg.actor_lr,
            ..critic_adam
        };
        let alpha_adam = AdamConfig {
            lr: cfg.alpha_lr.max(f64::MIN_POSITIVE),
            ..critic_adam
        };
        let targets = TargetSet {
            actor: match &actor {
                Actor::Deterministic(a) => Some(a.clone()),
                Actor::Gaussian(_) => None,
            },
            critics: critics.clone(),
        };
        Ok(Self {
            actor_opt: AdamState::new(actor.mlp(), actor_adam),
            q1_opt: AdamState::new(&critics.q1, critic_adam),
            q2_opt: AdamState::new(&critics.q2, critic_adam),
            actor,
            critics,
            targets,
            log_alpha: (cfg.alpha_init as f32).ln(),
            alpha_opt: FlatAdam::new(1, alpha_adam),
            update_count: 0,
        })
    }

    pub fn agent(&self) -> Agent {
        match self.actor {
            Actor::Deterministic(_) => Agent::FastTd3,
            Actor::Gaussian(_) => Agent::FastSac,
        }
    }

    pub fn alpha(&self) -> f32 {
        self.log_alpha.exp()
    }

    /// Every parameter and optimizer tensor, in checkpoint naming.
    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        let (grid, agent) = (
            match self.critics.head {
                CriticHead::Categorical(g) => vec![g.v_min(), g.v_max(), g.num_atoms() as f32],
                CriticHead::Scalar => vec![0.0, 0.0, 1.0],
            },
            match self.agent() {
                Agent::FastTd3 => 0.0,
                Agent::FastSac => 1.0,
            },
        );
        out.push(NamedTensor::scalar("meta/agent", agent));
        out.push(NamedTensor {
            name: "meta/grid".into(),
            dims: vec![3],
            data: grid,
        });
        push_mlp(&mut out, "actor", self.actor.mlp());
        push_mlp(&mut out, "critic1", &self.critics.q1);
        push_mlp(&mut out, "critic2", &self.critics.q2);
        if let Some(a) = &self.targets.actor {
            push_mlp(&mut out, "targets/actor", &a.mlp);
        }
        push_mlp(&mut out, "targets/critic1", &self.targets.critics.q1);
        push_mlp(&mut out, "targets/critic2", &self.targets.critics.q2);
        push_adam(&mut out, "adam/actor", &self.actor_opt);
        push_adam(&mut out, "adam/critic1", &self.q1_opt);
        push_adam(&mut out, "adam/critic2", &self.q2_opt);
        out.push(NamedTensor::scalar("sac/log_alpha", self.log_alpha));
        out.push(NamedTensor {
            name: "adam/alpha/state".into(),
            dims: vec![4],
            data: vec![
                self.alpha_opt.first_moment[0],
                self.alpha_opt.second_moment[0],
                self.alpha_opt.step_count as f32,
                self.alpha_opt.config.lr as f32,
            ],
        });
        out.push(NamedTensor {
            name: "meta/update_count".into(),
            dims: vec![2],
            data: split_u64(self.update_count),
        });
        out
    }

    pub fn from_tensors(tensors: &[NamedTensor]) -> Result<Self> {
        let actor = load_actor(tensors)?;
        let head = load_head(tensors)?;
        let critics = CriticPair::from_parts(
            read_mlp(tensors, "critic1", false)?,
            read_mlp(tensors, "critic2", false)?,
            head,
        )?;
        let target_actor = match actor {
            Actor::Deterministic(_) => Some(ActorNet::from_mlp(read_mlp(
                tensors,
                "targets/actor",
                true,
            )?)?),
            Actor::Gaussian(_) => None,
        };
        let targets = TargetSet {
            actor: target_actor,
            critics: CriticPair::from_parts(
                read_mlp(tensors, "targets/critic1", false)?,
                read_mlp(tensors, "targets/critic2", false)?,
                head,
            )?,
        };
        let alpha_state = &find(tensors, "adam/alpha/state")?.data;
        if alpha_state.len() != 4 {
            return Err(Error::Format("adam/alpha/state must hold 4 values".into()));
        }
        let mut alpha_opt = FlatAdam::new(1, AdamConfig::with_lr(alpha_state[3] as f64));
        alpha_opt.first_moment[0] = alpha_state[0];
        alpha_opt.second_moment[0] = alpha_state[1];
        alpha_opt.step_count = alpha_state[2] as u64;
        Ok(Self {
            actor_opt: read_adam(tensors, "adam/actor", actor.mlp())?,
            q1_opt: read_adam(tensors, "adam/critic1", &critics.q1)?,
            q2_opt: read_adam(tensors, "adam/critic2", &critics.q2)?,
            actor,
            critics,
            targets,
            log_alpha: find(tensors, "sac/log_alpha")?.data[0],
            alpha_opt,
            update_count: join_u64(&find(tensors, "meta/update_count")?.data)?,
        })
    }
}

fn split_u64(v: u64) -> Vec<f32> {
    // Two 24-bit halves survive the f32 round trip exactly.
    vec![(v >> 24) as f32, (v & 0xff_ffff) as f32]
}

fn join_u64(v: &[f32]) -> Result<u64> {
    match v {
        [hi, lo] => Ok(((*hi as u64) << 24) | *lo as u64),
        _ => Err(Error::Format("meta/update_count must hold 2 values".into())),
    }
}

fn push_mlp(out: &mut Vec<NamedTensor>, prefix: &str, mlp: &MlpParams<f32>) {
    for (i, l) in mlp.layers().iter().enumerate() {
        out.push(NamedTensor {
            name: format!("{prefix}/layer{i}/weight"),
            dims: vec![l.weight.rows() as u32, l.weight.cols() as u32],
            data: l.weight.data().to_vec(),
        });
        out.push(NamedTensor {
            name: format!("{prefix}/layer{i}/bias"),
            dims: vec![l.bias.len() as u32],
            data: l.bias.clone(),
        });
    }
}

fn push_grads(out: &mut Vec<NamedTensor>, prefix: &str, g: &MlpGrads<f32>) {
    for (i, l) in g.layers.iter().enumerate() {
        out.push(NamedTensor {
            name: format!("{prefix}/layer{i}/weight"),
            dims: vec![l.weight.rows() as u32, l.weight.cols() as u32],
            data: l.weight.data().to_vec(),
        });
        out.push(NamedTensor {
            name: format!("{prefix}/layer{i}/bias"),
            dims: vec![l.bias.len() as u32],
            data: l.bias.clone(),
        });
    }
}

fn push_adam(out: &mut Vec<NamedTensor>, prefix: &str, s: &AdamState<f32>) {
    push_grads(out, &format!("{prefix}/m"), &s.first_moment);
    push_grads(out, &format!("{prefix}/v"), &s.second_moment);
    let mut hyper = split_u64(s.step_count);
    hyper.extend([
        s.config.lr as f32,
        s.config.beta1 as f32,
        s.config.beta2 as f32,
        s.config.epsilon as f32,
    ]);
    out.push(NamedTensor {
        name: format!("{prefix}/step"),
        dims: vec![6],
        data: hyper,
    });
}

fn read_layers(tensors: &[NamedTensor], prefix: &str) -> Result<Vec<crate::autodiff::Dense<f32>>> {
    let mut layers = Vec::new();
    for i in 0.. {
        let wname = format!("{prefix}/layer{i}/weight");
        let Some(w) = tensors.iter().find(|t| t.name == wname) else {
            break;
        };
        let b = find(tensors, &format!("{prefix}/layer{i}/bias"))?;
        let [rows, cols] = w.dims[..] else {
            return Err(Error::Format(format!(
                "{wname} must be rank 2, got {:?}",
                w.dims
            )));
        };
        if b.dims != [rows] {
            return Err(Error::Format(format!(
                "{prefix}/layer{i}/bias has dims {:?}, expected [{rows}]",
                b.dims
            )));
        }
        layers.push(crate::autodiff::Dense {
            weight: Tensor2::new(rows as usize, cols as usize, w.data.clone())?,
            bias: b.data.clone(),
        });
    }
    if layers.is_empty() {
        return Err(Error::Format(format!(
            "checkpoint lacks tensors under '{prefix}/'"
        )));
    }
    Ok(layers)
}

fn read_mlp(tensors: &[NamedTensor], prefix: &str, tanh_output: bool) -> Result<MlpParams<f32>> {
    use crate::autodiff::Activation;
    MlpParams::new(
        read_layers(tensors, prefix)?,
        Activation::Relu,
        if tanh_output {
            Activation::Tanh
        } else {
            Activation::Identity
        },
    )
}

fn read_adam(
    tensors: &[NamedTensor],
    prefix: &str,
    params: &MlpParams<f32>,
) -> Result<AdamState<f32>> {
    let step = &find(tensors, &format!("{prefix}/step"))?.data;
    if step.len() != 6 {
        return Err(Error::Format(format!("{prefix}/step must hold 6 values")));
    }
    let config = AdamConfig {
        lr: step[2] as f64,
        beta1: step[3] as f64,
        beta2: step[4] as f64,
        epsilon: step[5] as f64,
    };
    let mut s = AdamState::new(params, config);
    s.step_count = join_u64(&step[..2])?;
    for (dst, which) in [(&mut s.first_moment, "m"), (&mut s.second_moment, "v")] {
        let layers = read_layers(tensors, &format!("{prefix}/{which}"))?;
        if layers.len() != dst.layers.len()
            || layers
                .iter()
                .zip(&dst.layers)
                .any(|(a, b)| a.weight.shape() != b.weight.shape())
        {
            return Err(Error::Format(format!(
                "{prefix}/{which} does not match its parameters"
            )));
        }
        dst.layers = layers;
    }
    Ok(s)
}

fn load_head(tensors: &[NamedTensor]) -> Result<CriticHead> {
    match find(tensors, "meta/grid")?.data[..] {
        [_, _, n] if n == 1.0 => Ok(CriticHead::Scalar),
        [lo, hi, n] => Ok(CriticHead::Categorical(AtomGrid::new(lo, hi, n as usize)?)),
        _ => Err(Error::Format("meta/grid must hold 3 values".into())),
    }
}

/// The actor stored in a checkpoint.
pub fn load_actor(tensors: &[NamedTensor]) -> Result<Actor> {
    match find(tensors, "meta/agent")?.data[..] {
        [a] if a == 0.0 => Ok(Actor::Deterministic(ActorNet::from_mlp(read_mlp(
            tensors, "actor", true,
        )?)?)),
        [a] if a == 1.0 => Ok(Actor::Gaussian(GaussianActor::from_mlp(read_mlp(
            tensors, "actor", false,
        )?)?)),
        _ => Err(Error::Format(
            "meta/agent must be 0 (fasttd3) or 1 (fastsac)".into(),
        )),
    }
}

fn mean(v: &[f32]) -> f32 {
    (v.iter().map(|&x| x as f64).sum::<f64>() / v.len().max(1) as f64) as f32
}

/// Gradient of `sum_r weight[r] * value(out_r)` with respect to `out`.
fn value_grad(head: &CriticHead, out: &Tensor2<f32>, weight: &[f32]) -> Tensor2<f32> {
    match head {
        CriticHead::Scalar => Tensor2::new(out.rows(), 1, weight.to_vec()).expect("one column"),
        CriticHead::Categorical(grid) => {
            let p = softmax_rows(out);
            let atoms = grid.atoms();
            let mut g = Tensor2::zeros(out.rows(), out.cols());
            for r in 0..out.rows() {
                let pr = p.row(r);
                let v: f32 = pr.iter().zip(&atoms).map(|(a, b)| a * b).sum();
                for ((gi, &pi), &z) in g.row_mut(r).iter_mut().zip(pr).zip(&atoms) {
                    // dV/dlogit_i = p_i (z_i - V)
                    *gi = weight[r] * pi * (z - v);
                }
            }
            g
        }
    }
}

/// Fits both critics to the clipped double-Q target built from the target
/// critics at `(next_critic_obs, next_actions)`. `entropy_bonus[r]`, when
/// given, is `-alpha * log_prob` of the next action.
fn critic_step(
    l: &mut Learner,
    batch: &TransitionBatch,
    next_actions: &Tensor2<f32>,
    entropy_bonus: Option<&[f32]>,
    s: &UpdateSettings,
) -> Result<(f32, f32)> {
    let b = batch.len();
    let tx = l
        .targets
        .critics
        .input(&batch.next_critic_obs, next_actions)?;
    let t1 = l.targets.critics.q1.predict(&tx)?;
    let t2 = l.targets.critics.q2.predict(&tx)?;
    let reward: Vec<f32> = match entropy_bonus {
        None => batch.reward.clone(),
        Some(bonus) => batch
            .reward
            .iter()
            .zip(bonus)
            .zip(&batch.bootstrap_mask)
            .map(|((&r, &h), &m)| r + s.gamma * m * h)
            .collect(),
    };
    let x = l.critics.input(&batch.critic_obs, &batch.action)?;
    let (o1, tape1) = l.critics.q1.forward(&x)?;
    let (o2, tape2) = l.critics.q2.forward(&x)?;
    let (loss1, g1, loss2, g2) = match l.critics.head {
        CriticHead::Categorical(grid) => {
            let d1 = CategoricalDistribution::from_logits(grid, &t1)?;
            let d2 = CategoricalDistribution::from_logits(grid, &t2)?;
            let combined = clipped_double_target(&d1, &d2, s.cdq)?;
            let target = project_target(
                &grid,
                &reward,
                s.gamma,
                &batch.bootstrap_mask,
                combined.probs(),
            )?;
            let (loss1, g1) = cross_entropy_loss(&o1, &target)?;
            let (loss2, g2) = cross_entropy_loss(&o2, &target)?;
            (loss1, g1, loss2, g2)
        }
        CriticHead::Scalar => {
            let y: Vec<f32> = (0..b)
                .map(|r| {
                    let (a, c) = (t1.data()[r], t2.data()[r]);
                    let q = match s.cdq {
                        CdqMode::Min => a.min(c),
                        CdqMode::Avg => 0.5 * (a + c),
                    };
                    reward[r] + s.gamma * batch.bootstrap_mask[r] * q
                })
                .collect();
            let (loss1, g1) = squared_error(&o1, &y);
            let (loss2, g2) = squared_error(&o2, &y);
            (loss1, g1, loss2, g2)
        }
    };
    let critic_loss = loss1 + loss2;
    if !critic_loss.is_finite() {
        return Err(numeric_err!("critic loss is not finite"));
    }
    let mean_q = mean(&l.critics.head.values(&o1));
    let grads1 = l.critics.q1.backward(tape1, &g1)?;
    let grads2 = l.critics.q2.backward(tape2, &g2)?;
    l.q1_opt.step(&mut l.critics.q1, &grads1)?;
    l.q2_opt.step(&mut l.critics.q2, &grads2)?;
    Ok((critic_loss, mean_q))
}

fn squared_error(out: &Tensor2<f32>, y: &[f32]) -> (f32, Tensor2<f32>) {
    let b = y.len().max(1) as f32;
    let mut g = Tensor2::zeros(out.rows(), 1);
    let mut loss = 0.0f64;
    for (r, &t) in y.iter().enumerate() {
        let d = out.data()[r] - t;
        loss += (d * d) as f64;
        g.data_mut()[r] = 2.0 * d / b;
    }
    ((loss / b as f64) as f32, g)
}

/// Which critic drives the actor's gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ActorCritic {
    Q1,
    Avg,
    /// Per row, the critic with the smaller value.
    Min,
}

/// Gradient of `sum_r weight[r] * Q(s_r, a_r)` with respect to the actions,
/// together with the per-row `Q` used.
fn action_grad(
    critics: &CriticPair,
    critic_obs: &Tensor2<f32>,
    actions: &Tensor2<f32>,
    weight: &[f32],
    which: ActorCritic,
) -> Result<(Tensor2<f32>, Vec<f32>)> {
    let x = critics.input(critic_obs, actions)?;
    let obs_cols = critic_obs.cols();
    let (o1, tape1) = critics.q1.forward(&x)?;
    let v1 = critics.head.values(&o1);
    if which == ActorCritic::Q1 {
        let d1 = critics
            .q1
            .backward_input(tape1, &value_grad(&critics.head, &o1, weight))?;
        return Ok((d1.columns(obs_cols, d1.cols()), v1));
    }
    let (o2, tape2) = critics.q2.forward(&x)?;
    let v2 = critics.head.values(&o2);
    let n = weight.len();
    let (mut w1, mut w2, mut q) = (vec![0.0f32; n], vec![0.0f32; n], vec![0.0f32; n]);
    for r in 0..n {
        if which == ActorCritic::Avg {
            w1[r] = 0.5 * weight[r];
            w2[r] = 0.5 * weight[r];
            q[r] = 0.5 * (v1[r] + v2[r]);
        } else if v1[r] <= v2[r] {
            w1[r] = weight[r];
            q[r] = v1[r];
        } else {
            w2[r] = weight[r];
            q[r] = v2[r];
        }
    }
    let d1 = critics
        .q1
        .backward_input(tape1, &value_grad(&critics.head, &o1, &w1))?;
    let d2 = critics
        .q2
        .backward_input(tape2, &value_grad(&critics.head, &o2, &w2))?;
    let mut da = d1.columns(obs_cols, d1.cols());
    for (a, b) in da
        .data_mut()
        .iter_mut()
        .zip(d2.columns(obs_cols, d2.cols()).data())
    {
        *a += b;
    }
    Ok((da, q))
}

/// One TD3 update: critic step, then (every `policy_delay` calls) an actor
/// step and a Polyak update of all targets.
pub fn td3_update<R: Rng + ?Sized>(
    l: &mut Learner,
    batch: &TransitionBatch,
    s: &UpdateSettings,
    rng: &mut R,
) -> Result<UpdateStats> {
    let Actor::Deterministic(_) = l.actor else {
        return Err(Error::Config(
            "td3_update needs a deterministic actor".into(),
        ));
    };
    let target_actor = l
        .targets
        .actor
        .as_ref()
        .ok_or_else(|| Error::State("td3 learner has no target actor".into()))?;
    let mut next_actions = target_actor.act(&batch.next_obs)?;
    target_policy_smoothing(&mut next_actions, s.target_noise, s.target_noise_clip, rng)?;
    let (critic_loss, mean_q) = critic_step(l, batch, &next_actions, None, s)?;
    l.update_count += 1;

    let mut actor_loss = None;
    if l.update_count.is_multiple_of(s.policy_delay as u64) {
        let Actor::Deterministic(actor) = &mut l.actor else {
            unreachable!("checked above")
        };
        let (actions, tape) = actor.forward(&batch.obs)?;
        let b = batch.len();
        let weight = vec![-1.0 / b as f32; b];
        let which = match s.actor_q {
            ActorQ::Q1 => ActorCritic::Q1,
            ActorQ::Avg => ActorCritic::Avg,
        };
        let (da, q) = action_grad(&l.critics, &batch.critic_obs, &actions, &weight, which)?;
        let loss = -mean(&q);
        if !loss.is_finite() {
            return Err(numeric_err!("actor loss is not finite"));
        }
        let grads = actor.mlp.backward(tape, &da)?;
        l.actor_opt.step(&mut actor.mlp, &grads)?;
        actor_loss = Some(loss);

        let ta = l.targets.actor.as_mut().expect("checked above");
        polyak_update(&mut ta.mlp, &actor.mlp, s.tau)?;
        polyak_update(&mut l.targets.critics.q1, &l.critics.q1, s.tau)?;
        polyak_update(&mut l.targets.critics.q2, &l.critics.q2, s.tau)?;
    }
    Ok(UpdateStats {
        critic_loss,
        actor_loss,
        mean_q,
        alpha: None,
    })
}

/// Gradient of the temperature loss `-log_alpha * (log_prob + target_entropy)`
/// averaged over the batch, with respect to `log_alpha`.
pub fn temperature_grad(log_prob: &[f32], target_entropy: f32) -> f32 {
    -(mean(log_prob) + target_entropy)
}

/// One SAC update: entropy-regularised critic step, actor step, temperature
/// step and Polyak update of the target critics, all on every call.
pub fn sac_update<R: Rng + ?Sized>(
    l: &mut Learner,
    batch: &TransitionBatch,
    s: &UpdateSettings,
    rng: &mut R,
) -> Result<UpdateStats> {
    let Actor::Gaussian(actor) = &l.actor else {
        return Err(Error::Config("sac_update needs a Gaussian actor".into()));
    };
    let alpha = l.alpha();
    let next = actor.sample(&batch.next_obs, rng)?;
    let bonus: Vec<f32> = next.log_prob.iter().map(|&lp| -alpha * lp).collect();
    let next_actions = next.actions.clone();
    drop(next);
    let (critic_loss, mean_q) = critic_step(l, batch, &next_actions, Some(&bonus), s)?;
    l.update_count += 1;

    let Actor::Gaussian(actor) = &mut l.actor else {
        unreachable!("checked above")
    };
    let sample = actor.sample(&batch.obs, rng)?;
    let b = batch.len();
    let weight = vec![-1.0 / b as f32; b];
    let (da, q) = action_grad(
        &l.critics,
        &batch.critic_obs,
        &sample.actions,
        &weight,
        ActorCritic::Min,
    )?;
    let log_prob = sample.log_prob.clone();
    let actor_loss = log_prob
        .iter()
        .zip(&q)
        .map(|(&lp, &qv)| (alpha * lp - qv) as f64)
        .sum::<f64>() as f32
        / b as f32;
    if !actor_loss.is_finite() {
        return Err(numeric_err!("actor loss is not finite"));
    }
    let d_logp = vec![alpha / b as f32; b];
    let grads = actor.backward(sample, &da, &d_logp)?;
    l.actor_opt.step(&mut actor.mlp, &grads)?;

    if s.tune_alpha {
        let g = temperature_grad(&log_prob, s.target_entropy);
        let mut p = [l.log_alpha];
        l.alpha_opt.step(&mut p, &[g])?;
        l.log_alpha = p[0];
    }
    polyak_update(&mut l.targets.critics.q1, &l.critics.q1, s.tau)?;
    polyak_update(&mut l.targets.critics.q2, &l.critics.q2, s.tau)?;
    Ok(UpdateStats {
        critic_loss,
        actor_loss: Some(actor_loss),
        mean_q,
        alpha: Some(l.alpha()),
    })
}

/// Undiscounted episode-return statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalStats {
    pub return_mean: f64,
    /// Population standard deviation.
    pub return_std: f64,
    pub mean_len: f64,
}

/// Runs one noise-free episode in each of `episodes` fresh environments.
pub fn evaluate(
    policy: &dyn Policy,
    spec: &TaskSpec,
    episodes: usize,
    seed: u64,
) -> Result<EvalStats> {
    if episodes == 0 {
        return Err(Error::Config(
            "evaluation needs at least one episode".into(),
        ));
    }
    let mut env = VecEnv::reset_all(spec, episodes, seed ^ EVAL_SALT)?;
    let mut returns = vec![0.0f64; episodes];
    let mut lens = vec![0u32; episodes];
    let mut done = vec![false; episodes];
    while done.iter().any(|d| !d) {
        let actions = policy.act(env.obs())?;
        if actions.shape() != (episodes, spec.action_dim) {
            return Err(shape_err!(
                "policy returned {:?}, expected ({episodes}, {})",
                actions.shape(),
                spec.action_dim
            ));
        }
        let res = env.step(&actions)?;
        for i in 0..episodes {
            if done[i] {
                continue;
            }
            returns[i] += res.reward[i] as f64;
            lens[i] += 1;
            done[i] = res.done(i);
        }
    }
    let n = episodes as f64;
    let return_mean = returns.iter().sum::<f64>() / n;
    let var = returns
        .iter()
        .map(|r| (r - return_mean).powi(2))
        .sum::<f64>()
        / n;
    Ok(EvalStats {
        return_mean,
        return_std: var.sqrt(),
        mean_len: lens.iter().map(|&l| l as f64).sum::<f64>() / n,
    })
}

/// First evaluation that met the task's solved threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Solved {
    pub env_steps: u64,
    pub wall_seconds: f64,
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub learner: Learner,
    pub rows: Vec<TrainMetricsRow>,
    pub env_steps: u64,
    pub parallel_steps: u64,
    pub update_calls: u64,
    /// Env steps collected when the first update ran.
    pub first_update_at: Option<u64>,
    pub solved: Option<Solved>,
    pub wall_seconds: f64,
}

#[derive(Default)]
struct Running {
    critic: f64,
    critic_n: u64,
    actor: f64,
    actor_n: u64,
    q: f64,
}

impl Running {
    fn add(&mut self, u: &UpdateStats) {
        self.critic += u.critic_loss as f64;
        self.q += u.mean_q as f64;
        self.critic_n += 1;
        if let Some(a) = u.actor_loss {
            self.actor += a as f64;
            self.actor_n += 1;
        }
    }

    fn take(&mut self) -> (Option<f64>, Option<f64>, Option<f64>) {
        let avg = |s: f64, n: u64| (n > 0).then(|| s / n as f64);
        let out = (
            avg(self.critic, self.critic_n),
            avg(self.actor, self.actor_n),
            avg(self.q, self.critic_n),
        );
        *self = Running::default();
        out
    }
}

/// Trains from scratch, streaming one row per log point into `sink`.
pub fn train(cfg: &TrainConfig, sink: &mut dyn MetricsSink) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.deterministic {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .map_err(|e| Error::State(format!("cannot build a single-thread pool: {e}")))?;
        pool.install(|| train_inner(cfg, sink))
    } else {
        train_inner(cfg, sink)
    }
}

fn train_inner(cfg: &TrainConfig, sink: &mut dyn MetricsSink) -> Result<TrainOutcome> {
    let start = Instant::now();
    let spec = cfg.task_spec()?;
    let e = cfg.num_envs;
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ INIT_SALT);
    let mut learn_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ LEARN_SALT);
    let mut noise_rngs: Vec<ChaCha8Rng> = (0..e as u64)
        .map(|i| {
            let mut r = ChaCha8Rng::seed_from_u64(cfg.seed ^ NOISE_SALT);
            r.set_stream(i);
            r
        })
        .collect();
    let mut learner = Learner::new(cfg, &spec, &mut init_rng)?;
    let settings = UpdateSettings::from_config(cfg, spec.action_dim);

    let mut outcome = TrainOutcome {
        learner: learner.clone(),
        rows: Vec::new(),
        env_steps: 0,
        parallel_steps: 0,
        update_calls: 0,
        first_update_at: None,
        solved: None,
        wall_seconds: 0.0,
    };
    if cfg.total_env_steps == 0 {
        return Ok(outcome);
    }

    let mut env = VecEnv::reset_all(&spec, e, cfg.seed)?;
    let mut noise = NoiseSchedule::new(
        cfg.sigma_min,
        cfg.sigma_max,
        cfg.noise_resample,
        &mut noise_rngs,
    )?;
    let mut buffer = ReplayBuffer::new(
        cfg.buffer_n,
        e,
        spec.obs_dim,
        spec.critic_obs_dim,
        spec.action_dim,
    )?;
    let total_parallel = cfg.total_env_steps.div_ceil(e as u64);
    let warmup = cfg.warmup_env_steps();
    let mut running = Running::default();
    let mut collected = 0u64;
    let mut next_log = cfg.eval_every;

    for step in 1..=total_parallel {
        let obs = env.obs().clone();
        let critic_obs = env.critic_obs().clone();
        let in_warmup = collected < warmup;
        let actions = if in_warmup {
            uniform_actions(e, spec.action_dim, &mut noise_rngs)
        } else {
            behaviour_actions(&learner.actor, &obs, noise.sigmas(), &mut noise_rngs)?
        };
        let result = env.step(&actions)?;
        buffer.insert(&TransitionBatch::from_step(
            &obs,
            &critic_obs,
            &actions,
            &result,
        )?)?;
        for i in 0..e {
            if result.done(i) {
                noise.on_reset(i, &mut noise_rngs[i]);
            }
        }
        collected += e as u64;

        if !in_warmup {
            outcome.first_update_at.get_or_insert(collected);
            for _ in 0..cfg.utd {
                let batch = buffer.sample(cfg.batch_size, &mut learn_rng)?;
                let stats = match cfg.agent {
                    Agent::FastTd3 => td3_update(&mut learner, &batch, &settings, &mut learn_rng),
                    Agent::FastSac => sac_update(&mut learner, &batch, &settings, &mut learn_rng),
                }
                .map_err(|err| match err {
                    Error::Numeric(msg) => Error::Numeric(format!(
                        "at env step {collected} (update {}): {msg}",
                        learner.update_count + 1
                    )),
                    other => other,
                })?;
                running.add(&stats);
                outcome.update_calls += 1;
            }
        }

        let elapsed = start.elapsed().as_secs_f64();
        let out_of_time = cfg.max_wall_seconds.is_some_and(|m| elapsed >= m);
        let last = step == total_parallel || out_of_time;
        if collected >= next_log || last {
            while next_log <= collected {
                next_log += cfg.eval_every;
            }
            let stats = evaluate(&learner.actor, &spec, cfg.eval_episodes, cfg.seed)?;
            let (critic_loss, actor_loss, mean_q) = running.take();
            let row = TrainMetricsRow {
                env_steps: collected,
                wall_seconds: (!cfg.deterministic).then_some(elapsed),
                critic_loss,
                actor_loss,
                mean_q,
                eval_return_mean: stats.return_mean,
                eval_return_std: stats.return_std,
                eval_episode_len: stats.mean_len,
            };
            sink.record(&row)?;
            outcome.rows.push(row);
            if outcome.solved.is_none() && stats.return_mean >= spec.solved_threshold {
                outcome.solved = Some(Solved {
                    env_steps: collected,
                    wall_seconds: elapsed,
                });
                if cfg.stop_at_threshold {
                    outcome.parallel_steps = step;
                    break;
                }
            }
        }
        outcome.parallel_steps = step;
        if out_of_time {
            break;
        }
    }
    outcome.env_steps = collected;
    outcome.wall_seconds = start.elapsed().as_secs_f64();
    outcome.learner = learner;
    Ok(outcome)
}

fn uniform_actions(e: usize, action_dim: usize, rngs: &mut [ChaCha8Rng]) -> Tensor2<f32> {
    let mut a = Tensor2::zeros(e, action_dim);
    for (i, rng) in rngs.iter_mut().enumerate() {
        for v in a.row_mut(i) {
            *v = rng.random_range(-1.0..=1.0);
        }
    }
    a
}

/// Exploratory actions: Gaussian noise around the deterministic actor, or a
/// draw from the Gaussian actor, each row using its own env stream.
fn behaviour_actions(
    actor: &Actor,
    obs: &Tensor2<f32>,
    sigmas: &[f32],
    rngs: &mut [ChaCha8Rng],
) -> Result<Tensor2<f32>> {
    match actor {
        Actor::Deterministic(a) => {
            let mut actions = a.act(obs)?;
            apply_exploration_noise(&mut actions, sigmas, rngs)?;
            Ok(actions)
        }
        Actor::Gaussian(g) => {
            use rand_distr::{Distribution, StandardNormal};
            let (mean, log_std) = g.distribution(obs)?;
            let mut actions = mean;
            for (i, rng) in rngs.iter_mut().enumerate() {
                let ls = log_std.row(i).to_vec();
                for (v, l) in actions.row_mut(i).iter_mut().zip(ls) {
                    let eps: f32 = StandardNormal.sample(rng);
                    *v = (*v + l.exp() * eps).tanh();
                }
            }
            Ok(actions)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envsuite::TaskName;
    use crate::metrics::NullSink;
    use crate::replay::Transition;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            num_envs: 4,
            total_env_steps: 200,
            batch_size: 16,
            width_mult: 1.0 / 64.0,
            eval_every: 100,
            eval_episodes: 2,
            buffer_n: 64,
            deterministic: true,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_steps_returns_initial_nets() {
        let cfg = TrainConfig {
            total_env_steps: 0,
            ..tiny_config()
        };
        let out = train(&cfg, &mut NullSink).unwrap();
        assert!(out.rows.is_empty());
        assert_eq!(out.update_calls, 0);
        let spec = cfg.task_spec().unwrap();
        let fresh = Learner::new(
            &cfg,
            &spec,
            &mut ChaCha8Rng::seed_from_u64(cfg.seed ^ INIT_SALT),
        )
        .unwrap();
        assert_eq!(out.learner, fresh);
    }

    #[test]
    fn step_and_update_accounting() {
        // 200 / 4 = 50 parallel steps, 10 of them warmup.
        let cfg = tiny_config();
        let out = train(&cfg, &mut NullSink).unwrap();
        assert_eq!(out.parallel_steps, 50);
        assert_eq!(out.env_steps, 200);
        assert_eq!(out.update_calls, 40 * 2);
        assert_eq!(out.first_update_at, Some(44));
        assert_eq!(
            out.rows.iter().map(|r| r.env_steps).collect::<Vec<_>>(),
            vec![100, 200]
        );

        let cfg = TrainConfig {
            total_env_steps: 201,
            ..tiny_config()
        };
        let out = train(&cfg, &mut NullSink).unwrap();
        assert_eq!(out.parallel_steps, 51);
        assert_eq!(out.update_calls, 41 * 2);
        assert_eq!(out.rows.last().unwrap().env_steps, 204);
    }

    #[test]
    fn rows_before_first_update_have_no_losses() {
        let cfg = TrainConfig {
            total_env_steps: 40,
            eval_every: 20,
            ..tiny_config()
        };
        let out = train(&cfg, &mut NullSink).unwrap();
        assert_eq!(out.update_calls, 0);
        assert!(out
            .rows
            .iter()
            .all(|r| r.critic_loss.is_none() && r.actor_loss.is_none()));
    }

    #[test]
    fn evaluate_is_seeded() {
        let spec = TaskSpec::builtin(TaskName::Pendulum);
        let zero = crate::networks::FnPolicy(|o: &Tensor2<f32>| Tensor2::zeros(o.rows(), 1));
        let a = evaluate(&zero, &spec, 3, 9).unwrap();
        let b = evaluate(&zero, &spec, 3, 9).unwrap();
        assert_eq!(a, b);
        let one = evaluate(&zero, &spec, 1, 9).unwrap();
        assert_eq!(one.return_std, 0.0);
        assert_eq!(one.mean_len, 200.0);
    }

    #[test]
    fn checkpoint_tensors_round_trip() {
        for agent in [Agent::FastTd3, Agent::FastSac] {
            let cfg = TrainConfig {
                agent,
                total_env_steps: 120,
                ..tiny_config()
            };
            let out = train(&cfg, &mut NullSink).unwrap();
            let tensors = out.learner.to_tensors();
            let back = Learner::from_tensors(&tensors).unwrap();
            assert_eq!(back.to_tensors(), tensors);
            assert_eq!(back.critics, out.learner.critics);
            assert_eq!(back.actor, out.learner.actor);
        }
    }

    fn random_batch(spec: &TaskSpec, rows: usize, mask: f32, seed: u64) -> TransitionBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw =
            |n: usize| -> Vec<f32> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let items: Vec<Transition> = (0..rows)
            .map(|_| Transition {
                obs: draw(spec.obs_dim),
                critic_obs: draw(spec.critic_obs_dim),
                action: draw(spec.action_dim),
                reward: draw(1)[0] * 3.0,
                next_obs: draw(spec.obs_dim),
                next_critic_obs: draw(spec.critic_obs_dim),
                bootstrap_mask: mask,
            })
            .collect();
        TransitionBatch::from_transitions(&items).unwrap()
    }

    fn learner(cfg: &TrainConfig) -> (Learner, TaskSpec) {
        let spec = cfg.task_spec().unwrap();
        let l = Learner::new(cfg, &spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        (l, spec)
    }

    #[test]
    fn actor_and_targets_move_every_policy_delay_updates() {
        let cfg = TrainConfig {
            policy_delay: 3,
            width_mult: 0.125,
            ..tiny_config()
        };
        let (mut l, spec) = learner(&cfg);
        let s = UpdateSettings::from_config(&cfg, spec.action_dim);
        let batch = random_batch(&spec, 16, 1.0, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for k in 1..=9u64 {
            let actor_before = l.actor.clone();
            let targets_before = l.targets.clone();
            let stats = td3_update(&mut l, &batch, &s, &mut rng).unwrap();
            let due = k % 3 == 0;
            assert_eq!(stats.actor_loss.is_some(), due, "update {k}");
            assert_eq!(l.actor != actor_before, due, "update {k}");
            assert_eq!(l.targets != targets_before, due, "update {k}");
        }
        assert_eq!(l.update_count, 9);
    }

    #[test]
    fn terminal_batches_ignore_the_cdq_mode() {
        for distributional in [true, false] {
            let base = TrainConfig {
                distributional,
                ..tiny_config()
            };
            let (l0, spec) = learner(&base);
            let batch = random_batch(&spec, 16, 0.0, 3);
            let mut losses = Vec::new();
            for cdq in [CdqMode::Min, CdqMode::Avg] {
                let cfg = TrainConfig {
                    cdq,
                    ..base.clone()
                };
                let s = UpdateSettings::from_config(&cfg, spec.action_dim);
                let mut l = l0.clone();
                let stats =
                    td3_update(&mut l, &batch, &s, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
                losses.push((stats.critic_loss, l.critics));
            }
            // the two modes agree up to rounding of the combined mass
            let (a, b) = (&losses[0], &losses[1]);
            assert!(
                (a.0 - b.0).abs() <= 1e-5 * a.0.abs(),
                "distributional = {distributional}"
            );
            for (x, y) in [(&a.1.q1, &b.1.q1), (&a.1.q2, &b.1.q2)] {
                for (lx, ly) in x.layers().iter().zip(y.layers()) {
                    for (p, q) in lx
                        .weight
                        .data()
                        .iter()
                        .zip(ly.weight.data())
                        .chain(lx.bias.iter().zip(&ly.bias))
                    {
                        assert!((p - q).abs() <= 1e-5, "distributional = {distributional}");
                    }
                }
            }
        }
    }

    #[test]
    fn temperature_gradient_vanishes_at_target_entropy() {
        assert_eq!(temperature_grad(&[1.5, 2.5], -2.0), 0.0);
        // entropy below target (log-probs too high): alpha should grow
        assert!(temperature_grad(&[3.0, 3.0], -2.0) < 0.0);
        assert!(temperature_grad(&[0.0, 1.0], -2.0) > 0.0);
    }

    #[test]
    fn sac_entropy_bonus_needs_bootstrapping_and_temperature() {
        let cfg = TrainConfig {
            agent: Agent::FastSac,
            alpha_lr: 0.0,
            ..tiny_config()
        };
        let (l0, spec) = learner(&cfg);
        let s = UpdateSettings::from_config(&cfg, spec.action_dim);
        let critic_loss = |log_alpha: f32, mask: f32| {
            let mut l = l0.clone();
            l.log_alpha = log_alpha;
            let batch = random_batch(&spec, 16, mask, 6);
            sac_update(&mut l, &batch, &s, &mut ChaCha8Rng::seed_from_u64(7))
                .unwrap()
                .critic_loss
        };
        // terminal rows carry no next-state term at all
        assert_eq!(critic_loss(f32::NEG_INFINITY, 0.0), critic_loss(3.0, 0.0));
        assert_ne!(critic_loss(f32::NEG_INFINITY, 1.0), critic_loss(3.0, 1.0));
    }

    #[test]
    fn frozen_zero_temperature_stays_zero() {
        let cfg = TrainConfig {
            agent: Agent::FastSac,
            alpha_init: 0.0,
            alpha_lr: 0.0,
            ..tiny_config()
        };
        let (mut l, spec) = learner(&cfg);
        assert_eq!(l.alpha(), 0.0);
        let s = UpdateSettings::from_config(&cfg, spec.action_dim);
        let batch = random_batch(&spec, 16, 1.0, 8);
        let stats = sac_update(&mut l, &batch, &s, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(stats.alpha, Some(0.0));
        assert!(stats.critic_loss.is_finite());
    }
}
