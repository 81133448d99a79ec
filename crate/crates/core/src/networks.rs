//! Actor and twin-critic assemblies, their target copies and soft updates.
//!
//! Networks always act in `[-1, 1]`; scaling to task units is the
//! environment's job. Critics read the privileged observation concatenated
//! with the action.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Activation, GradTape, MlpGrads, MlpParams, Tensor2};
use crate::distributional::{expected_value, softmax_rows, AtomGrid};
use crate::error::{config_err, shape_err, Result};

pub const ACTOR_HIDDEN: [usize; 3] = [512, 256, 128];
pub const CRITIC_HIDDEN: [usize; 3] = [1024, 512, 256];

/// Bounds applied to the Gaussian actor's log standard deviation.
pub const LOG_STD_MIN: f32 = -5.0;
pub const LOG_STD_MAX: f32 = 2.0;

const OUTPUT_INIT_SCALE: f32 = 0.1;
const TANH_LOG_EPS: f32 = 1e-6;

/// Hidden layer widths of the actor and of each critic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSizes {
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
}

impl Default for NetworkSizes {
    fn default() -> Self {
        Self {
            actor_hidden: ACTOR_HIDDEN.to_vec(),
            critic_hidden: CRITIC_HIDDEN.to_vec(),
        }
    }
}

impl NetworkSizes {
    /// Default widths times `width_mult`, rounded, at least 1 unit.
    pub fn scaled(width_mult: f64) -> Result<Self> {
        if !(width_mult > 0.0 && width_mult.is_finite()) {
            return Err(config_err!(
                "width multiplier must be positive, got {width_mult}"
            ));
        }
        let scale = |v: &[usize]| {
            v.iter()
                .map(|&w| ((w as f64 * width_mult).round() as usize).max(1))
                .collect()
        };
        Ok(Self {
            actor_hidden: scale(&ACTOR_HIDDEN),
            critic_hidden: scale(&CRITIC_HIDDEN),
        })
    }
}

fn layer_sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut s = Vec::with_capacity(hidden.len() + 2);
    s.push(input);
    s.extend_from_slice(hidden);
    s.push(output);
    s
}

/// Anything that maps a batch of actor observations to actions in `[-1, 1]`.
pub trait Policy {
    fn act(&self, obs: &Tensor2<f32>) -> Result<Tensor2<f32>>;
}

/// Adapts a closure into a [`Policy`]; used for scripted controllers.
pub struct FnPolicy<F>(pub F);

impl<F> Policy for FnPolicy<F>
where
    F: Fn(&Tensor2<f32>) -> Tensor2<f32>,
{
    fn act(&self, obs: &Tensor2<f32>) -> Result<Tensor2<f32>> {
        Ok((self.0)(obs))
    }
}

/// Deterministic tanh policy.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorNet {
    pub mlp: MlpParams<f32>,
}

impl ActorNet {
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let mut mlp = MlpParams::init(
            &layer_sizes(obs_dim, hidden, action_dim),
            Activation::Relu,
            Activation::Tanh,
            rng,
        )?;
        mlp.scale_output_layer(OUTPUT_INIT_SCALE);
        Ok(Self { mlp })
    }

    pub fn from_mlp(mlp: MlpParams<f32>) -> Result<Self> {
        if mlp.output_activation() != Activation::Tanh {
            return Err(config_err!(
                "a deterministic actor needs a tanh output layer"
            ));
        }
        Ok(Self { mlp })
    }

    pub fn obs_dim(&self) -> usize {
        self.mlp.in_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.mlp.out_dim()
    }

    pub fn forward(&self, obs: &Tensor2<f32>) -> Result<(Tensor2<f32>, GradTape<f32>)> {
        self.mlp.forward(obs)
    }
}

impl Policy for ActorNet {
    fn act(&self, obs: &Tensor2<f32>) -> Result<Tensor2<f32>> {
        self.mlp.predict(obs)
    }
}

/// Tanh-squashed diagonal Gaussian policy. The network emits
/// `[mean | log_std]`, each `action_dim` wide.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianActor {
    pub mlp: MlpParams<f32>,
}

/// Everything the backward pass of [`GaussianActor::sample`] needs.
#[derive(Debug)]
pub struct GaussianSample {
    pub actions: Tensor2<f32>,
    /// Log-density of `actions` per row, with the tanh correction.
    pub log_prob: Vec<f32>,
    tape: GradTape<f32>,
    eps: Tensor2<f32>,
    std: Tensor2<f32>,
    log_std_active: Vec<bool>,
}

impl GaussianActor {
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let mut mlp = MlpParams::init(
            &layer_sizes(obs_dim, hidden, 2 * action_dim),
            Activation::Relu,
            Activation::Identity,
            rng,
        )?;
        mlp.scale_output_layer(OUTPUT_INIT_SCALE);
        Ok(Self { mlp })
    }

    pub fn from_mlp(mlp: MlpParams<f32>) -> Result<Self> {
        if mlp.output_activation() != Activation::Identity || !mlp.out_dim().is_multiple_of(2) {
            return Err(config_err!(
                "a Gaussian actor needs a linear output of even width, got {}",
                mlp.out_dim()
            ));
        }
        Ok(Self { mlp })
    }

    pub fn obs_dim(&self) -> usize {
        self.mlp.in_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.mlp.out_dim() / 2
    }

    /// `(mean, clamped log_std)`.
    pub fn distribution(&self, obs: &Tensor2<f32>) -> Result<(Tensor2<f32>, Tensor2<f32>)> {
        let out = self.mlp.predict(obs)?;
        let a = self.action_dim();
        let mut log_std = out.columns(a, 2 * a);
        log_std
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = clamp_log_std(*v));
        Ok((out.columns(0, a), log_std))
    }

    /// Reparameterised draw `tanh(mean + std * eps)`.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        obs: &Tensor2<f32>,
        rng: &mut R,
    ) -> Result<GaussianSample> {
        let (out, tape) = self.mlp.forward(obs)?;
        let eps = Tensor2::new(
            out.rows(),
            self.action_dim(),
            (0..out.rows() * self.action_dim())
                .map(|_| StandardNormal.sample(rng))
                .collect(),
        )?;
        self.sample_with_noise(out, tape, eps)
    }

    fn sample_with_noise(
        &self,
        out: Tensor2<f32>,
        tape: GradTape<f32>,
        eps: Tensor2<f32>,
    ) -> Result<GaussianSample> {
        let a_dim = self.action_dim();
        let batch = out.rows();
        let mut actions = Tensor2::zeros(batch, a_dim);
        let mut std = Tensor2::zeros(batch, a_dim);
        let mut active = vec![true; batch * a_dim];
        let mut log_prob = vec![0.0f32; batch];
        let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        for r in 0..batch {
            let row = out.row(r);
            let mut lp = 0.0f64;
            for k in 0..a_dim {
                let raw = row[a_dim + k];
                let ls = clamp_log_std(raw);
                active[r * a_dim + k] = raw > LOG_STD_MIN && raw < LOG_STD_MAX;
                let s = ls.exp();
                let e = eps.get(r, k);
                let a = (row[k] + s * e).tanh();
                actions.set(r, k, a);
                std.set(r, k, s);
                lp += -0.5 * (e as f64).powi(2)
                    - ls as f64
                    - half_ln_2pi
                    - (1.0 - (a as f64).powi(2) + TANH_LOG_EPS as f64).ln();
            }
            log_prob[r] = lp as f32;
        }
        Ok(GaussianSample {
            actions,
            log_prob,
            tape,
            eps,
            std,
            log_std_active: active,
        })
    }

    /// Parameter gradients of a loss with the given derivatives with
    /// respect to the sampled actions and to each row's log-probability.
    pub fn backward(
        &self,
        sample: GaussianSample,
        d_actions: &Tensor2<f32>,
        d_log_prob: &[f32],
    ) -> Result<MlpGrads<f32>> {
        let a_dim = self.action_dim();
        let batch = sample.actions.rows();
        if d_actions.shape() != sample.actions.shape() || d_log_prob.len() != batch {
            return Err(shape_err!(
                "gradient shapes {:?} / {} do not match sample {:?}",
                d_actions.shape(),
                d_log_prob.len(),
                sample.actions.shape()
            ));
        }
        let mut d_out = Tensor2::zeros(batch, 2 * a_dim);
        for r in 0..batch {
            let glp = d_log_prob[r];
            for k in 0..a_dim {
                let a = sample.actions.get(r, k);
                let one_m = 1.0 - a * a;
                // d(log_prob)/du from the tanh correction term.
                let corr = 2.0 * a * one_m / (one_m + TANH_LOG_EPS);
                let du = d_actions.get(r, k) * one_m + glp * corr;
                let d_ls = if sample.log_std_active[r * a_dim + k] {
                    du * sample.std.get(r, k) * sample.eps.get(r, k) - glp
                } else {
                    0.0
                };
                d_out.set(r, k, du);
                d_out.set(r, a_dim + k, d_ls);
            }
        }
        self.mlp.backward(sample.tape, &d_out)
    }
}

impl Policy for GaussianActor {
    /// The squashed mean action.
    fn act(&self, obs: &Tensor2<f32>) -> Result<Tensor2<f32>> {
        let (mut mean, _) = self.distribution(obs)?;
        mean.data_mut().iter_mut().for_each(|m| *m = m.tanh());
        Ok(mean)
    }
}

pub fn clamp_log_std(v: f32) -> f32 {
    v.clamp(LOG_STD_MIN, LOG_STD_MAX)
}

/// Either actor kind, as stored in checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub enum Actor {
    Deterministic(ActorNet),
    Gaussian(GaussianActor),
}

impl Actor {
    pub fn mlp(&self) -> &MlpParams<f32> {
        match self {
            Actor::Deterministic(a) => &a.mlp,
            Actor::Gaussian(a) => &a.mlp,
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.mlp().in_dim()
    }

    pub fn action_dim(&self) -> usize {
        match self {
            Actor::Deterministic(a) => a.action_dim(),
            Actor::Gaussian(a) => a.action_dim(),
        }
    }
}

impl Policy for Actor {
    fn act(&self, obs: &Tensor2<f32>) -> Result<Tensor2<f32>> {
        match self {
            Actor::Deterministic(a) => a.act(obs),
            Actor::Gaussian(a) => a.act(obs),
        }
    }
}

/// What a critic outputs per row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CriticHead {
    /// Logits over the atoms of the grid.
    Categorical(AtomGrid),
    /// A single value trained with squared error.
    Scalar,
}

impl CriticHead {
    pub fn out_dim(&self) -> usize {
        match self {
            CriticHead::Categorical(g) => g.num_atoms(),
            CriticHead::Scalar => 1,
        }
    }

    /// Expected value per row of a critic output.
    pub fn values(&self, out: &Tensor2<f32>) -> Vec<f32> {
        match self {
            CriticHead::Categorical(g) => expected_value(g, &softmax_rows(out)),
            CriticHead::Scalar => out.data().to_vec(),
        }
    }
}

/// Twin critics sharing one head type and input layout.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticPair {
    pub q1: MlpParams<f32>,
    pub q2: MlpParams<f32>,
    pub head: CriticHead,
}

impl CriticPair {
    pub fn new<R: Rng + ?Sized>(
        critic_obs_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        head: CriticHead,
        rng: &mut R,
    ) -> Result<Self> {
        let sizes = layer_sizes(critic_obs_dim + action_dim, hidden, head.out_dim());
        let q1 = MlpParams::init(&sizes, Activation::Relu, Activation::Identity, rng)?;
        let q2 = MlpParams::init(&sizes, Activation::Relu, Activation::Identity, rng)?;
        Self::from_parts(q1, q2, head)
    }

    pub fn from_parts(q1: MlpParams<f32>, q2: MlpParams<f32>, head: CriticHead) -> Result<Self> {
        if q1.sizes() != q2.sizes() {
            return Err(shape_err!(
                "twin critics differ: {:?} vs {:?}",
                q1.sizes(),
                q2.sizes()
            ));
        }
        if q1.out_dim() != head.out_dim() {
            return Err(shape_err!(
                "critic output width {} does not fit a head of width {}",
                q1.out_dim(),
                head.out_dim()
            ));
        }
        Ok(Self { q1, q2, head })
    }

    pub fn input_dim(&self) -> usize {
        self.q1.in_dim()
    }

    /// `[critic_obs | actions]`.
    pub fn input(&self, critic_obs: &Tensor2<f32>, actions: &Tensor2<f32>) -> Result<Tensor2<f32>> {
        let x = critic_obs.hcat(actions)?;
        if x.cols() != self.input_dim() {
            return Err(shape_err!(
                "critic input has {} columns ({} obs + {} action), critics expect {}",
                x.cols(),
                critic_obs.cols(),
                actions.cols(),
                self.input_dim()
            ));
        }
        Ok(x)
    }

    /// Raw outputs of both critics.
    pub fn forward(
        &self,
        critic_obs: &Tensor2<f32>,
        actions: &Tensor2<f32>,
    ) -> Result<(Tensor2<f32>, Tensor2<f32>)> {
        let x = self.input(critic_obs, actions)?;
        Ok((self.q1.predict(&x)?, self.q2.predict(&x)?))
    }
}

/// Target copies. The Gaussian agent keeps no target actor.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSet {
    pub actor: Option<ActorNet>,
    pub critics: CriticPair,
}

/// `target <- (1 - tau) * target + tau * online`, element-wise.
pub fn polyak_update(target: &mut MlpParams<f32>, online: &MlpParams<f32>, tau: f32) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(config_err!("tau must lie in [0, 1], got {tau}"));
    }
    if target.sizes() != online.sizes() {
        return Err(shape_err!(
            "polyak shapes differ: {:?} vs {:?}",
            target.sizes(),
            online.sizes()
        ));
    }
    let keep = 1.0 - tau;
    for (t, o) in target.layers_mut().iter_mut().zip(online.layers()) {
        for (tw, &ow) in t.weight.data_mut().iter_mut().zip(o.weight.data()) {
            *tw = keep * *tw + tau * ow;
        }
        for (tb, &ob) in t.bias.iter_mut().zip(&o.bias) {
            *tb = keep * *tb + tau * ob;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Dense;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    #[test]
    fn scaled_sizes() {
        let s = NetworkSizes::scaled(0.25).unwrap();
        assert_eq!(s.actor_hidden, vec![128, 64, 32]);
        assert_eq!(s.critic_hidden, vec![256, 128, 64]);
        assert_eq!(NetworkSizes::scaled(1.0).unwrap(), NetworkSizes::default());
        assert!(NetworkSizes::scaled(0.0).is_err());
    }

    #[test]
    fn zero_final_layer_gives_zero_actions() {
        let mut actor = ActorNet::new(4, 2, &[8, 8], &mut rng()).unwrap();
        actor.mlp.scale_output_layer(0.0);
        let obs = Tensor2::filled(3, 4, 0.7);
        assert!(actor.act(&obs).unwrap().data().iter().all(|&a| a == 0.0));
    }

    #[test]
    fn actor_saturates_on_huge_inputs() {
        let actor = ActorNet::new(3, 2, &[16, 16], &mut rng()).unwrap();
        let obs = Tensor2::from_rows(&[[1e6f32, -1e6, 1e6], [-1e6, 1e6, -1e6]]).unwrap();
        let a = actor.act(&obs).unwrap();
        assert!(a.data().iter().all(|v| v.is_finite() && v.abs() <= 1.0));
    }

    #[test]
    fn tiny_actor_matches_hand_evaluation() {
        // 1 -> 1 -> 1: h = relu(2 * 0.5 + 0.5) = 1.5; a = tanh(-0.4 * 1.5 + 0.1) = tanh(-0.5)
        let mlp = MlpParams::new(
            vec![
                Dense {
                    weight: Tensor2::filled(1, 1, 2.0),
                    bias: vec![0.5],
                },
                Dense {
                    weight: Tensor2::filled(1, 1, -0.4),
                    bias: vec![0.1],
                },
            ],
            Activation::Relu,
            Activation::Tanh,
        )
        .unwrap();
        let actor = ActorNet::from_mlp(mlp).unwrap();
        let a = actor.act(&Tensor2::filled(1, 1, 0.5)).unwrap();
        assert!((a.get(0, 0) - (-0.5f32).tanh()).abs() < 1e-7);
    }

    #[test]
    fn identical_critics_agree() {
        let mut pair = CriticPair::new(
            3,
            1,
            &[8],
            CriticHead::Categorical(AtomGrid::new(-1.0, 1.0, 5).unwrap()),
            &mut rng(),
        )
        .unwrap();
        pair.q2 = pair.q1.clone();
        let (l1, l2) = pair
            .forward(&Tensor2::filled(2, 3, 0.3), &Tensor2::filled(2, 1, -0.2))
            .unwrap();
        assert_eq!(l1, l2);
    }

    #[test]
    fn zero_critic_predicts_grid_midpoint() {
        let grid = AtomGrid::new(-10.0, 4.0, 11).unwrap();
        let mut pair =
            CriticPair::new(2, 1, &[4], CriticHead::Categorical(grid), &mut rng()).unwrap();
        for l in pair.q1.layers_mut() {
            l.weight.data_mut().fill(0.0);
            l.bias.fill(0.0);
        }
        let (l1, _) = pair
            .forward(&Tensor2::filled(2, 2, 1.0), &Tensor2::filled(2, 1, 0.5))
            .unwrap();
        for v in pair.head.values(&l1) {
            assert!((v - (-3.0)).abs() < 1e-5);
        }
    }

    #[test]
    fn critic_rejects_wrong_input_width() {
        let pair = CriticPair::new(3, 1, &[4], CriticHead::Scalar, &mut rng()).unwrap();
        assert!(pair
            .forward(&Tensor2::filled(2, 2, 0.0), &Tensor2::filled(2, 1, 0.0))
            .is_err());
    }

    #[test]
    fn polyak_endpoints_and_scalar_case() {
        let mut r = rng();
        let online =
            MlpParams::<f32>::init(&[2, 3, 1], Activation::Relu, Activation::Identity, &mut r)
                .unwrap();
        let mut target =
            MlpParams::<f32>::init(&[2, 3, 1], Activation::Relu, Activation::Identity, &mut r)
                .unwrap();
        let before = target.clone();
        polyak_update(&mut target, &online, 0.0).unwrap();
        assert_eq!(target, before);
        polyak_update(&mut target, &online, 1.0).unwrap();
        assert_eq!(target, online);

        let one = MlpParams::new(
            vec![Dense {
                weight: Tensor2::filled(1, 1, 1.0f32),
                bias: vec![1.0],
            }],
            Activation::Relu,
            Activation::Identity,
        )
        .unwrap();
        let mut zero = one.clone();
        zero.scale_output_layer(0.0);
        polyak_update(&mut zero, &one, 0.005).unwrap();
        assert_eq!(zero.layers()[0].bias[0], 0.005);
        assert!(polyak_update(&mut zero, &one, 1.5).is_err());
    }

    #[test]
    fn log_std_clamp() {
        assert_eq!(clamp_log_std(-9.0), LOG_STD_MIN);
        assert_eq!(clamp_log_std(3.0), LOG_STD_MAX);
        assert_eq!(clamp_log_std(0.5), 0.5);
    }

    #[test]
    fn gaussian_log_prob_matches_closed_form() {
        // One action dim, mean 0.3, log_std -1, eps 0.7:
        // u = 0.3 + e^-1 * 0.7, logp = N(eps) density - log_std - ln(1 - tanh(u)^2 + 1e-6)
        let mlp = MlpParams::new(
            vec![Dense {
                weight: Tensor2::zeros(2, 1),
                bias: vec![0.3, -1.0],
            }],
            Activation::Relu,
            Activation::Identity,
        )
        .unwrap();
        let actor = GaussianActor::from_mlp(mlp).unwrap();
        let obs = Tensor2::zeros(1, 1);
        let (out, tape) = actor.mlp.forward(&obs).unwrap();
        let s = actor
            .sample_with_noise(out, tape, Tensor2::filled(1, 1, 0.7))
            .unwrap();
        let u = 0.3f64 + (-1.0f64).exp() * 0.7;
        let expect = -0.5 * 0.49
            - (-1.0)
            - 0.5 * (2.0 * std::f64::consts::PI).ln()
            - (1.0 - u.tanh().powi(2) + 1e-6).ln();
        assert!((s.log_prob[0] as f64 - expect).abs() < 1e-5);
        assert!((s.actions.get(0, 0) as f64 - u.tanh()).abs() < 1e-6);
    }

    #[test]
    fn gaussian_backward_matches_finite_differences() {
        // Loss = sum(c * a) + sum(k * logp) with fixed eps, differentiated in f64
        // by central differences over the output-layer bias.
        let mut r = rng();
        let mut actor = GaussianActor::new(3, 2, &[6], &mut r).unwrap();
        let obs = Tensor2::from_rows(&[[0.2f32, -0.4, 0.9], [0.5, 0.1, -0.3]]).unwrap();
        let eps = Tensor2::from_rows(&[[0.3f32, -1.1], [0.8, 0.2]]).unwrap();
        let c = Tensor2::from_rows(&[[0.7f32, -0.2], [0.4, 0.9]]).unwrap();
        let k = [0.3f32, -0.6];
        let loss = |a: &GaussianActor| -> f64 {
            let (out, tape) = a.mlp.forward(&obs).unwrap();
            let s = a.sample_with_noise(out, tape, eps.clone()).unwrap();
            let mut l = 0.0f64;
            for i in 0..2 {
                for j in 0..2 {
                    l += (c.get(i, j) * s.actions.get(i, j)) as f64;
                }
                l += (k[i] * s.log_prob[i]) as f64;
            }
            l
        };
        let (out, tape) = actor.mlp.forward(&obs).unwrap();
        let s = actor.sample_with_noise(out, tape, eps.clone()).unwrap();
        let grads = actor.backward(s, &c, &k).unwrap();
        let last = actor.mlp.layers().len() - 1;
        for b in 0..4 {
            let orig = actor.mlp.layers()[last].bias[b];
            let h = 1e-2f32;
            actor.mlp.layers_mut()[last].bias[b] = orig + h;
            let p = loss(&actor);
            actor.mlp.layers_mut()[last].bias[b] = orig - h;
            let m = loss(&actor);
            actor.mlp.layers_mut()[last].bias[b] = orig;
            let numeric = (p - m) / (2.0 * h as f64);
            let analytic = grads.layers[last].bias[b] as f64;
            assert!(
                (numeric - analytic).abs() < 2e-3 * (1.0 + analytic.abs()),
                "bias {b}: {analytic} vs {numeric}"
            );
        }
    }

    #[test]
    fn gaussian_mean_action_is_bounded() {
        let actor = GaussianActor::new(4, 3, &[8], &mut rng()).unwrap();
        let a = actor.act(&Tensor2::filled(5, 4, 100.0)).unwrap();
        assert_eq!(a.shape(), (5, 3));
        assert!(a.data().iter().all(|v| v.abs() <= 1.0));
    }
}
