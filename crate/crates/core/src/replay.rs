//! Replay storage with one FIFO ring of `N` slots per parallel environment.

use rand::Rng;

use crate::autodiff::Tensor2;
use crate::envsuite::StepResult;
use crate::error::{shape_err, Error, Result};

/// One stored step. `next_obs` is the true successor: on auto-reset steps it
/// is the captured final observation, never the fresh post-reset one.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Vec<f32>,
    pub critic_obs: Vec<f32>,
    pub action: Vec<f32>,
    pub reward: f32,
    pub next_obs: Vec<f32>,
    pub next_critic_obs: Vec<f32>,
    /// 0 iff the step terminated; truncated steps keep 1.
    pub bootstrap_mask: f32,
}

/// Row-aligned batch of transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionBatch {
    pub obs: Tensor2<f32>,
    pub critic_obs: Tensor2<f32>,
    pub action: Tensor2<f32>,
    pub reward: Vec<f32>,
    pub next_obs: Tensor2<f32>,
    pub next_critic_obs: Tensor2<f32>,
    pub bootstrap_mask: Vec<f32>,
}

impl TransitionBatch {
    pub fn len(&self) -> usize {
        self.reward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reward.is_empty()
    }

    pub fn row(&self, i: usize) -> Transition {
        Transition {
            obs: self.obs.row(i).to_vec(),
            critic_obs: self.critic_obs.row(i).to_vec(),
            action: self.action.row(i).to_vec(),
            reward: self.reward[i],
            next_obs: self.next_obs.row(i).to_vec(),
            next_critic_obs: self.next_critic_obs.row(i).to_vec(),
            bootstrap_mask: self.bootstrap_mask[i],
        }
    }

    pub fn from_transitions(items: &[Transition]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| shape_err!("cannot build a batch from zero transitions"))?;
        let mut b = Self::with_dims(
            items.len(),
            first.obs.len(),
            first.critic_obs.len(),
            first.action.len(),
        );
        for (i, t) in items.iter().enumerate() {
            if t.obs.len() != first.obs.len()
                || t.critic_obs.len() != first.critic_obs.len()
                || t.action.len() != first.action.len()
                || t.next_obs.len() != first.obs.len()
                || t.next_critic_obs.len() != first.critic_obs.len()
            {
                return Err(shape_err!(
                    "transition {i} has dimensions unlike transition 0"
                ));
            }
            b.obs.row_mut(i).copy_from_slice(&t.obs);
            b.critic_obs.row_mut(i).copy_from_slice(&t.critic_obs);
            b.action.row_mut(i).copy_from_slice(&t.action);
            b.reward[i] = t.reward;
            b.next_obs.row_mut(i).copy_from_slice(&t.next_obs);
            b.next_critic_obs
                .row_mut(i)
                .copy_from_slice(&t.next_critic_obs);
            b.bootstrap_mask[i] = t.bootstrap_mask;
        }
        Ok(b)
    }

    /// Transitions of one parallel step: `obs`/`critic_obs` are the
    /// observations the actions were chosen from.
    pub fn from_step(
        obs: &Tensor2<f32>,
        critic_obs: &Tensor2<f32>,
        actions: &Tensor2<f32>,
        step: &StepResult,
    ) -> Result<Self> {
        let (next_obs, next_critic_obs) = step.successor_obs();
        let batch = Self {
            obs: obs.clone(),
            critic_obs: critic_obs.clone(),
            action: actions.clone(),
            reward: step.reward.clone(),
            next_obs,
            next_critic_obs,
            bootstrap_mask: step.bootstrap_mask(),
        };
        batch.check()?;
        Ok(batch)
    }

    fn with_dims(len: usize, obs_dim: usize, critic_obs_dim: usize, action_dim: usize) -> Self {
        Self {
            obs: Tensor2::zeros(len, obs_dim),
            critic_obs: Tensor2::zeros(len, critic_obs_dim),
            action: Tensor2::zeros(len, action_dim),
            reward: vec![0.0; len],
            next_obs: Tensor2::zeros(len, obs_dim),
            next_critic_obs: Tensor2::zeros(len, critic_obs_dim),
            bootstrap_mask: vec![0.0; len],
        }
    }

    fn check(&self) -> Result<()> {
        let n = self.len();
        let rows = [
            self.obs.rows(),
            self.critic_obs.rows(),
            self.action.rows(),
            self.next_obs.rows(),
            self.next_critic_obs.rows(),
            self.bootstrap_mask.len(),
        ];
        if rows.iter().any(|&r| r != n)
            || self.obs.cols() != self.next_obs.cols()
            || self.critic_obs.cols() != self.next_critic_obs.cols()
        {
            return Err(shape_err!(
                "batch columns are not row-aligned: {rows:?} vs {n}"
            ));
        }
        Ok(())
    }
}

/// `num_envs` rings of `per_env_capacity` slots in columnar `f32` storage.
///
/// All rings advance in lockstep, so a single cursor and fill count serve
/// every environment. Slot `(env, k)` lives at flat index `env * N + k`.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    per_env_capacity: usize,
    num_envs: usize,
    obs_dim: usize,
    critic_obs_dim: usize,
    action_dim: usize,
    cursor: usize,
    fill: usize,
    inserted: u64,
    obs: Vec<f32>,
    critic_obs: Vec<f32>,
    action: Vec<f32>,
    reward: Vec<f32>,
    next_obs: Vec<f32>,
    next_critic_obs: Vec<f32>,
    mask: Vec<f32>,
}

impl ReplayBuffer {
    pub fn new(
        per_env_capacity: usize,
        num_envs: usize,
        obs_dim: usize,
        critic_obs_dim: usize,
        action_dim: usize,
    ) -> Result<Self> {
        if per_env_capacity == 0 || num_envs == 0 {
            return Err(Error::Config(format!(
                "replay buffer needs N >= 1 and num_envs >= 1, got N={per_env_capacity}, num_envs={num_envs}"
            )));
        }
        let slots = per_env_capacity * num_envs;
        Ok(Self {
            per_env_capacity,
            num_envs,
            obs_dim,
            critic_obs_dim,
            action_dim,
            cursor: 0,
            fill: 0,
            inserted: 0,
            obs: vec![0.0; slots * obs_dim],
            critic_obs: vec![0.0; slots * critic_obs_dim],
            action: vec![0.0; slots * action_dim],
            reward: vec![0.0; slots],
            next_obs: vec![0.0; slots * obs_dim],
            next_critic_obs: vec![0.0; slots * critic_obs_dim],
            mask: vec![0.0; slots],
        })
    }

    pub fn per_env_capacity(&self) -> usize {
        self.per_env_capacity
    }

    pub fn num_envs(&self) -> usize {
        self.num_envs
    }

    /// `N * num_envs`.
    pub fn capacity(&self) -> usize {
        self.per_env_capacity * self.num_envs
    }

    /// Stored transitions across all environments.
    pub fn len(&self) -> usize {
        self.fill * self.num_envs
    }

    pub fn is_empty(&self) -> bool {
        self.fill == 0
    }

    /// Stored transitions of a single environment.
    pub fn per_env_len(&self) -> usize {
        self.fill
    }

    /// Parallel steps inserted since construction, including overwritten ones.
    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    /// Inserts one transition per environment; row `i` goes to ring `i`.
    pub fn insert(&mut self, batch: &TransitionBatch) -> Result<()> {
        batch.check()?;
        if batch.len() != self.num_envs {
            return Err(shape_err!(
                "insert needs one transition per env ({}), got {}",
                self.num_envs,
                batch.len()
            ));
        }
        let dims = (
            batch.obs.cols(),
            batch.critic_obs.cols(),
            batch.action.cols(),
        );
        if dims != (self.obs_dim, self.critic_obs_dim, self.action_dim) {
            return Err(shape_err!(
                "insert dims (obs, critic_obs, action) = {dims:?}, buffer expects {:?}",
                (self.obs_dim, self.critic_obs_dim, self.action_dim)
            ));
        }
        for env in 0..self.num_envs {
            let s = env * self.per_env_capacity + self.cursor;
            put(&mut self.obs, s, batch.obs.row(env));
            put(&mut self.critic_obs, s, batch.critic_obs.row(env));
            put(&mut self.action, s, batch.action.row(env));
            put(&mut self.next_obs, s, batch.next_obs.row(env));
            put(&mut self.next_critic_obs, s, batch.next_critic_obs.row(env));
            self.reward[s] = batch.reward[env];
            self.mask[s] = batch.bootstrap_mask[env];
        }
        self.cursor = (self.cursor + 1) % self.per_env_capacity;
        self.fill = (self.fill + 1).min(self.per_env_capacity);
        self.inserted += 1;
        Ok(())
    }

    /// Flat slot indices of `batch_size` uniform draws with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        if self.fill == 0 {
            return Err(Error::State(
                "cannot sample from an empty replay buffer".into(),
            ));
        }
        let stored = self.len();
        Ok((0..batch_size)
            .map(|_| {
                let k = rng.random_range(0..stored);
                (k / self.fill) * self.per_env_capacity + k % self.fill
            })
            .collect())
    }

    pub fn sample<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<TransitionBatch> {
        let idx = self.sample_indices(batch_size, rng)?;
        Ok(self.gather(&idx))
    }

    /// Copies the given flat slots into a batch.
    pub fn gather(&self, idx: &[usize]) -> TransitionBatch {
        let mut b = TransitionBatch::with_dims(
            idx.len(),
            self.obs_dim,
            self.critic_obs_dim,
            self.action_dim,
        );
        for (i, &s) in idx.iter().enumerate() {
            b.obs
                .row_mut(i)
                .copy_from_slice(get(&self.obs, s, self.obs_dim));
            b.critic_obs
                .row_mut(i)
                .copy_from_slice(get(&self.critic_obs, s, self.critic_obs_dim));
            b.action
                .row_mut(i)
                .copy_from_slice(get(&self.action, s, self.action_dim));
            b.next_obs
                .row_mut(i)
                .copy_from_slice(get(&self.next_obs, s, self.obs_dim));
            b.next_critic_obs.row_mut(i).copy_from_slice(get(
                &self.next_critic_obs,
                s,
                self.critic_obs_dim,
            ));
            b.reward[i] = self.reward[s];
            b.bootstrap_mask[i] = self.mask[s];
        }
        b
    }

    /// The transitions of `env`, oldest first.
    pub fn env_transitions(&self, env: usize) -> Vec<Transition> {
        let n = self.per_env_capacity;
        let oldest = if self.fill < n { 0 } else { self.cursor };
        let idx: Vec<usize> = (0..self.fill).map(|k| env * n + (oldest + k) % n).collect();
        let b = self.gather(&idx);
        (0..b.len()).map(|i| b.row(i)).collect()
    }
}

fn put(col: &mut [f32], slot: usize, src: &[f32]) {
    let d = src.len();
    col[slot * d..(slot + 1) * d].copy_from_slice(src);
}

fn get(col: &[f32], slot: usize, dim: usize) -> &[f32] {
    &col[slot * dim..(slot + 1) * dim]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tagged(num_envs: usize, step: usize) -> TransitionBatch {
        let items: Vec<Transition> = (0..num_envs)
            .map(|e| {
                let tag = (e * 1000 + step) as f32;
                Transition {
                    obs: vec![tag, 0.5],
                    critic_obs: vec![tag, 0.5, -1.0],
                    action: vec![tag * 0.001],
                    reward: tag,
                    next_obs: vec![tag + 1.0, 0.5],
                    next_critic_obs: vec![tag + 1.0, 0.5, -1.0],
                    bootstrap_mask: (step % 2) as f32,
                }
            })
            .collect();
        TransitionBatch::from_transitions(&items).unwrap()
    }

    #[test]
    fn fresh_insert_stores_one_per_env() {
        let mut buf = ReplayBuffer::new(8, 3, 2, 3, 1).unwrap();
        assert!(buf.is_empty());
        buf.insert(&tagged(3, 0)).unwrap();
        assert_eq!(buf.len(), 3);
        assert_eq!(buf.capacity(), 24);
    }

    #[test]
    fn ring_overwrites_oldest() {
        let mut buf = ReplayBuffer::new(4, 1, 2, 3, 1).unwrap();
        for s in 0..5 {
            buf.insert(&tagged(1, s)).unwrap();
        }
        assert_eq!(buf.per_env_len(), 4);
        let rewards: Vec<f32> = buf.env_transitions(0).iter().map(|t| t.reward).collect();
        assert_eq!(rewards, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn wrong_batch_length_is_a_shape_error() {
        let mut buf = ReplayBuffer::new(4, 2, 2, 3, 1).unwrap();
        assert!(matches!(buf.insert(&tagged(3, 0)), Err(Error::Shape(_))));
    }

    #[test]
    fn empty_sample_is_a_state_error() {
        let buf = ReplayBuffer::new(4, 2, 2, 3, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(buf.sample(4, &mut rng), Err(Error::State(_))));
    }

    #[test]
    fn single_entry_is_repeated() {
        let mut buf = ReplayBuffer::new(4, 1, 2, 3, 1).unwrap();
        buf.insert(&tagged(1, 7)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = buf.sample(3, &mut rng).unwrap();
        assert_eq!(b.reward, vec![7.0; 3]);
        assert_eq!(b.row(0), b.row(2));
    }

    #[test]
    fn gather_keeps_rows_aligned() {
        let mut buf = ReplayBuffer::new(4, 2, 2, 3, 1).unwrap();
        for s in 0..3 {
            buf.insert(&tagged(2, s)).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = buf.sample(50, &mut rng).unwrap();
        for i in 0..b.len() {
            let t = b.row(i);
            assert_eq!(t.obs[0], t.reward);
            assert_eq!(t.next_obs[0], t.reward + 1.0);
            assert_eq!(t.critic_obs[0], t.reward);
            assert_eq!(t.action[0], t.reward * 0.001);
        }
    }
}
