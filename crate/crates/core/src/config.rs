//! Training configuration and the flat `key = value` file format.
//!
//! Values are layered: defaults, then the optional paper-scale preset, then
//! a config file, then individual command-line overrides. Every layer goes
//! through [`TrainConfig::set`], so all keys accept the same spellings.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::distributional::{AtomGrid, CdqMode};
use crate::envsuite::{TaskName, TaskSpec};
use crate::error::{config_err, Error, Result};
use crate::exploration::ResamplePolicy;
use crate::networks::NetworkSizes;

/// Which learner to train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Agent {
    #[default]
    FastTd3,
    FastSac,
}

impl fmt::Display for Agent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Agent::FastTd3 => "fasttd3",
            Agent::FastSac => "fastsac",
        })
    }
}

impl FromStr for Agent {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fasttd3" => Ok(Agent::FastTd3),
            "fastsac" => Ok(Agent::FastSac),
            other => Err(config_err!(
                "unknown agent '{other}', expected one of {{fasttd3, fastsac}}"
            )),
        }
    }
}

/// Which critic output the deterministic actor ascends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActorQ {
    #[default]
    Q1,
    Avg,
}

impl fmt::Display for ActorQ {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ActorQ::Q1 => "q1",
            ActorQ::Avg => "avg",
        })
    }
}

impl FromStr for ActorQ {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "q1" => Ok(ActorQ::Q1),
            "avg" => Ok(ActorQ::Avg),
            other => Err(config_err!(
                "unknown actor_q '{other}', expected one of {{q1, avg}}"
            )),
        }
    }
}

/// All knobs of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub task: TaskName,
    /// Overrides merged into the task's default reward weights.
    pub reward_weights: BTreeMap<String, f64>,
    pub agent: Agent,
    pub num_envs: usize,
    pub total_env_steps: u64,
    pub batch_size: usize,
    /// Gradient updates per parallel environment step.
    pub utd: usize,
    pub policy_delay: usize,
    pub gamma: f32,
    pub tau: f32,
    /// Env steps of uniform-random actions; `None` means ten parallel steps.
    pub warmup_steps: Option<u64>,
    pub sigma_min: f32,
    pub sigma_max: f32,
    pub noise_resample: ResamplePolicy,
    pub target_noise: f32,
    pub target_noise_clip: f32,
    pub distributional: bool,
    pub num_atoms: usize,
    /// `None` takes the task default.
    pub v_min: Option<f32>,
    pub v_max: Option<f32>,
    pub cdq: CdqMode,
    pub actor_q: ActorQ,
    pub buffer_n: usize,
    pub seed: u64,
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub critic_lr: f64,
    pub actor_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub width_mult: f64,
    pub alpha_init: f64,
    /// 0 freezes the temperature.
    pub alpha_lr: f64,
    /// `None` means `-action_dim`.
    pub target_entropy: Option<f64>,
    pub deterministic: bool,
    pub stop_at_threshold: bool,
    pub max_wall_seconds: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: TaskName::PointMass2d,
            reward_weights: BTreeMap::new(),
            agent: Agent::FastTd3,
            num_envs: 128,
            total_env_steps: 100_000,
            batch_size: 1024,
            utd: 2,
            policy_delay: 2,
            gamma: 0.99,
            tau: 0.1,
            warmup_steps: None,
            sigma_min: 0.1,
            sigma_max: 0.4,
            noise_resample: ResamplePolicy::OnReset,
            target_noise: 0.2,
            target_noise_clip: 0.5,
            distributional: true,
            num_atoms: 101,
            v_min: None,
            v_max: None,
            cdq: CdqMode::Min,
            actor_q: ActorQ::Q1,
            buffer_n: 1024,
            seed: 0,
            eval_every: 10_000,
            eval_episodes: 16,
            critic_lr: 3e-4,
            actor_lr: 3e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            width_mult: 1.0,
            alpha_init: 0.1,
            alpha_lr: 3e-4,
            target_entropy: None,
            deterministic: false,
            stop_at_threshold: false,
            max_wall_seconds: None,
        }
    }
}

/// Keys accepted by [`TrainConfig::set`], in header order. Reward weights
/// use `reward.<term>` on top of these.
pub const CONFIG_KEYS: [&str; 37] = [
    "task",
    "agent",
    "num_envs",
    "total_env_steps",
    "batch_size",
    "utd",
    "policy_delay",
    "gamma",
    "tau",
    "warmup_steps",
    "sigma_min",
    "sigma_max",
    "noise_resample",
    "target_noise",
    "target_noise_clip",
    "distributional",
    "num_atoms",
    "v_min",
    "v_max",
    "cdq",
    "actor_q",
    "buffer_n",
    "seed",
    "eval_every",
    "eval_episodes",
    "critic_lr",
    "actor_lr",
    "adam_beta1",
    "adam_beta2",
    "width_mult",
    "alpha_init",
    "alpha_lr",
    "target_entropy",
    "deterministic",
    "stop_at_threshold",
    "max_wall_seconds",
    "reward_weights",
];

fn num<T: FromStr>(v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config("expected number".into()))
}

fn int<T: FromStr>(v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config("expected non-negative integer".into()))
}

fn boolean(v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::Config("expected boolean (true/false)".into())),
    }
}

fn optional<T>(v: &str, parse: impl Fn(&str) -> Result<T>) -> Result<Option<T>> {
    if v == "auto" || v == "none" {
        Ok(None)
    } else {
        parse(v).map(Some)
    }
}

impl TrainConfig {
    /// Large-scale preset: 1024 environments and batches of 32768.
    pub fn apply_paper_scale(&mut self) {
        self.num_envs = 1024;
        self.batch_size = 32_768;
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        if let Some(term) = key.strip_prefix("reward.") {
            self.reward_weights.insert(term.to_string(), num(v)?);
            return Ok(());
        }
        match key {
            "task" => self.task = v.parse()?,
            "agent" => self.agent = v.parse()?,
            "num_envs" => self.num_envs = int(v)?,
            "total_env_steps" => self.total_env_steps = int(v)?,
            "batch_size" => self.batch_size = int(v)?,
            "utd" => self.utd = int(v)?,
            "policy_delay" => self.policy_delay = int(v)?,
            "gamma" => self.gamma = num(v)?,
            "tau" => self.tau = num(v)?,
            "warmup_steps" => self.warmup_steps = optional(v, int)?,
            "sigma_min" => self.sigma_min = num(v)?,
            "sigma_max" => self.sigma_max = num(v)?,
            "noise_resample" => self.noise_resample = v.parse()?,
            "target_noise" => self.target_noise = num(v)?,
            "target_noise_clip" => self.target_noise_clip = num(v)?,
            "distributional" => self.distributional = boolean(v)?,
            "num_atoms" => self.num_atoms = int(v)?,
            "v_min" => self.v_min = optional(v, num)?,
            "v_max" => self.v_max = optional(v, num)?,
            "cdq" => self.cdq = v.parse()?,
            "actor_q" => self.actor_q = v.parse()?,
            "buffer_n" => self.buffer_n = int(v)?,
            "seed" => self.seed = int(v)?,
            "eval_every" => self.eval_every = int(v)?,
            "eval_episodes" => self.eval_episodes = int(v)?,
            "critic_lr" => self.critic_lr = num(v)?,
            "actor_lr" => self.actor_lr = num(v)?,
            "adam_beta1" => self.adam_beta1 = num(v)?,
            "adam_beta2" => self.adam_beta2 = num(v)?,
            "width_mult" => self.width_mult = num(v)?,
            "alpha_init" => self.alpha_init = num(v)?,
            "alpha_lr" => self.alpha_lr = num(v)?,
            "target_entropy" => self.target_entropy = optional(v, num)?,
            "deterministic" => self.deterministic = boolean(v)?,
            "stop_at_threshold" => self.stop_at_threshold = boolean(v)?,
            "max_wall_seconds" => self.max_wall_seconds = optional(v, num)?,
            other => return Err(config_err!("unknown key '{other}'")),
        }
        Ok(())
    }

    /// Applies the lines of a config file on top of `self`.
    pub fn apply_file_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let lineno = i + 1;
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| config_err!("line {lineno}: expected 'key = value'"))?;
            self.set(key.trim(), value).map_err(|e| match e {
                Error::Config(msg) => config_err!("line {lineno}: {msg}"),
                other => other,
            })?;
        }
        Ok(())
    }

    /// Checks cross-field invariants and resolves the task and grid.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_envs", self.num_envs),
            ("batch_size", self.batch_size),
            ("utd", self.utd),
            ("policy_delay", self.policy_delay),
            ("num_atoms", self.num_atoms),
            ("buffer_n", self.buffer_n),
            ("eval_episodes", self.eval_episodes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(config_err!("{name} must be at least 1"));
            }
        }
        if self.eval_every == 0 {
            return Err(config_err!("eval_every must be at least 1"));
        }
        if self.distributional && self.num_atoms < 2 {
            return Err(config_err!("num_atoms must be at least 2"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(config_err!("gamma must lie in [0, 1], got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(config_err!("tau must lie in [0, 1], got {}", self.tau));
        }
        if !(self.sigma_min >= 0.0 && self.sigma_min <= self.sigma_max) {
            return Err(config_err!(
                "noise range needs 0 <= sigma_min <= sigma_max, got [{}, {}]",
                self.sigma_min,
                self.sigma_max
            ));
        }
        if !(self.target_noise >= 0.0 && self.target_noise_clip >= 0.0) {
            return Err(config_err!(
                "target_noise and target_noise_clip must be >= 0"
            ));
        }
        for (name, lr) in [("critic_lr", self.critic_lr), ("actor_lr", self.actor_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(config_err!("{name} must be positive, got {lr}"));
            }
        }
        if !(self.alpha_init > 0.0 || (self.alpha_init == 0.0 && self.alpha_lr == 0.0)) {
            return Err(config_err!(
                "alpha_init must be positive unless the temperature is frozen (alpha_lr = 0)"
            ));
        }
        if self.alpha_lr < 0.0 {
            return Err(config_err!("alpha_lr must be >= 0"));
        }
        NetworkSizes::scaled(self.width_mult)?;
        self.task_spec()?;
        self.grid()?;
        Ok(())
    }

    /// Task with reward overrides merged in.
    pub fn task_spec(&self) -> Result<TaskSpec> {
        TaskSpec::builtin(self.task).set_reward_weights(&self.reward_weights)
    }

    pub fn grid(&self) -> Result<AtomGrid> {
        let spec = TaskSpec::builtin(self.task);
        AtomGrid::new(
            self.v_min.unwrap_or(spec.v_min),
            self.v_max.unwrap_or(spec.v_max),
            self.num_atoms,
        )
    }

    /// Warmup in env steps.
    pub fn warmup_env_steps(&self) -> u64 {
        self.warmup_steps.unwrap_or(10 * self.num_envs as u64)
    }

    /// Flat JSON object of every key, with `auto` values resolved where the
    /// task defines them.
    pub fn to_json(&self) -> Value {
        let spec = TaskSpec::builtin(self.task);
        let weights: Map<String, Value> = self
            .task_spec()
            .map(|s| s.reward_weights)
            .unwrap_or_default()
            .into_iter()
            .map(|(k, v)| (k, json!(v)))
            .collect();
        json!({
            "task": self.task.as_str(),
            "agent": self.agent.to_string(),
            "num_envs": self.num_envs,
            "total_env_steps": self.total_env_steps,
            "batch_size": self.batch_size,
            "utd": self.utd,
            "policy_delay": self.policy_delay,
            "gamma": self.gamma,
            "tau": self.tau,
            "warmup_steps": self.warmup_env_steps(),
            "sigma_min": self.sigma_min,
            "sigma_max": self.sigma_max,
            "noise_resample": self.noise_resample.to_string(),
            "target_noise": self.target_noise,
            "target_noise_clip": self.target_noise_clip,
            "distributional": self.distributional,
            "num_atoms": self.num_atoms,
            "v_min": self.v_min.unwrap_or(spec.v_min),
            "v_max": self.v_max.unwrap_or(spec.v_max),
            "cdq": self.cdq.to_string(),
            "actor_q": self.actor_q.to_string(),
            "buffer_n": self.buffer_n,
            "seed": self.seed,
            "eval_every": self.eval_every,
            "eval_episodes": self.eval_episodes,
            "critic_lr": self.critic_lr,
            "actor_lr": self.actor_lr,
            "adam_beta1": self.adam_beta1,
            "adam_beta2": self.adam_beta2,
            "width_mult": self.width_mult,
            "alpha_init": self.alpha_init,
            "alpha_lr": self.alpha_lr,
            "target_entropy": self.target_entropy,
            "deterministic": self.deterministic,
            "stop_at_threshold": self.stop_at_threshold,
            "max_wall_seconds": self.max_wall_seconds,
            "reward_weights": Value::Object(weights),
        })
    }
}

/// Reads a config file on top of the defaults.
pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path)?;
    let mut cfg = TrainConfig::default();
    cfg.apply_file_text(&text)?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let mut cfg = TrainConfig::default();
        cfg.apply_file_text("").unwrap();
        assert_eq!(cfg, TrainConfig::default());
        cfg.apply_file_text("# only a comment\n\n   \n").unwrap();
        assert_eq!(cfg, TrainConfig::default());
    }

    #[test]
    fn type_mismatch_names_the_line() {
        let err = TrainConfig::default()
            .apply_file_text("v_min = abc")
            .unwrap_err();
        assert_eq!(err.to_string(), "config error: line 1: expected number");
        let err = TrainConfig::default()
            .apply_file_text("seed = 1\nutd = two\n")
            .unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn unknown_key_is_named() {
        let err = TrainConfig::default()
            .apply_file_text("bogus_key = 3")
            .unwrap_err();
        assert!(err.to_string().contains("bogus_key"), "{err}");
    }

    #[test]
    fn later_layers_win() {
        let mut cfg = TrainConfig::default();
        cfg.apply_paper_scale();
        cfg.apply_file_text("batch_size = 1024  # trailing comment")
            .unwrap();
        assert_eq!(cfg.batch_size, 1024);
        assert_eq!(cfg.num_envs, 1024);
        cfg.set("batch_size", "2048").unwrap();
        assert_eq!(cfg.batch_size, 2048);
    }

    #[test]
    fn every_key_round_trips_through_json() {
        let cfg = TrainConfig::default();
        let v = cfg.to_json();
        let obj = v.as_object().unwrap();
        for key in CONFIG_KEYS {
            assert!(obj.contains_key(key), "missing {key}");
        }
        assert_eq!(obj.len(), CONFIG_KEYS.len());
        let mut again = TrainConfig::default();
        for key in CONFIG_KEYS {
            if key == "reward_weights" {
                continue;
            }
            let text = match &obj[key] {
                Value::String(s) => s.clone(),
                Value::Null => "auto".into(),
                other => other.to_string(),
            };
            again
                .set(key, &text)
                .unwrap_or_else(|e| panic!("{key}: {e}"));
        }
        assert_eq!(again.to_json(), v);
    }

    #[test]
    fn validation() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.utd = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.v_min = Some(5.0);
        cfg.v_max = Some(1.0);
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.set("reward.w_nope", "1").unwrap();
        assert!(cfg.validate().unwrap_err().to_string().contains("w_ctrl"));
    }

    #[test]
    fn enum_errors_list_choices() {
        let err = TrainConfig::default().set("cdq", "minimum").unwrap_err();
        assert!(err.to_string().contains("{min, avg}"), "{err}");
    }
}
