use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fasttd3::bench::{run_bench, BenchAxis};
use fasttd3::checkpoint;
use fasttd3::config::TrainConfig;
use fasttd3::envsuite::{TaskName, TaskSpec};
use fasttd3::error::Error;
use fasttd3::metrics::MetricsWriter;
use fasttd3::trainer::{evaluate, load_actor, train};

#[derive(Parser)]
#[command(
    name = "fasttd3",
    version,
    about = "Parallel-environment TD3/SAC trainer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an agent, streaming metrics and writing a final checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint's actor and print one JSON record.
    Eval(EvalArgs),
    /// Sweep one ablation axis over several seeds.
    Bench(BenchArgs),
}

/// Config overrides shared by `train` and `bench`.
///
/// Layering, lowest first: defaults, `--paper-scale`, `--config` file, flags.
/// Values are parsed by the config layer so flags and files report identical
/// errors.
#[derive(Args, Default)]
struct ConfigArgs {
    #[arg(long)]
    task: Option<String>,
    #[arg(long, value_name = "fasttd3|fastsac")]
    agent: Option<String>,
    #[arg(long)]
    num_envs: Option<String>,
    #[arg(long)]
    total_steps: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    utd: Option<String>,
    #[arg(long)]
    buffer_n: Option<String>,
    #[arg(long)]
    num_atoms: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    v_min: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    v_max: Option<String>,
    #[arg(long, value_name = "min|avg")]
    cdq: Option<String>,
    #[arg(long)]
    sigma_min: Option<String>,
    #[arg(long)]
    sigma_max: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    eval_every: Option<String>,
    #[arg(long)]
    eval_episodes: Option<String>,
    /// Override one reward term, e.g. `w_ctrl=0.2`. Repeatable.
    #[arg(
        long = "reward-weight",
        value_name = "NAME=VALUE",
        allow_hyphen_values = true
    )]
    reward_weight: Vec<String>,
    /// Any config key, e.g. `tau=0.05`. Repeatable; applied after the named flags.
    #[arg(long = "set", value_name = "KEY=VALUE", allow_hyphen_values = true)]
    set: Vec<String>,
    /// 1024 environments and batches of 32768.
    #[arg(long)]
    paper_scale: bool,
    /// Single-threaded, wall-clock-free run whose metrics file is reproducible.
    #[arg(long)]
    deterministic: bool,
    /// `key = value` file with `#` comments.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Metrics file (newline-delimited JSON).
    #[arg(long, value_name = "PATH", default_value = "metrics.ndjson")]
    log: PathBuf,
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    #[arg(long)]
    task: String,
    #[arg(long, default_value_t = 16)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_name = "AXIS")]
    axis: String,
    /// Seeds per cell; runs use seeds 0..k.
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    /// Directory receiving one metrics file per run.
    #[arg(long, value_name = "DIR", default_value = "bench_out")]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

fn split_pair(s: &str) -> Result<(&str, &str), Error> {
    s.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .ok_or_else(|| Error::Config(format!("expected NAME=VALUE, got '{s}'")))
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig, Error> {
        let mut cfg = TrainConfig::default();
        if self.paper_scale {
            cfg.apply_paper_scale();
        }
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            cfg.apply_file_text(&text)?;
        }
        let flags = [
            ("task", &self.task),
            ("agent", &self.agent),
            ("num_envs", &self.num_envs),
            ("total_env_steps", &self.total_steps),
            ("batch_size", &self.batch_size),
            ("utd", &self.utd),
            ("buffer_n", &self.buffer_n),
            ("num_atoms", &self.num_atoms),
            ("v_min", &self.v_min),
            ("v_max", &self.v_max),
            ("cdq", &self.cdq),
            ("sigma_min", &self.sigma_min),
            ("sigma_max", &self.sigma_max),
            ("seed", &self.seed),
            ("eval_every", &self.eval_every),
            ("eval_episodes", &self.eval_episodes),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                let flag = key.replace('_', "-");
                cfg.set(key, v).map_err(|e| match e {
                    Error::Config(msg) => Error::Config(format!("--{flag}: {msg}")),
                    other => other,
                })?;
            }
        }
        for pair in &self.reward_weight {
            let (name, value) = split_pair(pair)?;
            cfg.set(&format!("reward.{name}"), value)?;
        }
        for pair in &self.set {
            let (key, value) = split_pair(pair)?;
            cfg.set(key, value)?;
        }
        if self.deterministic {
            cfg.deterministic = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn cmd_train(args: &TrainArgs) -> Result<(), Error> {
    let cfg = args.config.resolve()?;
    let mut writer = MetricsWriter::create(&args.log, &cfg.to_json())?;
    let outcome = train(&cfg, &mut writer)?;
    if let Some(path) = &args.checkpoint {
        checkpoint::save(path, &outcome.learner.to_tensors())?;
    }
    match outcome.solved {
        Some(s) => eprintln!(
            "{} env steps, solved at {} ({:.1} s)",
            outcome.env_steps, s.env_steps, s.wall_seconds
        ),
        None => eprintln!("{} env steps, threshold not reached", outcome.env_steps),
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<(), Error> {
    let task: TaskName = args.task.parse()?;
    let spec = TaskSpec::builtin(task);
    let tensors = load_checkpoint(&args.checkpoint)?;
    let actor = load_actor(&tensors)?;
    if actor.obs_dim() != spec.obs_dim || actor.action_dim() != spec.action_dim {
        return Err(Error::Shape(format!(
            "checkpoint actor has obs_dim {} and action_dim {}, task {task} expects obs_dim {} and action_dim {}",
            actor.obs_dim(),
            actor.action_dim(),
            spec.obs_dim,
            spec.action_dim
        )));
    }
    let stats = evaluate(&actor, &spec, args.episodes, args.seed)?;
    let record = serde_json::json!({
        "task": task.to_string(),
        "episodes": args.episodes,
        "seed": args.seed,
        "eval_return_mean": stats.return_mean,
        "eval_return_std": stats.return_std,
        "eval_episode_len": stats.mean_len,
    });
    println!("{record}");
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Vec<checkpoint::NamedTensor>, Error> {
    if !path.exists() {
        return Err(Error::Config(format!(
            "checkpoint {} does not exist",
            path.display()
        )));
    }
    checkpoint::load(path)
}

fn cmd_bench(args: &BenchArgs) -> Result<(), Error> {
    let axis: BenchAxis = args.axis.parse()?;
    if args.seeds == 0 {
        return Err(Error::Config("--seeds must be at least 1".into()));
    }
    let base = args.config.resolve()?;
    let seeds: Vec<u64> = (0..args.seeds).collect();
    let report = run_bench(&base, axis, &seeds, &args.out, &mut |r| {
        let reached = match r.steps_to_threshold {
            Some(s) => format!("solved at {s} steps"),
            None => "not solved".to_string(),
        };
        eprintln!(
            "{axis}={} seed {}: {reached}, final return {:.2}, {:.1} s",
            r.cell, r.seed, r.final_return, r.wall_seconds
        );
    })?;
    print!("{}", report.table());
    Ok(())
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
