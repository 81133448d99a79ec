//! Ablation sweeps: one axis, a fixed grid of cells, `k` seeds per cell.
//!
//! Every run stops once the task's solved threshold is met, so a cell's
//! figures of merit are env steps and wall seconds to threshold. Runs that
//! never reach it are censored and rank as infinitely slow.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::config::TrainConfig;
use crate::error::{config_err, Error, Result};
use crate::metrics::MetricsWriter;
use crate::trainer::train;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchAxis {
    NumEnvs,
    BatchSize,
    Distributional,
    Cdq,
    SigmaMax,
    Utd,
    BufferN,
    ModelSize,
}

impl BenchAxis {
    pub const ALL: [BenchAxis; 8] = [
        BenchAxis::NumEnvs,
        BenchAxis::BatchSize,
        BenchAxis::Distributional,
        BenchAxis::Cdq,
        BenchAxis::SigmaMax,
        BenchAxis::Utd,
        BenchAxis::BufferN,
        BenchAxis::ModelSize,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BenchAxis::NumEnvs => "num_envs",
            BenchAxis::BatchSize => "batch_size",
            BenchAxis::Distributional => "distributional",
            BenchAxis::Cdq => "cdq",
            BenchAxis::SigmaMax => "sigma_max",
            BenchAxis::Utd => "utd",
            BenchAxis::BufferN => "buffer_n",
            BenchAxis::ModelSize => "model_size",
        }
    }

    /// Config key swept by this axis and its cell values, in table order.
    pub fn grid(self) -> (&'static str, &'static [&'static str]) {
        match self {
            BenchAxis::NumEnvs => ("num_envs", &["4", "32", "128", "512"]),
            BenchAxis::BatchSize => ("batch_size", &["128", "512", "1024", "4096"]),
            BenchAxis::Distributional => ("distributional", &["on", "off"]),
            BenchAxis::Cdq => ("cdq", &["min", "avg"]),
            BenchAxis::SigmaMax => ("sigma_max", &["0.2", "0.4", "0.8"]),
            BenchAxis::Utd => ("utd", &["2", "4", "8"]),
            BenchAxis::BufferN => ("buffer_n", &["128", "1024", "8192"]),
            BenchAxis::ModelSize => ("width_mult", &["0.25", "0.5", "1.0"]),
        }
    }
}

impl fmt::Display for BenchAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BenchAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BenchAxis::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = BenchAxis::ALL.iter().map(|a| a.as_str()).collect();
                config_err!(
                    "unknown bench axis '{s}', expected one of {{{}}}",
                    names.join(", ")
                )
            })
    }
}

/// Outcome of one (cell, seed) run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub cell: String,
    pub seed: u64,
    pub steps_to_threshold: Option<u64>,
    pub wall_to_threshold: Option<f64>,
    pub final_return: f64,
    pub wall_seconds: f64,
    pub metrics_path: PathBuf,
}

/// Per-cell medians over seeds; `None` is a censored (unreached) median.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub cell: String,
    pub runs: usize,
    pub solved: usize,
    pub median_steps: Option<f64>,
    pub median_wall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub axis: BenchAxis,
    pub runs: Vec<RunResult>,
    pub cells: Vec<CellSummary>,
}

/// Median where `None` ranks above every finite value.
pub fn censored_median(values: &[Option<f64>]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v: Vec<f64> = values.iter().map(|x| x.unwrap_or(f64::INFINITY)).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let m = if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    };
    m.is_finite().then_some(m)
}

/// Adjacent pairs where a sequence that should not increase does increase.
/// `None` counts as infinity.
pub fn increases(medians: &[Option<f64>]) -> usize {
    medians
        .windows(2)
        .filter(|w| w[1].unwrap_or(f64::INFINITY) > w[0].unwrap_or(f64::INFINITY))
        .count()
}

/// Runs every cell of `axis` for each seed on top of `base`, writing one
/// metrics file per run into `out_dir`. `progress` sees each finished run.
pub fn run_bench(
    base: &TrainConfig,
    axis: BenchAxis,
    seeds: &[u64],
    out_dir: &Path,
    progress: &mut dyn FnMut(&RunResult),
) -> Result<BenchReport> {
    if seeds.is_empty() {
        return Err(config_err!("bench needs at least one seed"));
    }
    std::fs::create_dir_all(out_dir)?;
    let (key, values) = axis.grid();
    let mut runs = Vec::new();
    let mut cells = Vec::new();
    for value in values {
        let mut cell_runs = Vec::new();
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.set(key, value)?;
            cfg.seed = seed;
            cfg.stop_at_threshold = true;
            cfg.validate()?;
            let metrics_path = out_dir.join(format!("{axis}_{value}_seed{seed}.ndjson"));
            let mut writer = MetricsWriter::create(&metrics_path, &cfg.to_json())?;
            let out = train(&cfg, &mut writer)?;
            let run = RunResult {
                cell: value.to_string(),
                seed,
                steps_to_threshold: out.solved.map(|s| s.env_steps),
                wall_to_threshold: out.solved.map(|s| s.wall_seconds),
                final_return: out.rows.last().map_or(f64::NAN, |r| r.eval_return_mean),
                wall_seconds: out.wall_seconds,
                metrics_path,
            };
            progress(&run);
            cell_runs.push(run);
        }
        let steps: Vec<Option<f64>> = cell_runs
            .iter()
            .map(|r| r.steps_to_threshold.map(|s| s as f64))
            .collect();
        let walls: Vec<Option<f64>> = cell_runs.iter().map(|r| r.wall_to_threshold).collect();
        cells.push(CellSummary {
            cell: value.to_string(),
            runs: cell_runs.len(),
            solved: cell_runs
                .iter()
                .filter(|r| r.steps_to_threshold.is_some())
                .count(),
            median_steps: censored_median(&steps),
            median_wall: censored_median(&walls),
        });
        runs.extend(cell_runs);
    }
    Ok(BenchReport { axis, runs, cells })
}

impl BenchReport {
    /// Plain-text table, one row per cell.
    pub fn table(&self) -> String {
        let fmt_opt = |v: Option<f64>, prec: usize| match v {
            Some(x) => format!("{x:.prec$}"),
            None => "not reached".to_string(),
        };
        let mut s = format!(
            "{:<14} {:>6} {:>8} {:>20} {:>20}\n",
            self.axis.as_str(),
            "runs",
            "solved",
            "median_steps",
            "median_wall_s"
        );
        for c in &self.cells {
            s.push_str(&format!(
                "{:<14} {:>6} {:>8} {:>20} {:>20}\n",
                c.cell,
                c.runs,
                c.solved,
                fmt_opt(c.median_steps, 0),
                fmt_opt(c.median_wall, 1)
            ));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_names_round_trip() {
        for a in BenchAxis::ALL {
            assert_eq!(a.as_str().parse::<BenchAxis>().unwrap(), a);
        }
        let err = "nope".parse::<BenchAxis>().unwrap_err().to_string();
        assert!(
            err.contains("num_envs") && err.contains("model_size"),
            "{err}"
        );
    }

    #[test]
    fn every_grid_value_is_a_valid_setting() {
        for a in BenchAxis::ALL {
            let (key, values) = a.grid();
            for v in values {
                let mut cfg = TrainConfig::default();
                cfg.set(key, v).unwrap();
                cfg.validate().unwrap();
            }
        }
    }

    #[test]
    fn median_with_censoring() {
        assert_eq!(
            censored_median(&[Some(3.0), Some(1.0), Some(2.0)]),
            Some(2.0)
        );
        assert_eq!(censored_median(&[Some(3.0), None, Some(2.0)]), Some(3.0));
        assert_eq!(censored_median(&[None, None, Some(2.0)]), None);
        assert_eq!(censored_median(&[Some(1.0), Some(3.0)]), Some(2.0));
        assert_eq!(censored_median(&[]), None);
    }

    #[test]
    fn increase_count() {
        assert_eq!(increases(&[None, Some(5.0), Some(3.0)]), 0);
        assert_eq!(increases(&[Some(5.0), None, Some(3.0)]), 1);
        assert_eq!(increases(&[Some(1.0), Some(2.0), Some(3.0)]), 2);
        assert_eq!(increases(&[None, None]), 0);
    }
}
