//! Categorical return distributions on a fixed atom grid and the
//! distributional Bellman target machinery used by the critics.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor2;
use crate::error::{config_err, numeric_err, shape_err, Error, Result};

/// Row sums of a probability matrix must be within this of one.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-5;

/// Uniform support `z_i = v_min + i * (v_max - v_min) / (num_atoms - 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtomGrid {
    v_min: f32,
    v_max: f32,
    num_atoms: usize,
}

impl AtomGrid {
    pub fn new(v_min: f32, v_max: f32, num_atoms: usize) -> Result<Self> {
        if !(v_min.is_finite() && v_max.is_finite()) || v_min >= v_max {
            return Err(config_err!(
                "atom grid needs finite v_min < v_max, got [{v_min}, {v_max}]"
            ));
        }
        if num_atoms < 2 {
            return Err(config_err!(
                "atom grid needs at least 2 atoms, got {num_atoms}"
            ));
        }
        Ok(Self {
            v_min,
            v_max,
            num_atoms,
        })
    }

    pub fn v_min(&self) -> f32 {
        self.v_min
    }

    pub fn v_max(&self) -> f32 {
        self.v_max
    }

    pub fn num_atoms(&self) -> usize {
        self.num_atoms
    }

    pub fn delta(&self) -> f64 {
        (self.v_max as f64 - self.v_min as f64) / (self.num_atoms - 1) as f64
    }

    pub fn atom(&self, i: usize) -> f64 {
        self.v_min as f64 + i as f64 * self.delta()
    }

    pub fn atoms(&self) -> Vec<f32> {
        (0..self.num_atoms).map(|i| self.atom(i) as f32).collect()
    }
}

/// A batch of categorical distributions, one per row, over a shared grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalDistribution {
    grid: AtomGrid,
    probs: Tensor2<f32>,
}

impl CategoricalDistribution {
    pub fn new(grid: AtomGrid, probs: Tensor2<f32>) -> Result<Self> {
        if probs.cols() != grid.num_atoms() {
            return Err(shape_err!(
                "distribution has {} columns for {} atoms",
                probs.cols(),
                grid.num_atoms()
            ));
        }
        check_normalized(&probs)?;
        Ok(Self { grid, probs })
    }

    /// Row-wise softmax of critic logits.
    pub fn from_logits(grid: AtomGrid, logits: &Tensor2<f32>) -> Result<Self> {
        if logits.cols() != grid.num_atoms() {
            return Err(shape_err!(
                "logits have {} columns for {} atoms",
                logits.cols(),
                grid.num_atoms()
            ));
        }
        Ok(Self {
            grid,
            probs: softmax_rows(logits),
        })
    }

    pub fn grid(&self) -> &AtomGrid {
        &self.grid
    }

    pub fn probs(&self) -> &Tensor2<f32> {
        &self.probs
    }

    pub fn into_probs(self) -> Tensor2<f32> {
        self.probs
    }

    pub fn rows(&self) -> usize {
        self.probs.rows()
    }

    /// `sum_i p_i z_i` per row.
    pub fn expected_value(&self) -> Vec<f32> {
        expected_value(&self.grid, &self.probs)
    }
}

fn check_normalized(probs: &Tensor2<f32>) -> Result<()> {
    for r in 0..probs.rows() {
        let row = probs.row(r);
        if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(numeric_err!(
                "row {r} has a negative or non-finite probability"
            ));
        }
        let sum: f64 = row.iter().map(|&p| p as f64).sum();
        if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(numeric_err!("row {r} sums to {sum}, not 1"));
        }
    }
    Ok(())
}

pub fn softmax_rows(logits: &Tensor2<f32>) -> Tensor2<f32> {
    let mut out = logits.clone();
    let cols = out.cols();
    for row in out.data_mut().chunks_exact_mut(cols) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f64;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v as f64;
        }
        let inv = (1.0 / sum) as f32;
        row.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

/// Expected value of each probability row under `grid`.
pub fn expected_value(grid: &AtomGrid, probs: &Tensor2<f32>) -> Vec<f32> {
    let atoms: Vec<f64> = (0..grid.num_atoms()).map(|i| grid.atom(i)).collect();
    (0..probs.rows())
        .map(|r| {
            probs
                .row(r)
                .iter()
                .zip(&atoms)
                .map(|(&p, &z)| p as f64 * z)
                .sum::<f64>() as f32
        })
        .collect()
}

/// Projects the shifted support `reward + mask * discount * z_j` of each row
/// of `next_probs` back onto `grid`, splitting every atom's mass linearly
/// between its two neighbours after clipping to `[v_min, v_max]`.
pub fn project_target(
    grid: &AtomGrid,
    reward: &[f32],
    discount: f32,
    bootstrap_mask: &[f32],
    next_probs: &Tensor2<f32>,
) -> Result<Tensor2<f32>> {
    let batch = next_probs.rows();
    let n = grid.num_atoms();
    if next_probs.cols() != n || reward.len() != batch || bootstrap_mask.len() != batch {
        return Err(shape_err!(
            "projection inputs disagree: next_probs {:?}, {} rewards, {} masks, {n} atoms",
            next_probs.shape(),
            reward.len(),
            bootstrap_mask.len()
        ));
    }
    if !(0.0..=1.0).contains(&discount) {
        return Err(config_err!("discount must lie in [0, 1], got {discount}"));
    }
    check_normalized(next_probs)?;

    let v_min = grid.v_min() as f64;
    let v_max = grid.v_max() as f64;
    let dz = grid.delta();
    let last = (n - 1) as f64;
    let mut out = Tensor2::zeros(batch, n);
    let mut acc = vec![0.0f64; n];
    for r in 0..batch {
        if !reward[r].is_finite() {
            return Err(numeric_err!("non-finite reward in row {r}"));
        }
        acc.iter_mut().for_each(|a| *a = 0.0);
        let scale = bootstrap_mask[r] as f64 * discount as f64;
        for (j, &p) in next_probs.row(r).iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let tz = (reward[r] as f64 + scale * grid.atom(j)).clamp(v_min, v_max);
            let b = ((tz - v_min) / dz).clamp(0.0, last);
            let lower = b.floor();
            let upper = b.ceil();
            let p = p as f64;
            if lower == upper {
                acc[lower as usize] += p;
            } else {
                acc[lower as usize] += p * (upper - b);
                acc[upper as usize] += p * (b - lower);
            }
        }
        for (o, a) in out.row_mut(r).iter_mut().zip(&acc) {
            *o = *a as f32;
        }
    }
    Ok(out)
}

/// Mean categorical cross-entropy and its gradient with respect to the
/// logits, `(softmax(logits) - target) / batch`.
pub fn cross_entropy_loss(
    pred_logits: &Tensor2<f32>,
    target_probs: &Tensor2<f32>,
) -> Result<(f32, Tensor2<f32>)> {
    if pred_logits.shape() != target_probs.shape() {
        return Err(shape_err!(
            "logits {:?} and target {:?} differ",
            pred_logits.shape(),
            target_probs.shape()
        ));
    }
    let batch = pred_logits.rows();
    let inv_batch = 1.0 / batch.max(1) as f64;
    let mut grad = Tensor2::zeros(batch, pred_logits.cols());
    let mut loss = 0.0f64;
    for r in 0..batch {
        let logits = pred_logits.row(r);
        let target = target_probs.row(r);
        let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let sum: f64 = logits.iter().map(|&x| (x as f64 - max).exp()).sum();
        let lse = max + sum.ln();
        let g = grad.row_mut(r);
        for ((gi, &x), &t) in g.iter_mut().zip(logits).zip(target) {
            let log_p = x as f64 - lse;
            loss -= t as f64 * log_p;
            *gi = ((log_p.exp() - t as f64) * inv_batch) as f32;
        }
    }
    let loss = (loss * inv_batch) as f32;
    if !loss.is_finite() {
        return Err(numeric_err!("non-finite cross-entropy loss"));
    }
    Ok((loss, grad))
}

/// How the twin target critics are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CdqMode {
    /// Per row, take the distribution with the smaller expected value.
    #[default]
    Min,
    /// Element-wise mean of the two distributions.
    Avg,
}

impl fmt::Display for CdqMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CdqMode::Min => "min",
            CdqMode::Avg => "avg",
        })
    }
}

impl FromStr for CdqMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "min" => Ok(CdqMode::Min),
            "avg" => Ok(CdqMode::Avg),
            other => Err(config_err!(
                "unknown cdq mode '{other}', expected one of {{min, avg}}"
            )),
        }
    }
}

/// Combines the two target critics' distributions. Ties in `Min` mode keep
/// `dist1`.
pub fn clipped_double_target(
    dist1: &CategoricalDistribution,
    dist2: &CategoricalDistribution,
    mode: CdqMode,
) -> Result<CategoricalDistribution> {
    if dist1.grid != dist2.grid {
        return Err(config_err!(
            "cannot combine distributions on different grids: {:?} vs {:?}",
            dist1.grid,
            dist2.grid
        ));
    }
    if dist1.probs.shape() != dist2.probs.shape() {
        return Err(shape_err!(
            "distribution batches differ: {:?} vs {:?}",
            dist1.probs.shape(),
            dist2.probs.shape()
        ));
    }
    let mut probs = dist1.probs.clone();
    match mode {
        CdqMode::Min => {
            let e1 = dist1.expected_value();
            let e2 = dist2.expected_value();
            for r in 0..probs.rows() {
                if e2[r] < e1[r] {
                    probs.row_mut(r).copy_from_slice(dist2.probs.row(r));
                }
            }
        }
        CdqMode::Avg => {
            for (a, &b) in probs.data_mut().iter_mut().zip(dist2.probs.data()) {
                *a = 0.5 * (*a + b);
            }
        }
    }
    Ok(CategoricalDistribution {
        grid: dist1.grid,
        probs,
    })
}
