//! Per-environment Gaussian exploration noise and target policy smoothing.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor2;
use crate::error::{config_err, shape_err, Error, Result};

/// When an environment draws a new noise scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResamplePolicy {
    #[default]
    OnReset,
    Fixed,
}

impl fmt::Display for ResamplePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ResamplePolicy::OnReset => "on_reset",
            ResamplePolicy::Fixed => "fixed",
        })
    }
}

impl FromStr for ResamplePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "on_reset" => Ok(ResamplePolicy::OnReset),
            "fixed" => Ok(ResamplePolicy::Fixed),
            other => Err(config_err!(
                "unknown noise resample policy '{other}', expected one of {{on_reset, fixed}}"
            )),
        }
    }
}

/// Draws one noise scale per environment, uniform in `[sigma_min, sigma_max]`.
pub fn sample_env_sigmas<R: Rng + ?Sized>(
    num_envs: usize,
    sigma_min: f32,
    sigma_max: f32,
    rng: &mut R,
) -> Result<Vec<f32>> {
    validate_range(sigma_min, sigma_max)?;
    Ok((0..num_envs)
        .map(|_| draw_sigma(sigma_min, sigma_max, rng))
        .collect())
}

fn validate_range(sigma_min: f32, sigma_max: f32) -> Result<()> {
    if !(sigma_min >= 0.0 && sigma_min <= sigma_max && sigma_max.is_finite()) {
        return Err(config_err!(
            "noise range needs 0 <= sigma_min <= sigma_max, got [{sigma_min}, {sigma_max}]"
        ));
    }
    Ok(())
}

fn draw_sigma<R: Rng + ?Sized>(lo: f32, hi: f32, rng: &mut R) -> f32 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Noise scales of all parallel environments.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    sigma_min: f32,
    sigma_max: f32,
    sigmas: Vec<f32>,
    policy: ResamplePolicy,
}

impl NoiseSchedule {
    /// One draw per environment, each from that environment's own stream.
    pub fn new<R: Rng>(
        sigma_min: f32,
        sigma_max: f32,
        policy: ResamplePolicy,
        rngs: &mut [R],
    ) -> Result<Self> {
        validate_range(sigma_min, sigma_max)?;
        let sigmas = rngs
            .iter_mut()
            .map(|r| draw_sigma(sigma_min, sigma_max, r))
            .collect();
        Ok(Self {
            sigma_min,
            sigma_max,
            sigmas,
            policy,
        })
    }

    pub fn sigmas(&self) -> &[f32] {
        &self.sigmas
    }

    pub fn policy(&self) -> ResamplePolicy {
        self.policy
    }

    /// Called when environment `env` resets.
    pub fn on_reset<R: Rng + ?Sized>(&mut self, env: usize, rng: &mut R) {
        if self.policy == ResamplePolicy::OnReset {
            self.sigmas[env] = draw_sigma(self.sigma_min, self.sigma_max, rng);
        }
    }
}

/// Adds `N(0, sigmas[i]^2)` to row `i` using `rngs[i]`, then clips to `[-1, 1]`.
pub fn apply_exploration_noise<R: Rng>(
    actions: &mut Tensor2<f32>,
    sigmas: &[f32],
    rngs: &mut [R],
) -> Result<()> {
    if sigmas.len() != actions.rows() || rngs.len() != actions.rows() {
        return Err(shape_err!(
            "{} action rows, {} sigmas, {} rng streams",
            actions.rows(),
            sigmas.len(),
            rngs.len()
        ));
    }
    for (i, (&sigma, rng)) in sigmas.iter().zip(rngs.iter_mut()).enumerate() {
        for a in actions.row_mut(i) {
            let eps: f32 = StandardNormal.sample(rng);
            *a = (*a + sigma * eps).clamp(-1.0, 1.0);
        }
    }
    Ok(())
}

/// `a + clip(N(0, sigma^2), -clip_c, clip_c)`, then clipped to `[-1, 1]`.
pub fn target_policy_smoothing<R: Rng + ?Sized>(
    actions: &mut Tensor2<f32>,
    sigma: f32,
    clip_c: f32,
    rng: &mut R,
) -> Result<()> {
    if !(sigma >= 0.0 && clip_c >= 0.0) {
        return Err(config_err!(
            "target smoothing needs sigma >= 0 and clip >= 0, got {sigma}, {clip_c}"
        ));
    }
    if sigma == 0.0 {
        return Ok(());
    }
    for a in actions.data_mut() {
        let eps: f32 = StandardNormal.sample(rng);
        *a = (*a + smoothing_noise(sigma * eps, clip_c)).clamp(-1.0, 1.0);
    }
    Ok(())
}

fn smoothing_noise(raw: f32, clip_c: f32) -> f32 {
    raw.clamp(-clip_c, clip_c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rngs(n: usize, seed: u64) -> Vec<ChaCha8Rng> {
        (0..n)
            .map(|i| {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                r.set_stream(i as u64);
                r
            })
            .collect()
    }

    #[test]
    fn degenerate_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_env_sigmas(5, 0.2, 0.2, &mut rng).unwrap();
        assert!(s.iter().all(|&x| x == 0.2));
        assert!(sample_env_sigmas(5, 0.3, 0.2, &mut rng).is_err());
        assert!(sample_env_sigmas(5, -0.1, 0.2, &mut rng).is_err());
    }

    #[test]
    fn uniform_sigma_mean() {
        // Uniform on [0.1, 0.4]: mean 0.25, sd 0.3/sqrt(12) ~ 0.0866, so the
        // standard error over 1e5 draws is ~2.7e-4 and 0.003 is > 10 sigma.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = sample_env_sigmas(100_000, 0.1, 0.4, &mut rng).unwrap();
        let mean = s.iter().map(|&x| x as f64).sum::<f64>() / s.len() as f64;
        assert!((mean - 0.25).abs() < 0.003, "{mean}");
        assert!(s.iter().all(|&x| (0.1..=0.4).contains(&x)));
    }

    #[test]
    fn zero_sigma_leaves_actions() {
        let mut a = Tensor2::from_rows(&[[0.3f32, -0.2], [0.9, 1.0]]).unwrap();
        let before = a.clone();
        apply_exploration_noise(&mut a, &[0.0, 0.0], &mut rngs(2, 1)).unwrap();
        assert_eq!(a, before);
    }

    #[test]
    fn noisy_actions_stay_bounded_and_reproducible() {
        let mut a = Tensor2::filled(4, 3, 1.0);
        let mut b = a.clone();
        apply_exploration_noise(&mut a, &[0.4; 4], &mut rngs(4, 2)).unwrap();
        apply_exploration_noise(&mut b, &[0.4; 4], &mut rngs(4, 2)).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|&x| (-1.0..=1.0).contains(&x)));
    }

    #[test]
    fn per_env_noise_ignores_other_rows() {
        let mut all = Tensor2::zeros(3, 2);
        apply_exploration_noise(&mut all, &[0.1, 0.2, 0.3], &mut rngs(3, 5)).unwrap();
        let mut streams = rngs(3, 5);
        let mut one = Tensor2::zeros(1, 2);
        apply_exploration_noise(&mut one, &[0.3], &mut streams[2..]).unwrap();
        assert_eq!(one.row(0), all.row(2));
    }

    #[test]
    fn smoothing_identity_and_clip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut a = Tensor2::from_rows(&[[0.1f32, 0.2]]).unwrap();
        let before = a.clone();
        target_policy_smoothing(&mut a, 0.0, 0.5, &mut rng).unwrap();
        assert_eq!(a, before);
        assert_eq!(smoothing_noise(0.9, 0.5), 0.5);
        assert_eq!(smoothing_noise(-0.9, 0.5), -0.5);
        assert!(target_policy_smoothing(&mut a, -1.0, 0.5, &mut rng).is_err());
    }

    #[test]
    fn smoothing_noise_is_truncated_gaussian() {
        // Histogram oracle: with sigma 0.2 and clip 0.5 the added noise has
        // support [-0.5, 0.5] and P(|n| = 0.5) = P(|N(0,1)| >= 2.5) = 0.01242.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 200_000;
        let mut a = Tensor2::zeros(n, 1);
        target_policy_smoothing(&mut a, 0.2, 0.5, &mut rng).unwrap();
        let clipped = a.data().iter().filter(|x| x.abs() == 0.5).count() as f64 / n as f64;
        assert!(a.data().iter().all(|x| x.abs() <= 0.5));
        // binomial sd ~ 2.5e-4
        assert!((clipped - 0.012419).abs() < 0.0015, "{clipped}");
        let inner = a.data().iter().filter(|x| x.abs() <= 0.2).count() as f64 / n as f64;
        // P(|N(0,1)| <= 1) = 0.682689
        assert!((inner - 0.682689).abs() < 0.005, "{inner}");
    }

    #[test]
    fn schedule_resamples_on_reset_only_when_asked() {
        let mut streams = rngs(3, 9);
        let mut s = NoiseSchedule::new(0.1, 0.4, ResamplePolicy::Fixed, &mut streams).unwrap();
        let before = s.sigmas().to_vec();
        s.on_reset(1, &mut streams[1]);
        assert_eq!(s.sigmas(), &before[..]);

        let mut s = NoiseSchedule::new(0.1, 0.4, ResamplePolicy::OnReset, &mut streams).unwrap();
        let before = s.sigmas().to_vec();
        s.on_reset(1, &mut streams[1]);
        assert_eq!(s.sigmas()[0], before[0]);
        assert_ne!(s.sigmas()[1], before[1]);
        assert!(s.sigmas().iter().all(|x| (0.1..=0.4).contains(x)));
    }
}
