use serde::{Deserialize, Serialize};

use super::mlp::{MlpGrads, MlpParams};
use super::tensor::Scalar;
use crate::error::{numeric_err, shape_err, Result};

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Optimizer state for one [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T = f32> {
    pub config: AdamConfig,
    pub first_moment: MlpGrads<T>,
    pub second_moment: MlpGrads<T>,
    pub step_count: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &MlpParams<T>, config: AdamConfig) -> Self {
        Self {
            config,
            first_moment: params.zero_grads(),
            second_moment: params.zero_grads(),
            step_count: 0,
        }
    }

    /// Applies one bias-corrected Adam update. Non-finite gradients are
    /// refused and leave both params and state untouched.
    pub fn step(&mut self, params: &mut MlpParams<T>, grads: &MlpGrads<T>) -> Result<()> {
        if grads.layers.len() != params.layers().len()
            || grads
                .layers
                .iter()
                .zip(params.layers())
                .any(|(g, p)| g.weight.shape() != p.weight.shape() || g.bias.len() != p.bias.len())
        {
            return Err(shape_err!("gradient layout does not match parameters"));
        }
        if !grads.is_finite() {
            return Err(numeric_err!(
                "refusing Adam step {} with non-finite gradients",
                self.step_count + 1
            ));
        }
        self.step_count += 1;
        let coeffs = Coefficients::new(&self.config, self.step_count);
        for (((p, g), m), v) in params
            .layers_mut()
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.first_moment.layers)
            .zip(&mut self.second_moment.layers)
        {
            coeffs.apply(
                p.weight.data_mut(),
                g.weight.data(),
                m.weight.data_mut(),
                v.weight.data_mut(),
            );
            coeffs.apply(&mut p.bias, &g.bias, &mut m.bias, &mut v.bias);
        }
        Ok(())
    }
}

/// Adam over a flat parameter slice; used for scalars such as the SAC
/// temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatAdam {
    pub config: AdamConfig,
    pub first_moment: Vec<f32>,
    pub second_moment: Vec<f32>,
    pub step_count: u64,
}

impl FlatAdam {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            config,
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step_count: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32]) -> Result<()> {
        if params.len() != grads.len() || grads.len() != self.first_moment.len() {
            return Err(shape_err!("flat Adam length mismatch"));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(numeric_err!("refusing Adam step with non-finite gradients"));
        }
        self.step_count += 1;
        Coefficients::new(&self.config, self.step_count).apply(
            params,
            grads,
            &mut self.first_moment,
            &mut self.second_moment,
        );
        Ok(())
    }
}

struct Coefficients {
    beta1: f64,
    beta2: f64,
    step_size: f64,
    bias2_sqrt: f64,
    epsilon: f64,
}

impl Coefficients {
    fn new(config: &AdamConfig, t: u64) -> Self {
        let t = t as i32;
        let bc1 = 1.0 - config.beta1.powi(t);
        let bc2 = 1.0 - config.beta2.powi(t);
        Self {
            beta1: config.beta1,
            beta2: config.beta2,
            step_size: config.lr / bc1,
            bias2_sqrt: bc2.sqrt(),
            epsilon: config.epsilon,
        }
    }

    // p -= lr * m_hat / (sqrt(v_hat) + eps), written with the bias
    // corrections folded into the step size and denominator.
    fn apply<T: Scalar>(&self, p: &mut [T], g: &[T], m: &mut [T], v: &mut [T]) {
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one = T::one();
        let step = T::from_f64(self.step_size);
        let bias2 = T::from_f64(self.bias2_sqrt);
        let eps = T::from_f64(self.epsilon);
        for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            *p = *p - step * *m / (v.sqrt() / bias2 + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Activation, Dense, Tensor2};

    fn scalar_net(w: f64) -> MlpParams<f64> {
        MlpParams::new(
            vec![Dense {
                weight: Tensor2::filled(1, 1, w),
                bias: vec![0.0],
            }],
            Activation::Relu,
            Activation::Identity,
        )
        .unwrap()
    }

    fn grads(g: f64) -> MlpGrads<f64> {
        MlpGrads {
            layers: vec![Dense {
                weight: Tensor2::filled(1, 1, g),
                bias: vec![0.0],
            }],
        }
    }

    #[test]
    fn zero_grads_leave_params_and_moments() {
        let mut p = scalar_net(0.7);
        let mut s = AdamState::new(&p, AdamConfig::default());
        s.step(&mut p, &grads(0.0)).unwrap();
        assert_eq!(p.layers()[0].weight.get(0, 0), 0.7);
        assert_eq!(s.first_moment.norm_sq(), 0.0);
        assert_eq!(s.second_moment.norm_sq(), 0.0);
        assert_eq!(s.step_count, 1);
    }

    // First step: m = 0.1, v = 0.001, m_hat = 1, v_hat = 1, so the
    // parameter moves by lr / (1 + eps).
    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = scalar_net(0.0);
        let mut s = AdamState::new(&p, AdamConfig::with_lr(0.1));
        s.step(&mut p, &grads(1.0)).unwrap();
        let w = p.layers()[0].weight.get(0, 0);
        assert!((w - (-0.1 / (1.0 + 1e-8))).abs() < 1e-12, "{w}");
    }

    #[test]
    fn repeated_steps_descend_monotonically() {
        let mut p = scalar_net(1.0);
        let mut s = AdamState::new(&p, AdamConfig::with_lr(0.01));
        let mut last = 1.0;
        for _ in 0..2 {
            s.step(&mut p, &grads(0.5)).unwrap();
            let w = p.layers()[0].weight.get(0, 0);
            assert!(w < last);
            last = w;
        }
    }

    #[test]
    fn non_finite_grads_are_refused() {
        let mut p = scalar_net(1.0);
        let mut s = AdamState::new(&p, AdamConfig::default());
        let before = (p.clone(), s.clone());
        assert!(s.step(&mut p, &grads(f64::NAN)).is_err());
        assert_eq!(before.0, p);
        assert_eq!(before.1, s);
    }

    #[test]
    fn flat_adam_matches_closed_form() {
        let mut x = [0.0f32];
        let mut opt = FlatAdam::new(1, AdamConfig::with_lr(0.1));
        opt.step(&mut x, &[1.0]).unwrap();
        assert!((x[0] + 0.1).abs() < 1e-6);
        assert!(opt.step(&mut x, &[f32::INFINITY]).is_err());
        assert_eq!(opt.step_count, 1);
    }
}
