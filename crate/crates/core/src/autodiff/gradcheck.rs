//! Central finite-difference verification of [`MlpParams::backward`].

use super::mlp::{Activation, MlpParams};
use super::tensor::{Scalar, Tensor2};
use crate::error::Result;

/// Outcome of a gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Worst `|analytic - numeric| / max(|analytic|, |numeric|, floor)` over
    /// all compared components, where `floor = sqrt(machine epsilon)`.
    pub max_relative_error: f64,
    pub compared: usize,
    /// Components whose `±h` probes switched a ReLU on or off; the loss is
    /// not differentiable across such a kink so they are not compared.
    pub skipped_kinks: usize,
}

/// Compares backprop gradients of `loss_fn(net(input))` with central
/// differences of step `h`. `loss_fn` returns the loss and its gradient with
/// respect to the network output.
pub fn finite_difference_check<T, F>(
    params: &MlpParams<T>,
    input: &Tensor2<T>,
    loss_fn: F,
    h: T,
) -> Result<GradCheck>
where
    T: Scalar,
    F: Fn(&Tensor2<T>) -> (T, Tensor2<T>),
{
    let (output, tape) = params.forward(input)?;
    let (_, output_grad) = loss_fn(&output);
    let base_pattern = relu_pattern(params, tape.hidden());
    let analytic = params.backward(tape, &output_grad)?;

    let floor = T::epsilon().sqrt().as_f64();
    let mut probe = params.clone();
    let mut report = GradCheck {
        max_relative_error: 0.0,
        compared: 0,
        skipped_kinks: 0,
    };

    let eval = |net: &MlpParams<T>| -> Result<(f64, Vec<bool>)> {
        let (out, tape) = net.forward(input)?;
        let pattern = relu_pattern(net, tape.hidden());
        Ok((loss_fn(&out).0.as_f64(), pattern))
    };

    for l in 0..params.layers().len() {
        let n_weights = params.layers()[l].weight.data().len();
        let n_bias = params.layers()[l].bias.len();
        for idx in 0..n_weights + n_bias {
            let grad = if idx < n_weights {
                analytic.layers[l].weight.data()[idx]
            } else {
                analytic.layers[l].bias[idx - n_weights]
            };
            let original = *slot(&mut probe, l, idx, n_weights);
            *slot(&mut probe, l, idx, n_weights) = original + h;
            let (plus, plus_pattern) = eval(&probe)?;
            *slot(&mut probe, l, idx, n_weights) = original - h;
            let (minus, minus_pattern) = eval(&probe)?;
            *slot(&mut probe, l, idx, n_weights) = original;

            if plus_pattern != base_pattern || minus_pattern != base_pattern {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h.as_f64());
            let analytic = grad.as_f64();
            let denom = analytic.abs().max(numeric.abs()).max(floor);
            let err = (analytic - numeric).abs() / denom;
            report.max_relative_error = report.max_relative_error.max(err);
            report.compared += 1;
        }
    }
    Ok(report)
}

fn slot<T: Scalar>(net: &mut MlpParams<T>, layer: usize, idx: usize, n_weights: usize) -> &mut T {
    let l = &mut net.layers_mut()[layer];
    if idx < n_weights {
        &mut l.weight.data_mut()[idx]
    } else {
        &mut l.bias[idx - n_weights]
    }
}

fn relu_pattern<T: Scalar>(net: &MlpParams<T>, hidden: &[Tensor2<T>]) -> Vec<bool> {
    if net.hidden_activation() != Activation::Relu {
        return Vec::new();
    }
    hidden
        .iter()
        .flat_map(|h| h.data().iter().map(|&v| v > T::zero()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Dense;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn quadratic(out: &Tensor2<f64>) -> (f64, Tensor2<f64>) {
        let loss = 0.5 * out.norm_sq();
        (loss, out.clone())
    }

    fn batch(rows: usize, cols: usize) -> Tensor2<f64> {
        Tensor2::new(
            rows,
            cols,
            (0..rows * cols)
                .map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.2)
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn quadratic_loss_on_linear_net() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = MlpParams::<f64>::init(&[4, 3], Activation::Relu, Activation::Identity, &mut rng)
            .unwrap();
        let r = finite_difference_check(&net, &batch(6, 4), quadratic, 1e-3).unwrap();
        assert!(r.max_relative_error < 1e-6, "{r:?}");
        assert_eq!(r.compared, 15);
    }

    #[test]
    fn zero_loss_has_zero_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = MlpParams::<f64>::init(&[3, 8, 2], Activation::Relu, Activation::Tanh, &mut rng)
            .unwrap();
        let zero = |out: &Tensor2<f64>| (0.0, Tensor2::zeros(out.rows(), out.cols()));
        let r = finite_difference_check(&net, &batch(4, 3), zero, 1e-3).unwrap();
        assert_eq!(r.max_relative_error, 0.0);
    }

    #[test]
    fn tanh_output_net_within_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = MlpParams::<f64>::init(
            &[3, 12, 10, 2],
            Activation::Relu,
            Activation::Tanh,
            &mut rng,
        )
        .unwrap();
        let target = batch(5, 2);
        let loss = move |out: &Tensor2<f64>| {
            let mut g = out.clone();
            let mut l = 0.0;
            for (v, t) in g.data_mut().iter_mut().zip(target.data()) {
                let d = *v - t;
                l += 0.5 * d * d;
                *v = d;
            }
            (l, g)
        };
        let r = finite_difference_check(&net, &batch(5, 3), loss, 1e-3).unwrap();
        assert!(r.max_relative_error < 1e-4, "{r:?}");
        assert!(r.compared > 0);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // Loss reports a gradient of the wrong sign.
        let net = MlpParams::<f64>::new(
            vec![Dense {
                weight: Tensor2::filled(1, 1, 0.5),
                bias: vec![0.1],
            }],
            Activation::Relu,
            Activation::Identity,
        )
        .unwrap();
        let bad = |out: &Tensor2<f64>| {
            let mut g = out.clone();
            g.data_mut().iter_mut().for_each(|v| *v = -*v);
            (0.5 * out.norm_sq(), g)
        };
        let r = finite_difference_check(&net, &batch(3, 1), bad, 1e-3).unwrap();
        assert!(r.max_relative_error > 1.0);
    }
}
