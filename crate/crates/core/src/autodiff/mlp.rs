use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{matmul_nn, matmul_nt, matmul_tn, Scalar, Tensor2};
use crate::error::{numeric_err, shape_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    fn apply<T: Scalar>(self, z: &mut [T]) {
        match self {
            Activation::Identity => {}
            Activation::Relu => z.iter_mut().for_each(|v| *v = v.max(T::zero())),
            Activation::Tanh => z.iter_mut().for_each(|v| *v = v.tanh()),
        }
    }

    /// Multiplies `grad` in place by the derivative, expressed through the
    /// activation's output `y`.
    fn backprop<T: Scalar>(self, y: &[T], grad: &mut [T]) {
        match self {
            Activation::Identity => {}
            Activation::Relu => {
                for (g, &y) in grad.iter_mut().zip(y) {
                    if y <= T::zero() {
                        *g = T::zero();
                    }
                }
            }
            Activation::Tanh => {
                for (g, &y) in grad.iter_mut().zip(y) {
                    *g = *g * (T::one() - y * y);
                }
            }
        }
    }
}

/// One affine layer. `weight` is `[out x in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T = f32> {
    pub weight: Tensor2<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Tensor2::zeros(out_dim, in_dim),
            bias: vec![T::zero(); out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    fn is_finite(&self) -> bool {
        self.weight.is_finite() && self.bias.iter().all(|b| b.is_finite())
    }
}

/// Multi-layer perceptron parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<T = f32> {
    layers: Vec<Dense<T>>,
    hidden_activation: Activation,
    output_activation: Activation,
}

/// Gradients with the same layout as [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads<T = f32> {
    pub layers: Vec<Dense<T>>,
}

impl<T: Scalar> MlpGrads<T> {
    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Dense::is_finite)
    }

    pub fn norm_sq(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weight.norm_sq() + l.bias.iter().map(|b| b.as_f64().powi(2)).sum::<f64>())
            .sum()
    }

    /// Element-wise `self += other`.
    pub fn accumulate(&mut self, other: &Self) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weight.data_mut().iter_mut().zip(b.weight.data()) {
                *x = *x + *y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x = *x + *y;
            }
        }
    }
}

/// Activations recorded by one forward pass; consumed by one backward pass.
#[derive(Debug)]
pub struct GradTape<T = f32> {
    // activations[0] is the input, activations[i + 1] the output of layer i.
    activations: Vec<Tensor2<T>>,
    signature: Vec<(usize, usize)>,
}

impl<T: Scalar> GradTape<T> {
    pub fn input(&self) -> &Tensor2<T> {
        &self.activations[0]
    }

    pub fn output(&self) -> &Tensor2<T> {
        self.activations.last().expect("tape holds the input")
    }

    /// Outputs of the hidden layers, in order.
    pub fn hidden(&self) -> &[Tensor2<T>] {
        let n = self.activations.len();
        &self.activations[1..n - 1]
    }

    pub fn into_output(mut self) -> Tensor2<T> {
        self.activations.pop().expect("tape holds the input")
    }
}

impl<T: Scalar> MlpParams<T> {
    pub fn new(
        layers: Vec<Dense<T>>,
        hidden_activation: Activation,
        output_activation: Activation,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(shape_err!("an MLP needs at least one layer"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(shape_err!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].out_dim(),
                    i + 1,
                    pair[1].in_dim()
                ));
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return Err(shape_err!(
                    "layer {i} bias has {} entries for {} outputs",
                    l.bias.len(),
                    l.out_dim()
                ));
            }
            if !l.is_finite() {
                return Err(numeric_err!("layer {i} has non-finite parameters"));
            }
        }
        Ok(Self {
            layers,
            hidden_activation,
            output_activation,
        })
    }

    /// Uniform `±1/sqrt(fan_in)` initialization for weights and biases.
    /// `sizes` lists every width including input and output.
    pub fn init<R: Rng + ?Sized>(
        sizes: &[usize],
        hidden_activation: Activation,
        output_activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(shape_err!("invalid layer sizes {sizes:?}"));
        }
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut draw = || T::from_f64(rng.random_range(-bound..=bound));
                let weight: Vec<T> = (0..fan_in * fan_out).map(|_| draw()).collect();
                let bias: Vec<T> = (0..fan_out).map(|_| draw()).collect();
                Dense {
                    weight: Tensor2::new(fan_out, fan_in, weight).expect("sized above"),
                    bias,
                }
            })
            .collect();
        Self::new(layers, hidden_activation, output_activation)
    }

    pub fn layers(&self) -> &[Dense<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense<T>] {
        &mut self.layers
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden_activation
    }

    pub fn output_activation(&self) -> Activation {
        self.output_activation
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Layer widths including input and output.
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.in_dim()];
        s.extend(self.layers.iter().map(Dense::out_dim));
        s
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.data().len() + l.bias.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Dense::is_finite)
    }

    /// Multiplies the last layer's weights and bias by `factor`.
    pub fn scale_output_layer(&mut self, factor: T) {
        let last = self.layers.last_mut().expect("non-empty");
        last.weight
            .data_mut()
            .iter_mut()
            .for_each(|w| *w = *w * factor);
        last.bias.iter_mut().for_each(|b| *b = *b * factor);
    }

    pub fn zero_grads(&self) -> MlpGrads<T> {
        MlpGrads {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.in_dim(), l.out_dim()))
                .collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> MlpParams<U> {
        MlpParams {
            layers: self
                .layers
                .iter()
                .map(|l| Dense {
                    weight: l.weight.cast(),
                    bias: l.bias.iter().map(|&b| U::from_f64(b.as_f64())).collect(),
                })
                .collect(),
            hidden_activation: self.hidden_activation,
            output_activation: self.output_activation,
        }
    }

    fn signature(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .map(|l| (l.in_dim(), l.out_dim()))
            .collect()
    }

    fn activation_of(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers.len() {
            self.output_activation
        } else {
            self.hidden_activation
        }
    }

    /// Forward pass over a `[batch x in_dim]` input.
    pub fn forward(&self, input: &Tensor2<T>) -> Result<(Tensor2<T>, GradTape<T>)> {
        if input.cols() != self.in_dim() {
            return Err(shape_err!(
                "input has {} columns, network expects {}",
                input.cols(),
                self.in_dim()
            ));
        }
        if !input.is_finite() {
            return Err(numeric_err!("non-finite network input"));
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let prev = activations.last().expect("non-empty");
            let mut z = matmul_nt(prev, &layer.weight);
            let cols = z.cols();
            for row in z.data_mut().chunks_exact_mut(cols) {
                for (v, &b) in row.iter_mut().zip(&layer.bias) {
                    *v = *v + b;
                }
            }
            self.activation_of(i).apply(z.data_mut());
            activations.push(z);
        }
        let output = activations.last().expect("non-empty").clone();
        if !output.is_finite() {
            return Err(numeric_err!("network produced non-finite output"));
        }
        Ok((
            output,
            GradTape {
                activations,
                signature: self.signature(),
            },
        ))
    }

    /// Forward pass without keeping a tape.
    pub fn predict(&self, input: &Tensor2<T>) -> Result<Tensor2<T>> {
        Ok(self.forward(input)?.1.into_output())
    }

    /// Batch-summed parameter gradients for a loss whose gradient at the
    /// network output is `output_grad`.
    pub fn backward(&self, tape: GradTape<T>, output_grad: &Tensor2<T>) -> Result<MlpGrads<T>> {
        let (grads, _) = self.backward_impl(tape, output_grad, true, false)?;
        Ok(grads.expect("requested"))
    }

    /// Parameter gradients plus the gradient with respect to the input.
    pub fn backward_full(
        &self,
        tape: GradTape<T>,
        output_grad: &Tensor2<T>,
    ) -> Result<(MlpGrads<T>, Tensor2<T>)> {
        let (grads, input) = self.backward_impl(tape, output_grad, true, true)?;
        Ok((grads.expect("requested"), input.expect("requested")))
    }

    /// Gradient with respect to the input only; skips weight gradients.
    pub fn backward_input(
        &self,
        tape: GradTape<T>,
        output_grad: &Tensor2<T>,
    ) -> Result<Tensor2<T>> {
        let (_, input) = self.backward_impl(tape, output_grad, false, true)?;
        Ok(input.expect("requested"))
    }

    fn backward_impl(
        &self,
        tape: GradTape<T>,
        output_grad: &Tensor2<T>,
        want_params: bool,
        want_input: bool,
    ) -> Result<(Option<MlpGrads<T>>, Option<Tensor2<T>>)> {
        if tape.signature != self.signature() {
            return Err(shape_err!(
                "tape recorded for layers {:?}, params have {:?}",
                tape.signature,
                self.signature()
            ));
        }
        let out = tape.output();
        if output_grad.shape() != out.shape() {
            return Err(shape_err!(
                "output gradient is {:?}, forward output was {:?}",
                output_grad.shape(),
                out.shape()
            ));
        }
        let mut acts = tape.activations;
        let mut grad = output_grad.clone();
        let mut layer_grads = Vec::with_capacity(self.layers.len());
        let mut input_grad = None;
        for i in (0..self.layers.len()).rev() {
            let y = acts.pop().expect("one activation per layer");
            self.activation_of(i).backprop(y.data(), grad.data_mut());
            drop(y);
            let x = acts.last().expect("layer input");
            let layer = &self.layers[i];
            if want_params {
                let dw = matmul_tn(&grad, x);
                let mut db = vec![T::zero(); layer.out_dim()];
                for row in grad.data().chunks_exact(layer.out_dim()) {
                    for (s, &g) in db.iter_mut().zip(row) {
                        *s = *s + g;
                    }
                }
                layer_grads.push(Dense {
                    weight: dw,
                    bias: db,
                });
            }
            if i > 0 || want_input {
                let next = matmul_nn(&grad, &layer.weight);
                if i == 0 {
                    input_grad = Some(next);
                    break;
                }
                grad = next;
            }
        }
        let grads = want_params.then(|| {
            layer_grads.reverse();
            MlpGrads {
                layers: layer_grads,
            }
        });
        Ok((grads, input_grad))
    }
}
