use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

use super::{check_len, fill_uniform, gemm, glorot_limit, Params, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    None,
}

impl Activation {
    pub fn apply<S: Scalar>(self, z: S) -> S {
        match self {
            Activation::Relu => z.max(S::zero()),
            Activation::Sigmoid => super::sigmoid(z),
            Activation::None => z,
        }
    }

    /// Derivative expressed through the activation's output.
    fn grad_from_output<S: Scalar>(self, y: S) -> S {
        match self {
            Activation::Relu => {
                if y > S::zero() {
                    S::one()
                } else {
                    S::zero()
                }
            }
            Activation::Sigmoid => y * (S::one() - y),
            Activation::None => S::one(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::None => "none",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "sigmoid" => Some(Activation::Sigmoid),
            "none" => Some(Activation::None),
            _ => None,
        }
    }
}

/// Fully connected layer `y = act(W x + b)` with `W: [out × in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<S = f32> {
    weights: Tensor<S>,
    bias: Tensor<S>,
    activation: Activation,
}

impl<S: Scalar> DenseLayer<S> {
    pub fn zeros(input: usize, output: usize, activation: Activation) -> Self {
        DenseLayer {
            weights: Tensor::zeros(&[output, input]),
            bias: Tensor::zeros(&[output]),
            activation,
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot(input: usize, output: usize, activation: Activation, rng: &mut SeededRng) -> Self {
        let mut layer = Self::zeros(input, output, activation);
        fill_uniform(&mut layer.weights, glorot_limit(input, output), rng);
        layer
    }

    pub fn from_parts(weights: Tensor<S>, bias: Tensor<S>, activation: Activation) -> Result<Self> {
        let ok = weights.shape().len() == 2 && bias.shape() == [weights.shape()[0]];
        if !ok {
            return Err(Error::ShapeMismatch {
                expected: vec![bias.len()],
                actual: weights.shape().to_vec(),
            });
        }
        Ok(DenseLayer { weights, bias, activation })
    }

    pub fn input_dim(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &Tensor<S> {
        &self.weights
    }

    pub fn bias(&self) -> &Tensor<S> {
        &self.bias
    }

    pub fn weights_mut(&mut self) -> &mut Tensor<S> {
        &mut self.weights
    }

    pub fn bias_mut(&mut self) -> &mut Tensor<S> {
        &mut self.bias
    }

    pub fn cast<T: Scalar>(&self) -> DenseLayer<T> {
        DenseLayer { weights: self.weights.cast(), bias: self.bias.cast(), activation: self.activation }
    }

    /// Pre-activations for `batch` row-major inputs.
    pub fn preact_batch(&self, x: &[S], batch: usize) -> Vec<S> {
        let (i, o) = (self.input_dim(), self.output_dim());
        debug_assert_eq!(x.len(), batch * i);
        let mut z = Vec::with_capacity(batch * o);
        for _ in 0..batch {
            z.extend_from_slice(self.bias.data());
        }
        gemm(batch, i, o, S::one(), x, false, self.weights.data(), true, S::one(), &mut z);
        z
    }

    pub fn forward_batch(&self, x: &[S], batch: usize) -> Vec<S> {
        let mut z = self.preact_batch(x, batch);
        if self.activation != Activation::None {
            z.iter_mut().for_each(|v| *v = self.activation.apply(*v));
        }
        z
    }

    /// Backward pass given the gradient w.r.t. the layer output `y`.
    /// Accumulates into `grad` and returns dL/dx when `want_dx`.
    pub fn backward_batch(
        &self,
        x: &[S],
        y: &[S],
        dy: &[S],
        batch: usize,
        grad: &mut DenseLayer<S>,
        want_dx: bool,
    ) -> Option<Vec<S>> {
        let dz: Vec<S> = match self.activation {
            Activation::None => dy.to_vec(),
            act => y.iter().zip(dy).map(|(&y, &g)| g * act.grad_from_output(y)).collect(),
        };
        self.backward_preact(x, &dz, batch, grad, want_dx)
    }

    /// Backward pass given the gradient w.r.t. the pre-activation `z`.
    pub fn backward_preact(
        &self,
        x: &[S],
        dz: &[S],
        batch: usize,
        grad: &mut DenseLayer<S>,
        want_dx: bool,
    ) -> Option<Vec<S>> {
        let (i, o) = (self.input_dim(), self.output_dim());
        debug_assert_eq!(dz.len(), batch * o);
        gemm(o, batch, i, S::one(), dz, true, x, false, S::one(), grad.weights.data_mut());
        let db = grad.bias.data_mut();
        for row in dz.chunks_exact(o) {
            for (b, &g) in db.iter_mut().zip(row) {
                *b += g;
            }
        }
        want_dx.then(|| {
            let mut dx = vec![S::zero(); batch * i];
            gemm(batch, o, i, S::one(), dz, false, self.weights.data(), false, S::zero(), &mut dx);
            dx
        })
    }
}

impl<S: Scalar> Params<S> for DenseLayer<S> {
    fn named_tensors(&self) -> Vec<(String, &Tensor<S>)> {
        vec![("weight".into(), &self.weights), ("bias".into(), &self.bias)]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        vec![&mut self.weights, &mut self.bias]
    }
}

/// Single-vector forward pass with shape validation.
pub fn dense_forward<S: Scalar>(layer: &DenseLayer<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    if x.shape() != [layer.input_dim()] {
        return Err(Error::ShapeMismatch { expected: vec![layer.input_dim()], actual: x.shape().to_vec() });
    }
    Ok(Tensor::vector(layer.forward_batch(x.data(), 1)))
}

/// Gradient arriving at the top of an [`Mlp`].
pub enum OutputGrad<'a, S> {
    /// dL/dy for the last layer's activated output.
    Output(&'a [S]),
    /// dL/dz for the last layer's pre-activation (e.g. fused sigmoid + BCE).
    PreActivation(&'a [S]),
}

/// Activations recorded by [`Mlp::forward_traced`]; `acts[0]` is the input.
#[derive(Debug, Clone)]
pub struct MlpTrace<S> {
    acts: Vec<Vec<S>>,
    batch: usize,
}

impl<S: Scalar> MlpTrace<S> {
    pub fn output(&self) -> &[S] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

/// Stack of dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<S = f32> {
    layers: Vec<DenseLayer<S>>,
}

impl<S: Scalar> Mlp<S> {
    pub fn new(layers: Vec<DenseLayer<S>>) -> Result<Self> {
        for pair in layers.windows(2) {
            check_len(pair[0].output_dim(), pair[1].input_dim())?;
        }
        Ok(Mlp { layers })
    }

    /// Layers with the given widths (`dims[0]` is the input), every layer
    /// using `hidden` except the last, which uses `last`.
    pub fn glorot(dims: &[usize], hidden: Activation, last: Activation, rng: &mut SeededRng) -> Self {
        let n = dims.len().saturating_sub(1);
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { last } else { hidden };
                DenseLayer::glorot(dims[i], dims[i + 1], act, rng)
            })
            .collect();
        Mlp { layers }
    }

    pub fn empty() -> Self {
        Mlp { layers: Vec::new() }
    }

    pub fn layers(&self) -> &[DenseLayer<S>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer<S>] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, DenseLayer::input_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, DenseLayer::output_dim)
    }

    pub fn zeros_like(&self) -> Self {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| DenseLayer::zeros(l.input_dim(), l.output_dim(), l.activation))
                .collect(),
        }
    }

    pub fn cast<T: Scalar>(&self) -> Mlp<T> {
        Mlp { layers: self.layers.iter().map(DenseLayer::cast).collect() }
    }

    pub fn forward_batch(&self, x: &[S], batch: usize) -> Vec<S> {
        let mut cur = x.to_vec();
        for layer in &self.layers {
            cur = layer.forward_batch(&cur, batch);
        }
        cur
    }

    pub fn forward_traced(&self, x: Vec<S>, batch: usize) -> MlpTrace<S> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x);
        for layer in &self.layers {
            let next = layer.forward_batch(acts.last().expect("input present"), batch);
            acts.push(next);
        }
        MlpTrace { acts, batch }
    }

    /// Accumulates parameter gradients into `grad` and returns dL/dinput when `want_dx`.
    pub fn backward(
        &self,
        trace: Option<&MlpTrace<S>>,
        top: OutputGrad<'_, S>,
        grad: &mut Mlp<S>,
        want_dx: bool,
    ) -> Result<Option<Vec<S>>> {
        let trace = trace.ok_or(Error::NoForwardRecorded)?;
        if trace.acts.len() != self.layers.len() + 1 {
            return Err(Error::NoForwardRecorded);
        }
        let n = self.layers.len();
        if n == 0 {
            return Ok(want_dx.then(|| match top {
                OutputGrad::Output(g) | OutputGrad::PreActivation(g) => g.to_vec(),
            }));
        }
        let batch = trace.batch;
        let mut upstream: Option<Vec<S>> = None;
        for idx in (0..n).rev() {
            let layer = &self.layers[idx];
            let x = &trace.acts[idx];
            let need_dx = want_dx || idx > 0;
            let g = &mut grad.layers[idx];
            upstream = match (&upstream, idx + 1 == n, &top) {
                (None, true, OutputGrad::PreActivation(dz)) => {
                    check_len(batch * layer.output_dim(), dz.len())?;
                    layer.backward_preact(x, dz, batch, g, need_dx)
                }
                (None, true, OutputGrad::Output(dy)) => {
                    check_len(batch * layer.output_dim(), dy.len())?;
                    layer.backward_batch(x, &trace.acts[idx + 1], dy, batch, g, need_dx)
                }
                (Some(dy), _, _) => layer.backward_batch(x, &trace.acts[idx + 1], dy, batch, g, need_dx),
                (None, false, _) => unreachable!("upstream gradient missing"),
            };
        }
        Ok(if want_dx { upstream } else { None })
    }
}

impl<S: Scalar> Params<S> for Mlp<S> {
    fn named_tensors(&self) -> Vec<(String, &Tensor<S>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [(format!("{i}.weight"), &l.weights), (format!("{i}.bias"), &l.bias)]
            })
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weights, &mut l.bias]).collect()
    }
}
