//! Dense feed-forward networks with analytic backpropagation and Adam.
//!
//! Parameters live in one flat vector. The layout is fixed and shared by
//! every consumer that flattens or rebuilds a network (checkpoints, adapter
//! targets, head reconstruction):
//!
//! ```text
//! layer 0: W0 (in0 x out0, row-major) then b0 (out0)
//! layer 1: W1 (in1 x out1, row-major) then b1 (out1)
//! ...
//! ```
//!
//! Row `k` of a weight matrix holds the weights leaving input unit `k`, so a
//! layer computes `y[j] = act(b[j] + sum_k x[k] * W[k][j])`.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::math;
use thiserror::Error;

/// Current version of the serialized network container.
pub const NET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("layer dimensions must list at least two positive sizes, got {0:?}")]
    BadDims(Vec<usize>),
    #[error("expected input of length {expected} (x batch {batch}), got {got}")]
    InputDim {
        expected: usize,
        batch: usize,
        got: usize,
    },
    #[error("output gradient has length {got}, expected {expected}")]
    OutputGradDim { expected: usize, got: usize },
    #[error("parameter vector has length {got}, network needs {expected}")]
    ParamLen { expected: usize, got: usize },
    #[error("gradient bundle has length {got}, network has {expected} parameters")]
    GradShape { expected: usize, got: usize },
    #[error("non-finite gradient component at flat index {index}")]
    NonFiniteGradient { index: usize },
    #[error("non-finite parameter at flat index {index}")]
    NonFiniteParam { index: usize },
    #[error("unsupported network format version {0}")]
    Version(u32),
}

pub type Result<T> = core::result::Result<T, NnError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, xs: &mut [f64]) {
        match self {
            Activation::Linear => {}
            Activation::Relu => xs.iter_mut().for_each(|x| {
                if *x < 0.0 {
                    *x = 0.0
                }
            }),
            Activation::Tanh => xs.iter_mut().for_each(|x| *x = math::tanh(*x)),
        }
    }

    /// Multiplies `grad` in place by the derivative, expressed through the
    /// activation's output `ys`.
    #[inline]
    fn chain(self, ys: &[f64], grad: &mut [f64]) {
        match self {
            Activation::Linear => {}
            Activation::Relu => grad.iter_mut().zip(ys).for_each(|(g, &y)| {
                if y <= 0.0 {
                    *g = 0.0
                }
            }),
            Activation::Tanh => grad
                .iter_mut()
                .zip(ys)
                .for_each(|(g, &y)| *g *= 1.0 - y * y),
        }
    }
}

/// Number of parameters of a dense network with the given layer sizes.
pub fn param_count_for(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
        return Err(NnError::BadDims(dims.to_vec()));
    }
    Ok(())
}

/// Location of one layer inside the flat parameter vector.
#[derive(Clone, Copy, Debug)]
struct LayerSpan {
    w: usize,
    b: usize,
    fan_in: usize,
    fan_out: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NetCheckpoint", into = "NetCheckpoint")]
pub struct DenseNet {
    dims: Vec<usize>,
    hidden: Activation,
    output: Activation,
    params: Vec<f64>,
}

/// Activations of every layer for one batch, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct Tape {
    batch: usize,
    /// `acts[0]` is the input, `acts[l + 1]` the output of layer `l`.
    acts: Vec<Vec<f64>>,
}

impl Tape {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("tape always holds the input")
    }

    pub fn input(&self) -> &[f64] {
        &self.acts[0]
    }
}

/// Gradient with respect to every parameter of one network, in the flat
/// parameter layout.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle {
    values: Vec<f64>,
}

impl GradientBundle {
    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![0.0; len],
        }
    }

    pub fn zeros_like(net: &DenseNet) -> Self {
        Self::zeros(net.param_count())
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn add_assign(&mut self, other: &GradientBundle) -> Result<()> {
        if other.len() != self.len() {
            return Err(NnError::GradShape {
                expected: self.len(),
                got: other.len(),
            });
        }
        self.values
            .iter_mut()
            .zip(&other.values)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn fill_zero(&mut self) {
        self.values.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    pub fn l2_norm(&self) -> f64 {
        math::sqrt(self.values.iter().map(|v| v * v).sum::<f64>())
    }
}

impl DenseNet {
    /// Zero-parameter network.
    pub fn zeros(dims: &[usize], hidden: Activation, output: Activation) -> Result<Self> {
        check_dims(dims)?;
        Ok(Self {
            dims: dims.to_vec(),
            hidden,
            output,
            params: vec![0.0; param_count_for(dims)],
        })
    }

    /// Fan-in uniform initialization: every weight and bias of a layer is
    /// drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn new<R: Rng + ?Sized>(
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut net = Self::zeros(dims, hidden, output)?;
        for l in 0..net.num_layers() {
            let span = net.span(l);
            let bound = 1.0 / math::sqrt(span.fan_in as f64);
            let end = span.b + span.fan_out;
            for p in &mut net.params[span.w..end] {
                *p = rng.random_range(-bound..bound);
            }
        }
        Ok(net)
    }

    /// Rebuilds a network from a flat parameter vector (inverse of
    /// [`DenseNet::flatten`]).
    pub fn unflatten(
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        params: Vec<f64>,
    ) -> Result<Self> {
        check_dims(dims)?;
        let expected = param_count_for(dims);
        if params.len() != expected {
            return Err(NnError::ParamLen {
                expected,
                got: params.len(),
            });
        }
        Ok(Self {
            dims: dims.to_vec(),
            hidden,
            output,
            params,
        })
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.params.clone()
    }

    /// Redraws the last layer from `U(-bound, bound)`.
    pub fn reinit_last_layer<R: Rng + ?Sized>(&mut self, bound: f64, rng: &mut R) {
        let span = self.span(self.num_layers() - 1);
        for p in &mut self.params[span.w..span.b + span.fan_out] {
            *p = if bound > 0.0 {
                rng.random_range(-bound..bound)
            } else {
                0.0
            };
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden
    }

    pub fn output_activation(&self) -> Activation {
        self.output
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        self.dims[self.dims.len() - 1]
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn weights(&self, layer: usize) -> &[f64] {
        let s = self.span(layer);
        &self.params[s.w..s.b]
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        let s = self.span(layer);
        &self.params[s.b..s.b + s.fan_out]
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    fn span(&self, layer: usize) -> LayerSpan {
        let mut off = 0;
        for l in 0..layer {
            off += self.dims[l] * self.dims[l + 1] + self.dims[l + 1];
        }
        let (fan_in, fan_out) = (self.dims[layer], self.dims[layer + 1]);
        LayerSpan {
            w: off,
            b: off + fan_in * fan_out,
            fan_in,
            fan_out,
        }
    }

    fn activation_of(&self, layer: usize) -> Activation {
        if layer + 1 == self.num_layers() {
            self.output
        } else {
            self.hidden
        }
    }

    /// Evaluates the network on a single input vector.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let tape = self.forward_batch(input, 1)?;
        Ok(tape.acts.into_iter().last().unwrap_or_default())
    }

    /// Evaluates a row-major batch (`batch` rows of `input_dim` values) and
    /// records every layer's activations.
    pub fn forward_batch(&self, input: &[f64], batch: usize) -> Result<Tape> {
        if input.len() != batch * self.input_dim() {
            return Err(NnError::InputDim {
                expected: self.input_dim(),
                batch,
                got: input.len(),
            });
        }
        let mut acts = Vec::with_capacity(self.dims.len());
        acts.push(input.to_vec());
        for l in 0..self.num_layers() {
            let s = self.span(l);
            let w = &self.params[s.w..s.b];
            let b = &self.params[s.b..s.b + s.fan_out];
            let x = &acts[l];
            let mut y = vec![0.0; batch * s.fan_out];
            for (xr, yr) in x.chunks_exact(s.fan_in).zip(y.chunks_exact_mut(s.fan_out)) {
                yr.copy_from_slice(b);
                for (&xk, wk) in xr.iter().zip(w.chunks_exact(s.fan_out)) {
                    if xk != 0.0 {
                        yr.iter_mut().zip(wk).for_each(|(o, &wv)| *o += xk * wv);
                    }
                }
            }
            self.activation_of(l).apply(&mut y);
            acts.push(y);
        }
        Ok(Tape { batch, acts })
    }

    /// Backpropagates `out_grad` (row-major, one row per batch entry) through
    /// a recorded forward pass.
    ///
    /// Parameter gradients are summed over the batch and accumulated into
    /// `grads` when given. The gradient with respect to the input batch is
    /// returned when `want_input_grad` is set.
    pub fn backward_batch(
        &self,
        tape: &Tape,
        out_grad: &[f64],
        mut grads: Option<&mut GradientBundle>,
        want_input_grad: bool,
    ) -> Result<Option<Vec<f64>>> {
        let batch = tape.batch;
        if out_grad.len() != batch * self.output_dim() {
            return Err(NnError::OutputGradDim {
                expected: batch * self.output_dim(),
                got: out_grad.len(),
            });
        }
        if let Some(g) = grads.as_deref() {
            if g.len() != self.param_count() {
                return Err(NnError::GradShape {
                    expected: self.param_count(),
                    got: g.len(),
                });
            }
        }
        let mut delta = out_grad.to_vec();
        let last = self.num_layers() - 1;
        self.activation_of(last)
            .chain(&tape.acts[last + 1], &mut delta);
        for l in (0..self.num_layers()).rev() {
            let s = self.span(l);
            let x = &tape.acts[l];
            if let Some(g) = grads.as_deref_mut() {
                let (gw, gb) = g.values[s.w..s.b + s.fan_out].split_at_mut(s.fan_in * s.fan_out);
                for (xr, dr) in x.chunks_exact(s.fan_in).zip(delta.chunks_exact(s.fan_out)) {
                    gb.iter_mut().zip(dr).for_each(|(a, &d)| *a += d);
                    for (&xk, gk) in xr.iter().zip(gw.chunks_exact_mut(s.fan_out)) {
                        if xk != 0.0 {
                            gk.iter_mut().zip(dr).for_each(|(a, &d)| *a += xk * d);
                        }
                    }
                }
            }
            if l == 0 && !want_input_grad {
                return Ok(None);
            }
            let w = &self.params[s.w..s.b];
            let mut dx = vec![0.0; batch * s.fan_in];
            for (dxr, dr) in dx
                .chunks_exact_mut(s.fan_in)
                .zip(delta.chunks_exact(s.fan_out))
            {
                for (dxk, wk) in dxr.iter_mut().zip(w.chunks_exact(s.fan_out)) {
                    *dxk = wk.iter().zip(dr).map(|(a, b)| a * b).sum();
                }
            }
            if l > 0 {
                self.hidden.chain(&tape.acts[l], &mut dx);
            }
            delta = dx;
        }
        Ok(Some(delta))
    }

    /// Exact gradient of `<output_grad, forward(input)>` with respect to
    /// every parameter.
    pub fn backward(&self, input: &[f64], output_grad: &[f64]) -> Result<GradientBundle> {
        let tape = self.forward_batch(input, 1)?;
        let mut grads = GradientBundle::zeros_like(self);
        self.backward_batch(&tape, output_grad, Some(&mut grads), false)?;
        Ok(grads)
    }

    /// `self <- (1 - tau) * self + tau * online`, elementwise.
    pub fn polyak_update(&mut self, online: &DenseNet, tau: f64) -> Result<()> {
        if online.params.len() != self.params.len() {
            return Err(NnError::ParamLen {
                expected: self.params.len(),
                got: online.params.len(),
            });
        }
        polyak_slice(&mut self.params, &online.params, tau);
        Ok(())
    }
}

pub(crate) fn polyak_slice(target: &mut [f64], online: &[f64], tau: f64) {
    target
        .iter_mut()
        .zip(online)
        .for_each(|(t, &o)| *t = (1.0 - tau) * *t + tau * o);
}

/// Versioned, self-describing container for a single network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetCheckpoint {
    pub version: u32,
    pub layer_dims: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
    pub params: Vec<f64>,
}

impl From<DenseNet> for NetCheckpoint {
    fn from(net: DenseNet) -> Self {
        Self {
            version: NET_FORMAT_VERSION,
            layer_dims: net.dims,
            hidden_activation: net.hidden,
            output_activation: net.output,
            params: net.params,
        }
    }
}

impl TryFrom<NetCheckpoint> for DenseNet {
    type Error = NnError;

    fn try_from(ck: NetCheckpoint) -> Result<Self> {
        if ck.version != NET_FORMAT_VERSION {
            return Err(NnError::Version(ck.version));
        }
        let net = DenseNet::unflatten(
            &ck.layer_dims,
            ck.hidden_activation,
            ck.output_activation,
            ck.params,
        )?;
        if let Some(index) = net.params.iter().position(|p| !p.is_finite()) {
            return Err(NnError::NonFiniteParam { index });
        }
        Ok(net)
    }
}

/// Adam optimizer state for one flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step_count: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
        }
    }

    pub fn for_net(net: &DenseNet, learning_rate: f64) -> Self {
        Self::new(net.param_count(), learning_rate)
    }

    /// One bias-corrected Adam step. A gradient with any non-finite
    /// component is rejected before anything is modified.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.first_moment.len() {
            return Err(NnError::ParamLen {
                expected: self.first_moment.len(),
                got: params.len(),
            });
        }
        if grads.len() != params.len() {
            return Err(NnError::GradShape {
                expected: params.len(),
                got: grads.len(),
            });
        }
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return Err(NnError::NonFiniteGradient { index });
        }
        self.step_count += 1;
        let t = self.step_count as f64;
        let c1 = 1.0 - math::powf(self.beta1, t);
        let c2 = 1.0 - math::powf(self.beta2, t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.epsilon);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (math::sqrt(v_hat) + eps);
        }
        Ok(())
    }
}
