//! Dense ReLU networks with one input skip connection, exact reverse-mode
//! gradients, and Adam.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid network shape: {0}")]
    InvalidShape(String),
}

/// Layer layout. There are `depth` ReLU hidden layers of `width` units and a
/// linear output layer. Hidden layer `skip_layer` receives the network input
/// concatenated in front of the previous hidden activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpShape {
    pub input_dim: usize,
    pub output_dim: usize,
    pub width: usize,
    pub depth: usize,
    pub skip_layer: Option<usize>,
}

impl MlpShape {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.input_dim == 0 || self.output_dim == 0 || self.width == 0 || self.depth == 0 {
            return Err(NetError::InvalidShape(format!("all dimensions must be positive: {self:?}")));
        }
        if let Some(k) = self.skip_layer {
            if k == 0 || k >= self.depth {
                return Err(NetError::InvalidShape(format!(
                    "skip layer {k} must lie in 1..{}",
                    self.depth
                )));
            }
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every layer, output layer last.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.depth + 1);
        for l in 0..self.depth {
            let fan_in = if l == 0 {
                self.input_dim
            } else if Some(l) == self.skip_layer {
                self.width + self.input_dim
            } else {
                self.width
            };
            dims.push((fan_in, self.width));
        }
        dims.push((self.width, self.output_dim));
        dims
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<F> {
    /// `fan_in x fan_out`
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<F> {
    pub shape: MlpShape,
    pub layers: Vec<Dense<F>>,
}

/// Layer inputs recorded by [`Mlp::forward`]; hidden activations are
/// recovered from them during the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<F> {
    inputs: Vec<Array2<F>>,
}

impl<F: Real> ForwardCache<F> {
    pub fn batch_size(&self) -> usize {
        self.inputs[0].nrows()
    }

    /// ReLU on/off pattern of every hidden unit for every batch row.
    pub fn activation_pattern(&self, shape: &MlpShape) -> Vec<bool> {
        let mut out = Vec::new();
        for (l, x) in self.inputs.iter().enumerate().skip(1) {
            let hidden = hidden_part(shape, l, x.view());
            out.extend(hidden.iter().map(|&h| h > F::zero()));
        }
        out
    }
}

fn hidden_part<'a, F>(shape: &MlpShape, layer: usize, x: ArrayView2<'a, F>) -> ArrayView2<'a, F> {
    if Some(layer) == shape.skip_layer {
        x.slice_move(s![.., shape.input_dim..])
    } else {
        x
    }
}

impl<F: Real> Mlp<F> {
    /// Glorot-uniform weights, zero biases; deterministic in `seed`.
    pub fn init(shape: MlpShape, seed: u64) -> Result<Self, NetError> {
        shape.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = shape
            .layer_dims()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weight =
                    Array2::from_shape_simple_fn((fan_in, fan_out), || F::of(rng.random_range(-a..a)));
                Dense { weight, bias: Array1::zeros(fan_out) }
            })
            .collect();
        Ok(Self { shape, layers })
    }

    pub fn zeros(shape: MlpShape) -> Result<Self, NetError> {
        shape.validate()?;
        let layers = shape
            .layer_dims()
            .into_iter()
            .map(|(i, o)| Dense { weight: Array2::zeros((i, o)), bias: Array1::zeros(o) })
            .collect();
        Ok(Self { shape, layers })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.shape).expect("shape already validated")
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Every parameter in layer order: weights row-major, then biases.
    pub fn params(&self) -> impl Iterator<Item = &F> {
        self.layers.iter().flat_map(|l| l.weight.iter().chain(l.bias.iter()))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut F> {
        self.layers.iter_mut().flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn cast<G: Real>(&self) -> Mlp<G> {
        Mlp {
            shape: self.shape,
            layers: self
                .layers
                .iter()
                .map(|l| Dense {
                    weight: l.weight.mapv(|w| G::of(w.f64())),
                    bias: l.bias.mapv(|b| G::of(b.f64())),
                })
                .collect(),
        }
    }

    fn check_same_shape(&self, other: &Self) -> Result<(), NetError> {
        if self.shape != other.shape {
            return Err(NetError::ShapeMismatch(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }

    /// Evaluates the network on a `batch x input_dim` matrix.
    pub fn forward(&self, input: ArrayView2<F>) -> Result<(Array2<F>, ForwardCache<F>), NetError> {
        if input.ncols() != self.shape.input_dim {
            return Err(NetError::ShapeMismatch(format!(
                "input has {} columns, network expects {}",
                input.ncols(),
                self.shape.input_dim
            )));
        }
        let batch = input.nrows();
        let mut inputs: Vec<Array2<F>> = Vec::with_capacity(self.layers.len());
        let mut x = input.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            if l > 0 && Some(l) == self.shape.skip_layer {
                let mut cat = Array2::zeros((batch, self.shape.input_dim + x.ncols()));
                cat.slice_mut(s![.., ..self.shape.input_dim]).assign(&inputs[0]);
                cat.slice_mut(s![.., self.shape.input_dim..]).assign(&x);
                x = cat;
            }
            let mut z = x.dot(&layer.weight);
            z += &layer.bias;
            inputs.push(x);
            if l + 1 < self.layers.len() {
                z.mapv_inplace(|v| v.max(F::zero()));
            }
            x = z;
        }
        Ok((x, ForwardCache { inputs }))
    }

    /// Reverse pass for `output_grad = dLoss/dOutput`. Returns parameter
    /// gradients and, when `want_input_grad` is set, `dLoss/dInput`.
    pub fn backward(
        &self,
        cache: &ForwardCache<F>,
        output_grad: ArrayView2<F>,
        want_input_grad: bool,
    ) -> Result<(Mlp<F>, Option<Array2<F>>), NetError> {
        if cache.inputs.len() != self.layers.len()
            || output_grad.ncols() != self.shape.output_dim
            || output_grad.nrows() != cache.batch_size()
        {
            return Err(NetError::ShapeMismatch(format!(
                "gradient {:?} does not match cache for batch {}",
                output_grad.dim(),
                cache.batch_size()
            )));
        }
        let in_dim = self.shape.input_dim;
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut input_grad: Option<Array2<F>> =
            want_input_grad.then(|| Array2::zeros((cache.batch_size(), in_dim)));
        let mut dz = output_grad.to_owned();
        for l in (0..self.layers.len()).rev() {
            let x = &cache.inputs[l];
            let layer = &self.layers[l];
            grads.push(Dense { weight: x.t().dot(&dz), bias: dz.sum_axis(Axis(0)) });
            if l == 0 {
                if let Some(g) = input_grad.as_mut() {
                    *g += &dz.dot(&layer.weight.t());
                }
                break;
            }
            let mut dx = dz.dot(&layer.weight.t());
            if Some(l) == self.shape.skip_layer {
                if let Some(g) = input_grad.as_mut() {
                    *g += &dx.slice(s![.., ..in_dim]);
                }
                dx = dx.slice_move(s![.., in_dim..]);
            }
            let h = hidden_part(&self.shape, l, x.view());
            ndarray::Zip::from(&mut dx).and(h).for_each(|g, &h| {
                if h <= F::zero() {
                    *g = F::zero();
                }
            });
            dz = dx;
        }
        grads.reverse();
        Ok((Mlp { shape: self.shape, layers: grads }, input_grad))
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<(), NetError> {
        self.check_same_shape(other)?;
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: F) {
        self.params_mut().for_each(|p| *p = *p * s);
    }

    pub fn sum_sq(&self) -> f64 {
        self.params().map(|p| p.f64() * p.f64()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params().all(|p| p.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 5e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub m: Mlp<F>,
    pub v: Mlp<F>,
    pub step: u64,
    pub config: AdamConfig,
}

impl<F: Real> AdamState<F> {
    pub fn new(params: &Mlp<F>, config: AdamConfig) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), step: 0, config }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step<F: Real>(
    params: &mut Mlp<F>,
    grads: &Mlp<F>,
    state: &mut AdamState<F>,
) -> Result<(), NetError> {
    params.check_same_shape(grads)?;
    params.check_same_shape(&state.m)?;
    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let c1 = F::of(1.0 / (1.0 - beta1.powi(t)));
    let c2 = F::of(1.0 / (1.0 - beta2.powi(t)));
    let (b1, b2) = (F::of(beta1), F::of(beta2));
    let (ib1, ib2) = (F::of(1.0 - beta1), F::of(1.0 - beta2));
    let (lr, eps) = (F::of(lr), F::of(eps));
    let it = params
        .params_mut()
        .zip(grads.params())
        .zip(state.m.params_mut().zip(state.v.params_mut()));
    for ((p, &g), (m, v)) in it {
        *m = b1 * *m + ib1 * g;
        *v = b2 * *v + ib2 * g * g;
        let m_hat = *m * c1;
        let v_hat = *v * c2;
        *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}
