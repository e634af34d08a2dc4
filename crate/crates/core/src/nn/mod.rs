//! Fully connected networks with a hand-written reverse pass.
//!
//! Parameters of an [`MlpSpec`] live in one flat [`ParamVector`]. Layer `k`
//! with fan-in `a` and fan-out `b` occupies `a*b` weights stored row-major as a
//! `b × a` matrix (one row per output unit), followed by `b` biases. A batch
//! `X` (n × a) maps to `X Wᵀ + b`.

mod io;
mod nadam;

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Rng;

pub use io::{load_params, read_params, save_params, write_params, PARAMS_MAGIC};
pub use nadam::NadamState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation value.
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Tanh => 2,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Tanh),
            _ => None,
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Activation::Identity),
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::invalid(format!("unknown activation {other:?}"))),
        }
    }
}

/// Layer widths `[input, hidden.., output]` plus activations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    layer_dims: Vec<usize>,
    hidden_activation: Activation,
    output_activation: Activation,
}

impl MlpSpec {
    /// ReLU hidden layers, identity output.
    pub fn new(layer_dims: Vec<usize>) -> Result<Self> {
        Self::with_activations(layer_dims, Activation::Relu, Activation::Identity)
    }

    pub fn with_activations(
        layer_dims: Vec<usize>,
        hidden: Activation,
        output: Activation,
    ) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::invalid(format!(
                "an MLP needs at least input and output widths, got {layer_dims:?}"
            )));
        }
        if layer_dims.contains(&0) {
            return Err(Error::invalid(format!(
                "layer widths must be >= 1, got {layer_dims:?}"
            )));
        }
        Ok(Self {
            layer_dims,
            hidden_activation: hidden,
            output_activation: output,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden_activation
    }

    pub fn output_activation(&self) -> Activation {
        self.output_activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.num_layers() {
            self.output_activation
        } else {
            self.hidden_activation
        }
    }

    /// (weight offset, fan_in, fan_out) for each layer; biases follow the weights.
    fn layout(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.layer_dims.windows(2).scan(0usize, |offset, w| {
            let start = *offset;
            *offset += (w[0] + 1) * w[1];
            Some((start, w[0], w[1]))
        })
    }
}

/// One flattened weight realization of an [`MlpSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Array1<f64>,
}

impl ParamVector {
    pub fn new(values: Array1<f64>) -> Self {
        Self { values }
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self::new(Array1::from(values))
    }

    pub fn zeros(len: usize) -> Self {
        Self::new(Array1::zeros(len))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Array1<f64> {
        &mut self.values
    }

    pub fn view(&self) -> ArrayView1<'_, f64> {
        self.values.view()
    }

    pub fn into_inner(self) -> Array1<f64> {
        self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn sq_dist(&self, other: &ParamVector) -> f64 {
        let (a, b) = match (self.values.as_slice(), other.values.as_slice()) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return self
                    .values
                    .iter()
                    .zip(other.values.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
            }
        };
        // four independent accumulators so the loop vectorizes
        let mut acc = [0.0f64; 4];
        let mut ca = a.chunks_exact(4);
        let mut cb = b.chunks_exact(4);
        for (x, y) in ca.by_ref().zip(cb.by_ref()) {
            for k in 0..4 {
                let d = x[k] - y[k];
                acc[k] += d * d;
            }
        }
        let mut tail = 0.0;
        for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
            tail += (x - y) * (x - y);
        }
        (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
    }

    fn check_spec(&self, spec: &MlpSpec) -> Result<()> {
        if self.len() != spec.param_count() {
            return Err(Error::invalid(format!(
                "parameter vector has {} entries, spec {:?} needs {}",
                self.len(),
                spec.layer_dims(),
                spec.param_count()
            )));
        }
        Ok(())
    }
}

/// Weights ~ Normal(0, 1/fan_in), biases 0. Draws are taken layer by layer,
/// output unit by output unit.
pub fn init_params(spec: &MlpSpec, rng: &mut Rng) -> ParamVector {
    let mut values = Array1::zeros(spec.param_count());
    for (offset, fan_in, fan_out) in spec.layout() {
        let std = (1.0 / fan_in as f64).sqrt();
        for v in values
            .slice_mut(s![offset..offset + fan_in * fan_out])
            .iter_mut()
        {
            *v = std * rng.standard_normal();
        }
    }
    ParamVector::new(values)
}

/// Intermediate values of one forward pass, needed by [`vjp`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer (the batch itself for layer 0).
    inputs: Vec<Array2<f64>>,
    /// Pre-activation output of each layer.
    pre: Vec<Array2<f64>>,
    param_len: usize,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.inputs[0].nrows()
    }
}

fn layer_views<'a>(
    params: &'a ParamVector,
    offset: usize,
    fan_in: usize,
    fan_out: usize,
) -> (ArrayView2<'a, f64>, ArrayView1<'a, f64>) {
    let flat = params.values.as_slice().expect("contiguous params");
    let w = ArrayView2::from_shape((fan_out, fan_in), &flat[offset..offset + fan_in * fan_out])
        .unwrap();
    let b = ArrayView1::from(&flat[offset + fan_in * fan_out..offset + (fan_in + 1) * fan_out]);
    (w, b)
}

/// Embeds a batch: returns the network output and the cache for [`vjp`].
pub fn forward(
    spec: &MlpSpec,
    params: &ParamVector,
    x: ArrayView2<'_, f64>,
) -> Result<(Array2<f64>, ForwardCache)> {
    params.check_spec(spec)?;
    if x.ncols() != spec.input_dim() {
        return Err(Error::invalid(format!(
            "input has {} columns, network expects {}",
            x.ncols(),
            spec.input_dim()
        )));
    }
    let mut inputs = Vec::with_capacity(spec.num_layers());
    let mut pre = Vec::with_capacity(spec.num_layers());
    let mut current = x.to_owned();
    for (layer, (offset, fan_in, fan_out)) in spec.layout().enumerate() {
        let (w, b) = layer_views(params, offset, fan_in, fan_out);
        let mut z = current.dot(&w.t());
        z += &b;
        let act = spec.activation(layer);
        let out = z.mapv(|v| act.apply(v));
        inputs.push(current);
        pre.push(z);
        current = out;
    }
    Ok((
        current,
        ForwardCache {
            inputs,
            pre,
            param_len: params.len(),
        },
    ))
}

/// Output only; skips building the cache.
pub fn predict(
    spec: &MlpSpec,
    params: &ParamVector,
    x: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    params.check_spec(spec)?;
    if x.ncols() != spec.input_dim() {
        return Err(Error::invalid(format!(
            "input has {} columns, network expects {}",
            x.ncols(),
            spec.input_dim()
        )));
    }
    let mut current = x.to_owned();
    for (layer, (offset, fan_in, fan_out)) in spec.layout().enumerate() {
        let (w, b) = layer_views(params, offset, fan_in, fan_out);
        let mut z = current.dot(&w.t());
        z += &b;
        let act = spec.activation(layer);
        z.mapv_inplace(|v| act.apply(v));
        current = z;
    }
    Ok(current)
}

/// Vector-Jacobian product through the network.
///
/// Returns `(∂⟨U, Z⟩/∂params, ∂⟨U, Z⟩/∂X)` where `U = upstream` and `Z` is the
/// output of the forward pass that produced `cache`.
pub fn vjp(
    spec: &MlpSpec,
    params: &ParamVector,
    cache: &ForwardCache,
    upstream: ArrayView2<'_, f64>,
) -> Result<(ParamVector, Array2<f64>)> {
    params.check_spec(spec)?;
    let n = cache.batch_size();
    if cache.param_len != params.len() || cache.pre.len() != spec.num_layers() {
        return Err(Error::invalid(
            "forward cache does not belong to this network",
        ));
    }
    if upstream.dim() != (n, spec.output_dim()) {
        return Err(Error::invalid(format!(
            "upstream is {:?}, expected ({n}, {})",
            upstream.dim(),
            spec.output_dim()
        )));
    }
    let mut grad = Array1::zeros(params.len());
    let layout: Vec<_> = spec.layout().collect();
    let mut delta_out = upstream.to_owned();
    for layer in (0..spec.num_layers()).rev() {
        let (offset, fan_in, fan_out) = layout[layer];
        let act = spec.activation(layer);
        let mut delta = delta_out;
        if act != Activation::Identity {
            delta.zip_mut_with(&cache.pre[layer], |d, &p| *d *= act.derivative(p));
        }
        let gw = delta.t().dot(&cache.inputs[layer]);
        let gb = delta.sum_axis(Axis(0));
        grad.slice_mut(s![offset..offset + fan_in * fan_out])
            .assign(&Array1::from_iter(gw.iter().copied()));
        grad.slice_mut(s![
            offset + fan_in * fan_out..offset + (fan_in + 1) * fan_out
        ])
        .assign(&gb);
        let (w, _) = layer_views(params, offset, fan_in, fan_out);
        delta_out = delta.dot(&w);
    }
    Ok((ParamVector::new(grad), delta_out))
}

/// Rows of a matrix gathered by index.
pub(crate) fn select_rows(x: ArrayView2<'_, f64>, rows: &[usize]) -> Array2<f64> {
    x.select(Axis(0), rows)
}
