//! Image tower: a small convolutional network mapping a `C×H×W` tensor to a
//! `d`-dimensional embedding, with hand-written backpropagation.

pub(crate) mod gradcheck;
mod layers;

use std::sync::atomic::{AtomicU64, Ordering};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CsmError, Result};
use crate::scalar::Real;
use crate::seed;
use crate::tensor::Tensor;

pub use gradcheck::{gradient_check, gradient_check_with, relative_error, GradCheckReport, ParamCheck};
pub use layers::{backward, backward_sum, backward_with_input, forward, ForwardCache};

fn default_relu() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default = "default_relu")]
        relu: bool,
    },
    MaxPool {
        window: usize,
        stride: usize,
    },
    /// Across-channel response normalisation:
    /// `b_c = a_c / (k + alpha * Σ_{|c'-c| <= n/2} a_{c'}²)^beta`.
    Lcn {
        #[serde(default = "lcn_n")]
        n: usize,
        #[serde(default = "lcn_k")]
        k: f64,
        #[serde(default = "lcn_alpha")]
        alpha: f64,
        #[serde(default = "lcn_beta")]
        beta: f64,
    },
    FullyConnected {
        out_dim: usize,
        #[serde(default = "default_relu")]
        relu: bool,
    },
}

fn one() -> usize {
    1
}
fn lcn_n() -> usize {
    5
}
fn lcn_k() -> f64 {
    2.0
}
fn lcn_alpha() -> f64 {
    1e-4
}
fn lcn_beta() -> f64 {
    0.75
}

impl LayerSpec {
    pub fn conv(out_channels: usize, kernel: usize, padding: usize) -> Self {
        LayerSpec::Conv { out_channels, kernel, stride: 1, padding, relu: true }
    }

    pub fn pool(window: usize, stride: usize) -> Self {
        LayerSpec::MaxPool { window, stride }
    }

    pub fn lcn() -> Self {
        LayerSpec::Lcn { n: lcn_n(), k: lcn_k(), alpha: lcn_alpha(), beta: lcn_beta() }
    }

    pub fn fc(out_dim: usize, relu: bool) -> Self {
        LayerSpec::FullyConnected { out_dim, relu }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::MaxPool { .. } => "max_pool",
            LayerSpec::Lcn { .. } => "lcn",
            LayerSpec::FullyConnected { .. } => "fully_connected",
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::FullyConnected { .. })
    }
}

/// Output extent of a sliding window: `floor((in + 2·pad − kernel)/stride) + 1`.
pub fn window_output(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let span = input + 2 * padding;
    if stride == 0 || kernel == 0 || kernel > span {
        return None;
    }
    Some((span - kernel) / stride + 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// `[channels, height, width]`.
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Five conv layers, max-pooling after conv 1, 2 and 5, normalisation
    /// after the first two pools, then a ReLU hidden FC and a linear output.
    pub fn standard(input_shape: [usize; 3], hidden: usize, dim: usize) -> Self {
        Self::five_conv(input_shape, [8, 16, 16, 16, 16], hidden, dim)
    }

    /// 3×64×64 input, 64-dimensional output.
    pub fn paper_default() -> Self {
        Self::standard([3, 64, 64], 128, 64)
    }

    /// Same layer sequence as [`NetworkSpec::standard`] with custom conv widths.
    pub fn five_conv(input_shape: [usize; 3], channels: [usize; 5], hidden: usize, dim: usize) -> Self {
        let layers = vec![
            LayerSpec::conv(channels[0], 5, 2),
            LayerSpec::pool(2, 2),
            LayerSpec::lcn(),
            LayerSpec::conv(channels[1], 3, 1),
            LayerSpec::pool(2, 2),
            LayerSpec::lcn(),
            LayerSpec::conv(channels[2], 3, 1),
            LayerSpec::conv(channels[3], 3, 1),
            LayerSpec::conv(channels[4], 3, 1),
            LayerSpec::pool(2, 2),
            LayerSpec::fc(hidden, true),
            LayerSpec::fc(dim, false),
        ];
        NetworkSpec { input_shape, layers }
    }

    pub fn with_input_shape(&self, input_shape: [usize; 3]) -> Self {
        NetworkSpec { input_shape, layers: self.layers.clone() }
    }

    /// Output shape of every layer, or the first inconsistency.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.layers.is_empty() {
            return Err(CsmError::Spec { layer: 0, reason: "network has no layers".into() });
        }
        if self.input_shape.contains(&0) {
            return Err(CsmError::Spec { layer: 0, reason: format!("input shape {:?} has a zero dimension", self.input_shape) });
        }
        let mut shape = self.input_shape.to_vec();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let err = |reason: String| CsmError::Spec { layer: i, reason };
            let spatial = |shape: &[usize]| -> Result<[usize; 3]> {
                match *shape {
                    [c, h, w] => Ok([c, h, w]),
                    _ => Err(CsmError::Spec {
                        layer: i,
                        reason: format!("{} needs a C×H×W input but follows a flattening layer", layer.kind()),
                    }),
                }
            };
            shape = match *layer {
                LayerSpec::Conv { out_channels, kernel, stride, padding, .. } => {
                    let [_, h, w] = spatial(&shape)?;
                    if out_channels == 0 {
                        return Err(err("conv with zero output channels".into()));
                    }
                    let oh = window_output(h, kernel, stride, padding);
                    let ow = window_output(w, kernel, stride, padding);
                    match (oh, ow) {
                        (Some(oh), Some(ow)) => vec![out_channels, oh, ow],
                        _ => return Err(err(format!("kernel {kernel} stride {stride} pad {padding} does not fit {h}×{w}"))),
                    }
                }
                LayerSpec::MaxPool { window, stride } => {
                    let [c, h, w] = spatial(&shape)?;
                    match (window_output(h, window, stride, 0), window_output(w, window, stride, 0)) {
                        (Some(oh), Some(ow)) => vec![c, oh, ow],
                        _ => return Err(err(format!("pool window {window} stride {stride} does not fit {h}×{w}"))),
                    }
                }
                LayerSpec::Lcn { n, k, alpha, beta } => {
                    spatial(&shape)?;
                    if n == 0 || k <= 0.0 || alpha < 0.0 || beta < 0.0 {
                        return Err(err("lcn needs n ≥ 1, k > 0, alpha ≥ 0, beta ≥ 0".into()));
                    }
                    shape
                }
                LayerSpec::FullyConnected { out_dim, .. } => {
                    if out_dim == 0 {
                        return Err(err("fully connected layer with zero outputs".into()));
                    }
                    vec![out_dim]
                }
            };
            out.push(shape.clone());
        }
        if !matches!(self.layers.last(), Some(LayerSpec::FullyConnected { .. })) {
            return Err(CsmError::Spec {
                layer: self.layers.len() - 1,
                reason: "the last layer must be fully connected".into(),
            });
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.layer_shapes().map(|_| ())
    }

    /// Embedding dimension `d`.
    pub fn output_dim(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::FullyConnected { out_dim, .. }) => *out_dim,
            _ => 0,
        }
    }

    /// `(weight shape, bias shape)` of every parameterised layer, in layer order.
    pub fn param_shapes(&self) -> Result<Vec<(usize, Vec<usize>, Vec<usize>)>> {
        let shapes = self.layer_shapes()?;
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let in_shape: &[usize] = if i == 0 { &self.input_shape } else { &shapes[i - 1] };
            match *layer {
                LayerSpec::Conv { out_channels, kernel, .. } => {
                    out.push((i, vec![out_channels, in_shape[0], kernel, kernel], vec![out_channels]));
                }
                LayerSpec::FullyConnected { out_dim, .. } => {
                    let fan_in: usize = in_shape.iter().product();
                    out.push((i, vec![out_dim, fan_in], vec![out_dim]));
                }
                _ => {}
            }
        }
        Ok(out)
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self
            .param_shapes()?
            .iter()
            .map(|(_, w, b)| w.iter().product::<usize>() + b.iter().product::<usize>())
            .sum())
    }

    /// True for the layer-type sequence of the reference architecture:
    /// five convs and two FCs, pools after conv 1, 2 and 5, normalisation
    /// directly after the first two pools, linear final layer.
    pub fn is_reference_shaped(&self) -> bool {
        let kinds: Vec<&str> = self.layers.iter().map(LayerSpec::kind).collect();
        let expected = [
            "conv", "max_pool", "lcn", "conv", "max_pool", "lcn", "conv", "conv", "conv", "max_pool",
            "fully_connected", "fully_connected",
        ];
        kinds == expected && matches!(self.layers.last(), Some(LayerSpec::FullyConnected { relu: false, .. }))
    }
}

/// Weight and bias of one conv or FC layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock<T> {
    pub layer: usize,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

static STAMP: AtomicU64 = AtomicU64::new(1);

fn next_stamp() -> u64 {
    STAMP.fetch_add(1, Ordering::Relaxed)
}

/// All learnable image-tower parameters. Each mutable borrow refreshes an
/// internal stamp so caches from older parameter values are rejected.
#[derive(Clone, Debug)]
pub struct NetworkParams<T> {
    blocks: Vec<ParamBlock<T>>,
    stamp: u64,
}

impl<T: PartialEq> PartialEq for NetworkParams<T> {
    fn eq(&self, other: &Self) -> bool {
        self.blocks == other.blocks
    }
}

/// Gradients share the parameter layout.
pub type NetworkGrads<T> = NetworkParams<T>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum InitScheme {
    /// Weights ~ N(0, std²).
    Gaussian { std: f64 },
    /// Weights ~ N(0, 2/fan_in).
    He,
}

impl Default for InitScheme {
    fn default() -> Self {
        InitScheme::Gaussian { std: 0.01 }
    }
}

/// Gaussian(0, 0.01²) weights, zero biases.
pub fn init_params<T: Real>(spec: &NetworkSpec, seed: u64) -> Result<NetworkParams<T>> {
    init_params_with(spec, InitScheme::default(), seed)
}

pub fn init_params_with<T: Real>(spec: &NetworkSpec, scheme: InitScheme, seed: u64) -> Result<NetworkParams<T>> {
    let mut rng = seed::rng(seed, &[seed::STREAM_INIT_IMAGE]);
    let blocks = spec
        .param_shapes()?
        .into_iter()
        .map(|(layer, wshape, bshape)| {
            let fan_in: usize = wshape[1..].iter().product();
            let std = match scheme {
                InitScheme::Gaussian { std } => std,
                InitScheme::He => (2.0 / fan_in as f64).sqrt(),
            };
            let normal = Normal::new(0.0, std).map_err(|e| CsmError::config("init.std", e.to_string()))?;
            let n: usize = wshape.iter().product();
            let w = (0..n).map(|_| T::of(normal.sample(&mut rng))).collect();
            Ok(ParamBlock { layer, weight: Tensor::from_vec(&wshape, w)?, bias: Tensor::zeros(&bshape) })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(NetworkParams { blocks, stamp: next_stamp() })
}

impl<T: Real> NetworkParams<T> {
    pub fn from_blocks(blocks: Vec<ParamBlock<T>>) -> Self {
        NetworkParams { blocks, stamp: next_stamp() }
    }

    pub fn zeros_like(&self) -> Self {
        NetworkParams {
            blocks: self
                .blocks
                .iter()
                .map(|b| ParamBlock {
                    layer: b.layer,
                    weight: Tensor::zeros(b.weight.shape()),
                    bias: Tensor::zeros(b.bias.shape()),
                })
                .collect(),
            stamp: next_stamp(),
        }
    }

    pub fn blocks(&self) -> &[ParamBlock<T>] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [ParamBlock<T>] {
        self.stamp = next_stamp();
        &mut self.blocks
    }

    pub(crate) fn stamp(&self) -> u64 {
        self.stamp
    }

    /// Block for the layer at `layer` in the `NetworkSpec`.
    pub fn block_for_layer(&self, layer: usize) -> Option<&ParamBlock<T>> {
        self.blocks.iter().find(|b| b.layer == layer)
    }

    pub fn num_params(&self) -> usize {
        self.blocks.iter().map(|b| b.weight.len() + b.bias.len()).sum()
    }

    /// Weight then bias of each block, in layer order.
    pub fn slices(&self) -> Vec<&[T]> {
        self.blocks.iter().flat_map(|b| [b.weight.data(), b.bias.data()]).collect()
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [T]> {
        self.stamp = next_stamp();
        self.blocks
            .iter_mut()
            .flat_map(|b| [b.weight.data_mut(), b.bias.data_mut()])
            .collect()
    }

    pub fn norm(&self) -> f64 {
        self.slices().iter().map(|s| crate::scalar::sum_squares(s)).sum::<f64>().sqrt()
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.blocks_mut().iter_mut().zip(&other.blocks) {
            a.weight.add_assign(&b.weight);
            a.bias.add_assign(&b.bias);
        }
    }

    pub fn scale(&mut self, c: T) {
        for b in self.blocks_mut() {
            b.weight.scale(c);
            b.bias.scale(c);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().all(|b| b.weight.is_finite() && b.bias.is_finite())
    }

    pub fn cast<U: Real>(&self) -> NetworkParams<U> {
        NetworkParams {
            blocks: self
                .blocks
                .iter()
                .map(|b| ParamBlock { layer: b.layer, weight: b.weight.cast(), bias: b.bias.cast() })
                .collect(),
            stamp: next_stamp(),
        }
    }

    /// Checks block shapes against a spec.
    pub fn check_against(&self, spec: &NetworkSpec) -> Result<()> {
        let shapes = spec.param_shapes()?;
        if shapes.len() != self.blocks.len() {
            return Err(CsmError::Shape(format!(
                "spec has {} parameterised layers, params have {}",
                shapes.len(),
                self.blocks.len()
            )));
        }
        for ((layer, w, b), block) in shapes.iter().zip(&self.blocks) {
            if block.layer != *layer || block.weight.shape() != w.as_slice() || block.bias.shape() != b.as_slice() {
                return Err(CsmError::Spec {
                    layer: *layer,
                    reason: format!(
                        "parameter shapes {:?}/{:?} do not match expected {:?}/{:?}",
                        block.weight.shape(),
                        block.bias.shape(),
                        w,
                        b
                    ),
                });
            }
        }
        Ok(())
    }
}

/// Spec plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEncoder<T> {
    pub spec: NetworkSpec,
    pub params: NetworkParams<T>,
}

impl<T: Real> ImageEncoder<T> {
    pub fn new(spec: NetworkSpec, params: NetworkParams<T>) -> Result<Self> {
        params.check_against(&spec)?;
        Ok(ImageEncoder { spec, params })
    }

    /// `F(I)`.
    pub fn embed(&self, image: &Tensor<T>) -> Result<Vec<T>> {
        forward(&self.params, &self.spec, image).map(|(e, _)| e)
    }

    pub fn cast<U: Real>(&self) -> ImageEncoder<U> {
        ImageEncoder { spec: self.spec.clone(), params: self.params.cast() }
    }
}
