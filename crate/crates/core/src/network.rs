//! Sequential networks built from a declarative architecture, with
//! per-layer pruning masks and a snapshot of the initial weights.
//!
//! Dense weights are stored `[in × out]`, convolution kernels
//! `[out_channels × in_channels × k × k]`. Only these weight tensors are
//! prunable; biases never are.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

fn default_stride() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        #[serde(rename = "in")]
        inputs: usize,
        #[serde(rename = "out")]
        outputs: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "default_stride")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    Relu,
    #[serde(rename = "maxpool2x2")]
    MaxPool2x2,
    Flatten,
}

impl LayerSpec {
    pub fn is_parameterized(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }

    /// Per-sample output shape, or `None` when `input` is not accepted.
    fn output_shape(&self, input: &[usize]) -> Option<Vec<usize>> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => {
                (input == [inputs] && outputs > 0).then(|| vec![outputs])
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let [c, h, w] = *input else { return None };
                if c != in_channels || out_channels == 0 {
                    return None;
                }
                let geo = kernels::ConvGeometry::new(c, h, w, kernel, kernel, stride, padding)?;
                Some(vec![out_channels, geo.out_h, geo.out_w])
            }
            LayerSpec::Relu => Some(input.to_vec()),
            LayerSpec::MaxPool2x2 => {
                let [c, h, w] = *input else { return None };
                (h >= 2 && w >= 2).then(|| vec![c, h / 2, w / 2])
            }
            LayerSpec::Flatten => Some(vec![input.iter().product()]),
        }
    }
}

/// Input shape (per sample, no batch dimension) plus the layer sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Self {
        Architecture {
            input_shape,
            layers,
        }
    }

    /// Multi-layer perceptron `sizes[0] → … → sizes[last]` with ReLU between
    /// dense layers and none after the last.
    pub fn mlp(sizes: &[usize]) -> Self {
        let mut layers = Vec::new();
        for (i, pair) in sizes.windows(2).enumerate() {
            if i > 0 {
                layers.push(LayerSpec::Relu);
            }
            layers.push(LayerSpec::Dense {
                inputs: pair[0],
                outputs: pair[1],
            });
        }
        Architecture::new(vec![sizes[0]], layers)
    }

    /// Per-sample shape after each layer. Fails on the first layer whose
    /// expected input does not match its predecessor's output.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Config(format!(
                "invalid input shape {:?}",
                self.input_shape
            )));
        }
        if !self.layers.iter().any(LayerSpec::is_parameterized) {
            return Err(Error::Config(
                "architecture has no dense or conv2d layer".into(),
            ));
        }
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut current = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let next = layer.output_shape(&current).ok_or_else(|| {
                let prev = if i == 0 {
                    "the network input".to_string()
                } else {
                    format!("layer {} ({:?})", i - 1, self.layers[i - 1])
                };
                Error::Config(format!(
                    "layer {i} ({layer:?}) cannot follow {prev} with output shape {current:?}"
                ))
            })?;
            shapes.push(next.clone());
            current = next;
        }
        if current.len() != 1 {
            return Err(Error::Config(format!(
                "network output must be a flat logit vector, got per-sample shape {current:?}"
            )));
        }
        Ok(shapes)
    }
}

/// Per-layer binary masks over the prunable weights; `true` keeps a weight.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    layers: Vec<Vec<bool>>,
}

impl Mask {
    pub fn new(layers: Vec<Vec<bool>>) -> Self {
        Mask { layers }
    }

    pub fn ones(sizes: &[usize]) -> Self {
        Mask {
            layers: sizes.iter().map(|&n| vec![true; n]).collect(),
        }
    }

    /// Builds a mask from the flat enumeration order of
    /// [`Network::prunable_parameters`].
    pub fn from_flat(sizes: &[usize], bits: &[bool]) -> Result<Self> {
        if sizes.iter().sum::<usize>() != bits.len() {
            return Err(Error::Input(format!(
                "flat mask has {} entries, layers need {}",
                bits.len(),
                sizes.iter().sum::<usize>()
            )));
        }
        let mut offset = 0;
        let layers = sizes
            .iter()
            .map(|&n| {
                let layer = bits[offset..offset + n].to_vec();
                offset += n;
                layer
            })
            .collect();
        Ok(Mask { layers })
    }

    pub fn flat(&self) -> Vec<bool> {
        self.layers.iter().flatten().copied().collect()
    }

    pub fn layers(&self) -> &[Vec<bool>] {
        &self.layers
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        self.layers.iter().map(Vec::len).collect()
    }

    pub fn total(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn surviving(&self) -> usize {
        self.layers.iter().flatten().filter(|&&b| b).count()
    }

    pub fn layer_surviving(&self) -> Vec<usize> {
        self.layers
            .iter()
            .map(|l| l.iter().filter(|&&b| b).count())
            .collect()
    }

    pub fn sparsity(&self) -> f64 {
        1.0 - self.surviving() as f64 / self.total() as f64
    }

    pub fn same_shape(&self, other: &Mask) -> bool {
        self.layer_sizes() == other.layer_sizes()
    }

    /// True when every weight kept by `self` is also kept by `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.same_shape(other)
            && self
                .layers
                .iter()
                .flatten()
                .zip(other.layers.iter().flatten())
                .all(|(&a, &b)| !a || b)
    }
}

/// One prunable weight as seen by global ranking.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrunableEntry {
    /// Ordinal among the dense/conv layers.
    pub layer: usize,
    /// Row-major index within the layer's weight tensor.
    pub index: usize,
    pub value: f64,
    pub kept: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ParamKind {
    Dense,
    Conv { stride: usize, padding: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ParamLayer {
    kind: ParamKind,
    pub(crate) weight: Tensor,
    pub(crate) bias: Tensor,
    pub(crate) mask: Vec<bool>,
    initial_weight: Vec<f64>,
    initial_bias: Vec<f64>,
    pub(crate) weight_velocity: Vec<f64>,
    pub(crate) bias_velocity: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
enum Layer {
    Param(ParamLayer),
    Relu,
    MaxPool2x2,
    Flatten,
}

/// Handles recorded by [`Network::forward`].
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: Var,
    /// `(weight, bias)` leaves per parameterized layer, in layer order.
    pub params: Vec<(Var, Var)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    arch: Architecture,
    layers: Vec<Layer>,
}

impl Network {
    /// Kaiming-uniform (fan-in, ReLU gain) weights and zero biases, drawn
    /// layer by layer from a ChaCha8 stream seeded with `seed`.
    pub fn build(arch: &Architecture, seed: u64) -> Result<Self> {
        Self::build_with_init(arch, seed, |_, _| {})
    }

    /// Like [`Network::build`], but lets `init` overwrite each parameterized
    /// layer's weights (called with the layer ordinal) before the initial
    /// snapshot is taken.
    pub fn build_with_init<F>(arch: &Architecture, seed: u64, mut init: F) -> Result<Self>
    where
        F: FnMut(usize, &mut [f64]),
    {
        let shapes = arch.shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(arch.layers.len());
        let mut ordinal = 0;
        for (i, spec) in arch.layers.iter().enumerate() {
            let layer = match *spec {
                LayerSpec::Dense { inputs, outputs } => {
                    let p = new_param(
                        &mut rng,
                        vec![inputs, outputs],
                        inputs,
                        outputs,
                        ParamKind::Dense,
                        |w| init(ordinal, w),
                    )?;
                    ordinal += 1;
                    Layer::Param(p)
                }
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    let fan_in = in_channels * kernel * kernel;
                    let p = new_param(
                        &mut rng,
                        vec![out_channels, in_channels, kernel, kernel],
                        fan_in,
                        out_channels,
                        ParamKind::Conv { stride, padding },
                        |w| init(ordinal, w),
                    )?;
                    ordinal += 1;
                    Layer::Param(p)
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::MaxPool2x2 => Layer::MaxPool2x2,
                LayerSpec::Flatten => Layer::Flatten,
            };
            debug_assert!(!shapes[i].is_empty());
            layers.push(layer);
        }
        Ok(Network {
            arch: arch.clone(),
            layers,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub(crate) fn param_layers(&self) -> impl Iterator<Item = &ParamLayer> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Param(p) => Some(p),
            _ => None,
        })
    }

    pub(crate) fn param_layers_mut(&mut self) -> impl Iterator<Item = &mut ParamLayer> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::Param(p) => Some(p),
            _ => None,
        })
    }

    pub fn num_param_layers(&self) -> usize {
        self.param_layers().count()
    }

    /// Weight count of each parameterized layer.
    pub fn layer_sizes(&self) -> Vec<usize> {
        self.param_layers().map(|p| p.weight.numel()).collect()
    }

    pub fn num_prunable(&self) -> usize {
        self.layer_sizes().iter().sum()
    }

    pub fn weights(&self, layer: usize) -> &Tensor {
        &self.param_layer(layer).weight
    }

    /// Mutable access to a layer's weights. Callers must leave masked
    /// entries at zero.
    pub fn weights_mut(&mut self, layer: usize) -> &mut [f64] {
        self.param_layer_mut(layer).weight.values_mut()
    }

    pub fn bias(&self, layer: usize) -> &Tensor {
        &self.param_layer(layer).bias
    }

    pub fn initial_weights(&self, layer: usize) -> &[f64] {
        &self.param_layer(layer).initial_weight
    }

    /// Momentum buffers `(weights, bias)` of a layer.
    pub fn velocity(&self, layer: usize) -> (&[f64], &[f64]) {
        let p = self.param_layer(layer);
        (&p.weight_velocity, &p.bias_velocity)
    }

    fn param_layer(&self, layer: usize) -> &ParamLayer {
        self.param_layers()
            .nth(layer)
            .expect("parameterized layer index in range")
    }

    fn param_layer_mut(&mut self, layer: usize) -> &mut ParamLayer {
        self.param_layers_mut()
            .nth(layer)
            .expect("parameterized layer index in range")
    }

    /// Checks `batch` against the input shape and returns it with the
    /// canonical `[N, input_shape..]` shape.
    fn conform_batch(&self, batch: &Tensor) -> Result<Tensor> {
        let per_sample: usize = self.arch.input_shape.iter().product();
        let n = batch.shape()[0];
        if batch.shape().len() < 2 || n * per_sample != batch.numel() {
            return Err(Error::Input(format!(
                "batch of shape {:?} does not match network input {:?}",
                batch.shape(),
                self.arch.input_shape
            )));
        }
        let mut shape = vec![n];
        shape.extend_from_slice(&self.arch.input_shape);
        Tensor::new(shape, batch.values().to_vec())
    }

    /// Records the forward pass on `tape` with every weight and bias as a
    /// gradient-requiring leaf.
    pub fn forward(&self, tape: &mut Tape, batch: &Tensor) -> Result<ForwardPass> {
        let input = self.conform_batch(batch)?;
        let mut x = tape.leaf(&input);
        let mut params = Vec::new();
        for layer in &self.layers {
            x = match layer {
                Layer::Param(p) => {
                    let w = tape.param(&p.weight);
                    let b = tape.param(&p.bias);
                    params.push((w, b));
                    match p.kind {
                        ParamKind::Dense => {
                            let h = tape.matmul(x, w)?;
                            tape.add_row_bias(h, b)?
                        }
                        ParamKind::Conv { stride, padding } => {
                            let h = tape.conv2d(x, w, stride, padding)?;
                            tape.add_channel_bias(h, b)?
                        }
                    }
                }
                Layer::Relu => tape.relu(x),
                Layer::MaxPool2x2 => tape.maxpool2x2(x)?,
                Layer::Flatten => {
                    let s = tape.shape(x);
                    let shape = vec![s[0], s[1..].iter().product()];
                    tape.reshape(x, shape)?
                }
            };
        }
        Ok(ForwardPass { logits: x, params })
    }

    /// Tape-free inference; produces the same logits as [`Network::forward`].
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        let input = self.conform_batch(batch)?;
        let n = input.shape()[0];
        let mut shape = input.shape().to_vec();
        let mut values = input.into_values();
        for layer in &self.layers {
            match layer {
                Layer::Param(p) => {
                    let ws = p.weight.shape();
                    let bias = p.bias.values();
                    match p.kind {
                        ParamKind::Dense => {
                            let (k, m) = (ws[0], ws[1]);
                            values = kernels::matmul(&values, p.weight.values(), n, k, m);
                            for row in values.chunks_mut(m) {
                                for (v, b) in row.iter_mut().zip(bias) {
                                    *v += b;
                                }
                            }
                            shape = vec![n, m];
                        }
                        ParamKind::Conv { stride, padding } => {
                            let geo = kernels::ConvGeometry::new(
                                shape[1], shape[2], shape[3], ws[2], ws[3], stride, padding,
                            )
                            .ok_or_else(|| Error::Config("conv2d has no valid output".into()))?;
                            values =
                                kernels::conv2d_forward(&values, p.weight.values(), n, ws[0], &geo);
                            let plane = geo.positions();
                            for (i, chunk) in values.chunks_mut(plane).enumerate() {
                                let b = bias[i % ws[0]];
                                chunk.iter_mut().for_each(|v| *v += b);
                            }
                            shape = vec![n, ws[0], geo.out_h, geo.out_w];
                        }
                    }
                }
                Layer::Relu => values.iter_mut().for_each(|v| {
                    if *v <= 0.0 {
                        *v = 0.0
                    }
                }),
                Layer::MaxPool2x2 => {
                    let (pooled, _) = kernels::maxpool2x2(&values, &shape);
                    values = pooled;
                    shape = vec![shape[0], shape[1], shape[2] / 2, shape[3] / 2];
                }
                Layer::Flatten => shape = vec![n, shape[1..].iter().product()],
            }
        }
        Tensor::new(shape, values)
    }

    /// Adds the gradients of one backward pass into the parameter tensors.
    pub fn accumulate_grads(&mut self, pass: &ForwardPass, grads: &Gradients) -> Result<()> {
        for (p, &(w, b)) in self.param_layers_mut().zip(&pass.params) {
            ensure_grad(&mut p.weight);
            ensure_grad(&mut p.bias);
            grads.accumulate_into(w, &mut p.weight)?;
            grads.accumulate_into(b, &mut p.bias)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in self.param_layers_mut() {
            p.weight.zero_grad();
            p.bias.zero_grad();
        }
    }

    /// Every dense/conv weight in layer order, row-major within a layer.
    pub fn prunable_parameters(&self) -> Vec<PrunableEntry> {
        self.param_layers()
            .enumerate()
            .flat_map(|(layer, p)| {
                p.weight.values().iter().zip(&p.mask).enumerate().map(
                    move |(index, (&value, &kept))| PrunableEntry {
                        layer,
                        index,
                        value,
                        kept,
                    },
                )
            })
            .collect()
    }

    pub fn mask(&self) -> Mask {
        Mask::new(self.param_layers().map(|p| p.mask.clone()).collect())
    }

    /// Installs `mask` and zeroes the weights (and their momentum) it
    /// removes. Without `reset`, the new mask must be a subset of the
    /// current one.
    pub fn apply_mask(&mut self, mask: &Mask, reset: bool) -> Result<()> {
        let current = self.mask();
        if !mask.same_shape(&current) {
            return Err(Error::Input(format!(
                "mask layer sizes {:?} do not match network {:?}",
                mask.layer_sizes(),
                current.layer_sizes()
            )));
        }
        if !reset && !mask.is_subset_of(&current) {
            return Err(Error::Usage(
                "new mask would revive pruned weights; pass reset to replace the mask".into(),
            ));
        }
        for (p, bits) in self.param_layers_mut().zip(mask.layers()) {
            p.mask.clone_from(bits);
            let ParamLayer {
                weight,
                weight_velocity,
                mask,
                ..
            } = p;
            for ((w, v), &keep) in weight
                .values_mut()
                .iter_mut()
                .zip(weight_velocity.iter_mut())
                .zip(mask.iter())
            {
                if !keep {
                    *w = 0.0;
                    *v = 0.0;
                }
            }
        }
        Ok(())
    }

    /// Restores surviving weights (and all biases) to their initial values,
    /// zeroes pruned weights, and clears the momentum buffers.
    pub fn rewind(&mut self) {
        for p in self.param_layers_mut() {
            for ((w, &w0), &keep) in p
                .weight
                .values_mut()
                .iter_mut()
                .zip(&p.initial_weight)
                .zip(&p.mask)
            {
                *w = if keep { w0 } else { 0.0 };
            }
            p.bias.values_mut().copy_from_slice(&p.initial_bias);
            p.weight_velocity.iter_mut().for_each(|v| *v = 0.0);
            p.bias_velocity.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn surviving(&self) -> usize {
        self.param_layers()
            .map(|p| p.mask.iter().filter(|&&b| b).count())
            .sum()
    }

    /// `1 − surviving / total` over prunable weights.
    pub fn sparsity(&self) -> f64 {
        1.0 - self.surviving() as f64 / self.num_prunable() as f64
    }

    /// Index of the designated histogram layer: the last parameterized layer
    /// before the classifier head, or the only one.
    pub fn default_histogram_layer(&self) -> usize {
        self.num_param_layers().saturating_sub(2)
    }
}

fn ensure_grad(t: &mut Tensor) {
    if !t.requires_grad() {
        *t = std::mem::replace(t, Tensor::scalar(0.0)).requiring_grad();
    }
}

fn new_param<F>(
    rng: &mut ChaCha8Rng,
    shape: Vec<usize>,
    fan_in: usize,
    outputs: usize,
    kind: ParamKind,
    init: F,
) -> Result<ParamLayer>
where
    F: FnOnce(&mut [f64]),
{
    let numel: usize = shape.iter().product();
    let bound = (6.0 / fan_in as f64).sqrt();
    let mut values: Vec<f64> = (0..numel)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    init(&mut values);
    let weight = Tensor::new(shape, values)?.requiring_grad();
    let bias = Tensor::zeros(vec![outputs])?.requiring_grad();
    Ok(ParamLayer {
        kind,
        initial_weight: weight.values().to_vec(),
        initial_bias: bias.values().to_vec(),
        mask: vec![true; numel],
        weight_velocity: vec![0.0; numel],
        bias_velocity: vec![0.0; outputs],
        weight,
        bias,
    })
}
