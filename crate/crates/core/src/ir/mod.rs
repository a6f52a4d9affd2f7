//! Network intermediate representation.
//!
//! A network is an ordered chain of quantizable layers, each carrying its
//! dense 32-bit weights in channel-major order. Supported topologies are
//! linear chains of convolutions (plain or depthwise) followed by fully
//! connected layers; this covers the depthwise-separable feature extractors
//! the search targets.

mod cost;
mod io;

pub use cost::{assess, layer_base_bits, layer_flops, layer_size_bits, total_cost, CostLedger};
pub use io::{read_model, write_model};

use crate::error::{Error, Result};

/// Task the network was trained for; selects the reward branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Classification,
    Detection,
}

/// Layer kind. The state featurizer encodes these as 0 (FC), 1 (Conv),
/// 2 (DepthwiseConv).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    DepthwiseConv,
    FullyConnected,
}

impl LayerKind {
    pub fn type_code(self) -> u8 {
        match self {
            LayerKind::FullyConnected => 0,
            LayerKind::Conv => 1,
            LayerKind::DepthwiseConv => 2,
        }
    }
}

/// Static description of one quantizable layer.
///
/// Fully connected layers use the conventions `k = 1`, `stride = 0`,
/// `w = h = 1` so every layer exposes the same feature tuple.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub index: usize,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub input_width: usize,
    pub input_height: usize,
    pub has_bias: bool,
}

impl LayerSpec {
    pub fn conv(
        index: usize,
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
        input_width: usize,
        input_height: usize,
        has_bias: bool,
    ) -> Self {
        Self {
            index,
            kind: LayerKind::Conv,
            in_channels,
            out_channels,
            kernel_size,
            stride,
            input_width,
            input_height,
            has_bias,
        }
    }

    pub fn depthwise(
        index: usize,
        channels: usize,
        kernel_size: usize,
        stride: usize,
        input_width: usize,
        input_height: usize,
        has_bias: bool,
    ) -> Self {
        Self {
            index,
            kind: LayerKind::DepthwiseConv,
            in_channels: channels,
            out_channels: channels,
            kernel_size,
            stride,
            input_width,
            input_height,
            has_bias,
        }
    }

    pub fn fully_connected(
        index: usize,
        in_channels: usize,
        out_channels: usize,
        has_bias: bool,
    ) -> Self {
        Self {
            index,
            kind: LayerKind::FullyConnected,
            in_channels,
            out_channels,
            kernel_size: 1,
            stride: 0,
            input_width: 1,
            input_height: 1,
            has_bias,
        }
    }

    /// Weights stored per output channel (kernel slice length).
    pub fn weights_per_channel(&self) -> usize {
        match self.kind {
            LayerKind::Conv => self.in_channels * self.kernel_size * self.kernel_size,
            LayerKind::DepthwiseConv => self.kernel_size * self.kernel_size,
            LayerKind::FullyConnected => self.in_channels,
        }
    }

    /// Total kernel weights in the layer.
    pub fn weight_count(&self) -> usize {
        self.weights_per_channel() * self.out_channels
    }

    /// Spatial output dims for conv-like layers (valid padding, no dilation).
    pub fn output_dims(&self) -> Result<(usize, usize)> {
        match self.kind {
            LayerKind::FullyConnected => Ok((1, 1)),
            LayerKind::Conv | LayerKind::DepthwiseConv => {
                if self.stride == 0 {
                    return Err(Error::InvalidSpec(format!(
                        "layer {}: conv stride must be nonzero",
                        self.index
                    )));
                }
                if self.input_width < self.kernel_size || self.input_height < self.kernel_size {
                    return Err(Error::InvalidSpec(format!(
                        "layer {}: kernel {} exceeds input {}x{}",
                        self.index, self.kernel_size, self.input_width, self.input_height
                    )));
                }
                let w = (self.input_width - self.kernel_size) / self.stride + 1;
                let h = (self.input_height - self.kernel_size) / self.stride + 1;
                Ok((w, h))
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.kernel_size == 0 {
            return Err(Error::InvalidSpec(format!(
                "layer {}: channel and kernel counts must be >= 1",
                self.index
            )));
        }
        match self.kind {
            LayerKind::DepthwiseConv => {
                if self.in_channels != self.out_channels {
                    return Err(Error::InvalidSpec(format!(
                        "layer {}: depthwise layers need in_channels == out_channels",
                        self.index
                    )));
                }
            }
            LayerKind::FullyConnected => {
                if self.kernel_size != 1
                    || self.stride != 0
                    || self.input_width != 1
                    || self.input_height != 1
                {
                    return Err(Error::InvalidSpec(format!(
                        "layer {}: FC layers use k=1, stride=0, w=h=1",
                        self.index
                    )));
                }
            }
            LayerKind::Conv => {
                if self.stride == 0 {
                    return Err(Error::InvalidSpec(format!(
                        "layer {}: conv stride must be nonzero",
                        self.index
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One layer: spec plus dense weights.
///
/// `kernel` is channel-major: output channel `i` owns the contiguous slice
/// `[i * wpc, (i + 1) * wpc)` where `wpc = weights_per_channel()`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub kernel: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Layer {
    pub fn new(spec: LayerSpec, kernel: Vec<f32>, bias: Vec<f32>) -> Result<Self> {
        spec.validate()?;
        if kernel.len() != spec.weight_count() {
            return Err(Error::Shape(format!(
                "layer {}: kernel has {} weights, spec wants {}",
                spec.index,
                kernel.len(),
                spec.weight_count()
            )));
        }
        let want_bias = if spec.has_bias { spec.out_channels } else { 0 };
        if bias.len() != want_bias {
            return Err(Error::Shape(format!(
                "layer {}: bias has {} entries, spec wants {}",
                spec.index,
                bias.len(),
                want_bias
            )));
        }
        if kernel.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "layer {}: weights must be finite",
                spec.index
            )));
        }
        Ok(Self { spec, kernel, bias })
    }

    /// Kernel slice of output channel `i`.
    pub fn channel(&self, i: usize) -> &[f32] {
        let wpc = self.spec.weights_per_channel();
        &self.kernel[i * wpc..(i + 1) * wpc]
    }
}

/// A trained network: ordered layers, immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkIR {
    layers: Vec<Layer>,
    task: Task,
}

impl NetworkIR {
    /// Builds and validates the chain: per-layer invariants, consecutive
    /// channel compatibility, spatial compatibility, and the conv-then-FC
    /// ordering the inference engine supports.
    pub fn new(layers: Vec<Layer>, task: Task) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidSpec("network has no layers".into()));
        }
        let mut seen_fc = false;
        for (l, layer) in layers.iter().enumerate() {
            if layer.spec.index != l {
                return Err(Error::InvalidSpec(format!(
                    "layer {} carries index {}",
                    l, layer.spec.index
                )));
            }
            match layer.spec.kind {
                LayerKind::FullyConnected => seen_fc = true,
                _ if seen_fc => {
                    return Err(Error::InvalidSpec(format!(
                        "layer {}: conv layers cannot follow FC layers",
                        l
                    )));
                }
                _ => {}
            }
        }
        for pair in layers.windows(2) {
            let (a, b) = (&pair[0].spec, &pair[1].spec);
            if a.out_channels != b.in_channels {
                return Err(Error::InvalidSpec(format!(
                    "layer {} feeds {} channels but layer {} expects {}",
                    a.index, a.out_channels, b.index, b.in_channels
                )));
            }
            if b.kind != LayerKind::FullyConnected {
                let (ow, oh) = a.output_dims()?;
                if b.input_width != ow || b.input_height != oh {
                    return Err(Error::InvalidSpec(format!(
                        "layer {} emits {}x{} but layer {} expects {}x{}",
                        a.index, ow, oh, b.index, b.input_width, b.input_height
                    )));
                }
            }
        }
        Ok(Self { layers, task })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, l: usize) -> &Layer {
        &self.layers[l]
    }

    /// Number of quantizable layers.
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn task(&self) -> Task {
        self.task
    }

    /// Per-layer output channel counts.
    pub fn channel_counts(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.spec.out_channels).collect()
    }

    pub(crate) fn into_layers(self) -> Vec<Layer> {
        self.layers
    }
}
