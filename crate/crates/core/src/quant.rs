//! Bitwidth plans and fake quantization.
//!
//! A plan assigns every output channel an integer bitwidth. Zero bits prunes
//! the channel outright; `b >= 1` bits fake-quantizes it (symmetric uniform
//! quantize-then-dequantize) so the real-valued inference path evaluates the
//! compressed model. Bits of 32 and above pass weights through untouched,
//! which gives tests a true no-op plan at source precision.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::ir::{Layer, NetworkIR};

/// How bitwidths may vary across the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantMode {
    /// Every channel carries its own bitwidth.
    ChannelWise,
    /// All surviving channels within a layer share one bitwidth.
    LayerWise,
    /// All surviving channels network-wide sit at `bit_max`; only pruning varies.
    Fixed,
}

impl QuantMode {
    pub fn name(self) -> &'static str {
        match self {
            QuantMode::ChannelWise => "channel",
            QuantMode::LayerWise => "layer",
            QuantMode::Fixed => "fixed",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "channel" => Ok(QuantMode::ChannelWise),
            "layer" => Ok(QuantMode::LayerWise),
            "fixed" => Ok(QuantMode::Fixed),
            other => Err(Error::Format(format!("unknown quantization mode '{other}'"))),
        }
    }
}

/// Per-layer, per-channel bitwidth assignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantPlan {
    pub rows: Vec<Vec<u8>>,
    pub bit_max: u8,
    pub mode: QuantMode,
}

impl QuantPlan {
    /// All channels at `bit_max`, nothing pruned.
    pub fn uniform(net: &NetworkIR, bit_max: u8, mode: QuantMode) -> Self {
        let rows = net.channel_counts().iter().map(|&c| vec![bit_max; c]).collect();
        Self { rows, bit_max, mode }
    }

    /// Checks shape against `net` plus the mode's own invariant.
    pub fn validate(&self, net: &NetworkIR) -> Result<()> {
        if self.bit_max == 0 {
            return Err(Error::InvalidArg("bit_max must be >= 1".into()));
        }
        if self.rows.len() != net.len() {
            return Err(Error::Shape(format!(
                "plan covers {} layers, network has {}",
                self.rows.len(),
                net.len()
            )));
        }
        for (l, row) in self.rows.iter().enumerate() {
            if row.len() != net.layer(l).spec.out_channels {
                return Err(Error::Shape(format!(
                    "layer {l}: plan row covers {} channels, layer has {}",
                    row.len(),
                    net.layer(l).spec.out_channels
                )));
            }
            if let Some(&b) = row.iter().find(|&&b| b > self.bit_max) {
                return Err(Error::InvalidArg(format!(
                    "layer {l}: bitwidth {b} exceeds bit_max {}",
                    self.bit_max
                )));
            }
            match self.mode {
                QuantMode::ChannelWise => {}
                QuantMode::LayerWise => {
                    let mut nz = row.iter().filter(|&&b| b > 0);
                    if let Some(&first) = nz.next() {
                        if nz.any(|&b| b != first) {
                            return Err(Error::InvalidArg(format!(
                                "layer {l}: layer-wise plan has mixed nonzero bitwidths"
                            )));
                        }
                    }
                }
                QuantMode::Fixed => {
                    if row.iter().any(|&b| b != 0 && b != self.bit_max) {
                        return Err(Error::InvalidArg(format!(
                            "layer {l}: fixed plan has bits other than 0 or bit_max"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Short stable content digest (FNV-1a over the canonical text form),
    /// used to correlate trace rows with sidecar plan files.
    pub fn digest(&self) -> String {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for byte in self.canonical_text().bytes() {
            hash ^= byte as u64;
            hash = hash.wrapping_mul(0x100_0000_01b3);
        }
        format!("{hash:016x}")
    }

    fn canonical_text(&self) -> String {
        let mut s = format!("mode {} bit_max {}\n", self.mode.name(), self.bit_max);
        for row in &self.rows {
            for b in row {
                s.push_str(&b.to_string());
                s.push(' ');
            }
            s.push('\n');
        }
        s
    }
}

/// Symmetric uniform fake quantization of one channel's weights.
///
/// `scale = max|w| / qmax` with `qmax = 2^(b-1) - 1` (and `qmax = 1` at
/// `b = 1`, giving the levels `{-s, 0, s}`). Each weight maps to
/// `round(w / scale)` clamped to `[-qmax, qmax]`, then back through the
/// scale. An all-zero channel stays all zero. Internal arithmetic runs in
/// f64 so re-quantizing an already quantized channel is a bit-exact no-op.
pub fn fake_quantize_channel(weights: &[f32], b: u8, bit_max: u8) -> Result<Vec<f32>> {
    if b == 0 || b > bit_max {
        return Err(Error::InvalidArg(format!(
            "bitwidth {b} outside [1, {bit_max}]"
        )));
    }
    if let Some(w) = weights.iter().find(|w| !w.is_finite()) {
        return Err(Error::NonFinite(format!("weight {w} in quantizer input")));
    }
    if b >= 32 {
        return Ok(weights.to_vec());
    }
    let max_abs = weights.iter().fold(0.0f32, |m, w| m.max(w.abs())) as f64;
    if max_abs == 0.0 {
        return Ok(vec![0.0; weights.len()]);
    }
    let qmax = if b == 1 { 1.0 } else { ((1u64 << (b - 1)) - 1) as f64 };
    let scale = max_abs / qmax;
    Ok(weights
        .iter()
        .map(|&w| {
            let q = (w as f64 / scale).round().clamp(-qmax, qmax);
            (q * scale) as f32
        })
        .collect())
}

/// Applies a plan to a network, returning the compressed copy.
///
/// Channels at 0 bits lose weights and bias entirely; surviving channels get
/// fake-quantized kernels and keep their bias at source precision.
pub fn apply_plan(net: &NetworkIR, plan: &QuantPlan) -> Result<NetworkIR> {
    plan.validate(net)?;
    let task = net.task();
    let mut layers = Vec::with_capacity(net.len());
    for (layer, row) in net.layers().iter().zip(&plan.rows) {
        layers.push(apply_row(layer, row, plan.bit_max)?);
    }
    NetworkIR::new(layers, task)
}

fn apply_row(layer: &Layer, row: &[u8], bit_max: u8) -> Result<Layer> {
    let wpc = layer.spec.weights_per_channel();
    let mut kernel = Vec::with_capacity(layer.kernel.len());
    let mut bias = layer.bias.clone();
    for (i, &b) in row.iter().enumerate() {
        let slice = layer.channel(i);
        if b == 0 {
            kernel.extend(std::iter::repeat_n(0.0f32, wpc));
            if layer.spec.has_bias {
                bias[i] = 0.0;
            }
        } else {
            kernel.extend(fake_quantize_channel(slice, b, bit_max)?);
        }
    }
    Layer::new(layer.spec.clone(), kernel, bias)
}

const PLAN_MAGIC: &str = "AJPQ-PLAN v1";

/// Writes a plan with its provenance (which episode produced it, at what
/// reward).
pub fn write_plan(plan: &QuantPlan, episode: usize, reward: f64, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{PLAN_MAGIC}")?;
    writeln!(out, "mode {}", plan.mode.name())?;
    writeln!(out, "bit_max {}", plan.bit_max)?;
    writeln!(out, "episode {episode}")?;
    writeln!(out, "reward {reward}")?;
    writeln!(out, "layers {}", plan.rows.len())?;
    for (l, row) in plan.rows.iter().enumerate() {
        let bits: Vec<String> = row.iter().map(|b| b.to_string()).collect();
        writeln!(out, "layer {l} bits {}", bits.join(" "))?;
    }
    writeln!(out, "end")?;
    out.flush()?;
    Ok(())
}

/// Reads a plan file; returns the plan with its provenance.
pub fn read_plan(path: &Path) -> Result<(QuantPlan, usize, f64)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(PLAN_MAGIC) {
        return Err(Error::Format("bad magic, want 'AJPQ-PLAN v1'".into()));
    }
    let mut field = |key: &str| -> Result<String> {
        let line = lines
            .next()
            .ok_or_else(|| Error::Format(format!("missing '{key}' line")))?;
        line.strip_prefix(key)
            .and_then(|rest| rest.strip_prefix(' '))
            .map(str::to_owned)
            .ok_or_else(|| Error::Format(format!("expected '{key}' line, found '{line}'")))
    };
    let mode = QuantMode::from_name(&field("mode")?)?;
    let bit_max: u8 = field("bit_max")?
        .parse()
        .map_err(|_| Error::Format("bad bit_max".into()))?;
    let episode: usize = field("episode")?
        .parse()
        .map_err(|_| Error::Format("bad episode".into()))?;
    let reward: f64 = field("reward")?
        .parse()
        .map_err(|_| Error::Format("bad reward".into()))?;
    let count: usize = field("layers")?
        .parse()
        .map_err(|_| Error::Format("bad layer count".into()))?;
    let mut rows = Vec::with_capacity(count);
    for l in 0..count {
        let line = field(&format!("layer {l} bits"))?;
        let row: Vec<u8> = line
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::Format(format!("bad bit '{t}'"))))
            .collect::<Result<_>>()?;
        rows.push(row);
    }
    if lines.next() != Some("end") {
        return Err(Error::Format("missing 'end' terminator".into()));
    }
    Ok((QuantPlan { rows, bit_max, mode }, episode, reward))
}
