//! Exact size and FLOPs accounting under a bitwidth plan.
//!
//! Storage convention: a channel at `b > 0` bits stores its kernel weights at
//! `b` bits each plus 2x32 bits of dequantization metadata (scale and zero
//! point) plus its 32-bit bias when the layer has one. A channel at 0 bits
//! stores nothing. The uncompressed baseline stores every kernel weight and
//! bias at 32 bits with no metadata.
//!
//! FLOPs depend only on the zero/nonzero channel pattern, never on bitwidths.
//! Pruned channels propagate: a layer's surviving outputs become the next
//! layer's live inputs, and a depthwise layer forwards exactly the channels
//! that survive both its input mask and its own plan row.

use super::{LayerKind, LayerSpec, NetworkIR};
use crate::error::{Error, Result};

/// Bits of dequantization metadata stored per nonzero channel.
pub const CHANNEL_OVERHEAD_BITS: u64 = 2 * 32;

/// Bits per stored bias value.
pub const BIAS_BITS: u64 = 32;

/// Compressed storage of one layer under a per-channel bitwidth row.
pub fn layer_size_bits(spec: &LayerSpec, plan_row: &[u8]) -> Result<u64> {
    if plan_row.len() != spec.out_channels {
        return Err(Error::Shape(format!(
            "layer {}: plan row covers {} channels, layer has {}",
            spec.index,
            plan_row.len(),
            spec.out_channels
        )));
    }
    let wpc = spec.weights_per_channel() as u64;
    let mut bits = 0u64;
    for &b in plan_row {
        if b == 0 {
            continue;
        }
        bits += wpc * b as u64 + CHANNEL_OVERHEAD_BITS;
        if spec.has_bias {
            bits += BIAS_BITS;
        }
    }
    Ok(bits)
}

/// Uncompressed storage of one layer: all weights and biases at 32 bits.
pub fn layer_base_bits(spec: &LayerSpec) -> u64 {
    let weights = spec.weight_count() as u64;
    let biases = if spec.has_bias { spec.out_channels as u64 } else { 0 };
    (weights + biases) * 32
}

/// Multiply-accumulate count of one layer given how many of its output and
/// input channels are live. Depthwise layers compute one map per live input
/// channel, so only `nonzero_in` matters there.
pub fn layer_flops(spec: &LayerSpec, nonzero_out: usize, nonzero_in: usize) -> Result<u64> {
    if nonzero_out > spec.out_channels || nonzero_in > spec.in_channels {
        return Err(Error::InvalidArg(format!(
            "layer {}: live counts {}/{} exceed {}/{}",
            spec.index, nonzero_out, nonzero_in, spec.out_channels, spec.in_channels
        )));
    }
    let k2 = (spec.kernel_size * spec.kernel_size) as u64;
    match spec.kind {
        LayerKind::Conv => {
            let (ow, oh) = spec.output_dims()?;
            Ok(2 * nonzero_out as u64 * nonzero_in as u64 * k2 * ow as u64 * oh as u64)
        }
        LayerKind::DepthwiseConv => {
            let (ow, oh) = spec.output_dims()?;
            Ok(2 * nonzero_in as u64 * k2 * ow as u64 * oh as u64)
        }
        LayerKind::FullyConnected => Ok(2 * nonzero_out as u64 * nonzero_in as u64),
    }
}

/// Per-layer and total cost of a (possibly partial) plan.
///
/// Layers whose row is `None` are counted at their uncompressed baseline with
/// all channels live, which is how undecided layers enter the search state
/// mid-episode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostLedger {
    pub layer_size_bits: Vec<u64>,
    pub layer_flops: Vec<u64>,
    pub base_size_bits: u64,
    pub base_flops: u64,
    pub rest_size_bits: u64,
    pub rest_flops: u64,
}

impl CostLedger {
    pub fn reduced_size_bits(&self) -> i64 {
        self.base_size_bits as i64 - self.rest_size_bits as i64
    }

    pub fn reduced_flops(&self) -> i64 {
        self.base_flops as i64 - self.rest_flops as i64
    }

    /// Compressed-over-original size ratio.
    pub fn r_comp(&self) -> f64 {
        self.rest_size_bits as f64 / self.base_size_bits as f64
    }

    /// Compressed-over-original computation ratio.
    pub fn r_flops(&self) -> f64 {
        self.rest_flops as f64 / self.base_flops as f64
    }
}

/// Costs a partial plan: one optional bitwidth row per layer.
pub fn assess(net: &NetworkIR, rows: &[Option<&[u8]>]) -> Result<CostLedger> {
    if rows.len() != net.len() {
        return Err(Error::Shape(format!(
            "plan covers {} layers, network has {}",
            rows.len(),
            net.len()
        )));
    }
    let mut layer_sizes = Vec::with_capacity(net.len());
    let mut layer_flop = Vec::with_capacity(net.len());
    let mut base_size = 0u64;
    let mut base_flops = 0u64;
    let mut rest_size = 0u64;
    let mut rest_flops = 0u64;

    // Live-channel masks: baseline keeps everything, the plan keeps what is
    // nonzero, and depthwise layers intersect their row with their input.
    let mut incoming = vec![true; net.layer(0).spec.in_channels];
    for (l, layer) in net.layers().iter().enumerate() {
        let spec = &layer.spec;
        base_size += layer_base_bits(spec);
        base_flops += layer_flops(spec, spec.out_channels, spec.in_channels)?;

        let present: Vec<bool> = match rows[l] {
            None => vec![true; spec.out_channels],
            Some(row) => {
                if row.len() != spec.out_channels {
                    return Err(Error::Shape(format!(
                        "layer {}: plan row covers {} channels, layer has {}",
                        l,
                        row.len(),
                        spec.out_channels
                    )));
                }
                row.iter().map(|&b| b > 0).collect()
            }
        };
        let nz_in = incoming.iter().filter(|&&p| p).count();
        let nz_out = present.iter().filter(|&&p| p).count();

        let size = match rows[l] {
            None => layer_base_bits(spec),
            Some(row) => layer_size_bits(spec, row)?,
        };
        let flops = layer_flops(spec, nz_out, nz_in)?;
        layer_sizes.push(size);
        layer_flop.push(flops);
        rest_size += size;
        rest_flops += flops;

        incoming = match spec.kind {
            LayerKind::DepthwiseConv => incoming
                .iter()
                .zip(present.iter())
                .map(|(&i, &p)| i && p)
                .collect(),
            _ => present,
        };
    }

    Ok(CostLedger {
        layer_size_bits: layer_sizes,
        layer_flops: layer_flop,
        base_size_bits: base_size,
        base_flops,
        rest_size_bits: rest_size,
        rest_flops,
    })
}

/// Costs a complete plan.
pub fn total_cost(net: &NetworkIR, plan_rows: &[Vec<u8>]) -> Result<CostLedger> {
    let rows: Vec<Option<&[u8]>> = plan_rows.iter().map(|r| Some(r.as_slice())).collect();
    assess(net, &rows)
}
