//! Forward inference and accuracy probes.
//!
//! The engine evaluates compressed candidates hundreds of times per search,
//! so this is the hot path. Samples are independent, which makes the batch
//! loop data-parallel: with the `parallel` feature the samples run on the
//! rayon pool, and because the per-sample results reduce to integer hit
//! counts the parallel report equals the sequential one exactly.
//!
//! Inference semantics: valid padding, stride per spec, rectified-linear
//! after every layer except the last, global average pooling before the first
//! fully connected layer. Per-output accumulation runs in f64.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ir::{LayerKind, NetworkIR, Task};

/// A labeled evaluation set. Inputs are channel-major `c * h * w`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Vec<f32>>,
    pub labels: Vec<u32>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
}

impl Dataset {
    pub fn new(
        inputs: Vec<Vec<f32>>,
        labels: Vec<u32>,
        channels: usize,
        height: usize,
        width: usize,
        classes: usize,
    ) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} inputs vs {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        let want = channels * height * width;
        for (i, x) in inputs.iter().enumerate() {
            if x.len() != want {
                return Err(Error::Shape(format!(
                    "sample {i} has {} values, shape wants {want}",
                    x.len()
                )));
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("sample {i} contains non-finite values")));
            }
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::InvalidArg(format!(
                "label {bad} outside [0, {classes})"
            )));
        }
        Ok(Self { inputs, labels, channels, height, width, classes })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Top-1 / top-5 accuracy, in percent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub top1: f64,
    pub top5: f64,
    pub samples: usize,
}

/// Runs the network on one input, returning logits.
///
/// For networks ending in a convolution the flattened final feature map
/// stands in for logits.
pub fn forward(net: &NetworkIR, input: &[f32]) -> Result<Vec<f32>> {
    let first = &net.layer(0).spec;
    let want = first.in_channels * first.input_height * first.input_width;
    if input.len() != want {
        return Err(Error::Shape(format!(
            "input has {} values, first layer wants {want}",
            input.len()
        )));
    }
    let mut data = input.to_vec();
    let mut c = first.in_channels;
    let mut h = first.input_height;
    let mut w = first.input_width;
    let last = net.len() - 1;

    for (l, layer) in net.layers().iter().enumerate() {
        let spec = &layer.spec;
        match spec.kind {
            LayerKind::Conv | LayerKind::DepthwiseConv => {
                if c != spec.in_channels || h != spec.input_height || w != spec.input_width {
                    return Err(Error::Shape(format!(
                        "layer {l} expects {}x{}x{}, got {c}x{h}x{w}",
                        spec.in_channels, spec.input_height, spec.input_width
                    )));
                }
                let (ow, oh) = spec.output_dims()?;
                let mut out = vec![0.0f32; spec.out_channels * oh * ow];
                match spec.kind {
                    LayerKind::Conv => conv_forward(layer, &data, h, w, oh, ow, &mut out),
                    LayerKind::DepthwiseConv => {
                        depthwise_forward(layer, &data, h, w, oh, ow, &mut out)
                    }
                    LayerKind::FullyConnected => unreachable!(),
                }
                data = out;
                c = spec.out_channels;
                h = oh;
                w = ow;
            }
            LayerKind::FullyConnected => {
                if c != spec.in_channels {
                    return Err(Error::Shape(format!(
                        "layer {l} expects {} features, got {c}",
                        spec.in_channels
                    )));
                }
                // Global average pool collapses any remaining spatial extent.
                if h * w > 1 {
                    let area = (h * w) as f64;
                    data = (0..c)
                        .map(|ch| {
                            let s: f64 =
                                data[ch * h * w..(ch + 1) * h * w].iter().map(|&v| v as f64).sum();
                            (s / area) as f32
                        })
                        .collect();
                    h = 1;
                    w = 1;
                }
                let mut out = vec![0.0f32; spec.out_channels];
                for (o, slot) in out.iter_mut().enumerate() {
                    let row = layer.channel(o);
                    let mut acc: f64 =
                        if spec.has_bias { layer.bias[o] as f64 } else { 0.0 };
                    for (i, &v) in data.iter().enumerate() {
                        acc += row[i] as f64 * v as f64;
                    }
                    *slot = acc as f32;
                }
                data = out;
                c = spec.out_channels;
            }
        }
        if l != last {
            data.iter_mut().for_each(|v| *v = v.max(0.0));
        }
    }
    Ok(data)
}

fn conv_forward(
    layer: &crate::ir::Layer,
    input: &[f32],
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    out: &mut [f32],
) {
    let spec = &layer.spec;
    let k = spec.kernel_size;
    let s = spec.stride;
    for o in 0..spec.out_channels {
        let kernel = layer.channel(o);
        let bias = if spec.has_bias { layer.bias[o] as f64 } else { 0.0 };
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = bias;
                for i in 0..spec.in_channels {
                    let in_base = i * h * w;
                    let k_base = i * k * k;
                    for ky in 0..k {
                        let in_row = in_base + (y * s + ky) * w + x * s;
                        let k_row = k_base + ky * k;
                        for kx in 0..k {
                            acc += kernel[k_row + kx] as f64 * input[in_row + kx] as f64;
                        }
                    }
                }
                out[o * oh * ow + y * ow + x] = acc as f32;
            }
        }
    }
}

fn depthwise_forward(
    layer: &crate::ir::Layer,
    input: &[f32],
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    out: &mut [f32],
) {
    let spec = &layer.spec;
    let k = spec.kernel_size;
    let s = spec.stride;
    for ch in 0..spec.out_channels {
        let kernel = layer.channel(ch);
        let bias = if spec.has_bias { layer.bias[ch] as f64 } else { 0.0 };
        let in_base = ch * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = bias;
                for ky in 0..k {
                    let in_row = in_base + (y * s + ky) * w + x * s;
                    for kx in 0..k {
                        acc += kernel[ky * k + kx] as f64 * input[in_row + kx] as f64;
                    }
                }
                out[ch * oh * ow + y * ow + x] = acc as f32;
            }
        }
    }
}

/// Position of `label` when classes sort by descending logit, ties broken by
/// lower class index. Rank 0 means top-1 correct; rank < 5 means top-5.
pub fn label_rank(logits: &[f32], label: usize) -> usize {
    let target = logits[label];
    logits
        .iter()
        .enumerate()
        .filter(|&(i, &v)| v > target || (v == target && i < label))
        .count()
}

fn sample_hits(net: &NetworkIR, input: &[f32], label: u32) -> Result<(u64, u64)> {
    let logits = forward(net, input)?;
    let rank = label_rank(&logits, label as usize);
    Ok((u64::from(rank == 0), u64::from(rank < 5)))
}

/// Sequential reference evaluation; the parallel path must match it exactly.
pub fn evaluate_sequential(net: &NetworkIR, data: &Dataset, batch: usize) -> Result<EvalReport> {
    check_eval_args(data, batch)?;
    let mut hits1 = 0u64;
    let mut hits5 = 0u64;
    for chunk_start in (0..data.len()).step_by(batch) {
        let end = (chunk_start + batch).min(data.len());
        for i in chunk_start..end {
            let (h1, h5) = sample_hits(net, &data.inputs[i], data.labels[i])?;
            hits1 += h1;
            hits5 += h5;
        }
    }
    Ok(report_from(hits1, hits5, data.len()))
}

/// Rayon evaluation: samples fan out in `batch`-sized chunks; hit counts are
/// integers so the reduction is order-independent.
#[cfg(feature = "parallel")]
pub fn evaluate_parallel(net: &NetworkIR, data: &Dataset, batch: usize) -> Result<EvalReport> {
    check_eval_args(data, batch)?;
    let (hits1, hits5) = data
        .inputs
        .par_chunks(batch)
        .zip(data.labels.par_chunks(batch))
        .map(|(inputs, labels)| -> Result<(u64, u64)> {
            let mut acc = (0u64, 0u64);
            for (input, &label) in inputs.iter().zip(labels) {
                let (h1, h5) = sample_hits(net, input, label)?;
                acc.0 += h1;
                acc.1 += h5;
            }
            Ok(acc)
        })
        .try_reduce(|| (0, 0), |a, b| Ok((a.0 + b.0, a.1 + b.1)))?;
    Ok(report_from(hits1, hits5, data.len()))
}

/// Top-1/top-5 over the whole dataset. `batch` shapes work dispatch only;
/// the report is identical for any batch size.
pub fn evaluate(net: &NetworkIR, data: &Dataset, batch: usize) -> Result<EvalReport> {
    #[cfg(feature = "parallel")]
    {
        evaluate_parallel(net, data, batch)
    }
    #[cfg(not(feature = "parallel"))]
    {
        evaluate_sequential(net, data, batch)
    }
}

fn check_eval_args(data: &Dataset, batch: usize) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InvalidArg("dataset is empty".into()));
    }
    if batch == 0 {
        return Err(Error::InvalidArg("batch must be >= 1".into()));
    }
    Ok(())
}

fn report_from(hits1: u64, hits5: u64, n: usize) -> EvalReport {
    EvalReport {
        top1: 100.0 * hits1 as f64 / n as f64,
        top5: 100.0 * hits5 as f64 / n as f64,
        samples: n,
    }
}

/// Which accuracy feeds the reward.
///
/// Top-1 is the default for the bundled probe: on a 10-class desk-scale
/// dataset top-5 saturates near 100% (five of ten classes always rank), so a
/// top-5 reward cannot tell harmful plans from harmless ones. Top-5 remains
/// selectable for setups with enough classes to give it dynamic range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    Top1,
    Top5,
}

/// Performance measurement of one network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    /// The scalar the reward consumes (top-5 for bundled classification
    /// probes, an external score such as average precision for detection).
    pub metric: f64,
    pub top1: f64,
    pub top5: f64,
}

/// Anything that can score a network. The search only needs this interface,
/// so detection-style probes (or planted test probes) plug in without
/// touching the loop.
pub trait MetricProbe {
    fn measure(&self, net: &NetworkIR) -> Result<Measurement>;
}

/// The bundled probe: classification accuracy over a dataset.
pub struct ClassificationProbe {
    pub data: Dataset,
    pub batch: usize,
    pub metric: MetricKind,
}

impl MetricProbe for ClassificationProbe {
    fn measure(&self, net: &NetworkIR) -> Result<Measurement> {
        if net.task() != Task::Classification {
            return Err(Error::InvalidArg(
                "classification probe on a non-classification network".into(),
            ));
        }
        let report = evaluate(net, &self.data, self.batch)?;
        let metric = match self.metric {
            MetricKind::Top1 => report.top1,
            MetricKind::Top5 => report.top5,
        };
        Ok(Measurement { metric, top1: report.top1, top5: report.top5 })
    }
}

const DATA_MAGIC: &str = "AJPQ-DATA v1";

/// Writes a dataset: header, then f32 inputs sample-major, then u32 labels,
/// all little-endian.
pub fn write_dataset(data: &Dataset, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{DATA_MAGIC}")?;
    writeln!(out, "samples {}", data.len())?;
    writeln!(out, "channels {}", data.channels)?;
    writeln!(out, "height {}", data.height)?;
    writeln!(out, "width {}", data.width)?;
    writeln!(out, "classes {}", data.classes)?;
    writeln!(out, "end")?;
    for x in &data.inputs {
        for v in x {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    for &l in &data.labels {
        out.write_all(&l.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a dataset written by [`write_dataset`].
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;
    let needle = b"\nend\n";
    let end = raw
        .windows(needle.len())
        .position(|w| w == needle)
        .ok_or_else(|| Error::Format("missing 'end' header terminator".into()))?;
    let header = std::str::from_utf8(&raw[..end])
        .map_err(|_| Error::Format("header is not valid UTF-8".into()))?;
    let blob = &raw[end + needle.len()..];

    let mut lines = header.lines();
    if lines.next() != Some(DATA_MAGIC) {
        return Err(Error::Format("bad magic, want 'AJPQ-DATA v1'".into()));
    }
    let mut field = |key: &str| -> Result<usize> {
        let line = lines
            .next()
            .ok_or_else(|| Error::Format(format!("missing '{key}' line")))?;
        line.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Format(format!("expected '{key} <n>', found '{line}'")))
    };
    let samples = field("samples")?;
    let channels = field("channels")?;
    let height = field("height")?;
    let width = field("width")?;
    let classes = field("classes")?;

    let per_sample = channels * height * width;
    let want = samples * per_sample * 4 + samples * 4;
    if blob.len() != want {
        return Err(Error::Format(format!(
            "data blob has {} bytes, header wants {want}",
            blob.len()
        )));
    }
    let mut inputs = Vec::with_capacity(samples);
    for s in 0..samples {
        let base = s * per_sample * 4;
        inputs.push(
            blob[base..base + per_sample * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        );
    }
    let labels_base = samples * per_sample * 4;
    let labels = blob[labels_base..]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Dataset::new(inputs, labels, channels, height, width, classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{Layer, LayerSpec, Task};

    fn identity_conv(index: usize, width: usize, height: usize) -> Layer {
        let spec = LayerSpec::conv(index, 1, 1, 1, 1, width, height, false);
        Layer::new(spec, vec![1.0], vec![]).unwrap()
    }

    #[test]
    fn identity_conv_pair_rectifies_input() {
        // Two identity 1x1 convs: the inner activation rectifies, the final
        // layer passes through.
        let net = NetworkIR::new(
            vec![identity_conv(0, 2, 2), identity_conv(1, 2, 2)],
            Task::Classification,
        )
        .unwrap();
        let input = [1.0f32, -2.0, 0.5, -0.25];
        let out = forward(&net, &input).unwrap();
        assert_eq!(out, vec![1.0, 0.0, 0.5, 0.0]);
    }

    #[test]
    fn zero_weights_emit_bias() {
        let spec = LayerSpec::fully_connected(0, 4, 3, true);
        let layer = Layer::new(spec, vec![0.0; 12], vec![1.0, 2.0, 3.0]).unwrap();
        let net = NetworkIR::new(vec![layer], Task::Classification).unwrap();
        let out = forward(&net, &[5.0, -1.0, 2.0, 0.0]).unwrap();
        assert_eq!(out, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn hand_computed_valid_convolution() {
        let spec = LayerSpec::conv(0, 1, 1, 2, 1, 3, 3, false);
        let layer = Layer::new(spec, vec![1.0, 0.0, 0.0, -1.0], vec![]).unwrap();
        let net = NetworkIR::new(vec![layer], Task::Classification).unwrap();
        let input: Vec<f32> = (1..=9).map(|v| v as f32).collect();
        let out = forward(&net, &input).unwrap();
        assert_eq!(out, vec![-4.0, -4.0, -4.0, -4.0]);
    }

    #[test]
    fn input_shape_mismatch_rejected() {
        let net = NetworkIR::new(vec![identity_conv(0, 2, 2)], Task::Classification).unwrap();
        assert!(forward(&net, &[1.0, 2.0]).is_err());
    }

    fn onehot_dataset(n: usize) -> Dataset {
        let classes = 10;
        let inputs: Vec<Vec<f32>> = (0..n)
            .map(|i| {
                let mut x = vec![0.0f32; classes];
                x[i % classes] = 1.0;
                x
            })
            .collect();
        let labels: Vec<u32> = (0..n).map(|i| (i % classes) as u32).collect();
        Dataset::new(inputs, labels, classes, 1, 1, classes).unwrap()
    }

    fn identity_fc_net() -> NetworkIR {
        let spec = LayerSpec::fully_connected(0, 10, 10, false);
        let mut kernel = vec![0.0f32; 100];
        for i in 0..10 {
            kernel[i * 10 + i] = 1.0;
        }
        let layer = Layer::new(spec, kernel, vec![]).unwrap();
        NetworkIR::new(vec![layer], Task::Classification).unwrap()
    }

    #[test]
    fn perfect_classifier_scores_100() {
        let net = identity_fc_net();
        let data = onehot_dataset(100);
        let report = evaluate(&net, &data, 7).unwrap();
        assert_eq!(report.top1, 100.0);
        assert_eq!(report.top5, 100.0);
        assert_eq!(report.samples, 100);
    }

    #[test]
    fn random_logits_hit_top5_about_half_the_time() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(41);
        let n = 10_000;
        let mut hits = 0u32;
        for _ in 0..n {
            let logits: Vec<f32> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
            let label = rng.random_range(0..10u32);
            if label_rank(&logits, label as usize) < 5 {
                hits += 1;
            }
        }
        let pct = 100.0 * hits as f64 / n as f64;
        assert!((48.0..=52.0).contains(&pct), "top-5 rate {pct}");
    }

    #[test]
    fn ties_resolve_to_lower_class_index() {
        let logits = vec![1.0f32; 10];
        assert_eq!(label_rank(&logits, 0), 0);
        assert_eq!(label_rank(&logits, 4), 4);
        assert_eq!(label_rank(&logits, 9), 9);
    }

    #[test]
    fn batch_size_never_changes_the_report() {
        let net = identity_fc_net();
        let data = onehot_dataset(97);
        let a = evaluate(&net, &data, 1).unwrap();
        let b = evaluate(&net, &data, 60).unwrap();
        assert_eq!(a, b);
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_equals_sequential_exactly() {
        let net = identity_fc_net();
        let data = onehot_dataset(233);
        let seq = evaluate_sequential(&net, &data, 13).unwrap();
        let par = evaluate_parallel(&net, &data, 13).unwrap();
        assert_eq!(seq, par);
    }

    #[test]
    fn empty_dataset_rejected() {
        let net = identity_fc_net();
        let data = Dataset::new(vec![], vec![], 10, 1, 1, 10).unwrap();
        assert!(evaluate(&net, &data, 60).is_err());
    }

    #[test]
    fn dataset_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.data");
        let data = onehot_dataset(17);
        write_dataset(&data, &path).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), data);
    }

    #[test]
    fn dataset_blob_length_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.data");
        let data = onehot_dataset(17);
        write_dataset(&data, &path).unwrap();
        let mut raw = std::fs::read(&path).unwrap();
        raw.truncate(raw.len() - 4);
        std::fs::write(&path, raw).unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::Format(_))));
    }
}
