//! Deterministic desk-scale fixtures.
//!
//! Acceptance runs need a trained model and a labeled dataset without any
//! external downloads. The generator builds a 10-class synthetic image set
//! (class templates plus noise, trivially separable) and trains a small
//! conv/depthwise/conv/conv/FC network on it by plain minibatch SGD. Every
//! byte is a pure function of the seed: fixed iteration order, seeded
//! substreams, no time-dependent state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::eval::{evaluate, Dataset};
use crate::ir::{Layer, LayerKind, LayerSpec, NetworkIR, Task};

const TEMPLATE_STREAM: u64 = 9;
const TRAIN_STREAM: u64 = 10;
const VAL_STREAM: u64 = 11;
const INIT_STREAM: u64 = 12;
const SHUFFLE_STREAM: u64 = 13;

/// Everything that shapes a fixture. Identical specs produce byte-identical
/// artifacts.
#[derive(Debug, Clone)]
pub struct FixtureSpec {
    pub seed: u64,
    pub classes: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    /// Noise std relative to unit-variance templates.
    pub noise: f32,
    pub epochs: usize,
    pub batch: usize,
    pub learning_rate: f32,
    pub weight_decay: f32,
    /// Validation top-1 the trained fixture must reach.
    pub target_top1: f64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            classes: 10,
            train_samples: 1000,
            val_samples: 400,
            noise: 0.25,
            epochs: 20,
            batch: 32,
            learning_rate: 0.05,
            weight_decay: 1e-3,
            target_top1: 95.0,
        }
    }
}

/// Input geometry of the bundled mini-net.
pub const INPUT_CHANNELS: usize = 3;
pub const INPUT_SIDE: usize = 12;

/// The mini-net layer chain: conv 16 -> depthwise 16 -> conv 32 -> conv 32 ->
/// FC 10. The depthwise stage is deliberate so depthwise pruning semantics
/// get exercised end to end; widths leave enough channel redundancy that
/// importance-ranked pruning has somewhere harmless to cut.
pub fn mini_net_specs(classes: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::conv(0, INPUT_CHANNELS, 24, 3, 1, INPUT_SIDE, INPUT_SIDE, true),
        LayerSpec::depthwise(1, 24, 3, 1, 10, 10, true),
        LayerSpec::conv(2, 24, 48, 3, 2, 8, 8, true),
        LayerSpec::conv(3, 48, 48, 1, 1, 3, 3, true),
        LayerSpec::fully_connected(4, 48, classes, true),
    ]
}

fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn class_templates(spec: &FixtureSpec) -> Vec<Vec<f32>> {
    let mut rng = substream(spec.seed, TEMPLATE_STREAM);
    let len = INPUT_CHANNELS * INPUT_SIDE * INPUT_SIDE;
    (0..spec.classes)
        .map(|_| (0..len).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect()
}

fn synth_split(spec: &FixtureSpec, templates: &[Vec<f32>], n: usize, stream: u64) -> Dataset {
    let mut rng = substream(spec.seed, stream);
    let len = INPUT_CHANNELS * INPUT_SIDE * INPUT_SIDE;
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % spec.classes;
        let amp: f32 = rng.random_range(0.7..1.3);
        let x: Vec<f32> = templates[class]
            .iter()
            .map(|&t| {
                let e: f32 = StandardNormal.sample(&mut rng);
                amp * t + spec.noise * e
            })
            .collect();
        debug_assert_eq!(x.len(), len);
        inputs.push(x);
        labels.push(class as u32);
    }
    Dataset::new(inputs, labels, INPUT_CHANNELS, INPUT_SIDE, INPUT_SIDE, spec.classes)
        .expect("generated dataset is well-formed")
}

/// Generates the fixed train/validation split. The two splits draw from
/// disjoint RNG streams, so they never share a sample.
pub fn make_datasets(spec: &FixtureSpec) -> (Dataset, Dataset) {
    let templates = class_templates(spec);
    let train = synth_split(spec, &templates, spec.train_samples, TRAIN_STREAM);
    let val = synth_split(spec, &templates, spec.val_samples, VAL_STREAM);
    (train, val)
}

/// Trains the mini-net on `train` and checks it reaches the target top-1 on
/// `val`. Returns the trained network and its validation top-1.
pub fn make_model(spec: &FixtureSpec, train: &Dataset, val: &Dataset) -> Result<(NetworkIR, f64)> {
    let mut net = TrainNet::init(mini_net_specs(spec.classes), spec.seed);
    net.fit(spec, train)?;
    let trained = net.into_network()?;
    let report = evaluate(&trained, val, 60)?;
    if report.top1 < spec.target_top1 {
        return Err(Error::FixtureAccuracy { achieved: report.top1, target: spec.target_top1 });
    }
    Ok((trained, report.top1))
}

// ---------------------------------------------------------------------------
// Minimal trainer. Train-only code: the inference engine stays forward-only.
// ---------------------------------------------------------------------------

struct TrainLayer {
    spec: LayerSpec,
    w: Vec<f32>,
    b: Vec<f32>,
    gw: Vec<f32>,
    gb: Vec<f32>,
}

struct TrainNet {
    layers: Vec<TrainLayer>,
}

/// Per-layer forward cache for one sample.
struct Tape {
    /// Input seen by each layer (post-activation of the previous one, after
    /// pooling for the FC stage).
    inputs: Vec<Vec<f32>>,
    /// Pre-activation outputs.
    zs: Vec<Vec<f32>>,
    /// Spatial extent feeding the first FC layer (for pool backprop).
    pool_dims: Option<(usize, usize)>,
}

impl TrainNet {
    fn init(specs: Vec<LayerSpec>, seed: u64) -> Self {
        let mut rng = substream(seed, INIT_STREAM);
        let layers = specs
            .into_iter()
            .map(|spec| {
                let fan_in = spec.weights_per_channel() as f32;
                let std = (2.0 / fan_in).sqrt();
                let wpc = spec.weights_per_channel();
                // Conv channels start on a geometric scale ramp (1 down to
                // 0.01). Under short training with weight decay the small-init
                // channels stay near-dead, giving the net the low-importance
                // tail that overparameterized models have: prunable channels
                // and low bitwidth floors. Classifier rows are exempt; every
                // class output must stay live.
                let ramp = |c: usize| -> f32 {
                    if spec.kind == LayerKind::FullyConnected || spec.out_channels < 2 {
                        1.0
                    } else {
                        let t = c as f32 / (spec.out_channels - 1) as f32;
                        10f32.powf(-2.0 * t)
                    }
                };
                let w: Vec<f32> = (0..spec.weight_count())
                    .map(|i| {
                        let z: f32 = StandardNormal.sample(&mut rng);
                        ramp(i / wpc) * std * z
                    })
                    .collect();
                let b = vec![0.0; spec.out_channels];
                let gw = vec![0.0; w.len()];
                let gb = vec![0.0; b.len()];
                TrainLayer { spec, w, b, gw, gb }
            })
            .collect();
        Self { layers }
    }

    fn zero_grads(&mut self) {
        for l in &mut self.layers {
            l.gw.iter_mut().for_each(|g| *g = 0.0);
            l.gb.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    fn forward(&self, input: &[f32]) -> (Tape, Vec<f32>) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut zs = Vec::with_capacity(self.layers.len());
        let mut pool_dims = None;
        let first = &self.layers[0].spec;
        let mut x = input.to_vec();
        let (mut h, mut w) = (first.input_height, first.input_width);
        let last = self.layers.len() - 1;

        for (l, layer) in self.layers.iter().enumerate() {
            let spec = &layer.spec;
            let z = match spec.kind {
                LayerKind::Conv | LayerKind::DepthwiseConv => {
                    let (ow, oh) = spec.output_dims().expect("valid conv spec");
                    let z = conv_like_forward(layer, &x, h, w, oh, ow);
                    (h, w) = (oh, ow);
                    z
                }
                LayerKind::FullyConnected => {
                    if h * w > 1 {
                        pool_dims = Some((h, w));
                        let area = (h * w) as f32;
                        x = (0..spec.in_channels)
                            .map(|c| x[c * h * w..(c + 1) * h * w].iter().sum::<f32>() / area)
                            .collect();
                        (h, w) = (1, 1);
                    }
                    let mut z = layer.b.clone();
                    for (o, zo) in z.iter_mut().enumerate() {
                        let row = &layer.w[o * spec.in_channels..(o + 1) * spec.in_channels];
                        for (i, &v) in x.iter().enumerate() {
                            *zo += row[i] * v;
                        }
                    }
                    z
                }
            };
            inputs.push(std::mem::take(&mut x));
            x = if l == last { z.clone() } else { z.iter().map(|&v| v.max(0.0)).collect() };
            zs.push(z);
        }
        (Tape { inputs, zs, pool_dims }, x)
    }

    /// Accumulates gradients of the softmax cross-entropy loss for one
    /// sample; returns the loss.
    fn backward(&mut self, tape: &Tape, logits: &[f32], label: usize) -> f32 {
        let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let exp: Vec<f32> = logits.iter().map(|&v| (v - max).exp()).collect();
        let sum: f32 = exp.iter().sum();
        let loss = -(exp[label] / sum).ln();
        // dLoss/dLogits.
        let mut grad: Vec<f32> = exp.iter().map(|&e| e / sum).collect();
        grad[label] -= 1.0;

        let last = self.layers.len() - 1;
        for l in (0..self.layers.len()).rev() {
            // ReLU mask everywhere except the logits layer.
            if l != last {
                for (g, &z) in grad.iter_mut().zip(&tape.zs[l]) {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            let layer = &mut self.layers[l];
            let spec = layer.spec.clone();
            let x = &tape.inputs[l];
            grad = match spec.kind {
                LayerKind::FullyConnected => {
                    let mut dx = vec![0.0f32; spec.in_channels];
                    for o in 0..spec.out_channels {
                        let g = grad[o];
                        layer.gb[o] += g;
                        let row = o * spec.in_channels;
                        for i in 0..spec.in_channels {
                            layer.gw[row + i] += g * x[i];
                            dx[i] += layer.w[row + i] * g;
                        }
                    }
                    // Undo the average pool if one fed this layer.
                    if l > 0 {
                        if let Some((ph, pw)) = tape.pool_dims {
                            let area = (ph * pw) as f32;
                            let mut spread = vec![0.0f32; spec.in_channels * ph * pw];
                            for c in 0..spec.in_channels {
                                let g = dx[c] / area;
                                spread[c * ph * pw..(c + 1) * ph * pw]
                                    .iter_mut()
                                    .for_each(|v| *v = g);
                            }
                            spread
                        } else {
                            dx
                        }
                    } else {
                        dx
                    }
                }
                LayerKind::Conv | LayerKind::DepthwiseConv => {
                    conv_like_backward(layer, x, &grad)
                }
            };
        }
        loss
    }

    fn sgd_step(&mut self, lr: f32, weight_decay: f32, batch: usize) {
        let inv = 1.0 / batch as f32;
        for layer in &mut self.layers {
            for (w, &g) in layer.w.iter_mut().zip(&layer.gw) {
                *w -= lr * (g * inv + weight_decay * *w);
            }
            for (b, &g) in layer.b.iter_mut().zip(&layer.gb) {
                *b -= lr * g * inv;
            }
        }
    }

    fn fit(&mut self, spec: &FixtureSpec, train: &Dataset) -> Result<()> {
        let mut rng = substream(spec.seed, SHUFFLE_STREAM);
        let mut order: Vec<usize> = (0..train.len()).collect();
        for _epoch in 0..spec.epochs {
            // Fisher-Yates with the seeded stream.
            for i in (1..order.len()).rev() {
                let j = rng.random_range(0..=i);
                order.swap(i, j);
            }
            for chunk in order.chunks(spec.batch) {
                self.zero_grads();
                for &idx in chunk {
                    let (tape, logits) = self.forward(&train.inputs[idx]);
                    self.backward(&tape, &logits, train.labels[idx] as usize);
                }
                self.sgd_step(spec.learning_rate, spec.weight_decay, chunk.len());
            }
        }
        Ok(())
    }

    fn into_network(self) -> Result<NetworkIR> {
        let layers = self
            .layers
            .into_iter()
            .map(|l| Layer::new(l.spec, l.w, l.b))
            .collect::<Result<Vec<_>>>()?;
        NetworkIR::new(layers, Task::Classification)
    }
}

fn conv_like_forward(
    layer: &TrainLayer,
    input: &[f32],
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<f32> {
    let spec = &layer.spec;
    let k = spec.kernel_size;
    let s = spec.stride;
    let depthwise = spec.kind == LayerKind::DepthwiseConv;
    let mut out = vec![0.0f32; spec.out_channels * oh * ow];
    for o in 0..spec.out_channels {
        let wpc = spec.weights_per_channel();
        let kernel = &layer.w[o * wpc..(o + 1) * wpc];
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = layer.b[o];
                if depthwise {
                    let base = o * h * w;
                    for ky in 0..k {
                        let row = base + (y * s + ky) * w + x * s;
                        for kx in 0..k {
                            acc += kernel[ky * k + kx] * input[row + kx];
                        }
                    }
                } else {
                    for i in 0..spec.in_channels {
                        let base = i * h * w;
                        let kbase = i * k * k;
                        for ky in 0..k {
                            let row = base + (y * s + ky) * w + x * s;
                            for kx in 0..k {
                                acc += kernel[kbase + ky * k + kx] * input[row + kx];
                            }
                        }
                    }
                }
                out[o * oh * ow + y * ow + x] = acc;
            }
        }
    }
    out
}

/// Accumulates kernel/bias gradients and returns the input gradient.
fn conv_like_backward(layer: &mut TrainLayer, input: &[f32], dz: &[f32]) -> Vec<f32> {
    let spec = layer.spec.clone();
    let k = spec.kernel_size;
    let s = spec.stride;
    let (h, w) = (spec.input_height, spec.input_width);
    let (ow, oh) = spec.output_dims().expect("valid conv spec");
    let depthwise = spec.kind == LayerKind::DepthwiseConv;
    let wpc = spec.weights_per_channel();
    let mut dx = vec![0.0f32; spec.in_channels * h * w];
    for o in 0..spec.out_channels {
        let kernel = &layer.w[o * wpc..(o + 1) * wpc];
        let gkernel = &mut layer.gw[o * wpc..(o + 1) * wpc];
        for y in 0..oh {
            for x in 0..ow {
                let g = dz[o * oh * ow + y * ow + x];
                if g == 0.0 {
                    continue;
                }
                layer.gb[o] += g;
                if depthwise {
                    let base = o * h * w;
                    for ky in 0..k {
                        let row = base + (y * s + ky) * w + x * s;
                        for kx in 0..k {
                            gkernel[ky * k + kx] += g * input[row + kx];
                            dx[row + kx] += kernel[ky * k + kx] * g;
                        }
                    }
                } else {
                    for i in 0..spec.in_channels {
                        let base = i * h * w;
                        let kbase = i * k * k;
                        for ky in 0..k {
                            let row = base + (y * s + ky) * w + x * s;
                            for kx in 0..k {
                                gkernel[kbase + ky * k + kx] += g * input[row + kx];
                                dx[row + kx] += kernel[kbase + ky * k + kx] * g;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}
