//! Small dense networks with explicit backprop.
//!
//! The controller's actor and critic are tiny (13 or 14 inputs, two hidden
//! layers), so a direct f64 implementation beats pulling in a tensor
//! framework: gradients stay checkable against finite differences and every
//! operation is deterministic.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Linear,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
            Activation::Linear => z,
        }
    }

    /// Derivative given pre-activation `z` and activation `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Linear => 1.0,
        }
    }
}

/// One dense layer, weights row-major `(out, in)`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
    pub act: Activation,
}

/// Multilayer perceptron.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Forward cache: per-layer inputs and pre-activations.
pub struct Trace {
    inputs: Vec<Vec<f64>>,
    zs: Vec<Vec<f64>>,
    activations: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("trace has layers")
    }
}

/// Parameter gradients shaped like an [`Mlp`].
#[derive(Debug, Clone)]
pub struct Grads {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Grads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Self {
            layers: mlp
                .layers
                .iter()
                .map(|l| (vec![0.0; l.w.len()], vec![0.0; l.b.len()]))
                .collect(),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (dw, db) in &mut self.layers {
            dw.iter_mut().for_each(|g| *g *= factor);
            db.iter_mut().for_each(|g| *g *= factor);
        }
    }

    fn flat(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|(dw, db)| dw.iter().chain(db.iter()).copied())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.flat().collect()
    }
}

impl Mlp {
    /// Builds with the usual fan-in uniform init; the output layer starts
    /// near zero so early policies and values are small.
    pub fn new(dims: &[usize], acts: &[Activation], rng: &mut ChaCha8Rng) -> Self {
        assert_eq!(dims.len(), acts.len() + 1, "one activation per layer");
        let last = acts.len() - 1;
        let layers = acts
            .iter()
            .enumerate()
            .map(|(i, &act)| {
                let (in_dim, out_dim) = (dims[i], dims[i + 1]);
                let bound = if i == last { 3e-3 } else { 1.0 / (in_dim as f64).sqrt() };
                let w = (0..in_dim * out_dim)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                let b = vec![0.0; out_dim];
                Dense { w, b, in_dim, out_dim, act }
            })
            .collect();
        Self { layers }
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        let mut x = input.to_vec();
        for layer in &self.layers {
            x = layer_forward(layer, &x).1;
        }
        x
    }

    pub fn forward_trace(&self, input: &[f64]) -> Trace {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut zs = Vec::with_capacity(self.layers.len());
        let mut activations = Vec::with_capacity(self.layers.len());
        let mut x = input.to_vec();
        for layer in &self.layers {
            let (z, a) = layer_forward(layer, &x);
            inputs.push(std::mem::replace(&mut x, a.clone()));
            zs.push(z);
            activations.push(a);
        }
        Trace { inputs, zs, activations }
    }

    /// Backpropagates `out_grad` (dLoss/dOutput), accumulating parameter
    /// gradients into `grads` and returning dLoss/dInput.
    pub fn backward_into(&self, trace: &Trace, out_grad: &[f64], grads: &mut Grads) -> Vec<f64> {
        let mut g = out_grad.to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let z = &trace.zs[l];
            let a = &trace.activations[l];
            let x = &trace.inputs[l];
            let (dw, db) = &mut grads.layers[l];
            let mut g_prev = vec![0.0; layer.in_dim];
            for o in 0..layer.out_dim {
                let dz = g[o] * layer.act.derivative(z[o], a[o]);
                db[o] += dz;
                let row = o * layer.in_dim;
                for i in 0..layer.in_dim {
                    dw[row + i] += dz * x[i];
                    g_prev[i] += layer.w[row + i] * dz;
                }
            }
            g = g_prev;
        }
        g
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn param(&self, idx: usize) -> f64 {
        let mut i = idx;
        for l in &self.layers {
            if i < l.w.len() {
                return l.w[i];
            }
            i -= l.w.len();
            if i < l.b.len() {
                return l.b[i];
            }
            i -= l.b.len();
        }
        panic!("param index {idx} out of range");
    }

    pub fn nudge_param(&mut self, idx: usize, delta: f64) {
        let mut i = idx;
        for l in &mut self.layers {
            if i < l.w.len() {
                l.w[i] += delta;
                return;
            }
            i -= l.w.len();
            if i < l.b.len() {
                l.b[i] += delta;
                return;
            }
            i -= l.b.len();
        }
        panic!("param index {idx} out of range");
    }

    pub fn params_flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.w.iter().chain(l.b.iter()).copied())
            .collect()
    }

    pub fn load_flat(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.param_count(), "parameter blob size");
        let mut it = params.iter();
        for l in &mut self.layers {
            for w in l.w.iter_mut().chain(l.b.iter_mut()) {
                *w = *it.next().expect("length checked");
            }
        }
    }
}

fn layer_forward(layer: &Dense, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    debug_assert_eq!(x.len(), layer.in_dim);
    let mut z = vec![0.0; layer.out_dim];
    for o in 0..layer.out_dim {
        let row = o * layer.in_dim;
        let mut acc = layer.b[o];
        for i in 0..layer.in_dim {
            acc += layer.w[row + i] * x[i];
        }
        z[o] = acc;
    }
    let a = z.iter().map(|&v| layer.act.apply(v)).collect();
    (z, a)
}

/// `target <- tau * online + (1 - tau) * target`, element-wise.
pub fn soft_update(target: &mut Mlp, online: &Mlp, tau: f64) {
    for (t, o) in target.layers.iter_mut().zip(&online.layers) {
        for (tw, ow) in t.w.iter_mut().zip(&o.w) {
            *tw = tau * ow + (1.0 - tau) * *tw;
        }
        for (tb, ob) in t.b.iter_mut().zip(&o.b) {
            *tb = tau * ob + (1.0 - tau) * *tb;
        }
    }
}

/// Adam over an [`Mlp`]'s parameters in canonical order.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, param_count: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
        }
    }

    pub fn apply(&mut self, mlp: &mut Mlp, grads: &Grads) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let mut idx = 0usize;
        for (layer, (dw, db)) in mlp.layers.iter_mut().zip(&grads.layers) {
            for (p, &g) in layer.w.iter_mut().chain(layer.b.iter_mut()).zip(dw.iter().chain(db.iter())) {
                self.m[idx] = self.beta1 * self.m[idx] + (1.0 - self.beta1) * g;
                self.v[idx] = self.beta2 * self.v[idx] + (1.0 - self.beta2) * g * g;
                let mh = self.m[idx] / bc1;
                let vh = self.v[idx] / bc2;
                *p -= self.lr * mh / (vh.sqrt() + self.eps);
                idx += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small_mlp(seed: u64) -> Mlp {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mlp::new(
            &[3, 5, 1],
            &[Activation::Relu, Activation::Sigmoid],
            &mut rng,
        )
    }

    #[test]
    fn sigmoid_output_in_unit_interval() {
        let mlp = small_mlp(1);
        for s in [-3.0, 0.0, 7.5] {
            let y = mlp.forward(&[s, s * 0.5, -s])[0];
            assert!(y > 0.0 && y < 1.0);
        }
    }

    /// Backprop against central differences on a scalar squared loss.
    #[test]
    fn gradients_match_finite_differences() {
        let mut mlp = small_mlp(2);
        let x = [0.3, -0.7, 1.1];
        let target = 0.25;
        let loss = |m: &Mlp| {
            let y = m.forward(&x)[0];
            (y - target) * (y - target)
        };

        let trace = mlp.forward_trace(&x);
        let y = trace.output()[0];
        let mut grads = Grads::zeros_like(&mlp);
        mlp.backward_into(&trace, &[2.0 * (y - target)], &mut grads);
        let analytic = grads.to_vec();

        let h = 1e-6;
        for idx in 0..mlp.param_count() {
            mlp.nudge_param(idx, h);
            let up = loss(&mlp);
            mlp.nudge_param(idx, -2.0 * h);
            let down = loss(&mlp);
            mlp.nudge_param(idx, h);
            let fd = (up - down) / (2.0 * h);
            assert!(
                (analytic[idx] - fd).abs() <= 1e-6 * (1.0 + fd.abs()),
                "param {idx}: analytic {} vs fd {fd}",
                analytic[idx]
            );
        }
    }

    #[test]
    fn soft_update_is_convex_combination() {
        let online = small_mlp(3);
        let mut target = small_mlp(4);
        let old = target.params_flat();
        soft_update(&mut target, &online, 0.01);
        for ((t, o), prev) in target
            .params_flat()
            .iter()
            .zip(online.params_flat())
            .zip(old)
        {
            assert!((t - (0.01 * o + 0.99 * prev)).abs() < 1e-12);
        }
    }

    #[test]
    fn flat_round_trip() {
        let mlp = small_mlp(5);
        let mut other = small_mlp(6);
        other.load_flat(&mlp.params_flat());
        assert_eq!(other.params_flat(), mlp.params_flat());
    }
}
