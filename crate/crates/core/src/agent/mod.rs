//! DDPG layer controller.
//!
//! Given a normalized 13-feature layer state, the actor emits a continuous
//! sparsity action in (0, 1]; the critic scores (state, action) pairs.
//! Exploration samples a normal around the actor's output truncated to
//! (0, 1], then clamps into the per-layer-kind sparsity bounds. Learning is
//! one batch step per episode: squared temporal-difference error on the
//! critic, value ascent on the actor, soft target tracking, and a
//! multiplicative exploration-noise decay.

mod mlp;
mod replay;

pub use mlp::{soft_update, Activation, Adam, Grads, Mlp};
pub use replay::{ReplayBuffer, Transition};

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Length of the layer-state feature vector.
pub const STATE_DIM: usize = 13;

/// Hyperparameters. Defaults suit desk-scale searches and every one of them
/// is config-overridable.
#[derive(Debug, Clone)]
pub struct AgentConfig {
    pub hidden: (usize, usize),
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub gamma: f64,
    pub tau: f64,
    pub buffer_capacity: usize,
    pub batch_size: usize,
    pub sigma_init: f64,
    pub sigma_decay: f64,
    /// Output-layer bias of the fresh actor. A positive value starts the
    /// policy near "keep everything" so exploration walks down from the
    /// uncompressed end instead of slamming into the sparsity floor.
    pub actor_init_bias: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            hidden: (64, 64),
            actor_lr: 1e-4,
            critic_lr: 1e-3,
            gamma: 0.95,
            tau: 0.01,
            buffer_capacity: 2000,
            batch_size: 64,
            sigma_init: 0.9,
            sigma_decay: 0.99,
            actor_init_bias: 2.0,
        }
    }
}

/// Samples a normal with the given mean and std, truncated to (0, 1].
///
/// Rejection sampling; at `sigma = 0` this degenerates to the mean. The open
/// bound at zero matters: a zero action would prune an entire layer, and the
/// keep-count formula requires at least one surviving channel.
pub fn truncated_normal(mean: f64, sigma: f64, rng: &mut ChaCha8Rng) -> f64 {
    if sigma == 0.0 {
        return mean.clamp(f64::MIN_POSITIVE, 1.0);
    }
    for _ in 0..10_000 {
        let z: f64 = StandardNormal.sample(rng);
        let x = mean + sigma * z;
        if x > 0.0 && x <= 1.0 {
            return x;
        }
    }
    // Statistically unreachable for mean in (0,1); keep a finite fallback.
    mean.clamp(f64::MIN_POSITIVE, 1.0)
}

/// The layer controller: actor/critic, their targets, replay, exploration.
#[derive(Debug, Clone)]
pub struct DdpgAgent {
    actor: Mlp,
    critic: Mlp,
    target_actor: Mlp,
    target_critic: Mlp,
    actor_opt: Adam,
    critic_opt: Adam,
    buffer: ReplayBuffer,
    sigma: f64,
    cfg: AgentConfig,
    rng: ChaCha8Rng,
}

impl DdpgAgent {
    pub fn new(cfg: AgentConfig, mut rng: ChaCha8Rng) -> Self {
        let (h1, h2) = cfg.hidden;
        let mut actor = Mlp::new(
            &[STATE_DIM, h1, h2, 1],
            &[Activation::Relu, Activation::Relu, Activation::Sigmoid],
            &mut rng,
        );
        actor.layers.last_mut().expect("actor has layers").b[0] = cfg.actor_init_bias;
        let critic = Mlp::new(
            &[STATE_DIM + 1, h1, h2, 1],
            &[Activation::Relu, Activation::Relu, Activation::Linear],
            &mut rng,
        );
        let target_actor = actor.clone();
        let target_critic = critic.clone();
        let actor_opt = Adam::new(cfg.actor_lr, actor.param_count());
        let critic_opt = Adam::new(cfg.critic_lr, critic.param_count());
        let buffer = ReplayBuffer::new(cfg.buffer_capacity);
        let sigma = cfg.sigma_init;
        Self {
            actor,
            critic,
            target_actor,
            target_critic,
            actor_opt,
            critic_opt,
            buffer,
            sigma,
            cfg,
            rng,
        }
    }

    /// Deterministic policy output in (0, 1).
    pub fn policy(&self, state: &[f64; STATE_DIM]) -> f64 {
        self.actor.forward(state)[0]
    }

    /// Chooses a sparsity action, clamped to `[a_min, a_max]`.
    pub fn act(
        &mut self,
        state: &[f64; STATE_DIM],
        a_min: f64,
        a_max: f64,
        explore: bool,
    ) -> Result<f64> {
        if state.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("layer state fed to the actor".into()));
        }
        let mean = self.policy(state);
        let raw = if explore {
            truncated_normal(mean, self.sigma, &mut self.rng)
        } else {
            mean
        };
        Ok(raw.clamp(a_min, a_max))
    }

    /// Stores one transition; oldest evicted past capacity.
    pub fn remember(&mut self, t: Transition) {
        self.buffer.push(t);
    }

    pub fn replay(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn config(&self) -> &AgentConfig {
        &self.cfg
    }

    /// One learning step on a sampled batch: critic regression to the TD
    /// target, actor ascent on the critic, soft target updates, noise decay.
    /// Returns (critic loss, actor objective).
    pub fn update(&mut self, batch_size: usize) -> Result<(f64, f64)> {
        if self.buffer.len() < batch_size {
            return Err(Error::InsufficientBuffer { have: self.buffer.len(), need: batch_size });
        }
        let batch = self.buffer.sample(batch_size, &mut self.rng);

        let (critic_loss, critic_grads) = self.critic_grads_on(&batch);
        self.critic_opt.apply(&mut self.critic, &critic_grads);

        let (actor_objective, mut actor_grads) = self.actor_grads_on(&batch);
        // Ascend the objective.
        actor_grads.scale(-1.0);
        self.actor_opt.apply(&mut self.actor, &actor_grads);

        soft_update(&mut self.target_actor, &self.actor, self.cfg.tau);
        soft_update(&mut self.target_critic, &self.critic, self.cfg.tau);
        self.sigma *= self.cfg.sigma_decay;

        Ok((critic_loss, actor_objective))
    }

    /// TD targets from the frozen target networks.
    fn targets(&self, batch: &[Transition]) -> Vec<f64> {
        batch
            .iter()
            .map(|t| {
                let a_next = self.target_actor.forward(&t.next_state)[0];
                let mut input = t.next_state.to_vec();
                input.push(a_next);
                let q_next = self.target_critic.forward(&input)[0];
                t.reward + self.cfg.gamma * (1.0 - f64::from(t.done)) * q_next
            })
            .collect()
    }

    /// Mean squared TD error of the critic on `batch`.
    pub fn critic_loss_on(&self, batch: &[Transition]) -> f64 {
        let ys = self.targets(batch);
        let n = batch.len() as f64;
        batch
            .iter()
            .zip(&ys)
            .map(|(t, y)| {
                let mut input = t.state.to_vec();
                input.push(t.action);
                let q = self.critic.forward(&input)[0];
                (q - y) * (q - y) / n
            })
            .sum()
    }

    /// Critic loss and its gradient.
    pub fn critic_grads_on(&self, batch: &[Transition]) -> (f64, Grads) {
        let ys = self.targets(batch);
        let n = batch.len() as f64;
        let mut grads = Grads::zeros_like(&self.critic);
        let mut loss = 0.0;
        for (t, y) in batch.iter().zip(&ys) {
            let mut input = t.state.to_vec();
            input.push(t.action);
            let trace = self.critic.forward_trace(&input);
            let q = trace.output()[0];
            let err = q - y;
            loss += err * err / n;
            self.critic.backward_into(&trace, &[2.0 * err / n], &mut grads);
        }
        (loss, grads)
    }

    /// Mean critic value of the actor's own actions (the ascent objective).
    pub fn actor_objective_on(&self, batch: &[Transition]) -> f64 {
        let n = batch.len() as f64;
        batch
            .iter()
            .map(|t| {
                let a = self.actor.forward(&t.state)[0];
                let mut input = t.state.to_vec();
                input.push(a);
                self.critic.forward(&input)[0] / n
            })
            .sum()
    }

    /// Actor objective and its gradient (critic held fixed, chain rule
    /// through the action input).
    pub fn actor_grads_on(&self, batch: &[Transition]) -> (f64, Grads) {
        let n = batch.len() as f64;
        let mut grads = Grads::zeros_like(&self.actor);
        let mut discard = Grads::zeros_like(&self.critic);
        let mut objective = 0.0;
        for t in batch {
            let a_trace = self.actor.forward_trace(&t.state);
            let a = a_trace.output()[0];
            let mut input = t.state.to_vec();
            input.push(a);
            let q_trace = self.critic.forward_trace(&input);
            objective += q_trace.output()[0] / n;
            let input_grad = self.critic.backward_into(&q_trace, &[1.0 / n], &mut discard);
            let dq_da = input_grad[STATE_DIM];
            self.actor.backward_into(&a_trace, &[dq_da], &mut grads);
        }
        (objective, grads)
    }

    pub fn actor(&self) -> &Mlp {
        &self.actor
    }

    pub fn critic(&self) -> &Mlp {
        &self.critic
    }

    pub fn actor_mut(&mut self) -> &mut Mlp {
        &mut self.actor
    }

    pub fn critic_mut(&mut self) -> &mut Mlp {
        &mut self.critic
    }

    pub fn target_actor(&self) -> &Mlp {
        &self.target_actor
    }

    pub fn target_critic(&self) -> &Mlp {
        &self.target_critic
    }

    /// Writes a checkpoint: header plus a little-endian f32 parameter blob in
    /// the order actor, critic, target actor, target critic.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "AJPQ-AGENT v1")?;
        writeln!(out, "state_dim {STATE_DIM}")?;
        writeln!(out, "hidden {} {}", self.cfg.hidden.0, self.cfg.hidden.1)?;
        writeln!(out, "sigma {}", self.sigma)?;
        let total = 2 * (self.actor.param_count() + self.critic.param_count());
        writeln!(out, "params {total}")?;
        writeln!(out, "end")?;
        for net in [&self.actor, &self.critic, &self.target_actor, &self.target_critic] {
            for p in net.params_flat() {
                out.write_all(&(p as f32).to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Restores networks and noise from a checkpoint. Replay contents and
    /// optimizer moments are not persisted; learning resumes fresh.
    pub fn load(path: &Path, cfg: AgentConfig, rng: ChaCha8Rng) -> Result<Self> {
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
        if lines.next() != Some("AJPQ-AGENT v1") {
            return Err(Error::Format("bad magic, want 'AJPQ-AGENT v1'".into()));
        }
        let mut field = |key: &str| -> Result<String> {
            let line = lines
                .next()
                .ok_or_else(|| Error::Format(format!("missing '{key}' line")))?;
            line.strip_prefix(key)
                .and_then(|r| r.strip_prefix(' '))
                .map(str::to_owned)
                .ok_or_else(|| Error::Format(format!("expected '{key}', found '{line}'")))
        };
        let state_dim: usize = field("state_dim")?
            .parse()
            .map_err(|_| Error::Format("bad state_dim".into()))?;
        if state_dim != STATE_DIM {
            return Err(Error::Format(format!(
                "checkpoint state_dim {state_dim}, this build uses {STATE_DIM}"
            )));
        }
        let hidden_line = field("hidden")?;
        let dims: Vec<usize> = hidden_line
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::Format("bad hidden dims".into())))
            .collect::<Result<_>>()?;
        if dims.len() != 2 {
            return Err(Error::Format("hidden line wants two dims".into()));
        }
        let sigma: f64 = field("sigma")?
            .parse()
            .map_err(|_| Error::Format("bad sigma".into()))?;
        let total: usize = field("params")?
            .parse()
            .map_err(|_| Error::Format("bad param count".into()))?;
        if blob.len() != total * 4 {
            return Err(Error::Format(format!(
                "parameter blob has {} bytes, header wants {}",
                blob.len(),
                total * 4
            )));
        }

        let mut cfg = cfg;
        cfg.hidden = (dims[0], dims[1]);
        let mut agent = Self::new(cfg, rng);
        let floats: Vec<f64> = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let na = agent.actor.param_count();
        let nc = agent.critic.param_count();
        if floats.len() != 2 * (na + nc) {
            return Err(Error::Format("parameter blob length mismatch".into()));
        }
        let mut cursor = 0;
        for net in [
            &mut agent.actor,
            &mut agent.critic,
            &mut agent.target_actor,
            &mut agent.target_critic,
        ] {
            let n = net.param_count();
            net.load_flat(&floats[cursor..cursor + n]);
            cursor += n;
        }
        agent.sigma = sigma;
        Ok(agent)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn agent(seed: u64) -> DdpgAgent {
        DdpgAgent::new(AgentConfig::default(), ChaCha8Rng::seed_from_u64(seed))
    }

    fn small_agent(seed: u64) -> DdpgAgent {
        let cfg = AgentConfig { hidden: (8, 8), ..AgentConfig::default() };
        DdpgAgent::new(cfg, ChaCha8Rng::seed_from_u64(seed))
    }

    fn transition(seed: u64, done: bool) -> Transition {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = [0.0; STATE_DIM];
        let mut next_state = [0.0; STATE_DIM];
        state.iter_mut().for_each(|v| *v = rng.random_range(0.0..1.0));
        next_state.iter_mut().for_each(|v| *v = rng.random_range(0.0..1.0));
        Transition {
            state,
            action: rng.random_range(0.6..1.0),
            reward: rng.random_range(-1.0..1.0),
            next_state,
            done,
        }
    }

    #[test]
    fn deterministic_action_respects_conv_bounds() {
        let mut a = agent(0);
        for seed in 0..20 {
            let t = transition(seed, false);
            let act = a.act(&t.state, 0.6, 1.0, false).unwrap();
            assert!((0.6..=1.0).contains(&act));
        }
    }

    #[test]
    fn non_finite_state_rejected() {
        let mut a = agent(1);
        let mut s = [0.0; STATE_DIM];
        s[4] = f64::NAN;
        assert!(a.act(&s, 0.6, 1.0, true).is_err());
    }

    #[test]
    fn zero_noise_exploration_is_deterministic_policy() {
        let mut a = agent(2);
        a.sigma = 0.0;
        let t = transition(3, false);
        let explore = a.act(&t.state, 0.0, 1.0, true).unwrap();
        let greedy = a.act(&t.state, 0.0, 1.0, false).unwrap();
        assert_eq!(explore, greedy);
    }

    /// Empirical mean of the truncated sampler against the closed-form
    /// truncated-normal mean, within three standard errors.
    #[test]
    fn truncated_sampler_matches_closed_form_moments() {
        // Abramowitz & Stegun 7.1.26-style erf, good to ~1.5e-7.
        fn erf(x: f64) -> f64 {
            let sign = if x < 0.0 { -1.0 } else { 1.0 };
            let x = x.abs();
            let t = 1.0 / (1.0 + 0.3275911 * x);
            let y = 1.0
                - (((((1.061405429 * t - 1.453152027) * t) + 1.421413741) * t - 0.284496736) * t
                    + 0.254829592)
                    * t
                    * (-x * x).exp();
            sign * y
        }
        let phi = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let cdf = |x: f64| 0.5 * (1.0 + erf(x / 2.0f64.sqrt()));

        let (mean, sigma) = (0.55, 0.9);
        let (alpha, beta) = ((0.0 - mean) / sigma, (1.0 - mean) / sigma);
        let z = cdf(beta) - cdf(alpha);
        let tn_mean = mean + sigma * (phi(alpha) - phi(beta)) / z;
        let tn_var = sigma
            * sigma
            * (1.0 + (alpha * phi(alpha) - beta * phi(beta)) / z
                - ((phi(alpha) - phi(beta)) / z).powi(2));

        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 10_000;
        let sum: f64 = (0..n).map(|_| truncated_normal(mean, sigma, &mut rng)).sum();
        let empirical = sum / n as f64;
        let stderr = (tn_var / n as f64).sqrt();
        assert!(
            (empirical - tn_mean).abs() <= 3.0 * stderr,
            "empirical {empirical} vs closed form {tn_mean} (3se {})",
            3.0 * stderr
        );
    }

    #[test]
    fn update_needs_a_full_batch() {
        let mut a = agent(4);
        a.remember(transition(0, true));
        assert!(matches!(
            a.update(64),
            Err(Error::InsufficientBuffer { have: 1, need: 64 })
        ));
    }

    #[test]
    fn targets_track_online_nets_softly() {
        let mut a = small_agent(5);
        for seed in 0..32 {
            a.remember(transition(seed, seed % 8 == 7));
        }
        let old_target = a.target_actor.params_flat();
        let old_critic_target = a.target_critic.params_flat();
        a.update(16).unwrap();
        let tau = a.cfg.tau;
        for ((t, o), prev) in a
            .target_actor
            .params_flat()
            .iter()
            .zip(a.actor.params_flat())
            .zip(old_target)
        {
            assert!((t - (tau * o + (1.0 - tau) * prev)).abs() < 1e-12);
        }
        for ((t, o), prev) in a
            .target_critic
            .params_flat()
            .iter()
            .zip(a.critic.params_flat())
            .zip(old_critic_target)
        {
            assert!((t - (tau * o + (1.0 - tau) * prev)).abs() < 1e-12);
        }
    }

    /// Critic gradient against central finite differences on a small batch.
    #[test]
    fn critic_gradient_matches_finite_differences() {
        let mut a = small_agent(6);
        let batch: Vec<Transition> = (0..4).map(|s| transition(s, s == 3)).collect();
        let (_, grads) = a.critic_grads_on(&batch);
        let analytic = grads.to_vec();
        let h = 1e-6;
        let mut fd = vec![0.0; analytic.len()];
        for idx in 0..analytic.len() {
            a.critic_mut().nudge_param(idx, h);
            let up = a.critic_loss_on(&batch);
            a.critic_mut().nudge_param(idx, -2.0 * h);
            let down = a.critic_loss_on(&batch);
            a.critic_mut().nudge_param(idx, h);
            fd[idx] = (up - down) / (2.0 * h);
        }
        let diff: f64 = analytic.iter().zip(&fd).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let norm: f64 = fd.iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!(diff <= 1e-4 * norm.max(1e-8), "relative error {}", diff / norm);
    }

    /// With gamma = 0 the critic regresses to immediate rewards: TD error
    /// shrinks over repeated updates on a fixed buffer.
    #[test]
    fn critic_regresses_to_rewards() {
        let cfg = AgentConfig { gamma: 0.0, hidden: (16, 16), ..AgentConfig::default() };
        let mut a = DdpgAgent::new(cfg, ChaCha8Rng::seed_from_u64(7));
        let batch: Vec<Transition> = (0..4).map(|s| transition(100 + s, false)).collect();
        for t in &batch {
            a.remember(t.clone());
        }
        let before = a.critic_loss_on(&batch);
        for _ in 0..200 {
            a.update(4).unwrap();
        }
        let after = a.critic_loss_on(&batch);
        assert!(after < before, "TD error went {before} -> {after}");
    }

    #[test]
    fn parameters_stay_finite_across_updates() {
        let mut a = small_agent(8);
        for seed in 0..64 {
            a.remember(transition(seed, seed % 5 == 4));
        }
        for _ in 0..1000 {
            a.update(16).unwrap();
        }
        assert!(a.actor.params_flat().iter().all(|p| p.is_finite()));
        assert!(a.critic.params_flat().iter().all(|p| p.is_finite()));
    }

    #[test]
    fn checkpoint_round_trip_preserves_networks() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("agent.ckpt");
        let mut a = small_agent(9);
        for seed in 0..32 {
            a.remember(transition(seed, false));
        }
        a.update(8).unwrap();
        a.save(&path).unwrap();
        let b = DdpgAgent::load(&path, a.cfg.clone(), ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(b.sigma(), a.sigma());
        // Parameters persist at f32 precision.
        for (x, y) in a.actor.params_flat().iter().zip(b.actor.params_flat()) {
            assert!((*x as f32 - y as f32).abs() == 0.0);
        }
    }
}
