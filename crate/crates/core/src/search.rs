//! The outer search loop.
//!
//! Each episode walks the network layer by layer: featurize the layer against
//! the plan so far, ask the agent for a sparsity action, keep the top
//! channels by importance at `bit_max` with importance-proportional floors,
//! and after the last layer enforce the size budget. The compressed candidate
//! is scored by the probe, the reward computed, and the terminal transition
//! carries it (intermediate rewards are zero — the reward needs the fully
//! compressed model). The best-reward episode wins the search.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::agent::{AgentConfig, DdpgAgent, Transition, STATE_DIM};
use crate::controller::{
    a_min_for, channels_to_keep, decide_layer, featurize, greedy_budget_enforce,
    layerwise_budget_enforce, EnforceOutcome, LayerRule, StateNormalizer,
};
use crate::error::{Error, Result};
use crate::eval::{Measurement, MetricKind, MetricProbe};
use crate::importance::ImportanceTable;
use crate::ir::{assess, layer_size_bits, total_cost, CostLedger, NetworkIR, Task};
use crate::quant::{apply_plan, QuantMode, QuantPlan};

/// RNG stream for agent init and exploration; everything flows from one seed.
const AGENT_STREAM: u64 = 1;

/// Reward formula choice. The size-gated formula is the native one; the two
/// alternatives exist for reward-shape comparison studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardKind {
    /// -10 over budget, else 0.1 x accuracy delta (detection: plain delta).
    Ajpq,
    /// 0.01 x compressed accuracy, no size gate.
    Amc,
    /// 0.1 x accuracy delta, no size gate.
    Haq,
}

impl RewardKind {
    pub fn name(self) -> &'static str {
        match self {
            RewardKind::Ajpq => "ajpq",
            RewardKind::Amc => "amc",
            RewardKind::Haq => "haq",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "ajpq" => Ok(RewardKind::Ajpq),
            "amc" => Ok(RewardKind::Amc),
            "haq" => Ok(RewardKind::Haq),
            other => Err(Error::Format(format!("unknown reward kind '{other}'"))),
        }
    }
}

/// Episode reward. For the size-gated formula the first case is exact:
/// any plan over `sc * size_base` scores -10.0 regardless of accuracy.
pub fn reward(
    kind: RewardKind,
    task: Task,
    metric_new: f64,
    metric_base: f64,
    size_new_bits: u64,
    size_base_bits: u64,
    sc: f64,
) -> f64 {
    match kind {
        RewardKind::Ajpq => {
            if size_new_bits as f64 > sc * size_base_bits as f64 {
                -10.0
            } else {
                match task {
                    Task::Classification => 0.1 * (metric_new - metric_base),
                    Task::Detection => metric_new - metric_base,
                }
            }
        }
        RewardKind::Amc => 0.01 * metric_new,
        RewardKind::Haq => 0.1 * (metric_new - metric_base),
    }
}

/// Size and computation ratios of a costed plan.
pub fn ratios(ledger: &CostLedger) -> (f64, f64) {
    (ledger.r_comp(), ledger.r_flops())
}

/// Everything a search run needs to know.
#[derive(Debug, Clone)]
pub struct SearchConfig {
    /// Target compression ratio in (0, 1]: budget = sc x baseline size.
    pub sc: f64,
    pub bit_max: u8,
    pub episodes: usize,
    pub mode: QuantMode,
    pub rule: LayerRule,
    pub seed: u64,
    pub reward: RewardKind,
    pub metric: MetricKind,
    pub a_min_conv: f64,
    pub a_min_fc: f64,
    pub a_max: f64,
    pub agent: AgentConfig,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            sc: 0.25,
            bit_max: 8,
            episodes: 100,
            mode: QuantMode::ChannelWise,
            rule: LayerRule::LargeLayerFirst,
            seed: 0,
            reward: RewardKind::Ajpq,
            metric: MetricKind::Top1,
            a_min_conv: 0.6,
            a_min_fc: 0.7,
            a_max: 1.0,
            agent: AgentConfig::default(),
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sc > 0.0 && self.sc <= 1.0) {
            return Err(Error::InvalidArg(format!("sc {} outside (0, 1]", self.sc)));
        }
        if self.episodes == 0 {
            return Err(Error::InvalidArg("episodes must be >= 1".into()));
        }
        if self.bit_max == 0 || self.bit_max > 8 {
            return Err(Error::InvalidArg(format!(
                "bit_max {} outside [1, 8]",
                self.bit_max
            )));
        }
        for (name, v) in [
            ("a_min_conv", self.a_min_conv),
            ("a_min_fc", self.a_min_fc),
            ("a_max", self.a_max),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::InvalidArg(format!("{name} {v} outside (0, 1]")));
            }
        }
        if self.a_min_conv > self.a_max || self.a_min_fc > self.a_max {
            return Err(Error::InvalidArg("sparsity floor exceeds a_max".into()));
        }
        Ok(())
    }
}

/// One episode's outcome: the complete plan and how it scored.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub plan: QuantPlan,
    pub reward: f64,
    pub r_comp: f64,
    pub r_flops: f64,
    pub top1: f64,
    pub top5: f64,
    /// The scalar that fed the reward.
    pub metric: f64,
    pub size_bits: u64,
    pub feasible: bool,
}

impl EpisodeRecord {
    pub fn ratios(&self) -> (f64, f64) {
        (self.r_comp, self.r_flops)
    }
}

/// Search results: best episode (ties resolve to the earliest) plus the full
/// trace and the float baseline.
#[derive(Debug, Clone)]
pub struct SearchOutput {
    pub best: EpisodeRecord,
    pub trace: Vec<EpisodeRecord>,
    pub base: Measurement,
    pub base_size_bits: u64,
    pub base_flops: u64,
}

/// Incremental search driver; episodes can run one at a time.
pub struct Search<'a, P: MetricProbe + ?Sized> {
    net: &'a NetworkIR,
    cfg: SearchConfig,
    probe: &'a P,
    agent: DdpgAgent,
    normalizer: StateNormalizer,
    table: ImportanceTable,
    base: Measurement,
    baseline: CostLedger,
    episode: usize,
}

impl<'a, P: MetricProbe + ?Sized> Search<'a, P> {
    pub fn new(net: &'a NetworkIR, cfg: SearchConfig, probe: &'a P) -> Result<Self> {
        cfg.validate()?;
        let baseline = assess(net, &vec![None; net.len()])?;
        let base = probe.measure(net)?;
        let table = ImportanceTable::build(net);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(AGENT_STREAM);
        let agent = DdpgAgent::new(cfg.agent.clone(), rng);
        Ok(Self {
            net,
            cfg,
            probe,
            agent,
            normalizer: StateNormalizer::new(),
            table,
            base,
            baseline,
            episode: 0,
        })
    }

    pub fn base(&self) -> &Measurement {
        &self.base
    }

    pub fn baseline(&self) -> &CostLedger {
        &self.baseline
    }

    pub fn agent(&self) -> &DdpgAgent {
        &self.agent
    }

    /// Runs one episode: decide every layer, enforce the budget, score the
    /// compressed candidate, store transitions.
    pub fn run_episode(&mut self) -> Result<EpisodeRecord> {
        let n = self.net.len();
        let mut rows: Vec<Option<Vec<u8>>> = vec![None; n];
        let mut decisions = Vec::with_capacity(n);
        let mut states: Vec<[f64; STATE_DIM]> = Vec::with_capacity(n);
        let mut actions = Vec::with_capacity(n);
        let mut a_prev = 0.0;

        for l in 0..n {
            let row_refs: Vec<Option<&[u8]>> = rows.iter().map(|r| r.as_deref()).collect();
            let ledger = assess(self.net, &row_refs)?;
            let raw = featurize(self.net, &ledger, l, a_prev);
            let state = self.normalizer.observe(&raw);
            let spec = &self.net.layer(l).spec;
            let a_min = a_min_for(spec.kind, self.cfg.a_min_conv, self.cfg.a_min_fc);
            let action = self.agent.act(&state.normalized, a_min, self.cfg.a_max, true)?;
            let c_nz = channels_to_keep(spec.out_channels, action)?;
            let decision = decide_layer(self.table.scores(l), c_nz, self.cfg.bit_max)?;
            rows[l] = Some(decision.bits.clone());
            decisions.push(decision);
            states.push(state.normalized);
            actions.push(action);
            a_prev = action;
        }

        let budget = self.cfg.sc * self.baseline.base_size_bits as f64;
        let outcome = match self.cfg.mode {
            QuantMode::ChannelWise => greedy_budget_enforce(
                self.net,
                &self.table,
                &mut decisions,
                budget,
                self.cfg.rule,
            )?,
            QuantMode::LayerWise => {
                layerwise_budget_enforce(self.net, &mut decisions, budget, self.cfg.rule)?
            }
            QuantMode::Fixed => {
                // Bits stay at bit_max; only pruning varies.
                let sizes: Vec<u64> = self
                    .net
                    .layers()
                    .iter()
                    .zip(&decisions)
                    .map(|(layer, d)| layer_size_bits(&layer.spec, &d.bits))
                    .collect::<Result<_>>()?;
                let total: u64 = sizes.iter().sum();
                EnforceOutcome {
                    feasible: total as f64 <= budget,
                    iterations: 0,
                    final_size_bits: total,
                }
            }
        };

        let plan = QuantPlan {
            rows: decisions.iter().map(|d| d.bits.clone()).collect(),
            bit_max: self.cfg.bit_max,
            mode: self.cfg.mode,
        };
        let ledger = total_cost(self.net, &plan.rows)?;
        debug_assert_eq!(ledger.rest_size_bits, outcome.final_size_bits);
        let compressed = apply_plan(self.net, &plan)?;
        let measured = self.probe.measure(&compressed)?;
        let r = reward(
            self.cfg.reward,
            self.net.task(),
            measured.metric,
            self.base.metric,
            ledger.rest_size_bits,
            self.baseline.base_size_bits,
            self.cfg.sc,
        );

        for l in 0..n {
            let (next_state, step_reward, done) = if l + 1 < n {
                (states[l + 1], 0.0, false)
            } else {
                ([0.0; STATE_DIM], r, true)
            };
            self.agent.remember(Transition {
                state: states[l],
                action: actions[l],
                reward: step_reward,
                next_state,
                done,
            });
        }

        let (r_comp, r_flops) = ratios(&ledger);
        let record = EpisodeRecord {
            episode: self.episode,
            plan,
            reward: r,
            r_comp,
            r_flops,
            top1: measured.top1,
            top5: measured.top5,
            metric: measured.metric,
            size_bits: ledger.rest_size_bits,
            feasible: outcome.feasible,
        };
        self.episode += 1;
        Ok(record)
    }

    /// Runs the configured number of episodes with one agent update after
    /// each (once the replay holds a full batch).
    pub fn run(&mut self) -> Result<SearchOutput> {
        let mut trace = Vec::with_capacity(self.cfg.episodes);
        for _ in 0..self.cfg.episodes {
            let record = self.run_episode()?;
            let batch = self.cfg.agent.batch_size;
            if self.agent.replay().len() >= batch {
                self.agent.update(batch)?;
            }
            trace.push(record);
        }
        let mut best = 0usize;
        for (i, r) in trace.iter().enumerate() {
            if r.reward > trace[best].reward {
                best = i;
            }
        }
        Ok(SearchOutput {
            best: trace[best].clone(),
            trace,
            base: self.base,
            base_size_bits: self.baseline.base_size_bits,
            base_flops: self.baseline.base_flops,
        })
    }
}

/// Convenience wrapper: build and run a full search.
pub fn run_search<P: MetricProbe + ?Sized>(
    net: &NetworkIR,
    cfg: SearchConfig,
    probe: &P,
) -> Result<SearchOutput> {
    Search::new(net, cfg, probe)?.run()
}

const TRACE_MAGIC: &str = "# AJPQ-TRACE v1";

/// Run-level facts recorded in the trace header.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceMeta {
    pub sc: f64,
    pub base_size_bits: u64,
    pub base_flops: u64,
    pub base_top1: f64,
    pub base_top5: f64,
    pub base_metric: f64,
    pub mode: String,
    pub rule: String,
    pub seed: u64,
    pub bit_max: u8,
    pub reward: String,
    pub episodes: usize,
}

/// One parsed trace line. Numeric fields keep their verbatim text so report
/// generation can copy them unmodified.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub episode: usize,
    pub reward: f64,
    pub reward_text: String,
    pub r_comp: f64,
    pub r_flops: f64,
    pub top1: f64,
    pub top5: f64,
    pub metric: f64,
    pub size_bits: u64,
    pub feasible: bool,
    pub plan_digest: String,
}

/// Writes one tab-separated record per episode plus a header carrying the
/// run's baseline, so the size gate can be audited post hoc.
pub fn write_trace(output: &SearchOutput, cfg: &SearchConfig, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{TRACE_MAGIC}")?;
    writeln!(
        out,
        "# sc {} base_size_bits {} base_flops {} base_top1 {} base_top5 {} base_metric {} mode {} rule {} seed {} bit_max {} reward {} episodes {}",
        cfg.sc,
        output.base_size_bits,
        output.base_flops,
        output.base.top1,
        output.base.top5,
        output.base.metric,
        cfg.mode.name(),
        cfg.rule.name(),
        cfg.seed,
        cfg.bit_max,
        cfg.reward.name(),
        cfg.episodes
    )?;
    writeln!(
        out,
        "# episode\treward\tr_comp\tr_flops\ttop1\ttop5\tmetric\tsize_bits\tfeasible\tplan_digest"
    )?;
    for r in &output.trace {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.episode,
            r.reward,
            r.r_comp,
            r.r_flops,
            r.top1,
            r.top5,
            r.metric,
            r.size_bits,
            u8::from(r.feasible),
            r.plan.digest()
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a trace file back.
pub fn read_trace(path: &Path) -> Result<(TraceMeta, Vec<TraceRow>)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(TRACE_MAGIC) {
        return Err(Error::Format("bad magic, want 'AJPQ-TRACE v1'".into()));
    }
    let meta_line = lines
        .next()
        .ok_or_else(|| Error::Format("missing run header".into()))?;
    let tokens: Vec<&str> = meta_line
        .strip_prefix("# ")
        .ok_or_else(|| Error::Format("run header must start with '# '".into()))?
        .split_whitespace()
        .collect();
    let lookup = |key: &str| -> Result<&str> {
        tokens
            .windows(2)
            .find(|w| w[0] == key)
            .map(|w| w[1])
            .ok_or_else(|| Error::Format(format!("run header missing '{key}'")))
    };
    fn parsed<T: std::str::FromStr>(v: &str, key: &str) -> Result<T> {
        v.parse()
            .map_err(|_| Error::Format(format!("bad '{key}' value '{v}'")))
    }
    let meta = TraceMeta {
        sc: parsed(lookup("sc")?, "sc")?,
        base_size_bits: parsed(lookup("base_size_bits")?, "base_size_bits")?,
        base_flops: parsed(lookup("base_flops")?, "base_flops")?,
        base_top1: parsed(lookup("base_top1")?, "base_top1")?,
        base_top5: parsed(lookup("base_top5")?, "base_top5")?,
        base_metric: parsed(lookup("base_metric")?, "base_metric")?,
        mode: lookup("mode")?.to_string(),
        rule: lookup("rule")?.to_string(),
        seed: parsed(lookup("seed")?, "seed")?,
        bit_max: parsed(lookup("bit_max")?, "bit_max")?,
        reward: lookup("reward")?.to_string(),
        episodes: parsed(lookup("episodes")?, "episodes")?,
    };
    let columns = lines
        .next()
        .ok_or_else(|| Error::Format("missing column header".into()))?;
    if !columns.starts_with("# episode") {
        return Err(Error::Format("unexpected column header".into()));
    }
    let mut rows = Vec::new();
    for line in lines {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 10 {
            return Err(Error::Format(format!(
                "trace row has {} fields, want 10: '{line}'",
                f.len()
            )));
        }
        rows.push(TraceRow {
            episode: parsed(f[0], "episode")?,
            reward: parsed(f[1], "reward")?,
            reward_text: f[1].to_string(),
            r_comp: parsed(f[2], "r_comp")?,
            r_flops: parsed(f[3], "r_flops")?,
            top1: parsed(f[4], "top1")?,
            top5: parsed(f[5], "top5")?,
            metric: parsed(f[6], "metric")?,
            size_bits: parsed(f[7], "size_bits")?,
            feasible: f[8] == "1",
            plan_digest: f[9].to_string(),
        });
    }
    Ok((meta, rows))
}
