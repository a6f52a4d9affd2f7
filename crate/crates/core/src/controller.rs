//! Hierarchical joint decision.
//!
//! The layer controller's continuous sparsity action becomes a concrete
//! per-layer decision here: how many channels survive, which ones (by
//! importance), and the importance-proportional bitwidth floor each survivor
//! gets. After every layer is decided, the greedy loop cuts single bits from
//! the least important reducible channel of the rule-selected layer until the
//! size budget holds or nothing is reducible.

use crate::agent::STATE_DIM;
use crate::error::{Error, Result};
use crate::importance::{top_channels, ImportanceTable};
use crate::ir::{layer_size_bits, CostLedger, LayerKind, NetworkIR};

/// The 13 layer-state features, raw and normalized.
///
/// Order: index, type code, out channels, in channels, input width, input
/// height, stride, kernel size, reduced FLOPs, rest FLOPs, reduced size,
/// rest size, previous action.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchState {
    pub raw: [f64; STATE_DIM],
    pub normalized: [f64; STATE_DIM],
}

/// Raw feature vector for layer `l` given the accounting of the plan so far.
///
/// `a_prev` is the previous layer's action, 0 by convention for the first
/// layer. The reduced/rest entries come straight out of the ledger, so
/// undecided layers count at their uncompressed size.
pub fn featurize(net: &NetworkIR, ledger: &CostLedger, l: usize, a_prev: f64) -> [f64; STATE_DIM] {
    let spec = &net.layer(l).spec;
    [
        spec.index as f64,
        spec.kind.type_code() as f64,
        spec.out_channels as f64,
        spec.in_channels as f64,
        spec.input_width as f64,
        spec.input_height as f64,
        spec.stride as f64,
        spec.kernel_size as f64,
        ledger.reduced_flops() as f64,
        ledger.rest_flops as f64,
        ledger.reduced_size_bits() as f64,
        ledger.rest_size_bits as f64,
        a_prev,
    ]
}

/// Running per-feature min-max normalizer.
///
/// Extrema accumulate over everything seen this run; a feature whose range is
/// still degenerate normalizes to 0. Re-normalizing an already-seen vector
/// leaves the extrema unchanged, so it returns the same output.
#[derive(Debug, Clone)]
pub struct StateNormalizer {
    lo: [f64; STATE_DIM],
    hi: [f64; STATE_DIM],
}

impl Default for StateNormalizer {
    fn default() -> Self {
        Self::new()
    }
}

impl StateNormalizer {
    pub fn new() -> Self {
        Self { lo: [f64::INFINITY; STATE_DIM], hi: [f64::NEG_INFINITY; STATE_DIM] }
    }

    /// Folds `raw` into the running extrema, then normalizes it.
    pub fn observe(&mut self, raw: &[f64; STATE_DIM]) -> SearchState {
        for (i, &v) in raw.iter().enumerate() {
            self.lo[i] = self.lo[i].min(v);
            self.hi[i] = self.hi[i].max(v);
        }
        let mut normalized = [0.0; STATE_DIM];
        for i in 0..STATE_DIM {
            let span = self.hi[i] - self.lo[i];
            if span > 0.0 {
                normalized[i] = (raw[i] - self.lo[i]) / span;
            }
        }
        SearchState { raw: *raw, normalized }
    }
}

/// Number of channels the sparsity action keeps:
/// `min(I, max(1, ceil(I * a)))`.
pub fn channels_to_keep(channels: usize, action: f64) -> Result<usize> {
    if !(action > 0.0 && action <= 1.0) {
        return Err(Error::InvalidArg(format!(
            "sparsity action {action} outside (0, 1]"
        )));
    }
    let c = (channels as f64 * action).ceil() as usize;
    Ok(c.clamp(1, channels))
}

/// Importance-proportional bitwidth floors.
///
/// Preserved channel `i` gets `clamp(ceil(bit_max * imp_i / max_imp), 1,
/// bit_max)`; everything else 0. The most important survivor always floors at
/// `bit_max`. If every preserved score is zero the floor degenerates to 1
/// everywhere so survivors are never implicitly pruned.
pub fn min_bitwidths(scores: &[f64], preserved: &[usize], bit_max: u8) -> Vec<u8> {
    assert!(!preserved.is_empty(), "preserved set must be nonempty");
    assert!(
        preserved.iter().all(|&i| scores[i] >= 0.0),
        "importance scores are non-negative"
    );
    let max_imp = preserved.iter().map(|&i| scores[i]).fold(0.0f64, f64::max);
    let mut floors = vec![0u8; scores.len()];
    for &i in preserved {
        floors[i] = if max_imp == 0.0 {
            1
        } else {
            let raw = (bit_max as f64 * scores[i] / max_imp).ceil();
            (raw as u8).clamp(1, bit_max)
        };
    }
    floors
}

/// One layer's resolved plan: survivors, floors, current bits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerDecision {
    /// Surviving channel indices, ascending.
    pub preserved: Vec<usize>,
    /// Per-channel bitwidth floor, 0 outside the survivor set.
    pub minbit: Vec<u8>,
    /// Per-channel bits, starts at `bit_max` for survivors.
    pub bits: Vec<u8>,
}

impl LayerDecision {
    pub fn keep_count(&self) -> usize {
        self.preserved.len()
    }
}

/// Applies the keep count to a layer: survivors at `bit_max`, floors from
/// importance, everything else pruned.
pub fn decide_layer(scores: &[f64], c_nz: usize, bit_max: u8) -> Result<LayerDecision> {
    let preserved = top_channels(scores, c_nz)?;
    let minbit = min_bitwidths(scores, &preserved, bit_max);
    let mut bits = vec![0u8; scores.len()];
    for &i in &preserved {
        bits[i] = bit_max;
    }
    Ok(LayerDecision { preserved, minbit, bits })
}

/// Which layer the greedy loop touches next.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerRule {
    /// Largest current layer size first (ties: lower index).
    LargeLayerFirst,
    /// Deepest layer first.
    DeepLayerFirst,
}

impl LayerRule {
    pub fn name(self) -> &'static str {
        match self {
            LayerRule::LargeLayerFirst => "large",
            LayerRule::DeepLayerFirst => "deep",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "large" => Ok(LayerRule::LargeLayerFirst),
            "deep" => Ok(LayerRule::DeepLayerFirst),
            other => Err(Error::Format(format!("unknown layer rule '{other}'"))),
        }
    }
}

/// Result of a budget-enforcement pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnforceOutcome {
    /// Final size met the budget. An infeasible plan is returned as-is and
    /// flagged, never an error: the reward punishes it.
    pub feasible: bool,
    pub iterations: u64,
    pub final_size_bits: u64,
}

/// One greedy decrement, reported to the observer.
#[derive(Debug, Clone, Copy)]
pub struct GreedyStep {
    pub layer: usize,
    pub channel: usize,
    pub total_size_bits: u64,
}

/// Channel-wise budget enforcement. See [`greedy_budget_enforce_observed`].
pub fn greedy_budget_enforce(
    net: &NetworkIR,
    table: &ImportanceTable,
    decisions: &mut [LayerDecision],
    budget_bits: f64,
    rule: LayerRule,
) -> Result<EnforceOutcome> {
    greedy_budget_enforce_observed(net, table, decisions, budget_bits, rule, |_| {})
}

/// While the plan is over budget, pick a layer by `rule` among those with a
/// reducible channel, then cut one bit from that layer's least important
/// channel still above its floor. Layer sizes are recomputed after every
/// decrement, so the large-layer rule always sees current sizes.
pub fn greedy_budget_enforce_observed(
    net: &NetworkIR,
    table: &ImportanceTable,
    decisions: &mut [LayerDecision],
    budget_bits: f64,
    rule: LayerRule,
    mut on_step: impl FnMut(&GreedyStep),
) -> Result<EnforceOutcome> {
    if decisions.len() != net.len() {
        return Err(Error::Shape(format!(
            "{} layer decisions for a {}-layer network",
            decisions.len(),
            net.len()
        )));
    }
    let mut sizes: Vec<u64> = net
        .layers()
        .iter()
        .zip(decisions.iter())
        .map(|(layer, d)| layer_size_bits(&layer.spec, &d.bits))
        .collect::<Result<_>>()?;
    let mut total: u64 = sizes.iter().sum();
    let mut iterations = 0u64;

    let reducible = |d: &LayerDecision| d.preserved.iter().any(|&i| d.bits[i] > d.minbit[i]);

    while total as f64 > budget_bits {
        let target = match select_layer(&sizes, decisions, rule, reducible) {
            Some(l) => l,
            None => {
                return Ok(EnforceOutcome { feasible: false, iterations, final_size_bits: total })
            }
        };
        // Least important reducible channel: walk the descending ranking
        // backwards.
        let d = &mut decisions[target];
        let channel = table
            .ranking(target)
            .iter()
            .rev()
            .copied()
            .find(|&i| d.bits[i] > d.minbit[i] && d.bits[i] > 0)
            .expect("selected layer has a reducible channel");
        d.bits[channel] -= 1;
        let new_size = layer_size_bits(&net.layer(target).spec, &d.bits)?;
        total = total - sizes[target] + new_size;
        sizes[target] = new_size;
        iterations += 1;
        on_step(&GreedyStep { layer: target, channel, total_size_bits: total });
    }
    Ok(EnforceOutcome { feasible: true, iterations, final_size_bits: total })
}

/// Layer-wise budget enforcement: all survivors of a layer share one
/// bitwidth, decremented together. The layer floor is the max of its
/// survivors' floors, so per-channel bounds still hold.
pub fn layerwise_budget_enforce(
    net: &NetworkIR,
    decisions: &mut [LayerDecision],
    budget_bits: f64,
    rule: LayerRule,
) -> Result<EnforceOutcome> {
    if decisions.len() != net.len() {
        return Err(Error::Shape(format!(
            "{} layer decisions for a {}-layer network",
            decisions.len(),
            net.len()
        )));
    }
    let floors: Vec<u8> = decisions
        .iter()
        .map(|d| d.preserved.iter().map(|&i| d.minbit[i]).max().unwrap_or(0))
        .collect();
    let mut levels: Vec<u8> = decisions
        .iter()
        .map(|d| d.preserved.iter().map(|&i| d.bits[i]).max().unwrap_or(0))
        .collect();
    let mut sizes: Vec<u64> = net
        .layers()
        .iter()
        .zip(decisions.iter())
        .map(|(layer, d)| layer_size_bits(&layer.spec, &d.bits))
        .collect::<Result<_>>()?;
    let mut total: u64 = sizes.iter().sum();
    let mut iterations = 0u64;

    while total as f64 > budget_bits {
        let reducible = |l: usize| !decisions[l].preserved.is_empty() && levels[l] > floors[l];
        let candidates: Vec<usize> = (0..decisions.len()).filter(|&l| reducible(l)).collect();
        if candidates.is_empty() {
            return Ok(EnforceOutcome { feasible: false, iterations, final_size_bits: total });
        }
        let target = match rule {
            LayerRule::DeepLayerFirst => *candidates.last().expect("nonempty"),
            LayerRule::LargeLayerFirst => candidates
                .iter()
                .copied()
                .max_by(|&a, &b| sizes[a].cmp(&sizes[b]).then(b.cmp(&a)))
                .expect("nonempty"),
        };
        levels[target] -= 1;
        let d = &mut decisions[target];
        for &i in &d.preserved {
            d.bits[i] = levels[target];
        }
        let new_size = layer_size_bits(&net.layer(target).spec, &d.bits)?;
        total = total - sizes[target] + new_size;
        sizes[target] = new_size;
        iterations += 1;
    }
    Ok(EnforceOutcome { feasible: true, iterations, final_size_bits: total })
}

fn select_layer(
    sizes: &[u64],
    decisions: &[LayerDecision],
    rule: LayerRule,
    reducible: impl Fn(&LayerDecision) -> bool,
) -> Option<usize> {
    let candidates: Vec<usize> = (0..decisions.len())
        .filter(|&l| reducible(&decisions[l]))
        .collect();
    if candidates.is_empty() {
        return None;
    }
    match rule {
        LayerRule::DeepLayerFirst => candidates.last().copied(),
        // Ties resolve to the lower index: compare size first, then prefer
        // the smaller layer index by inverting the index order.
        LayerRule::LargeLayerFirst => candidates
            .iter()
            .copied()
            .max_by(|&a, &b| sizes[a].cmp(&sizes[b]).then(b.cmp(&a))),
    }
}

/// Sparsity floor for a layer kind (convolutional layers may prune deeper
/// than fully connected ones).
pub fn a_min_for(kind: LayerKind, a_min_conv: f64, a_min_fc: f64) -> f64 {
    match kind {
        LayerKind::Conv | LayerKind::DepthwiseConv => a_min_conv,
        LayerKind::FullyConnected => a_min_fc,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{assess, Layer, LayerSpec, Task};

    fn mini_net() -> NetworkIR {
        let s0 = LayerSpec::conv(0, 3, 4, 3, 1, 6, 6, true);
        let s1 = LayerSpec::fully_connected(1, 4, 10, true);
        let l0 = Layer::new(s0.clone(), vec![0.1; s0.weight_count()], vec![0.0; 4]).unwrap();
        let l1 = Layer::new(s1.clone(), vec![0.2; s1.weight_count()], vec![0.0; 10]).unwrap();
        NetworkIR::new(vec![l0, l1], Task::Classification).unwrap()
    }

    #[test]
    fn fresh_run_features_show_uncompressed_ledger() {
        let net = mini_net();
        let ledger = assess(&net, &[None, None]).unwrap();
        let raw = featurize(&net, &ledger, 0, 0.0);
        assert_eq!(raw[8], 0.0); // reduced flops
        assert_eq!(raw[10], 0.0); // reduced size
        assert_eq!(raw[11], ledger.base_size_bits as f64);
        assert_eq!(raw[12], 0.0); // a_prev convention
    }

    #[test]
    fn fc_features_use_conventions() {
        let net = mini_net();
        let ledger = assess(&net, &[None, None]).unwrap();
        let raw = featurize(&net, &ledger, 1, 0.8);
        assert_eq!(raw[1], 0.0); // type code
        assert_eq!(raw[6], 0.0); // stride
        assert_eq!(raw[7], 1.0); // kernel
        assert_eq!(raw[12], 0.8);
    }

    #[test]
    fn refeaturize_is_deterministic() {
        let net = mini_net();
        let ledger = assess(&net, &[None, None]).unwrap();
        let a = featurize(&net, &ledger, 0, 0.0);
        let b = featurize(&net, &ledger, 0, 0.0);
        assert_eq!(a, b);
        let mut norm = StateNormalizer::new();
        let first = norm.observe(&a);
        let second = norm.observe(&b);
        assert_eq!(first, second);
    }

    #[test]
    fn normalized_features_stay_in_unit_interval() {
        let mut norm = StateNormalizer::new();
        let vectors = [
            [1.0, -5.0, 3.0, 0.0, 2.0, 2.0, 1.0, 3.0, 0.0, 9.0, 0.0, 4.0, 0.0],
            [2.0, 5.0, 1.0, 7.0, 2.0, 8.0, 0.0, 1.0, 3.0, 6.0, 2.0, 2.0, 1.0],
            [0.0, 0.0, 2.0, 3.0, 2.0, 4.0, 2.0, 2.0, 6.0, 3.0, 4.0, 0.0, 0.5],
        ];
        for v in &vectors {
            let s = norm.observe(v);
            assert!(s.normalized.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    #[test]
    fn keep_count_formula_examples() {
        assert_eq!(channels_to_keep(10, 0.25).unwrap(), 3);
        assert_eq!(channels_to_keep(10, 1.0).unwrap(), 10);
        assert!(channels_to_keep(10, 0.0).is_err());
        assert!(channels_to_keep(10, 1.5).is_err());
    }

    #[test]
    fn keep_count_grid_stays_in_range() {
        for channels in 1..=64usize {
            for step in 1..=100usize {
                let a = step as f64 / 100.0;
                let c = channels_to_keep(channels, a).unwrap();
                let expect = ((channels as f64 * a).ceil() as usize).clamp(1, channels);
                assert_eq!(c, expect);
                assert!((1..=channels).contains(&c));
            }
        }
    }

    #[test]
    fn floors_follow_importance_exactly() {
        assert_eq!(min_bitwidths(&[8.0, 4.0, 1.0], &[0, 1, 2], 8), vec![8, 4, 1]);
    }

    #[test]
    fn equal_importance_floors_at_max() {
        assert_eq!(min_bitwidths(&[5.0, 5.0], &[0, 1], 8), vec![8, 8]);
    }

    #[test]
    fn tiny_importance_floors_at_one() {
        assert_eq!(min_bitwidths(&[8.0, 0.01], &[0, 1], 8), vec![8, 1]);
    }

    #[test]
    fn all_zero_importance_floors_at_one() {
        assert_eq!(min_bitwidths(&[0.0, 0.0], &[0, 1], 8), vec![1, 1]);
    }

    #[test]
    fn pruned_channels_are_rank_complement() {
        let scores = [0.5, 3.0, 2.0, 0.1];
        let d = decide_layer(&scores, 2, 8).unwrap();
        assert_eq!(d.preserved, vec![1, 2]);
        let pruned: Vec<usize> = (0..4).filter(|&i| d.bits[i] == 0).collect();
        assert_eq!(pruned, vec![0, 3]);
        for &i in &d.preserved {
            assert!(d.minbit[i] >= 1 && d.minbit[i] <= d.bits[i]);
        }
    }

    /// Two-channel FC layer, weights-per-channel 1: every decrement removes
    /// exactly one bit, and all four land on the trivial channel.
    fn one_fc_net() -> NetworkIR {
        let spec = LayerSpec::fully_connected(0, 1, 2, false);
        let layer = Layer::new(spec, vec![9.0, 1.0], vec![]).unwrap();
        NetworkIR::new(vec![layer], Task::Classification).unwrap()
    }

    #[test]
    fn trivial_channel_absorbs_all_cuts() {
        let net = one_fc_net();
        let table = ImportanceTable::build(&net);
        let mut decisions = vec![decide_layer(table.scores(0), 2, 8).unwrap()];
        assert_eq!(decisions[0].minbit, vec![8, 1]);
        // Start size: 2 channels x (1 weight x 8 bits + 64 overhead) = 144.
        let out =
            greedy_budget_enforce(&net, &table, &mut decisions, 140.0, LayerRule::LargeLayerFirst)
                .unwrap();
        assert!(out.feasible);
        assert_eq!(out.iterations, 4);
        assert_eq!(decisions[0].bits, vec![8, 4]);
        assert_eq!(out.final_size_bits, 140);
    }

    #[test]
    fn generous_budget_leaves_plan_unchanged() {
        let net = one_fc_net();
        let table = ImportanceTable::build(&net);
        let mut decisions = vec![decide_layer(table.scores(0), 2, 8).unwrap()];
        let before = decisions.clone();
        let out =
            greedy_budget_enforce(&net, &table, &mut decisions, 1e9, LayerRule::DeepLayerFirst)
                .unwrap();
        assert!(out.feasible);
        assert_eq!(out.iterations, 0);
        assert_eq!(decisions, before);
    }

    #[test]
    fn unreachable_budget_flags_infeasible() {
        let net = one_fc_net();
        let table = ImportanceTable::build(&net);
        let mut decisions = vec![decide_layer(table.scores(0), 2, 8).unwrap()];
        // Drive every survivor to its floor first.
        for d in decisions.iter_mut() {
            let minbit = d.minbit.clone();
            for &i in &d.preserved {
                d.bits[i] = minbit[i];
            }
        }
        let size_before: u64 =
            layer_size_bits(&net.layer(0).spec, &decisions[0].bits).unwrap();
        let out =
            greedy_budget_enforce(&net, &table, &mut decisions, 1.0, LayerRule::LargeLayerFirst)
                .unwrap();
        assert!(!out.feasible);
        assert_eq!(out.final_size_bits, size_before);
        assert_eq!(out.iterations, 0);
    }

    #[test]
    fn greedy_never_touches_pruned_channels_and_respects_floors() {
        let net = mini_net();
        let table = ImportanceTable::build(&net);
        let mut decisions = vec![
            decide_layer(table.scores(0), 3, 8).unwrap(),
            decide_layer(table.scores(1), 7, 8).unwrap(),
        ];
        let pruned: Vec<Vec<usize>> = decisions
            .iter()
            .map(|d| (0..d.bits.len()).filter(|&i| d.bits[i] == 0).collect())
            .collect();
        greedy_budget_enforce(&net, &table, &mut decisions, 0.0, LayerRule::LargeLayerFirst)
            .unwrap();
        for (d, pr) in decisions.iter().zip(&pruned) {
            for &i in pr {
                assert_eq!(d.bits[i], 0, "pruned channel got bits back");
            }
            for &i in &d.preserved {
                assert!(d.bits[i] >= d.minbit[i] && d.bits[i] <= 8);
            }
        }
    }

    #[test]
    fn layerwise_keeps_uniform_bits() {
        let net = mini_net();
        let table = ImportanceTable::build(&net);
        let mut decisions = vec![
            decide_layer(table.scores(0), 3, 8).unwrap(),
            decide_layer(table.scores(1), 7, 8).unwrap(),
        ];
        let out = layerwise_budget_enforce(&net, &mut decisions, 0.0, LayerRule::LargeLayerFirst)
            .unwrap();
        // Equal-importance floors sit at bit_max here, so nothing can move.
        assert!(!out.feasible);
        for d in &decisions {
            let nonzero: Vec<u8> =
                d.bits.iter().copied().filter(|&b| b > 0).collect();
            assert!(nonzero.windows(2).all(|w| w[0] == w[1]));
        }
    }
}
