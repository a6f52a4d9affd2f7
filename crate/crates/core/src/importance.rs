//! Per-channel importance scores.
//!
//! A channel's importance is the L1 norm of its kernel slice. The same scores
//! drive both controllers: which channels survive pruning, the bitwidth floor
//! each survivor gets, and the order in which the greedy loop cuts bits.

use crate::error::{Error, Result};
use crate::ir::NetworkIR;

/// Importance scores and descending rankings for every layer of a network.
#[derive(Debug, Clone)]
pub struct ImportanceTable {
    scores: Vec<Vec<f64>>,
    rankings: Vec<Vec<usize>>,
}

impl ImportanceTable {
    /// Scores every layer of `net`. Weights never change during a search, so
    /// this is computed once and shared by both controllers.
    pub fn build(net: &NetworkIR) -> Self {
        let scores: Vec<Vec<f64>> = (0..net.len()).map(|l| score_layer(net, l)).collect();
        let rankings = scores.iter().map(|s| rank(s)).collect();
        Self { scores, rankings }
    }

    pub fn scores(&self, layer: usize) -> &[f64] {
        &self.scores[layer]
    }

    /// Channel indices of `layer` sorted by descending importance, ties
    /// broken by lower channel index.
    pub fn ranking(&self, layer: usize) -> &[usize] {
        &self.rankings[layer]
    }
}

/// L1 norm of each output channel's kernel slice. Accumulates in f64 in
/// storage order, so the result is deterministic.
pub fn score_layer(net: &NetworkIR, layer: usize) -> Vec<f64> {
    let l = net.layer(layer);
    (0..l.spec.out_channels)
        .map(|i| l.channel(i).iter().map(|&w| w.abs() as f64).sum())
        .collect()
}

/// Indices of `scores` in descending order; equal scores keep the lower
/// index first.
pub fn rank(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("importance scores are finite")
            .then(a.cmp(&b))
    });
    idx
}

/// The `c_nz` highest-scoring channel indices, returned in ascending index
/// order for stable downstream iteration.
pub fn top_channels(scores: &[f64], c_nz: usize) -> Result<Vec<usize>> {
    if c_nz == 0 || c_nz > scores.len() {
        return Err(Error::InvalidArg(format!(
            "keep count {} outside [1, {}]",
            c_nz,
            scores.len()
        )));
    }
    let mut keep: Vec<usize> = rank(scores)[..c_nz].to_vec();
    keep.sort_unstable();
    Ok(keep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{Layer, LayerSpec, NetworkIR, Task};
    use proptest::prelude::*;

    fn one_conv_net(kernel: Vec<f32>, c_o: usize, c_i: usize) -> NetworkIR {
        let spec = LayerSpec::conv(0, c_i, c_o, 1, 1, 4, 4, false);
        let layer = Layer::new(spec, kernel, vec![]).unwrap();
        NetworkIR::new(vec![layer], Task::Classification).unwrap()
    }

    #[test]
    fn l1_norm_of_a_channel() {
        let net = one_conv_net(vec![1.0, -2.0, 0.5], 1, 3);
        assert_eq!(score_layer(&net, 0), vec![3.5]);
    }

    #[test]
    fn zero_channel_scores_zero() {
        let net = one_conv_net(vec![0.0, 0.0, 0.0], 1, 3);
        assert_eq!(score_layer(&net, 0), vec![0.0]);
    }

    #[test]
    fn scores_match_per_weight_accumulation() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let spec = LayerSpec::conv(0, 3, 4, 3, 1, 8, 8, false);
        let kernel: Vec<f32> = (0..spec.weight_count()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let wpc = spec.weights_per_channel();
        let mut expect = vec![0.0f64; 4];
        for (w, &v) in kernel.iter().enumerate() {
            expect[w / wpc] += v.abs() as f64;
        }
        let layer = Layer::new(spec, kernel, vec![]).unwrap();
        let net = NetworkIR::new(vec![layer], Task::Classification).unwrap();
        assert_eq!(score_layer(&net, 0), expect);
    }

    #[test]
    fn ties_rank_lower_index_first() {
        assert_eq!(rank(&[0.1, 3.0, 3.0]), vec![1, 2, 0]);
    }

    #[test]
    fn singleton_ranks_itself() {
        assert_eq!(rank(&[5.0]), vec![0]);
    }

    #[test]
    fn rank_agrees_with_reference_sort() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let scores: Vec<f64> = (0..16).map(|_| rng.random_range(0.0..10.0)).collect();
        let mut reference: Vec<usize> = (0..16).collect();
        reference.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        assert_eq!(rank(&scores), reference);
    }

    #[test]
    fn top_channels_picks_highest() {
        assert_eq!(top_channels(&[1.0, 9.0, 5.0], 2).unwrap(), vec![1, 2]);
    }

    #[test]
    fn keeping_all_is_identity() {
        assert_eq!(top_channels(&[1.0, 9.0, 5.0], 3).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn keeping_one_is_argmax() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let scores: Vec<f64> = (0..12).map(|_| rng.random_range(0.0..1.0)).collect();
        let argmax = (0..12).max_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap();
        assert_eq!(top_channels(&scores, 1).unwrap(), vec![argmax]);
    }

    #[test]
    fn keep_count_out_of_range_rejected() {
        assert!(top_channels(&[1.0], 0).is_err());
        assert!(top_channels(&[1.0], 2).is_err());
    }

    proptest! {
        /// Scaling all weights by a positive factor scales scores and leaves
        /// the ranking and survivor set unchanged.
        #[test]
        fn scale_covariance(
            kernel in proptest::collection::vec(-2.0f32..2.0, 12),
            alpha in 0.25f32..4.0,
            c_nz in 1usize..=4,
        ) {
            let scaled: Vec<f32> = kernel.iter().map(|w| w * alpha).collect();
            let a = one_conv_net(kernel, 4, 3);
            let b = one_conv_net(scaled, 4, 3);
            let (sa, sb) = (score_layer(&a, 0), score_layer(&b, 0));
            for (x, y) in sa.iter().zip(&sb) {
                prop_assert!((y - x * alpha as f64).abs() <= 1e-6 * (1.0 + y.abs()));
            }
            prop_assert_eq!(rank(&sa), rank(&sb));
            prop_assert_eq!(top_channels(&sa, c_nz).unwrap(), top_channels(&sb, c_nz).unwrap());
        }

        /// Permuting channels and un-permuting the ranking is the identity.
        #[test]
        fn permutation_invariance(seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let scores: Vec<f64> = (0..8).map(|i| (i as f64) * 0.37 + 0.1).collect();
            let mut perm: Vec<usize> = (0..8).collect();
            perm.shuffle(&mut rng);
            let shuffled: Vec<f64> = perm.iter().map(|&p| scores[p]).collect();
            let ranked = rank(&shuffled);
            // Map ranked positions back through the permutation.
            let unshuffled: Vec<usize> = ranked.iter().map(|&i| perm[i]).collect();
            prop_assert_eq!(unshuffled, rank(&scores));
        }
    }
}
