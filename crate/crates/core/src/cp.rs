//! Rank-r CP representation of the joint distribution over the next n tokens.
//!
//! The joint probability tensor A[x_1, …, x_n] is approximated as
//! Σ_α w_α Π_s P^(s)(x_s | α) with r mixture components ("experts"), mixture
//! weights w on the simplex, and per-position per-expert factor distributions
//! over the vocabulary. Everything is stored and combined in log space;
//! probabilities only appear in [`CPJointDist::materialize`] and in samplers.
//!
//! Conditioning on an observed token folds that position's factor column into
//! the mixture weights and marks the position consumed; factor tables are
//! shared behind an `Arc`, so a conditioned copy costs O(r) extra memory.

use std::sync::Arc;

use ndarray::{Array1, Array3, ArrayD, ArrayView1, IxDyn};

use crate::error::{Error, Result};
use crate::instrument;
use crate::math::{all_finite, argmax_tie_low, log_normalize, log_softmax, logsumexp};

/// Default cap on materialized tensor entries (the oracle is for tests).
pub const DEFAULT_MATERIALIZE_LIMIT: usize = 1_000_000;

/// Tolerance for the "log-distribution sums to one" invariant.
pub const NORMALIZATION_TOL: f64 = 1e-12;

/// A normalized distribution over the vocabulary, in log space.
#[derive(Debug, Clone, PartialEq)]
pub struct LogDistribution {
    log_probs: Vec<f64>,
}

impl LogDistribution {
    /// Wrap an already-normalized log-probability vector.
    pub fn from_log_probs(log_probs: Vec<f64>) -> Result<Self> {
        if log_probs.is_empty() {
            return Err(Error::DimensionMismatch("empty distribution".into()));
        }
        let lse = logsumexp(&log_probs);
        if !lse.is_finite() || lse.abs() > NORMALIZATION_TOL {
            return Err(Error::InvalidArgument(format!(
                "log-probabilities are not normalized: logsumexp = {lse:e}"
            )));
        }
        Ok(Self { log_probs })
    }

    /// Normalize raw logits with a clamped log-softmax.
    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::DimensionMismatch("empty logit vector".into()));
        }
        if !all_finite(logits) {
            return Err(Error::NonFinite("logits"));
        }
        Ok(Self {
            log_probs: log_softmax(logits),
        })
    }

    pub fn vocab(&self) -> usize {
        self.log_probs.len()
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn log_prob(&self, token: usize) -> Result<f64> {
        self.log_probs
            .get(token)
            .copied()
            .ok_or(Error::TokenOutOfRange {
                token,
                vocab: self.vocab(),
            })
    }

    /// Most probable token; ties break toward the lowest index.
    pub fn argmax(&self) -> usize {
        argmax_tie_low(&self.log_probs)
    }

    /// Token indices of the `k` largest probabilities, most probable first;
    /// equal probabilities order by ascending token index.
    pub fn top_k(&self, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.vocab()).collect();
        idx.sort_by(|&a, &b| {
            self.log_probs[b]
                .partial_cmp(&self.log_probs[a])
                .unwrap()
                .then(a.cmp(&b))
        });
        idx.truncate(k);
        idx
    }
}

/// Rank-r CP joint distribution over the next `horizon` tokens.
///
/// `log_factors[s][α]` is the log-distribution of position `s` under expert
/// `α`; `log_weights` is the log of the mixture simplex vector. Conditioned
/// positions are tracked by a consumed mask so factor indexing stays aligned
/// with head outputs.
#[derive(Debug, Clone)]
pub struct CPJointDist {
    horizon: usize,
    vocab: usize,
    rank: usize,
    log_weights: Array1<f64>,
    log_factors: Arc<Array3<f64>>,
    consumed: Vec<bool>,
}

impl CPJointDist {
    /// Build from raw logits: log-softmax over experts for the weights and
    /// over the vocabulary for every factor.
    ///
    /// `factor_logits` has shape `[n, r, V]`.
    pub fn from_logits(weight_logits: &[f64], factor_logits: &Array3<f64>) -> Result<Self> {
        let (n, r, v) = factor_logits.dim();
        if n == 0 || r == 0 || v == 0 {
            return Err(Error::DimensionMismatch(format!(
                "factor logits have degenerate shape [{n}, {r}, {v}]"
            )));
        }
        if weight_logits.len() != r {
            return Err(Error::DimensionMismatch(format!(
                "{} weight logits for rank {r}",
                weight_logits.len()
            )));
        }
        if !all_finite(weight_logits) {
            return Err(Error::NonFinite("weight logits"));
        }
        if !factor_logits.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("factor logits"));
        }

        let log_weights = Array1::from(log_softmax(weight_logits));
        let mut log_factors = Array3::zeros((n, r, v));
        for s in 0..n {
            for alpha in 0..r {
                let row: Vec<f64> = factor_logits
                    .slice(ndarray::s![s, alpha, ..])
                    .iter()
                    .cloned()
                    .collect();
                let norm = log_softmax(&row);
                for (token, value) in norm.into_iter().enumerate() {
                    log_factors[[s, alpha, token]] = value;
                }
            }
        }
        Ok(Self {
            horizon: n,
            vocab: v,
            rank: r,
            log_weights,
            log_factors: Arc::new(log_factors),
            consumed: vec![false; n],
        })
    }

    /// Test/helper constructor from nested vectors `[n][r][V]`.
    pub fn from_logit_vecs(weight_logits: &[f64], factors: &[Vec<Vec<f64>>]) -> Result<Self> {
        let n = factors.len();
        let r = factors.first().map_or(0, |f| f.len());
        let v = factors
            .first()
            .and_then(|f| f.first())
            .map_or(0, |f| f.len());
        let mut arr = Array3::zeros((n, r, v));
        for (s, per_alpha) in factors.iter().enumerate() {
            if per_alpha.len() != r {
                return Err(Error::DimensionMismatch(format!(
                    "position {s} has {} experts, expected {r}",
                    per_alpha.len()
                )));
            }
            for (alpha, row) in per_alpha.iter().enumerate() {
                if row.len() != v {
                    return Err(Error::DimensionMismatch(format!(
                        "factor [{s}][{alpha}] has {} entries, expected {v}",
                        row.len()
                    )));
                }
                for (token, &x) in row.iter().enumerate() {
                    arr[[s, alpha, token]] = x;
                }
            }
        }
        Self::from_logits(weight_logits, &arr)
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn log_weights(&self) -> ArrayView1<'_, f64> {
        self.log_weights.view()
    }

    /// Log-distribution of position `s` under expert `alpha`.
    pub fn factor(&self, position: usize, alpha: usize) -> ArrayView1<'_, f64> {
        self.log_factors.slice(ndarray::s![position, alpha, ..])
    }

    pub fn is_consumed(&self, position: usize) -> bool {
        self.consumed[position]
    }

    /// Positions not yet conditioned on, in ascending order.
    pub fn remaining_positions(&self) -> Vec<usize> {
        (0..self.horizon).filter(|&s| !self.consumed[s]).collect()
    }

    /// Joint log-probability of one token per remaining position.
    ///
    /// `tokens` always has length `horizon`; entries at consumed positions are
    /// ignored. For a fresh distribution this is log A[x_1, …, x_n]; after
    /// conditioning it is the log-probability of the remaining positions
    /// given the observed ones.
    pub fn log_prob(&self, tokens: &[usize]) -> Result<f64> {
        if tokens.len() != self.horizon {
            return Err(Error::DimensionMismatch(format!(
                "{} tokens for horizon {}",
                tokens.len(),
                self.horizon
            )));
        }
        for (&token, &done) in tokens.iter().zip(&self.consumed) {
            if !done && token >= self.vocab {
                return Err(Error::TokenOutOfRange {
                    token,
                    vocab: self.vocab,
                });
            }
        }
        // Per-expert accumulation of log w_α + Σ_s log P^(s)(x_s | α).
        let mut terms = self.log_weights.to_vec();
        for (s, &token) in tokens.iter().enumerate() {
            if self.consumed[s] {
                continue;
            }
            for (alpha, term) in terms.iter_mut().enumerate() {
                *term += self.log_factors[[s, alpha, token]];
            }
        }
        instrument::add((self.rank * self.remaining_positions().len()) as u64);
        Ok(logsumexp(&terms))
    }

    /// Brute-force probability tensor over the remaining positions, with the
    /// default entry limit.
    pub fn materialize(&self) -> Result<ArrayD<f64>> {
        self.materialize_with_limit(DEFAULT_MATERIALIZE_LIMIT)
    }

    /// Brute-force probability tensor over the remaining positions.
    ///
    /// Entry `[x_1, …, x_k]` (k = number of remaining positions, ascending
    /// order) equals Σ_α w_α Π_s P^(s)(x_s | α). This is the test oracle; the
    /// tensor has V^k entries and is rejected above `limit`.
    pub fn materialize_with_limit(&self, limit: usize) -> Result<ArrayD<f64>> {
        let positions = self.remaining_positions();
        let size = self.vocab.checked_pow(positions.len() as u32);
        let size = size.ok_or(Error::MaterializeLimit {
            size: usize::MAX,
            limit,
        })?;
        if size > limit {
            return Err(Error::MaterializeLimit { size, limit });
        }

        let weights: Vec<f64> = self.log_weights.iter().map(|x| x.exp()).collect();
        let shape: Vec<usize> = positions.iter().map(|_| self.vocab).collect();
        let mut tensor = ArrayD::zeros(IxDyn(&shape));
        let mut index = vec![0usize; positions.len()];
        loop {
            let mut value = 0.0;
            for (alpha, &w) in weights.iter().enumerate() {
                let mut product = w;
                for (axis, &s) in positions.iter().enumerate() {
                    product *= self.log_factors[[s, alpha, index[axis]]].exp();
                }
                value += product;
            }
            tensor[IxDyn(&index)] = value;

            // Odometer increment over [V]^k.
            let mut axis = positions.len();
            loop {
                if axis == 0 {
                    return Ok(tensor);
                }
                axis -= 1;
                index[axis] += 1;
                if index[axis] < self.vocab {
                    break;
                }
                index[axis] = 0;
            }
        }
    }

    /// Mixture marginal of one remaining position:
    /// log Σ_α exp(log w_α + log P^(s)(· | α)).
    pub fn marginal_at(&self, position: usize) -> Result<LogDistribution> {
        if position >= self.horizon {
            return Err(Error::DimensionMismatch(format!(
                "position {position} out of range for horizon {}",
                self.horizon
            )));
        }
        if self.consumed[position] {
            return Err(Error::AlreadyConditioned(position));
        }
        let mut out = Vec::with_capacity(self.vocab);
        let mut terms = vec![0.0; self.rank];
        for token in 0..self.vocab {
            for (alpha, term) in terms.iter_mut().enumerate() {
                *term = self.log_weights[alpha] + self.log_factors[[position, alpha, token]];
            }
            out.push(logsumexp(&terms));
        }
        instrument::add((self.rank * self.vocab) as u64);
        LogDistribution::from_log_probs(out)
    }

    /// Marginal of the earliest position that has not been conditioned on.
    ///
    /// For a fresh distribution this is the first head's mixture marginal —
    /// the base model's next-token distribution in the self-speculative setup.
    pub fn first_token_marginal(&self) -> Result<LogDistribution> {
        let position = self
            .remaining_positions()
            .first()
            .copied()
            .ok_or(Error::FullyConditioned)?;
        self.marginal_at(position)
    }

    /// Condition on `token` at `position`: fold that factor column into the
    /// mixture weights (log w'_α ∝ log w_α + log P^(s)(token | α)) and mark
    /// the position consumed. Remaining factors are untouched; renormalizing
    /// the weights is sufficient for all remaining marginals to be the true
    /// conditionals.
    pub fn condition_on(&self, position: usize, token: usize) -> Result<CPJointDist> {
        if position >= self.horizon {
            return Err(Error::DimensionMismatch(format!(
                "position {position} out of range for horizon {}",
                self.horizon
            )));
        }
        if self.consumed[position] {
            return Err(Error::AlreadyConditioned(position));
        }
        if token >= self.vocab {
            return Err(Error::TokenOutOfRange {
                token,
                vocab: self.vocab,
            });
        }
        let unnorm: Vec<f64> = (0..self.rank)
            .map(|alpha| self.log_weights[alpha] + self.log_factors[[position, alpha, token]])
            .collect();
        let mut consumed = self.consumed.clone();
        consumed[position] = true;
        instrument::add(self.rank as u64);
        Ok(CPJointDist {
            horizon: self.horizon,
            vocab: self.vocab,
            rank: self.rank,
            log_weights: Array1::from(log_normalize(&unnorm)),
            log_factors: Arc::clone(&self.log_factors),
            consumed,
        })
    }

    /// Check the normalization invariants: weights and every factor must be
    /// on the simplex within `NORMALIZATION_TOL`.
    pub fn check_invariants(&self) -> Result<()> {
        let wsum = logsumexp(self.log_weights.as_slice().unwrap());
        if wsum.abs() > NORMALIZATION_TOL {
            return Err(Error::InvalidArgument(format!(
                "weights not normalized: logsumexp = {wsum:e}"
            )));
        }
        for s in 0..self.horizon {
            for alpha in 0..self.rank {
                let row: Vec<f64> = self.factor(s, alpha).to_vec();
                let lse = logsumexp(&row);
                if lse.abs() > NORMALIZATION_TOL {
                    return Err(Error::InvalidArgument(format!(
                        "factor [{s}][{alpha}] not normalized: logsumexp = {lse:e}"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use approx::assert_abs_diff_eq;

    pub(crate) fn random_dist(n: usize, r: usize, v: usize, rng: &mut SplitMix64) -> CPJointDist {
        let weight_logits: Vec<f64> = (0..r).map(|_| rng.next_range(-2.0, 2.0)).collect();
        let mut factors = Array3::zeros((n, r, v));
        for x in factors.iter_mut() {
            *x = rng.next_range(-3.0, 3.0);
        }
        CPJointDist::from_logits(&weight_logits, &factors).unwrap()
    }

    #[test]
    fn zero_logits_give_uniform_distribution() {
        let (n, r, v) = (2, 3, 4);
        let dist = CPJointDist::from_logits(&vec![0.0; r], &Array3::zeros((n, r, v))).unwrap();
        let expected = (1.0f64 / v as f64).ln();
        for s in 0..n {
            for alpha in 0..r {
                for token in 0..v {
                    assert_abs_diff_eq!(dist.factor(s, alpha)[token], expected, epsilon = 1e-15);
                }
            }
        }
        let expected_w = (1.0f64 / r as f64).ln();
        for alpha in 0..r {
            assert_abs_diff_eq!(dist.log_weights()[alpha], expected_w, epsilon = 1e-15);
        }
    }

    #[test]
    fn weight_logits_match_direct_log_softmax() {
        // log-softmax of (10, -10): first entry -ln(1 + e^-20), second -20 + that.
        let dist = CPJointDist::from_logits(&[10.0, -10.0], &Array3::zeros((1, 2, 3))).unwrap();
        let first = -(-20.0f64).exp().ln_1p();
        assert_abs_diff_eq!(dist.log_weights()[0], first, epsilon = 1e-15);
        assert_abs_diff_eq!(dist.log_weights()[1], -20.0 + first, epsilon = 1e-12);
        assert!(dist.log_weights()[0].abs() < 3e-9); // ≈ -2.06e-9
    }

    #[test]
    fn from_logits_output_is_normalized_for_arbitrary_input() {
        let mut rng = SplitMix64::new(11);
        for case in 0..50 {
            let n = 1 + rng.next_index(3);
            let r = 1 + rng.next_index(4);
            let v = 2 + rng.next_index(6);
            let dist = random_dist(n, r, v, &mut rng);
            dist.check_invariants()
                .unwrap_or_else(|e| panic!("case {case}: {e}"));
        }
    }

    #[test]
    fn from_logits_rejects_bad_input() {
        assert!(matches!(
            CPJointDist::from_logits(&[0.0], &Array3::zeros((1, 2, 3))),
            Err(Error::DimensionMismatch(_))
        ));
        let mut inf = Array3::zeros((1, 1, 2));
        inf[[0, 0, 0]] = f64::INFINITY;
        assert!(matches!(
            CPJointDist::from_logits(&[0.0], &inf),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn uniform_log_prob_is_n_log_v() {
        let dist = CPJointDist::from_logits(&[0.0; 3], &Array3::zeros((2, 3, 4))).unwrap();
        let lp = dist.log_prob(&[1, 3]).unwrap();
        assert_abs_diff_eq!(lp, -2.0 * 4.0f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(lp, -2.77259, epsilon = 1e-5);
    }

    #[test]
    fn one_hot_weights_reduce_to_single_expert() {
        let mut rng = SplitMix64::new(5);
        let mut factors = Array3::zeros((3, 2, 5));
        for x in factors.iter_mut() {
            *x = rng.next_range(-2.0, 2.0);
        }
        // Effectively one-hot on expert 0 after clamped log-softmax.
        let dist = CPJointDist::from_logits(&[700.0, -700.0], &factors).unwrap();
        let tokens = [4, 0, 2];
        let expected: f64 = (0..3).map(|s| dist.factor(s, 0)[tokens[s]]).sum();
        assert_abs_diff_eq!(dist.log_prob(&tokens).unwrap(), expected, epsilon = 1e-9);
    }

    #[test]
    fn log_prob_rejects_out_of_range_tokens() {
        let dist = CPJointDist::from_logits(&[0.0], &Array3::zeros((2, 1, 4))).unwrap();
        assert!(matches!(
            dist.log_prob(&[0, 4]),
            Err(Error::TokenOutOfRange { token: 4, vocab: 4 })
        ));
        assert!(matches!(
            dist.log_prob(&[0]),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn log_prob_matches_materialized_entry() {
        let mut rng = SplitMix64::new(17);
        let dist = random_dist(3, 4, 7, &mut rng);
        let tensor = dist.materialize().unwrap();
        let tokens = [2usize, 6, 0];
        let lp = dist.log_prob(&tokens).unwrap();
        assert_abs_diff_eq!(lp.exp(), tensor[IxDyn(&tokens)], epsilon = 1e-9);
    }

    #[test]
    fn materialized_tensor_sums_to_one() {
        let mut rng = SplitMix64::new(23);
        for _ in 0..20 {
            let dist = random_dist(2, 3, 6, &mut rng);
            let total: f64 = dist.materialize().unwrap().sum();
            assert_abs_diff_eq!(total, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn rank_one_materialization_is_outer_product() {
        let mut rng = SplitMix64::new(31);
        let dist = random_dist(2, 1, 5, &mut rng);
        let tensor = dist.materialize().unwrap();
        for a in 0..5 {
            for b in 0..5 {
                let expected = (dist.factor(0, 0)[a] + dist.factor(1, 0)[b]).exp();
                assert_abs_diff_eq!(tensor[IxDyn(&[a, b])], expected, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn uniform_materialization_is_flat() {
        let dist = CPJointDist::from_logits(&[0.0; 2], &Array3::zeros((2, 2, 3))).unwrap();
        let tensor = dist.materialize().unwrap();
        for x in tensor.iter() {
            assert_abs_diff_eq!(*x, 1.0 / 9.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn materialization_normalizes_at_the_default_limit() {
        // V^n = 10^6, the default cap.
        let mut rng = SplitMix64::new(61);
        let dist = random_dist(6, 2, 10, &mut rng);
        let total: f64 = dist.materialize().unwrap().sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn materialize_respects_limit() {
        let dist = CPJointDist::from_logits(&[0.0], &Array3::zeros((3, 1, 10))).unwrap();
        assert!(matches!(
            dist.materialize_with_limit(999),
            Err(Error::MaterializeLimit {
                size: 1000,
                limit: 999
            })
        ));
        assert!(dist.materialize_with_limit(1000).is_ok());
    }

    #[test]
    fn first_token_marginal_of_point_mass_mixture() {
        // Two experts, position-0 factors concentrated on tokens 0 and 1.
        let mut factors = Array3::zeros((1, 2, 4));
        for token in 0..4 {
            factors[[0, 0, token]] = if token == 0 { 700.0 } else { -700.0 };
            factors[[0, 1, token]] = if token == 1 { 700.0 } else { -700.0 };
        }
        let dist = CPJointDist::from_logits(&[0.0, 0.0], &factors).unwrap();
        let marginal = dist.first_token_marginal().unwrap();
        let probs: Vec<f64> = marginal.log_probs().iter().map(|x| x.exp()).collect();
        assert_abs_diff_eq!(probs[0], 0.5, epsilon = 1e-9);
        assert_abs_diff_eq!(probs[1], 0.5, epsilon = 1e-9);
        assert!(probs[2] < 1e-9 && probs[3] < 1e-9);
    }

    #[test]
    fn rank_one_marginal_is_the_factor_itself() {
        let mut rng = SplitMix64::new(37);
        let dist = random_dist(2, 1, 6, &mut rng);
        let marginal = dist.first_token_marginal().unwrap();
        for token in 0..6 {
            assert_abs_diff_eq!(
                marginal.log_probs()[token],
                dist.factor(0, 0)[token],
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn marginal_matches_axis_sum_of_materialized_tensor() {
        let mut rng = SplitMix64::new(41);
        let dist = random_dist(2, 3, 5, &mut rng);
        let tensor = dist.materialize().unwrap();
        let marginal = dist.first_token_marginal().unwrap();
        for a in 0..5 {
            let brute: f64 = (0..5).map(|b| tensor[IxDyn(&[a, b])]).sum();
            assert_abs_diff_eq!(marginal.log_probs()[a].exp(), brute, epsilon = 1e-9);
        }
    }

    #[test]
    fn conditioning_rank_one_leaves_everything_unchanged() {
        let mut rng = SplitMix64::new(43);
        let dist = random_dist(3, 1, 4, &mut rng);
        let cond = dist.condition_on(0, 2).unwrap();
        assert_abs_diff_eq!(cond.log_weights()[0], 0.0, epsilon = 1e-12);
        for s in 1..3 {
            let before = dist.marginal_at(s).unwrap();
            let after = cond.marginal_at(s).unwrap();
            for token in 0..4 {
                assert_abs_diff_eq!(
                    after.log_probs()[token],
                    before.log_probs()[token],
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn conditioning_on_disjoint_point_masses_selects_one_expert() {
        let mut factors = Array3::zeros((2, 2, 4));
        for token in 0..4 {
            factors[[0, 0, token]] = if token == 0 { 700.0 } else { -700.0 };
            factors[[0, 1, token]] = if token == 1 { 700.0 } else { -700.0 };
        }
        let dist = CPJointDist::from_logits(&[0.0, 0.0], &factors).unwrap();
        let cond = dist.condition_on(0, 1).unwrap();
        assert!(
            cond.log_weights()[1].abs() < 1e-9,
            "expert 1 takes all mass"
        );
        assert!(cond.log_weights()[0] < -600.0);
    }

    #[test]
    fn conditioned_marginal_matches_tensor_slice() {
        let mut rng = SplitMix64::new(47);
        let dist = random_dist(3, 3, 5, &mut rng);
        let tensor = dist.materialize().unwrap();
        let observed = 4usize;
        let cond = dist.condition_on(0, observed).unwrap();
        let marginal = cond.marginal_at(1).unwrap();

        // Brute-force: slice at x_1 = observed, sum over x_3, renormalize.
        let mut slice = [0.0; 5];
        let mut total = 0.0;
        for (b, entry) in slice.iter_mut().enumerate() {
            for c in 0..5 {
                *entry += tensor[IxDyn(&[observed, b, c])];
            }
            total += *entry;
        }
        for (b, &mass) in slice.iter().enumerate() {
            assert_abs_diff_eq!(marginal.log_probs()[b].exp(), mass / total, epsilon = 1e-9);
        }
    }

    #[test]
    fn double_conditioning_is_rejected() {
        let dist = CPJointDist::from_logits(&[0.0], &Array3::zeros((2, 1, 3))).unwrap();
        let cond = dist.condition_on(1, 0).unwrap();
        assert!(matches!(
            cond.condition_on(1, 1),
            Err(Error::AlreadyConditioned(1))
        ));
        let both = cond.condition_on(0, 0).unwrap();
        assert!(matches!(
            both.first_token_marginal(),
            Err(Error::FullyConditioned)
        ));
    }

    #[test]
    fn conditioning_preserves_normalization_invariants() {
        let mut rng = SplitMix64::new(53);
        let mut dist = random_dist(3, 4, 5, &mut rng);
        for position in 0..3 {
            dist = dist.condition_on(position, rng.next_index(5)).unwrap();
            dist.check_invariants().unwrap();
        }
    }

    #[test]
    fn chain_rule_decomposition_matches_log_prob() {
        let mut rng = SplitMix64::new(59);
        for _ in 0..20 {
            let dist = random_dist(3, 3, 4, &mut rng);
            let tokens = [rng.next_index(4), rng.next_index(4), rng.next_index(4)];
            let joint = dist.log_prob(&tokens).unwrap();
            let mut chained = 0.0;
            let mut current = dist.clone();
            for (s, &token) in tokens.iter().enumerate() {
                chained += current.first_token_marginal().unwrap().log_probs()[token];
                current = current.condition_on(s, token).unwrap();
            }
            assert_abs_diff_eq!(joint, chained, epsilon = 1e-9);
        }
    }

    #[test]
    fn log_prob_stays_finite_near_the_clamp_floor() {
        // Factor probabilities down to exp(-700) must not overflow to -inf/NaN.
        let mut factors = Array3::zeros((2, 2, 3));
        for s in 0..2 {
            for alpha in 0..2 {
                factors[[s, alpha, 0]] = 700.0;
                factors[[s, alpha, 1]] = -700.0;
                factors[[s, alpha, 2]] = -700.0;
            }
        }
        let dist = CPJointDist::from_logits(&[0.0, 0.0], &factors).unwrap();
        let lp = dist.log_prob(&[1, 2]).unwrap();
        assert!(lp.is_finite(), "log_prob must stay finite, got {lp}");
        assert!(lp < -1000.0);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn dims() -> impl Strategy<Value = (usize, usize, usize)> {
            (1usize..=3, 1usize..=4, 2usize..=5)
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn oracle_equivalence((n, r, v) in dims(), seed in 0u64..1_000) {
                let mut rng = SplitMix64::new(seed);
                let dist = random_dist(n, r, v, &mut rng);
                let tensor = dist.materialize().unwrap();
                let mut tokens = vec![0usize; n];
                loop {
                    let lp = dist.log_prob(&tokens).unwrap();
                    let brute = tensor[IxDyn(&tokens)];
                    prop_assert!((lp.exp() - brute).abs() <= 1e-9,
                        "exp(log_prob)={} vs tensor={}", lp.exp(), brute);
                    let mut axis = n;
                    let mut done = true;
                    while axis > 0 {
                        axis -= 1;
                        tokens[axis] += 1;
                        if tokens[axis] < v { done = false; break; }
                        tokens[axis] = 0;
                    }
                    if done { break; }
                }
            }

            #[test]
            fn conditioning_keeps_invariants((n, r, v) in dims(), seed in 0u64..1_000) {
                let mut rng = SplitMix64::new(seed);
                let mut dist = random_dist(n, r, v, &mut rng);
                for s in 0..n {
                    dist = dist.condition_on(s, rng.next_index(v)).unwrap();
                    prop_assert!(dist.check_invariants().is_ok());
                }
            }
        }
    }
}
