//! Sequential sampling from a CP joint distribution, and static draft trees.
//!
//! Sampling is autoregressive but works entirely on the factors: at each
//! remaining position take the mixture marginal, apply temperature, draw a
//! token, then condition the distribution on it. At temperature 1 this is an
//! exact sampler for the joint (chain rule); at temperature 0 it is greedy
//! with lowest-index tie-breaks. One full draw costs O(n·r·V) — the encoder
//! is never re-invoked.
//!
//! Random draws per operation: `sample_sequence` consumes exactly one u64 per
//! remaining position (the inverse-CDF draw), in position order.

use crate::cp::{CPJointDist, LogDistribution};
use crate::error::{Error, Result};
use crate::instrument;
use crate::math::log_normalize;
use crate::rng::SplitMix64;

#[derive(Debug, Clone)]
pub struct SampleConfig {
    /// Softmax temperature; 0 means greedy argmax.
    pub temperature: f64,
    pub seed: u64,
    /// Per-level branching factors for draft trees.
    pub branching: Option<Vec<usize>>,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            seed: 0,
            branching: None,
        }
    }
}

/// Temperature-scaled copy of a distribution. T=1 returns the input
/// unchanged; T=0 is handled by callers via argmax.
pub fn apply_temperature(dist: &LogDistribution, temperature: f64) -> Result<LogDistribution> {
    if temperature < 0.0 || !temperature.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "temperature must be finite and non-negative, got {temperature}"
        )));
    }
    if temperature == 1.0 {
        return Ok(dist.clone());
    }
    if temperature == 0.0 {
        return Err(Error::InvalidArgument(
            "temperature 0 has no distribution; use argmax".into(),
        ));
    }
    let scaled: Vec<f64> = dist.log_probs().iter().map(|x| x / temperature).collect();
    LogDistribution::from_log_probs(log_normalize(&scaled))
}

/// Inverse-CDF draw over token indices in ascending order; one u64 consumed.
pub fn draw(dist: &LogDistribution, rng: &mut SplitMix64) -> usize {
    let u = rng.next_f64();
    let mut cum = 0.0;
    instrument::add(dist.vocab() as u64);
    for (token, &lp) in dist.log_probs().iter().enumerate() {
        cum += lp.exp();
        if u < cum {
            return token;
        }
    }
    dist.vocab() - 1
}

/// One token from a marginal under the configured temperature.
pub fn sample_token(
    marginal: &LogDistribution,
    temperature: f64,
    rng: &mut SplitMix64,
) -> Result<usize> {
    if temperature == 0.0 {
        return Ok(marginal.argmax());
    }
    let scaled = apply_temperature(marginal, temperature)?;
    Ok(draw(&scaled, rng))
}

/// Draw one token per remaining position by marginal → temperature →
/// condition, in position order.
pub fn sample_sequence_with(
    dist: &CPJointDist,
    temperature: f64,
    rng: &mut SplitMix64,
) -> Result<Vec<usize>> {
    let mut current = dist.clone();
    let mut out = Vec::with_capacity(current.remaining_positions().len());
    for position in dist.remaining_positions() {
        let marginal = current.marginal_at(position)?;
        let token = sample_token(&marginal, temperature, rng)?;
        out.push(token);
        current = current.condition_on(position, token)?;
    }
    Ok(out)
}

/// [`sample_sequence_with`] seeded from the config.
pub fn sample_sequence(dist: &CPJointDist, config: &SampleConfig) -> Result<Vec<usize>> {
    let mut rng = SplitMix64::new(config.seed).derive(0x73616d706c65);
    sample_sequence_with(dist, config.temperature, &mut rng)
}

/// Deterministic greedy sequence (temperature 0).
pub fn greedy_sequence(dist: &CPJointDist) -> Result<Vec<usize>> {
    let mut rng = SplitMix64::new(0); // unused at T=0
    sample_sequence_with(dist, 0.0, &mut rng)
}

/// One node of a draft tree. `parent` indexes the previous level; the root is
/// implicit and carries no token.
#[derive(Debug, Clone)]
pub struct DraftNode {
    pub token: usize,
    pub parent: Option<usize>,
    /// log-probability of the whole path from the root to this node.
    pub cum_log_prob: f64,
}

/// Static draft tree: level s holds the candidate tokens for the s-th drafted
/// position, expanded by conditional top-k along each path.
#[derive(Debug, Clone)]
pub struct DraftTree {
    pub levels: Vec<Vec<DraftNode>>,
    pub branching: Vec<usize>,
}

impl DraftTree {
    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    /// Token path from the root to a node.
    pub fn path(&self, level: usize, index: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(level + 1);
        let mut at = (level, index);
        loop {
            let node = &self.levels[at.0][at.1];
            out.push(node.token);
            match node.parent {
                Some(p) if at.0 > 0 => at = (at.0 - 1, p),
                _ => break,
            }
        }
        out.reverse();
        out
    }

    /// Children of a node (or of the root when `of` is None).
    pub fn children(&self, level: usize, of: Option<usize>) -> Vec<usize> {
        self.levels[level]
            .iter()
            .enumerate()
            .filter(|(_, node)| node.parent == of)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Build a static draft tree: level s holds, for every node of level s-1, the
/// top-b_s tokens of the conditional marginal given that node's path.
///
/// Top-k ordering is by conditional probability, ties toward lower token ids.
pub fn build_draft_tree(dist: &CPJointDist, branching: &[usize]) -> Result<DraftTree> {
    let positions = dist.remaining_positions();
    if branching.is_empty() || branching.len() > positions.len() {
        return Err(Error::InvalidArgument(format!(
            "branching depth {} must be in [1, {}]",
            branching.len(),
            positions.len()
        )));
    }
    if let Some(&bad) = branching.iter().find(|&&b| b == 0 || b > dist.vocab()) {
        return Err(Error::InvalidArgument(format!(
            "branching factor {bad} out of range [1, {}]",
            dist.vocab()
        )));
    }

    let mut levels: Vec<Vec<DraftNode>> = Vec::with_capacity(branching.len());
    // Conditioned distribution and cumulative log-prob per frontier node.
    let mut frontier: Vec<(CPJointDist, f64)> = vec![(dist.clone(), 0.0)];
    for (depth, &b) in branching.iter().enumerate() {
        let position = positions[depth];
        let mut level = Vec::with_capacity(frontier.len() * b);
        let mut next_frontier = Vec::with_capacity(frontier.len() * b);
        for (parent_idx, (node_dist, cum)) in frontier.iter().enumerate() {
            let marginal = node_dist.marginal_at(position)?;
            for token in marginal.top_k(b) {
                let cum_log_prob = cum + marginal.log_probs()[token];
                level.push(DraftNode {
                    token,
                    parent: if depth == 0 { None } else { Some(parent_idx) },
                    cum_log_prob,
                });
                next_frontier.push((node_dist.condition_on(position, token)?, cum_log_prob));
            }
        }
        levels.push(level);
        frontier = next_frontier;
    }
    Ok(DraftTree {
        levels,
        branching: branching.to_vec(),
    })
}
