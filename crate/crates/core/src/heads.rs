//! Linear heads mapping a context embedding to a CP joint distribution.
//!
//! The full head keeps one V×E matrix per (position, expert) plus an r×E
//! gating matrix; factor logits are W^(s)_α·e and gate logits W_h·e, both
//! normalized by [`CPJointDist::from_logits`]. The reduced head used for
//! fine-tuning shares a frozen V×E output matrix W and composes it with small
//! E×E adapters: W^(s)_α = W·w^(s)_α, evaluated adapter-first so the V×E
//! product is never formed.

use ndarray::{Array1, Array2, Array3};

use crate::cp::CPJointDist;
use crate::encoder::Embedding;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Full tensor head: independent factor matrices per position and expert.
#[derive(Debug, Clone)]
pub struct FullHeadParams {
    /// `factor_weights[s][α]` is the V×E matrix for position s, expert α.
    pub factor_weights: Vec<Vec<Array2<f64>>>,
    /// r×E gating matrix.
    pub gate_weights: Array2<f64>,
    pub horizon: usize,
    pub rank: usize,
    pub vocab: usize,
    pub embed_dim: usize,
}

impl FullHeadParams {
    /// Uniform(-1/√E, 1/√E) initialization for all matrices.
    pub fn init(
        horizon: usize,
        rank: usize,
        vocab: usize,
        embed_dim: usize,
        rng: &mut SplitMix64,
    ) -> Self {
        let bound = 1.0 / (embed_dim as f64).sqrt();
        let mut draw = |rows: usize| {
            Array2::from_shape_fn((rows, embed_dim), |_| rng.next_range(-bound, bound))
        };
        let factor_weights = (0..horizon)
            .map(|_| (0..rank).map(|_| draw(vocab)).collect())
            .collect();
        let gate_weights = draw(rank);
        Self {
            factor_weights,
            gate_weights,
            horizon,
            rank,
            vocab,
            embed_dim,
        }
    }

    pub fn check_dims(&self) -> Result<()> {
        if self.factor_weights.len() != self.horizon {
            return Err(Error::DimensionMismatch("factor rows vs horizon".into()));
        }
        for per_alpha in &self.factor_weights {
            if per_alpha.len() != self.rank {
                return Err(Error::DimensionMismatch("factor cols vs rank".into()));
            }
            for w in per_alpha {
                if w.dim() != (self.vocab, self.embed_dim) {
                    return Err(Error::DimensionMismatch(format!(
                        "factor matrix is {:?}, expected ({}, {})",
                        w.dim(),
                        self.vocab,
                        self.embed_dim
                    )));
                }
            }
        }
        if self.gate_weights.dim() != (self.rank, self.embed_dim) {
            return Err(Error::DimensionMismatch("gate matrix shape".into()));
        }
        Ok(())
    }
}

/// Reduced fine-tuning head: frozen shared W plus E×E adapters.
#[derive(Debug, Clone)]
pub struct ReducedHeadParams {
    /// Frozen V×E shared output matrix.
    pub shared_head: Array2<f64>,
    /// `adapters[s][α]` is the E×E adapter for position s, expert α.
    pub adapters: Vec<Vec<Array2<f64>>>,
    /// r×E gating matrix.
    pub gate_weights: Array2<f64>,
    pub horizon: usize,
    pub rank: usize,
    pub vocab: usize,
    pub embed_dim: usize,
}

impl ReducedHeadParams {
    /// Build around a frozen shared head. With `identity_adapters` every
    /// factor starts exactly at the pretrained head's logits (warm start);
    /// otherwise adapters draw from uniform(-1/√E, 1/√E).
    pub fn init(
        shared_head: Array2<f64>,
        horizon: usize,
        rank: usize,
        identity_adapters: bool,
        rng: &mut SplitMix64,
    ) -> Self {
        let (vocab, embed_dim) = shared_head.dim();
        let bound = 1.0 / (embed_dim as f64).sqrt();
        let adapters = (0..horizon)
            .map(|_| {
                (0..rank)
                    .map(|_| {
                        if identity_adapters {
                            Array2::eye(embed_dim)
                        } else {
                            Array2::from_shape_fn((embed_dim, embed_dim), |_| {
                                rng.next_range(-bound, bound)
                            })
                        }
                    })
                    .collect()
            })
            .collect();
        let gate_weights =
            Array2::from_shape_fn((rank, embed_dim), |_| rng.next_range(-bound, bound));
        Self {
            shared_head,
            adapters,
            gate_weights,
            horizon,
            rank,
            vocab,
            embed_dim,
        }
    }

    /// Explicitly composed full head with W^(s)_α = W·w^(s)_α. Used as the
    /// equivalence oracle for [`forward_reduced`]; the forward path itself
    /// never builds these matrices.
    pub fn compose(&self) -> FullHeadParams {
        let factor_weights = self
            .adapters
            .iter()
            .map(|per_alpha| {
                per_alpha
                    .iter()
                    .map(|adapter| self.shared_head.dot(adapter))
                    .collect()
            })
            .collect();
        FullHeadParams {
            factor_weights,
            gate_weights: self.gate_weights.clone(),
            horizon: self.horizon,
            rank: self.rank,
            vocab: self.vocab,
            embed_dim: self.embed_dim,
        }
    }
}

fn check_embedding(dim: usize, e: &Embedding) -> Result<()> {
    if e.dim() != dim {
        return Err(Error::DimensionMismatch(format!(
            "embedding has length {}, head expects {}",
            e.dim(),
            dim
        )));
    }
    Ok(())
}

/// Full-head forward pass: factor logits W^(s)_α·e, gate logits W_h·e.
pub fn forward_full(params: &FullHeadParams, e: &Embedding) -> Result<CPJointDist> {
    check_embedding(params.embed_dim, e)?;
    let gate_logits = params.gate_weights.dot(e.values());
    let mut factor_logits = Array3::zeros((params.horizon, params.rank, params.vocab));
    for (s, per_alpha) in params.factor_weights.iter().enumerate() {
        for (alpha, w) in per_alpha.iter().enumerate() {
            let logits: Array1<f64> = w.dot(e.values());
            factor_logits
                .slice_mut(ndarray::s![s, alpha, ..])
                .assign(&logits);
        }
    }
    CPJointDist::from_logits(gate_logits.as_slice().unwrap(), &factor_logits)
}

/// Reduced-head forward pass. Computes w^(s)_α·e first (E×E matvec), then
/// W·(…), so per expert the cost is O(E² + V·E) and the composed V×E matrix
/// never exists.
pub fn forward_reduced(params: &ReducedHeadParams, e: &Embedding) -> Result<CPJointDist> {
    check_embedding(params.embed_dim, e)?;
    let gate_logits = params.gate_weights.dot(e.values());
    let mut factor_logits = Array3::zeros((params.horizon, params.rank, params.vocab));
    for (s, per_alpha) in params.adapters.iter().enumerate() {
        for (alpha, adapter) in per_alpha.iter().enumerate() {
            let adapted: Array1<f64> = adapter.dot(e.values());
            let logits: Array1<f64> = params.shared_head.dot(&adapted);
            factor_logits
                .slice_mut(ndarray::s![s, alpha, ..])
                .assign(&logits);
        }
    }
    CPJointDist::from_logits(gate_logits.as_slice().unwrap(), &factor_logits)
}
