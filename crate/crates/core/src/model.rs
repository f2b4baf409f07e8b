//! A complete draft/base model pair: encoder, head, and training mode.
//!
//! In `Scratch` mode the base (verification) model is the first head's
//! mixture marginal — exactly the distribution the draft's first token is
//! sampled from. In `Finetune` mode the base model is the frozen shared head
//! W, and only adapters and the gate train.

use ndarray::Array1;

use crate::cp::{CPJointDist, LogDistribution};
use crate::encoder::{encode_last, Embedding, EncoderParams, EncoderState};
use crate::error::{Error, Result};
use crate::heads::{forward_full, forward_reduced, FullHeadParams, ReducedHeadParams};
use crate::math::log_softmax;
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Scratch,
    Finetune,
}

#[derive(Debug, Clone)]
pub enum HeadParams {
    Full(FullHeadParams),
    Reduced(ReducedHeadParams),
}

#[derive(Debug, Clone)]
pub struct Model {
    pub encoder: EncoderParams,
    pub head: HeadParams,
    pub mode: Mode,
}

impl Model {
    /// Fresh scratch-mode model: trainable encoder plus a full head.
    pub fn init_scratch(
        vocab: usize,
        embed_dim: usize,
        horizon: usize,
        rank: usize,
        decay: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = SplitMix64::new(seed).derive(0x6d6f64656c);
        let encoder = EncoderParams::init(vocab, embed_dim, decay, &mut rng)?;
        let head = FullHeadParams::init(horizon, rank, vocab, embed_dim, &mut rng);
        Ok(Self {
            encoder,
            head: HeadParams::Full(head),
            mode: Mode::Scratch,
        })
    }

    /// Finetune-mode model derived from a pretrained scratch model.
    ///
    /// The base must be a rank-1 scratch model; its first-position factor
    /// matrix becomes the frozen shared head W and its encoder is frozen.
    /// Adapters start at the identity so the draft head initially reproduces
    /// the base head at every position.
    pub fn init_finetune(base: &Model, rank: usize, identity_adapters: bool) -> Result<Self> {
        let full = match &base.head {
            HeadParams::Full(full) if full.rank == 1 => full,
            HeadParams::Full(full) => {
                return Err(Error::InvalidArgument(format!(
                    "finetune base must be a rank-1 scratch model, got rank {}",
                    full.rank
                )))
            }
            HeadParams::Reduced(_) => {
                return Err(Error::InvalidArgument(
                    "finetune base must be a scratch model".into(),
                ))
            }
        };
        let shared = full.factor_weights[0][0].clone();
        let mut rng = SplitMix64::new(0x66742d696e6974);
        let mut encoder = base.encoder.clone();
        encoder.trainable = false;
        let head = ReducedHeadParams::init(shared, full.horizon, rank, identity_adapters, &mut rng);
        Ok(Self {
            encoder,
            head: HeadParams::Reduced(head),
            mode: Mode::Finetune,
        })
    }

    pub fn vocab(&self) -> usize {
        self.encoder.vocab()
    }

    pub fn embed_dim(&self) -> usize {
        self.encoder.embed_dim()
    }

    pub fn horizon(&self) -> usize {
        match &self.head {
            HeadParams::Full(h) => h.horizon,
            HeadParams::Reduced(h) => h.horizon,
        }
    }

    pub fn rank(&self) -> usize {
        match &self.head {
            HeadParams::Full(h) => h.rank,
            HeadParams::Reduced(h) => h.rank,
        }
    }

    /// CP joint distribution of the next `horizon` tokens at embedding `e`.
    pub fn forward(&self, e: &Embedding) -> Result<CPJointDist> {
        match &self.head {
            HeadParams::Full(h) => forward_full(h, e),
            HeadParams::Reduced(h) => forward_reduced(h, e),
        }
    }

    /// The base (verification) model's next-token distribution at `e`.
    ///
    /// Scratch mode: the first head's mixture marginal, which after training
    /// behaves like a single linear head. Finetune mode: log-softmax of the
    /// frozen shared head's logits.
    pub fn base_next_token_dist(&self, e: &Embedding) -> Result<LogDistribution> {
        match (&self.mode, &self.head) {
            (Mode::Scratch, _) => self.forward(e)?.first_token_marginal(),
            (Mode::Finetune, HeadParams::Reduced(h)) => {
                let logits: Array1<f64> = h.shared_head.dot(e.values());
                LogDistribution::from_log_probs(log_softmax(logits.as_slice().unwrap()))
            }
            (Mode::Finetune, HeadParams::Full(_)) => Err(Error::InvalidArgument(
                "finetune mode requires a reduced head".into(),
            )),
        }
    }

    /// Encoder state after consuming `tokens`.
    pub fn encode_prompt(&self, tokens: &[usize]) -> Result<(EncoderState, Embedding)> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("empty prompt".into()));
        }
        let mut state = EncoderState::new(self.embed_dim());
        let mut last = None;
        for &token in tokens {
            last = Some(state.step(&self.encoder, token)?);
        }
        Ok((state, last.expect("non-empty")))
    }

    /// Embedding of the last position of `tokens`.
    pub fn embed_last(&self, tokens: &[usize]) -> Result<Embedding> {
        encode_last(&self.encoder, tokens)
    }
}
