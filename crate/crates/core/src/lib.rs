//! Rank-r canonical polyadic (CP) joint-distribution head for multi-token
//! prediction.
//!
//! A next-`n`-token joint distribution is approximated as a mixture of `r`
//! rank-1 terms: Σ_α w_α Π_s P^(s)(x_{t+s} | α), with all probabilities kept
//! in log space. The crate covers the full pipeline at desk scale:
//!
//! - [`cp`]: the CP distribution itself — likelihood, marginals,
//!   conditioning, and a brute-force materialization oracle
//! - [`heads`]: linear heads mapping a context embedding to CP factors,
//!   in full (`W^(s)_α`) and reduced (`W · w^(s)_α`) parameterizations
//! - [`encoder`]: a small fixed causal encoder producing context embeddings
//! - [`training`]: joint NLL, expert-balancing and distillation losses with
//!   analytic gradients, plus the Adam training loop and checkpoints
//! - [`sampler`]: sequential factor-space sampling and static draft trees
//! - [`speculative`]: draft-and-verify self-speculative decoding
//! - [`corpus`]: synthetic Markov corpora with exact entropy oracles and
//!   character-level text ingestion

pub mod corpus;
pub mod cp;
pub mod encoder;
pub mod error;
pub mod heads;
pub mod instrument;
pub mod math;
pub mod model;
pub mod rng;
pub mod sampler;
pub mod speculative;
pub mod training;

pub use cp::{CPJointDist, LogDistribution};
pub use encoder::{Embedding, EncoderParams, EncoderState};
pub use error::{Error, Result};
pub use heads::{FullHeadParams, ReducedHeadParams};
pub use model::{Mode, Model};
pub use rng::SplitMix64;
pub use speculative::SpecDecodeStats;
pub use training::{BalanceStats, TrainConfig, TrainMetrics};
