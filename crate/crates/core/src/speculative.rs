//! Self-speculative decoding: draft n tokens from the CP head, verify against
//! the base (first-token) model, accept the longest valid prefix plus one
//! bonus token.
//!
//! The first drafted token is always taken from the base model's own
//! distribution — in scratch mode that distribution *is* the CP head's first
//! marginal, so this is exactly greedy/ancestral drafting from the head; in
//! finetune mode it is the frozen shared head. Either way the first token is
//! always accepted and every step emits at least two tokens (accepted prefix
//! plus bonus), while greedy output stays bit-identical to base-only greedy
//! decoding.
//!
//! Base-model evaluations inside a step reuse incremental encoder states (the
//! desk-scale analogue of KV caching).

use std::time::Instant;

use serde::Serialize;

use crate::cp::LogDistribution;
use crate::encoder::{Embedding, EncoderState};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::SplitMix64;
use crate::sampler::{apply_temperature, build_draft_tree, draw};

/// Per-run acceptance and timing statistics.
#[derive(Debug, Clone, Serialize)]
pub struct SpecDecodeStats {
    pub steps: usize,
    /// Σ (accepted_s + 1); the returned sequence may be truncated below this
    /// when the last step overshoots `max_tokens`.
    pub tokens_emitted: usize,
    pub accepted_per_step: Vec<usize>,
    pub avg_accepted: f64,
    pub wall_ms_total: f64,
    /// Wall-clock per emitted token, excluding the warmup (first) step when
    /// more than one step ran.
    pub wall_ms_per_token: f64,
}

impl SpecDecodeStats {
    fn from_steps(accepted_per_step: Vec<usize>, durations_ms: &[f64]) -> Self {
        let steps = accepted_per_step.len();
        let tokens_emitted: usize = accepted_per_step.iter().map(|a| a + 1).sum();
        let avg_accepted = if steps == 0 {
            0.0
        } else {
            accepted_per_step.iter().sum::<usize>() as f64 / steps as f64
        };
        let wall_ms_total: f64 = durations_ms.iter().sum();
        let wall_ms_per_token = if steps > 1 {
            let warm_ms: f64 = durations_ms[1..].iter().sum();
            let warm_tokens: usize = accepted_per_step[1..].iter().map(|a| a + 1).sum();
            warm_ms / warm_tokens.max(1) as f64
        } else if tokens_emitted > 0 {
            wall_ms_total / tokens_emitted as f64
        } else {
            0.0
        };
        Self {
            steps,
            tokens_emitted,
            accepted_per_step,
            avg_accepted,
            wall_ms_total,
            wall_ms_per_token,
        }
    }
}

/// Growing generation context: tokens plus the incremental encoder state.
#[derive(Debug, Clone)]
pub struct GenState {
    tokens: Vec<usize>,
    enc: EncoderState,
    last: Embedding,
}

impl GenState {
    pub fn from_prompt(model: &Model, prompt: &[usize]) -> Result<Self> {
        if prompt.is_empty() {
            return Err(Error::InvalidArgument("empty prompt".into()));
        }
        let (enc, last) = model.encode_prompt(prompt)?;
        Ok(Self {
            tokens: prompt.to_vec(),
            enc,
            last,
        })
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn push(&mut self, model: &Model, token: usize) -> Result<()> {
        self.last = self.enc.step(&model.encoder, token)?;
        self.tokens.push(token);
        Ok(())
    }

    fn last_embedding(&self) -> &Embedding {
        &self.last
    }
}

/// Outcome of one draft-and-verify step.
#[derive(Debug, Clone)]
pub struct StepResult {
    /// Accepted draft tokens followed by the bonus token.
    pub emitted: Vec<usize>,
    /// Number of accepted draft tokens, in [1, n].
    pub accepted_draft: usize,
}

fn base_argmax(model: &Model, e: &Embedding) -> Result<usize> {
    Ok(model.base_next_token_dist(e)?.argmax())
}

/// One greedy speculative step.
///
/// Draft: the base model's greedy token, then greedy tokens from the CP
/// distribution conditioned on it. Verify: walk the base model's greedy chain
/// along the draft; the longest common prefix (always ≥ 1) is accepted and
/// the base token at the first divergence is appended as the bonus.
pub fn spec_step_greedy(model: &Model, state: &mut GenState) -> Result<StepResult> {
    let n = model.horizon();
    let e = state.last_embedding();

    // Draft pass: one head forward, then factor-space conditioning only.
    let first = base_argmax(model, e)?;
    let mut draft = Vec::with_capacity(n);
    draft.push(first);
    let mut dist = model.forward(e)?;
    dist = dist.condition_on(0, first)?;
    for position in 1..n {
        let token = dist.marginal_at(position)?.argmax();
        draft.push(token);
        dist = dist.condition_on(position, token)?;
    }

    // Verify pass: base greedy chain over the draft prefix.
    let mut verify_enc = state.enc.clone();
    let mut accepted = 1usize;
    let mut bonus = None;
    for k in 1..n {
        let e_k = verify_enc.step(&model.encoder, draft[k - 1])?;
        let base_token = base_argmax(model, &e_k)?;
        if base_token == draft[k] {
            accepted += 1;
        } else {
            bonus = Some(base_token);
            break;
        }
    }
    let bonus = match bonus {
        Some(token) => token,
        None => {
            let e_n = verify_enc.step(&model.encoder, draft[n - 1])?;
            base_argmax(model, &e_n)?
        }
    };

    let mut emitted = draft[..accepted].to_vec();
    emitted.push(bonus);
    for &token in &emitted {
        state.push(model, token)?;
    }
    Ok(StepResult {
        emitted,
        accepted_draft: accepted,
    })
}

/// One stochastic speculative step (temperature > 0), lossless in
/// distribution: the emitted tokens follow the base model's ancestral
/// sampling distribution at the same temperature.
///
/// Random draws, in order: one for the first (base-sampled) draft token, one
/// per draft token at positions 2..n, then per verified position one
/// accept/reject uniform, and finally either one residual draw (on the first
/// rejection) or one bonus draw (after full acceptance).
pub fn spec_step_stochastic(
    model: &Model,
    state: &mut GenState,
    temperature: f64,
    rng: &mut SplitMix64,
) -> Result<StepResult> {
    if temperature <= 0.0 {
        return Err(Error::InvalidArgument(
            "stochastic step needs temperature > 0; use spec_step_greedy".into(),
        ));
    }
    let n = model.horizon();
    let e = state.last_embedding();

    // Draft pass.
    let base_first = apply_temperature(&model.base_next_token_dist(e)?, temperature)?;
    let first = draw(&base_first, rng);
    let mut draft = vec![first];
    let mut draft_dists: Vec<LogDistribution> = Vec::with_capacity(n);
    draft_dists.push(base_first);
    let mut dist = model.forward(e)?.condition_on(0, first)?;
    for position in 1..n {
        let marginal = apply_temperature(&dist.marginal_at(position)?, temperature)?;
        let token = draw(&marginal, rng);
        draft.push(token);
        draft_dists.push(marginal);
        dist = dist.condition_on(position, token)?;
    }

    // Verify pass: position 1 is a base sample by construction.
    let mut verify_enc = state.enc.clone();
    let mut accepted = 1usize;
    let mut correction = None;
    for k in 1..n {
        let e_k = verify_enc.step(&model.encoder, draft[k - 1])?;
        let p_base = apply_temperature(&model.base_next_token_dist(&e_k)?, temperature)?;
        let p_draft = &draft_dists[k];
        let ratio = (p_base.log_probs()[draft[k]] - p_draft.log_probs()[draft[k]]).exp();
        if rng.next_f64() < ratio.min(1.0) {
            accepted += 1;
            continue;
        }
        correction = Some(residual_sample(&p_base, p_draft, rng));
        break;
    }
    let bonus = match correction {
        Some(token) => token,
        None => {
            let e_n = verify_enc.step(&model.encoder, draft[n - 1])?;
            let p_base = apply_temperature(&model.base_next_token_dist(&e_n)?, temperature)?;
            draw(&p_base, rng)
        }
    };

    let mut emitted = draft[..accepted].to_vec();
    emitted.push(bonus);
    for &token in &emitted {
        state.push(model, token)?;
    }
    Ok(StepResult {
        emitted,
        accepted_draft: accepted,
    })
}

/// Sample from normalize(max(0, p_base - p_draft)); falls back to the base
/// distribution when the residual carries no mass (identical distributions).
fn residual_sample(
    p_base: &LogDistribution,
    p_draft: &LogDistribution,
    rng: &mut SplitMix64,
) -> usize {
    let residual: Vec<f64> = p_base
        .log_probs()
        .iter()
        .zip(p_draft.log_probs())
        .map(|(&b, &d)| (b.exp() - d.exp()).max(0.0))
        .collect();
    let mass: f64 = residual.iter().sum();
    if mass <= 0.0 {
        return draw(p_base, rng);
    }
    let u = rng.next_f64() * mass;
    let mut cum = 0.0;
    for (token, &p) in residual.iter().enumerate() {
        cum += p;
        if u < cum {
            return token;
        }
    }
    residual.len() - 1
}

/// One greedy step verified against a static draft tree.
///
/// The tree is built from the CP distribution by conditional top-k expansion.
/// A root-to-leaf path can only be fully accepted if every token equals the
/// base model's greedy continuation, so verifying all paths independently is
/// equivalent to walking the base greedy chain down the tree; shared prefixes
/// reuse one incremental encoder state per depth. The first token is the base
/// model's greedy token (always accepted); deeper levels accept while the
/// chain stays inside the tree.
pub fn spec_step_tree(
    model: &Model,
    state: &mut GenState,
    branching: &[usize],
) -> Result<StepResult> {
    let e = state.last_embedding();
    let first = base_argmax(model, e)?;
    let dist = model.forward(e)?;
    let tree = build_draft_tree(&dist, branching)?;

    let mut verify_enc = state.enc.clone();
    let mut emitted = vec![first];
    let mut accepted = 1usize;

    // Walk the base greedy chain down the tree. A fully matching path must
    // follow this chain, so the walk finds the deepest matching path; the
    // first chain token outside the tree is the bonus.
    let mut node = tree.levels[0]
        .iter()
        .position(|candidate| candidate.token == first);
    let mut frontier_token = first;
    let bonus = loop {
        let e_k = verify_enc.step(&model.encoder, frontier_token)?;
        let next_base = base_argmax(model, &e_k)?;
        let next_node = match node {
            Some(idx) if accepted < tree.depth() => tree
                .children(accepted, Some(idx))
                .into_iter()
                .find(|&child| tree.levels[accepted][child].token == next_base),
            _ => None,
        };
        match next_node {
            Some(child) => {
                emitted.push(next_base);
                frontier_token = next_base;
                accepted += 1;
                node = Some(child);
            }
            None => break next_base,
        }
    };
    emitted.push(bonus);

    for &token in &emitted {
        state.push(model, token)?;
    }
    Ok(StepResult {
        emitted,
        accepted_draft: accepted,
    })
}

#[derive(Debug, Clone)]
pub enum DecodeMode {
    Greedy,
    Stochastic { temperature: f64 },
    Tree { branching: Vec<usize> },
}

/// Run speculative steps until at least `max_tokens` new tokens exist, then
/// truncate to exactly `max_tokens`. Returns the full sequence including the
/// prompt. Greedy and tree modes are bit-identical to base-only greedy
/// decoding; stochastic mode matches it in distribution.
pub fn generate(
    model: &Model,
    prompt: &[usize],
    max_tokens: usize,
    mode: &DecodeMode,
    seed: u64,
) -> Result<(Vec<usize>, SpecDecodeStats)> {
    let mut state = GenState::from_prompt(model, prompt)?;
    let mut rng = SplitMix64::new(seed).derive(0x73706563);
    let mut accepted_per_step = Vec::new();
    let mut durations = Vec::new();
    let mut produced = 0usize;
    while produced < max_tokens {
        let start = Instant::now();
        let step = match mode {
            DecodeMode::Greedy => spec_step_greedy(model, &mut state)?,
            DecodeMode::Stochastic { temperature } => {
                spec_step_stochastic(model, &mut state, *temperature, &mut rng)?
            }
            DecodeMode::Tree { branching } => spec_step_tree(model, &mut state, branching)?,
        };
        durations.push(start.elapsed().as_secs_f64() * 1e3);
        produced += step.emitted.len();
        accepted_per_step.push(step.accepted_draft);
    }
    let stats = SpecDecodeStats::from_steps(accepted_per_step, &durations);
    let mut tokens = state.tokens().to_vec();
    tokens.truncate(prompt.len() + max_tokens);
    Ok((tokens, stats))
}

/// Base-model-only greedy decoding; the oracle for losslessness checks.
pub fn base_greedy_decode(
    model: &Model,
    prompt: &[usize],
    max_tokens: usize,
) -> Result<Vec<usize>> {
    let mut state = GenState::from_prompt(model, prompt)?;
    for _ in 0..max_tokens {
        let token = base_argmax(model, state.last_embedding())?;
        state.push(model, token)?;
    }
    Ok(state.tokens().to_vec())
}

/// Base-model-only ancestral sampling at a temperature; the oracle for
/// stochastic losslessness checks. Consumes one draw per token.
pub fn base_sample_decode(
    model: &Model,
    prompt: &[usize],
    max_tokens: usize,
    temperature: f64,
    rng: &mut SplitMix64,
) -> Result<Vec<usize>> {
    let mut state = GenState::from_prompt(model, prompt)?;
    for _ in 0..max_tokens {
        let dist = apply_temperature(
            &model.base_next_token_dist(state.last_embedding())?,
            temperature,
        )?;
        let token = draw(&dist, rng);
        state.push(model, token)?;
    }
    Ok(state.tokens().to_vec())
}
