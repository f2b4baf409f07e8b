//! Synthetic and text corpora with exact distribution oracles.
//!
//! Synthetic streams come from order-k Markov chains whose generating spec is
//! retained, so tests can compare trained models against the chain's exact
//! conditional entropy. Text ingestion is character-level with a vocabulary
//! built from a corpus scan, sorted by code point.
//!
//! Token file format: 8-byte magic `CPTOKS01`, u32 little-endian vocab size,
//! then the stream as u32 little-endian tokens.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

pub const TOKEN_FILE_MAGIC: &[u8; 8] = b"CPTOKS01";

/// Order-k Markov chain over `vocab` tokens.
///
/// Row `state` of `transitions` is the distribution of the next token given
/// the last k tokens; the state index packs those tokens big-endian (oldest
/// token in the highest digit): state = Σ_i x_{t-k+1+i} · V^(k-1-i).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarkovSpec {
    pub order: usize,
    pub vocab: usize,
    pub transitions: Vec<Vec<f64>>,
    pub seed: u64,
}

impl MarkovSpec {
    pub fn new(order: usize, vocab: usize, transitions: Vec<Vec<f64>>, seed: u64) -> Result<Self> {
        if order == 0 || vocab == 0 {
            return Err(Error::InvalidArgument(
                "order and vocab must be positive".into(),
            ));
        }
        let states = vocab.pow(order as u32);
        if transitions.len() != states {
            return Err(Error::DimensionMismatch(format!(
                "{} transition rows for {} states",
                transitions.len(),
                states
            )));
        }
        for (state, row) in transitions.iter().enumerate() {
            if row.len() != vocab {
                return Err(Error::DimensionMismatch(format!(
                    "row {state} has {} entries, expected {vocab}",
                    row.len()
                )));
            }
            let total: f64 = row.iter().sum();
            if row.iter().any(|&p| !(0.0..=1.0 + 1e-12).contains(&p)) || (total - 1.0).abs() > 1e-12
            {
                return Err(Error::InvalidArgument(format!(
                    "row {state} is not a distribution (sum {total})"
                )));
            }
        }
        Ok(Self {
            order,
            vocab,
            transitions,
            seed,
        })
    }

    /// IID-uniform chain: every row is uniform.
    pub fn uniform(vocab: usize, seed: u64) -> Result<Self> {
        let row = vec![1.0 / vocab as f64; vocab];
        Self::new(1, vocab, vec![row; vocab], seed)
    }

    /// Deterministic cycle: token x is always followed by (x+1) mod V.
    pub fn cycle(vocab: usize, seed: u64) -> Result<Self> {
        let transitions = (0..vocab)
            .map(|state| {
                let mut row = vec![0.0; vocab];
                row[(state + 1) % vocab] = 1.0;
                row
            })
            .collect();
        Self::new(1, vocab, transitions, seed)
    }

    /// Random order-1 chain with Dirichlet(1)-like rows.
    pub fn random(vocab: usize, seed: u64) -> Result<Self> {
        let mut rng = SplitMix64::new(seed).derive(0x636861696e);
        let transitions = (0..vocab)
            .map(|_| {
                let raw: Vec<f64> = (0..vocab).map(|_| -(1.0 - rng.next_f64()).ln()).collect();
                let total: f64 = raw.iter().sum();
                raw.into_iter().map(|x| x / total).collect()
            })
            .collect();
        Self::new(1, vocab, transitions, seed)
    }

    /// Cluster-structured order-1 chain used for rank-separation experiments.
    ///
    /// Tokens split into `groups` clusters of equal size. From a token in
    /// cluster j, the next token's cluster is j + shift with probability
    /// `shift_weights[shift]`, and its slot within the cluster follows a
    /// geometric-like tilt ∝ exp(-within_tilt · slot). The two-token joint
    /// given the current token is then a mixture of exactly `groups` product
    /// distributions (one per next-token cluster), so a CP head needs rank
    /// `groups` to represent it exactly.
    pub fn grouped(
        vocab: usize,
        groups: usize,
        shift_weights: &[f64],
        within_tilt: f64,
        seed: u64,
    ) -> Result<Self> {
        if groups == 0 || !vocab.is_multiple_of(groups) {
            return Err(Error::InvalidArgument(format!(
                "vocab {vocab} must be a positive multiple of groups {groups}"
            )));
        }
        if shift_weights.len() != groups {
            return Err(Error::DimensionMismatch(format!(
                "{} shift weights for {groups} groups",
                shift_weights.len()
            )));
        }
        let wsum: f64 = shift_weights.iter().sum();
        if shift_weights.iter().any(|&w| w <= 0.0) || (wsum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(
                "shift weights must be positive and sum to 1".into(),
            ));
        }
        let cluster_size = vocab / groups;
        let tilt_raw: Vec<f64> = (0..cluster_size)
            .map(|slot| (-within_tilt * slot as f64).exp())
            .collect();
        let tilt_total: f64 = tilt_raw.iter().sum();
        let within: Vec<f64> = tilt_raw.into_iter().map(|x| x / tilt_total).collect();

        let transitions = (0..vocab)
            .map(|state| {
                let from_cluster = state / cluster_size;
                let mut row = vec![0.0; vocab];
                for (shift, &w) in shift_weights.iter().enumerate() {
                    let to_cluster = (from_cluster + shift) % groups;
                    for (slot, &u) in within.iter().enumerate() {
                        row[to_cluster * cluster_size + slot] = w * u;
                    }
                }
                // Exact renormalization against accumulated rounding.
                let total: f64 = row.iter().sum();
                for x in &mut row {
                    *x /= total;
                }
                row
            })
            .collect();
        Self::new(1, vocab, transitions, seed)
    }

    pub fn state_count(&self) -> usize {
        self.vocab.pow(self.order as u32)
    }

    fn push_state(&self, state: usize, token: usize) -> usize {
        (state * self.vocab + token) % self.state_count()
    }

    fn is_strongly_connected(&self) -> bool {
        let states = self.state_count();
        let forward = |start: usize, reversed: bool| -> usize {
            let mut seen = vec![false; states];
            let mut stack = vec![start];
            seen[start] = true;
            let mut count = 1;
            while let Some(s) = stack.pop() {
                for (next, visited) in seen.iter_mut().enumerate() {
                    let connected = if reversed {
                        self.edge(next, s)
                    } else {
                        self.edge(s, next)
                    };
                    if connected && !*visited {
                        *visited = true;
                        count += 1;
                        stack.push(next);
                    }
                }
            }
            count
        };
        forward(0, false) == states && forward(0, true) == states
    }

    fn edge(&self, from: usize, to: usize) -> bool {
        // State `to` is reachable from `from` in one step iff their digit
        // overlap matches and the appended token has positive probability.
        let token = to % self.vocab;
        self.push_state(from, token) == to && self.transitions[from][token] > 0.0
    }

    /// Stationary distribution over states, by power iteration on the lazy
    /// chain (P + I)/2. Lazification adds self-loops, so periodic (but
    /// irreducible) chains converge geometrically too, and the fixed point is
    /// unchanged.
    pub fn stationary(&self) -> Result<Vec<f64>> {
        if !self.is_strongly_connected() {
            return Err(Error::NonErgodic(
                "transition graph is not strongly connected".into(),
            ));
        }
        let states = self.state_count();
        let mut mu = vec![1.0 / states as f64; states];
        for _ in 0..200_000usize {
            let mut next = vec![0.0; states];
            for (s, &mass) in mu.iter().enumerate() {
                if mass == 0.0 {
                    continue;
                }
                next[s] += 0.5 * mass;
                for (token, &p) in self.transitions[s].iter().enumerate() {
                    if p > 0.0 {
                        next[self.push_state(s, token)] += 0.5 * mass * p;
                    }
                }
            }
            let diff: f64 = mu.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum();
            mu = next;
            if diff < 1e-15 {
                break;
            }
        }
        let residual = self.stationarity_residual(&mu);
        if residual < 1e-12 {
            Ok(mu)
        } else {
            Err(Error::NonErgodic(format!(
                "power iteration did not converge (residual {residual:e})"
            )))
        }
    }

    fn stationarity_residual(&self, mu: &[f64]) -> f64 {
        let states = self.state_count();
        let mut next = vec![0.0; states];
        for (s, &mass) in mu.iter().enumerate() {
            for (token, &p) in self.transitions[s].iter().enumerate() {
                if p > 0.0 {
                    next[self.push_state(s, token)] += mass * p;
                }
            }
        }
        mu.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum()
    }

    /// Entropy rate: expected -log P(next token | state) under stationarity.
    pub fn entropy_rate(&self) -> Result<f64> {
        let pi = self.stationary()?;
        Ok(self
            .transitions
            .iter()
            .zip(&pi)
            .map(|(row, &mass)| {
                mass * row
                    .iter()
                    .filter(|&&p| p > 0.0)
                    .map(|&p| -p * p.ln())
                    .sum::<f64>()
            })
            .sum())
    }

    /// Exact expected negative log joint probability of the next `horizon`
    /// tokens under stationarity. Conditioning on the full state makes each
    /// of the n steps contribute one entropy rate, so this is n·H.
    pub fn true_joint_nll(&self, horizon: usize) -> Result<f64> {
        Ok(self.entropy_rate()? * horizon as f64)
    }

    /// Next-token distribution at a given state.
    pub fn row(&self, state: usize) -> &[f64] {
        &self.transitions[state]
    }
}

/// Tokenized stream plus train/validation split and, for synthetic data, the
/// exact generating chain.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub tokens: Vec<u32>,
    pub vocab: usize,
    /// Tokens `[0, split)` are training data, `[split, len)` validation.
    pub split: usize,
    pub markov: Option<MarkovSpec>,
    /// Windows never span across this token if set.
    pub boundary_token: Option<u32>,
}

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.9;

impl Corpus {
    pub fn from_tokens(tokens: Vec<u32>, vocab: usize, train_fraction: f64) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("empty token stream".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::TokenOutOfRange {
                token: bad as usize,
                vocab,
            });
        }
        if !(0.0..=1.0).contains(&train_fraction) {
            return Err(Error::InvalidArgument(
                "train fraction must be in [0, 1]".into(),
            ));
        }
        let split = (((tokens.len() as f64) * train_fraction).round() as usize).min(tokens.len());
        Ok(Self {
            tokens,
            vocab,
            split,
            markov: None,
            boundary_token: None,
        })
    }

    pub fn train_tokens(&self) -> &[u32] {
        &self.tokens[..self.split]
    }

    pub fn val_tokens(&self) -> &[u32] {
        &self.tokens[self.split..]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        file.write_all(TOKEN_FILE_MAGIC)?;
        file.write_u32::<LittleEndian>(self.vocab as u32)?;
        for &t in &self.tokens {
            file.write_u32::<LittleEndian>(t)?;
        }
        Ok(())
    }

    pub fn load(path: &Path, train_fraction: f64) -> Result<Self> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        file.read_exact(&mut magic)?;
        if &magic != TOKEN_FILE_MAGIC {
            return Err(Error::CorpusFormat(format!(
                "bad magic {magic:?}, expected {TOKEN_FILE_MAGIC:?}"
            )));
        }
        let vocab = file.read_u32::<LittleEndian>()? as usize;
        let mut tokens = Vec::new();
        loop {
            match file.read_u32::<LittleEndian>() {
                Ok(t) => tokens.push(t),
                Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
                Err(e) => return Err(e.into()),
            }
        }
        Self::from_tokens(tokens, vocab, train_fraction)
    }
}

/// Sample `length` tokens from the chain, starting from a state drawn from
/// the stationary distribution. The generating spec is retained for entropy
/// oracles.
pub fn generate_markov(spec: &MarkovSpec, length: usize, train_fraction: f64) -> Result<Corpus> {
    if length <= spec.order {
        return Err(Error::InvalidArgument(format!(
            "length {length} must exceed order {}",
            spec.order
        )));
    }
    let pi = spec.stationary()?;
    let mut rng = SplitMix64::new(spec.seed).derive(0x67656e);

    let mut state = sample_index(&pi, &mut rng);
    // Emit the state's k tokens first so the stream starts stationary.
    let mut tokens: Vec<u32> = Vec::with_capacity(length);
    let mut digits = vec![0usize; spec.order];
    let mut s = state;
    for d in (0..spec.order).rev() {
        digits[d] = s % spec.vocab;
        s /= spec.vocab;
    }
    tokens.extend(digits.iter().map(|&d| d as u32));
    while tokens.len() < length {
        let token = sample_index(spec.row(state), &mut rng);
        tokens.push(token as u32);
        state = spec.push_state(state, token);
    }

    let mut corpus = Corpus::from_tokens(tokens, spec.vocab, train_fraction)?;
    corpus.markov = Some(spec.clone());
    Ok(corpus)
}

fn sample_index(probs: &[f64], rng: &mut SplitMix64) -> usize {
    let u = rng.next_f64();
    let mut cum = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return i;
        }
    }
    probs.len() - 1
}

/// One training example: context tokens and the next `horizon` targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Window {
    /// Start of the context span (inclusive).
    pub context_start: usize,
    /// End of the context span = start of the targets (exclusive).
    pub split_at: usize,
    pub horizon: usize,
}

impl Window {
    pub fn context<'a>(&self, tokens: &'a [u32]) -> &'a [u32] {
        &tokens[self.context_start..self.split_at]
    }

    pub fn targets<'a>(&self, tokens: &'a [u32]) -> &'a [u32] {
        &tokens[self.split_at..self.split_at + self.horizon]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// All valid windows in a split: context of up to `max_context` tokens
/// (at least one), followed by `horizon` targets, never crossing a document
/// boundary.
pub fn windows(corpus: &Corpus, split: Split, horizon: usize, max_context: usize) -> Vec<Window> {
    let (lo, hi) = match split {
        Split::Train => (0usize, corpus.split),
        Split::Val => (corpus.split, corpus.tokens.len()),
    };
    if max_context == 0 || horizon == 0 {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut last_boundary: Option<usize> = None;
    for i in lo..hi {
        if Some(corpus.tokens[i]) == corpus.boundary_token {
            last_boundary = Some(i);
            continue;
        }
        // i is a candidate split point: context ends at i, targets start at i.
        let mut context_start = i.saturating_sub(max_context).max(lo);
        if let Some(b) = last_boundary {
            context_start = context_start.max(b + 1);
        }
        if context_start >= i {
            continue;
        }
        if i + horizon > hi {
            continue;
        }
        let target_span = &corpus.tokens[i..i + horizon];
        if corpus
            .boundary_token
            .is_some_and(|b| target_span.contains(&b))
        {
            continue;
        }
        out.push(Window {
            context_start,
            split_at: i,
            horizon,
        });
    }
    out
}

/// Deterministic shuffled batch stream over the training split. Batches cycle
/// forever; each pass reshuffles with a seed derived from the pass index.
pub struct BatchIter {
    order: Vec<usize>,
    windows: Vec<Window>,
    batch_size: usize,
    cursor: usize,
    pass: u64,
    seed: u64,
}

impl BatchIter {
    pub fn new(
        corpus: &Corpus,
        horizon: usize,
        max_context: usize,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        let windows = windows(corpus, Split::Train, horizon, max_context);
        if windows.is_empty() {
            return Err(Error::InvalidArgument(
                "corpus yields no training windows".into(),
            ));
        }
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        let mut iter = Self {
            order: (0..windows.len()).collect(),
            windows,
            batch_size,
            cursor: 0,
            pass: 0,
            seed,
        };
        iter.reshuffle();
        Ok(iter)
    }

    fn reshuffle(&mut self) {
        let mut rng = SplitMix64::new(self.seed).derive(0x62617463_u64 ^ self.pass);
        rng.shuffle(&mut self.order);
        self.cursor = 0;
    }

    /// Next batch of windows (always exactly `batch_size`, wrapping passes).
    pub fn next_batch(&mut self) -> Vec<Window> {
        let mut batch = Vec::with_capacity(self.batch_size);
        while batch.len() < self.batch_size {
            if self.cursor == self.order.len() {
                self.pass += 1;
                self.reshuffle();
            }
            batch.push(self.windows[self.order[self.cursor]].clone());
            self.cursor += 1;
        }
        batch
    }
}

/// Character-level vocabulary: distinct code points sorted ascending.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CharVocab {
    pub chars: Vec<char>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnknownPolicy {
    Error,
    /// Map unknown characters to this token id.
    MapTo(usize),
}

impl CharVocab {
    pub fn scan(text: &str) -> Self {
        let set: BTreeSet<char> = text.chars().collect();
        Self {
            chars: set.into_iter().collect(),
        }
    }

    pub fn size(&self) -> usize {
        self.chars.len()
    }

    pub fn encode(&self, text: &str, policy: UnknownPolicy) -> Result<Vec<u32>> {
        text.chars()
            .map(|c| match self.chars.binary_search(&c) {
                Ok(i) => Ok(i as u32),
                Err(_) => match policy {
                    UnknownPolicy::Error => Err(Error::UnknownCharacter(c)),
                    UnknownPolicy::MapTo(t) => Ok(t as u32),
                },
            })
            .collect()
    }

    pub fn decode(&self, tokens: &[u32]) -> Result<String> {
        tokens
            .iter()
            .map(|&t| {
                self.chars
                    .get(t as usize)
                    .copied()
                    .ok_or(Error::TokenOutOfRange {
                        token: t as usize,
                        vocab: self.size(),
                    })
            })
            .collect()
    }
}

/// Read a text file into a character-level corpus plus its vocabulary
/// (built from a scan, sorted by code point).
pub fn load_text(path: &Path, train_fraction: f64) -> Result<(Corpus, CharVocab)> {
    let text = std::fs::read_to_string(path)?;
    if text.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "text file {} is empty",
            path.display()
        )));
    }
    let vocab = CharVocab::scan(&text);
    let corpus = load_text_with_vocab(path, &vocab, UnknownPolicy::Error, train_fraction)?;
    Ok((corpus, vocab))
}

/// Read a text file against an existing vocabulary. Unknown characters
/// follow `policy`.
pub fn load_text_with_vocab(
    path: &Path,
    vocab: &CharVocab,
    policy: UnknownPolicy,
    train_fraction: f64,
) -> Result<Corpus> {
    let text = std::fs::read_to_string(path)?;
    if text.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "text file {} is empty",
            path.display()
        )));
    }
    let tokens = vocab.encode(&text, policy)?;
    Corpus::from_tokens(tokens, vocab.size(), train_fraction)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn cycle_chain_is_periodic_with_zero_entropy() {
        let spec = MarkovSpec::cycle(5, 1).unwrap();
        let corpus = generate_markov(&spec, 100, 1.0).unwrap();
        for pair in corpus.tokens.windows(2) {
            assert_eq!((pair[0] + 1) % 5, pair[1]);
        }
        assert_abs_diff_eq!(spec.true_joint_nll(3).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn uniform_chain_has_log_v_entropy_rate() {
        let spec = MarkovSpec::uniform(4, 2).unwrap();
        assert_abs_diff_eq!(spec.entropy_rate().unwrap(), 4.0f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(
            spec.true_joint_nll(2).unwrap(),
            2.0 * 4.0f64.ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn empirical_transition_frequencies_converge_to_spec_rows() {
        let spec = MarkovSpec::random(16, 3).unwrap();
        let corpus = generate_markov(&spec, 1_000_000, 1.0).unwrap();
        let mut counts = vec![vec![0usize; 16]; 16];
        let mut totals = [0usize; 16];
        for pair in corpus.tokens.windows(2) {
            counts[pair[0] as usize][pair[1] as usize] += 1;
            totals[pair[0] as usize] += 1;
        }
        for state in 0..16 {
            for (token, &count) in counts[state].iter().enumerate() {
                let freq = count as f64 / totals[state] as f64;
                assert!(
                    (freq - spec.row(state)[token]).abs() < 0.01,
                    "state {state} token {token}: freq {freq} vs spec {}",
                    spec.row(state)[token]
                );
            }
        }
    }

    #[test]
    fn true_joint_nll_matches_monte_carlo() {
        let spec = MarkovSpec::random(5, 7).unwrap();
        let exact = spec.true_joint_nll(3).unwrap();
        let corpus = generate_markov(&spec, 1_000_003, 1.0).unwrap();
        let mut total = 0.0;
        let mut count = 0usize;
        for w in corpus.tokens.windows(4) {
            let mut state = w[0] as usize;
            let mut lp = 0.0;
            for &t in &w[1..4] {
                lp += spec.row(state)[t as usize].ln();
                state = spec.push_state(state, t as usize);
            }
            total -= lp;
            count += 1;
        }
        let monte_carlo = total / count as f64;
        assert!(
            (monte_carlo - exact).abs() < 0.005,
            "monte-carlo {monte_carlo} vs exact {exact}"
        );
    }

    #[test]
    fn non_ergodic_chain_is_diagnosed() {
        // Two disconnected 2-cycles on 4 tokens.
        let rows = vec![
            vec![0.0, 1.0, 0.0, 0.0],
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
            vec![0.0, 0.0, 1.0, 0.0],
        ];
        let spec = MarkovSpec::new(1, 4, rows, 0).unwrap();
        assert!(matches!(spec.stationary(), Err(Error::NonErgodic(_))));
    }

    #[test]
    fn grouped_chain_rows_are_normalized_and_structured() {
        let spec = MarkovSpec::grouped(32, 4, &[0.05, 0.15, 0.30, 0.50], 0.35, 9).unwrap();
        // Stationary distribution should factor as (1/groups)·within-tilt.
        let pi = spec.stationary().unwrap();
        for cluster in 0..4 {
            for slot in 0..8 {
                assert_abs_diff_eq!(
                    pi[cluster * 8 + slot],
                    pi[slot], // same slot in cluster 0
                    epsilon = 1e-9
                );
            }
        }
        // Rows from the same cluster are identical.
        assert_eq!(spec.row(0), spec.row(3));
        assert_ne!(spec.row(0), spec.row(8));
    }

    #[test]
    fn five_token_corpus_has_three_windows() {
        let corpus = Corpus::from_tokens(vec![0, 1, 2, 3, 0], 4, 1.0).unwrap();
        let w = windows(&corpus, Split::Train, 2, usize::MAX);
        assert_eq!(w.len(), 3, "split points 1, 2, 3");
        assert_eq!(w[0].context(&corpus.tokens), &[0]);
        assert_eq!(w[0].targets(&corpus.tokens), &[1, 2]);
        assert_eq!(w[2].context(&corpus.tokens), &[0, 1, 2]);
        assert_eq!(w[2].targets(&corpus.tokens), &[3, 0]);
    }

    #[test]
    fn windows_respect_document_boundaries() {
        let mut corpus = Corpus::from_tokens(vec![0, 1, 9, 2, 3, 4], 10, 1.0).unwrap();
        corpus.boundary_token = Some(9);
        let w = windows(&corpus, Split::Train, 1, 8);
        for win in &w {
            assert!(!win.context(&corpus.tokens).contains(&9));
            assert!(!win.targets(&corpus.tokens).contains(&9));
        }
        // Context after the boundary must not reach back across it.
        let after = w
            .iter()
            .find(|win| win.split_at == 5)
            .expect("window at split 5");
        assert_eq!(after.context(&corpus.tokens), &[2, 3]);
    }

    #[test]
    fn batch_stream_is_deterministic_per_seed() {
        let spec = MarkovSpec::random(6, 11).unwrap();
        let corpus = generate_markov(&spec, 500, 0.9).unwrap();
        let collect = |seed: u64| {
            let mut iter = BatchIter::new(&corpus, 2, 8, 16, seed).unwrap();
            (0..5).flat_map(|_| iter.next_batch()).collect::<Vec<_>>()
        };
        assert_eq!(collect(7), collect(7));
        assert_ne!(collect(7), collect(8));
    }

    #[test]
    fn token_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tokens.bin");
        let spec = MarkovSpec::uniform(12, 5).unwrap();
        let corpus = generate_markov(&spec, 1000, 0.8).unwrap();
        corpus.save(&path).unwrap();
        let loaded = Corpus::load(&path, 0.8).unwrap();
        assert_eq!(loaded.tokens, corpus.tokens);
        assert_eq!(loaded.vocab, corpus.vocab);
        assert_eq!(loaded.split, corpus.split);
    }

    #[test]
    fn token_file_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"NOTMAGIC\x01\x00\x00\x00").unwrap();
        assert!(matches!(
            Corpus::load(&path, 0.9),
            Err(Error::CorpusFormat(_))
        ));
    }

    #[test]
    fn text_round_trips_through_char_vocab() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("text.txt");
        let text = "hello markov world! ζω";
        std::fs::write(&path, text).unwrap();
        let (corpus, vocab) = load_text(&path, 1.0).unwrap();
        assert_eq!(vocab.decode(&corpus.tokens).unwrap(), text);
    }

    #[test]
    fn unknown_characters_follow_policy() {
        let vocab = CharVocab::scan("abc");
        assert!(matches!(
            vocab.encode("abz", UnknownPolicy::Error),
            Err(Error::UnknownCharacter('z'))
        ));
        assert_eq!(
            vocab.encode("abz", UnknownPolicy::MapTo(0)).unwrap(),
            vec![0, 1, 0]
        );
    }

    #[test]
    fn loading_with_a_fixed_vocab_follows_the_unknown_policy() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("text.txt");
        std::fs::write(&path, "abcz").unwrap();
        let vocab = CharVocab::scan("abc");
        assert!(matches!(
            load_text_with_vocab(&path, &vocab, UnknownPolicy::Error, 1.0),
            Err(Error::UnknownCharacter('z'))
        ));
        let corpus = load_text_with_vocab(&path, &vocab, UnknownPolicy::MapTo(2), 1.0).unwrap();
        assert_eq!(corpus.tokens, vec![0, 1, 2, 2]);
    }

    #[test]
    fn empty_text_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.txt");
        std::fs::write(&path, "").unwrap();
        assert!(load_text(&path, 1.0).is_err());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn encode_decode_round_trip(text in "[a-z ]{1,64}") {
                let vocab = CharVocab::scan(&text);
                let tokens = vocab.encode(&text, UnknownPolicy::Error).unwrap();
                prop_assert_eq!(vocab.decode(&tokens).unwrap(), text);
            }
        }
    }
}
