//! Context encoder: a small fixed causal recurrence standing in for a
//! transformer trunk.
//!
//! h_t = λ·h_{t-1} + (1-λ)·table\[x_t\], e_t = tanh(h_t), h_0 = 0. The
//! embedding at position t depends only on tokens up to t, every entry lies
//! in (-1, 1), and the backward pass through the recurrence is short enough
//! to write (and finite-difference check) by hand.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Length-E context embedding e_t for one position.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    values: Array1<f64>,
}

impl Embedding {
    pub fn new(values: Array1<f64>) -> Self {
        Self { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.values
    }
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    /// V×E table of token embeddings.
    pub token_table: Array2<f64>,
    /// Recurrence decay λ ∈ (0, 1).
    pub decay: f64,
    /// Frozen in finetune mode.
    pub trainable: bool,
}

pub const DEFAULT_DECAY: f64 = 0.7;
pub const DEFAULT_EMBED_DIM: usize = 64;

impl EncoderParams {
    pub fn new(token_table: Array2<f64>, decay: f64, trainable: bool) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) || decay == 0.0 {
            return Err(Error::InvalidArgument(format!(
                "decay must lie in (0, 1), got {decay}"
            )));
        }
        if !token_table.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("token table"));
        }
        Ok(Self {
            token_table,
            decay,
            trainable,
        })
    }

    /// Random table with entries uniform in ±1/√E.
    pub fn init(vocab: usize, embed_dim: usize, decay: f64, rng: &mut SplitMix64) -> Result<Self> {
        let bound = 1.0 / (embed_dim as f64).sqrt();
        let table = Array2::from_shape_fn((vocab, embed_dim), |_| rng.next_range(-bound, bound));
        Self::new(table, decay, true)
    }

    pub fn vocab(&self) -> usize {
        self.token_table.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.token_table.ncols()
    }
}

/// Running recurrence state; extending a context by one token is O(E).
#[derive(Debug, Clone)]
pub struct EncoderState {
    h: Array1<f64>,
    len: usize,
}

impl EncoderState {
    pub fn new(embed_dim: usize) -> Self {
        Self {
            h: Array1::zeros(embed_dim),
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Advance by one token and return the embedding at the new position.
    pub fn step(&mut self, params: &EncoderParams, token: usize) -> Result<Embedding> {
        if token >= params.vocab() {
            return Err(Error::TokenOutOfRange {
                token,
                vocab: params.vocab(),
            });
        }
        let lambda = params.decay;
        let row = params.token_table.row(token);
        for (h, &x) in self.h.iter_mut().zip(row.iter()) {
            *h = lambda * *h + (1.0 - lambda) * x;
        }
        self.len += 1;
        Ok(Embedding::new(self.h.mapv(f64::tanh)))
    }
}

/// Embed a full sequence; output\[t\] is the embedding after consuming
/// tokens[0..=t].
pub fn encode(params: &EncoderParams, tokens: &[usize]) -> Result<Vec<Embedding>> {
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("empty token sequence".into()));
    }
    let mut state = EncoderState::new(params.embed_dim());
    tokens.iter().map(|&t| state.step(params, t)).collect()
}

/// Embedding of the last position only.
pub fn encode_last(params: &EncoderParams, tokens: &[usize]) -> Result<Embedding> {
    Ok(encode(params, tokens)?.pop().expect("non-empty"))
}

/// Backpropagate per-position upstream gradients (w.r.t. each e_t) to the
/// token table.
///
/// With g_t = upstream_t ⊙ (1 - e_t²) + λ·g_{t+1}, row x_t accumulates
/// (1-λ)·g_t. Exactness is checked against central finite differences.
pub fn encode_grad(
    params: &EncoderParams,
    tokens: &[usize],
    upstream: &[Array1<f64>],
) -> Result<Array2<f64>> {
    if upstream.len() != tokens.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} upstream gradients for {} tokens",
            upstream.len(),
            tokens.len()
        )));
    }
    let embeddings = encode(params, tokens)?;
    let lambda = params.decay;
    let mut grad = Array2::zeros(params.token_table.dim());
    let mut g_h: Array1<f64> = Array1::zeros(params.embed_dim());
    for t in (0..tokens.len()).rev() {
        if upstream[t].len() != params.embed_dim() {
            return Err(Error::DimensionMismatch(format!(
                "upstream gradient {t} has length {}, expected {}",
                upstream[t].len(),
                params.embed_dim()
            )));
        }
        let e = embeddings[t].values();
        for i in 0..params.embed_dim() {
            g_h[i] = lambda * g_h[i] + upstream[t][i] * (1.0 - e[i] * e[i]);
        }
        let mut row = grad.row_mut(tokens[t]);
        for i in 0..params.embed_dim() {
            row[i] += (1.0 - lambda) * g_h[i];
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn small_params(seed: u64) -> EncoderParams {
        let mut rng = SplitMix64::new(seed);
        EncoderParams::init(6, 8, 0.5, &mut rng).unwrap()
    }

    #[test]
    fn single_token_matches_base_case() {
        let params = small_params(3);
        let out = encode(&params, &[4]).unwrap();
        for i in 0..8 {
            assert_abs_diff_eq!(
                out[0].values()[i],
                (0.5 * params.token_table[[4, i]]).tanh(),
                epsilon = 1e-15
            );
        }
    }

    #[test]
    fn repeated_token_converges_to_tanh_of_its_row() {
        let params = small_params(5);
        let tokens = vec![2usize; 200];
        let out = encode(&params, &tokens).unwrap();
        let last = &out[199];
        for i in 0..8 {
            assert_abs_diff_eq!(
                last.values()[i],
                params.token_table[[2, i]].tanh(),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn matches_direct_recurrence_reimplementation() {
        let params = small_params(7);
        let mut rng = SplitMix64::new(100);
        let tokens: Vec<usize> = (0..10).map(|_| rng.next_index(6)).collect();
        let out = encode(&params, &tokens).unwrap();

        let mut h = [0.0f64; 8];
        for (t, &token) in tokens.iter().enumerate() {
            for (i, hi) in h.iter_mut().enumerate() {
                *hi = 0.5 * *hi + 0.5 * params.token_table[[token, i]];
            }
            for (i, hi) in h.iter().enumerate() {
                assert_abs_diff_eq!(out[t].values()[i], hi.tanh(), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn causality_and_bounds() {
        let params = small_params(9);
        let a = encode(&params, &[0, 1, 2, 3]).unwrap();
        let b = encode(&params, &[0, 1, 5, 3]).unwrap();
        for t in 0..2 {
            assert_eq!(a[t], b[t], "positions before the edit must not change");
        }
        assert_ne!(a[2], b[2]);
        for e in &a {
            assert!(e.values().iter().all(|x| x.abs() < 1.0));
        }
    }

    #[test]
    fn incremental_state_matches_batch_encoding() {
        let params = small_params(13);
        let tokens = [1usize, 0, 5, 3, 3, 2];
        let batch = encode(&params, &tokens).unwrap();
        let mut state = EncoderState::new(8);
        for (t, &token) in tokens.iter().enumerate() {
            let e = state.step(&params, token).unwrap();
            assert_eq!(e, batch[t], "step {t} must be bit-identical");
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let params = small_params(15);
        let tokens = [0usize, 1, 2];
        let upstream = vec![Array1::zeros(8); 3];
        let grad = encode_grad(&params, &tokens, &upstream).unwrap();
        assert!(grad.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_step_gradient_is_the_chain_rule() {
        let params = small_params(17);
        let tokens = [3usize];
        let mut rng = SplitMix64::new(200);
        let upstream = vec![Array1::from_shape_fn(8, |_| rng.next_range(-1.0, 1.0))];
        let grad = encode_grad(&params, &tokens, &upstream).unwrap();
        let e = encode(&params, &tokens).unwrap().pop().unwrap();
        for i in 0..8 {
            let expected = 0.5 * (1.0 - e.values()[i] * e.values()[i]) * upstream[0][i];
            assert_abs_diff_eq!(grad[[3, i]], expected, epsilon = 1e-15);
        }
        for token in [0usize, 1, 2, 4, 5] {
            assert!(grad.row(token).iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn gradient_matches_central_finite_differences() {
        let params = small_params(19);
        let mut rng = SplitMix64::new(300);
        let tokens: Vec<usize> = (0..7).map(|_| rng.next_index(6)).collect();
        let upstream: Vec<Array1<f64>> = (0..7)
            .map(|_| Array1::from_shape_fn(8, |_| rng.next_range(-1.0, 1.0)))
            .collect();
        let analytic = encode_grad(&params, &tokens, &upstream).unwrap();

        let loss = |p: &EncoderParams| -> f64 {
            encode(p, &tokens)
                .unwrap()
                .iter()
                .zip(&upstream)
                .map(|(e, u)| e.values().dot(u))
                .sum()
        };
        let h = 1e-5;
        for v in 0..6 {
            for i in 0..8 {
                let mut plus = params.clone();
                plus.token_table[[v, i]] += h;
                let mut minus = params.clone();
                minus.token_table[[v, i]] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let a = analytic[[v, i]];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
                assert!(
                    rel <= 1e-5,
                    "finite-difference mismatch at [{v},{i}]: analytic {a}, fd {fd}"
                );
            }
        }
    }

    #[test]
    fn invalid_decay_is_rejected() {
        let table = Array2::zeros((3, 4));
        assert!(EncoderParams::new(table.clone(), 0.0, true).is_err());
        assert!(EncoderParams::new(table.clone(), 1.0, true).is_err());
        assert!(EncoderParams::new(table, 0.5, true).is_ok());
    }
}
