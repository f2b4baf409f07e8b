//! Log-space numeric primitives.
//!
//! Everything downstream of a head forward pass works with log-probabilities;
//! these helpers are the only places where exponentials of raw logits happen.

/// Logits are clamped to `[-LOG_CLAMP, LOG_CLAMP]` before exponentiation so
/// that `exp` stays inside the double-precision range.
pub const LOG_CLAMP: f64 = 700.0;

/// log Σ exp(x_i), computed with the max-shift trick.
///
/// Returns `-inf` for an input of all `-inf` (an empty mixture carries no
/// mass); panics on an empty slice.
pub fn logsumexp(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty(), "logsumexp of empty slice");
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Log-softmax with input clamping.
///
/// The result satisfies `logsumexp(out) = 0` up to rounding of the final
/// subtraction.
pub fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let clamped: Vec<f64> = xs.iter().map(|x| x.clamp(-LOG_CLAMP, LOG_CLAMP)).collect();
    let lse = logsumexp(&clamped);
    clamped.iter().map(|x| x - lse).collect()
}

/// Renormalize a vector that is already close to a log-distribution.
pub fn log_normalize(xs: &[f64]) -> Vec<f64> {
    let lse = logsumexp(xs);
    xs.iter().map(|x| x - lse).collect()
}

/// Softmax probabilities of a logit vector (clamped like `log_softmax`).
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    log_softmax(xs).iter().map(|x| x.exp()).collect()
}

/// Index of the maximum value; ties break toward the lowest index.
pub fn argmax_tie_low(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// True iff every entry is finite.
pub fn all_finite(xs: &[f64]) -> bool {
    xs.iter().all(|x| x.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn logsumexp_matches_naive_for_small_values() {
        let xs: [f64; 3] = [0.5, 2.0, -1.0];
        let naive = xs.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert_abs_diff_eq!(logsumexp(&xs), naive, epsilon = 1e-14);
    }

    #[test]
    fn logsumexp_survives_large_magnitudes() {
        // Naive evaluation overflows: exp(1234) = inf.
        let xs = [1234.0, 1232.0];
        let expected = 1232.0 + (2f64.exp() + 1.0).ln();
        assert_abs_diff_eq!(logsumexp(&xs), expected, epsilon = 1e-12);
        assert!(xs.iter().map(|x| x.exp()).sum::<f64>().is_infinite());
    }

    #[test]
    fn logsumexp_all_neg_inf_is_neg_inf() {
        assert_eq!(logsumexp(&[f64::NEG_INFINITY; 3]), f64::NEG_INFINITY);
    }

    #[test]
    fn log_softmax_normalizes() {
        let out = log_softmax(&[3.0, -2.0, 0.25, 10.0]);
        assert_abs_diff_eq!(logsumexp(&out), 0.0, epsilon = 1e-13);
    }

    #[test]
    fn log_softmax_of_extreme_logits_is_finite() {
        let out = log_softmax(&[1e9, -1e9, 0.0]);
        assert!(all_finite(&out), "clamping must keep outputs finite");
        assert_abs_diff_eq!(logsumexp(&out), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn argmax_breaks_ties_toward_lowest_index() {
        assert_eq!(argmax_tie_low(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax_tie_low(&[5.0, 5.0]), 0);
    }
}
