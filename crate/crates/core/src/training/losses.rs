//! Loss functions and their analytic gradients.
//!
//! Joint NLL: loss = -log Σ_α exp(log w_α + Σ_s C^(s)_α) with
//! C^(s)_α = log P^(s)(y_s | α). With the posterior responsibility
//! ρ = softmax_α(log w_α + Σ_s C^(s)_α), the gradient w.r.t. factor logits is
//! ρ_α·(softmax(f)_v - 1{v=y_s}) and w.r.t. gate logits w - ρ; both propagate
//! to matrices by outer product with the embedding.
//!
//! The balancing loss penalizes Σ_α (n_α/N - 1/r)² where n_α counts argmax
//! assignments. That hard count has zero gradient almost everywhere, so the
//! differentiable surrogate Σ_α (p̄_α - 1/r)² over mean gate probabilities
//! drives training while the hard value is reported as a metric.
//!
//! Distillation: L_k = β·KL(p^d_k ‖ p^c_k) + (1-β)·CE(p^d_k, y_k), discounted
//! by γ^k. The draft marginal p^d_k mixes experts with posterior weights
//! conditioned on the ground-truth prefix; gradients flow through the
//! position-k factors, the earlier factors (via the posterior), and the gate.
//! Everything is arranged so no intermediate requires exp of a positive
//! number or division by a vanishing probability.

use ndarray::{Array1, Array2, Array3};

use crate::cp::{CPJointDist, LogDistribution};
use crate::encoder::Embedding;
use crate::error::{Error, Result};
use crate::heads::{FullHeadParams, ReducedHeadParams};
use crate::math::{argmax_tie_low, log_softmax, logsumexp, LOG_CLAMP};

/// -log P(targets) under the CP distribution.
pub fn joint_nll(dist: &CPJointDist, targets: &[usize]) -> Result<f64> {
    Ok(-dist.log_prob(targets)?)
}

/// Gradients of the joint NLL w.r.t. full-head matrices, plus the loss value
/// and the gradient w.r.t. the embedding (for encoder backprop).
pub struct JointNllGrad {
    pub loss: f64,
    pub factor: Vec<Vec<Array2<f64>>>,
    pub gate: Array2<f64>,
    pub grad_e: Array1<f64>,
    /// Posterior responsibilities ρ (sum to 1).
    pub responsibilities: Vec<f64>,
}

/// Logit-level gradients for one example; matrix gradients are accumulated
/// batch-side as outer products with the embedding.
pub(crate) struct JointExample {
    pub loss: f64,
    pub first_token_nll: f64,
    /// [n, r, V] gradient w.r.t. factor logits.
    pub grad_factor_logits: Array3<f64>,
    /// [r] gradient w.r.t. gate logits.
    pub grad_gate_logits: Vec<f64>,
    /// Gate probabilities w (softmax of gate logits).
    pub gate_probs: Vec<f64>,
    pub responsibilities: Vec<f64>,
}

pub(crate) fn joint_example(
    params: &FullHeadParams,
    e: &Embedding,
    targets: &[usize],
) -> Result<JointExample> {
    let (n, r, v) = (params.horizon, params.rank, params.vocab);
    if targets.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} targets for horizon {n}",
            targets.len()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
        return Err(Error::TokenOutOfRange {
            token: bad,
            vocab: v,
        });
    }

    let gate_logits: Array1<f64> = params.gate_weights.dot(e.values());
    let log_w = log_softmax(gate_logits.as_slice().unwrap());
    let gate_probs: Vec<f64> = log_w.iter().map(|x| x.exp()).collect();

    // Per (s, α): normalized log-probs and the target log-prob C^(s)_α.
    let mut log_p = Array3::zeros((n, r, v));
    let mut expert_terms = log_w.clone();
    let mut first_terms = vec![0.0; r];
    for s in 0..n {
        for alpha in 0..r {
            let logits: Array1<f64> = params.factor_weights[s][alpha].dot(e.values());
            let norm = log_softmax(logits.as_slice().unwrap());
            let c = norm[targets[s]];
            expert_terms[alpha] += c;
            if s == 0 {
                first_terms[alpha] = log_w[alpha] + c;
            }
            for (token, &value) in norm.iter().enumerate() {
                log_p[[s, alpha, token]] = value;
            }
        }
    }
    let log_likelihood = logsumexp(&expert_terms);
    let first_token_nll = -logsumexp(&first_terms);

    // ρ_α = softmax over experts of the accumulated terms.
    let responsibilities: Vec<f64> = expert_terms
        .iter()
        .map(|t| (t - log_likelihood).exp())
        .collect();

    let mut grad_factor_logits = Array3::zeros((n, r, v));
    for s in 0..n {
        for alpha in 0..r {
            let rho = responsibilities[alpha];
            for token in 0..v {
                let p = log_p[[s, alpha, token]].exp();
                let indicator = if token == targets[s] { 1.0 } else { 0.0 };
                grad_factor_logits[[s, alpha, token]] = rho * (p - indicator);
            }
        }
    }
    let grad_gate_logits: Vec<f64> = gate_probs
        .iter()
        .zip(&responsibilities)
        .map(|(&w, &rho)| w - rho)
        .collect();

    Ok(JointExample {
        loss: -log_likelihood,
        first_token_nll,
        grad_factor_logits,
        grad_gate_logits,
        gate_probs,
        responsibilities,
    })
}

/// Full joint-NLL gradient for one (embedding, targets) pair.
pub fn joint_nll_grad(
    params: &FullHeadParams,
    e: &Embedding,
    targets: &[usize],
) -> Result<JointNllGrad> {
    let example = joint_example(params, e, targets)?;
    let (n, r) = (params.horizon, params.rank);

    let mut factor = Vec::with_capacity(n);
    let mut grad_e = Array1::zeros(params.embed_dim);
    for s in 0..n {
        let mut per_alpha = Vec::with_capacity(r);
        for alpha in 0..r {
            let gf = example.grad_factor_logits.slice(ndarray::s![s, alpha, ..]);
            per_alpha.push(outer(&gf.to_owned(), e.values()));
            grad_e += &params.factor_weights[s][alpha].t().dot(&gf.to_owned());
        }
        factor.push(per_alpha);
    }
    let gg = Array1::from(example.grad_gate_logits.clone());
    grad_e += &params.gate_weights.t().dot(&gg);
    let gate = outer(&gg, e.values());

    Ok(JointNllGrad {
        loss: example.loss,
        factor,
        gate,
        grad_e,
        responsibilities: example.responsibilities,
    })
}

pub(crate) fn outer(col: &Array1<f64>, row: &Array1<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((col.len(), row.len()));
    for (i, &c) in col.iter().enumerate() {
        if c == 0.0 {
            continue;
        }
        for (j, &r) in row.iter().enumerate() {
            out[[i, j]] = c * r;
        }
    }
    out
}

/// Hard and surrogate expert-balance statistics for one batch of gate rows.
#[derive(Debug, Clone, serde::Serialize)]
pub struct BalanceStats {
    /// Argmax assignment counts n_α (ties toward the lowest expert index).
    pub counts: Vec<usize>,
    /// Total assignments N (= batch size).
    pub total: usize,
    /// Σ_α (n_α/N - 1/r)².
    pub hard_loss: f64,
    /// Column means p̄_α of the gate probabilities.
    pub mean_gate: Vec<f64>,
    /// Σ_α (p̄_α - 1/r)².
    pub surrogate_loss: f64,
}

impl BalanceStats {
    pub fn from_gate_probs(batch: &[Vec<f64>]) -> Result<Self> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let r = batch[0].len();
        let mut counts = vec![0usize; r];
        let mut mean_gate = vec![0.0; r];
        for row in batch {
            if row.len() != r {
                return Err(Error::DimensionMismatch("ragged gate batch".into()));
            }
            counts[argmax_tie_low(row)] += 1;
            for (m, &p) in mean_gate.iter_mut().zip(row) {
                *m += p;
            }
        }
        let total = batch.len();
        for m in &mut mean_gate {
            *m /= total as f64;
        }
        let uniform = 1.0 / r as f64;
        let hard_loss = counts
            .iter()
            .map(|&c| (c as f64 / total as f64 - uniform).powi(2))
            .sum();
        let surrogate_loss = mean_gate.iter().map(|&p| (p - uniform).powi(2)).sum();
        Ok(Self {
            counts,
            total,
            hard_loss,
            surrogate_loss,
            mean_gate,
        })
    }

    /// Largest fraction of argmax assignments on a single expert.
    pub fn max_utilization(&self) -> f64 {
        self.counts
            .iter()
            .map(|&c| c as f64 / self.total as f64)
            .fold(0.0, f64::max)
    }
}

/// Auxiliary balancing loss over a batch of gate probability rows.
///
/// Returns (hard value, surrogate value, surrogate gradient w.r.t. each gate
/// probability entry); the gradient is uniform across rows:
/// ∂surrogate/∂p_{bα} = 2(p̄_α - 1/r)/B.
pub fn aux_loss(batch: &[Vec<f64>]) -> Result<(f64, f64, Vec<f64>)> {
    let stats = BalanceStats::from_gate_probs(batch)?;
    let r = stats.mean_gate.len();
    let uniform = 1.0 / r as f64;
    let grad: Vec<f64> = stats
        .mean_gate
        .iter()
        .map(|&p| 2.0 * (p - uniform) / stats.total as f64)
        .collect();
    Ok((stats.hard_loss, stats.surrogate_loss, grad))
}

/// Chain the surrogate gradient through one row's softmax: given gate
/// probabilities p_b and the per-probability gradient q (from [`aux_loss`]),
/// the gate-logit gradient is p_b ⊙ (q - (q·p_b)).
pub fn aux_gate_logit_grad(gate_probs: &[f64], grad_probs: &[f64]) -> Vec<f64> {
    let dot: f64 = gate_probs
        .iter()
        .zip(grad_probs)
        .map(|(&p, &q)| p * q)
        .sum();
    gate_probs
        .iter()
        .zip(grad_probs)
        .map(|(&p, &q)| p * (q - dot))
        .collect()
}

/// Value and draft-logit gradients of the per-position distillation loss.
pub struct DistillLoss {
    /// Σ_k γ^k [β·KL(p^d_k ‖ p^c_k) + (1-β)·CE(p^d_k, y_k)].
    pub value: f64,
    /// Per-position gradient w.r.t. draft logits (any parameterization that
    /// produces the draft via softmax).
    pub logit_grads: Vec<Vec<f64>>,
    /// Teacher entries clamped to exp(-700) because the draft carries mass
    /// where the teacher has an exact zero.
    pub clamped_teacher_entries: usize,
}

/// Distillation loss between per-position draft and teacher distributions.
///
/// The teacher receives no gradient. Teacher log-probs below -700 are clamped
/// (and counted) so a teacher zero under draft mass yields a large but finite
/// penalty.
pub fn distill_loss(
    draft: &[LogDistribution],
    teacher: &[LogDistribution],
    targets: &[usize],
    beta: f64,
    gamma: f64,
) -> Result<DistillLoss> {
    if draft.len() != teacher.len() || draft.len() != targets.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} draft, {} teacher, {} targets",
            draft.len(),
            teacher.len(),
            targets.len()
        )));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidArgument(format!("beta {beta} not in [0, 1]")));
    }
    if !(0.0..=1.0).contains(&gamma) || gamma == 0.0 {
        return Err(Error::InvalidArgument(format!(
            "gamma {gamma} not in (0, 1]"
        )));
    }

    let mut value = 0.0;
    let mut logit_grads = Vec::with_capacity(draft.len());
    let mut clamped = 0usize;
    for (k, ((p, q), &y)) in draft.iter().zip(teacher).zip(targets).enumerate() {
        if p.vocab() != q.vocab() {
            return Err(Error::DimensionMismatch("draft/teacher vocab".into()));
        }
        if y >= p.vocab() {
            return Err(Error::TokenOutOfRange {
                token: y,
                vocab: p.vocab(),
            });
        }
        let discount = gamma.powi(k as i32);
        let lq: Vec<f64> = q
            .log_probs()
            .iter()
            .map(|&x| {
                if x < -LOG_CLAMP {
                    clamped += 1;
                    -LOG_CLAMP
                } else {
                    x
                }
            })
            .collect();
        let lp = p.log_probs();
        // KL in log space: Σ_v exp(lp_v)·(lp_v - lq_v).
        let kl: f64 = lp
            .iter()
            .zip(&lq)
            .map(|(&a, &b)| {
                let pa = a.exp();
                if pa == 0.0 {
                    0.0
                } else {
                    pa * (a - b)
                }
            })
            .sum();
        let ce = -lp[y];
        value += discount * (beta * kl + (1.0 - beta) * ce);

        // Gradient w.r.t. draft logits u (softmax Jacobian applied):
        // β·p_u·[(lp_u - lq_u) - KL] + (1-β)·(p_u - 1{u=y}).
        let grads: Vec<f64> = lp
            .iter()
            .zip(&lq)
            .enumerate()
            .map(|(u, (&a, &b))| {
                let pu = a.exp();
                let indicator = if u == y { 1.0 } else { 0.0 };
                discount * (beta * pu * ((a - b) - kl) + (1.0 - beta) * (pu - indicator))
            })
            .collect();
        logit_grads.push(grads);
    }
    if clamped > 0 {
        log::warn!("distillation clamped {clamped} teacher log-probabilities at -{LOG_CLAMP}");
    }
    Ok(DistillLoss {
        value,
        logit_grads,
        clamped_teacher_entries: clamped,
    })
}

/// Distillation gradients for one example, propagated to reduced-head
/// matrices.
pub struct FinetuneLossGrad {
    pub loss: f64,
    pub adapters: Vec<Vec<Array2<f64>>>,
    pub gate: Array2<f64>,
}

/// Full distillation gradient of the reduced head for one (embedding,
/// teacher, targets) tuple: the draft marginal at position k mixes experts
/// with posterior weights conditioned on the ground-truth prefix, and
/// gradients flow to the adapters (through the frozen shared head) and the
/// gate. The teacher and the shared head receive no gradient.
pub fn finetune_loss_grad(
    head: &ReducedHeadParams,
    e: &Embedding,
    teacher: &[LogDistribution],
    targets: &[usize],
    beta: f64,
    gamma: f64,
) -> Result<FinetuneLossGrad> {
    let example = finetune_example(head, e, teacher, targets, beta, gamma)?;
    let (n, r) = (head.horizon, head.rank);
    let mut adapters = Vec::with_capacity(n);
    for s in 0..n {
        let mut per_alpha = Vec::with_capacity(r);
        for alpha in 0..r {
            let gf = example.grad_factor_logits.slice(ndarray::s![s, alpha, ..]);
            let back: Array1<f64> = head.shared_head.t().dot(&gf.to_owned());
            per_alpha.push(outer(&back, e.values()));
        }
        adapters.push(per_alpha);
    }
    let gate = outer(&Array1::from(example.grad_gate_logits.clone()), e.values());
    Ok(FinetuneLossGrad {
        loss: example.loss,
        adapters,
        gate,
    })
}

/// One finetune example: distillation loss on the reduced head with the draft
/// conditioned on ground-truth targets, plus logit-level gradients.
pub(crate) struct FinetuneExample {
    pub loss: f64,
    pub first_token_nll: f64,
    pub joint_nll: f64,
    /// [n, r, V] gradient w.r.t. factor (shared-head output) logits.
    pub grad_factor_logits: Array3<f64>,
    /// [r] gradient w.r.t. gate logits.
    pub grad_gate_logits: Vec<f64>,
    pub gate_probs: Vec<f64>,
}

pub(crate) fn finetune_example(
    head: &ReducedHeadParams,
    e: &Embedding,
    teacher: &[LogDistribution],
    targets: &[usize],
    beta: f64,
    gamma: f64,
) -> Result<FinetuneExample> {
    let (n, r, v) = (head.horizon, head.rank, head.vocab);
    if teacher.len() != n || targets.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} teacher dists and {} targets for horizon {n}",
            teacher.len(),
            targets.len()
        )));
    }

    // Forward: adapters first, shared head second.
    let gate_logits: Array1<f64> = head.gate_weights.dot(e.values());
    let log_w = log_softmax(gate_logits.as_slice().unwrap());
    let gate_probs: Vec<f64> = log_w.iter().map(|x| x.exp()).collect();

    let mut log_p = Array3::zeros((n, r, v));
    for s in 0..n {
        for alpha in 0..r {
            let adapted: Array1<f64> = head.adapters[s][alpha].dot(e.values());
            let logits: Array1<f64> = head.shared_head.dot(&adapted);
            let norm = log_softmax(logits.as_slice().unwrap());
            for (token, &x) in norm.iter().enumerate() {
                log_p[[s, alpha, token]] = x;
            }
        }
    }

    // Posterior expert weights per position, conditioned on the ground-truth
    // prefix: u^(k)_α = log w_α + Σ_{j<k} log P^(j)(y_j | α).
    let mut u = log_w.clone();
    let mut value = 0.0;
    let mut joint_nll_terms = log_w.clone();
    let mut grad_factor_logits = Array3::zeros((n, r, v));
    let mut grad_gate_logits = vec![0.0; r];
    let mut clamped = 0usize;
    let mut first_token_nll = 0.0;

    for k in 0..n {
        let y = targets[k];
        if y >= v {
            return Err(Error::TokenOutOfRange { token: y, vocab: v });
        }
        if teacher[k].vocab() != v {
            return Err(Error::DimensionMismatch("teacher vocab".into()));
        }
        let log_w_hat = log_softmax(&u);

        // Draft marginal at position k.
        let mut ld = vec![0.0; v];
        let mut terms = vec![0.0; r];
        for (token, ld_token) in ld.iter_mut().enumerate() {
            for alpha in 0..r {
                terms[alpha] = log_w_hat[alpha] + log_p[[k, alpha, token]];
            }
            *ld_token = logsumexp(&terms);
        }
        if k == 0 {
            first_token_nll = -ld[y];
        }

        let lq: Vec<f64> = teacher[k]
            .log_probs()
            .iter()
            .map(|&x| {
                if x < -LOG_CLAMP {
                    clamped += 1;
                    -LOG_CLAMP
                } else {
                    x
                }
            })
            .collect();
        let discount = gamma.powi(k as i32);

        // κ_α = Σ_v p_{kα}(v)·X_v with X_v = ld_v - lq_v; KL = Σ_v d_v·X_v.
        let x: Vec<f64> = ld.iter().zip(&lq).map(|(&a, &b)| a - b).collect();
        let mut kappa = vec![0.0; r];
        for alpha in 0..r {
            kappa[alpha] = (0..v)
                .map(|token| log_p[[k, alpha, token]].exp() * x[token])
                .sum();
        }
        let w_hat: Vec<f64> = log_w_hat.iter().map(|x| x.exp()).collect();
        let kl: f64 = w_hat.iter().zip(&kappa).map(|(&wh, &ka)| wh * ka).sum();
        let ce = -ld[y];
        value += discount * (beta * kl + (1.0 - beta) * ce);

        // Responsibilities r_α = exp(log ŵ_α + log p_{kα}(y) - ld_y).
        let resp: Vec<f64> = (0..r)
            .map(|alpha| (log_w_hat[alpha] + log_p[[k, alpha, y]] - ld[y]).exp())
            .collect();

        // Factor logits at position k.
        for alpha in 0..r {
            for token in 0..v {
                let p = log_p[[k, alpha, token]].exp();
                let indicator = if token == y { 1.0 } else { 0.0 };
                let kl_part = beta * w_hat[alpha] * p * (x[token] - kappa[alpha]);
                let ce_part = (1.0 - beta) * resp[alpha] * (p - indicator);
                grad_factor_logits[[k, alpha, token]] += discount * (kl_part + ce_part);
            }
        }

        // Posterior-weight path: T_β = β·ŵ_β(κ_β - KL) - (1-β)(r_β - ŵ_β),
        // feeding the gate and every factor·target entry before position k.
        let t: Vec<f64> = (0..r)
            .map(|alpha| {
                discount
                    * (beta * w_hat[alpha] * (kappa[alpha] - kl)
                        - (1.0 - beta) * (resp[alpha] - w_hat[alpha]))
            })
            .collect();
        for alpha in 0..r {
            grad_gate_logits[alpha] += t[alpha];
        }
        for j in 0..k {
            let yj = targets[j];
            for alpha in 0..r {
                for token in 0..v {
                    let p = log_p[[j, alpha, token]].exp();
                    let indicator = if token == yj { 1.0 } else { 0.0 };
                    grad_factor_logits[[j, alpha, token]] += t[alpha] * (indicator - p);
                }
            }
        }

        // Advance the posterior accumulator and the exact joint NLL.
        for alpha in 0..r {
            u[alpha] += log_p[[k, alpha, y]];
            joint_nll_terms[alpha] += log_p[[k, alpha, y]];
        }
    }

    if clamped > 0 {
        log::warn!("finetune clamped {clamped} teacher log-probabilities at -{LOG_CLAMP}");
    }
    Ok(FinetuneExample {
        loss: value,
        first_token_nll,
        joint_nll: -logsumexp(&joint_nll_terms),
        grad_factor_logits,
        grad_gate_logits,
        gate_probs,
    })
}
