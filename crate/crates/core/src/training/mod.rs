//! Training: minibatch Adam on the joint NLL (scratch) or the distillation
//! objective (finetune), both with the auxiliary expert-balancing surrogate.
//!
//! Per-example gradients are evaluated in parallel, collected in batch order,
//! and summed by a fixed-order sequential reduction, so metrics are
//! bit-identical for any worker count given the same seed.

mod adam;
pub mod checkpoint;
mod losses;

pub use adam::Adam;
pub use losses::{
    aux_gate_logit_grad, aux_loss, distill_loss, finetune_loss_grad, joint_nll, joint_nll_grad,
    BalanceStats, DistillLoss, FinetuneLossGrad, JointNllGrad,
};

use std::time::Instant;

use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{windows, BatchIter, Corpus, Split, Window};
use crate::cp::LogDistribution;
use crate::encoder::{encode, encode_grad, Embedding};
use crate::error::{Error, Result};
use crate::math::log_softmax;
use crate::model::{HeadParams, Mode, Model};

use losses::{finetune_example, joint_example};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub rank: usize,
    pub horizon: usize,
    /// Weight of the balancing surrogate in the total loss.
    pub aux_coefficient: f64,
    /// β in the distillation loss.
    pub distill_beta: f64,
    /// Per-position discount γ in the distillation loss.
    pub discount: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub context_len: usize,
    pub embed_dim: usize,
    pub decay: f64,
    /// Linear learning-rate warmup steps (0 disables).
    pub warmup_steps: usize,
    /// Cap on validation windows evaluated after training.
    pub val_windows: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Scratch,
            rank: 4,
            horizon: 2,
            aux_coefficient: 0.1,
            distill_beta: 0.9,
            discount: 0.9,
            learning_rate: 0.02,
            batch_size: 64,
            steps: 800,
            seed: 0,
            context_len: 16,
            embed_dim: 64,
            decay: 0.7,
            warmup_steps: 0,
            val_windows: 4096,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 || self.horizon == 0 {
            return Err(Error::InvalidArgument(
                "rank and horizon must be ≥ 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.distill_beta) {
            return Err(Error::InvalidArgument(format!(
                "distill_beta {} not in [0, 1]",
                self.distill_beta
            )));
        }
        if !(0.0..=1.0).contains(&self.discount) || self.discount == 0.0 {
            return Err(Error::InvalidArgument(format!(
                "discount {} not in (0, 1]",
                self.discount
            )));
        }
        if self.aux_coefficient < 0.0 {
            return Err(Error::InvalidArgument("aux_coefficient must be ≥ 0".into()));
        }
        if self.batch_size == 0 || self.context_len == 0 {
            return Err(Error::InvalidArgument(
                "batch_size and context_len must be ≥ 1".into(),
            ));
        }
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::InvalidArgument(
                "learning rate must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One metrics record per optimizer step.
#[derive(Debug, Clone, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub joint_nll: f64,
    pub first_token_nll: f64,
    pub aux_hard: f64,
    pub aux_surrogate: f64,
    /// Fraction of argmax gate assignments per expert.
    pub utilization: Vec<f64>,
    pub wall_ms: f64,
}

/// Validation summary over held-out windows.
#[derive(Debug, Clone, Serialize)]
pub struct ValReport {
    pub joint_nll: f64,
    pub first_token_nll: f64,
    pub windows: usize,
    pub balance: BalanceStats,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainMetrics {
    pub steps: Vec<StepMetrics>,
    pub final_val: Option<ValReport>,
}

/// Write metrics as JSON-lines: a header object with the effective config,
/// one object per step, and a trailing validation record. A zero-step run
/// produces the header only.
pub fn write_metrics_jsonl(
    path: &std::path::Path,
    config: &serde_json::Value,
    metrics: &TrainMetrics,
) -> Result<()> {
    use std::io::Write;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(file, "{}", serde_json::json!({ "config": config }))?;
    for step in &metrics.steps {
        writeln!(file, "{}", serde_json::to_string(step)?)?;
    }
    if !metrics.steps.is_empty() {
        if let Some(val) = &metrics.final_val {
            writeln!(file, "{}", serde_json::json!({ "final_val": val }))?;
        }
    }
    Ok(())
}

fn as_tokens(slice: &[u32]) -> Vec<usize> {
    slice.iter().map(|&t| t as usize).collect()
}

/// Ordered trainable tensors; gradients use the same layout.
fn trainable_slices(model: &mut Model) -> Vec<&mut [f64]> {
    let mut out: Vec<&mut [f64]> = Vec::new();
    match &mut model.head {
        HeadParams::Full(head) => {
            for per_alpha in &mut head.factor_weights {
                for matrix in per_alpha {
                    out.push(matrix.as_slice_mut().unwrap());
                }
            }
            out.push(head.gate_weights.as_slice_mut().unwrap());
        }
        HeadParams::Reduced(head) => {
            for per_alpha in &mut head.adapters {
                for matrix in per_alpha {
                    out.push(matrix.as_slice_mut().unwrap());
                }
            }
            out.push(head.gate_weights.as_slice_mut().unwrap());
        }
    }
    if model.encoder.trainable {
        out.push(model.encoder.token_table.as_slice_mut().unwrap());
    }
    out
}

struct BatchGrads {
    /// Flat buffers aligned with [`trainable_slices`].
    tensors: Vec<Vec<f64>>,
    joint_nll: f64,
    first_token_nll: f64,
    aux_hard: f64,
    aux_surrogate: f64,
    utilization: Vec<f64>,
}

fn scratch_batch(
    model: &Model,
    corpus: &Corpus,
    batch: &[Window],
    aux_coef: f64,
) -> Result<BatchGrads> {
    let head = match &model.head {
        HeadParams::Full(head) => head,
        HeadParams::Reduced(_) => {
            return Err(Error::InvalidArgument(
                "scratch training requires a full head".into(),
            ))
        }
    };
    let (n, r, v, dim) = (head.horizon, head.rank, head.vocab, head.embed_dim);

    struct Out {
        loss: f64,
        first: f64,
        gf: ndarray::Array3<f64>,
        gg: Vec<f64>,
        gate_probs: Vec<f64>,
        e: Embedding,
        context: Vec<usize>,
    }
    let outs: Vec<Result<Out>> = batch
        .par_iter()
        .map(|window| {
            let context = as_tokens(window.context(&corpus.tokens));
            let targets = as_tokens(window.targets(&corpus.tokens));
            let embeddings = encode(&model.encoder, &context)?;
            let e = embeddings.last().expect("non-empty context").clone();
            let example = joint_example(head, &e, &targets)?;
            Ok(Out {
                loss: example.loss,
                first: example.first_token_nll,
                gf: example.grad_factor_logits,
                gg: example.grad_gate_logits,
                gate_probs: example.gate_probs,
                e,
                context,
            })
        })
        .collect();
    let outs: Vec<Out> = outs.into_iter().collect::<Result<_>>()?;

    let b = outs.len() as f64;
    let gate_rows: Vec<Vec<f64>> = outs.iter().map(|o| o.gate_probs.clone()).collect();
    let stats = BalanceStats::from_gate_probs(&gate_rows)?;
    let (_, _, aux_grad_probs) = aux_loss(&gate_rows)?;

    // Fixed-order accumulation into flat buffers: factors, gate, token table.
    let mut factor_grads = vec![vec![0.0; v * dim]; n * r];
    let mut gate_grad = vec![0.0; r * dim];
    let mut table_grad = vec![0.0; model.vocab() * dim];
    let mut joint = 0.0;
    let mut first = 0.0;

    for out in &outs {
        joint += out.loss / b;
        first += out.first / b;
        let e = out.e.values();

        let mut grad_e: Array1<f64> = Array1::zeros(dim);
        for s in 0..n {
            for alpha in 0..r {
                let gf = out.gf.slice(ndarray::s![s, alpha, ..]);
                let buf = &mut factor_grads[s * r + alpha];
                for token in 0..v {
                    let g = gf[token] / b;
                    if g == 0.0 {
                        continue;
                    }
                    for i in 0..dim {
                        buf[token * dim + i] += g * e[i];
                    }
                }
                grad_e += &head.factor_weights[s][alpha].t().dot(&gf.map(|x| x / b));
            }
        }

        let aux_g = aux_gate_logit_grad(&out.gate_probs, &aux_grad_probs);
        let gate_total: Vec<f64> = out
            .gg
            .iter()
            .zip(&aux_g)
            .map(|(&nll_g, &aux)| nll_g / b + aux_coef * aux)
            .collect();
        for alpha in 0..r {
            if gate_total[alpha] == 0.0 {
                continue;
            }
            for i in 0..dim {
                gate_grad[alpha * dim + i] += gate_total[alpha] * e[i];
            }
        }
        grad_e += &head.gate_weights.t().dot(&Array1::from(gate_total));

        if model.encoder.trainable {
            let mut upstream = vec![Array1::zeros(dim); out.context.len()];
            *upstream.last_mut().unwrap() = grad_e;
            let table = encode_grad(&model.encoder, &out.context, &upstream)?;
            for (acc, &g) in table_grad.iter_mut().zip(table.as_slice().unwrap()) {
                *acc += g;
            }
        }
    }

    let mut tensors = factor_grads;
    tensors.push(gate_grad);
    if model.encoder.trainable {
        tensors.push(table_grad);
    }
    Ok(BatchGrads {
        tensors,
        joint_nll: joint,
        first_token_nll: first,
        aux_hard: stats.hard_loss,
        aux_surrogate: stats.surrogate_loss,
        utilization: stats
            .counts
            .iter()
            .map(|&c| c as f64 / stats.total as f64)
            .collect(),
    })
}

fn finetune_batch(
    model: &Model,
    corpus: &Corpus,
    batch: &[Window],
    config: &TrainConfig,
) -> Result<BatchGrads> {
    let head = match &model.head {
        HeadParams::Reduced(head) => head,
        HeadParams::Full(_) => {
            return Err(Error::InvalidArgument(
                "finetune training requires a reduced head".into(),
            ))
        }
    };
    let (n, r, v, dim) = (head.horizon, head.rank, head.vocab, head.embed_dim);

    struct Out {
        loss: f64,
        first: f64,
        joint: f64,
        gf: ndarray::Array3<f64>,
        gg: Vec<f64>,
        gate_probs: Vec<f64>,
        e: Embedding,
    }
    let outs: Vec<Result<Out>> = batch
        .par_iter()
        .map(|window| {
            let context = as_tokens(window.context(&corpus.tokens));
            let targets = as_tokens(window.targets(&corpus.tokens));
            // One pass over context ++ targets: the head reads the last
            // context embedding; the frozen teacher reads each ground-truth-
            // extended prefix.
            let mut full = context.clone();
            full.extend_from_slice(&targets);
            let embeddings = encode(&model.encoder, &full)?;
            let e = embeddings[context.len() - 1].clone();
            let teacher: Vec<LogDistribution> = (0..n)
                .map(|k| {
                    let logits: Array1<f64> = head
                        .shared_head
                        .dot(embeddings[context.len() - 1 + k].values());
                    LogDistribution::from_log_probs(log_softmax(logits.as_slice().unwrap()))
                })
                .collect::<Result<_>>()?;
            let example = finetune_example(
                head,
                &e,
                &teacher,
                &targets,
                config.distill_beta,
                config.discount,
            )?;
            Ok(Out {
                loss: example.loss,
                first: example.first_token_nll,
                joint: example.joint_nll,
                gf: example.grad_factor_logits,
                gg: example.grad_gate_logits,
                gate_probs: example.gate_probs,
                e,
            })
        })
        .collect();
    let outs: Vec<Out> = outs.into_iter().collect::<Result<_>>()?;

    let b = outs.len() as f64;
    let gate_rows: Vec<Vec<f64>> = outs.iter().map(|o| o.gate_probs.clone()).collect();
    let stats = BalanceStats::from_gate_probs(&gate_rows)?;
    let (_, _, aux_grad_probs) = aux_loss(&gate_rows)?;

    let mut adapter_grads = vec![vec![0.0; dim * dim]; n * r];
    let mut gate_grad = vec![0.0; r * dim];
    let mut distill = 0.0;
    let mut first = 0.0;
    let mut joint = 0.0;

    for out in &outs {
        distill += out.loss / b;
        first += out.first / b;
        joint += out.joint / b;
        let e = out.e.values();
        for s in 0..n {
            for alpha in 0..r {
                let gf = out.gf.slice(ndarray::s![s, alpha, ..]);
                // Factor logits are W·(A·e): chain back through the frozen W.
                let back: Array1<f64> = head.shared_head.t().dot(&gf.map(|x| x / b));
                let buf = &mut adapter_grads[s * r + alpha];
                for i in 0..dim {
                    if back[i] == 0.0 {
                        continue;
                    }
                    for j in 0..dim {
                        buf[i * dim + j] += back[i] * e[j];
                    }
                }
            }
        }
        let aux_g = aux_gate_logit_grad(&out.gate_probs, &aux_grad_probs);
        for alpha in 0..r {
            let g = out.gg[alpha] / b + config.aux_coefficient * aux_g[alpha];
            if g == 0.0 {
                continue;
            }
            for j in 0..dim {
                gate_grad[alpha * dim + j] += g * e[j];
            }
        }
    }
    let _ = v;
    if !distill.is_finite() {
        return Err(Error::NonFinite("distillation loss"));
    }

    let mut tensors = adapter_grads;
    tensors.push(gate_grad);
    Ok(BatchGrads {
        tensors,
        joint_nll: joint,
        first_token_nll: first,
        aux_hard: stats.hard_loss,
        aux_surrogate: stats.surrogate_loss,
        utilization: stats
            .counts
            .iter()
            .map(|&c| c as f64 / stats.total as f64)
            .collect(),
    })
}

/// Run minibatch Adam per the config. The model is updated in place; metrics
/// are returned (and the caller may serialize them as JSON-lines).
pub fn train(config: &TrainConfig, corpus: &Corpus, model: &mut Model) -> Result<TrainMetrics> {
    config.validate()?;
    if corpus.vocab != model.vocab() {
        return Err(Error::DimensionMismatch(format!(
            "corpus vocab {} vs model vocab {}",
            corpus.vocab,
            model.vocab()
        )));
    }
    if config.horizon != model.horizon() || config.rank != model.rank() {
        return Err(Error::DimensionMismatch(
            "config rank/horizon do not match the model".into(),
        ));
    }
    match (config.mode, &model.head) {
        (Mode::Scratch, HeadParams::Full(_)) | (Mode::Finetune, HeadParams::Reduced(_)) => {}
        _ => {
            return Err(Error::InvalidArgument(
                "config mode does not match the model's head".into(),
            ))
        }
    }

    let mut steps = Vec::with_capacity(config.steps);
    if config.steps > 0 {
        let mut batches = BatchIter::new(
            corpus,
            config.horizon,
            config.context_len,
            config.batch_size,
            config.seed,
        )?;
        let sizes: Vec<usize> = trainable_slices(model).iter().map(|s| s.len()).collect();
        let mut adam = Adam::new(&sizes);

        for step in 0..config.steps {
            let start = Instant::now();
            let batch = batches.next_batch();
            let grads = match config.mode {
                Mode::Scratch => scratch_batch(model, corpus, &batch, config.aux_coefficient),
                Mode::Finetune => finetune_batch(model, corpus, &batch, config),
            };
            let grads = match grads {
                Ok(g) => g,
                Err(Error::NonFinite(what)) => {
                    return Err(diverged(step, &batch, format!("non-finite {what}")))
                }
                Err(e) => return Err(e),
            };
            if !grads.joint_nll.is_finite() {
                return Err(diverged(step, &batch, format!("loss {}", grads.joint_nll)));
            }

            let lr = if config.warmup_steps > 0 {
                config.learning_rate * ((step + 1) as f64 / config.warmup_steps as f64).min(1.0)
            } else {
                config.learning_rate
            };
            let mut params = trainable_slices(model);
            adam.step(&mut params, &grads.tensors, lr);

            steps.push(StepMetrics {
                step,
                joint_nll: grads.joint_nll,
                first_token_nll: grads.first_token_nll,
                aux_hard: grads.aux_hard,
                aux_surrogate: grads.aux_surrogate,
                utilization: grads.utilization,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            });
        }
    }

    let final_val = evaluate(model, corpus, config.context_len, config.val_windows)?;
    Ok(TrainMetrics { steps, final_val })
}

fn diverged(step: usize, batch: &[Window], detail: String) -> Error {
    let dump: Vec<_> = batch
        .iter()
        .map(|w| serde_json::json!({"context_start": w.context_start, "split_at": w.split_at}))
        .collect();
    Error::Diverged {
        step,
        detail: format!("{detail}; last batch: {}", serde_json::json!(dump)),
    }
}

/// Joint and first-token NLL of the model's draft head over validation
/// windows (capped), plus gate balance stats.
pub fn evaluate(
    model: &Model,
    corpus: &Corpus,
    context_len: usize,
    cap: usize,
) -> Result<Option<ValReport>> {
    let horizon = model.horizon();
    let mut val = windows(corpus, Split::Val, horizon, context_len);
    val.truncate(cap);
    if val.is_empty() {
        return Ok(None);
    }
    let outs: Vec<Result<(f64, f64, Vec<f64>)>> = val
        .par_iter()
        .map(|window| {
            let context = as_tokens(window.context(&corpus.tokens));
            let targets = as_tokens(window.targets(&corpus.tokens));
            let e = model.embed_last(&context)?;
            let dist = model.forward(&e)?;
            let joint = -dist.log_prob(&targets)?;
            let first = -dist.first_token_marginal()?.log_probs()[targets[0]];
            let gate: Vec<f64> = dist.log_weights().iter().map(|x| x.exp()).collect();
            Ok((joint, first, gate))
        })
        .collect();
    let outs: Vec<(f64, f64, Vec<f64>)> = outs.into_iter().collect::<Result<_>>()?;
    let count = outs.len() as f64;
    let joint = outs.iter().map(|o| o.0).sum::<f64>() / count;
    let first = outs.iter().map(|o| o.1).sum::<f64>() / count;
    let gate_rows: Vec<Vec<f64>> = outs.into_iter().map(|o| o.2).collect();
    let balance = BalanceStats::from_gate_probs(&gate_rows)?;
    Ok(Some(ValReport {
        joint_nll: joint,
        first_token_nll: first,
        windows: gate_rows.len(),
        balance,
    }))
}
