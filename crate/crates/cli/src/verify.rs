//! `cphead verify`: the oracle suite — materialization equivalence,
//! conditioning correctness, finite-difference gradient checks, sampler
//! exactness, and greedy losslessness. Prints one PASS/FAIL line per check
//! and writes a machine-readable report.

use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::Args;
use ndarray::{Array1, Array3, IxDyn};
use serde::Serialize;

use cphead::cp::{CPJointDist, LogDistribution};
use cphead::encoder::{encode, encode_grad, Embedding, EncoderParams};
use cphead::heads::FullHeadParams;
use cphead::model::Model;
use cphead::rng::SplitMix64;
use cphead::sampler::sample_sequence_with;
use cphead::speculative::{self, DecodeMode};
use cphead::training::{aux_gate_logit_grad, aux_loss, distill_loss, joint_nll_grad};

#[derive(Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Smaller instance counts and sample sizes.
    #[arg(long)]
    quick: bool,
    /// Machine-readable report output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct Check {
    check: String,
    pass: bool,
    detail: String,
}

fn random_dist(n: usize, r: usize, v: usize, rng: &mut SplitMix64) -> CPJointDist {
    let weights: Vec<f64> = (0..r).map(|_| rng.next_range(-2.0, 2.0)).collect();
    let mut factors = Array3::zeros((n, r, v));
    for x in factors.iter_mut() {
        *x = rng.next_range(-2.5, 2.5);
    }
    CPJointDist::from_logits(&weights, &factors).unwrap()
}

fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-3)
}

fn materialization_check(instances: usize, rng: &mut SplitMix64) -> Check {
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let n = 1 + rng.next_index(3);
        let r = 1 + rng.next_index(4);
        let v = 2 + rng.next_index(5);
        let dist = random_dist(n, r, v, rng);
        let tensor = dist.materialize().unwrap();
        let mut tokens = vec![0usize; n];
        loop {
            let lp = dist.log_prob(&tokens).unwrap();
            worst = worst.max((lp.exp() - tensor[IxDyn(&tokens)]).abs());
            let mut axis = n;
            let mut done = true;
            while axis > 0 {
                axis -= 1;
                tokens[axis] += 1;
                if tokens[axis] < v {
                    done = false;
                    break;
                }
                tokens[axis] = 0;
            }
            if done {
                break;
            }
        }
    }
    Check {
        check: "materialization_equivalence".into(),
        pass: worst <= 1e-9,
        detail: format!("max |exp(log_prob) - tensor| = {worst:.3e} over {instances} instances"),
    }
}

fn conditioning_check(instances: usize, rng: &mut SplitMix64) -> Check {
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let v = 4 + rng.next_index(3);
        let dist = random_dist(3, 3, v, rng);
        let tensor = dist.materialize().unwrap();
        let observed = rng.next_index(v);
        let cond = dist.condition_on(0, observed).unwrap();
        let marginal = cond.marginal_at(1).unwrap();
        for b in 0..v {
            let mut numer = 0.0;
            let mut denom = 0.0;
            for bb in 0..v {
                for c in 0..v {
                    let mass = tensor[IxDyn(&[observed, bb, c])];
                    if bb == b {
                        numer += mass;
                    }
                    denom += mass;
                }
            }
            worst = worst.max((marginal.log_probs()[b].exp() - numer / denom).abs());
        }
    }
    Check {
        check: "conditioning_correctness".into(),
        pass: worst <= 1e-9,
        detail: format!("max conditional error {worst:.3e} over {instances} instances"),
    }
}

fn joint_gradient_check(instances: usize, rng: &mut SplitMix64) -> Check {
    let mut worst = 0.0f64;
    let h = 1e-5;
    for seed in 0..instances {
        let mut prng = rng.derive(seed as u64);
        let params = FullHeadParams::init(2, 3, 6, 8, &mut prng);
        let e = Embedding::new(Array1::from_shape_fn(8, |_| prng.next_range(-1.0, 1.0)));
        let targets = [prng.next_index(6), prng.next_index(6)];
        let grad = joint_nll_grad(&params, &e, &targets).unwrap();
        let loss_of = |p: &FullHeadParams| joint_nll_grad(p, &e, &targets).unwrap().loss;
        // Spot-check a deterministic subset of coordinates.
        for alpha in 0..3 {
            for token in 0..6 {
                let i = (alpha + token) % 8;
                let s = (alpha + token) % 2;
                let mut plus = params.clone();
                plus.factor_weights[s][alpha][[token, i]] += h;
                let mut minus = params.clone();
                minus.factor_weights[s][alpha][[token, i]] -= h;
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                worst = worst.max(rel_err(grad.factor[s][alpha][[token, i]], fd));
            }
            for i in 0..8 {
                let mut plus = params.clone();
                plus.gate_weights[[alpha, i]] += h;
                let mut minus = params.clone();
                minus.gate_weights[[alpha, i]] -= h;
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                worst = worst.max(rel_err(grad.gate[[alpha, i]], fd));
            }
        }
    }
    Check {
        check: "joint_nll_gradient".into(),
        pass: worst <= 1e-5,
        detail: format!("max relative error {worst:.3e} over {instances} instances"),
    }
}

fn encoder_gradient_check(instances: usize, rng: &mut SplitMix64) -> Check {
    let mut worst = 0.0f64;
    let h = 1e-5;
    for seed in 0..instances {
        let mut prng = rng.derive(1700 + seed as u64);
        let params = EncoderParams::init(6, 8, 0.7, &mut prng).unwrap();
        let tokens: Vec<usize> = (0..7).map(|_| prng.next_index(6)).collect();
        let upstream: Vec<Array1<f64>> = (0..7)
            .map(|_| Array1::from_shape_fn(8, |_| prng.next_range(-1.0, 1.0)))
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
        for v in 0..6 {
            for i in 0..8 {
                let mut plus = params.clone();
                plus.token_table[[v, i]] += h;
                let mut minus = params.clone();
                minus.token_table[[v, i]] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                worst = worst.max(rel_err(analytic[[v, i]], fd));
            }
        }
    }
    Check {
        check: "encoder_gradient".into(),
        pass: worst <= 1e-5,
        detail: format!("max relative error {worst:.3e} over {instances} instances"),
    }
}

fn aux_gradient_check(instances: usize, rng: &mut SplitMix64) -> Check {
    let mut worst = 0.0f64;
    let h = 1e-6;
    for seed in 0..instances {
        let mut prng = rng.derive(2900 + seed as u64);
        let logits: Vec<Vec<f64>> = (0..8)
            .map(|_| (0..4).map(|_| prng.next_range(-1.0, 1.0)).collect())
            .collect();
        let surrogate = |logits: &[Vec<f64>]| -> f64 {
            let probs: Vec<Vec<f64>> = logits.iter().map(|l| cphead::math::softmax(l)).collect();
            aux_loss(&probs).unwrap().1
        };
        let probs: Vec<Vec<f64>> = logits.iter().map(|l| cphead::math::softmax(l)).collect();
        let (_, _, grad_probs) = aux_loss(&probs).unwrap();
        for b in 0..8 {
            let analytic = aux_gate_logit_grad(&probs[b], &grad_probs);
            for alpha in 0..4 {
                let mut plus = logits.clone();
                plus[b][alpha] += h;
                let mut minus = logits.clone();
                minus[b][alpha] -= h;
                let fd = (surrogate(&plus) - surrogate(&minus)) / (2.0 * h);
                worst = worst.max(
                    (analytic[alpha] - fd).abs() / analytic[alpha].abs().max(fd.abs()).max(1e-6),
                );
            }
        }
    }
    Check {
        check: "aux_surrogate_gradient".into(),
        pass: worst <= 1e-4,
        detail: format!("max relative error {worst:.3e} over {instances} instances"),
    }
}

fn distill_gradient_check(instances: usize, rng: &mut SplitMix64) -> Check {
    let mut worst = 0.0f64;
    let h = 1e-6;
    for seed in 0..instances {
        let mut prng = rng.derive(4100 + seed as u64);
        let draft_logits: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..5).map(|_| prng.next_range(-1.5, 1.5)).collect())
            .collect();
        let teacher: Vec<LogDistribution> = (0..2)
            .map(|_| {
                let logits: Vec<f64> = (0..5).map(|_| prng.next_range(-1.5, 1.5)).collect();
                LogDistribution::from_logits(&logits).unwrap()
            })
            .collect();
        let targets = [prng.next_index(5), prng.next_index(5)];
        let value_of = |logits: &[Vec<f64>]| -> f64 {
            let draft: Vec<LogDistribution> = logits
                .iter()
                .map(|l| LogDistribution::from_logits(l).unwrap())
                .collect();
            distill_loss(&draft, &teacher, &targets, 0.9, 0.9)
                .unwrap()
                .value
        };
        let draft: Vec<LogDistribution> = draft_logits
            .iter()
            .map(|l| LogDistribution::from_logits(l).unwrap())
            .collect();
        let out = distill_loss(&draft, &teacher, &targets, 0.9, 0.9).unwrap();
        for k in 0..2 {
            for u in 0..5 {
                let mut plus = draft_logits.clone();
                plus[k][u] += h;
                let mut minus = draft_logits.clone();
                minus[k][u] -= h;
                let fd = (value_of(&plus) - value_of(&minus)) / (2.0 * h);
                worst = worst.max(rel_err(out.logit_grads[k][u], fd));
            }
        }
    }
    Check {
        check: "distill_gradient".into(),
        pass: worst <= 1e-4,
        detail: format!("max relative error {worst:.3e} over {instances} instances"),
    }
}

fn sampler_check(samples: usize, tol: f64, rng: &mut SplitMix64) -> Check {
    let dist = random_dist(2, 3, 4, rng);
    let tensor = dist.materialize().unwrap();
    let mut counts = vec![vec![0usize; 4]; 4];
    let mut srng = rng.derive(0x5456);
    for _ in 0..samples {
        let seq = sample_sequence_with(&dist, 1.0, &mut srng).unwrap();
        counts[seq[0]][seq[1]] += 1;
    }
    let mut tv = 0.0;
    for a in 0..4 {
        for b in 0..4 {
            tv += (counts[a][b] as f64 / samples as f64 - tensor[IxDyn(&[a, b])]).abs();
        }
    }
    tv /= 2.0;
    Check {
        check: "sampler_exactness".into(),
        pass: tv <= tol,
        detail: format!("TV distance {tv:.4} over {samples} samples (tolerance {tol})"),
    }
}

fn losslessness_check(prompts: usize, rng: &mut SplitMix64) -> Check {
    let mut failures = 0usize;
    for seed in 0..prompts {
        let model =
            Model::init_scratch(6, 16, 3, 3, 0.7, rng.derive(seed as u64).next_u64()).unwrap();
        let prompt: Vec<usize> = (0..5).map(|_| rng.next_index(6)).collect();
        let (tokens, _) =
            speculative::generate(&model, &prompt, 40, &DecodeMode::Greedy, 0).unwrap();
        let base = speculative::base_greedy_decode(&model, &prompt, 40).unwrap();
        if tokens != base {
            failures += 1;
        }
    }
    Check {
        check: "greedy_losslessness".into(),
        pass: failures == 0,
        detail: format!("{failures}/{prompts} prompts diverged from base greedy decoding"),
    }
}

pub fn run(args: VerifyArgs) -> Result<()> {
    let mut rng = SplitMix64::new(args.seed).derive(0x766572696679);
    let scale = if args.quick { 1usize } else { 4 };
    let checks = vec![
        materialization_check(50 * scale, &mut rng),
        conditioning_check(12 * scale, &mut rng),
        joint_gradient_check(3 * scale, &mut rng),
        encoder_gradient_check(2 * scale, &mut rng),
        aux_gradient_check(2 * scale, &mut rng),
        distill_gradient_check(3 * scale, &mut rng),
        sampler_check(
            if args.quick { 50_000 } else { 200_000 },
            if args.quick { 0.02 } else { 0.01 },
            &mut rng,
        ),
        losslessness_check(5 * scale, &mut rng),
    ];

    let mut all_pass = true;
    for check in &checks {
        let status = if check.pass { "PASS" } else { "FAIL" };
        println!("{status} {}: {}", check.check, check.detail);
        all_pass &= check.pass;
    }
    if let Some(path) = &args.out {
        std::fs::write(path, serde_json::to_string_pretty(&checks)?)?;
    }
    if !all_pass {
        bail!("verification failed");
    }
    Ok(())
}
