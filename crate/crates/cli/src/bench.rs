//! `cphead bench`: speculative-decoding throughput and acceptance statistics
//! over a prompt set drawn from a corpus' validation split.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use cphead::corpus::Corpus;
use cphead::speculative::{self, DecodeMode, SpecDecodeStats};
use cphead::training::checkpoint;

#[derive(Args)]
pub struct BenchArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Token file; prompts come from its validation split.
    #[arg(long)]
    corpus: PathBuf,
    /// JSON file with a BenchConfig; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    prompts: Option<usize>,
    #[arg(long)]
    prompt_len: Option<usize>,
    #[arg(long)]
    max_tokens: Option<usize>,
    /// greedy | stochastic | tree
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    temperature: Option<f64>,
    /// Comma-separated per-level branching for tree mode.
    #[arg(long)]
    branching: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 0.9)]
    train_fraction: f64,
    /// Stats JSON output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub prompts: usize,
    pub prompt_len: usize,
    pub max_tokens: usize,
    pub mode: String,
    pub temperature: f64,
    pub branching: Vec<usize>,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            prompts: 50,
            prompt_len: 16,
            max_tokens: 64,
            mode: "greedy".into(),
            temperature: 1.0,
            branching: vec![5],
            seed: 0,
        }
    }
}

#[derive(Serialize)]
struct Aggregate {
    prompts: usize,
    steps: usize,
    tokens_emitted: usize,
    avg_accepted: f64,
    wall_ms_per_token: f64,
}

#[derive(Serialize)]
struct Report {
    config: BenchConfig,
    aggregate: Aggregate,
    per_prompt: Vec<SpecDecodeStats>,
}

/// Evenly spaced prompt windows from the validation split.
pub fn val_prompts(corpus: &Corpus, count: usize, len: usize) -> Result<Vec<Vec<usize>>> {
    let val = corpus.val_tokens();
    if val.len() < len + 1 {
        bail!(
            "validation split has {} tokens, need at least {}",
            val.len(),
            len + 1
        );
    }
    let span = val.len() - len;
    let mut prompts = Vec::with_capacity(count);
    for i in 0..count {
        let start = i * span / count;
        prompts.push(
            val[start..start + len]
                .iter()
                .map(|&t| t as usize)
                .collect(),
        );
    }
    Ok(prompts)
}

pub fn run(args: BenchArgs) -> Result<()> {
    let mut config = match &args.config {
        None => BenchConfig::default(),
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)
            .context("parsing bench config (unknown keys rejected)")?,
    };
    if let Some(v) = args.prompts {
        config.prompts = v;
    }
    if let Some(v) = args.prompt_len {
        config.prompt_len = v;
    }
    if let Some(v) = args.max_tokens {
        config.max_tokens = v;
    }
    if let Some(v) = args.mode.clone() {
        config.mode = v;
    }
    if let Some(v) = args.temperature {
        config.temperature = v;
    }
    if let Some(list) = &args.branching {
        config.branching = list
            .split(',')
            .map(|s| s.trim().parse::<usize>().context("parsing --branching"))
            .collect::<Result<_>>()?;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }

    let mode = match config.mode.as_str() {
        "greedy" => DecodeMode::Greedy,
        "stochastic" => DecodeMode::Stochastic {
            temperature: config.temperature,
        },
        "tree" => DecodeMode::Tree {
            branching: config.branching.clone(),
        },
        other => bail!("unknown mode {other:?} (greedy|stochastic|tree)"),
    };

    let model = checkpoint::load_model(&args.ckpt)?;
    let corpus = Corpus::load(&args.corpus, args.train_fraction)?;
    if corpus.vocab != model.vocab() {
        bail!(
            "corpus vocab {} does not match checkpoint vocab {}",
            corpus.vocab,
            model.vocab()
        );
    }
    let prompts = val_prompts(&corpus, config.prompts, config.prompt_len)?;

    let mut per_prompt = Vec::with_capacity(prompts.len());
    for (i, prompt) in prompts.iter().enumerate() {
        let (_, stats) = speculative::generate(
            &model,
            prompt,
            config.max_tokens,
            &mode,
            config.seed.wrapping_add(i as u64),
        )?;
        per_prompt.push(stats);
    }

    let steps: usize = per_prompt.iter().map(|s| s.steps).sum();
    let accepted: usize = per_prompt
        .iter()
        .flat_map(|s| s.accepted_per_step.iter())
        .sum();
    let tokens: usize = per_prompt.iter().map(|s| s.tokens_emitted).sum();
    let warm_ms: f64 = per_prompt
        .iter()
        .map(|s| s.wall_ms_per_token * (s.tokens_emitted as f64))
        .sum();
    let aggregate = Aggregate {
        prompts: prompts.len(),
        steps,
        tokens_emitted: tokens,
        avg_accepted: accepted as f64 / steps.max(1) as f64,
        wall_ms_per_token: warm_ms / tokens.max(1) as f64,
    };
    println!(
        "{} prompts, {} steps: avg accepted draft tokens {:.3}, {:.4} ms/token",
        aggregate.prompts, aggregate.steps, aggregate.avg_accepted, aggregate.wall_ms_per_token
    );

    let report = Report {
        config,
        aggregate,
        per_prompt,
    };
    if let Some(path) = &args.out {
        std::fs::write(path, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}
