//! `cphead` — train, sample, and benchmark rank-r CP multi-token heads.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

mod bench;
mod verify;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cphead::corpus::{self, Corpus, MarkovSpec};
use cphead::model::{Mode, Model};
use cphead::speculative::{self, DecodeMode};
use cphead::training::{self, checkpoint, TrainConfig};

#[derive(Parser)]
#[command(
    name = "cphead",
    version,
    about = "Rank-r CP multi-token prediction head"
)]
struct Cli {
    /// Worker thread cap; falls back to CP_SPEC_THREADS, then all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic Markov corpus (token file + chain JSON).
    GenData(GenDataArgs),
    /// Train a CP head from scratch, optionally sweeping over ranks.
    Train(TrainArgs),
    /// Fine-tune a reduced head on top of a pretrained rank-1 model.
    Finetune(FinetuneArgs),
    /// Generate tokens from a checkpoint.
    Sample(SampleArgs),
    /// Benchmark speculative decoding over a prompt set.
    Bench(bench::BenchArgs),
    /// Run the oracle verification suite.
    Verify(verify::VerifyArgs),
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let threads = cli.threads.or_else(|| {
        std::env::var("CP_SPEC_THREADS")
            .ok()
            .and_then(|s| s.parse().ok())
    });
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker threads")?;
    }
    match cli.command {
        Command::GenData(args) => gen_data(args),
        Command::Train(args) => train(args),
        Command::Finetune(args) => finetune(args),
        Command::Sample(args) => sample(args),
        Command::Bench(args) => bench::run(args),
        Command::Verify(args) => verify::run(args),
    }
}

#[derive(Args)]
struct GenDataArgs {
    /// Output token file.
    #[arg(long)]
    out: PathBuf,
    /// Optional JSON dump of the generating chain.
    #[arg(long)]
    spec_out: Option<PathBuf>,
    /// Tokenize a text file (character-level) instead of sampling a chain.
    #[arg(long, conflicts_with_all = ["chain", "spec_out"])]
    from_text: Option<PathBuf>,
    /// Character vocabulary JSON output for --from-text.
    #[arg(long)]
    vocab_out: Option<PathBuf>,
    /// Chain family.
    #[arg(long, default_value = "grouped")]
    chain: String,
    #[arg(long, default_value_t = 32)]
    vocab: usize,
    #[arg(long, default_value_t = 200_000)]
    length: usize,
    /// Cluster count for the grouped chain.
    #[arg(long, default_value_t = 4)]
    groups: usize,
    /// Comma-separated cluster-shift weights for the grouped chain.
    #[arg(long, default_value = "0.05,0.15,0.30,0.50")]
    shift_weights: String,
    /// Within-cluster geometric tilt for the grouped chain.
    #[arg(long, default_value_t = 0.35)]
    within_tilt: f64,
    #[arg(long, default_value_t = 0.9)]
    train_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    if let Some(text_path) = &args.from_text {
        let (corpus, vocab) = corpus::load_text(text_path, args.train_fraction)?;
        corpus.save(&args.out)?;
        if let Some(path) = &args.vocab_out {
            std::fs::write(path, serde_json::to_string_pretty(&vocab)?)?;
        }
        println!(
            "tokenized {} into {} tokens (character vocab {})",
            text_path.display(),
            corpus.tokens.len(),
            corpus.vocab
        );
        return Ok(());
    }
    let spec = match args.chain.as_str() {
        "uniform" => MarkovSpec::uniform(args.vocab, args.seed)?,
        "cycle" => MarkovSpec::cycle(args.vocab, args.seed)?,
        "random" => MarkovSpec::random(args.vocab, args.seed)?,
        "grouped" => {
            let weights: Vec<f64> = args
                .shift_weights
                .split(',')
                .map(|s| s.trim().parse::<f64>().context("parsing --shift-weights"))
                .collect::<Result<_>>()?;
            MarkovSpec::grouped(
                args.vocab,
                args.groups,
                &weights,
                args.within_tilt,
                args.seed,
            )?
        }
        other => bail!("unknown chain family {other:?} (uniform|cycle|random|grouped)"),
    };
    let corpus = corpus::generate_markov(&spec, args.length, args.train_fraction)?;
    corpus.save(&args.out)?;
    if let Some(path) = &args.spec_out {
        std::fs::write(path, serde_json::to_string_pretty(&spec)?)?;
    }
    println!(
        "wrote {} tokens (vocab {}) to {}; entropy rate {:.4} nats/token",
        corpus.tokens.len(),
        corpus.vocab,
        args.out.display(),
        spec.entropy_rate()?
    );
    Ok(())
}

#[derive(Args)]
struct TrainArgs {
    /// Token file produced by gen-data (or any CPTOKS01 file).
    #[arg(long)]
    corpus: PathBuf,
    /// JSON file with a TrainConfig; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Single rank (overridden by --ranks).
    #[arg(long)]
    rank: Option<usize>,
    /// Comma-separated rank sweep; output paths need a {rank} placeholder.
    #[arg(long)]
    ranks: Option<String>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    aux_coefficient: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    context_len: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    decay: Option<f64>,
    #[arg(long)]
    warmup_steps: Option<usize>,
    #[arg(long, default_value_t = 0.9)]
    train_fraction: f64,
    /// Checkpoint output path ({rank} placeholder supported).
    #[arg(long)]
    ckpt_out: PathBuf,
    /// Metrics JSONL output path ({rank} placeholder supported).
    #[arg(long)]
    metrics_out: Option<PathBuf>,
}

fn load_train_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            let config: TrainConfig =
                serde_json::from_str(&text).context("parsing config (unknown keys rejected)")?;
            Ok(config)
        }
    }
}

fn with_rank(path: &Path, rank: usize, multi: bool) -> Result<PathBuf> {
    let s = path.to_string_lossy();
    if s.contains("{rank}") {
        Ok(PathBuf::from(s.replace("{rank}", &rank.to_string())))
    } else if multi {
        bail!("sweeping over ranks requires a {{rank}} placeholder in {s}")
    } else {
        Ok(path.to_path_buf())
    }
}

fn train(args: TrainArgs) -> Result<()> {
    let mut config = load_train_config(args.config.as_deref())?;
    config.mode = Mode::Scratch;
    if let Some(v) = args.horizon {
        config.horizon = v;
    }
    if let Some(v) = args.steps {
        config.steps = v;
    }
    if let Some(v) = args.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = args.learning_rate {
        config.learning_rate = v;
    }
    if let Some(v) = args.aux_coefficient {
        config.aux_coefficient = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = args.context_len {
        config.context_len = v;
    }
    if let Some(v) = args.embed_dim {
        config.embed_dim = v;
    }
    if let Some(v) = args.decay {
        config.decay = v;
    }
    if let Some(v) = args.warmup_steps {
        config.warmup_steps = v;
    }

    let ranks: Vec<usize> = match (&args.ranks, args.rank) {
        (Some(list), _) => list
            .split(',')
            .map(|s| s.trim().parse::<usize>().context("parsing --ranks"))
            .collect::<Result<_>>()?,
        (None, Some(rank)) => vec![rank],
        (None, None) => vec![config.rank],
    };
    let multi = ranks.len() > 1;

    let corpus = Corpus::load(&args.corpus, args.train_fraction)?;
    for &rank in &ranks {
        config.rank = rank;
        config.validate()?;
        let mut model = Model::init_scratch(
            corpus.vocab,
            config.embed_dim,
            config.horizon,
            rank,
            config.decay,
            config.seed,
        )?;
        let metrics = training::train(&config, &corpus, &mut model)?;
        let ckpt_path = with_rank(&args.ckpt_out, rank, multi)?;
        checkpoint::save_model(&model, &ckpt_path)?;
        if let Some(metrics_out) = &args.metrics_out {
            let metrics_path = with_rank(metrics_out, rank, multi)?;
            training::write_metrics_jsonl(
                &metrics_path,
                &serde_json::to_value(&config)?,
                &metrics,
            )?;
        }
        match &metrics.final_val {
            Some(val) => println!(
                "rank {rank}: {} steps; val joint NLL {:.4}, first-token NLL {:.4} -> {}",
                metrics.steps.len(),
                val.joint_nll,
                val.first_token_nll,
                ckpt_path.display()
            ),
            None => println!(
                "rank {rank}: {} steps (no validation split) -> {}",
                metrics.steps.len(),
                ckpt_path.display()
            ),
        }
    }
    Ok(())
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Pretrained rank-1 scratch checkpoint providing the frozen head W.
    #[arg(long)]
    base_ckpt: PathBuf,
    /// JSON file with a TrainConfig; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    aux_coefficient: Option<f64>,
    /// β weight of the KL term.
    #[arg(long)]
    distill_beta: Option<f64>,
    /// Per-position discount γ.
    #[arg(long)]
    discount: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    context_len: Option<usize>,
    /// Start adapters at the identity (warm start at the base head).
    #[arg(long, default_value_t = true)]
    identity_adapters: bool,
    #[arg(long, default_value_t = 0.9)]
    train_fraction: f64,
    #[arg(long)]
    ckpt_out: PathBuf,
    #[arg(long)]
    metrics_out: Option<PathBuf>,
}

fn finetune(args: FinetuneArgs) -> Result<()> {
    let mut config = load_train_config(args.config.as_deref())?;
    config.mode = Mode::Finetune;
    if let Some(v) = args.rank {
        config.rank = v;
    }
    if let Some(v) = args.steps {
        config.steps = v;
    }
    if let Some(v) = args.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = args.learning_rate {
        config.learning_rate = v;
    }
    if let Some(v) = args.aux_coefficient {
        config.aux_coefficient = v;
    }
    if let Some(v) = args.distill_beta {
        config.distill_beta = v;
    }
    if let Some(v) = args.discount {
        config.discount = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = args.context_len {
        config.context_len = v;
    }

    let base = checkpoint::load_model(&args.base_ckpt)?;
    if base.mode != Mode::Scratch || base.rank() != 1 {
        bail!("--base-ckpt must be a rank-1 scratch checkpoint");
    }
    config.horizon = base.horizon();
    config.embed_dim = base.embed_dim();
    config.decay = base.encoder.decay;
    config.validate()?;

    let corpus = Corpus::load(&args.corpus, args.train_fraction)?;
    let mut model = Model::init_finetune(&base, config.rank, args.identity_adapters)?;
    let metrics = training::train(&config, &corpus, &mut model)?;
    checkpoint::save_model(&model, &args.ckpt_out)?;
    if let Some(metrics_out) = &args.metrics_out {
        training::write_metrics_jsonl(metrics_out, &serde_json::to_value(&config)?, &metrics)?;
    }
    if let Some(val) = &metrics.final_val {
        println!(
            "finetuned rank {}: val joint NLL {:.4} -> {}",
            config.rank,
            val.joint_nll,
            args.ckpt_out.display()
        );
    }
    Ok(())
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Comma-separated prompt token ids.
    #[arg(long)]
    prompt: Option<String>,
    /// Prompt as text; requires --vocab-json.
    #[arg(long)]
    prompt_text: Option<String>,
    /// Character vocabulary JSON (from a text corpus).
    #[arg(long)]
    vocab_json: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    max_tokens: usize,
    /// 0 = greedy decoding.
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write generation stats JSON here.
    #[arg(long)]
    stats_out: Option<PathBuf>,
}

fn sample(args: SampleArgs) -> Result<()> {
    let model = checkpoint::load_model(&args.ckpt)?;
    let vocab_map = args
        .vocab_json
        .as_ref()
        .map(|path| -> Result<corpus::CharVocab> {
            Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
        })
        .transpose()?;

    let prompt: Vec<usize> = match (&args.prompt, &args.prompt_text) {
        (Some(ids), None) => ids
            .split(',')
            .map(|s| s.trim().parse::<usize>().context("parsing --prompt"))
            .collect::<Result<_>>()?,
        (None, Some(text)) => {
            let vocab = vocab_map
                .as_ref()
                .context("--prompt-text requires --vocab-json")?;
            vocab
                .encode(text, corpus::UnknownPolicy::Error)?
                .into_iter()
                .map(|t| t as usize)
                .collect()
        }
        _ => bail!("exactly one of --prompt or --prompt-text is required"),
    };

    let mode = if args.temperature == 0.0 {
        DecodeMode::Greedy
    } else {
        DecodeMode::Stochastic {
            temperature: args.temperature,
        }
    };
    let (tokens, stats) =
        speculative::generate(&model, &prompt, args.max_tokens, &mode, args.seed)?;
    let generated = &tokens[prompt.len()..];
    match &vocab_map {
        Some(vocab) => {
            let ids: Vec<u32> = generated.iter().map(|&t| t as u32).collect();
            println!("{}", vocab.decode(&ids)?);
        }
        None => println!(
            "{}",
            generated
                .iter()
                .map(|t| t.to_string())
                .collect::<Vec<_>>()
                .join(",")
        ),
    }
    eprintln!(
        "steps {}, avg accepted draft tokens {:.3}, {:.3} ms/token",
        stats.steps, stats.avg_accepted, stats.wall_ms_per_token
    );
    if let Some(path) = &args.stats_out {
        std::fs::write(path, serde_json::to_string_pretty(&stats)?)?;
    }
    Ok(())
}
