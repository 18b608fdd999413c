use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use specdec::bench::{
    byte_tokenize, install_spec_embedding, run_benchmark, BenchConfig, BenchDataset,
};
use specdec::hybrid_engine::{
    generate, mean_acceptance_length, vanilla_greedy, Drafters, EngineConfig, Mode,
};
use specdec::owl_drafter::{DrafterShape, DrafterVariant, DrafterWeights, TreePolicy};
use specdec::suffix_drafter::SuffixParams;
use specdec::target_model::{TargetConfig, TargetModel};
use specdec::trainer::{
    build_training_batch, generate_training_corpus, gradient_check, read_corpus,
    synthetic_seed_texts, train, write_corpus, write_loss_curve, FrozenTarget, Optimizer,
    SpecLabel, TrainConfig,
};

#[derive(Parser)]
#[command(name = "specdec", version, about = "Speculative decoding at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a randomly initialised target model.
    SeedModel(SeedModelArgs),
    /// Build a training corpus from target greedy continuations.
    GenCorpus(GenCorpusArgs),
    /// Train the spec and no-spec drafters.
    Train(TrainArgs),
    /// Decode one prompt and print tokens plus per-step metrics as JSON.
    Generate(GenerateArgs),
    /// Run a dataset across modes and write a JSON report.
    Bench(BenchArgs),
    /// Compare every speculative mode with plain greedy decoding.
    VerifyLossless(VerifyArgs),
    /// Finite-difference check of the training gradients on a tiny instance.
    GradCheck(GradCheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args)]
struct SeedModelArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Real vocabulary size; `[SPEC]` is added on top.
    #[arg(long, default_value_t = 256)]
    vocab: usize,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
}

#[derive(Args)]
struct GenCorpusArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Number of synthetic seed texts.
    #[arg(long, default_value_t = 128)]
    count: usize,
    #[arg(long, default_value_t = 256)]
    text_len: usize,
    #[arg(long, default_value_t = 64)]
    chunk: usize,
    #[arg(long, default_value_t = 256)]
    gen_tokens: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    drafter_dim: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    /// Use every anchor instead of sampling.
    #[arg(long)]
    all_anchors: bool,
    #[arg(long)]
    sgd: bool,
    /// Target the `[SPEC]` term at the token after next.
    #[arg(long)]
    spec_label_next: bool,
}

#[derive(Args)]
struct EngineArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    drafter_spec: Option<PathBuf>,
    #[arg(long)]
    drafter_nospec: Option<PathBuf>,
    /// Tree node budget including the root, before halving for `[SPEC]`.
    #[arg(long)]
    tree_size: Option<usize>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long, value_enum, default_value = "on")]
    spec_token: Switch,
    /// Defaults to depth + 1.
    #[arg(long)]
    threshold_c: Option<f64>,
    #[arg(long)]
    max_spec_factor: Option<f64>,
    #[arg(long)]
    max_suffix_depth: Option<usize>,
    #[arg(long, default_value_t = 128)]
    max_new_tokens: usize,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    engine: EngineArgs,
    #[arg(long, default_value = "hybrid")]
    mode: Mode,
    /// UTF-8 prompt, byte-tokenized.
    #[arg(long, conflicts_with = "prompt_tokens")]
    prompt: Option<String>,
    /// Comma- or space-separated token ids.
    #[arg(long)]
    prompt_tokens: Option<String>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    engine: EngineArgs,
    /// Modes to run; vanilla is always included.
    #[arg(long, value_delimiter = ',', default_value = "owl,owl_nospec,suffix,hybrid")]
    mode: Vec<Mode>,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    engine: EngineArgs,
    #[arg(long, value_delimiter = ',', default_value = "owl,owl_nospec,suffix,hybrid")]
    mode: Vec<Mode>,
    /// Prompts to check; random prompts are drawn when absent.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 120)]
    coords: usize,
    #[arg(long, default_value_t = 1e-3)]
    step: f64,
    #[arg(long)]
    spec_label_next: bool,
}

struct Loaded {
    model: TargetModel,
    spec: Option<DrafterWeights>,
    nospec: Option<DrafterWeights>,
}

impl Loaded {
    fn drafters(&self) -> Drafters<'_> {
        Drafters {
            spec: self.spec.as_ref(),
            nospec: self.nospec.as_ref(),
        }
    }
}

fn load_drafter(path: Option<&Path>) -> anyhow::Result<Option<DrafterWeights>> {
    path.map(|p| DrafterWeights::load(p).with_context(|| format!("loading drafter {}", p.display())))
        .transpose()
}

impl EngineArgs {
    fn load(&self) -> anyhow::Result<Loaded> {
        let model = TargetModel::load(&self.model)
            .with_context(|| format!("loading model {}", self.model.display()))?;
        let spec = load_drafter(self.drafter_spec.as_deref())?;
        let nospec = load_drafter(self.drafter_nospec.as_deref())?;
        let model = install_spec_embedding(
            &model,
            Drafters {
                spec: spec.as_ref(),
                nospec: nospec.as_ref(),
            },
        )?;
        Ok(Loaded { model, spec, nospec })
    }

    fn config(&self, mode: Mode) -> EngineConfig {
        let mut tree = TreePolicy::default();
        if let Some(s) = self.tree_size {
            tree.size = s;
        }
        if let Some(k) = self.top_k {
            tree.top_k = k;
        }
        if let Some(d) = self.depth {
            tree.depth = d;
        }
        let mut suffix = SuffixParams::default();
        if let Some(f) = self.max_spec_factor {
            suffix.max_spec_factor = f;
        }
        if let Some(d) = self.max_suffix_depth {
            suffix.max_suffix_depth = d;
        }
        EngineConfig {
            mode,
            threshold_c: self.threshold_c.unwrap_or((tree.depth + 1) as f64),
            tree,
            spec_enabled: matches!(self.spec_token, Switch::On),
            max_new_tokens: self.max_new_tokens,
            eos: None,
            suffix,
        }
    }
}

fn parse_tokens(s: &str) -> anyhow::Result<Vec<u32>> {
    s.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<u32>().with_context(|| format!("bad token id `{t}`")))
        .collect()
}

fn seed_model(a: SeedModelArgs) -> anyhow::Result<()> {
    let config = TargetConfig {
        vocab_size: a.vocab + 1,
        hidden_size: a.hidden,
        num_layers: a.layers,
        num_heads: a.heads,
        ..TargetConfig::default()
    };
    let model = TargetModel::seeded(config, a.seed)?;
    model.save(&a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn gen_corpus(a: GenCorpusArgs) -> anyhow::Result<()> {
    let model = TargetModel::load(&a.model)?;
    let vocab = model.spec_token() as usize;
    let seeds = synthetic_seed_texts(a.count, a.text_len, vocab, a.seed);
    let corpus = generate_training_corpus(&model, &seeds, a.chunk, a.gen_tokens)?;
    write_corpus(&a.out, &corpus)?;
    println!("wrote {} sequences to {}", corpus.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> anyhow::Result<()> {
    let model = TargetModel::load(&a.model)?;
    let corpus = read_corpus(&a.corpus)?;
    let mut config = TrainConfig {
        seed: a.seed,
        ..TrainConfig::default()
    };
    if let Some(v) = a.depth {
        config.depth = v;
    }
    if let Some(v) = a.iterations {
        config.iterations = v;
    }
    if let Some(v) = a.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = a.learning_rate {
        config.learning_rate = v;
    }
    if let Some(v) = a.drafter_dim {
        config.drafter_dim = v;
    }
    if let Some(v) = a.seq_len {
        config.seq_len = v;
    }
    if a.all_anchors {
        config.anchors_per_seq = None;
    }
    if a.sgd {
        config.optimizer = Optimizer::Sgd;
    }
    if a.spec_label_next {
        config.spec_label = SpecLabel::Next;
    }
    fs::create_dir_all(&a.out)?;
    let out = train(&model, &corpus, &config)?;
    out.spec.weights.save(a.out.join("drafter_spec.bin"))?;
    out.nospec.weights.save(a.out.join("drafter_nospec.bin"))?;
    write_loss_curve(a.out.join("loss_spec.csv"), &out.spec.losses)?;
    write_loss_curve(a.out.join("loss_nospec.csv"), &out.nospec.losses)?;
    fs::write(a.out.join("train_config.json"), serde_json::to_string_pretty(&config)?)?;
    println!(
        "final loss: spec {:.4}, nospec {:.4}; wrote {}",
        out.spec.losses.last().copied().unwrap_or(f64::NAN),
        out.nospec.losses.last().copied().unwrap_or(f64::NAN),
        a.out.display()
    );
    Ok(())
}

fn generate_cmd(a: GenerateArgs) -> anyhow::Result<()> {
    let prompt = match (&a.prompt, &a.prompt_tokens) {
        (Some(text), None) => byte_tokenize(text),
        (None, Some(ids)) => parse_tokens(ids)?,
        _ => bail!("give exactly one of --prompt and --prompt-tokens"),
    };
    let loaded = a.engine.load()?;
    let config = a.engine.config(a.mode);
    let g = generate(&loaded.model, loaded.drafters(), &prompt, &config)?;
    let mean = mean_acceptance_length(&g.steps).ok();
    let doc = serde_json::json!({
        "mode": a.mode,
        "config": config,
        "tokens": g.tokens,
        "mean_acceptance_length": mean,
        "steps": g.steps,
    });
    println!("{}", serde_json::to_string_pretty(&doc)?);
    Ok(())
}

fn bench_cmd(a: BenchArgs) -> anyhow::Result<()> {
    let dataset = BenchDataset::load(&a.dataset)
        .with_context(|| format!("loading dataset {}", a.dataset.display()))?;
    let loaded = a.engine.load()?;
    let config = BenchConfig {
        modes: a.mode.clone(),
        engine: a.engine.config(Mode::Hybrid),
    };
    let report = run_benchmark(&dataset, &loaded.model, loaded.drafters(), &config)?;
    fs::write(&a.out, serde_json::to_string_pretty(&report)?)?;
    for s in &report.aggregate {
        println!(
            "{:<11} mean acceptance length {}  steps {}  linear {:.3}",
            s.mode.name(),
            s.mean_acceptance_length
                .map_or_else(|| "n/a".to_string(), |m| format!("{m:.3}")),
            s.total_steps,
            s.linear_fraction
        );
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn verify_cmd(a: VerifyArgs) -> anyhow::Result<bool> {
    let loaded = a.engine.load()?;
    let prompts: Vec<(String, Vec<u32>)> = match &a.dataset {
        Some(p) => {
            let d = BenchDataset::load(p)?;
            d.validate_for(&loaded.model)?;
            d.examples.into_iter().map(|e| (e.id, e.prompt_tokens)).collect()
        }
        None => {
            let vocab = loaded.model.spec_token();
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            (0..a.count)
                .map(|i| {
                    let len = rng.gen_range(4..=48);
                    let p = (0..len).map(|_| rng.gen_range(0..vocab)).collect();
                    (format!("random-{i}"), p)
                })
                .collect()
        }
    };
    let mut failures = 0;
    for (id, prompt) in &prompts {
        let reference = vanilla_greedy(&loaded.model, prompt, a.engine.max_new_tokens, None)?;
        for &mode in &a.mode {
            let g = generate(&loaded.model, loaded.drafters(), prompt, &a.engine.config(mode))?;
            if g.tokens != reference {
                let at = g
                    .tokens
                    .iter()
                    .zip(&reference)
                    .position(|(x, y)| x != y)
                    .unwrap_or(g.tokens.len().min(reference.len()));
                println!("MISMATCH {id} mode {mode}: first difference at output index {at}");
                failures += 1;
            }
        }
    }
    println!(
        "checked {} prompts x {} modes: {} mismatches",
        prompts.len(),
        a.mode.len(),
        failures
    );
    Ok(failures == 0)
}

fn grad_check_cmd(a: GradCheckArgs) -> anyhow::Result<bool> {
    let config = TargetConfig {
        vocab_size: 11,
        hidden_size: 8,
        num_layers: 2,
        num_heads: 2,
        max_positions: 64,
    };
    let model = TargetModel::seeded(config, a.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed ^ 0x9c);
    let seq: Vec<u32> = (0..12).map(|_| rng.gen_range(0..10)).collect();
    let batch = build_training_batch(&model, &seq)?;
    let shape = DrafterShape {
        vocab_size: config.vocab_size,
        model_dim: config.hidden_size,
        dim: 6,
        depth: 3,
    };
    let label = if a.spec_label_next {
        SpecLabel::Next
    } else {
        SpecLabel::Current
    };
    let target = FrozenTarget::new(&model);
    let weights = DrafterWeights::seeded(DrafterVariant::Spec, shape, a.seed);
    let report = gradient_check(
        &target,
        &batch,
        &weights,
        Some(model.spec_embedding()),
        label,
        a.coords,
        a.step,
        a.seed,
    )?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    let ok = report.max_rel_error < 1e-3;
    info!("gradient check {}", if ok { "passed" } else { "failed" });
    Ok(ok)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::SeedModel(a) => seed_model(a).map(|_| true),
        Command::GenCorpus(a) => gen_corpus(a).map(|_| true),
        Command::Train(a) => train_cmd(a).map(|_| true),
        Command::Generate(a) => generate_cmd(a).map(|_| true),
        Command::Bench(a) => bench_cmd(a).map(|_| true),
        Command::VerifyLossless(a) => verify_cmd(a),
        Command::GradCheck(a) => grad_check_cmd(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
