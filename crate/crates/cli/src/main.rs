//! `kat` — one binary for the whole workflow: corpus generation, retrieval
//! index and pseudo-label building, staged training, generation, chat, and
//! evaluation.
//!
//! Exit codes: 0 success, 1 usage, 2 bad data or config, 3 numeric failure.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use kat_core::bm25::Bm25Index;
use kat_core::data::{
    encode_grounded, load_dialogues, load_docs, load_grounded, load_vocab, save_vocab,
    write_jsonl,
};
use kat_core::distant::{build_distant, gamma_for_quantile, NegativeSampling};
use kat_core::eval::{evaluate_model, EvalOptions};
use kat_core::model::{GateClamp, GenerateConfig, KatConfig, KatModel};
use kat_core::text::{Vocab, BOS};
use kat_core::train::{run_tslf, TrainConfig, TslfData};
use kat_core::toy::{self, ToyConfig};
use kat_core::{Error, Result};

#[derive(Parser)]
#[command(name = "kat", version, about = "knowledge-grounded dialogue toolkit")]
struct Cli {
    /// JSON config file with optional "model" and "train" sections.
    #[arg(long, global = true, env = "KAT_CONFIG")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a BM25 index over a document collection.
    BuildIndex(BuildIndexArgs),
    /// Build the pseudo-labeled warm-up corpus from dialogues + documents.
    BuildDp(BuildDpArgs),
    /// Run the staged training pipeline.
    Train(TrainArgs),
    /// Generate responses for a grounded JSONL file.
    Generate(GenerateArgs),
    /// Interactive REPL with retrieval over a document file.
    Chat(ChatArgs),
    /// Score a checkpoint on a grounded test set.
    Evaluate(EvaluateArgs),
    /// Emit the bundled synthetic corpora.
    MakeToyData(MakeToyDataArgs),
}

#[derive(Args)]
struct BuildIndexArgs {
    #[arg(long)]
    docs: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BuildDpArgs {
    #[arg(long)]
    dialogues: PathBuf,
    #[arg(long)]
    docs: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Retrieval-score threshold; kept samples score strictly above it.
    #[arg(long)]
    gamma: Option<f64>,
    /// Instead of an absolute gamma, keep the top fraction of dialogues.
    #[arg(long, conflicts_with = "gamma")]
    gamma_quantile: Option<f64>,
    /// Distractor documents per kept dialogue.
    #[arg(long)]
    negatives: Option<usize>,
    /// Draw distractors from the retrieval top-k instead of at random.
    #[arg(long)]
    topk: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    min_response_tokens: Option<usize>,
    #[arg(long)]
    max_response_tokens: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Comma-separated subset of 1,2,3.
    #[arg(long, default_value = "1,2,3")]
    stages: String,
    #[arg(long)]
    dialogues: Option<PathBuf>,
    #[arg(long)]
    docs: Option<PathBuf>,
    /// Pre-built warm-up corpus; omitted = built in-run.
    #[arg(long)]
    warmup: Option<PathBuf>,
    #[arg(long)]
    finetune: Option<PathBuf>,
    #[arg(long)]
    valid: Option<PathBuf>,
    /// Start from a checkpoint instead of fresh initialization.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    /// Sets the epoch count of every selected stage.
    #[arg(long)]
    epochs: Option<usize>,
    /// Sets the batch size of every selected stage.
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    negatives: Option<usize>,
    #[arg(long)]
    skip_knowledge_pretrain: bool,
    #[arg(long)]
    use_topk_negatives: bool,
    #[arg(long)]
    disable_controller: bool,
    #[arg(long)]
    freeze_encoders_stage2: bool,
    #[arg(long)]
    freeze_encoders_stage3: bool,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Grounded JSONL input; one response is generated per line.
    #[arg(long)]
    input: PathBuf,
    /// Output text file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    beams: usize,
    #[arg(long, default_value_t = 64)]
    max_new_tokens: usize,
    /// Ignore the knowledge lists (gate clamped to zero).
    #[arg(long)]
    no_knowledge: bool,
}

#[derive(Args)]
struct ChatArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Knowledge collection the REPL retrieves from.
    #[arg(long)]
    docs: PathBuf,
    #[arg(long, default_value_t = 4)]
    beams: usize,
    #[arg(long, default_value_t = 64)]
    max_new_tokens: usize,
    /// Documents retrieved per turn.
    #[arg(long, default_value_t = 4)]
    retrieve: usize,
    /// Print the mean gate value per decoder layer after each response.
    #[arg(long)]
    show_gate: bool,
    /// Context turns kept in the rolling window.
    #[arg(long, default_value_t = 6)]
    context_turns: usize,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Where the JSON report goes; stdout keeps the table either way.
    #[arg(long)]
    out_json: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    beams: usize,
    #[arg(long, default_value_t = 64)]
    max_new_tokens: usize,
    /// Add-one smoothing for zero n-gram precisions.
    #[arg(long)]
    smoothing: bool,
    #[arg(long)]
    no_knowledge: bool,
}

#[derive(Args)]
struct MakeToyDataArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    entities: usize,
    #[arg(long, default_value_t = 4)]
    relations: usize,
    #[arg(long, default_value_t = 80)]
    dialogues: usize,
    #[arg(long, default_value_t = 12)]
    chitchat: usize,
    #[arg(long, default_value_t = 40)]
    train: usize,
    #[arg(long, default_value_t = 8)]
    valid: usize,
    #[arg(long, default_value_t = 12)]
    test: usize,
    #[arg(long, default_value_t = 3)]
    distractors: usize,
    #[arg(long, default_value_t = 4096)]
    vocab_size: usize,
}

/// Config file shape: both sections optional, both partial.
#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    model: ModelSection,
    train: Option<TrainConfig>,
}

#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct ModelSection {
    d_model: Option<usize>,
    n_heads: Option<usize>,
    ff_dim: Option<usize>,
    enc_layers: Option<usize>,
    dec_layers: Option<usize>,
    ke_layers: Option<usize>,
    max_src_len: Option<usize>,
    dropout: Option<f64>,
}

impl ModelSection {
    fn to_kat(&self, vocab_size: usize) -> KatConfig {
        let mut cfg = KatConfig::with_vocab(vocab_size);
        if let Some(v) = self.d_model {
            cfg.d_model = v;
        }
        if let Some(v) = self.n_heads {
            cfg.n_heads = v;
        }
        if let Some(v) = self.ff_dim {
            cfg.ff_dim = v;
        }
        if let Some(v) = self.enc_layers {
            cfg.enc_layers = v;
        }
        if let Some(v) = self.dec_layers {
            cfg.dec_layers = v;
        }
        if let Some(v) = self.ke_layers {
            cfg.ke_layers = v;
        }
        if let Some(v) = self.max_src_len {
            cfg.max_src_len = v;
        }
        if let Some(v) = self.dropout {
            cfg.dropout = v;
        }
        cfg
    }
}

fn load_config(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version travel through Err but are not failures
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::NonFinite { .. } => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let config = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::BuildIndex(args) => cmd_build_index(args),
        Command::BuildDp(args) => cmd_build_dp(args),
        Command::Train(args) => cmd_train(args, config),
        Command::Generate(args) => cmd_generate(args),
        Command::Chat(args) => cmd_chat(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::MakeToyData(args) => cmd_make_toy_data(args),
    }
}

fn cmd_build_index(args: BuildIndexArgs) -> Result<()> {
    let docs = load_docs(&args.docs)?;
    let index = Bm25Index::build(&docs)?;
    index.save(&args.out)?;
    println!("indexed {} documents -> {}", docs.len(), args.out.display());
    Ok(())
}

fn cmd_build_dp(args: BuildDpArgs) -> Result<()> {
    let dialogues = load_dialogues(&args.dialogues)?;
    let docs = load_docs(&args.docs)?;
    let index = Bm25Index::build(&docs)?;
    let mut cfg = kat_core::distant::DistantConfig::default();
    if let Some(q) = args.gamma_quantile {
        cfg.gamma = gamma_for_quantile(&dialogues, &index, q);
    }
    if let Some(g) = args.gamma {
        cfg.gamma = g;
    }
    if let Some(n) = args.negatives {
        cfg.negatives = n;
    }
    if args.topk {
        cfg.sampling = NegativeSampling::TopK;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.min_response_tokens = args.min_response_tokens;
    cfg.max_response_tokens = args.max_response_tokens;

    let dp = build_distant(&dialogues, &docs, &index, &cfg)?;
    write_jsonl(&args.out, &dp)?;
    println!(
        "kept {} of {} dialogues (gamma {}) -> {}",
        dp.len(),
        dialogues.len(),
        cfg.gamma,
        args.out.display()
    );
    Ok(())
}

fn parse_stages(s: &str) -> Result<BTreeSet<u8>> {
    let mut out = BTreeSet::new();
    for part in s.split(',') {
        match part.trim() {
            "1" => out.insert(1),
            "2" => out.insert(2),
            "3" => out.insert(3),
            other => {
                return Err(Error::Config(format!(
                    "unknown stage {other:?}; --stages takes a subset of 1,2,3"
                )))
            }
        };
    }
    if out.is_empty() {
        return Err(Error::Config("--stages selected nothing".into()));
    }
    Ok(out)
}

fn cmd_train(args: TrainArgs, config: FileConfig) -> Result<()> {
    let stages = parse_stages(&args.stages)?;
    let mut cfg = config.train.unwrap_or_default();
    if !stages.contains(&1) {
        cfg.skip_stage1 = true;
    }
    if !stages.contains(&2) {
        cfg.skip_stage2 = true;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.epochs {
        cfg.epochs_stage1 = v;
        cfg.epochs_stage2 = v;
        cfg.epochs_stage3 = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size_stage1 = v;
        cfg.batch_size_stage2 = v;
        cfg.batch_size_stage3 = v;
    }
    if let Some(v) = args.fraction {
        cfg.data_fraction = v;
    }
    if let Some(v) = args.patience {
        cfg.patience = v;
    }
    if let Some(v) = args.gamma {
        cfg.distant.gamma = v;
    }
    if let Some(v) = args.negatives {
        cfg.distant.negatives = v;
    }
    cfg.skip_knowledge_pretrain |= args.skip_knowledge_pretrain;
    cfg.use_topk_negatives |= args.use_topk_negatives;
    cfg.disable_controller |= args.disable_controller;
    cfg.freeze_encoders_stage2 |= args.freeze_encoders_stage2;
    cfg.freeze_encoders_stage3 |= args.freeze_encoders_stage3;
    cfg.validate()?;

    let vocab = load_vocab(&args.vocab)?;
    let mut model = match &args.init {
        Some(path) => {
            let model = KatModel::load(path)?;
            if model.cfg.vocab_size != vocab.len() {
                return Err(Error::Config(format!(
                    "checkpoint vocabulary ({}) does not match {} ({})",
                    model.cfg.vocab_size,
                    args.vocab.display(),
                    vocab.len()
                )));
            }
            model
        }
        None => KatModel::new(config.model.to_kat(vocab.len()), cfg.seed)?,
    };

    // a stage reads its corpora only when selected
    let data = TslfData {
        dialogues: match &args.dialogues {
            Some(p) if stages.contains(&1) || (stages.contains(&2) && args.warmup.is_none()) => {
                Some(load_dialogues(p)?)
            }
            _ => None,
        },
        docs: match &args.docs {
            Some(p)
                if (stages.contains(&1) && !cfg.skip_knowledge_pretrain)
                    || (stages.contains(&2) && args.warmup.is_none()) =>
            {
                Some(load_docs(p)?)
            }
            _ => None,
        },
        warmup: match &args.warmup {
            Some(p) if stages.contains(&2) => Some(load_grounded(p)?),
            _ => None,
        },
        finetune: match &args.finetune {
            Some(p) if stages.contains(&3) => Some(load_grounded(p)?),
            _ => None,
        },
        validation: match &args.valid {
            Some(p) => Some(load_grounded(p)?),
            None => None,
        },
    };
    if stages.contains(&3) && data.finetune.is_none() {
        return Err(Error::Config("stage 3 selected but --finetune not given".into()));
    }

    let reports = run_tslf(&mut model, &vocab, &data, &cfg, Some(&args.out_dir))?;
    model.save(args.out_dir.join("final.ckpt"))?;
    save_vocab(args.out_dir.join("vocab.txt"), &vocab)?;
    for r in &reports {
        println!(
            "{}: epochs {}, train loss {:.4}{}",
            r.stage,
            r.epochs_run,
            r.train_loss.last().copied().unwrap_or(f64::NAN),
            r.eval_loss
                .last()
                .map(|v| format!(", valid loss {v:.4}"))
                .unwrap_or_default(),
        );
    }
    println!("artifacts in {}", args.out_dir.display());
    Ok(())
}

fn load_model_and_samples(
    checkpoint: &Path,
    vocab_path: &Path,
    input: &Path,
) -> Result<(KatModel, Vocab, Vec<kat_core::data::EncodedSample>)> {
    let model = KatModel::load(checkpoint)?;
    let vocab = load_vocab(vocab_path)?;
    if model.cfg.vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "checkpoint vocabulary ({}) does not match {} ({})",
            model.cfg.vocab_size,
            vocab_path.display(),
            vocab.len()
        )));
    }
    let grounded = load_grounded(input)?;
    let max_src = model.cfg.max_src_len;
    let samples = encode_grounded(&grounded, &vocab, max_src, max_src, usize::MAX);
    if samples.is_empty() {
        return Err(Error::EmptyCorpus("input file"));
    }
    Ok((model, vocab, samples))
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let (model, vocab, samples) = load_model_and_samples(&args.checkpoint, &args.vocab, &args.input)?;
    let clamp = if args.no_knowledge {
        GateClamp::Zero
    } else {
        GateClamp::Off
    };
    let gen = GenerateConfig {
        beams: args.beams,
        max_new_tokens: args.max_new_tokens,
    };
    let mut lines = Vec::with_capacity(samples.len());
    for s in &samples {
        let ids = model.generate(&s.context, &s.docs, clamp, &gen)?;
        lines.push(vocab.decode(&ids));
    }
    let text = lines.join("\n") + "\n";
    match &args.out {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_chat(args: ChatArgs) -> Result<()> {
    let model = KatModel::load(&args.checkpoint)?;
    let vocab = load_vocab(&args.vocab)?;
    let docs = load_docs(&args.docs)?;
    let index = Bm25Index::build(&docs)?;
    let gen = GenerateConfig {
        beams: args.beams,
        max_new_tokens: args.max_new_tokens,
    };
    let max_src = model.cfg.max_src_len;
    let mut context: Vec<String> = Vec::new();
    let stdin = std::io::stdin();
    let mut stdout = std::io::stdout();
    for line in stdin.lock().lines() {
        let line = line?;
        let turn = line.trim();
        if turn.is_empty() {
            continue;
        }
        context.push(turn.to_string());
        if context.len() > args.context_turns {
            let excess = context.len() - args.context_turns;
            context.drain(..excess);
        }
        let query = context.join(" ");
        let hits = index.topk(&query, args.retrieve);
        let doc_ids: Vec<Vec<usize>> = hits
            .iter()
            .map(|&(i, _)| vocab.encode(&docs[i].text, max_src))
            .filter(|ids| !ids.is_empty())
            .collect();
        let ctx_ids = vocab.encode_context(&context, max_src);
        let ids = model.generate(&ctx_ids, &doc_ids, GateClamp::Off, &gen)?;
        let response = vocab.decode(&ids);
        writeln!(stdout, "{response}")?;
        if args.show_gate {
            let mem = model.encode_memory(&ctx_ids, &doc_ids, GateClamp::Off)?;
            let mut prefix = Vec::with_capacity(ids.len() + 1);
            prefix.push(BOS);
            prefix.extend_from_slice(&ids);
            let trace = model.gate_trace(&mem, &prefix, GateClamp::Off)?;
            let cells: Vec<String> = trace.iter().map(|b| format!("{b:.3}")).collect();
            writeln!(stdout, "gate: {}", cells.join(" "))?;
        }
        stdout.flush()?;
        context.push(response);
    }
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let (model, vocab, samples) = load_model_and_samples(&args.checkpoint, &args.vocab, &args.input)?;
    let opts = EvalOptions {
        clamp: if args.no_knowledge {
            GateClamp::Zero
        } else {
            GateClamp::Off
        },
        gen: GenerateConfig {
            beams: args.beams,
            max_new_tokens: args.max_new_tokens,
        },
        smoothing: args.smoothing,
    };
    let report = evaluate_model(&model, &samples, &vocab, &opts)?;
    print!("{}", report.table());
    if let Some(p) = &args.out_json {
        let json = serde_json::to_string_pretty(&report)? + "\n";
        std::fs::write(p, json)?;
        println!("report -> {}", p.display());
    }
    Ok(())
}

fn cmd_make_toy_data(args: MakeToyDataArgs) -> Result<()> {
    let cfg = ToyConfig {
        seed: args.seed,
        entities: args.entities,
        relations: args.relations,
        dialogues: args.dialogues,
        chitchat: args.chitchat,
        train: args.train,
        valid: args.valid,
        test: args.test,
        distractors: args.distractors,
    };
    let data = toy::generate(&cfg)?;
    data.write_dir(&args.out_dir)?;
    let vocab = data.vocab(args.vocab_size)?;
    save_vocab(args.out_dir.join("vocab.txt"), &vocab)?;
    println!(
        "wrote {} docs, {} dialogues, {}/{}/{} grounded train/valid/test, vocab {} -> {}",
        data.docs.len(),
        data.dialogues.len(),
        data.train.len(),
        data.valid.len(),
        data.test.len(),
        vocab.len(),
        args.out_dir.display()
    );
    Ok(())
}
