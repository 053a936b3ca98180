//! `llavul`: tokenizer training, both training stages, generation,
//! evaluation, QA generation, corpus statistics, classification and
//! ablations.

mod config;
mod errors;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use llavul::classifier::{balance_corpus, evaluate_classifier, train_classifier, VulnClassifier};
use llavul::data::{
    apply_split, build_pretrain_corpus, compute_stats, load_finetune_corpus, load_labeled_corpus, read_jsonl,
    select_split, split_codes, split_corpus, write_jsonl, CodeSummaryPair, ConversationSample, LabeledCode, Split,
};
use llavul::metrics::{evaluate_corpus, MetricReport, TableEmbedder};
use llavul::model::{load_checkpoint, DecodeConfig};
use llavul::qagen::{generate_dataset, load_records, GeneratorClient, HttpClient, OfflineTemplate, QagenConfig};
use llavul::synthetic::tokenizer_corpus;
use llavul::trainer::{ablation_run, parse_variants, run_stage, AblationSetup, StageConfig};
use llavul::{LlavulModel, ModelConfig, TokenizerModel};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{resolve, Overrides, RunConfig};
use crate::errors::{classify, error_json, CliError, Kind};

#[derive(Parser)]
#[command(name = "llavul", version, about = "Code vulnerability question answering: train, generate, evaluate")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config file layered over the defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Seed for every random choice in the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true)]
    max_code_tokens: Option<usize>,
    /// Config override, e.g. `--set pretrain.lr=1e-3`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Train a byte-level BPE tokenizer on the text fields of JSONL files.
    TokenizerTrain {
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        vocab_size: Option<usize>,
    },
    /// Stage 1: align the projector on (code, summary) pairs.
    Pretrain {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        tokenizer: Option<PathBuf>,
    },
    /// Stage 2: LoRA fine-tuning on QA conversations.
    Finetune {
        #[arg(long)]
        data: PathBuf,
        /// Stage-1 checkpoint to continue from.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Start from a fresh model instead of a stage-1 checkpoint.
        #[arg(long)]
        from_scratch: bool,
        #[arg(long)]
        tokenizer: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
    },
    /// Answer one question about one code file.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        code: PathBuf,
        #[arg(long)]
        question: String,
    },
    /// Generate answers for a corpus split and score them.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Also write per-answer scores to scores.jsonl.
        #[arg(long)]
        rows: bool,
    },
    /// Build QA conversations from (code, description) records.
    Qagen {
        #[arg(long)]
        records: PathBuf,
        /// Completion service URL; without one the offline template is used.
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long)]
        turn_cap: Option<usize>,
    },
    /// Corpus statistics table.
    Stats {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long, default_value = "corpus")]
        title: String,
    },
    /// Train the encoder-only vulnerability classifier on a balanced sample.
    ClassifyTrain {
        #[arg(long)]
        data: PathBuf,
        /// Model checkpoint whose encoder initialises the classifier.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        tokenizer: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
    },
    /// Score a classifier checkpoint on labelled records.
    ClassifyEval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Train and evaluate several pipeline variants from one initialisation.
    Ablate {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated: full, truncated_code:N, only_pretraining, only_llm_text_inline.
        #[arg(long, default_value = "full,truncated_code:100,only_pretraining")]
        variants: String,
        #[arg(long)]
        tokenizer: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "train")]
        train_split: SplitArg,
        #[arg(long, value_enum, default_value = "test")]
        eval_split: SplitArg,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::TokenizerTrain { .. } => "tokenizer-train",
            Command::Pretrain { .. } => "pretrain",
            Command::Finetune { .. } => "finetune",
            Command::Generate { .. } => "generate",
            Command::Evaluate { .. } => "evaluate",
            Command::Qagen { .. } => "qagen",
            Command::Stats { .. } => "stats",
            Command::ClassifyTrain { .. } => "classify-train",
            Command::ClassifyEval { .. } => "classify-eval",
            Command::Ablate { .. } => "ablate",
        }
    }
}

/// JSON-lines event sink: stderr plus `<out>/events.jsonl`.
struct Events {
    file: BufWriter<File>,
}

impl Events {
    fn emit(&mut self, event: &str, fields: Value) {
        let mut obj = serde_json::Map::new();
        obj.insert("event".into(), event.into());
        if let Value::Object(m) = fields {
            obj.extend(m);
        }
        let line = Value::Object(obj).to_string();
        eprintln!("{line}");
        let _ = writeln!(self.file, "{line}");
        let _ = self.file.flush();
    }
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    events: Events,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        write_pretty(&self.path(name), value)
    }
}

fn write_pretty<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::new(Kind::MissingInput, format!("{what} not found: {}", path.display())).into())
    }
}

fn load_tokenizer(path: &Path) -> Result<TokenizerModel> {
    require(path, "tokenizer")?;
    TokenizerModel::load(path).with_context(|| format!("loading tokenizer {}", path.display()))
}

fn train_tokenizer(ctx: &mut Ctx, texts: &[String]) -> Result<TokenizerModel> {
    let tok = TokenizerModel::train(texts, ctx.cfg.tokenizer.vocab_size)?;
    ctx.events.emit("tokenizer_trained", json!({"vocab_size": tok.vocab_size(), "texts": texts.len()}));
    Ok(tok)
}

fn new_model(cfg: &RunConfig, tok: TokenizerModel) -> Result<LlavulModel<f32>> {
    let mc = ModelConfig { vocab_size: tok.vocab_size(), ..cfg.model.clone() };
    Ok(LlavulModel::new(mc, tok)?)
}

fn load_model(path: &Path) -> Result<LlavulModel<f32>> {
    require(path, "checkpoint")?;
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn to_split(s: SplitArg) -> Option<Split> {
    match s {
        SplitArg::Train => Some(Split::Train),
        SplitArg::Val => Some(Split::Val),
        SplitArg::Test => Some(Split::Test),
        SplitArg::All => None,
    }
}

fn split_name(s: SplitArg) -> &'static str {
    match s {
        SplitArg::Train => "train",
        SplitArg::Val => "val",
        SplitArg::Test => "test",
        SplitArg::All => "all",
    }
}

fn empty_split(which: SplitArg) -> anyhow::Error {
    CliError::new(
        Kind::Schema,
        format!("the {} split is empty; pass --split all or mark splits in the data", split_name(which)),
    )
    .into()
}

/// Samples of one split. Corpora without split marks are split by code with
/// the configured ratios and seed.
fn select_samples(mut corpus: Vec<ConversationSample>, which: SplitArg, cfg: &RunConfig) -> Result<Vec<ConversationSample>> {
    let Some(split) = to_split(which) else { return Ok(corpus) };
    if corpus.iter().all(|s| s.split.is_none()) {
        let assignment = split_corpus(&corpus, cfg.split, cfg.seed)?;
        apply_split(&mut corpus, &assignment);
    }
    let out = select_split(&corpus, split);
    if out.is_empty() {
        return Err(empty_split(which));
    }
    Ok(out)
}

fn select_labeled(mut corpus: Vec<LabeledCode>, which: SplitArg, cfg: &RunConfig) -> Result<Vec<LabeledCode>> {
    let Some(split) = to_split(which) else { return Ok(corpus) };
    if corpus.iter().all(|s| s.split.is_none()) {
        let codes: Vec<&str> = corpus.iter().map(|s| s.code.as_str()).collect();
        let assignment = split_codes(&codes, cfg.split, cfg.seed)?;
        for (s, a) in corpus.iter_mut().zip(assignment) {
            s.split = Some(a);
        }
    }
    let out: Vec<LabeledCode> = corpus.into_iter().filter(|s| s.split == Some(split)).collect();
    if out.is_empty() {
        return Err(empty_split(which));
    }
    Ok(out)
}

/// Every string a tokenizer should see from one JSONL record.
fn record_texts(v: &Value, out: &mut Vec<String>) {
    for key in ["code", "summary", "description"] {
        if let Some(s) = v.get(key).and_then(Value::as_str) {
            out.push(s.to_string());
        }
    }
    if let Some(turns) = v.get("turns").and_then(Value::as_array) {
        for t in turns {
            for key in ["q", "a"] {
                if let Some(s) = t.get(key).and_then(Value::as_str) {
                    out.push(s.to_string());
                }
            }
        }
    }
}

fn read_pairs(path: &Path) -> Result<Vec<CodeSummaryPair>> {
    require(path, "pairs file")?;
    Ok(read_jsonl(path)?.into_iter().map(|(_, p)| p).collect())
}

fn stage_hook<'e>(events: &'e mut Events, stage: &'static str) -> impl FnMut(usize, f64) + 'e {
    move |step, loss| events.emit("step", json!({"stage": stage, "step": step, "loss": loss}))
}

fn cmd_tokenizer_train(ctx: &mut Ctx, input: &[PathBuf], vocab_size: Option<usize>) -> Result<()> {
    let mut texts = Vec::new();
    for path in input {
        require(path, "input")?;
        for (_, v) in read_jsonl::<Value>(path)? {
            record_texts(&v, &mut texts);
        }
    }
    if let Some(v) = vocab_size {
        ctx.cfg.tokenizer.vocab_size = v;
    }
    let tok = train_tokenizer(ctx, &texts)?;
    let path = ctx.path("tokenizer.json");
    tok.save(&path)?;
    ctx.events.emit("saved", json!({"path": path}));
    Ok(())
}

fn cmd_pretrain(ctx: &mut Ctx, pairs: &Path, tokenizer: Option<&Path>) -> Result<()> {
    let corpus = build_pretrain_corpus(&read_pairs(pairs)?);
    ctx.events.emit("corpus", json!({"samples": corpus.samples.len(), "skipped_pairs": corpus.skipped}));
    let tok = match tokenizer {
        Some(p) => load_tokenizer(p)?,
        None => train_tokenizer(ctx, &tokenizer_corpus(&corpus.samples))?,
    };
    let mut model = new_model(&ctx.cfg, tok)?;
    let stage = StageConfig { stage: llavul::Stage::Pretrain, ..ctx.cfg.pretrain.clone() };
    let report = {
        let mut hook = stage_hook(&mut ctx.events, "pretrain");
        run_stage(&mut model, &corpus.samples, &stage, Some(&ctx.out), Some(&mut hook))?
    };
    ctx.write_json("pretrain_report.json", &report)?;
    ctx.events.emit(
        "stage_done",
        json!({"stage": "pretrain", "steps": report.steps, "final_loss": report.final_loss(), "checkpoints": report.checkpoints}),
    );
    Ok(())
}

fn cmd_finetune(
    ctx: &mut Ctx,
    data: &Path,
    checkpoint: Option<&Path>,
    from_scratch: bool,
    tokenizer: Option<&Path>,
    split: SplitArg,
) -> Result<()> {
    require(data, "data file")?;
    let all = load_finetune_corpus(data)?;
    let mut model = match (checkpoint, from_scratch) {
        (Some(p), _) => load_model(p)?,
        (None, true) => {
            let tok = match tokenizer {
                Some(p) => load_tokenizer(p)?,
                None => train_tokenizer(ctx, &tokenizer_corpus(&all))?,
            };
            new_model(&ctx.cfg, tok)?
        }
        (None, false) => {
            return Err(CliError::new(
                Kind::StageOrder,
                "fine-tuning needs a stage-1 checkpoint (--checkpoint) or an explicit --from-scratch",
            )
            .into())
        }
    };
    let corpus = select_samples(all, split, &ctx.cfg)?;
    ctx.events.emit("corpus", json!({"samples": corpus.len(), "split": split_name(split)}));
    let stage = StageConfig {
        stage: llavul::Stage::Finetune,
        from_scratch: from_scratch || ctx.cfg.finetune.from_scratch,
        ..ctx.cfg.finetune.clone()
    };
    let report = {
        let mut hook = stage_hook(&mut ctx.events, "finetune");
        run_stage(&mut model, &corpus, &stage, Some(&ctx.out), Some(&mut hook))?
    };
    ctx.write_json("finetune_report.json", &report)?;
    ctx.events.emit(
        "stage_done",
        json!({"stage": "finetune", "steps": report.steps, "final_loss": report.final_loss(), "checkpoints": report.checkpoints}),
    );
    Ok(())
}

fn cmd_generate(ctx: &mut Ctx, checkpoint: &Path, code: &Path, question: &str) -> Result<()> {
    let model = load_model(checkpoint)?;
    require(code, "code file")?;
    let source = std::fs::read_to_string(code).with_context(|| format!("reading {}", code.display()))?;
    let answer = model.generate(&source, question, ctx.cfg.max_code_tokens, &ctx.cfg.decode)?;
    ctx.events.emit("generated", json!({"question": question, "answer": answer}));
    println!("{answer}");
    Ok(())
}

fn evaluate_model(
    model: &LlavulModel<f32>,
    samples: &[ConversationSample],
    decode: &DecodeConfig,
    max_code_tokens: usize,
    keep_rows: bool,
) -> Result<MetricReport> {
    let embedder = TableEmbedder::from_model(model);
    Ok(evaluate_corpus(model, samples, decode, max_code_tokens, &embedder, keep_rows)?)
}

fn cmd_evaluate(ctx: &mut Ctx, checkpoint: &Path, data: &Path, split: SplitArg, rows: bool) -> Result<()> {
    let model = load_model(checkpoint)?;
    require(data, "data file")?;
    let samples = select_samples(load_finetune_corpus(data)?, split, &ctx.cfg)?;
    let mut report = evaluate_model(&model, &samples, &ctx.cfg.decode, ctx.cfg.max_code_tokens, rows)?;
    if let Some(scores) = report.rows.take() {
        write_jsonl(&ctx.path("scores.jsonl"), &scores)?;
    }
    ctx.write_json("metrics.json", &report)?;
    let name = checkpoint.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    print!("{}", MetricReport::table(&[(name, report.clone())]));
    ctx.events.emit("evaluated", json!({"size": report.size, "skipped": report.skipped}));
    Ok(())
}

fn cmd_qagen(ctx: &mut Ctx, records: &Path, endpoint: Option<String>, turn_cap: Option<usize>) -> Result<()> {
    require(records, "records file")?;
    let records = load_records(records)?;
    let q = &ctx.cfg.qagen;
    let endpoint = endpoint.or_else(|| q.endpoint.clone());
    let offline = std::env::var("LLAVUL_OFFLINE").is_ok_and(|v| v == "1") || endpoint.is_none();
    let client: Box<dyn GeneratorClient> = match (&endpoint, offline) {
        (Some(url), false) => {
            let mut c = HttpClient::new(url.clone(), Duration::from_secs_f64(q.timeout_secs));
            c.max_tokens = q.max_tokens;
            c.temperature = q.temperature;
            Box::new(c)
        }
        _ => Box::new(OfflineTemplate),
    };
    let cfg = QagenConfig { turn_cap: turn_cap.or(q.turn_cap), retries: q.retries };
    ctx.events.emit("qagen_start", json!({"records": records.len(), "offline": offline}));
    let (samples, report) = generate_dataset(&records, client.as_ref(), &cfg);
    write_jsonl(&ctx.path("qa.jsonl"), &samples)?;
    ctx.write_json("qagen_report.json", &report)?;
    ctx.events.emit(
        "qagen_done",
        json!({"succeeded": report.succeeded, "skipped": report.skipped.len(), "retries": report.retries}),
    );
    let transport = report.skipped.iter().find(|s| s.reason.starts_with("transport"));
    if let (Some(first), 0) = (transport, report.succeeded) {
        return Err(CliError::new(Kind::Transport, format!("no record succeeded: {}", first.reason)).into());
    }
    Ok(())
}

fn cmd_stats(ctx: &mut Ctx, data: &Path, tokenizer: &Path, title: &str) -> Result<()> {
    let tok = load_tokenizer(tokenizer)?;
    require(data, "data file")?;
    let stats = compute_stats(&load_finetune_corpus(data)?, &tok)?;
    ctx.write_json("stats.json", &stats)?;
    print!("{}", stats.to_table(title));
    Ok(())
}

fn cmd_classify_train(
    ctx: &mut Ctx,
    data: &Path,
    checkpoint: Option<&Path>,
    tokenizer: Option<&Path>,
    split: SplitArg,
) -> Result<()> {
    require(data, "data file")?;
    let records = select_labeled(load_labeled_corpus(data)?, split, &ctx.cfg)?;
    let balanced = balance_corpus(&records, ctx.cfg.classifier.seed)?;
    ctx.events.emit("balanced", json!({"records": records.len(), "kept": balanced.len()}));
    let mut clf = match checkpoint {
        Some(p) => VulnClassifier::from_model(&load_model(p)?)?,
        None => {
            let tok = match tokenizer {
                Some(p) => load_tokenizer(p)?,
                None => {
                    let codes: Vec<String> = records.iter().map(|r| r.code.clone()).collect();
                    train_tokenizer(ctx, &codes)?
                }
            };
            let mc = ModelConfig { vocab_size: tok.vocab_size(), ..ctx.cfg.model.clone() };
            VulnClassifier::new(mc, tok)?
        }
    };
    let report = train_classifier(&mut clf, &balanced, &ctx.cfg.classifier)?;
    let path = ctx.path("classifier.ckpt");
    clf.save(&path)?;
    ctx.write_json("classifier_report.json", &report)?;
    ctx.events.emit(
        "classifier_trained",
        json!({"steps": report.steps, "final_loss": report.losses.last(), "path": path}),
    );
    Ok(())
}

fn cmd_classify_eval(ctx: &mut Ctx, checkpoint: &Path, data: &Path, split: SplitArg) -> Result<()> {
    require(checkpoint, "checkpoint")?;
    let clf = VulnClassifier::<f32>::load(checkpoint)?;
    require(data, "data file")?;
    let records = select_labeled(load_labeled_corpus(data)?, split, &ctx.cfg)?;
    let (report, predictions) = evaluate_classifier(&clf, &records)?;
    write_jsonl(&ctx.path("predictions.jsonl"), &predictions)?;
    ctx.write_json("classification.json", &report)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

#[derive(Serialize)]
struct AblationRow {
    variant: String,
    metrics: MetricReport,
    pretrain_steps: Option<usize>,
    finetune_steps: Option<usize>,
}

fn cmd_ablate(
    ctx: &mut Ctx,
    pairs: &Path,
    data: &Path,
    variants: &str,
    tokenizer: Option<&Path>,
    splits: (SplitArg, SplitArg),
) -> Result<()> {
    let variants = parse_variants(variants)?;
    let pretrain = build_pretrain_corpus(&read_pairs(pairs)?);
    require(data, "data file")?;
    let all = load_finetune_corpus(data)?;
    let tok = match tokenizer {
        Some(p) => load_tokenizer(p)?,
        None => {
            let mut texts = tokenizer_corpus(&pretrain.samples);
            texts.extend(tokenizer_corpus(&all));
            train_tokenizer(ctx, &texts)?
        }
    };
    let train = select_samples(all.clone(), splits.0, &ctx.cfg)?;
    let test = select_samples(all, splits.1, &ctx.cfg)?;
    let setup = AblationSetup {
        model: ModelConfig { vocab_size: tok.vocab_size(), ..ctx.cfg.model.clone() },
        tokenizer: &tok,
        pretrain_corpus: &pretrain.samples,
        train: &train,
        test: &test,
        pretrain: StageConfig { stage: llavul::Stage::Pretrain, ..ctx.cfg.pretrain.clone() },
        finetune: StageConfig { stage: llavul::Stage::Finetune, ..ctx.cfg.finetune.clone() },
        decode: ctx.cfg.decode,
    };
    let events = &mut ctx.events;
    let outcomes = ablation_run(&setup, &variants, |o| {
        events.emit("variant_done", json!({"variant": o.variant.to_string(), "metrics": o.metrics}));
    })?;
    let mut rows = Vec::new();
    let mut table = Vec::new();
    for o in outcomes {
        let name = o.variant.to_string();
        let dir = ctx.out.join(name.replace([':', '(', ')'], "_"));
        std::fs::create_dir_all(&dir)?;
        write_pretty(&dir.join("metrics.json"), &o.metrics)?;
        if let Some(r) = &o.pretrain {
            write_pretty(&dir.join("pretrain_report.json"), r)?;
        }
        if let Some(r) = &o.finetune {
            write_pretty(&dir.join("finetune_report.json"), r)?;
        }
        table.push((name.clone(), o.metrics.clone()));
        rows.push(AblationRow {
            variant: name,
            metrics: o.metrics,
            pretrain_steps: o.pretrain.map(|r| r.steps),
            finetune_steps: o.finetune.map(|r| r.steps),
        });
    }
    ctx.write_json("ablation.json", &rows)?;
    let text = MetricReport::table(&table);
    std::fs::write(ctx.path("ablation.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let Cli { common, command } = cli;
    let cfg = resolve(&Overrides {
        file: common.config.as_deref(),
        seed: common.seed,
        max_code_tokens: common.max_code_tokens,
        sets: &common.sets,
    })?;
    std::fs::create_dir_all(&common.out)
        .with_context(|| format!("creating output directory {}", common.out.display()))?;
    let snapshot = json!({
        "command": command.name(),
        "argv": std::env::args().collect::<Vec<_>>(),
        "config": cfg,
    });
    write_pretty(&common.out.join("resolved_config.json"), &snapshot)?;
    let file = BufWriter::new(File::create(common.out.join("events.jsonl"))?);
    let mut ctx = Ctx { cfg, out: common.out, events: Events { file } };
    ctx.events.emit("start", json!({"command": command.name(), "seed": ctx.cfg.seed}));
    match command {
        Command::TokenizerTrain { input, vocab_size } => cmd_tokenizer_train(&mut ctx, &input, vocab_size)?,
        Command::Pretrain { pairs, tokenizer } => cmd_pretrain(&mut ctx, &pairs, tokenizer.as_deref())?,
        Command::Finetune { data, checkpoint, from_scratch, tokenizer, split } => {
            cmd_finetune(&mut ctx, &data, checkpoint.as_deref(), from_scratch, tokenizer.as_deref(), split)?
        }
        Command::Generate { checkpoint, code, question } => cmd_generate(&mut ctx, &checkpoint, &code, &question)?,
        Command::Evaluate { checkpoint, data, split, rows } => cmd_evaluate(&mut ctx, &checkpoint, &data, split, rows)?,
        Command::Qagen { records, endpoint, turn_cap } => cmd_qagen(&mut ctx, &records, endpoint, turn_cap)?,
        Command::Stats { data, tokenizer, title } => cmd_stats(&mut ctx, &data, &tokenizer, &title)?,
        Command::ClassifyTrain { data, checkpoint, tokenizer, split } => {
            cmd_classify_train(&mut ctx, &data, checkpoint.as_deref(), tokenizer.as_deref(), split)?
        }
        Command::ClassifyEval { checkpoint, data, split } => cmd_classify_eval(&mut ctx, &checkpoint, &data, split)?,
        Command::Ablate { pairs, data, variants, tokenizer, train_split, eval_split } => {
            cmd_ablate(&mut ctx, &pairs, &data, &variants, tokenizer.as_deref(), (train_split, eval_split))?
        }
    }
    ctx.events.emit("done", json!({}));
    Ok(())
}

fn main() {
    let code = match Cli::try_parse() {
        Ok(cli) => match run(cli) {
            Ok(()) => 0,
            Err(e) => {
                let kind = classify(&e);
                eprintln!("{}", error_json(kind, &format!("{e:#}")));
                kind.code()
            }
        },
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                0
            } else {
                eprintln!("{}", error_json(Kind::Usage, e.to_string().trim()));
                Kind::Usage.code()
            }
        }
    };
    std::process::exit(code);
}
