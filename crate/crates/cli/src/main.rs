use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use breakdown_core::config::{parse_override_value, RunConfig};
use breakdown_core::data::{self, Example, ExampleRecord, RedditPair};
use breakdown_core::eval::{self, LogBase, PredictionRecord, RankMetric};
use breakdown_core::finetune::{self, FinetunePlan};
use breakdown_core::model::{self, ModelConfig};
use breakdown_core::pretrain::{self, InitFrom, MaskPolicy, PretrainPlan};
use breakdown_core::ssmba::{self, AugmentConfig, LabelMode, Reconstruction};
use breakdown_core::tokenizer::{self, Vocab};
use breakdown_core::{pipeline, Error};

const THREADS_ENV: &str = "BREAKDOWN_LAB_THREADS";

#[derive(Parser)]
#[command(name = "breakdown-lab", version, about = "Dialogue breakdown detection: pre-training, SSMBA augmentation, fine-tuning and evaluation")]
struct Cli {
    /// Worker threads (falls back to BREAKDOWN_LAB_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Only print warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a WordPiece vocabulary or encode text with one.
    #[command(subcommand)]
    Tok(TokCommand),
    /// Extract parent/reply pairs from a comment dump.
    ExtractReddit(ExtractArgs),
    /// Masked-LM pre-training on comment pairs.
    Pretrain(PretrainArgs),
    /// SSMBA augmentation of a training set.
    Augment(AugmentArgs),
    /// Fine-tune the classifier with the KL objective.
    Finetune(FinetuneArgs),
    /// Write predictions for a set of examples.
    Predict(PredictArgs),
    /// Score a prediction file against gold examples.
    Eval(EvalArgs),
    /// Average the best prediction files into an ensemble.
    Ensemble(EnsembleArgs),
    /// Run every stage from one configuration file.
    Pipeline(PipelineArgs),
}

#[derive(Subcommand)]
enum TokCommand {
    /// Learn a vocabulary from text files (one text per line).
    Train {
        #[arg(long = "input", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value_t = tokenizer::DEFAULT_VOCAB_SIZE)]
        vocab_size: usize,
        #[arg(long, default_value_t = 2)]
        min_frequency: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the ids of a text, or of a (context, utterance) pair.
    Encode {
        #[arg(long)]
        vocab: PathBuf,
        text: String,
        /// Encode as a pair with this utterance.
        #[arg(long)]
        pair: Option<String>,
        #[arg(long, default_value_t = 128)]
        max_len: usize,
    },
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    dump: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    limit: Option<usize>,
    /// Parent comments kept in memory while streaming.
    #[arg(long, default_value_t = data::DEFAULT_PARENT_CAPACITY)]
    capacity: usize,
}

#[derive(Args)]
struct ConfigArg {
    /// Configuration file supplying model and stage settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    epochs: Option<usize>,
    /// `scratch` or `warm:PATH`.
    #[arg(long, default_value = "scratch")]
    init: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Loss log CSV; defaults to the checkpoint path with a .csv extension.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    recon: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long, default_value_t = 2)]
    num_aug: usize,
    #[arg(long, default_value_t = 0.45)]
    select_prob: f64,
    /// greedy, sample[:T] or topk:K[:T].
    #[arg(long, default_value = "sample")]
    strategy: String,
    /// soft or hard.
    #[arg(long, default_value = "soft")]
    label: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    train: PathBuf,
    /// Augmented file; its augmented rows are added to the training set.
    #[arg(long)]
    augmented: Option<PathBuf>,
    #[arg(long)]
    valid: PathBuf,
    #[arg(long)]
    init: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Training log CSV; defaults to the checkpoint path with a .csv extension.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    examples: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gold: PathBuf,
    /// 2 or e.
    #[arg(long, default_value = "2")]
    base: String,
    /// Also write the JSON report here.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct EnsembleArgs {
    #[arg(long, required = true, num_args = 1..)]
    members: Vec<PathBuf>,
    #[arg(long)]
    valid: PathBuf,
    #[arg(long, default_value_t = 4)]
    top: usize,
    /// accuracy, f1_macro or js_div.
    #[arg(long, default_value = "accuracy")]
    metric: String,
    #[arg(long, default_value = "2")]
    base: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding paths.output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra `key=value` overrides.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn parse_overrides(set: &[String]) -> Result<Vec<(String, toml::Value)>> {
    set.iter()
        .map(|kv| match kv.split_once('=') {
            Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_owned(), parse_override_value(v.trim()))),
            _ => Err(Error::Input(format!("--set expects KEY=VALUE, got {kv:?}")).into()),
        })
        .collect()
}

fn string_value(s: &str) -> toml::Value {
    toml::Value::String(s.to_owned())
}

fn load_sections(arg: &ConfigArg) -> Result<RunConfig> {
    let overrides = parse_overrides(&arg.set)?;
    Ok(match &arg.config {
        Some(path) => RunConfig::load_sections(path, &overrides)?,
        None => RunConfig::sections_from_toml_str("", &overrides)?,
    })
}

fn configure_threads(flag: Option<usize>, from_config: Option<usize>) -> Result<()> {
    let env = match std::env::var(THREADS_ENV) {
        Ok(v) => Some(
            v.parse::<usize>()
                .map_err(|_| Error::Input(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?,
        ),
        Err(_) => None,
    };
    let Some(n) = flag.or(from_config).or(env) else {
        return Ok(());
    };
    if n == 0 {
        return Err(Error::Input("thread count must be positive".into()).into());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the thread pool")?;
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_owned).collect())
}

fn with_csv_extension(path: &Path) -> PathBuf {
    path.with_extension("csv")
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn run_tok(cmd: TokCommand) -> Result<()> {
    match cmd {
        TokCommand::Train {
            inputs,
            vocab_size,
            min_frequency,
            out,
        } => {
            let mut lines = Vec::new();
            for p in &inputs {
                lines.extend(read_lines(p)?);
            }
            let vocab = tokenizer::train_wordpiece(lines.iter(), vocab_size, min_frequency)?;
            vocab.save(&out)?;
            println!("wrote {} pieces to {}", vocab.len(), out.display());
        }
        TokCommand::Encode {
            vocab,
            text,
            pair,
            max_len,
        } => {
            let vocab = Vocab::load(&vocab)?;
            match pair {
                None => println!("{}", serde_json::to_string(&vocab.encode(&text))?),
                Some(utt) => {
                    if max_len < 8 {
                        bail!(Error::Input(format!("--max-len must be at least 8, got {max_len}")));
                    }
                    let e = vocab.encode_pair(&text, &utt, max_len);
                    let json = serde_json::json!({
                        "token_ids": e.token_ids,
                        "segment_ids": e.segment_ids,
                        "attention_mask": e.attention_mask,
                        "length": e.length,
                    });
                    println!("{json}");
                }
            }
        }
    }
    Ok(())
}

fn run_extract(a: ExtractArgs) -> Result<()> {
    let file = std::fs::File::open(&a.dump).map_err(|e| Error::io(&a.dump, e))?;
    let lines = std::io::BufRead::lines(std::io::BufReader::new(file)).map_while(|l| l.ok());
    let mut it = data::extract_reddit_pairs_with_capacity(lines, a.limit, a.capacity);
    let pairs: Vec<RedditPair> = it.by_ref().collect();
    data::write_jsonl(&a.out, &pairs)?;
    println!(
        "wrote {} pairs from {} lines ({} malformed) to {}",
        pairs.len(),
        it.lines_read(),
        it.skipped_lines(),
        a.out.display()
    );
    Ok(())
}

fn run_pretrain_cmd(a: PretrainArgs) -> Result<()> {
    let cfg = load_sections(&a.config)?;
    let vocab = Vocab::load(&a.vocab)?;
    let pairs: Vec<RedditPair> = data::read_jsonl(&a.pairs)?;
    let seed = a.seed.unwrap_or(cfg.seed);
    let plan = PretrainPlan {
        epochs: a.epochs.unwrap_or(cfg.pretrain.epochs),
        init: a.init.parse::<InitFrom>()?,
        seed,
        ..cfg.pretrain.clone()
    };
    let model_cfg = ModelConfig {
        vocab_size: vocab.len(),
        seed,
        ..cfg.model.clone()
    };
    let policy = MaskPolicy { seed, ..cfg.mask.clone() };
    let out = pretrain::run_pretrain(&plan, &model_cfg, &policy, pairs, &vocab)?;
    model::save_checkpoint(&out.params, &a.out)?;
    let log_path = a.log.unwrap_or_else(|| with_csv_extension(&a.out));
    pretrain::write_loss_log(&log_path, &out.log)?;
    let means = out.epoch_means();
    println!(
        "pretrained {} steps; epoch mean loss {:.4} -> {:.4}; wrote {}",
        out.log.len(),
        means.first().copied().unwrap_or(f64::NAN),
        means.last().copied().unwrap_or(f64::NAN),
        a.out.display()
    );
    Ok(())
}

fn run_augment(a: AugmentArgs) -> Result<()> {
    let vocab = Vocab::load(&a.vocab)?;
    let train = data::load_examples(&a.train)?;
    let teacher = model::load_checkpoint(&a.teacher)?;
    let recon = model::load_checkpoint(&a.recon)?;
    let cfg = AugmentConfig {
        corruption: MaskPolicy::mask_only(a.select_prob, a.seed),
        num_augments: a.num_aug,
        reconstruction: a.strategy.parse::<Reconstruction>()?,
        label_mode: a.label.parse::<LabelMode>()?,
        seed: a.seed,
    };
    let out = ssmba::augment_dataset(&train, &teacher, &recon, &vocab, &cfg)?;
    data::write_jsonl(&a.out, &out.to_records())?;
    println!(
        "wrote {} rows ({} originals, {} augments) to {}",
        out.len(),
        out.originals.len(),
        out.augments.len(),
        a.out.display()
    );
    Ok(())
}

fn load_training_set(train: &Path, augmented: Option<&Path>) -> Result<Vec<Example>> {
    let mut examples = data::load_examples(train)?;
    if let Some(path) = augmented {
        let rows: Vec<ExampleRecord> = data::read_jsonl(path)?;
        for row in rows.iter().filter(|r| r.is_augmented()) {
            examples.push(row.to_example()?);
        }
    }
    Ok(examples)
}

fn run_finetune_cmd(a: FinetuneArgs) -> Result<()> {
    let cfg = load_sections(&a.config)?;
    let vocab = Vocab::load(&a.vocab)?;
    let init = model::load_checkpoint(&a.init)?;
    let train = load_training_set(&a.train, a.augmented.as_deref())?;
    let valid = data::load_examples(&a.valid)?;
    let plan = FinetunePlan {
        epochs: a.epochs.unwrap_or(cfg.finetune.epochs),
        seed: a.seed.unwrap_or(cfg.seed),
        ..cfg.finetune.clone()
    };
    let out = finetune::run_finetune(&plan, &init, &train, &valid, &vocab)?;
    model::save_checkpoint(&out.best, &a.out)?;
    let log_path = a.log.unwrap_or_else(|| with_csv_extension(&a.out));
    write_text(&log_path, &finetune::eval_log_csv(&out.log))?;
    println!(
        "best step {} (valid accuracy {:.4}); wrote {}",
        out.best_step,
        out.best_report.accuracy,
        a.out.display()
    );
    Ok(())
}

fn run_predict(a: PredictArgs) -> Result<()> {
    let vocab = Vocab::load(&a.vocab)?;
    let params = model::load_checkpoint(&a.ckpt)?;
    let examples = data::load_examples(&a.examples)?;
    let preds = finetune::predict(&params, &examples, &vocab)?;
    data::write_jsonl(&a.out, &preds)?;
    println!("wrote {} predictions to {}", preds.len(), a.out.display());
    Ok(())
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let base: LogBase = a.base.parse()?;
    let preds: Vec<PredictionRecord> = data::read_jsonl(&a.pred)?;
    let gold = data::load_examples(&a.gold)?;
    let report = eval::evaluate(&preds, &gold, base)?;
    if let Some(path) = &a.json {
        write_text(path, &(report.to_json() + "\n"))?;
    }
    print!("{}", report.to_table());
    Ok(())
}

fn run_ensemble(a: EnsembleArgs) -> Result<()> {
    let base: LogBase = a.base.parse()?;
    let metric: RankMetric = a.metric.parse()?;
    let valid = data::load_examples(&a.valid)?;
    let mut members = Vec::new();
    let mut reports = Vec::new();
    for path in &a.members {
        let preds: Vec<PredictionRecord> = data::read_jsonl(path)?;
        reports.push(eval::evaluate(&preds, &valid, base).with_context(|| format!("member {}", path.display()))?);
        members.push(preds);
    }
    let chosen = eval::select_top_k(&reports, metric, a.top)?;
    let picked: Vec<Vec<PredictionRecord>> = chosen.iter().map(|&i| members[i].clone()).collect();
    let averaged = eval::ensemble_average(&picked)?;
    let report = eval::evaluate(&averaged, &valid, base)?;
    data::write_jsonl(&a.out, &averaged)?;
    for &i in &chosen {
        println!("member {} ({metric} {:.4})", a.members[i].display(), reports[i].metric(metric));
    }
    print!("{}", report.to_table());
    Ok(())
}

fn run_pipeline_cmd(a: PipelineArgs, threads: Option<usize>) -> Result<()> {
    let mut overrides = parse_overrides(&a.set)?;
    if let Some(seed) = a.seed {
        overrides.push(("seed".into(), toml::Value::Integer(seed as i64)));
    }
    if let Some(out) = &a.out {
        overrides.push(("paths.output_dir".into(), string_value(&out.display().to_string())));
    }
    let cfg = RunConfig::load(&a.config, &overrides)?;
    configure_threads(threads, cfg.threads)?;
    let report = pipeline::run_pipeline(&cfg)?;
    print!("{}", report.to_table());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if !matches!(cli.command, Command::Pipeline(_)) {
        configure_threads(cli.threads, None)?;
    }
    match cli.command {
        Command::Tok(c) => run_tok(c),
        Command::ExtractReddit(a) => run_extract(a),
        Command::Pretrain(a) => run_pretrain_cmd(a),
        Command::Augment(a) => run_augment(a),
        Command::Finetune(a) => run_finetune_cmd(a),
        Command::Predict(a) => run_predict(a),
        Command::Eval(a) => run_eval(a),
        Command::Ensemble(a) => run_ensemble(a),
        Command::Pipeline(a) => run_pipeline_cmd(a, cli.threads),
    }
}

/// 1 for bad input, 2 for anything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    let input = err
        .chain()
        .any(|e| e.downcast_ref::<Error>().is_some_and(Error::is_input_error));
    if input {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
