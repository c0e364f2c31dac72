//! The full recipe as one reproducible run: tokenizer, continued
//! pre-training, teacher fine-tuning, SSMBA augmentation, seeded member
//! fine-tuning, top-k ensembling and evaluation.
//!
//! Everything lands in the configured output directory:
//!
//! ```text
//! corpus/{train,valid,pairs}.jsonl
//! vocab.txt
//! pretrain/{model.ckpt,loss.csv}
//! teacher/{model.ckpt,log.csv,valid_pred.jsonl,valid_report.json}
//! augment/train_augmented.jsonl
//! members/seed-NN/{model.ckpt,log.csv,valid_pred.jsonl,valid_report.json}
//! ensemble/{valid_pred.jsonl,valid_report.json}
//! report.json, report.txt, manifest.json
//! ```

use std::fmt::Write as _;
use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::data::{self, Example, ExampleRecord, RedditPair};
use crate::error::{Error, Result};
use crate::eval::{self, evaluate, MetricReport, PredictionRecord};
use crate::finetune::{self, eval_log_csv, predict, run_finetune};
use crate::model::{self, ModelConfig, ModelParams};
use crate::pretrain::{self, run_pretrain};
use crate::ssmba::augment_dataset;
use crate::synth;
use crate::tokenizer::{train_wordpiece, Vocab};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberSummary {
    pub name: String,
    pub seed: u64,
    pub best_step: usize,
    pub valid: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub config_hash: String,
    pub seed: u64,
    pub vocab_size: usize,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_pairs: usize,
    pub n_augmented: usize,
    pub pretrain_epoch_losses: Vec<f64>,
    pub teacher: MetricReport,
    pub members: Vec<MemberSummary>,
    pub selected: Vec<String>,
    pub ensemble: MetricReport,
}

impl PipelineReport {
    pub fn best_member_accuracy(&self) -> f64 {
        self.members.iter().map(|m| m.valid.accuracy).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean_member_accuracy(&self) -> f64 {
        self.members.iter().map(|m| m.valid.accuracy).sum::<f64>() / self.members.len() as f64
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "config {}  seed {}", &self.config_hash[..12], self.seed);
        let _ = writeln!(
            out,
            "train {}  valid {}  pairs {}  augmented train {}  vocab {}",
            self.n_train, self.n_valid, self.n_pairs, self.n_augmented, self.vocab_size
        );
        if let (Some(first), Some(last)) = (self.pretrain_epoch_losses.first(), self.pretrain_epoch_losses.last()) {
            let _ = writeln!(out, "pretrain mlm loss: first epoch {first:.4}, last epoch {last:.4}");
        }
        let _ = writeln!(out, "\n{:<14} {:>8} {:>8} {:>8} {:>8}", "model", "acc", "f1", "f1_B", "jsd");
        let mut row = |name: &str, r: &MetricReport| {
            let _ = writeln!(
                out,
                "{name:<14} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
                r.accuracy, r.f1_macro, r.f1_breakdown, r.js_div
            );
        };
        row("teacher", &self.teacher);
        for m in &self.members {
            row(&m.name, &m.valid);
        }
        row("ensemble", &self.ensemble);
        let _ = writeln!(out, "\nensemble members: {}", self.selected.join(", "));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub seed: Option<u64>,
    pub outputs: Vec<FileHash>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub config: RunConfig,
    pub inputs: Vec<FileHash>,
    pub stages: Vec<StageRecord>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Writes files under the output directory and records their hashes.
struct Artifacts {
    root: PathBuf,
    stages: Vec<StageRecord>,
}

impl Artifacts {
    fn begin(&mut self, name: &str, seed: Option<u64>) {
        self.stages.push(StageRecord {
            name: name.to_owned(),
            seed,
            outputs: Vec::new(),
        });
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.root.join(rel);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.stages
            .last_mut()
            .expect("a stage is open")
            .outputs
            .push(FileHash {
                path: rel.to_owned(),
                sha256: sha256_hex(bytes),
            });
        Ok(path)
    }

    fn write_jsonl<T: Serialize>(&mut self, rel: &str, rows: &[T]) -> Result<PathBuf> {
        let mut buf = Vec::new();
        for row in rows {
            serde_json::to_writer(&mut buf, row)?;
            buf.push(b'\n');
        }
        self.write(rel, &buf)
    }

    fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<PathBuf> {
        let mut buf = serde_json::to_vec_pretty(value)?;
        buf.push(b'\n');
        self.write(rel, &buf)
    }

    fn write_checkpoint(&mut self, rel: &str, params: &ModelParams<f32>) -> Result<PathBuf> {
        self.write(rel, &model::checkpoint_bytes::to_bytes(params)?)
    }
}

struct Inputs {
    train: Vec<Example>,
    valid: Vec<Example>,
    pairs: Vec<RedditPair>,
    hashes: Vec<FileHash>,
}

fn load_inputs(cfg: &RunConfig) -> Result<Inputs> {
    if cfg.synthetic.enabled {
        let (train, valid) = synth::examples(cfg.synthetic.dialogues, cfg.synthetic.valid_dialogues, cfg.seed);
        let dump = synth::reddit_dump(cfg.synthetic.reddit_pairs, cfg.seed);
        let pairs = data::extract_reddit_pairs(dump.iter(), cfg.max_pairs).collect();
        return Ok(Inputs {
            train,
            valid,
            pairs,
            hashes: Vec::new(),
        });
    }
    let missing = |key: &str| Error::RunConfig(vec![format!("{key}: required")]);
    let train_path = cfg.paths.train.as_ref().ok_or_else(|| missing("paths.train"))?;
    let valid_path = cfg.paths.valid.as_ref().ok_or_else(|| missing("paths.valid"))?;
    let reddit_path = cfg.paths.reddit.as_ref().ok_or_else(|| missing("paths.reddit"))?;
    let file = std::fs::File::open(reddit_path).map_err(|e| Error::io(reddit_path, e))?;
    let lines = std::io::BufReader::new(file).lines().map_while(|l| l.ok());
    let pairs = data::extract_reddit_pairs(lines, cfg.max_pairs).collect();
    let mut hashes = Vec::new();
    for p in [Some(train_path), Some(valid_path), Some(reddit_path), cfg.paths.vocab.as_ref(), cfg.paths.init_checkpoint.as_ref()]
        .into_iter()
        .flatten()
    {
        if p.is_file() {
            hashes.push(FileHash {
                path: p.display().to_string(),
                sha256: hash_file(p)?,
            });
        }
    }
    Ok(Inputs {
        train: data::load_examples(train_path)?,
        valid: data::load_examples(valid_path)?,
        pairs,
        hashes,
    })
}

fn build_vocab(cfg: &RunConfig, inputs: &Inputs) -> Result<Vocab> {
    if let Some(p) = &cfg.paths.vocab {
        return Vocab::load(p);
    }
    let texts = inputs
        .pairs
        .iter()
        .flat_map(|p| [p.parent_text.as_str(), p.child_text.as_str()])
        .chain(inputs.train.iter().flat_map(|e| [e.context.as_str(), e.utterance.as_str()]));
    train_wordpiece(texts, cfg.tokenizer.vocab_size, cfg.tokenizer.min_frequency)
}

fn records(examples: &[Example]) -> Vec<ExampleRecord> {
    examples.iter().map(ExampleRecord::from_example).collect()
}

fn rel(dir: &str, file: &str) -> String {
    format!("{dir}/{file}")
}

/// Run every stage. Returns the summary report; all artifacts and the
/// manifest are written under `paths.output_dir`.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineReport> {
    let problems = cfg.violations();
    if !problems.is_empty() {
        return Err(Error::RunConfig(problems));
    }
    let root = cfg.paths.output_dir.clone().expect("validated");
    std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let mut art = Artifacts {
        root,
        stages: Vec::new(),
    };
    let clock = Instant::now();

    art.begin("corpus", Some(cfg.seed));
    let inputs = load_inputs(cfg)?;
    if inputs.pairs.is_empty() {
        return Err(Error::EmptyInput("comment pairs"));
    }
    art.write_jsonl("corpus/train.jsonl", &records(&inputs.train))?;
    art.write_jsonl("corpus/valid.jsonl", &records(&inputs.valid))?;
    art.write_jsonl("corpus/pairs.jsonl", &inputs.pairs)?;

    art.begin("tokenizer", None);
    let vocab = build_vocab(cfg, &inputs)?;
    art.write("vocab.txt", vocab.to_file_string().as_bytes())?;
    log::info!("vocab of {} pieces ({:.1?})", vocab.len(), clock.elapsed());

    art.begin("pretrain", Some(cfg.pretrain.seed));
    let model_cfg = ModelConfig {
        vocab_size: vocab.len(),
        ..cfg.model.clone()
    };
    let pre = run_pretrain(&cfg.pretrain, &model_cfg, &cfg.mask, inputs.pairs.iter().cloned(), &vocab)?;
    art.write_checkpoint("pretrain/model.ckpt", &pre.params)?;
    art.write("pretrain/loss.csv", pretrain::loss_log_csv(&pre.log).as_bytes())?;
    let pretrain_epoch_losses = pre.epoch_means();
    log::info!("pretraining done ({:.1?})", clock.elapsed());

    art.begin("teacher", Some(cfg.finetune.seed));
    let teacher = run_finetune(&cfg.finetune, &pre.params, &inputs.train, &inputs.valid, &vocab)?;
    let (teacher_report, _) = write_model_outputs(&mut art, "teacher", &teacher, &inputs.valid, &vocab, cfg)?;
    log::info!("teacher valid accuracy {:.4} ({:.1?})", teacher_report.accuracy, clock.elapsed());

    art.begin("augment", Some(cfg.augment.seed));
    let augmented = augment_dataset(&inputs.train, &teacher.best, &pre.params, &vocab, &cfg.augment)?;
    art.write_jsonl("augment/train_augmented.jsonl", &augmented.to_records())?;
    let aug_train = augmented.to_examples();
    log::info!("{} augmented training examples ({:.1?})", aug_train.len(), clock.elapsed());

    let mut members = Vec::new();
    let mut member_preds = Vec::new();
    for k in 0..cfg.ensemble.members {
        let plan = cfg.member_plan(k);
        let name = format!("seed-{k:02}");
        art.begin(&format!("member {name}"), Some(plan.seed));
        let out = run_finetune(&plan, &pre.params, &aug_train, &inputs.valid, &vocab)?;
        let dir = format!("members/{name}");
        let (report, preds) = write_model_outputs(&mut art, &dir, &out, &inputs.valid, &vocab, cfg)?;
        log::info!("member {name} valid accuracy {:.4} ({:.1?})", report.accuracy, clock.elapsed());
        member_preds.push(preds);
        members.push(MemberSummary {
            name,
            seed: plan.seed,
            best_step: out.best_step,
            valid: report,
        });
    }

    art.begin("ensemble", None);
    let reports: Vec<MetricReport> = members.iter().map(|m| m.valid.clone()).collect();
    let chosen = eval::select_top_k(&reports, cfg.ensemble.metric, cfg.ensemble.top)?;
    let chosen_preds: Vec<Vec<PredictionRecord>> = chosen.iter().map(|&i| member_preds[i].clone()).collect();
    let ens_preds = eval::ensemble_average(&chosen_preds)?;
    let ensemble = evaluate(&ens_preds, &inputs.valid, cfg.finetune.js_base)?;
    art.write_jsonl("ensemble/valid_pred.jsonl", &ens_preds)?;
    art.write_json("ensemble/valid_report.json", &ensemble)?;

    let report = PipelineReport {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        vocab_size: vocab.len(),
        n_train: inputs.train.len(),
        n_valid: inputs.valid.len(),
        n_pairs: inputs.pairs.len(),
        n_augmented: augmented.len(),
        pretrain_epoch_losses,
        teacher: teacher_report,
        selected: chosen.iter().map(|&i| members[i].name.clone()).collect(),
        members,
        ensemble,
    };
    art.begin("report", None);
    art.write_json("report.json", &report)?;
    art.write("report.txt", report.to_table().as_bytes())?;

    let mut recorded = cfg.clone();
    recorded.paths.output_dir = None;
    let manifest = Manifest {
        config_hash: report.config_hash.clone(),
        seed: cfg.seed,
        config: recorded,
        inputs: inputs.hashes,
        stages: art.stages.clone(),
    };
    let path = art.root.join("manifest.json");
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    log::info!("pipeline finished ({:.1?})", clock.elapsed());
    Ok(report)
}

fn write_model_outputs(
    art: &mut Artifacts,
    dir: &str,
    out: &finetune::FinetuneOutcome,
    valid: &[Example],
    vocab: &Vocab,
    cfg: &RunConfig,
) -> Result<(MetricReport, Vec<PredictionRecord>)> {
    art.write_checkpoint(&rel(dir, "model.ckpt"), &out.best)?;
    art.write(&rel(dir, "log.csv"), eval_log_csv(&out.log).as_bytes())?;
    let preds = predict(&out.best, valid, vocab)?;
    let report = evaluate(&preds, valid, cfg.finetune.js_base)?;
    art.write_jsonl(&rel(dir, "valid_pred.jsonl"), &preds)?;
    art.write_json(&rel(dir, "valid_report.json"), &report)?;
    Ok((report, preds))
}
