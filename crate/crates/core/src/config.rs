//! Run configuration: a flat TOML file of dotted keys, validated as a whole.
//!
//! ```toml
//! seed = 7
//! paths.output_dir = "runs/demo"
//! synthetic.enabled = true
//! model.hidden_dim = 64
//! finetune.epochs = 8
//! ```
//!
//! Every problem in a file is collected and reported together, each line
//! prefixed with the key it concerns.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{LogBase, RankMetric};
use crate::finetune::FinetunePlan;
use crate::model::ModelConfig;
use crate::pretrain::{InitFrom, MaskPolicy, PretrainPlan};
use crate::rng;
use crate::ssmba::{AugmentConfig, LabelMode, Reconstruction};

/// Turn `(key, message)` pairs into a single error whose lines carry the
/// `section.key` path.
pub fn violations_to_result(violations: Vec<(String, String)>, section: &str) -> Result<()> {
    if violations.is_empty() {
        return Ok(());
    }
    Err(Error::RunConfig(prefixed(violations, section)))
}

fn prefixed(violations: Vec<(String, String)>, section: &str) -> Vec<String> {
    violations
        .into_iter()
        .map(|(k, m)| {
            let keys: Vec<String> = k.split(',').map(|k| format!("{section}.{k}")).collect();
            format!("{}: {m}", keys.join(", "))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PathsConfig {
    /// Existing vocabulary; trained from the corpora when absent.
    pub vocab: Option<PathBuf>,
    /// Warm-start checkpoint for pre-training.
    pub init_checkpoint: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    /// Comment dump, one JSON object per line.
    pub reddit: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub enabled: bool,
    pub dialogues: usize,
    pub valid_dialogues: usize,
    pub reddit_pairs: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            dialogues: 2000,
            valid_dialogues: 400,
            reddit_pairs: 5000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    pub vocab_size: usize,
    pub min_frequency: u64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            vocab_size: crate::tokenizer::DEFAULT_VOCAB_SIZE,
            min_frequency: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    /// Seeded fine-tuning reruns in the candidate pool.
    pub members: usize,
    pub top: usize,
    pub metric: RankMetric,
}

impl Default for EnsembleSpec {
    fn default() -> Self {
        Self {
            members: 8,
            top: 4,
            metric: RankMetric::Accuracy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: Option<usize>,
    /// Cap on pairs taken from the comment dump.
    pub max_pairs: Option<usize>,
    pub paths: PathsConfig,
    pub synthetic: SyntheticConfig,
    pub tokenizer: TokenizerConfig,
    pub model: ModelConfig,
    pub mask: MaskPolicy,
    pub augment: AugmentConfig,
    pub pretrain: PretrainPlan,
    pub finetune: FinetunePlan,
    /// Epochs for the ensemble members; the teacher uses `finetune.epochs`.
    pub member_epochs: Option<usize>,
    pub ensemble: EnsembleSpec,
}


/// Pulls typed values out of a flattened key map, remembering every
/// problem instead of stopping at the first.
struct Reader {
    values: BTreeMap<String, toml::Value>,
    errors: Vec<String>,
}

impl Reader {
    fn take(&mut self, key: &str) -> Option<toml::Value> {
        self.values.remove(key)
    }

    fn bad(&mut self, key: &str, want: &str, got: &toml::Value) {
        self.errors.push(format!("{key}: expected {want}, got {got}"));
    }

    fn uint<T: TryFrom<i64>>(&mut self, key: &str, slot: &mut T) {
        if let Some(v) = self.take(key) {
            match v.as_integer().and_then(|i| T::try_from(i).ok()) {
                Some(x) => *slot = x,
                None => self.bad(key, "a non-negative integer", &v),
            }
        }
    }

    fn opt_uint(&mut self, key: &str, slot: &mut Option<usize>) {
        if let Some(v) = self.take(key) {
            match v.as_integer().and_then(|i| usize::try_from(i).ok()) {
                Some(x) => *slot = Some(x),
                None => self.bad(key, "a non-negative integer", &v),
            }
        }
    }

    fn float(&mut self, key: &str, slot: &mut f64) {
        if let Some(v) = self.take(key) {
            match v.as_float().or_else(|| v.as_integer().map(|i| i as f64)) {
                Some(x) => *slot = x,
                None => self.bad(key, "a number", &v),
            }
        }
    }

    fn boolean(&mut self, key: &str, slot: &mut bool) {
        if let Some(v) = self.take(key) {
            match v.as_bool() {
                Some(x) => *slot = x,
                None => self.bad(key, "true or false", &v),
            }
        }
    }

    fn path(&mut self, key: &str, slot: &mut Option<PathBuf>) {
        if let Some(v) = self.take(key) {
            match v.as_str() {
                Some(s) => *slot = Some(PathBuf::from(s)),
                None => self.bad(key, "a path string", &v),
            }
        }
    }

    fn parsed<T: std::str::FromStr<Err = Error>>(&mut self, key: &str, slot: &mut T) {
        if let Some(v) = self.take(key) {
            let text = match &v {
                toml::Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            match text.parse() {
                Ok(x) => *slot = x,
                Err(e) => self.errors.push(format!("{key}: {e}")),
            }
        }
    }
}

fn flatten(prefix: &str, table: toml::Table, out: &mut BTreeMap<String, toml::Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            v => {
                out.insert(key, v);
            }
        }
    }
}

/// Parse a CLI override value: TOML syntax when it parses, a bare string
/// otherwise.
pub fn parse_override_value(text: &str) -> toml::Value {
    format!("v = {text}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(text.to_owned()))
}

impl RunConfig {
    /// Parse and validate config text, applying `overrides` (dotted key,
    /// value) on top of it.
    pub fn from_toml_str(text: &str, overrides: &[(String, toml::Value)]) -> Result<Self> {
        Self::parse(text, overrides, true)
    }

    /// Like [`RunConfig::from_toml_str`] but without the `paths` checks, for
    /// single-stage commands that take their files as flags.
    pub fn sections_from_toml_str(text: &str, overrides: &[(String, toml::Value)]) -> Result<Self> {
        Self::parse(text, overrides, false)
    }

    fn parse(text: &str, overrides: &[(String, toml::Value)], check_paths: bool) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::RunConfig(vec![format!("syntax: {}", e.message())]))?;
        let mut values = BTreeMap::new();
        flatten("", table, &mut values);
        for (k, v) in overrides {
            values.insert(k.clone(), v.clone());
        }
        let mut r = Reader {
            values,
            errors: Vec::new(),
        };
        let mut c = RunConfig::default();
        r.uint("seed", &mut c.seed);
        r.opt_uint("threads", &mut c.threads);
        r.opt_uint("max_pairs", &mut c.max_pairs);

        r.path("paths.vocab", &mut c.paths.vocab);
        r.path("paths.init_checkpoint", &mut c.paths.init_checkpoint);
        r.path("paths.train", &mut c.paths.train);
        r.path("paths.valid", &mut c.paths.valid);
        r.path("paths.reddit", &mut c.paths.reddit);
        r.path("paths.output_dir", &mut c.paths.output_dir);

        r.boolean("synthetic.enabled", &mut c.synthetic.enabled);
        r.uint("synthetic.dialogues", &mut c.synthetic.dialogues);
        r.uint("synthetic.valid_dialogues", &mut c.synthetic.valid_dialogues);
        r.uint("synthetic.reddit_pairs", &mut c.synthetic.reddit_pairs);

        r.uint("tokenizer.vocab_size", &mut c.tokenizer.vocab_size);
        r.uint("tokenizer.min_frequency", &mut c.tokenizer.min_frequency);

        r.uint("model.max_len", &mut c.model.max_len);
        r.uint("model.hidden_dim", &mut c.model.hidden_dim);
        r.uint("model.num_layers", &mut c.model.num_layers);
        r.uint("model.num_heads", &mut c.model.num_heads);
        r.uint("model.ffn_dim", &mut c.model.ffn_dim);
        r.float("model.dropout_rate", &mut c.model.dropout_rate);
        r.boolean("model.tie_mlm_head", &mut c.model.tie_mlm_head);

        r.float("mask.select_prob", &mut c.mask.select_prob);
        r.float("mask.mask_frac", &mut c.mask.mask_frac);
        r.float("mask.random_frac", &mut c.mask.random_frac);
        r.float("mask.keep_frac", &mut c.mask.keep_frac);

        r.float("augment.select_prob", &mut c.augment.corruption.select_prob);
        r.uint("augment.num_augments", &mut c.augment.num_augments);
        r.parsed::<Reconstruction>("augment.strategy", &mut c.augment.reconstruction);
        r.parsed::<LabelMode>("augment.label_mode", &mut c.augment.label_mode);

        r.uint("pretrain.epochs", &mut c.pretrain.epochs);
        r.uint("pretrain.batch_size", &mut c.pretrain.batch_size);
        r.float("pretrain.learning_rate", &mut c.pretrain.learning_rate);
        r.uint("pretrain.warmup_steps", &mut c.pretrain.warmup_steps);
        r.opt_uint("pretrain.max_steps", &mut c.pretrain.max_steps);
        r.uint("pretrain.shuffle_window", &mut c.pretrain.shuffle_window);

        r.uint("finetune.epochs", &mut c.finetune.epochs);
        r.opt_uint("finetune.member_epochs", &mut c.member_epochs);
        r.uint("finetune.batch_size", &mut c.finetune.batch_size);
        r.float("finetune.learning_rate", &mut c.finetune.learning_rate);
        r.float("finetune.warmup_frac", &mut c.finetune.warmup_frac);
        r.opt_uint("finetune.eval_every", &mut c.finetune.eval_every);
        r.parsed::<RankMetric>("finetune.selection_metric", &mut c.finetune.selection_metric);
        r.parsed::<LogBase>("finetune.js_base", &mut c.finetune.js_base);

        r.uint("ensemble.members", &mut c.ensemble.members);
        r.uint("ensemble.top", &mut c.ensemble.top);
        r.parsed::<RankMetric>("ensemble.metric", &mut c.ensemble.metric);

        let mut errors = r.errors;
        errors.extend(r.values.keys().map(|k| format!("{k}: unknown key")));
        c.derive_seeds();
        if let Some(p) = &c.paths.init_checkpoint {
            c.pretrain.init = InitFrom::WarmStart(p.clone());
        }
        if check_paths {
            errors.extend(c.violations());
        } else {
            errors.extend(c.section_violations());
        }
        if errors.is_empty() {
            Ok(c)
        } else {
            Err(Error::RunConfig(errors))
        }
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[(String, toml::Value)]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn load_sections(path: impl AsRef<Path>, overrides: &[(String, toml::Value)]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::sections_from_toml_str(&text, overrides)
    }

    /// Stage seeds all follow from the global seed.
    fn derive_seeds(&mut self) {
        let s = self.seed;
        self.model.seed = rng::derive_seed(s, &[rng::label("model")]);
        self.mask.seed = rng::derive_seed(s, &[rng::label("mask")]);
        self.augment.seed = rng::derive_seed(s, &[rng::label("augment")]);
        self.pretrain.seed = rng::derive_seed(s, &[rng::label("pretrain")]);
        self.finetune.seed = rng::derive_seed(s, &[rng::label("teacher")]);
    }

    /// Seed of ensemble member `k`.
    pub fn member_seed(&self, k: usize) -> u64 {
        rng::derive_seed(self.seed, &[rng::label("member"), k as u64])
    }

    /// Every violation, as `key: message` lines.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        match &self.paths.output_dir {
            None => out.push("paths.output_dir: required".to_owned()),
            Some(d) => {
                if d.exists() && !d.is_dir() {
                    out.push(format!("paths.output_dir: {} exists and is not a directory", d.display()));
                }
            }
        }
        let inputs = [
            ("paths.train", &self.paths.train, !self.synthetic.enabled),
            ("paths.valid", &self.paths.valid, !self.synthetic.enabled),
            ("paths.reddit", &self.paths.reddit, !self.synthetic.enabled),
            ("paths.vocab", &self.paths.vocab, false),
            ("paths.init_checkpoint", &self.paths.init_checkpoint, false),
        ];
        for (key, path, required) in inputs {
            match path {
                Some(p) if !p.exists() => out.push(format!("{key}: {} does not exist", p.display())),
                None if required => out.push(format!("{key}: required unless synthetic.enabled = true")),
                _ => {}
            }
        }
        out.extend(self.section_violations());
        out
    }

    /// Violations outside the `paths` table.
    pub fn section_violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.threads == Some(0) {
            out.push("threads: must be positive".into());
        }
        if self.synthetic.enabled {
            if self.synthetic.valid_dialogues == 0 || self.synthetic.valid_dialogues >= self.synthetic.dialogues {
                out.push("synthetic.valid_dialogues: must be positive and below synthetic.dialogues".into());
            }
            if self.synthetic.reddit_pairs == 0 {
                out.push("synthetic.reddit_pairs: must be positive".into());
            }
        }
        let model_cfg = ModelConfig {
            // the vocab size is fixed by the tokenizer
            vocab_size: self.tokenizer.vocab_size,
            ..self.model.clone()
        };
        out.extend(prefixed(model_cfg.violations(), "model"));
        out.extend(prefixed(self.mask.violations(), "mask"));
        out.extend(prefixed(self.augment.violations(), "augment"));
        out.extend(prefixed(self.pretrain.violations(), "pretrain"));
        out.extend(prefixed(self.finetune.violations(), "finetune"));
        if self.member_epochs == Some(0) {
            out.push("finetune.member_epochs: must be at least 1".into());
        }
        if self.ensemble.top == 0 || self.ensemble.top > self.ensemble.members {
            out.push(format!(
                "ensemble.top: must lie in 1..={} (ensemble.members), got {}",
                self.ensemble.members, self.ensemble.top
            ));
        }
        out
    }

    /// Hex SHA-256 of the configuration with the output directory blanked,
    /// so the same experiment hashes equal wherever it is written.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths.output_dir = None;
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn member_plan(&self, k: usize) -> FinetunePlan {
        FinetunePlan {
            epochs: self.member_epochs.unwrap_or(self.finetune.epochs),
            seed: self.member_seed(k),
            ..self.finetune.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn errors(text: &str) -> Vec<String> {
        match RunConfig::from_toml_str(text, &[]) {
            Err(Error::RunConfig(v)) => v,
            other => panic!("expected config errors, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_reports_required_paths() {
        let e = errors("");
        assert_eq!(e.len(), 4, "{e:?}");
        for key in ["paths.output_dir", "paths.train", "paths.valid", "paths.reddit"] {
            assert!(e.iter().any(|l| l.starts_with(key)), "{key} missing from {e:?}");
        }
    }

    #[test]
    fn head_divisibility_names_both_keys() {
        let e = errors("paths.output_dir = 'x'\nsynthetic.enabled = true\nmodel.hidden_dim = 6\nmodel.num_heads = 4");
        assert_eq!(e.len(), 1, "{e:?}");
        assert!(e[0].contains("model.hidden_dim") && e[0].contains("model.num_heads"), "{e:?}");
    }

    #[test]
    fn mask_fractions_must_sum_to_one() {
        let e = errors(
            "paths.output_dir = 'x'\nsynthetic.enabled = true\nmask.mask_frac = 0.8\nmask.random_frac = 0.2\nmask.keep_frac = 0.2",
        );
        assert_eq!(e.len(), 1, "{e:?}");
        assert!(e[0].contains("sum to 1"), "{e:?}");
    }

    #[test]
    fn all_problems_are_reported_together() {
        let e = errors("seed = -1\nmodel.hidden_dim = 'big'\nbogus.key = 1\n[paths]\noutput_dir = 'x'\ntrain = '/no/such/file'");
        for needle in ["seed", "model.hidden_dim", "bogus.key: unknown key", "paths.train: /no/such/file"] {
            assert!(e.iter().any(|l| l.contains(needle)), "{needle} missing from {e:?}");
        }
    }

    #[test]
    fn overrides_win_and_seeds_follow_global_seed() {
        let text = "seed = 1\npaths.output_dir = 'x'\nsynthetic.enabled = true\nfinetune.epochs = 3";
        let a = RunConfig::from_toml_str(text, &[]).unwrap();
        let b = RunConfig::from_toml_str(
            text,
            &[
                ("seed".into(), parse_override_value("2")),
                ("finetune.epochs".into(), parse_override_value("5")),
                ("augment.strategy".into(), parse_override_value("topk:3")),
            ],
        )
        .unwrap();
        assert_eq!((a.finetune.epochs, b.finetune.epochs), (3, 5));
        assert_ne!(a.model.seed, b.model.seed);
        assert_eq!(b.augment.reconstruction, Reconstruction::TopK { k: 3, temperature: 1.0 });
        assert_ne!(a.member_seed(0), a.member_seed(1));
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = RunConfig::from_toml_str("paths.output_dir = 'x'\nsynthetic.enabled = true", &[]).unwrap();
        let b = RunConfig::from_toml_str("paths.output_dir = 'y'\nsynthetic.enabled = true", &[]).unwrap();
        let c = RunConfig::from_toml_str("paths.output_dir = 'y'\nsynthetic.enabled = true\nseed = 3", &[]).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }
}
