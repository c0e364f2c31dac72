//! MLM corruption and continued pre-training on parent/child comment pairs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::RedditPair;
use crate::error::{Error, Result};
use crate::model::{self, LossSpec, MaskedTokens, Mode, ModelConfig, ModelParams};
use crate::optim::{Adam, AdamConfig};
use crate::rng;
use crate::tokenizer::{is_special, EncodedPair, Vocab, MASK_ID, NUM_SPECIAL};

/// BERT-style token corruption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPolicy {
    /// Chance that an eligible position is selected.
    pub select_prob: f64,
    /// Of selected positions: replaced by `[MASK]`.
    pub mask_frac: f64,
    /// Of selected positions: replaced by a uniform random non-special id.
    pub random_frac: f64,
    /// Of selected positions: left unchanged.
    pub keep_frac: f64,
    pub seed: u64,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        Self {
            select_prob: 0.15,
            mask_frac: 0.8,
            random_frac: 0.1,
            keep_frac: 0.1,
            seed: 0,
        }
    }
}

impl MaskPolicy {
    pub fn mask_only(select_prob: f64, seed: u64) -> Self {
        Self {
            select_prob,
            mask_frac: 1.0,
            random_frac: 0.0,
            keep_frac: 0.0,
            seed,
        }
    }

    pub fn violations(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        if !(self.select_prob >= 0.0 && self.select_prob <= 1.0) {
            out.push(("select_prob".into(), format!("must lie in [0, 1], got {}", self.select_prob)));
        }
        let fracs = [
            ("mask_frac", self.mask_frac),
            ("random_frac", self.random_frac),
            ("keep_frac", self.keep_frac),
        ];
        for (k, v) in fracs {
            if !(v >= 0.0 && v.is_finite()) {
                out.push((k.into(), format!("must be non-negative, got {v}")));
            }
        }
        let sum = self.mask_frac + self.random_frac + self.keep_frac;
        if (sum - 1.0).abs() > 1e-9 {
            out.push((
                "mask_frac,random_frac,keep_frac".into(),
                format!("fractions must sum to 1, got {sum}"),
            ));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        crate::config::violations_to_result(self.violations(), "mask")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskAction {
    Mask,
    Random,
    Keep,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskOutcome {
    pub corrupted: EncodedPair,
    pub masked: MaskedTokens,
    pub actions: Vec<MaskAction>,
}

/// Real positions holding ordinary (non-special) tokens.
pub fn eligible_positions(pair: &EncodedPair) -> Vec<usize> {
    (0..pair.length).filter(|&i| !is_special(pair.token_ids[i])).collect()
}

/// Select each eligible position with `select_prob`, then mask, randomize
/// or keep it according to the policy fractions.
pub fn apply_mask(policy: &MaskPolicy, pair: &EncodedPair, vocab_size: usize, rng: &mut rng::Rng) -> MaskOutcome {
    let mut corrupted = pair.clone();
    let mut masked = MaskedTokens::default();
    let mut actions = Vec::new();
    for pos in eligible_positions(pair) {
        if rng.random::<f64>() >= policy.select_prob {
            continue;
        }
        let r = rng.random::<f64>();
        let action = if r < policy.mask_frac {
            corrupted.token_ids[pos] = MASK_ID;
            MaskAction::Mask
        } else if r < policy.mask_frac + policy.random_frac && vocab_size > NUM_SPECIAL {
            corrupted.token_ids[pos] = rng.random_range(NUM_SPECIAL as u32..vocab_size as u32);
            MaskAction::Random
        } else {
            MaskAction::Keep
        };
        masked.positions.push(pos);
        masked.original_ids.push(pair.token_ids[pos]);
        actions.push(action);
    }
    MaskOutcome {
        corrupted,
        masked,
        actions,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitFrom {
    Scratch,
    WarmStart(PathBuf),
}

impl FromStr for InitFrom {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scratch" => Ok(InitFrom::Scratch),
            _ => match s.strip_prefix("warm:") {
                Some(p) if !p.is_empty() => Ok(InitFrom::WarmStart(PathBuf::from(p))),
                _ => Err(Error::Input(format!("init must be scratch or warm:PATH, got {s:?}"))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainPlan {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub max_steps: Option<usize>,
    pub init: InitFrom,
    /// Pairs are shuffled within consecutive windows of this many items.
    pub shuffle_window: usize,
    pub seed: u64,
}

impl Default for PretrainPlan {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 32,
            learning_rate: 1e-4,
            warmup_steps: 100,
            max_steps: None,
            init: InitFrom::Scratch,
            shuffle_window: 10_000,
            seed: 0,
        }
    }
}

impl PretrainPlan {
    pub fn violations(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        if self.epochs == 0 {
            out.push(("epochs".into(), "must be at least 1".into()));
        }
        if self.batch_size == 0 {
            out.push(("batch_size".into(), "must be positive".into()));
        }
        // zero is accepted: it freezes the parameters
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            out.push(("learning_rate".into(), format!("must be non-negative, got {}", self.learning_rate)));
        }
        if self.shuffle_window == 0 {
            out.push(("shuffle_window".into(), "must be positive".into()));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub mlm_loss: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub params: ModelParams<f32>,
    pub log: Vec<LossRecord>,
}

impl PretrainOutcome {
    /// Mean step loss per epoch, in epoch order.
    pub fn epoch_means(&self) -> Vec<f64> {
        epoch_means(&self.log)
    }
}

pub fn epoch_means(log: &[LossRecord]) -> Vec<f64> {
    let mut out: Vec<(f64, usize)> = Vec::new();
    for r in log {
        if out.len() <= r.epoch {
            out.resize(r.epoch + 1, (0.0, 0));
        }
        out[r.epoch].0 += r.mlm_loss;
        out[r.epoch].1 += 1;
    }
    out.into_iter().filter(|(_, n)| *n > 0).map(|(s, n)| s / n as f64).collect()
}

pub fn loss_log_csv(log: &[LossRecord]) -> String {
    let mut out = String::from("epoch,step,mlm_loss\n");
    for r in log {
        let _ = writeln!(out, "{},{},{}", r.epoch, r.step, r.mlm_loss);
    }
    out
}

/// Visit order for one epoch: consecutive windows, each shuffled.
pub fn windowed_order(n: usize, window: usize, rng: &mut rng::Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    for chunk in order.chunks_mut(window.max(1)) {
        chunk.shuffle(rng);
    }
    order
}

/// Parent text in segment 0, child text in segment 1.
pub fn encode_reddit_pair(vocab: &Vocab, pair: &RedditPair, max_len: usize) -> EncodedPair {
    vocab.encode_pair(&pair.parent_text, &pair.child_text, max_len)
}

fn initial_params(plan: &PretrainPlan, cfg: &ModelConfig) -> Result<ModelParams<f32>> {
    match &plan.init {
        InitFrom::Scratch => ModelParams::init(cfg),
        InitFrom::WarmStart(path) => {
            let mut p = model::load_checkpoint_for(path, cfg)?;
            // keep the run's own dropout and seed
            p.config = cfg.clone();
            Ok(p)
        }
    }
}

/// Masked-LM training over parent/child pairs with Adam.
pub fn run_pretrain<I>(
    plan: &PretrainPlan,
    cfg: &ModelConfig,
    policy: &MaskPolicy,
    pairs: I,
    vocab: &Vocab,
) -> Result<PretrainOutcome>
where
    I: IntoIterator<Item = RedditPair>,
{
    cfg.validate()?;
    policy.validate()?;
    crate::config::violations_to_result(plan.violations(), "pretrain")?;
    if vocab.len() != cfg.vocab_size {
        return Err(Error::CheckpointMismatch(format!(
            "vocab has {} entries but model vocab_size is {}",
            vocab.len(),
            cfg.vocab_size
        )));
    }
    let mut params = initial_params(plan, cfg)?;
    let encoded: Vec<EncodedPair> = pairs
        .into_iter()
        .map(|p| encode_reddit_pair(vocab, &p, cfg.max_len))
        .collect();
    if encoded.is_empty() {
        return Err(Error::EmptyInput("pair stream"));
    }
    train_mlm(&mut params, plan, policy, &encoded)
        .map(|log| PretrainOutcome { params, log })
}

fn train_mlm(
    params: &mut ModelParams<f32>,
    plan: &PretrainPlan,
    policy: &MaskPolicy,
    encoded: &[EncodedPair],
) -> Result<Vec<LossRecord>> {
    let mut opt = Adam::new(
        params,
        AdamConfig {
            learning_rate: plan.learning_rate,
            warmup_steps: plan.warmup_steps,
            ..AdamConfig::default()
        },
    );
    let vocab_size = params.config.vocab_size;
    let mut log = Vec::new();
    let mut step = 0usize;
    'epochs: for epoch in 0..plan.epochs {
        let mut order_rng = rng::substream(plan.seed, &[rng::label("pretrain-order"), epoch as u64]);
        let order = windowed_order(encoded.len(), plan.shuffle_window, &mut order_rng);
        for batch_idx in order.chunks(plan.batch_size) {
            if plan.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let mut batch = Vec::with_capacity(batch_idx.len());
            let mut masks = Vec::with_capacity(batch_idx.len());
            for &i in batch_idx {
                let mut r = rng::substream(policy.seed, &[rng::label("pretrain-mask"), epoch as u64, i as u64]);
                let out = apply_mask(policy, &encoded[i], vocab_size, &mut r);
                batch.push(out.corrupted);
                masks.push(out.masked);
            }
            if masks.iter().all(|m| m.positions.is_empty()) {
                continue;
            }
            let mode = Mode::Train {
                seed: rng::derive_seed(plan.seed, &[rng::label("pretrain-dropout"), step as u64]),
            };
            let g = model::backward(params, &batch, &LossSpec::masked_lm(&masks), mode)?;
            opt.step(params, &g.grads);
            if !params.all_finite() {
                return Err(Error::Input(format!("non-finite parameters after step {step}")));
            }
            log.push(LossRecord {
                epoch,
                step,
                mlm_loss: g.loss,
            });
            step += 1;
        }
        if let Some(m) = epoch_means(&log).last() {
            log::info!("pretrain epoch {epoch}: mean mlm loss {m:.4}");
        }
    }
    Ok(log)
}

pub fn write_loss_log(path: impl AsRef<Path>, log: &[LossRecord]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, loss_log_csv(log)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{CLS_ID, PAD_ID, SEP_ID};
    use proptest::prelude::*;

    fn pair(n_ctx: usize, n_utt: usize, max_len: usize) -> EncodedPair {
        let ctx: Vec<u32> = (0..n_ctx as u32).map(|i| 5 + i % 20).collect();
        let utt: Vec<u32> = (0..n_utt as u32).map(|i| 7 + i % 20).collect();
        EncodedPair::from_segments(&ctx, &utt, max_len)
    }

    #[test]
    fn zero_select_prob_is_identity() {
        let p = pair(5, 6, 16);
        let out = apply_mask(&MaskPolicy { select_prob: 0.0, ..Default::default() }, &p, 30, &mut rng::stream(1));
        assert_eq!(out.corrupted, p);
        assert!(out.masked.positions.is_empty());
    }

    #[test]
    fn full_masking_touches_only_content() {
        let p = pair(5, 6, 16);
        let out = apply_mask(&MaskPolicy::mask_only(1.0, 0), &p, 30, &mut rng::stream(1));
        for i in 0..16 {
            match p.token_ids[i] {
                CLS_ID | SEP_ID | PAD_ID => assert_eq!(out.corrupted.token_ids[i], p.token_ids[i]),
                _ => assert_eq!(out.corrupted.token_ids[i], MASK_ID),
            }
        }
        assert_eq!(out.masked.positions.len(), 11);
        for (pos, orig) in out.masked.positions.iter().zip(&out.masked.original_ids) {
            assert_eq!(p.token_ids[*pos], *orig);
        }
    }

    #[test]
    fn masking_is_reproducible() {
        let p = pair(10, 10, 32);
        let a = apply_mask(&MaskPolicy::default(), &p, 50, &mut rng::stream(9));
        let b = apply_mask(&MaskPolicy::default(), &p, 50, &mut rng::stream(9));
        assert_eq!(a, b);
    }

    #[test]
    fn policy_validation() {
        let bad = MaskPolicy { mask_frac: 0.8, random_frac: 0.2, keep_frac: 0.2, ..Default::default() };
        let v = bad.violations();
        assert_eq!(v.len(), 1);
        assert!(v[0].1.contains("sum to 1"));
        assert!(MaskPolicy::default().validate().is_ok());
    }

    #[test]
    fn init_parsing() {
        assert_eq!("scratch".parse::<InitFrom>().unwrap(), InitFrom::Scratch);
        assert_eq!("warm:a/b.ckpt".parse::<InitFrom>().unwrap(), InitFrom::WarmStart("a/b.ckpt".into()));
        assert!("warm:".parse::<InitFrom>().is_err());
        assert!("bert".parse::<InitFrom>().is_err());
    }

    #[test]
    fn windowed_order_is_permutation_within_windows() {
        let order = windowed_order(10, 4, &mut rng::stream(3));
        let mut sorted = order.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        for (w, chunk) in order.chunks(4).enumerate() {
            assert!(chunk.iter().all(|&i| i / 4 == w));
        }
    }

    #[test]
    fn epoch_means_average_steps() {
        let log = vec![
            LossRecord { epoch: 0, step: 0, mlm_loss: 4.0 },
            LossRecord { epoch: 0, step: 1, mlm_loss: 2.0 },
            LossRecord { epoch: 1, step: 2, mlm_loss: 1.0 },
        ];
        assert_eq!(epoch_means(&log), vec![3.0, 1.0]);
        assert_eq!(loss_log_csv(&log[..1]), "epoch,step,mlm_loss\n0,0,4\n");
    }

    proptest! {
        #[test]
        fn corruption_preserves_structure(n_ctx in 0usize..20, n_utt in 0usize..20, extra in 0usize..8,
                                          seed in 0u64..1000, sel in 0.0f64..1.0) {
            let max_len = (n_ctx + n_utt + 3 + extra).max(8);
            let p = pair(n_ctx, n_utt, max_len);
            let policy = MaskPolicy { select_prob: sel, ..Default::default() };
            let out = apply_mask(&policy, &p, 40, &mut rng::stream(seed));
            prop_assert_eq!(out.corrupted.token_ids.len(), p.token_ids.len());
            prop_assert_eq!(&out.corrupted.segment_ids, &p.segment_ids);
            prop_assert_eq!(&out.corrupted.attention_mask, &p.attention_mask);
            for i in 0..max_len {
                if matches!(p.token_ids[i], CLS_ID | SEP_ID | PAD_ID) {
                    prop_assert_eq!(out.corrupted.token_ids[i], p.token_ids[i]);
                }
                if !out.masked.positions.contains(&i) {
                    prop_assert_eq!(out.corrupted.token_ids[i], p.token_ids[i]);
                }
            }
        }
    }
}
