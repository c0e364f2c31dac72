//! SSMBA augmentation: corrupt with MLM masking, reconstruct with a masked
//! LM, pseudo-label with a teacher classifier.

use std::fmt;
use std::str::FromStr;

use ndarray::ArrayView1;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{tie_broken_argmax, Example, ExampleRecord, LabelDistribution, Origin};
use crate::error::{Error, Result};
use crate::model::{self, MaskedTokens, ModelParams};
use crate::pretrain::{eligible_positions, MaskPolicy};
use crate::rng;
use crate::tokenizer::{EncodedPair, Vocab, MASK_ID, NUM_SPECIAL};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Reconstruction {
    Greedy,
    Sample { temperature: f64 },
    TopK { k: usize, temperature: f64 },
}

impl Default for Reconstruction {
    fn default() -> Self {
        Reconstruction::Sample { temperature: 1.0 }
    }
}

impl FromStr for Reconstruction {
    type Err = Error;

    /// `greedy`, `sample`, `sample:T`, `topk:K` or `topk:K:T`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Input(format!("strategy must be greedy, sample[:T] or topk:K[:T], got {s:?}"));
        let parts: Vec<&str> = s.split(':').collect();
        let temp = |t: Option<&&str>| -> Result<f64> {
            match t {
                None => Ok(1.0),
                Some(t) => t.parse().map_err(|_| bad()),
            }
        };
        let r = match parts.as_slice() {
            ["greedy"] => Reconstruction::Greedy,
            ["sample", rest @ ..] if rest.len() <= 1 => Reconstruction::Sample {
                temperature: temp(rest.first())?,
            },
            ["topk", k, rest @ ..] if rest.len() <= 1 => Reconstruction::TopK {
                k: k.parse().map_err(|_| bad())?,
                temperature: temp(rest.first())?,
            },
            _ => return Err(bad()),
        };
        Ok(r)
    }
}

impl fmt::Display for Reconstruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Reconstruction::Greedy => write!(f, "greedy"),
            Reconstruction::Sample { temperature } => write!(f, "sample:{temperature}"),
            Reconstruction::TopK { k, temperature } => write!(f, "topk:{k}:{temperature}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    #[default]
    Soft,
    Hard,
}

impl FromStr for LabelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft" => Ok(LabelMode::Soft),
            "hard" => Ok(LabelMode::Hard),
            _ => Err(Error::Input(format!("label mode must be soft or hard, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub corruption: MaskPolicy,
    pub num_augments: usize,
    pub reconstruction: Reconstruction,
    pub label_mode: LabelMode,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            corruption: MaskPolicy::mask_only(0.45, 0),
            num_augments: 2,
            reconstruction: Reconstruction::default(),
            label_mode: LabelMode::Soft,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn violations(&self) -> Vec<(String, String)> {
        let mut out = self.corruption.violations();
        if self.corruption.random_frac != 0.0 || self.corruption.keep_frac != 0.0 {
            out.push((
                "random_frac,keep_frac".into(),
                "augmentation corruption must be mask-only (both zero)".into(),
            ));
        }
        if self.num_augments == 0 {
            out.push(("num_augments".into(), "must be at least 1".into()));
        }
        match self.reconstruction {
            Reconstruction::Greedy => {}
            Reconstruction::Sample { temperature } | Reconstruction::TopK { temperature, .. } => {
                if !(temperature > 0.0 && temperature.is_finite()) {
                    out.push(("temperature".into(), format!("must be positive, got {temperature}")));
                }
            }
        }
        if let Reconstruction::TopK { k: 0, .. } = self.reconstruction {
            out.push(("top_k".into(), "must be at least 1".into()));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        crate::config::violations_to_result(self.violations(), "augment")
    }
}

/// Mask-only corruption with at least one masked position whenever any
/// position is eligible.
///
/// The selection is drawn from the masking distribution conditioned on a
/// non-empty outcome: the first selected position comes from its exact
/// conditional law, later positions are selected independently.
pub fn corrupt_q(select_prob: f64, pair: &EncodedPair, rng: &mut rng::Rng) -> (EncodedPair, MaskedTokens) {
    let eligible = eligible_positions(pair);
    let mut corrupted = pair.clone();
    let mut masked = MaskedTokens::default();
    let n = eligible.len();
    if n == 0 {
        return (corrupted, masked);
    }
    let p = select_prob.clamp(0.0, 1.0);
    let first = if p >= 1.0 {
        0
    } else if p <= 0.0 {
        rng.random_range(0..n)
    } else {
        // P(first = j | any) = (1-p)^j p / (1 - (1-p)^n)
        let log_q = (-p).ln_1p();
        let any = -(n as f64 * log_q).exp_m1();
        let u: f64 = rng.random();
        let j = ((-u * any).ln_1p() / log_q).floor();
        (j.max(0.0) as usize).min(n - 1)
    };
    let mut chosen = vec![eligible[first]];
    for &pos in &eligible[first + 1..] {
        if rng.random::<f64>() < p {
            chosen.push(pos);
        }
    }
    for pos in chosen {
        masked.positions.push(pos);
        masked.original_ids.push(pair.token_ids[pos]);
        corrupted.token_ids[pos] = MASK_ID;
    }
    (corrupted, masked)
}

/// Choose a token from one row of vocabulary logits. Special ids are never
/// produced; greedy ties go to the lowest id.
pub fn choose_token(logits: ArrayView1<'_, f32>, strategy: Reconstruction, rng: &mut rng::Rng) -> u32 {
    let mut cands: Vec<(u32, f64)> = logits
        .iter()
        .enumerate()
        .skip(NUM_SPECIAL)
        .map(|(i, &l)| (i as u32, l as f64))
        .collect();
    let (temperature, keep) = match strategy {
        Reconstruction::Greedy => (None, 1),
        Reconstruction::Sample { temperature } => (Some(temperature), cands.len()),
        Reconstruction::TopK { k, temperature } => (Some(temperature), k.max(1)),
    };
    if keep < cands.len() {
        // stable: equal logits keep ascending id order
        cands.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
        cands.truncate(keep);
    }
    let Some(t) = temperature else {
        return cands[0].0;
    };
    let max = cands.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = cands.iter().map(|c| ((c.1 - max) / t).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (c, w) in cands.iter().zip(&weights) {
        if u < *w {
            return c.0;
        }
        u -= w;
    }
    cands.last().expect("vocab has ordinary tokens").0
}

fn check_vocab(model: &ModelParams<f32>, vocab: &Vocab) -> Result<()> {
    if model.config.vocab_size != vocab.len() {
        return Err(Error::CheckpointMismatch(format!(
            "model vocab_size {} does not match vocab with {} entries",
            model.config.vocab_size,
            vocab.len()
        )));
    }
    Ok(())
}

/// Refill the masked positions of `corrupted` from the masked LM. Every
/// other position is copied from `original`.
pub fn reconstruct_r(
    model: &ModelParams<f32>,
    vocab: &Vocab,
    original: &EncodedPair,
    corrupted: &EncodedPair,
    masked: &MaskedTokens,
    strategy: Reconstruction,
    rng: &mut rng::Rng,
) -> Result<EncodedPair> {
    check_vocab(model, vocab)?;
    if masked.positions.is_empty() {
        return Err(Error::EmptyInput("masked positions"));
    }
    let logits = model::forward_mlm(model, std::slice::from_ref(corrupted), std::slice::from_ref(&masked.positions))?;
    let mut out = original.clone();
    for (row, &pos) in masked.positions.iter().enumerate() {
        out.token_ids[pos] = choose_token(logits[0].row(row), strategy, rng);
    }
    Ok(out)
}

/// Teacher distributions for a batch of examples.
pub fn pseudo_labels(
    teacher: &ModelParams<f32>,
    vocab: &Vocab,
    texts: &[(String, String)],
    mode: LabelMode,
) -> Result<Vec<LabelDistribution>> {
    check_vocab(teacher, vocab)?;
    let batch: Vec<EncodedPair> = texts
        .iter()
        .map(|(c, u)| vocab.encode_pair(c, u, teacher.config.max_len))
        .collect();
    model::forward_classify(teacher, &batch)?
        .into_iter()
        .map(|o| match mode {
            LabelMode::Soft => LabelDistribution::from_probs(o.probs),
            LabelMode::Hard => Ok(LabelDistribution::one_hot(tie_broken_argmax(&o.probs))),
        })
        .collect()
}

pub fn pseudo_label(
    teacher: &ModelParams<f32>,
    vocab: &Vocab,
    context: &str,
    utterance: &str,
    mode: LabelMode,
) -> Result<LabelDistribution> {
    let mut v = pseudo_labels(teacher, vocab, &[(context.to_owned(), utterance.to_owned())], mode)?;
    Ok(v.remove(0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedExample {
    pub context: String,
    pub utterance: String,
    pub pseudo_target: LabelDistribution,
    pub source_origin: Origin,
    pub aug_index: usize,
    pub corruption_seed: u64,
}

impl AugmentedExample {
    pub fn origin(&self) -> Origin {
        Origin::new(
            format!("{}/aug{}", self.source_origin.dialogue_id, self.aug_index),
            self.source_origin.turn_index,
        )
    }

    pub fn to_example(&self) -> Example {
        Example::new(
            self.context.clone(),
            self.utterance.clone(),
            self.pseudo_target.clone(),
            self.origin(),
        )
    }

    pub fn to_record(&self) -> ExampleRecord {
        ExampleRecord {
            context: self.context.clone(),
            utterance: self.utterance.clone(),
            counts: [0; 3],
            origin: self.origin().to_string(),
            pseudo: Some(self.pseudo_target.p),
            source_origin: Some(self.source_origin.to_string()),
            aug_index: Some(self.aug_index),
            corruption_seed: Some(self.corruption_seed),
        }
    }
}

/// Originals followed by their augments, in training order.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedDataset {
    pub originals: Vec<Example>,
    pub augments: Vec<AugmentedExample>,
}

impl AugmentedDataset {
    pub fn len(&self) -> usize {
        self.originals.len() + self.augments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_examples(&self) -> Vec<Example> {
        let mut out = self.originals.clone();
        out.extend(self.augments.iter().map(AugmentedExample::to_example));
        out
    }

    pub fn to_records(&self) -> Vec<ExampleRecord> {
        let mut out: Vec<ExampleRecord> = self.originals.iter().map(ExampleRecord::from_example).collect();
        out.extend(self.augments.iter().map(AugmentedExample::to_record));
        out
    }
}

/// Seed of the corruption/reconstruction stream for one augment.
pub fn corruption_seed(base: u64, source: &Origin, aug_index: usize) -> u64 {
    rng::derive_seed(base, &[rng::label(&source.to_string()), aug_index as u64])
}

/// Build one augment per (example, index) pair and pseudo-label it with
/// the teacher.
pub fn augment_dataset(
    train: &[Example],
    teacher: &ModelParams<f32>,
    recon: &ModelParams<f32>,
    vocab: &Vocab,
    cfg: &AugmentConfig,
) -> Result<AugmentedDataset> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    check_vocab(recon, vocab)?;
    check_vocab(teacher, vocab)?;
    let jobs: Vec<(usize, usize)> = (0..train.len())
        .flat_map(|i| (0..cfg.num_augments).map(move |k| (i, k)))
        .collect();
    let texts: Vec<(u64, String, String)> = jobs
        .par_iter()
        .map(|&(i, k)| {
            let ex = &train[i];
            let seed = corruption_seed(cfg.seed, &ex.origin, k);
            let mut r = rng::stream(seed);
            let original = vocab.encode_pair(&ex.context, &ex.utterance, recon.config.max_len);
            let (corrupted, masked) = corrupt_q(cfg.corruption.select_prob, &original, &mut r);
            let rebuilt = if masked.positions.is_empty() {
                original
            } else {
                reconstruct_r(recon, vocab, &original, &corrupted, &masked, cfg.reconstruction, &mut r)?
            };
            Ok((seed, vocab.decode(rebuilt.context_ids())?, vocab.decode(rebuilt.utterance_ids())?))
        })
        .collect::<Result<_>>()?;
    let pairs: Vec<(String, String)> = texts.iter().map(|(_, c, u)| (c.clone(), u.clone())).collect();
    let labels = pseudo_labels(teacher, vocab, &pairs, cfg.label_mode)?;
    let augments = jobs
        .iter()
        .zip(texts)
        .zip(labels)
        .map(|((&(i, k), (seed, context, utterance)), pseudo_target)| AugmentedExample {
            context,
            utterance,
            pseudo_target,
            source_origin: train[i].origin.clone(),
            aug_index: k,
            corruption_seed: seed,
        })
        .collect();
    Ok(AugmentedDataset {
        originals: train.to_vec(),
        augments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::is_special;
    use ndarray::Array1;

    fn pair(n: usize) -> EncodedPair {
        let ids: Vec<u32> = (0..n as u32).map(|i| 5 + i).collect();
        EncodedPair::from_segments(&ids[..n / 2], &ids[n / 2..], n + 6)
    }

    #[test]
    fn forced_mask_when_select_prob_tiny() {
        let p = pair(10);
        for s in 0..50 {
            let (c, m) = corrupt_q(1e-9, &p, &mut rng::stream(s));
            assert_eq!(m.positions.len(), 1);
            assert_eq!(c.token_ids[m.positions[0]], MASK_ID);
            assert!(!is_special(p.token_ids[m.positions[0]]));
        }
    }

    #[test]
    fn no_eligible_positions_masks_nothing() {
        let p = EncodedPair::from_segments(&[], &[], 8);
        let (c, m) = corrupt_q(0.5, &p, &mut rng::stream(0));
        assert!(m.positions.is_empty());
        assert_eq!(c, p);
    }

    #[test]
    fn masked_fraction_matches_select_prob() {
        let p = pair(100);
        let mut total = 0;
        for s in 0..100 {
            total += corrupt_q(0.45, &p, &mut rng::stream(s)).1.positions.len();
        }
        let frac = total as f64 / 10_000.0;
        assert!((frac - 0.45).abs() < 0.02, "{frac}");
    }

    #[test]
    fn first_position_follows_conditional_law() {
        // n = 2, p = 0.5: P(first = 0 | any) = 0.5 / 0.75 = 2/3
        let p = pair(2);
        let trials = 30_000;
        let mut first_zero = 0;
        let first_pos = p.token_ids.iter().position(|&t| !is_special(t)).unwrap();
        for s in 0..trials {
            let (_, m) = corrupt_q(0.5, &p, &mut rng::stream(s));
            if m.positions[0] == first_pos {
                first_zero += 1;
            }
        }
        let frac = first_zero as f64 / trials as f64;
        assert!((frac - 2.0 / 3.0).abs() < 0.015, "{frac}");
    }

    #[test]
    fn token_choice_skips_specials_and_breaks_ties_low() {
        let mut logits = Array1::<f32>::zeros(10);
        logits[2] = 50.0;
        logits[6] = 3.0;
        logits[8] = 3.0;
        let mut r = rng::stream(0);
        assert_eq!(choose_token(logits.view(), Reconstruction::Greedy, &mut r), 6);
        assert_eq!(
            choose_token(logits.view(), Reconstruction::TopK { k: 1, temperature: 1.0 }, &mut r),
            6
        );
        for _ in 0..100 {
            let t = choose_token(logits.view(), Reconstruction::Sample { temperature: 1.0 }, &mut r);
            assert!(t >= NUM_SPECIAL as u32);
            let t = choose_token(logits.view(), Reconstruction::TopK { k: 2, temperature: 1.0 }, &mut r);
            assert!(t == 6 || t == 8);
        }
    }

    #[test]
    fn cold_sampling_matches_greedy() {
        let logits = Array1::from_iter((0..12).map(|i| ((i * 7) % 5) as f32 + i as f32 * 0.01));
        let greedy = choose_token(logits.view(), Reconstruction::Greedy, &mut rng::stream(0));
        for s in 0..20 {
            let t = choose_token(logits.view(), Reconstruction::Sample { temperature: 1e-4 }, &mut rng::stream(s));
            assert_eq!(t, greedy);
        }
    }

    #[test]
    fn strategy_parsing() {
        assert_eq!("greedy".parse::<Reconstruction>().unwrap(), Reconstruction::Greedy);
        assert_eq!(
            "topk:5".parse::<Reconstruction>().unwrap(),
            Reconstruction::TopK { k: 5, temperature: 1.0 }
        );
        assert_eq!(
            "sample:0.5".parse::<Reconstruction>().unwrap(),
            Reconstruction::Sample { temperature: 0.5 }
        );
        assert!("beam".parse::<Reconstruction>().is_err());
        assert!("topk".parse::<Reconstruction>().is_err());
        let s = Reconstruction::TopK { k: 3, temperature: 0.7 }.to_string();
        assert_eq!(s.parse::<Reconstruction>().unwrap(), Reconstruction::TopK { k: 3, temperature: 0.7 });
    }

    #[test]
    fn config_requires_mask_only() {
        let mut cfg = AugmentConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.corruption.mask_frac = 0.9;
        cfg.corruption.keep_frac = 0.1;
        cfg.num_augments = 0;
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("augment.keep_frac") && msg.contains("augment.num_augments"), "{msg}");
    }
}
