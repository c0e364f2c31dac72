//! KL fine-tuning of the breakdown classifier, checkpoint selection and
//! prediction export.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Example, LabelDistribution};
use crate::error::{Error, Result};
use crate::eval::{evaluate, LogBase, MetricReport, PredictionRecord, RankMetric};
use crate::model::{self, LossSpec, Mode, ModelParams};
use crate::optim::{Adam, AdamConfig};
use crate::rng;
use crate::tokenizer::{EncodedPair, Vocab};

const PREDICT_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetunePlan {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fraction of all steps spent in linear warmup.
    pub warmup_frac: f64,
    /// Steps between validation passes; `None` evaluates once per epoch.
    pub eval_every: Option<usize>,
    pub selection_metric: RankMetric,
    /// Draw a fresh classifier head from `seed` before training.
    pub reinit_head: bool,
    pub js_base: LogBase,
    pub seed: u64,
}

impl Default for FinetunePlan {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            learning_rate: 3e-5,
            warmup_frac: 0.1,
            eval_every: None,
            selection_metric: RankMetric::Accuracy,
            reinit_head: true,
            js_base: LogBase::Two,
            seed: 0,
        }
    }
}

impl FinetunePlan {
    pub fn violations(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        if self.epochs == 0 {
            out.push(("epochs".into(), "must be at least 1".into()));
        }
        if self.batch_size == 0 {
            out.push(("batch_size".into(), "must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            out.push(("learning_rate".into(), format!("must be non-negative, got {}", self.learning_rate)));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            out.push(("warmup_frac".into(), format!("must lie in [0, 1], got {}", self.warmup_frac)));
        }
        if self.eval_every == Some(0) {
            out.push(("eval_every".into(), "must be positive".into()));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    /// Mean training loss over the steps since the previous evaluation.
    pub train_kl: f64,
    pub report: MetricReport,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub best: ModelParams<f32>,
    pub best_step: usize,
    pub best_report: MetricReport,
    pub log: Vec<EvalRecord>,
}

/// Index of the best evaluation; ties keep the earlier one.
pub fn pick_best(reports: &[MetricReport], metric: RankMetric) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in reports.iter().enumerate() {
        match best {
            Some(b) if !metric.improves(r.metric(metric), reports[b].metric(metric)) => {}
            _ => best = Some(i),
        }
    }
    best
}

pub fn eval_log_csv(log: &[EvalRecord]) -> String {
    let mut out = String::from("step,train_kl,valid_acc,valid_f1,valid_jsd\n");
    for r in log {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.step, r.train_kl, r.report.accuracy, r.report.f1_macro, r.report.js_div
        );
    }
    out
}

fn encode_all(vocab: &Vocab, examples: &[Example], max_len: usize) -> Vec<EncodedPair> {
    examples
        .iter()
        .map(|e| vocab.encode_pair(&e.context, &e.utterance, max_len))
        .collect()
}

fn check_vocab(params: &ModelParams<f32>, vocab: &Vocab) -> Result<()> {
    if params.config.vocab_size != vocab.len() {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint vocab_size {} does not match vocab with {} entries",
            params.config.vocab_size,
            vocab.len()
        )));
    }
    Ok(())
}

fn predict_encoded(params: &ModelParams<f32>, examples: &[Example], encoded: &[EncodedPair]) -> Result<Vec<PredictionRecord>> {
    let mut out = Vec::with_capacity(encoded.len());
    for (ex, batch) in examples.chunks(PREDICT_CHUNK).zip(encoded.chunks(PREDICT_CHUNK)) {
        let probs = model::forward_classify(params, batch)?;
        out.extend(
            ex.iter()
                .zip(probs)
                .map(|(e, o)| PredictionRecord::new(e.origin.clone(), o.probs)),
        );
    }
    Ok(out)
}

/// Evaluation-mode predictions, one per example in input order.
pub fn predict(params: &ModelParams<f32>, examples: &[Example], vocab: &Vocab) -> Result<Vec<PredictionRecord>> {
    check_vocab(params, vocab)?;
    let encoded = encode_all(vocab, examples, params.config.max_len);
    predict_encoded(params, examples, &encoded)
}

/// Train on `train` with the KL objective, evaluating on `valid` and
/// keeping the best checkpoint.
pub fn run_finetune(
    plan: &FinetunePlan,
    init: &ModelParams<f32>,
    train: &[Example],
    valid: &[Example],
    vocab: &Vocab,
) -> Result<FinetuneOutcome> {
    crate::config::violations_to_result(plan.violations(), "finetune")?;
    check_vocab(init, vocab)?;
    if train.is_empty() {
        return Err(Error::EmptyInput("training split"));
    }
    if valid.is_empty() {
        return Err(Error::EmptyInput("validation split"));
    }
    let mut params = init.clone();
    if plan.reinit_head {
        params.reinit_classifier(rng::derive_seed(plan.seed, &[rng::label("classifier-head")]));
    }
    let max_len = params.config.max_len;
    let train_enc = encode_all(vocab, train, max_len);
    let valid_enc = encode_all(vocab, valid, max_len);
    let targets: Vec<LabelDistribution> = train.iter().map(|e| e.target.clone()).collect();

    let steps_per_epoch = train.len().div_ceil(plan.batch_size);
    let total_steps = steps_per_epoch * plan.epochs;
    let eval_every = plan.eval_every.unwrap_or(steps_per_epoch);
    let mut opt = Adam::new(
        &params,
        AdamConfig {
            learning_rate: plan.learning_rate,
            warmup_steps: (plan.warmup_frac * total_steps as f64).round() as usize,
            ..AdamConfig::default()
        },
    );

    let mut log: Vec<EvalRecord> = Vec::new();
    let mut best: Option<(ModelParams<f32>, usize, MetricReport)> = None;
    let mut loss_sum = 0.0;
    let mut loss_steps = 0usize;
    let mut step = 0usize;
    for epoch in 0..plan.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng::substream(plan.seed, &[rng::label("finetune-order"), epoch as u64]));
        for idx in order.chunks(plan.batch_size) {
            let batch: Vec<EncodedPair> = idx.iter().map(|&i| train_enc[i].clone()).collect();
            let tgt: Vec<LabelDistribution> = idx.iter().map(|&i| targets[i].clone()).collect();
            let mode = Mode::Train {
                seed: rng::derive_seed(plan.seed, &[rng::label("finetune-dropout"), step as u64]),
            };
            let g = model::backward(&params, &batch, &LossSpec::classify(&tgt), mode)?;
            opt.step(&mut params, &g.grads);
            if !params.all_finite() {
                return Err(Error::Input(format!("non-finite parameters after step {step}")));
            }
            loss_sum += g.loss;
            loss_steps += 1;
            step += 1;
            if step.is_multiple_of(eval_every) || step == total_steps {
                let preds = predict_encoded(&params, valid, &valid_enc)?;
                let report = evaluate(&preds, valid, plan.js_base)?;
                log::info!(
                    "finetune epoch {epoch} step {step}: train kl {:.4}, valid acc {:.4}",
                    loss_sum / loss_steps as f64,
                    report.accuracy
                );
                let improves = match &best {
                    None => true,
                    Some((_, _, b)) => plan
                        .selection_metric
                        .improves(report.metric(plan.selection_metric), b.metric(plan.selection_metric)),
                };
                if improves {
                    best = Some((params.clone(), step, report.clone()));
                }
                log.push(EvalRecord {
                    step,
                    train_kl: loss_sum / loss_steps as f64,
                    report,
                });
                loss_sum = 0.0;
                loss_steps = 0;
            }
        }
    }
    let (best, best_step, best_report) = best.expect("at least one evaluation runs");
    Ok(FinetuneOutcome {
        best,
        best_step,
        best_report,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(acc: f64) -> MetricReport {
        MetricReport {
            accuracy: acc,
            f1_macro: 0.0,
            f1_breakdown: 0.0,
            js_div: 1.0 - acc,
            js_base: LogBase::Two,
            n_examples: 1,
        }
    }

    #[test]
    fn ties_keep_earlier_checkpoint() {
        let r = [report(0.6), report(0.8), report(0.8)];
        assert_eq!(pick_best(&r, RankMetric::Accuracy), Some(1));
        assert_eq!(pick_best(&r, RankMetric::JsDiv), Some(1));
        assert_eq!(pick_best(&[], RankMetric::Accuracy), None);
    }

    #[test]
    fn log_csv_layout() {
        let log = vec![EvalRecord {
            step: 3,
            train_kl: 0.5,
            report: report(0.75),
        }];
        assert_eq!(eval_log_csv(&log), "step,train_kl,valid_acc,valid_f1,valid_jsd\n3,0.5,0.75,0,0.25\n");
    }

    #[test]
    fn plan_violations_are_collected() {
        let plan = FinetunePlan {
            epochs: 0,
            batch_size: 0,
            eval_every: Some(0),
            ..FinetunePlan::default()
        };
        assert_eq!(plan.violations().len(), 3);
    }
}
