//! DBDC metrics: majority-label accuracy, F1, Jensen-Shannon divergence,
//! and top-k probability-averaging ensembles.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{majority_label, tie_broken_argmax, Example, Label, Origin};
use crate::error::{Error, Result};

/// Tolerance on the sum of an input distribution.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum LogBase {
    #[default]
    #[serde(rename = "2")]
    Two,
    #[serde(rename = "e")]
    E,
}

impl LogBase {
    fn ln_divisor(self) -> f64 {
        match self {
            LogBase::Two => std::f64::consts::LN_2,
            LogBase::E => 1.0,
        }
    }
}

impl fmt::Display for LogBase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LogBase::Two => "2",
            LogBase::E => "e",
        })
    }
}

impl FromStr for LogBase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "2" => Ok(LogBase::Two),
            "e" => Ok(LogBase::E),
            _ => Err(Error::Input(format!("log base must be 2 or e, got {s:?}"))),
        }
    }
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::LengthMismatch { left: a, right: b });
    }
    if a == 0 {
        return Err(Error::EmptyInput("label sequence"));
    }
    Ok(())
}

pub fn accuracy(preds: &[Label], golds: &[Label]) -> Result<f64> {
    check_lengths(preds.len(), golds.len())?;
    let hits = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// `m[gold][pred]` counts.
pub fn confusion_matrix(preds: &[Label], golds: &[Label]) -> Result<[[u64; 3]; 3]> {
    check_lengths(preds.len(), golds.len())?;
    let mut m = [[0u64; 3]; 3];
    for (p, g) in preds.iter().zip(golds) {
        m[g.index()][p.index()] += 1;
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum F1Mode {
    Macro,
    Single(Label),
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// F1 of one class from a confusion matrix; 0 when precision and recall
/// are both 0.
pub fn class_f1(m: &[[u64; 3]; 3], class: Label) -> f64 {
    let c = class.index();
    let tp = m[c][c];
    let predicted: u64 = (0..3).map(|g| m[g][c]).sum();
    let actual: u64 = m[c].iter().sum();
    let p = ratio(tp, predicted);
    let r = ratio(tp, actual);
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn f1(preds: &[Label], golds: &[Label], mode: F1Mode) -> Result<f64> {
    let m = confusion_matrix(preds, golds)?;
    Ok(match mode {
        F1Mode::Single(l) => class_f1(&m, l),
        F1Mode::Macro => Label::ALL.iter().map(|&l| class_f1(&m, l)).sum::<f64>() / 3.0,
    })
}

fn check_distribution(p: &[f64; 3]) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) || (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
        return Err(Error::NotNormalized(sum));
    }
    Ok(())
}

fn kl_to_mid(p: &[f64; 3], m: &[f64; 3]) -> f64 {
    p.iter()
        .zip(m)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, mi)| pi * (pi / mi).ln())
        .sum()
}

/// Jensen-Shannon divergence between two distributions over the labels.
pub fn js_divergence(p: &[f64; 3], q: &[f64; 3], base: LogBase) -> Result<f64> {
    check_distribution(p)?;
    check_distribution(q)?;
    let m = [(p[0] + q[0]) / 2.0, (p[1] + q[1]) / 2.0, (p[2] + q[2]) / 2.0];
    let js = 0.5 * kl_to_mid(p, &m) + 0.5 * kl_to_mid(q, &m);
    Ok((js / base.ln_divisor()).max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub origin: Origin,
    pub probs: [f64; 3],
    pub label: Label,
}

impl PredictionRecord {
    pub fn new(origin: Origin, probs: [f64; 3]) -> Self {
        Self {
            origin,
            label: tie_broken_argmax(&probs),
            probs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub accuracy: f64,
    pub f1_macro: f64,
    pub f1_breakdown: f64,
    pub js_div: f64,
    pub js_base: LogBase,
    pub n_examples: usize,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        format!(
            "metric          value\n\
             accuracy        {:.4}\n\
             f1_macro        {:.4}\n\
             f1_breakdown    {:.4}\n\
             js_div (base {}) {:.4}\n\
             n_examples      {}\n",
            self.accuracy, self.f1_macro, self.f1_breakdown, self.js_base, self.js_div, self.n_examples
        )
    }

    pub fn metric(&self, which: RankMetric) -> f64 {
        match which {
            RankMetric::Accuracy => self.accuracy,
            RankMetric::F1Macro => self.f1_macro,
            RankMetric::JsDiv => self.js_div,
        }
    }
}

/// Score predictions against gold examples. Predictions are matched to
/// gold by origin and must cover exactly the same set.
pub fn evaluate(preds: &[PredictionRecord], golds: &[Example], base: LogBase) -> Result<MetricReport> {
    if golds.is_empty() {
        return Err(Error::EmptyInput("gold examples"));
    }
    let by_origin: HashMap<&Origin, &PredictionRecord> = preds.iter().map(|p| (&p.origin, p)).collect();
    let gold_origins: BTreeSet<String> = golds.iter().map(|g| g.origin.to_string()).collect();
    let pred_origins: BTreeSet<String> = preds.iter().map(|p| p.origin.to_string()).collect();
    if gold_origins != pred_origins || by_origin.len() != preds.len() {
        let missing: Vec<&str> = gold_origins.difference(&pred_origins).map(String::as_str).collect();
        let mut extra: Vec<String> = pred_origins.difference(&gold_origins).cloned().collect();
        if by_origin.len() != preds.len() {
            extra.push("(duplicate origins)".into());
        }
        return Err(Error::OriginMismatch {
            missing: missing.join(", "),
            extra: extra.join(", "),
        });
    }
    let mut pred_labels = Vec::with_capacity(golds.len());
    let mut gold_labels = Vec::with_capacity(golds.len());
    let mut js_sum = 0.0;
    for g in golds {
        let p = by_origin[&g.origin];
        pred_labels.push(tie_broken_argmax(&p.probs));
        gold_labels.push(majority_label(&g.target));
        js_sum += js_divergence(&p.probs, &g.target.p, base)?;
    }
    Ok(MetricReport {
        accuracy: accuracy(&pred_labels, &gold_labels)?,
        f1_macro: f1(&pred_labels, &gold_labels, F1Mode::Macro)?,
        f1_breakdown: f1(&pred_labels, &gold_labels, F1Mode::Single(Label::B))?,
        js_div: js_sum / golds.len() as f64,
        js_base: base,
        n_examples: golds.len(),
    })
}

/// Elementwise mean of member predictions, aligned by origin in the order
/// of the first member.
pub fn ensemble_average(members: &[Vec<PredictionRecord>]) -> Result<Vec<PredictionRecord>> {
    let first = members.first().ok_or(Error::EmptyInput("ensemble members"))?;
    for (k, m) in members.iter().enumerate().skip(1) {
        if m.len() != first.len() {
            return Err(Error::LengthMismatch {
                left: first.len(),
                right: m.len(),
            });
        }
        if let Some((a, b)) = first.iter().zip(m).find(|(a, b)| a.origin != b.origin) {
            return Err(Error::Input(format!(
                "ensemble member {k} is misaligned: expected origin {} but found {}",
                a.origin, b.origin
            )));
        }
    }
    let k = members.len() as f64;
    Ok((0..first.len())
        .map(|i| {
            let mut probs = [0.0; 3];
            for m in members {
                for (acc, v) in probs.iter_mut().zip(m[i].probs) {
                    *acc += v;
                }
            }
            probs.iter_mut().for_each(|v| *v /= k);
            PredictionRecord::new(first[i].origin.clone(), probs)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RankMetric {
    #[default]
    Accuracy,
    F1Macro,
    JsDiv,
}

impl RankMetric {
    /// True when smaller values are better.
    pub fn lower_is_better(self) -> bool {
        matches!(self, RankMetric::JsDiv)
    }

    /// Strict improvement of `new` over `old`.
    pub fn improves(self, new: f64, old: f64) -> bool {
        if self.lower_is_better() {
            new < old
        } else {
            new > old
        }
    }
}

impl FromStr for RankMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accuracy" => Ok(RankMetric::Accuracy),
            "f1_macro" => Ok(RankMetric::F1Macro),
            "js_div" => Ok(RankMetric::JsDiv),
            _ => Err(Error::Input(format!("metric must be accuracy, f1_macro or js_div, got {s:?}"))),
        }
    }
}

impl fmt::Display for RankMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RankMetric::Accuracy => "accuracy",
            RankMetric::F1Macro => "f1_macro",
            RankMetric::JsDiv => "js_div",
        })
    }
}

/// Indices of the `k` best candidates, best first; ties keep input order.
pub fn select_top_k(reports: &[MetricReport], metric: RankMetric, k: usize) -> Result<Vec<usize>> {
    if k > reports.len() {
        return Err(Error::Input(format!("cannot select top {k} of {} candidates", reports.len())));
    }
    let mut idx: Vec<usize> = (0..reports.len()).collect();
    idx.sort_by(|&a, &b| {
        let (x, y) = (reports[a].metric(metric), reports[b].metric(metric));
        let ord = x.partial_cmp(&y).unwrap_or(std::cmp::Ordering::Equal);
        if metric.lower_is_better() {
            ord
        } else {
            ord.reverse()
        }
    });
    idx.truncate(k);
    Ok(idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LabelDistribution;
    use proptest::prelude::*;

    fn report(acc: f64, js: f64) -> MetricReport {
        MetricReport {
            accuracy: acc,
            f1_macro: acc,
            f1_breakdown: acc,
            js_div: js,
            js_base: LogBase::Two,
            n_examples: 1,
        }
    }

    #[test]
    fn accuracy_extremes_and_errors() {
        use Label::*;
        assert_eq!(accuracy(&[B, SB, NB], &[B, SB, NB]).unwrap(), 1.0);
        assert_eq!(accuracy(&[NB, NB], &[B, SB]).unwrap(), 0.0);
        assert!(accuracy(&[], &[]).is_err());
        assert!(matches!(accuracy(&[B], &[B, B]), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn f1_extremes() {
        use Label::*;
        let g = [B, SB, NB, B];
        assert_eq!(f1(&g, &g, F1Mode::Macro).unwrap(), 1.0);
        assert_eq!(f1(&g, &g, F1Mode::Single(B)).unwrap(), 1.0);
        assert_eq!(f1(&[NB, NB], &[B, B], F1Mode::Single(B)).unwrap(), 0.0);
    }

    #[test]
    fn js_anchors() {
        let js = js_divergence(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], LogBase::Two).unwrap();
        assert!((js - 1.0).abs() < 1e-12);
        let p = [0.2, 0.3, 0.5];
        assert_eq!(js_divergence(&p, &p, LogBase::Two).unwrap(), 0.0);
        let js = js_divergence(&[0.5, 0.5, 0.0], &[0.25, 0.25, 0.5], LogBase::Two).unwrap();
        assert!((js - 0.3113).abs() < 5e-5, "{js}");
        assert!(matches!(
            js_divergence(&[0.5, 0.6, 0.0], &p, LogBase::Two),
            Err(Error::NotNormalized(_))
        ));
    }

    #[test]
    fn top_k_selection() {
        let r = [report(0.7, 0.3), report(0.9, 0.2), report(0.8, 0.1)];
        assert_eq!(select_top_k(&r, RankMetric::Accuracy, 2).unwrap(), vec![1, 2]);
        assert_eq!(select_top_k(&r, RankMetric::JsDiv, 1).unwrap(), vec![2]);
        assert_eq!(select_top_k(&r, RankMetric::Accuracy, 3).unwrap().len(), 3);
        assert!(select_top_k(&r, RankMetric::Accuracy, 4).is_err());
        let tied = [report(0.8, 0.0), report(0.9, 0.0), report(0.9, 0.0)];
        assert_eq!(select_top_k(&tied, RankMetric::Accuracy, 2).unwrap(), vec![1, 2]);
    }

    #[test]
    fn ensemble_tie_goes_to_breakdown() {
        let a = vec![PredictionRecord::new(Origin::new("d", 1), [1.0, 0.0, 0.0])];
        let b = vec![PredictionRecord::new(Origin::new("d", 1), [0.0, 1.0, 0.0])];
        let avg = ensemble_average(&[a.clone(), b]).unwrap();
        assert_eq!(avg[0].probs, [0.5, 0.5, 0.0]);
        assert_eq!(avg[0].label, Label::B);
        assert_eq!(ensemble_average(std::slice::from_ref(&a)).unwrap(), a);
        let c = vec![PredictionRecord::new(Origin::new("e", 1), [1.0, 0.0, 0.0])];
        assert!(ensemble_average(&[a, c]).is_err());
    }

    #[test]
    fn evaluate_rejects_origin_mismatch() {
        let gold = vec![Example::new(
            "a".into(),
            "b".into(),
            LabelDistribution::from_counts([1, 0, 0]).unwrap(),
            Origin::new("d", 1),
        )];
        let pred = vec![PredictionRecord::new(Origin::new("x", 1), [1.0, 0.0, 0.0])];
        let err = evaluate(&pred, &gold, LogBase::Two).unwrap_err().to_string();
        assert!(err.contains("d:1") && err.contains("x:1"), "{err}");
        let pred = vec![PredictionRecord::new(Origin::new("d", 1), gold[0].target.p)];
        let r = evaluate(&pred, &gold, LogBase::Two).unwrap();
        assert_eq!((r.accuracy, r.js_div), (1.0, 0.0));
    }

    #[test]
    fn base_parsing_and_serialization() {
        assert_eq!("e".parse::<LogBase>().unwrap(), LogBase::E);
        assert!("10".parse::<LogBase>().is_err());
        let json = report(0.5, 0.1).to_json();
        assert!(json.contains("\"js_base\": \"2\""), "{json}");
    }

    fn dist() -> impl Strategy<Value = [f64; 3]> {
        (0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0).prop_filter_map("non-zero", |(a, b, c)| {
            let s = a + b + c;
            (s > 1e-6).then(|| [a / s, b / s, c / s])
        })
    }

    proptest! {
        #[test]
        fn js_symmetric_bounded_and_rescaled(p in dist(), q in dist()) {
            let a = js_divergence(&p, &q, LogBase::Two).unwrap();
            let b = js_divergence(&q, &p, LogBase::Two).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&a));
            let e = js_divergence(&p, &q, LogBase::E).unwrap();
            prop_assert!((e - a * std::f64::consts::LN_2).abs() < 1e-12);
        }

        #[test]
        fn macro_between_class_extremes(pairs in proptest::collection::vec((0usize..3, 0usize..3), 1..50)) {
            let preds: Vec<Label> = pairs.iter().map(|p| Label::from_index(p.0).unwrap()).collect();
            let golds: Vec<Label> = pairs.iter().map(|p| Label::from_index(p.1).unwrap()).collect();
            let m = confusion_matrix(&preds, &golds).unwrap();
            let per: Vec<f64> = Label::ALL.iter().map(|&l| class_f1(&m, l)).collect();
            let mac = f1(&preds, &golds, F1Mode::Macro).unwrap();
            let lo = per.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = per.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(mac >= lo - 1e-15 && mac <= hi + 1e-15);
            let diag: u64 = (0..3).map(|i| m[i][i]).sum();
            prop_assert_eq!(diag as f64 / preds.len() as f64, accuracy(&preds, &golds).unwrap());
        }

        #[test]
        fn ensemble_mean_is_distribution(members in proptest::collection::vec(dist(), 1..=8)) {
            let rows: Vec<Vec<PredictionRecord>> = members
                .iter()
                .map(|p| vec![PredictionRecord::new(Origin::new("d", 0), *p)])
                .collect();
            let avg = ensemble_average(&rows).unwrap();
            prop_assert!((avg[0].probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert_eq!(avg[0].label, tie_broken_argmax(&avg[0].probs));
        }
    }
}
