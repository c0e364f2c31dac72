//! DBDC dialogue ingestion, annotator vote aggregation, example building and
//! the streaming Reddit parent/child extractor.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Breakdown label, ordered by severity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    B,
    SB,
    NB,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::B, Label::SB, Label::NB];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::B => "B",
            Label::SB => "SB",
            Label::NB => "NB",
        }
    }

    /// DBDC vote symbols: X = breakdown, T = some breakdown, O = no breakdown.
    pub fn from_vote_symbol(s: &str) -> Option<Label> {
        match s {
            "X" => Some(Label::B),
            "T" => Some(Label::SB),
            "O" => Some(Label::NB),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "B" => Ok(Label::B),
            "SB" => Ok(Label::SB),
            "NB" => Ok(Label::NB),
            other => Err(Error::Input(format!("unknown label {other:?}"))),
        }
    }
}

/// Index of the largest value; ties go to the more severe label
/// (B before SB before NB).
pub fn tie_broken_argmax<T: PartialOrd + Copy>(values: &[T; 3]) -> Label {
    let mut best = 0;
    for i in 1..3 {
        if values[i] > values[best] {
            best = i;
        }
    }
    Label::ALL[best]
}

/// Probability vector over (B, SB, NB), optionally backed by vote counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelDistribution {
    pub p: [f64; 3],
    /// Vote tallies; all zero for distributions that did not come from votes
    /// (teacher pseudo-labels).
    pub counts: [u32; 3],
}

impl LabelDistribution {
    pub fn from_counts(counts: [u32; 3]) -> Result<Self> {
        let total: u32 = counts.iter().sum();
        if total == 0 {
            return Err(Error::NoAnnotations);
        }
        let n = total as f64;
        Ok(Self {
            p: counts.map(|c| c as f64 / n),
            counts,
        })
    }

    /// Wrap a probability vector. Rejects negative entries and sums further
    /// than 1e-6 from one, then renormalizes.
    pub fn from_probs(p: [f64; 3]) -> Result<Self> {
        if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Input(format!("invalid probabilities {p:?}")));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::NotNormalized(sum));
        }
        Ok(Self {
            p: p.map(|x| x / sum),
            counts: [0; 3],
        })
    }

    pub fn one_hot(label: Label) -> Self {
        let mut p = [0.0; 3];
        p[label.index()] = 1.0;
        Self { p, counts: [0; 3] }
    }

    pub fn total_votes(&self) -> u32 {
        self.counts.iter().sum()
    }
}

/// Tally votes into a distribution.
pub fn aggregate_votes(votes: &[Label]) -> Result<LabelDistribution> {
    if votes.is_empty() {
        return Err(Error::NoAnnotations);
    }
    let mut counts = [0u32; 3];
    for v in votes {
        counts[v.index()] += 1;
    }
    LabelDistribution::from_counts(counts)
}

/// Majority label with ties broken B > SB > NB. Uses the vote counts when
/// present, the probabilities otherwise.
pub fn majority_label(d: &LabelDistribution) -> Label {
    if d.total_votes() > 0 {
        tie_broken_argmax(&d.counts)
    } else {
        tie_broken_argmax(&d.p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Speaker {
    User,
    System,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Turn {
    pub speaker: Speaker,
    pub utterance: String,
    pub annotations: Vec<Label>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dialogue {
    pub dialogue_id: String,
    pub turns: Vec<Turn>,
}

/// Where an example came from: dialogue id and turn index.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Origin {
    pub dialogue_id: String,
    pub turn_index: usize,
}

impl Origin {
    pub fn new(dialogue_id: impl Into<String>, turn_index: usize) -> Self {
        Self {
            dialogue_id: dialogue_id.into(),
            turn_index,
        }
    }
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.dialogue_id, self.turn_index)
    }
}

impl FromStr for Origin {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (id, turn) = s
            .rsplit_once(':')
            .ok_or_else(|| Error::Input(format!("origin {s:?} is not <dialogue>:<turn>")))?;
        let turn_index = turn
            .parse()
            .map_err(|_| Error::Input(format!("origin {s:?} has a non-numeric turn")))?;
        Ok(Origin::new(id, turn_index))
    }
}

impl Serialize for Origin {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Origin {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A labelled (context, utterance) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub context: String,
    pub utterance: String,
    pub target: LabelDistribution,
    pub majority: Label,
    pub origin: Origin,
}

impl Example {
    pub fn new(context: String, utterance: String, target: LabelDistribution, origin: Origin) -> Self {
        let majority = majority_label(&target);
        Self {
            context,
            utterance,
            target,
            majority,
            origin,
        }
    }
}

#[derive(Deserialize)]
struct RawDialogue {
    #[serde(rename = "dialogue-id")]
    dialogue_id: String,
    turns: Vec<RawTurn>,
}

#[derive(Deserialize)]
struct RawTurn {
    #[serde(rename = "turn-index")]
    turn_index: Option<usize>,
    speaker: String,
    utterance: String,
    #[serde(default)]
    annotations: Vec<RawAnnotation>,
}

#[derive(Deserialize)]
struct RawAnnotation {
    breakdown: String,
}

/// Parse one DBDC dialogue from JSON text. `name` labels errors.
pub fn parse_dbdc_str(text: &str, name: &str) -> Result<Dialogue> {
    let raw: RawDialogue = serde_json::from_str(text).map_err(|e| Error::Parse {
        path: name.to_owned(),
        offset: byte_offset(text, e.line(), e.column()),
        message: e.to_string(),
    })?;
    let mut turns = Vec::with_capacity(raw.turns.len());
    for (pos, t) in raw.turns.into_iter().enumerate() {
        let turn = t.turn_index.unwrap_or(pos);
        let speaker = match t.speaker.as_str() {
            "U" => Speaker::User,
            "S" => Speaker::System,
            other => {
                return Err(Error::Input(format!(
                    "{name}: unknown speaker {other:?} at turn {turn}"
                )))
            }
        };
        let annotations = t
            .annotations
            .iter()
            .map(|a| {
                Label::from_vote_symbol(&a.breakdown).ok_or_else(|| Error::UnknownVote {
                    symbol: a.breakdown.clone(),
                    turn,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        turns.push(Turn {
            speaker,
            utterance: t.utterance,
            annotations,
        });
    }
    Ok(Dialogue {
        dialogue_id: raw.dialogue_id,
        turns,
    })
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line - 1)
        .map(str::len)
        .sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

pub fn parse_dbdc_file(path: impl AsRef<Path>) -> Result<Dialogue> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dbdc_str(&text, &path.display().to_string())
}

/// One example per annotated system turn. The context is the most recent
/// user turn before it, or empty when no user has spoken yet.
pub fn build_examples(dlg: &Dialogue) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    let mut last_user: Option<&str> = None;
    for (i, turn) in dlg.turns.iter().enumerate() {
        match turn.speaker {
            Speaker::User => last_user = Some(&turn.utterance),
            Speaker::System if !turn.annotations.is_empty() => {
                let target = aggregate_votes(&turn.annotations)?;
                out.push(Example::new(
                    last_user.unwrap_or("").to_owned(),
                    turn.utterance.clone(),
                    target,
                    Origin::new(dlg.dialogue_id.clone(), i),
                ));
            }
            Speaker::System => {}
        }
    }
    Ok(out)
}

/// Proportions of majority labels, indexed (B, SB, NB).
pub fn label_histogram(examples: &[Example]) -> Result<[f64; 3]> {
    if examples.is_empty() {
        return Err(Error::EmptyInput("label histogram over no examples"));
    }
    let mut counts = [0usize; 3];
    for e in examples {
        counts[e.majority.index()] += 1;
    }
    let n = examples.len() as f64;
    Ok(counts.map(|c| c as f64 / n))
}

/// A parent comment and one of its direct replies.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RedditPair {
    pub parent_text: String,
    pub child_text: String,
    pub pair_id: String,
}

#[derive(Deserialize)]
struct RawComment {
    id: String,
    parent_id: String,
    body: String,
}

pub fn is_deleted_body(body: &str) -> bool {
    let t = body.trim();
    t.is_empty() || t == "[deleted]" || t == "[removed]"
}

pub const DEFAULT_PARENT_CAPACITY: usize = 1 << 20;

/// Streaming parent/child extractor over a pushshift-style comment dump.
///
/// A pair is emitted when a comment's `parent_id` names a comment (`t1_`
/// prefix) seen earlier in the stream. Seen comments live in a FIFO map
/// capped at `capacity` entries. Malformed lines are skipped and counted.
pub struct RedditPairs<I> {
    lines: I,
    limit: Option<usize>,
    emitted: usize,
    seen: HashMap<String, String>,
    order: VecDeque<String>,
    capacity: usize,
    skipped: usize,
    read: usize,
}

impl<I, S> RedditPairs<I>
where
    I: Iterator<Item = S>,
    S: AsRef<str>,
{
    pub fn skipped_lines(&self) -> usize {
        self.skipped
    }

    pub fn lines_read(&self) -> usize {
        self.read
    }

    fn remember(&mut self, id: String, body: String) {
        if self.capacity == 0 {
            return;
        }
        if self.seen.len() >= self.capacity {
            if let Some(old) = self.order.pop_front() {
                self.seen.remove(&old);
            }
        }
        if self.seen.insert(id.clone(), body).is_none() {
            self.order.push_back(id);
        }
    }
}

impl<I, S> Iterator for RedditPairs<I>
where
    I: Iterator<Item = S>,
    S: AsRef<str>,
{
    type Item = RedditPair;

    fn next(&mut self) -> Option<RedditPair> {
        if self.limit.is_some_and(|l| self.emitted >= l) {
            return None;
        }
        while let Some(line) = self.lines.next() {
            let line = line.as_ref();
            if line.trim().is_empty() {
                continue;
            }
            self.read += 1;
            let Ok(c) = serde_json::from_str::<RawComment>(line) else {
                self.skipped += 1;
                continue;
            };
            if is_deleted_body(&c.body) {
                continue;
            }
            let id = c.id.strip_prefix("t1_").unwrap_or(&c.id).to_owned();
            let pair = c
                .parent_id
                .strip_prefix("t1_")
                .and_then(|pid| self.seen.get(pid))
                .map(|parent| RedditPair {
                    parent_text: parent.clone(),
                    child_text: c.body.clone(),
                    pair_id: format!("{}_{}", c.parent_id, id),
                });
            self.remember(id, c.body);
            if let Some(p) = pair {
                self.emitted += 1;
                return Some(p);
            }
        }
        None
    }
}

pub fn extract_reddit_pairs<I, S>(dump: I, limit: Option<usize>) -> RedditPairs<I::IntoIter>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    extract_reddit_pairs_with_capacity(dump, limit, DEFAULT_PARENT_CAPACITY)
}

pub fn extract_reddit_pairs_with_capacity<I, S>(
    dump: I,
    limit: Option<usize>,
    capacity: usize,
) -> RedditPairs<I::IntoIter>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    RedditPairs {
        lines: dump.into_iter(),
        limit,
        emitted: 0,
        seen: HashMap::new(),
        order: VecDeque::new(),
        capacity,
        skipped: 0,
        read: 0,
    }
}

/// One row of the newline-delimited example file. Augmented rows carry the
/// teacher distribution in `pseudo` plus their provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub context: String,
    pub utterance: String,
    pub counts: [u32; 3],
    pub origin: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_origin: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aug_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corruption_seed: Option<u64>,
}

impl ExampleRecord {
    pub fn from_example(e: &Example) -> Self {
        Self {
            context: e.context.clone(),
            utterance: e.utterance.clone(),
            counts: e.target.counts,
            origin: e.origin.to_string(),
            pseudo: None,
            source_origin: None,
            aug_index: None,
            corruption_seed: None,
        }
    }

    /// Training view of the row: the pseudo distribution when present,
    /// otherwise the annotator counts.
    pub fn to_example(&self) -> Result<Example> {
        let target = match self.pseudo {
            Some(p) => LabelDistribution::from_probs(p)?,
            None => LabelDistribution::from_counts(self.counts)?,
        };
        Ok(Example::new(
            self.context.clone(),
            self.utterance.clone(),
            target,
            self.origin.parse()?,
        ))
    }

    pub fn is_augmented(&self) -> bool {
        self.pseudo.is_some()
    }
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut w, row)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut offset = 0usize;
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            let row = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                offset: offset + e.column().saturating_sub(1),
                message: e.to_string(),
            })?;
            out.push(row);
        }
        offset += line.len() + 1;
    }
    Ok(out)
}

pub fn write_examples(path: impl AsRef<Path>, examples: &[Example]) -> Result<()> {
    let rows: Vec<ExampleRecord> = examples.iter().map(ExampleRecord::from_example).collect();
    write_jsonl(path, &rows)
}

/// Load examples from a DBDC dialogue directory (every `*.json`, sorted by
/// name), a single DBDC `.json` file, or an example `.jsonl` file.
pub fn load_examples(path: impl AsRef<Path>) -> Result<Vec<Example>> {
    let path = path.as_ref();
    if path.is_dir() {
        let mut files: Vec<_> = std::fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        let mut out = Vec::new();
        for f in files {
            out.extend(build_examples(&parse_dbdc_file(&f)?)?);
        }
        Ok(out)
    } else if path.extension().is_some_and(|x| x == "json") {
        build_examples(&parse_dbdc_file(path)?)
    } else {
        read_jsonl::<ExampleRecord>(path)?
            .iter()
            .map(ExampleRecord::to_example)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn votes(b: usize, sb: usize, nb: usize) -> Vec<Label> {
        let mut v = vec![Label::B; b];
        v.extend(vec![Label::SB; sb]);
        v.extend(vec![Label::NB; nb]);
        v
    }

    fn dbdc_json(turns: &[(&str, &str, &[&str])]) -> String {
        let turns: Vec<serde_json::Value> = turns
            .iter()
            .enumerate()
            .map(|(i, (spk, utt, v))| {
                serde_json::json!({
                    "turn-index": i,
                    "speaker": spk,
                    "utterance": utt,
                    "annotations": v.iter().map(|s| serde_json::json!({"breakdown": s})).collect::<Vec<_>>(),
                })
            })
            .collect();
        serde_json::json!({"dialogue-id": "d1", "turns": turns}).to_string()
    }

    #[test]
    fn aggregate_examples() {
        assert_eq!(aggregate_votes(&votes(0, 0, 15)).unwrap().p, [0.0, 0.0, 1.0]);
        let d = aggregate_votes(&votes(6, 3, 6)).unwrap();
        assert_eq!(d.counts, [6, 3, 6]);
        assert!((d.p[0] - 0.4).abs() < 1e-12 && (d.p[1] - 0.2).abs() < 1e-12);
        let d = aggregate_votes(&votes(5, 5, 5)).unwrap();
        assert!(d.p.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-12));
        assert!(matches!(aggregate_votes(&[]), Err(Error::NoAnnotations)));
        assert_eq!(Error::NoAnnotations.to_string(), "no annotations");
    }

    #[test]
    fn majority_tie_break() {
        let m = |c| majority_label(&LabelDistribution::from_counts(c).unwrap());
        assert_eq!(m([9, 3, 3]), Label::B);
        assert_eq!(m([7, 7, 1]), Label::B);
        assert_eq!(m([5, 5, 5]), Label::B);
        assert_eq!(m([1, 7, 7]), Label::SB);
        assert_eq!(m([1, 2, 12]), Label::NB);
        assert_eq!(majority_label(&LabelDistribution::from_probs([0.2, 0.4, 0.4]).unwrap()), Label::SB);
    }

    #[test]
    fn parse_maps_vote_symbols() {
        let text = dbdc_json(&[("U", "hi", &[]), ("S", "hello", &["O"; 15])]);
        let d = parse_dbdc_str(&text, "t").unwrap();
        assert_eq!(d.turns.len(), 2);
        assert_eq!(d.turns[1].speaker, Speaker::System);
        let ex = build_examples(&d).unwrap();
        assert_eq!(ex.len(), 1);
        assert_eq!(ex[0].target.counts, [0, 0, 15]);
        assert_eq!(ex[0].context, "hi");

        let text = dbdc_json(&[("S", "a", &["X", "T"])]);
        let d = parse_dbdc_str(&text, "t").unwrap();
        assert_eq!(d.turns[0].annotations, vec![Label::B, Label::SB]);
    }

    #[test]
    fn unknown_vote_symbol_names_turn() {
        let text = dbdc_json(&[
            ("U", "a", &[]),
            ("S", "b", &["O"]),
            ("U", "c", &[]),
            ("S", "d", &["O", "Z"]),
        ]);
        let err = parse_dbdc_str(&text, "t").unwrap_err();
        assert_eq!(err.to_string(), "unknown breakdown symbol Z at turn 3");
    }

    #[test]
    fn malformed_json_reports_offset() {
        let err = parse_dbdc_str("{\"dialogue-id\": \"x\",\n \"turns\": [}", "f.json").unwrap_err();
        match err {
            Error::Parse { offset, .. } => assert!(offset > 20 && offset <= 32, "{offset}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn build_examples_context_rules() {
        let text = dbdc_json(&[("S", "welcome", &["O"]), ("U", "hi", &[]), ("S", "ok", &["X"])]);
        let ex = build_examples(&parse_dbdc_str(&text, "t").unwrap()).unwrap();
        assert_eq!(ex.iter().map(|e| e.context.as_str()).collect::<Vec<_>>(), vec!["", "hi"]);
        assert_eq!(ex[1].origin, Origin::new("d1", 2));

        let text = dbdc_json(&[
            ("U", "question", &[]),
            ("S", "first", &[]),
            ("S", "second", &["T"]),
            ("U", "ignored", &["X"]),
        ]);
        let ex = build_examples(&parse_dbdc_str(&text, "t").unwrap()).unwrap();
        assert_eq!(ex.len(), 1);
        assert_eq!(ex[0].context, "question");
        assert_eq!(ex[0].utterance, "second");
    }

    #[test]
    fn reddit_pairs_follow_comment_parents() {
        let lines = [
            r#"{"id":"a","parent_id":"t3_x","body":"hello"}"#,
            r#"{"id":"b","parent_id":"t1_a","body":"world"}"#,
            r#"{"id":"c","parent_id":"t3_a","body":"to submission"}"#,
            r#"{"id":"d","parent_id":"t1_zz","body":"unseen parent"}"#,
            r#"not json"#,
            r#"{"id":"e","parent_id":"t3_x","body":"[deleted]"}"#,
            r#"{"id":"f","parent_id":"t1_e","body":"child of deleted"}"#,
            r#"{"id":"g","parent_id":"t1_b","body":"[removed]"}"#,
        ];
        let mut it = extract_reddit_pairs(lines, None);
        let pairs: Vec<_> = it.by_ref().collect();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].parent_text, "hello");
        assert_eq!(pairs[0].child_text, "world");
        assert_eq!(it.skipped_lines(), 1);
    }

    #[test]
    fn reddit_limit_and_eviction() {
        let lines: Vec<String> = (0..10)
            .map(|i| {
                let parent = if i == 0 { "t3_s".to_owned() } else { format!("t1_c{}", i - 1) };
                format!(r#"{{"id":"c{i}","parent_id":"{parent}","body":"text {i}"}}"#)
            })
            .collect();
        assert_eq!(extract_reddit_pairs(&lines, Some(3)).count(), 3);
        assert_eq!(extract_reddit_pairs(&lines, None).count(), 9);
        assert_eq!(extract_reddit_pairs_with_capacity(&lines, None, 1).count(), 9);
        // replies to the first comment only; capacity 1 forgets it
        let fan: Vec<String> = std::iter::once(r#"{"id":"r","parent_id":"t3_s","body":"root"}"#.to_owned())
            .chain((0..3).map(|i| format!(r#"{{"id":"k{i}","parent_id":"t1_r","body":"reply"}}"#)))
            .collect();
        assert_eq!(extract_reddit_pairs_with_capacity(&fan, None, 1).count(), 1);
        assert_eq!(extract_reddit_pairs_with_capacity(&fan, None, 8).count(), 3);
    }

    #[test]
    fn histogram() {
        let mk = |c| Example::new(String::new(), "x".into(), LabelDistribution::from_counts(c).unwrap(), Origin::new("d", 0));
        assert_eq!(label_histogram(&[mk([0, 0, 3]), mk([1, 0, 2]), mk([0, 1, 5])]).unwrap(), [0.0, 0.0, 1.0]);
        let h = label_histogram(&[mk([3, 0, 0]), mk([0, 3, 0]), mk([0, 0, 3])]).unwrap();
        assert!(h.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-12));
        assert!(label_histogram(&[]).is_err());
    }

    #[test]
    fn example_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ex.jsonl");
        let e = Example::new("a b".into(), "c".into(), LabelDistribution::from_counts([1, 2, 12]).unwrap(), Origin::new("dlg:7", 3));
        write_examples(&path, std::slice::from_ref(&e)).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "{\"context\":\"a b\",\"utterance\":\"c\",\"counts\":[1,2,12],\"origin\":\"dlg:7:3\"}\n");
        assert_eq!(load_examples(&path).unwrap(), vec![e]);
    }

    proptest! {
        #[test]
        fn aggregation_is_scale_consistent(c in prop::array::uniform3(0u32..20), k in 1u32..6) {
            prop_assume!(c.iter().sum::<u32>() > 0);
            let base = LabelDistribution::from_counts(c).unwrap();
            let mut v = Vec::new();
            for (i, &n) in c.iter().enumerate() {
                v.extend(std::iter::repeat_n(Label::ALL[i], (n * k) as usize));
            }
            let scaled = aggregate_votes(&v).unwrap();
            for i in 0..3 { prop_assert!((base.p[i] - scaled.p[i]).abs() < 1e-12); }
            prop_assert_eq!(majority_label(&base), majority_label(&scaled));
            prop_assert!((scaled.p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn reddit_pairs_never_carry_placeholders(bodies in prop::collection::vec(
            prop::sample::select(vec!["[deleted]", "[removed]", "", "ok", "fine text"]), 1..40),
            parents in prop::collection::vec(0usize..40, 40))
        {
            let lines: Vec<String> = bodies.iter().enumerate().map(|(i, b)| {
                let p = parents[i] % (i + 1);
                let pid = if p == i { "t3_root".to_owned() } else { format!("t1_c{p}") };
                serde_json::json!({"id": format!("c{i}"), "parent_id": pid, "body": b}).to_string()
            }).collect();
            let pairs: Vec<_> = extract_reddit_pairs(&lines, None).collect();
            prop_assert!(pairs.len() <= lines.len());
            for p in pairs {
                prop_assert!(!is_deleted_body(&p.parent_text) && !is_deleted_body(&p.child_text));
            }
        }
    }
}
