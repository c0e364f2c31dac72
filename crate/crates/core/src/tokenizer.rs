//! WordPiece vocabulary training, greedy longest-match encoding and
//! sentence-pair rendering.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const MASK_ID: u32 = 4;

/// Special tokens in id order.
pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];
pub const NUM_SPECIAL: usize = SPECIAL_TOKENS.len();

pub const CONTINUATION_PREFIX: &str = "##";

/// Words longer than this (in chars) are mapped straight to `[UNK]`.
const MAX_WORD_CHARS: usize = 100;

pub const DEFAULT_VOCAB_SIZE: usize = 8000;

/// Lowercase, NFC-normalize and collapse runs of whitespace to one space.
pub fn normalize(text: &str) -> String {
    let lowered: String = text.to_lowercase().nfc().collect();
    let mut out = String::with_capacity(lowered.len());
    for word in lowered.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

pub fn is_special(id: u32) -> bool {
    (id as usize) < NUM_SPECIAL
}

/// An immutable WordPiece vocabulary. Ids 0..5 are the special tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    pieces: Vec<String>,
    piece_to_id: HashMap<String, u32>,
}

impl Vocab {
    /// Build from an ordered piece list. The first five entries must be the
    /// special tokens in canonical order.
    pub fn from_pieces(pieces: Vec<String>) -> Result<Self> {
        if pieces.len() < NUM_SPECIAL {
            return Err(Error::InvalidVocab(format!(
                "{} entries, fewer than the {NUM_SPECIAL} special tokens",
                pieces.len()
            )));
        }
        for (i, special) in SPECIAL_TOKENS.iter().enumerate() {
            if pieces[i] != *special {
                return Err(Error::InvalidVocab(format!(
                    "line {} must be {special}, found {:?}",
                    i + 1,
                    pieces[i]
                )));
            }
        }
        let mut piece_to_id = HashMap::with_capacity(pieces.len());
        for (i, piece) in pieces.iter().enumerate() {
            if i >= NUM_SPECIAL {
                if SPECIAL_TOKENS.contains(&piece.as_str()) {
                    return Err(Error::InvalidVocab(format!(
                        "special token {piece} repeated at line {}",
                        i + 1
                    )));
                }
                if piece.is_empty()
                    || piece == CONTINUATION_PREFIX
                    || piece.chars().any(char::is_whitespace)
                {
                    return Err(Error::InvalidVocab(format!(
                        "malformed piece {piece:?} at line {}",
                        i + 1
                    )));
                }
            }
            if piece_to_id.insert(piece.clone(), i as u32).is_some() {
                return Err(Error::InvalidVocab(format!(
                    "duplicate piece {piece:?} at line {}",
                    i + 1
                )));
            }
        }
        Ok(Self {
            pieces,
            piece_to_id,
        })
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    pub fn id(&self, piece: &str) -> Option<u32> {
        self.piece_to_id.get(piece).copied()
    }

    pub fn piece(&self, id: u32) -> Option<&str> {
        self.pieces.get(id as usize).map(String::as_str)
    }

    /// The vocab file body: one piece per line, line number = id.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for p in &self.pieces {
            out.push_str(p);
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_pieces(text.lines().map(str::to_owned).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Greedy longest-match-first WordPiece segmentation of normalized text.
    /// A word that cannot be fully covered becomes a single `[UNK]`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let normalized = normalize(text);
        let mut ids = Vec::new();
        let mut buf = String::new();
        for word in normalized.split(' ').filter(|w| !w.is_empty()) {
            self.encode_word(word, &mut buf, &mut ids);
        }
        ids
    }

    fn encode_word(&self, word: &str, buf: &mut String, out: &mut Vec<u32>) {
        let bounds: Vec<usize> = word
            .char_indices()
            .map(|(i, _)| i)
            .chain(std::iter::once(word.len()))
            .collect();
        let n_chars = bounds.len() - 1;
        if n_chars > MAX_WORD_CHARS {
            out.push(UNK_ID);
            return;
        }
        let mark = out.len();
        let mut start = 0;
        while start < n_chars {
            let mut end = n_chars;
            let mut found = None;
            while end > start {
                let sub = &word[bounds[start]..bounds[end]];
                buf.clear();
                if start > 0 {
                    buf.push_str(CONTINUATION_PREFIX);
                } else if sub.starts_with(CONTINUATION_PREFIX) {
                    // a word-initial substring must not alias a continuation piece
                    end -= 1;
                    continue;
                }
                buf.push_str(sub);
                if let Some(id) = self.id(buf) {
                    if !is_special(id) {
                        found = Some(id);
                        break;
                    }
                }
                end -= 1;
            }
            match found {
                Some(id) => {
                    out.push(id);
                    start = end;
                }
                None => {
                    out.truncate(mark);
                    out.push(UNK_ID);
                    return;
                }
            }
        }
    }

    /// Join pieces back into text. Special tokens are dropped, `##` pieces
    /// attach to the preceding piece.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let piece = self.piece(id).ok_or(Error::UnknownId(id))?;
            if is_special(id) {
                continue;
            }
            match piece.strip_prefix(CONTINUATION_PREFIX) {
                Some(rest) => out.push_str(rest),
                None => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(piece);
                }
            }
        }
        Ok(out)
    }

    /// Render `[CLS] context [SEP] utterance [SEP] [PAD]...` padded to
    /// `max_len`.
    ///
    /// Over-length input is cut to `max_len - 3` content tokens: the context
    /// loses tokens from its front first; only once the context is empty is
    /// the utterance cut from its tail.
    ///
    /// # Panics
    /// If `max_len < 8`.
    pub fn encode_pair(&self, context: &str, utterance: &str, max_len: usize) -> EncodedPair {
        assert!(max_len >= 8, "max_len must be at least 8, got {max_len}");
        let ctx = self.encode(context);
        let utt = self.encode(utterance);
        EncodedPair::from_segments(&ctx, &utt, max_len)
    }
}

/// A sentence pair rendered as model input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedPair {
    pub token_ids: Vec<u32>,
    pub segment_ids: Vec<u8>,
    pub attention_mask: Vec<u8>,
    /// Count of real (non-PAD) tokens.
    pub length: usize,
}

impl EncodedPair {
    /// Lay out two already-encoded segments, applying the truncation rule of
    /// [`Vocab::encode_pair`].
    pub fn from_segments(context: &[u32], utterance: &[u32], max_len: usize) -> Self {
        let budget = max_len.saturating_sub(3);
        let (ctx, utt) = if context.len() + utterance.len() <= budget {
            (context, utterance)
        } else if utterance.len() <= budget {
            let keep = budget - utterance.len();
            (&context[context.len() - keep..], utterance)
        } else {
            (&context[..0], &utterance[..budget])
        };

        let length = ctx.len() + utt.len() + 3;
        let mut token_ids = Vec::with_capacity(max_len);
        let mut segment_ids = Vec::with_capacity(max_len);
        token_ids.push(CLS_ID);
        token_ids.extend_from_slice(ctx);
        token_ids.push(SEP_ID);
        segment_ids.resize(token_ids.len(), 0);
        token_ids.extend_from_slice(utt);
        token_ids.push(SEP_ID);
        segment_ids.resize(token_ids.len(), 1);
        let mut attention_mask = vec![1u8; length];

        token_ids.resize(max_len, PAD_ID);
        segment_ids.resize(max_len, 0);
        attention_mask.resize(max_len, 0);
        // PAD positions continue the last segment so segment ids stay sorted.
        for s in segment_ids.iter_mut().skip(length) {
            *s = 1;
        }
        Self {
            token_ids,
            segment_ids,
            attention_mask,
            length,
        }
    }

    pub fn padded_len(&self) -> usize {
        self.token_ids.len()
    }

    /// Index of the first `[SEP]`.
    pub fn first_sep(&self) -> Option<usize> {
        self.token_ids[..self.length].iter().position(|&t| t == SEP_ID)
    }

    /// Token ids of the context segment (between `[CLS]` and the first `[SEP]`).
    pub fn context_ids(&self) -> &[u32] {
        let sep = self.first_sep().unwrap_or(0);
        &self.token_ids[1.min(sep)..sep]
    }

    /// Token ids of the utterance segment.
    pub fn utterance_ids(&self) -> &[u32] {
        match self.first_sep() {
            Some(sep) if self.length >= sep + 2 => &self.token_ids[sep + 1..self.length - 1],
            _ => &[],
        }
    }

    /// Extend with PAD up to `len` positions.
    pub fn with_padding(&self, len: usize) -> Self {
        let mut out = self.clone();
        if len > out.token_ids.len() {
            out.token_ids.resize(len, PAD_ID);
            out.segment_ids.resize(len, 1);
            out.attention_mask.resize(len, 0);
        }
        out
    }

    /// Check every structural invariant.
    pub fn validate(&self, max_len: usize) -> Result<()> {
        let n = self.token_ids.len();
        let fail = |m: String| Err(Error::Input(m));
        if self.segment_ids.len() != n || self.attention_mask.len() != n {
            return fail(format!(
                "ragged encoding: {} ids, {} segments, {} mask",
                n,
                self.segment_ids.len(),
                self.attention_mask.len()
            ));
        }
        if n > max_len {
            return fail(format!("sequence length {n} exceeds max_len {max_len}"));
        }
        if self.length < 3 || self.length > n {
            return fail(format!("bad real length {} for {n} positions", self.length));
        }
        if self.token_ids[0] != CLS_ID {
            return fail("sequence must start with [CLS]".into());
        }
        let real = &self.token_ids[..self.length];
        if real.iter().filter(|&&t| t == SEP_ID).count() != 2 || real[self.length - 1] != SEP_ID {
            return fail("expected exactly two [SEP] tokens, the last closing the sequence".into());
        }
        if real.contains(&PAD_ID) {
            return fail("[PAD] inside the real tokens".into());
        }
        if self.token_ids[self.length..].iter().any(|&t| t != PAD_ID) {
            return fail("non-PAD token after the real tokens".into());
        }
        if self.attention_mask[..self.length].iter().any(|&m| m != 1)
            || self.attention_mask[self.length..].iter().any(|&m| m != 0)
        {
            return fail("attention mask disagrees with length".into());
        }
        if self.segment_ids.iter().any(|&s| s > 1)
            || self.segment_ids.windows(2).any(|w| w[0] > w[1])
        {
            return fail("segment ids must be non-decreasing 0/1".into());
        }
        let sep = self.first_sep().expect("checked above");
        if self.segment_ids[sep] != 0 || self.segment_ids[sep + 1] != 1 {
            return fail("segment boundary must follow the first [SEP]".into());
        }
        Ok(())
    }
}

/// Train a WordPiece vocabulary.
///
/// Words are split into characters, non-initial ones carrying `##`. The most
/// frequent adjacent pair is merged repeatedly (ties go to the pair whose
/// symbols were created first) until the vocabulary is full or no pair
/// reaches `min_frequency`. Output order: special tokens, the sorted
/// alphabet, then merged pieces in merge order.
pub fn train_wordpiece<I, S>(corpus: I, vocab_size: usize, min_frequency: u64) -> Result<Vocab>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut word_counts: BTreeMap<String, u64> = BTreeMap::new();
    for line in corpus {
        for word in normalize(line.as_ref()).split(' ').filter(|w| !w.is_empty()) {
            *word_counts.entry(word.to_owned()).or_default() += 1;
        }
    }
    if word_counts.is_empty() {
        return Err(Error::EmptyCorpus);
    }

    let mut alphabet = BTreeSet::new();
    for word in word_counts.keys() {
        for (i, c) in word.chars().enumerate() {
            alphabet.insert(if i == 0 {
                c.to_string()
            } else {
                format!("{CONTINUATION_PREFIX}{c}")
            });
        }
    }
    let needed = NUM_SPECIAL + alphabet.len();
    if vocab_size <= needed {
        return Err(Error::VocabTooSmall {
            needed,
            requested: vocab_size,
        });
    }

    let mut symbols: Vec<String> = alphabet.into_iter().collect();
    let mut symbol_ids: HashMap<String, u32> = symbols
        .iter()
        .enumerate()
        .map(|(i, s)| (s.clone(), i as u32))
        .collect();

    let mut words: Vec<(Vec<u32>, i64)> = word_counts
        .iter()
        .map(|(w, &c)| {
            let syms = w
                .chars()
                .enumerate()
                .map(|(i, ch)| {
                    let key = if i == 0 {
                        ch.to_string()
                    } else {
                        format!("{CONTINUATION_PREFIX}{ch}")
                    };
                    symbol_ids[&key]
                })
                .collect();
            (syms, c as i64)
        })
        .collect();

    let mut pair_counts: HashMap<(u32, u32), i64> = HashMap::new();
    let mut pair_words: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
    for (wi, (syms, count)) in words.iter().enumerate() {
        for p in syms.windows(2) {
            let key = (p[0], p[1]);
            *pair_counts.entry(key).or_default() += count;
            pair_words.entry(key).or_default().insert(wi);
        }
    }
    let mut heap: BinaryHeap<(i64, Reverse<(u32, u32)>)> = pair_counts
        .iter()
        .map(|(&pair, &count)| (count, Reverse(pair)))
        .collect();
    let mut banned: HashSet<(u32, u32)> = HashSet::new();

    while NUM_SPECIAL + symbols.len() < vocab_size {
        let Some((count, Reverse(pair))) = heap.pop() else {
            break;
        };
        let current = pair_counts.get(&pair).copied().unwrap_or(0);
        if current != count {
            if current > 0 {
                heap.push((current, Reverse(pair)));
            }
            continue;
        }
        if count < min_frequency.max(1) as i64 {
            break;
        }
        if banned.contains(&pair) {
            continue;
        }
        let left = &symbols[pair.0 as usize];
        let right = &symbols[pair.1 as usize];
        let merged = format!(
            "{left}{}",
            right.strip_prefix(CONTINUATION_PREFIX).unwrap_or(right)
        );
        if !left.starts_with(CONTINUATION_PREFIX) && merged.starts_with(CONTINUATION_PREFIX) {
            // "#" + "##" would spell a continuation marker as a word start
            banned.insert(pair);
            continue;
        }
        let new_id = match symbol_ids.get(&merged) {
            Some(&id) => id,
            None => {
                let id = symbols.len() as u32;
                symbols.push(merged.clone());
                symbol_ids.insert(merged, id);
                id
            }
        };

        let mut affected: Vec<usize> = pair_words
            .remove(&pair)
            .map(|s| s.into_iter().collect())
            .unwrap_or_default();
        affected.sort_unstable();
        let mut touched: HashSet<(u32, u32)> = HashSet::new();
        for wi in affected {
            let (syms, wcount) = &mut words[wi];
            if !syms.windows(2).any(|p| (p[0], p[1]) == pair) {
                continue;
            }
            for p in syms.windows(2) {
                let key = (p[0], p[1]);
                *pair_counts.entry(key).or_default() -= *wcount;
                touched.insert(key);
            }
            let mut rewritten = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && (syms[i], syms[i + 1]) == pair {
                    rewritten.push(new_id);
                    i += 2;
                } else {
                    rewritten.push(syms[i]);
                    i += 1;
                }
            }
            *syms = rewritten;
            for p in syms.windows(2) {
                let key = (p[0], p[1]);
                *pair_counts.entry(key).or_default() += *wcount;
                pair_words.entry(key).or_default().insert(wi);
                touched.insert(key);
            }
        }
        pair_counts.remove(&pair);
        let mut touched: Vec<_> = touched.into_iter().collect();
        touched.sort_unstable();
        for key in touched {
            if let Some(&c) = pair_counts.get(&key) {
                if c > 0 {
                    heap.push((c, Reverse(key)));
                }
            }
        }
    }

    let mut pieces: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    pieces.extend(symbols);
    Vocab::from_pieces(pieces)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab(extra: &[&str]) -> Vocab {
        let mut pieces: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        pieces.extend(extra.iter().map(|s| s.to_string()));
        Vocab::from_pieces(pieces).unwrap()
    }

    /// Hand-run of the merge table for aaab/aaac: (a,##a) and (##a,##a)
    /// both occur 100 times, so the first merges produce "aa" or "##aa" and
    /// then "aaa".
    #[test]
    fn train_merges_high_frequency_pair() {
        let corpus: Vec<&str> = std::iter::repeat_n(["aaab", "aaac"], 50).flatten().collect();
        let v = train_wordpiece(&corpus, 20, 1).unwrap();
        assert!(v.len() <= 20);
        assert!(v.id("aa").is_some() || v.id("aaa").is_some());
        for c in ["a", "##a", "##b", "##c"] {
            assert!(v.id(c).is_some(), "{c} missing");
        }
        assert_eq!(v.encode("aaab").len(), 1);
    }

    #[test]
    fn single_character_corpus() {
        let v = train_wordpiece(["x"], 10, 1).unwrap();
        let mut expected: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        expected.push("x".into());
        assert_eq!(v.pieces(), expected.as_slice());
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(matches!(train_wordpiece([""], 10, 1), Err(Error::EmptyCorpus)));
        assert!(matches!(
            train_wordpiece(Vec::<String>::new(), 10, 1),
            Err(Error::EmptyCorpus)
        ));
    }

    #[test]
    fn tiny_vocab_size_rejected() {
        let err = train_wordpiece(["abc"], 7, 1).unwrap_err();
        assert!(matches!(err, Error::VocabTooSmall { needed: 8, .. }));
        assert!(err.to_string().contains("vocab size too small"));
    }

    #[test]
    fn min_frequency_stops_merging() {
        let v = train_wordpiece(["ab", "cd"], 100, 2).unwrap();
        assert_eq!(v.len(), NUM_SPECIAL + 4);
    }

    #[test]
    fn trained_pieces_respect_prefix_rule() {
        let v = train_wordpiece(["##x #a ###", "the cat sat on the mat"], 60, 1).unwrap();
        for p in &v.pieces()[NUM_SPECIAL..] {
            if let Some(rest) = p.strip_prefix(CONTINUATION_PREFIX) {
                assert!(!rest.is_empty());
            }
        }
        assert_eq!(v.decode(&v.encode("the cat sat")).unwrap(), "the cat sat");
    }

    #[test]
    fn encode_greedy_longest_match() {
        let v = vocab(&["u", "un", "##a", "##able", "##ble"]);
        assert_eq!(v.encode("unable"), vec![v.id("un").unwrap(), v.id("##able").unwrap()]);
        assert_eq!(v.encode(""), Vec::<u32>::new());
        assert_eq!(v.encode("☃"), vec![UNK_ID]);
        assert_eq!(v.encode("unx unable"), vec![UNK_ID, 6, 8]);
    }

    #[test]
    fn encode_normalizes() {
        let v = vocab(&["hi", "there"]);
        assert_eq!(v.encode("  HI \t\n There "), v.encode("hi there"));
    }

    #[test]
    fn decode_drops_specials_and_checks_range() {
        let v = vocab(&["un", "##able"]);
        assert_eq!(v.decode(&[]).unwrap(), "");
        assert_eq!(v.decode(&[PAD_ID, SEP_ID, PAD_ID]).unwrap(), "");
        assert_eq!(v.decode(&[5, 6, 5]).unwrap(), "unable un");
        let err = v.decode(&[99]).unwrap_err();
        assert!(err.to_string().contains("unknown id"));
    }

    #[test]
    fn pair_with_empty_context() {
        let v = vocab(&["hi"]);
        let p = v.encode_pair("", "hi", 8);
        let hi = v.id("hi").unwrap();
        assert_eq!(p.token_ids, vec![CLS_ID, SEP_ID, hi, SEP_ID, 0, 0, 0, 0]);
        assert_eq!(&p.segment_ids[..4], &[0, 0, 1, 1]);
        assert_eq!(p.length, 4);
        p.validate(8).unwrap();
    }

    #[test]
    fn pair_length_counts_real_tokens() {
        let v = vocab(&["a", "b", "c"]);
        let p = v.encode_pair("a b c", "c b a", 16);
        assert_eq!(p.length, 9);
        assert_eq!(p.attention_mask.iter().filter(|&&m| m == 1).count(), 9);
        assert_eq!(p.padded_len(), 16);
    }

    #[test]
    fn long_context_trimmed_from_front() {
        let words: Vec<String> = (0..200).map(|i| format!("w{i}")).collect();
        let v = vocab(&words.iter().map(String::as_str).collect::<Vec<_>>());
        let ctx = words.join(" ");
        let utt = words[..10].join(" ");
        let p = v.encode_pair(&ctx, &utt, 64);
        p.validate(64).unwrap();
        // 64 - 3 specials - 10 utterance tokens = 51 context tokens kept
        assert_eq!(p.context_ids().len(), 51);
        assert_eq!(v.decode(p.context_ids()).unwrap(), words[149..].join(" "));
        assert_eq!(p.utterance_ids().len(), 10);
        assert_eq!(p.length, 64);
    }

    #[test]
    fn long_utterance_trimmed_from_tail() {
        let words: Vec<String> = (0..30).map(|i| format!("w{i}")).collect();
        let v = vocab(&words.iter().map(String::as_str).collect::<Vec<_>>());
        let p = v.encode_pair("w1 w2", &words.join(" "), 16);
        p.validate(16).unwrap();
        assert!(p.context_ids().is_empty());
        assert_eq!(v.decode(p.utterance_ids()).unwrap(), words[..13].join(" "));
    }

    #[test]
    fn vocab_file_round_trip_and_validation() {
        let v = vocab(&["a", "##b"]);
        assert_eq!(Vocab::parse(&v.to_file_string()).unwrap(), v);
        assert!(Vocab::parse("[UNK]\n[PAD]\n[CLS]\n[SEP]\n[MASK]\n").is_err());
        assert!(Vocab::parse("[PAD]\n[UNK]\n[CLS]\n[SEP]\n[MASK]\na\na\n").is_err());
        assert!(Vocab::parse("[PAD]\n[UNK]\n[CLS]\n[SEP]\n[MASK]\n[CLS]\n").is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = ["the quick brown fox", "jumps over the lazy dog", "the end"];
        let a = train_wordpiece(corpus, 50, 1).unwrap();
        let b = train_wordpiece(corpus, 50, 1).unwrap();
        assert_eq!(a.to_file_string(), b.to_file_string());
    }

    fn piece_vocab() -> Vocab {
        vocab(&["ab", "c", "de", "##f", "##gh", "##i", "x"])
    }

    proptest! {
        #[test]
        fn round_trip_in_vocab_text(words in prop::collection::vec(
            (prop::sample::select(vec!["ab", "c", "de", "x"]),
             prop::collection::vec(prop::sample::select(vec!["##f", "##gh", "##i"]), 0..3)),
            0..12))
        {
            let v = piece_vocab();
            let text = words.iter().map(|(head, tail)| {
                let mut w = head.to_string();
                for t in tail { w.push_str(&t[2..]); }
                w
            }).collect::<Vec<_>>().join(" ");
            let ids = v.encode(&text);
            prop_assert!(ids.iter().all(|&i| !is_special(i)));
            prop_assert_eq!(v.decode(&ids).unwrap(), text);
        }

        #[test]
        fn encode_pair_invariants(ctx in "[a-z☃ ]{0,300}", utt in "[a-z ]{0,300}", max_len in 8usize..=256) {
            let v = piece_vocab();
            let p = v.encode_pair(&ctx, &utt, max_len);
            prop_assert!(p.validate(max_len).is_ok(), "{:?}", p.validate(max_len));
            prop_assert_eq!(p.padded_len(), max_len);
        }

        #[test]
        fn decode_never_emits_special_strings(ids in prop::collection::vec(0u32..12, 0..40)) {
            let v = piece_vocab();
            let text = v.decode(&ids).unwrap();
            for s in SPECIAL_TOKENS { prop_assert!(!text.contains(s)); }
        }
    }
}
