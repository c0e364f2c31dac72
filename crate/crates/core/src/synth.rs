//! Bundled synthetic corpus: templated dialogues whose breakdown label is a
//! deterministic function of topic agreement, and a matching comment dump.
//!
//! A system reply drawn from the user's topic is no breakdown, a reply
//! from another topic is a breakdown, and a reply mixing the user's topic
//! with another is some breakdown.

use rand::seq::IndexedRandom;
use rand::Rng as _;

use crate::data::{Dialogue, Example, Label, Speaker, Turn};
use crate::rng;

pub const TOPICS: [[&str; 6]; 6] = [
    ["pizza", "pasta", "sushi", "bread", "cheese", "soup"],
    ["soccer", "tennis", "hockey", "golf", "rugby", "boxing"],
    ["guitar", "piano", "jazz", "violin", "drums", "opera"],
    ["paris", "beach", "airport", "hotel", "train", "museum"],
    ["rain", "snow", "thunder", "sunshine", "fog", "wind"],
    ["puppy", "kitten", "parrot", "hamster", "goldfish", "rabbit"],
];

const USER_TEMPLATES: [&str; 5] = [
    "i have been thinking about {a} and {b} lately",
    "do you like {a} or {b}",
    "tell me something about {a} please",
    "my friend really loves {a} and {b}",
    "what do you think of {a}",
];

const SYSTEM_TEMPLATES: [&str; 5] = [
    "{a} is great , especially with {b}",
    "i think {a} is better than {b}",
    "have you ever tried {a} before",
    "people say {a} and {b} go well together",
    "i read a story about {a} yesterday",
];

/// Label shares used by the generator, in (B, SB, NB) order.
pub const LABEL_SHARES: [f64; 3] = [0.40, 0.05, 0.55];

pub const VOTES_PER_TURN: usize = 15;

fn fill(template: &str, a: &str, b: &str) -> String {
    template.replace("{a}", a).replace("{b}", b)
}

fn two_words(topic: usize, r: &mut rng::Rng) -> (&'static str, &'static str) {
    let words: Vec<&&str> = TOPICS[topic].choose_multiple(r, 2).collect();
    (words[0], words[1])
}

fn other_topic(topic: usize, r: &mut rng::Rng) -> usize {
    (topic + r.random_range(1..TOPICS.len())) % TOPICS.len()
}

fn draw_label(r: &mut rng::Rng) -> Label {
    let u: f64 = r.random();
    if u < LABEL_SHARES[0] {
        Label::B
    } else if u < LABEL_SHARES[0] + LABEL_SHARES[1] {
        Label::SB
    } else {
        Label::NB
    }
}

/// Fifteen votes with a strict majority (8 to 13) for `label`; the rest
/// fall uniformly on the other two labels.
fn votes_for(label: Label, r: &mut rng::Rng) -> Vec<Label> {
    let majority = r.random_range(8..=13);
    let others: Vec<Label> = Label::ALL.into_iter().filter(|l| *l != label).collect();
    let mut votes = vec![label; majority];
    for _ in majority..VOTES_PER_TURN {
        votes.push(*others.choose(r).expect("two other labels"));
    }
    votes
}

/// The reply for `label` given the user's topic.
fn system_reply(label: Label, topic: usize, r: &mut rng::Rng) -> String {
    let t = SYSTEM_TEMPLATES.choose(r).expect("templates");
    match label {
        Label::NB => {
            let (a, b) = two_words(topic, r);
            fill(t, a, b)
        }
        Label::B => {
            let (a, b) = two_words(other_topic(topic, r), r);
            fill(t, a, b)
        }
        Label::SB => {
            let a = TOPICS[topic].choose(r).expect("words");
            let b = TOPICS[other_topic(topic, r)].choose(r).expect("words");
            // the mixed reply needs both words, whatever the template
            format!("{a} and {b} are both fine i guess")
        }
    }
}

fn user_turn(topic: usize, r: &mut rng::Rng) -> String {
    let (a, b) = two_words(topic, r);
    fill(USER_TEMPLATES.choose(r).expect("templates"), a, b)
}

/// `n` two-turn dialogues: a user turn and one annotated system turn.
pub fn dialogues(n: usize, seed: u64) -> Vec<Dialogue> {
    (0..n)
        .map(|i| {
            let mut r = rng::substream(seed, &[rng::label("synth-dialogue"), i as u64]);
            let topic = r.random_range(0..TOPICS.len());
            let label = draw_label(&mut r);
            let user = user_turn(topic, &mut r);
            let system = system_reply(label, topic, &mut r);
            Dialogue {
                dialogue_id: format!("synth-{i:05}"),
                turns: vec![
                    Turn {
                        speaker: Speaker::User,
                        utterance: user,
                        annotations: Vec::new(),
                    },
                    Turn {
                        speaker: Speaker::System,
                        utterance: system,
                        annotations: votes_for(label, &mut r),
                    },
                ],
            }
        })
        .collect()
}

/// Examples from [`dialogues`], split into (train, valid) with the first
/// `n - n_valid` dialogues in train.
pub fn examples(n: usize, n_valid: usize, seed: u64) -> (Vec<Example>, Vec<Example>) {
    let mut all: Vec<Example> = dialogues(n, seed)
        .iter()
        .flat_map(|d| crate::data::build_examples(d).expect("synthetic turns carry votes"))
        .collect();
    let valid = all.split_off(n.saturating_sub(n_valid).min(all.len()));
    (all, valid)
}

/// A pushshift-style comment dump with `n_pairs` usable parent/reply
/// pairs, plus deleted replies and one malformed line per hundred threads.
pub fn reddit_dump(n_pairs: usize, seed: u64) -> Vec<String> {
    let mut lines = Vec::with_capacity(n_pairs * 2 + n_pairs / 20);
    for i in 0..n_pairs {
        let mut r = rng::substream(seed, &[rng::label("synth-reddit"), i as u64]);
        let topic = r.random_range(0..TOPICS.len());
        let parent = user_turn(topic, &mut r);
        let child = system_reply(Label::NB, topic, &mut r);
        let pid = format!("p{i}");
        lines.push(comment(&pid, &format!("t3_post{}", i / 10), &parent));
        lines.push(comment(&format!("c{i}"), &format!("t1_{pid}"), &child));
        if i % 25 == 0 {
            lines.push(comment(&format!("d{i}"), &format!("t1_{pid}"), "[deleted]"));
        }
        if i % 100 == 99 {
            lines.push("{\"id\": \"broken".to_owned());
        }
    }
    lines
}

fn comment(id: &str, parent_id: &str, body: &str) -> String {
    serde_json::json!({ "id": id, "parent_id": parent_id, "body": body, "subreddit": "synthetic" }).to_string()
}

/// Topic index of a word, if it is a topic word.
pub fn topic_of(word: &str) -> Option<usize> {
    TOPICS.iter().position(|t| t.contains(&word))
}

/// The label the generator's rule assigns to a (context, utterance) pair.
pub fn rule_label(context: &str, utterance: &str) -> Option<Label> {
    let ctx: Vec<usize> = context.split_whitespace().filter_map(topic_of).collect();
    let utt: Vec<usize> = utterance.split_whitespace().filter_map(topic_of).collect();
    let topic = *ctx.first()?;
    let same = utt.iter().filter(|&&t| t == topic).count();
    Some(match (same, utt.len()) {
        (0, _) => Label::B,
        (s, n) if s == n => Label::NB,
        _ => Label::SB,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{extract_reddit_pairs, label_histogram};

    #[test]
    fn labels_follow_topic_rule() {
        let (train, valid) = examples(300, 60, 4);
        assert_eq!((train.len(), valid.len()), (240, 60));
        for e in train.iter().chain(&valid) {
            assert_eq!(rule_label(&e.context, &e.utterance), Some(e.majority), "{e:?}");
            assert_eq!(e.target.total_votes(), 15);
        }
    }

    #[test]
    fn label_shares_are_close_to_design() {
        let (train, _) = examples(2000, 0, 1);
        let h = label_histogram(&train).unwrap();
        for (got, want) in h.iter().zip(LABEL_SHARES) {
            assert!((got - want).abs() < 0.04, "{h:?}");
        }
    }

    #[test]
    fn generation_is_seeded() {
        assert_eq!(dialogues(20, 3), dialogues(20, 3));
        assert_ne!(dialogues(20, 3), dialogues(20, 4));
    }

    #[test]
    fn dump_yields_requested_pairs() {
        let dump = reddit_dump(300, 0);
        let mut it = extract_reddit_pairs(dump.iter(), None);
        let pairs: Vec<_> = it.by_ref().collect();
        assert_eq!(pairs.len(), 300);
        assert_eq!(it.skipped_lines(), 3);
        for p in &pairs {
            assert_eq!(rule_label(&p.parent_text, &p.child_text), Some(Label::NB));
        }
    }
}
