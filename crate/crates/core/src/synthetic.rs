//! Seeded generators for desk-scale classification tasks that a small
//! model can learn from a handful of examples.
//!
//! Each generator plants a simple lexical rule (a trigger word, a negation
//! token, or a word-sense context set) so that ground truth is recoverable
//! by construction and training signal exists at 32 examples.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::task::{TaskExample, TaskId};

#[derive(Debug, Error)]
pub enum SyntheticError {
    #[error("unknown synthetic kind {0:?}")]
    UnknownKind(String),
    #[error("n_train must be >= 1")]
    EmptyTrain,
    #[error("noise {0} out of range [0, 0.5)")]
    BadNoise(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    /// Premise contains or omits a trigger word deciding entailment.
    KeywordEntailment,
    /// A "not" token in the hypothesis flips entailment.
    NegationFlip,
    /// Two sentences share a pivot word used in the same or different sense.
    PairedWordSense,
}

impl SyntheticKind {
    pub fn parse(s: &str) -> Result<Self, SyntheticError> {
        match s {
            "keyword-entailment" => Ok(Self::KeywordEntailment),
            "negation-flip" => Ok(Self::NegationFlip),
            "paired-word-sense" => Ok(Self::PairedWordSense),
            other => Err(SyntheticError::UnknownKind(other.to_string())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::KeywordEntailment => "keyword-entailment",
            Self::NegationFlip => "negation-flip",
            Self::PairedWordSense => "paired-word-sense",
        }
    }

    pub fn task(self) -> TaskId {
        match self {
            Self::KeywordEntailment | Self::NegationFlip => TaskId::Rte,
            Self::PairedWordSense => TaskId::Wic,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub vocab_seed: u64,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub noise: f64,
}

impl SyntheticSpec {
    pub fn new(kind: SyntheticKind) -> Self {
        Self { kind, vocab_seed: 42, n_train: 32, n_dev: 64, n_test: 128, noise: 0.0 }
    }

    pub fn validate(&self) -> Result<(), SyntheticError> {
        if self.n_train == 0 {
            return Err(SyntheticError::EmptyTrain);
        }
        if !(0.0..0.5).contains(&self.noise) {
            return Err(SyntheticError::BadNoise(self.noise));
        }
        Ok(())
    }
}

const INVENTORY: [&str; 40] = [
    "amber", "basil", "cedar", "delta", "ember", "fjord", "garnet", "hazel", "iris", "jade",
    "karst", "lotus", "maple", "nectar", "onyx", "pearl", "quartz", "reef", "sable", "topaz",
    "umber", "velvet", "willow", "xenon", "yarrow", "zephyr", "arbor", "brook", "cliff", "dune",
    "elm", "fern", "glen", "heath", "isle", "knoll", "ledge", "mesa", "nook", "oak",
];

/// The planted rule, kept alongside the data so tests can score examples
/// independently of any model.
#[derive(Debug, Clone)]
pub enum OracleRule {
    Trigger { word: String },
    Negation { word: String },
    Sense { set_a: Vec<String> },
}

/// Generated splits plus the schema and rule they were built from.
#[derive(Debug, Clone)]
pub struct Generated {
    pub task: TaskId,
    pub train: Vec<TaskExample>,
    pub dev: Vec<TaskExample>,
    pub test: Vec<TaskExample>,
    pub rule: OracleRule,
}

impl Generated {
    /// Classifies an example by the planted rule, ignoring its label field.
    pub fn oracle_label(&self, example: &TaskExample) -> String {
        match &self.rule {
            OracleRule::Trigger { word } => {
                let premise = example.field("premise").unwrap_or("");
                if premise.split_whitespace().any(|w| w == word) {
                    "entailment".into()
                } else {
                    "not_entailment".into()
                }
            }
            OracleRule::Negation { word } => {
                let hypothesis = example.field("hypothesis").unwrap_or("");
                if hypothesis.split_whitespace().any(|w| w == word) {
                    "not_entailment".into()
                } else {
                    "entailment".into()
                }
            }
            OracleRule::Sense { set_a } => {
                let in_a = |s: &str| {
                    s.split_whitespace().skip(1).all(|w| set_a.iter().any(|a| a == w))
                };
                let s1 = in_a(example.field("sentence1").unwrap_or(""));
                let s2 = in_a(example.field("sentence2").unwrap_or(""));
                if s1 == s2 {
                    "true".into()
                } else {
                    "false".into()
                }
            }
        }
    }
}

/// Generates balanced train/dev/test splits. Deterministic given the spec
/// and the caller's rng state.
pub fn generate<R: Rng>(spec: &SyntheticSpec, rng: &mut R) -> Result<Generated, SyntheticError> {
    spec.validate()?;
    let mut words: Vec<&str> = INVENTORY.to_vec();
    let mut vocab_rng = ChaCha8Rng::seed_from_u64(spec.vocab_seed);
    words.shuffle(&mut vocab_rng);

    match spec.kind {
        SyntheticKind::KeywordEntailment => {
            let fillers: Vec<String> = words[..24].iter().map(|s| s.to_string()).collect();
            let trigger = words[24].to_string();
            let hypothesis = format!("{} {} {}", words[25], words[26], words[27]);
            let make = |positive: bool, rng: &mut R| {
                let n_fill = if positive { rng.random_range(4..=7) } else { rng.random_range(5..=8) };
                let mut tokens: Vec<String> = (0..n_fill)
                    .map(|_| fillers[rng.random_range(0..fillers.len())].clone())
                    .collect();
                if positive {
                    let at = rng.random_range(0..=tokens.len());
                    tokens.insert(at, trigger.clone());
                }
                let label = if positive { "entailment" } else { "not_entailment" };
                TaskExample::new(
                    TaskId::Rte,
                    &[("premise", &tokens.join(" ")), ("hypothesis", &hypothesis)],
                    Some(label),
                )
            };
            let splits = make_splits(spec, rng, make);
            Ok(Generated {
                task: TaskId::Rte,
                train: splits.0,
                dev: splits.1,
                test: splits.2,
                rule: OracleRule::Trigger { word: trigger },
            })
        }
        SyntheticKind::NegationFlip => {
            let fillers: Vec<String> = words[..24].iter().map(|s| s.to_string()).collect();
            let trigger = words[24].to_string();
            let (h1, h2) = (words[25].to_string(), words[26].to_string());
            let make = |positive: bool, rng: &mut R| {
                let n_fill = rng.random_range(4..=7);
                let mut tokens: Vec<String> = (0..n_fill)
                    .map(|_| fillers[rng.random_range(0..fillers.len())].clone())
                    .collect();
                let at = rng.random_range(0..=tokens.len());
                tokens.insert(at, trigger.clone());
                // The hypothesis decides: a "not" flips entailment.
                let hypothesis = if positive {
                    format!("{h1} {h2}")
                } else {
                    format!("{h1} not {h2}")
                };
                let label = if positive { "entailment" } else { "not_entailment" };
                TaskExample::new(
                    TaskId::Rte,
                    &[("premise", &tokens.join(" ")), ("hypothesis", &hypothesis)],
                    Some(label),
                )
            };
            let splits = make_splits(spec, rng, make);
            Ok(Generated {
                task: TaskId::Rte,
                train: splits.0,
                dev: splits.1,
                test: splits.2,
                rule: OracleRule::Negation { word: "not".into() },
            })
        }
        SyntheticKind::PairedWordSense => {
            let pivots: Vec<String> = words[..4].iter().map(|s| s.to_string()).collect();
            let set_a: Vec<String> = words[4..10].iter().map(|s| s.to_string()).collect();
            let set_b: Vec<String> = words[10..16].iter().map(|s| s.to_string()).collect();
            let sentence = |pivot: &str, set: &[String], rng: &mut R| {
                let mut ctx: Vec<String> = (0..3)
                    .map(|_| set[rng.random_range(0..set.len())].clone())
                    .collect();
                ctx.insert(0, pivot.to_string());
                ctx.join(" ")
            };
            let set_a2 = set_a.clone();
            let make = move |positive: bool, rng: &mut R| {
                let pivot = pivots[rng.random_range(0..pivots.len())].clone();
                let first_a = rng.random_range(0..2) == 0;
                let (s1_set, s2_set) = match (positive, first_a) {
                    (true, true) => (&set_a2, &set_a2),
                    (true, false) => (&set_b, &set_b),
                    (false, true) => (&set_a2, &set_b),
                    (false, false) => (&set_b, &set_a2),
                };
                let s1 = sentence(&pivot, s1_set, rng);
                let s2 = sentence(&pivot, s2_set, rng);
                let label = if positive { "true" } else { "false" };
                TaskExample::new(
                    TaskId::Wic,
                    &[("word", &pivot), ("sentence1", &s1), ("sentence2", &s2)],
                    Some(label),
                )
            };
            let splits = make_splits(spec, rng, make);
            Ok(Generated {
                task: TaskId::Wic,
                train: splits.0,
                dev: splits.1,
                test: splits.2,
                rule: OracleRule::Sense { set_a },
            })
        }
    }
}

/// Builds exactly-balanced splits, then applies paired label flips so noise
/// never disturbs the balance.
fn make_splits<R: Rng>(
    spec: &SyntheticSpec,
    rng: &mut R,
    mut make: impl FnMut(bool, &mut R) -> TaskExample,
) -> (Vec<TaskExample>, Vec<TaskExample>, Vec<TaskExample>) {
    let mut build = |n: usize, rng: &mut R| {
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            out.push(make(i % 2 == 0, rng));
        }
        let flips_per_class = ((spec.noise * n as f64) / 2.0).floor() as usize;
        let mut flipped = (0, 0);
        for ex in out.iter_mut() {
            let positive = ex.label.as_deref() == Some(first_label(spec.kind));
            if positive && flipped.0 < flips_per_class {
                ex.label = Some(second_label(spec.kind).to_string());
                flipped.0 += 1;
            } else if !positive && flipped.1 < flips_per_class {
                ex.label = Some(first_label(spec.kind).to_string());
                flipped.1 += 1;
            }
        }
        out.shuffle(rng);
        out
    };
    let train = build(spec.n_train, rng);
    let dev = build(spec.n_dev, rng);
    let test = build(spec.n_test, rng);
    (train, dev, test)
}

fn first_label(kind: SyntheticKind) -> &'static str {
    match kind {
        SyntheticKind::KeywordEntailment | SyntheticKind::NegationFlip => "entailment",
        SyntheticKind::PairedWordSense => "true",
    }
}

fn second_label(kind: SyntheticKind) -> &'static str {
    match kind {
        SyntheticKind::KeywordEntailment | SyntheticKind::NegationFlip => "not_entailment",
        SyntheticKind::PairedWordSense => "false",
    }
}
