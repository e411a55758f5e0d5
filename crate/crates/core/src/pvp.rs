//! Pattern-verbalizer pairs: templates that turn task examples into
//! cloze-style token sequences.
//!
//! A pattern is a sequence of literal text, `{field}` slots, and a `___`
//! mask slot. Rendering expands the mask slot to one mask token per
//! verbalization token of the rendered label (or fills it with the label's
//! tokens for label-conditioned inputs), then truncates over-long sequences
//! by trimming the longest field slot from its end. A standalone `|` in a
//! template marks the boundary between text parts and emits no token.

use std::collections::HashSet;

use thiserror::Error;

use crate::task::{TaskExample, TaskId};
use crate::tokenizer::{Vocabulary, MASK_ID, UNK_ID};

#[derive(Debug, Error)]
pub enum PvpError {
    #[error("bad template: {0}")]
    BadTemplate(String),
    #[error("template references unknown field {0:?}")]
    UnknownField(String),
    #[error("example is missing field {0:?}")]
    MissingFieldValue(String),
    #[error("label {0:?} is not in the verbalizer")]
    UnknownLabel(String),
    #[error("label {0:?} has an empty verbalization")]
    EmptyVerbalization(String),
    #[error("labels {0:?} and {1:?} verbalize to the same token sequence")]
    DuplicateVerbalization(String, String),
    #[error("verbalizer token {0:?} is not in the vocabulary")]
    VerbalizerTokenOov(String),
    #[error("untruncatable: rendering exceeds max_len {0} after trimming all field content")]
    Untruncatable(usize),
    #[error("record question lacks an @placeholder marker")]
    MissingPlaceholder,
    #[error("custom pvp file: {0}")]
    BadPvpFile(String),
}

/// One element of a parsed pattern.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    /// Literal text, tokenized at render time.
    Literal(String),
    /// A task field, substituted from the example.
    Field(String),
    /// The cloze slot.
    Mask,
    /// A field whose `@placeholder` occurrence becomes the cloze slot
    /// (cloze-native tasks like `record`).
    PlaceholderField(String),
}

/// A parsed pattern template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pattern {
    pub template: String,
    pub segments: Vec<Segment>,
}

impl Pattern {
    /// Parses a template of literal text, `{field}` slots, `___` mask slots,
    /// and `|` part boundaries.
    pub fn parse(template: &str) -> Result<Self, PvpError> {
        let mut segments = Vec::new();
        let mut rest = template;
        let mut literal = String::new();
        while !rest.is_empty() {
            if let Some(stripped) = rest.strip_prefix("___") {
                flush_literal(&mut segments, &mut literal);
                segments.push(Segment::Mask);
                rest = stripped;
            } else if rest.starts_with('{') {
                let end = rest.find('}').ok_or_else(|| {
                    PvpError::BadTemplate(format!("unclosed field slot in {template:?}"))
                })?;
                let name = &rest[1..end];
                if name.is_empty() {
                    return Err(PvpError::BadTemplate(format!("empty field slot in {template:?}")));
                }
                flush_literal(&mut segments, &mut literal);
                segments.push(Segment::Field(name.to_string()));
                rest = &rest[end + 1..];
            } else {
                let mut chars = rest.chars();
                literal.push(chars.next().expect("rest is nonempty"));
                rest = chars.as_str();
            }
        }
        flush_literal(&mut segments, &mut literal);
        if !segments.iter().any(|s| matches!(s, Segment::Mask)) {
            return Err(PvpError::BadTemplate(format!("no ___ mask slot in {template:?}")));
        }
        Ok(Self { template: template.to_string(), segments })
    }

    /// Validates that every field slot exists in the task schema.
    pub fn check_fields(&self, task: TaskId) -> Result<(), PvpError> {
        for seg in &self.segments {
            if let Segment::Field(name) | Segment::PlaceholderField(name) = seg {
                if !task.fields().contains(&name.as_str()) {
                    return Err(PvpError::UnknownField(name.clone()));
                }
            }
        }
        Ok(())
    }

    /// Literal text chunks, for vocabulary seeding.
    pub fn literal_text(&self) -> Vec<&str> {
        self.segments
            .iter()
            .filter_map(|s| match s {
                Segment::Literal(text) => Some(text.as_str()),
                _ => None,
            })
            .collect()
    }
}

fn flush_literal(segments: &mut Vec<Segment>, literal: &mut String) {
    if !literal.trim().is_empty() {
        segments.push(Segment::Literal(std::mem::take(literal)));
    } else {
        literal.clear();
    }
}

/// Maps labels to their verbalization text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verbalizer {
    /// Fixed label -> text map, in label-index order.
    Static(Vec<(String, String)>),
    /// Label -> the named field's text (choice-style tasks).
    FromField(Vec<(String, String)>),
    /// Labels are the example's candidate entities, verbalized as themselves.
    Entities,
}

impl Verbalizer {
    /// The verbalization text for `label` under `example`.
    pub fn verbalization(&self, example: &TaskExample, label: &str) -> Result<String, PvpError> {
        match self {
            Verbalizer::Static(map) => map
                .iter()
                .find(|(l, _)| l == label)
                .map(|(_, v)| v.clone())
                .ok_or_else(|| PvpError::UnknownLabel(label.to_string())),
            Verbalizer::FromField(map) => {
                let field = map
                    .iter()
                    .find(|(l, _)| l == label)
                    .map(|(_, f)| f.as_str())
                    .ok_or_else(|| PvpError::UnknownLabel(label.to_string()))?;
                example
                    .field(field)
                    .map(str::to_string)
                    .ok_or_else(|| PvpError::MissingFieldValue(field.to_string()))
            }
            Verbalizer::Entities => {
                if example.entities.iter().any(|e| e == label) {
                    Ok(label.to_string())
                } else {
                    Err(PvpError::UnknownLabel(label.to_string()))
                }
            }
        }
    }

    /// Fixed verbalization texts, for vocabulary seeding. Field-derived
    /// verbalizations are covered by the example fields themselves.
    pub fn static_texts(&self) -> Vec<&str> {
        match self {
            Verbalizer::Static(map) => map.iter().map(|(_, v)| v.as_str()).collect(),
            _ => Vec::new(),
        }
    }
}

/// A pattern that may branch on the example's `question` field
/// (cause/effect-style tasks).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PatternChoice {
    Fixed(Pattern),
    PerQuestion { cause: Pattern, effect: Pattern },
}

impl PatternChoice {
    pub fn for_example<'a>(&'a self, example: &TaskExample) -> Result<&'a Pattern, PvpError> {
        match self {
            PatternChoice::Fixed(p) => Ok(p),
            PatternChoice::PerQuestion { cause, effect } => {
                match example.field("question") {
                    Some("cause") => Ok(cause),
                    Some("effect") => Ok(effect),
                    other => Err(PvpError::MissingFieldValue(format!(
                        "question must be cause or effect, found {other:?}"
                    ))),
                }
            }
        }
    }

    pub fn patterns(&self) -> Vec<&Pattern> {
        match self {
            PatternChoice::Fixed(p) => vec![p],
            PatternChoice::PerQuestion { cause, effect } => vec![cause, effect],
        }
    }
}

/// A pattern-verbalizer pair. `index` is the 1-based catalog position
/// (0 for user-defined pairs).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pvp {
    pub task: TaskId,
    pub index: usize,
    pub pattern: PatternChoice,
    /// Override pattern for label-conditioned rendering, where the default
    /// pattern would leak the competing choice into the input.
    pub lc_pattern: Option<PatternChoice>,
    pub verbalizer: Verbalizer,
}

impl Pvp {
    /// Text needed in the vocabulary for this pair to render: pattern
    /// literals plus fixed verbalizations.
    pub fn vocab_seed_text(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        let mut choices: Vec<&PatternChoice> = vec![&self.pattern];
        if let Some(lc) = &self.lc_pattern {
            choices.push(lc);
        }
        for choice in choices {
            for pattern in choice.patterns() {
                out.extend(pattern.literal_text().iter().map(|s| s.to_string()));
            }
        }
        out.extend(self.verbalizer.static_texts().iter().map(|s| s.to_string()));
        out
    }
}

/// A label candidate: its name and verbalization token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Candidate {
    pub label: String,
    pub tokens: Vec<u32>,
}

/// A rendered cloze input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClozeInstance {
    pub ids: Vec<u32>,
    /// Positions holding `[MASK]`, in order. Empty for label-conditioned
    /// renderings, whose masking comes from a separate plan.
    pub mask_positions: Vec<usize>,
    /// Positions where label tokens were inserted by label-conditioned
    /// rendering. Empty for cloze renderings.
    pub inserted_positions: Vec<usize>,
    /// One candidate per label of the example's label set, in index order.
    /// Each candidate's token count equals the mask count of the rendering
    /// built for that label.
    pub candidates: Vec<Candidate>,
    /// Positions that originate from field slots; the only positions
    /// eligible for context masking.
    pub context_positions: Vec<usize>,
    /// Index of the gold label in `candidates`, when known.
    pub true_label: Option<usize>,
}

impl ClozeInstance {
    pub fn candidate(&self, index: usize) -> &Candidate {
        &self.candidates[index]
    }

    /// Candidate token ids in label order; errors are impossible here since
    /// rendering validates candidates.
    pub fn single_token_candidates(&self) -> Option<Vec<u32>> {
        self.candidates
            .iter()
            .map(|c| if c.tokens.len() == 1 { Some(c.tokens[0]) } else { None })
            .collect()
    }
}

enum GroupKind {
    Literal,
    Field,
    Mask,
    Inserted,
}

struct Group {
    kind: GroupKind,
    tokens: Vec<u32>,
}

/// Renders `example` as a cloze question for `label`: the mask slot expands
/// to that label's verbalization length.
pub fn render(
    pvp: &Pvp,
    vocab: &Vocabulary,
    example: &TaskExample,
    label: &str,
    max_len: usize,
) -> Result<ClozeInstance, PvpError> {
    render_impl(pvp, vocab, example, label, max_len, false)
}

/// Renders `example` with `label`'s verbalization written into the mask
/// slot, producing the label-conditioned input whose context a mask plan
/// will later corrupt.
pub fn render_label_conditioned(
    pvp: &Pvp,
    vocab: &Vocabulary,
    example: &TaskExample,
    label: &str,
    max_len: usize,
) -> Result<ClozeInstance, PvpError> {
    render_impl(pvp, vocab, example, label, max_len, true)
}

fn render_impl(
    pvp: &Pvp,
    vocab: &Vocabulary,
    example: &TaskExample,
    label: &str,
    max_len: usize,
    label_conditioned: bool,
) -> Result<ClozeInstance, PvpError> {
    let choice = if label_conditioned {
        pvp.lc_pattern.as_ref().unwrap_or(&pvp.pattern)
    } else {
        &pvp.pattern
    };
    let pattern = choice.for_example(example)?;
    let candidates = build_candidates(pvp, vocab, example)?;
    let rendered_idx = candidates
        .iter()
        .position(|c| c.label == label)
        .ok_or_else(|| PvpError::UnknownLabel(label.to_string()))?;

    let mut groups: Vec<Group> = Vec::new();
    for seg in &pattern.segments {
        match seg {
            Segment::Literal(text) => groups.push(Group {
                kind: GroupKind::Literal,
                tokens: encode_literal(vocab, text),
            }),
            Segment::Field(name) => {
                let value = example
                    .field(name)
                    .ok_or_else(|| PvpError::MissingFieldValue(name.clone()))?;
                groups.push(Group { kind: GroupKind::Field, tokens: vocab.encode(value) });
            }
            Segment::Mask => groups.push(mask_group(&candidates[rendered_idx], label_conditioned)),
            Segment::PlaceholderField(name) => {
                let value = example
                    .field(name)
                    .ok_or_else(|| PvpError::MissingFieldValue(name.clone()))?;
                let at = value.find("@placeholder").ok_or(PvpError::MissingPlaceholder)?;
                groups.push(Group {
                    kind: GroupKind::Field,
                    tokens: vocab.encode(&value[..at]),
                });
                groups.push(mask_group(&candidates[rendered_idx], label_conditioned));
                groups.push(Group {
                    kind: GroupKind::Field,
                    tokens: vocab.encode(&value[at + "@placeholder".len()..]),
                });
            }
        }
    }

    truncate_fields(&mut groups, max_len)?;

    let mut ids = Vec::new();
    let mut mask_positions = Vec::new();
    let mut inserted_positions = Vec::new();
    let mut context_positions = Vec::new();
    for group in &groups {
        for &tok in &group.tokens {
            let pos = ids.len();
            ids.push(tok);
            match group.kind {
                GroupKind::Mask => mask_positions.push(pos),
                GroupKind::Inserted => inserted_positions.push(pos),
                GroupKind::Field => context_positions.push(pos),
                GroupKind::Literal => {}
            }
        }
    }

    Ok(ClozeInstance {
        ids,
        mask_positions,
        inserted_positions,
        candidates,
        context_positions,
        true_label: example.label_index(),
    })
}

fn mask_group(candidate: &Candidate, label_conditioned: bool) -> Group {
    if label_conditioned {
        Group { kind: GroupKind::Inserted, tokens: candidate.tokens.clone() }
    } else {
        Group { kind: GroupKind::Mask, tokens: vec![MASK_ID; candidate.tokens.len()] }
    }
}

fn build_candidates(
    pvp: &Pvp,
    vocab: &Vocabulary,
    example: &TaskExample,
) -> Result<Vec<Candidate>, PvpError> {
    let labels = example.label_set();
    let mut candidates = Vec::with_capacity(labels.len());
    for label in &labels {
        let text = pvp.verbalizer.verbalization(example, label)?;
        let mut tokens = Vec::new();
        for word in crate::tokenizer::normalize_words(&text) {
            let id = vocab.id(&word).unwrap_or(UNK_ID);
            if id == UNK_ID && word != "[unk]" {
                return Err(PvpError::VerbalizerTokenOov(word));
            }
            tokens.push(id);
        }
        if tokens.is_empty() {
            return Err(PvpError::EmptyVerbalization(label.clone()));
        }
        candidates.push(Candidate { label: label.clone(), tokens });
    }
    for i in 0..candidates.len() {
        for j in i + 1..candidates.len() {
            if candidates[i].tokens == candidates[j].tokens {
                return Err(PvpError::DuplicateVerbalization(
                    candidates[i].label.clone(),
                    candidates[j].label.clone(),
                ));
            }
        }
    }
    Ok(candidates)
}

fn encode_literal(vocab: &Vocabulary, text: &str) -> Vec<u32> {
    // A standalone "|" marks the text-part boundary and emits nothing.
    crate::tokenizer::normalize_words(text)
        .filter(|w| w != "|")
        .map(|w| vocab.id(&w).unwrap_or(UNK_ID))
        .collect()
}

/// Trims the longest field slot from its end until the total length fits.
fn truncate_fields(groups: &mut [Group], max_len: usize) -> Result<(), PvpError> {
    loop {
        let total: usize = groups.iter().map(|g| g.tokens.len()).sum();
        if total <= max_len {
            return Ok(());
        }
        let longest = groups
            .iter_mut()
            .filter(|g| matches!(g.kind, GroupKind::Field) && !g.tokens.is_empty())
            .max_by_key(|g| g.tokens.len());
        match longest {
            Some(group) => {
                group.tokens.pop();
            }
            None => return Err(PvpError::Untruncatable(max_len)),
        }
    }
}

/// Parses a custom pattern-verbalizer file.
///
/// Format, one entry per line (`#` comments and blank lines allowed):
///
/// ```text
/// pattern: {hypothesis} ? | ___ , {premise}
/// lc_pattern: {hypothesis} ___ , {premise}      # optional
/// entailment: yes
/// not_entailment: no
/// ```
///
/// Verbalizer lines must cover the task's label set exactly.
pub fn parse_pvp_file(text: &str, task: TaskId) -> Result<Pvp, PvpError> {
    let mut pattern: Option<Pattern> = None;
    let mut lc_pattern: Option<Pattern> = None;
    let mut verbalizations: Vec<(String, String)> = Vec::new();
    for raw in text.lines() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once(':')
            .ok_or_else(|| PvpError::BadPvpFile(format!("expected key: value, found {line:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "pattern" => pattern = Some(Pattern::parse(value)?),
            "lc_pattern" => lc_pattern = Some(Pattern::parse(value)?),
            label => verbalizations.push((label.to_string(), value.to_string())),
        }
    }
    let pattern = pattern.ok_or_else(|| PvpError::BadPvpFile("missing pattern line".into()))?;
    pattern.check_fields(task)?;
    if let Some(lc) = &lc_pattern {
        lc.check_fields(task)?;
    }

    let expected: Vec<&str> = task.labels().to_vec();
    let got: HashSet<&str> = verbalizations.iter().map(|(l, _)| l.as_str()).collect();
    if got.len() != verbalizations.len() {
        return Err(PvpError::BadPvpFile("duplicate label line".into()));
    }
    if expected.is_empty() {
        return Err(PvpError::BadPvpFile(format!(
            "task {task} uses per-example candidates; custom verbalizers are not supported"
        )));
    }
    if got != expected.iter().copied().collect() {
        return Err(PvpError::BadPvpFile(format!(
            "verbalizer labels {got:?} do not match task labels {expected:?}"
        )));
    }
    // Reorder to label-index order.
    let ordered = expected
        .iter()
        .map(|l| {
            verbalizations
                .iter()
                .find(|(label, _)| label == l)
                .cloned()
                .expect("label presence checked above")
        })
        .collect();
    Ok(Pvp {
        task,
        index: 0,
        pattern: PatternChoice::Fixed(pattern),
        lc_pattern: lc_pattern.map(PatternChoice::Fixed),
        verbalizer: Verbalizer::Static(ordered),
    })
}
