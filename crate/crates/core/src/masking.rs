//! Context-masking plans for the label-conditioned objective.
//!
//! A plan names which context positions of a rendered instance get replaced
//! by `[MASK]` and remembers the original tokens there. Only field-derived
//! context positions are ever eligible; pattern literals, inserted label
//! tokens, and special positions are untouched by construction.

use std::collections::HashMap;

use rand::Rng;

use thiserror::Error;

use crate::pvp::ClozeInstance;
use crate::task::TaskExample;
use crate::tokenizer::MASK_ID;

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("nothing to mask: instance has no context positions")]
    NothingToMask,
    #[error("mask ratio {0} out of range (0, 0.5]")]
    BadRatio(f64),
    #[error("unknown mask scheme {0:?}")]
    UnknownKind(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    /// Always mask the ratio-determined maximum count.
    Fixed,
    /// Mask a uniformly random count between 1 and the maximum.
    Variable,
    /// Mask the highest-importance context tokens, count drawn as Variable.
    Tfidf,
}

impl MaskKind {
    pub fn parse(s: &str) -> Result<Self, MaskError> {
        match s {
            "fixed" => Ok(MaskKind::Fixed),
            "variable" => Ok(MaskKind::Variable),
            "tfidf" => Ok(MaskKind::Tfidf),
            other => Err(MaskError::UnknownKind(other.to_string())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MaskKind::Fixed => "fixed",
            MaskKind::Variable => "variable",
            MaskKind::Tfidf => "tfidf",
        }
    }
}

/// Masking scheme: kind plus the fraction of context tokens the plan may
/// cover. Default ratio is 0.105.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskScheme {
    pub kind: MaskKind,
    pub ratio: f64,
}

impl MaskScheme {
    pub const DEFAULT_RATIO: f64 = 0.105;

    pub fn new(kind: MaskKind, ratio: f64) -> Result<Self, MaskError> {
        if !(ratio > 0.0 && ratio <= 0.5) {
            return Err(MaskError::BadRatio(ratio));
        }
        Ok(Self { kind, ratio })
    }

    /// Largest mask count for `n` context tokens: floor(ratio * n), at
    /// least 1.
    pub fn k_max(&self, n: usize) -> usize {
        ((self.ratio * n as f64).floor() as usize).max(1)
    }

    fn draw_k<R: Rng>(&self, n: usize, rng: &mut R) -> usize {
        let k_max = self.k_max(n);
        match self.kind {
            MaskKind::Fixed => k_max,
            MaskKind::Variable | MaskKind::Tfidf => rng.random_range(1..=k_max),
        }
    }
}

/// An applied or pending context mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    /// Context positions to mask, ascending.
    pub positions: Vec<usize>,
    /// Original token ids at those positions.
    pub originals: Vec<u32>,
}

impl MaskPlan {
    /// Replaces the planned positions with `[MASK]` in `ids`.
    pub fn apply(&self, ids: &mut [u32]) {
        for &p in &self.positions {
            ids[p] = MASK_ID;
        }
    }

    /// Restores the original tokens.
    pub fn revert(&self, ids: &mut [u32]) {
        for (&p, &tok) in self.positions.iter().zip(&self.originals) {
            ids[p] = tok;
        }
    }
}

/// Context ordinals eligible for masking: special tokens (an out-of-vocab
/// word surfaces as `[UNK]`) are never masked.
fn eligible_ordinals(instance: &ClozeInstance, limit: usize) -> Vec<usize> {
    instance.context_positions[..limit]
        .iter()
        .enumerate()
        .filter(|(_, &p)| instance.ids[p] >= crate::tokenizer::SPECIAL_TOKENS.len() as u32)
        .map(|(ordinal, _)| ordinal)
        .collect()
}

/// Samples a mask plan over the instance's maskable context positions: the
/// count follows the scheme, positions are uniform without replacement.
pub fn sample_mask_plan<R: Rng>(
    instance: &ClozeInstance,
    scheme: &MaskScheme,
    rng: &mut R,
) -> Result<MaskPlan, MaskError> {
    let eligible = eligible_ordinals(instance, instance.context_positions.len());
    if eligible.is_empty() {
        return Err(MaskError::NothingToMask);
    }
    let k = scheme.draw_k(eligible.len(), rng);
    let mut picks: Vec<usize> = rand::seq::index::sample(rng, eligible.len(), k)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    picks.sort_unstable();
    Ok(plan_from_ordinals(instance, &picks))
}

/// Samples a shared plan for several renderings of the same example (one
/// per conditioning label). The same context ordinals are masked in every
/// rendering, restricted to ordinals present in all of them.
pub fn sample_shared_mask_plans<R: Rng>(
    renderings: &[ClozeInstance],
    scheme: &MaskScheme,
    rng: &mut R,
) -> Result<Vec<MaskPlan>, MaskError> {
    let n = renderings
        .iter()
        .map(|r| r.context_positions.len())
        .min()
        .unwrap_or(0);
    if n == 0 {
        return Err(MaskError::NothingToMask);
    }
    let eligible = eligible_ordinals(&renderings[0], n);
    if eligible.is_empty() {
        return Err(MaskError::NothingToMask);
    }
    let k = scheme.draw_k(eligible.len(), rng);
    let mut picks: Vec<usize> = rand::seq::index::sample(rng, eligible.len(), k)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    picks.sort_unstable();
    Ok(renderings.iter().map(|r| plan_from_ordinals(r, &picks)).collect())
}

fn plan_from_ordinals(instance: &ClozeInstance, ordinals: &[usize]) -> MaskPlan {
    let positions: Vec<usize> =
        ordinals.iter().map(|&i| instance.context_positions[i]).collect();
    let originals = positions.iter().map(|&p| instance.ids[p]).collect();
    MaskPlan { positions, originals }
}

/// Per-document importance scores: each example's concatenated field text is
/// one document; score(t, d) = tf(t, d) * ln(N / df(t)).
pub fn tfidf_scores(train_examples: &[TaskExample]) -> Vec<HashMap<String, f64>> {
    let docs: Vec<Vec<String>> = train_examples
        .iter()
        .map(|ex| crate::tokenizer::normalize_words(&ex.document_text()).collect())
        .collect();
    let n_docs = docs.len() as f64;

    let mut df: HashMap<&str, usize> = HashMap::new();
    for doc in &docs {
        let mut seen: Vec<&str> = doc.iter().map(String::as_str).collect();
        seen.sort_unstable();
        seen.dedup();
        for tok in seen {
            *df.entry(tok).or_insert(0) += 1;
        }
    }

    docs.iter()
        .map(|doc| {
            let mut tf: HashMap<&str, usize> = HashMap::new();
            for tok in doc {
                *tf.entry(tok).or_insert(0) += 1;
            }
            tf.into_iter()
                .map(|(tok, count)| {
                    let idf = (n_docs / df[tok] as f64).ln();
                    (tok.to_string(), count as f64 * idf)
                })
                .collect()
        })
        .collect()
}

/// Importance-driven plan: the count is drawn as in the variable scheme; the
/// positions are the top-k context positions by score, ties broken by lowest
/// position index.
pub fn sample_mask_plan_tfidf<R: Rng>(
    instance: &ClozeInstance,
    scheme: &MaskScheme,
    scores: &HashMap<String, f64>,
    vocab: &crate::tokenizer::Vocabulary,
    rng: &mut R,
) -> Result<MaskPlan, MaskError> {
    let eligible = eligible_ordinals(instance, instance.context_positions.len());
    if eligible.is_empty() {
        return Err(MaskError::NothingToMask);
    }
    let k = rng.random_range(1..=scheme.k_max(eligible.len()));
    let ordinals = top_k_ordinals(instance, &eligible, scores, vocab, k);
    Ok(plan_from_ordinals(instance, &ordinals))
}

/// Importance-driven variant of [`sample_shared_mask_plans`]: one count is
/// drawn over the shared ordinal range, and the top-k ordinals are taken by
/// score on the first rendering.
pub fn sample_shared_mask_plans_tfidf<R: Rng>(
    renderings: &[ClozeInstance],
    scheme: &MaskScheme,
    scores: &HashMap<String, f64>,
    vocab: &crate::tokenizer::Vocabulary,
    rng: &mut R,
) -> Result<Vec<MaskPlan>, MaskError> {
    let n = renderings
        .iter()
        .map(|r| r.context_positions.len())
        .min()
        .unwrap_or(0);
    if n == 0 {
        return Err(MaskError::NothingToMask);
    }
    let eligible = eligible_ordinals(&renderings[0], n);
    if eligible.is_empty() {
        return Err(MaskError::NothingToMask);
    }
    let k = rng.random_range(1..=scheme.k_max(eligible.len()));
    let ordinals = top_k_ordinals(&renderings[0], &eligible, scores, vocab, k);
    Ok(renderings.iter().map(|r| plan_from_ordinals(r, &ordinals)).collect())
}

fn top_k_ordinals(
    instance: &ClozeInstance,
    eligible: &[usize],
    scores: &HashMap<String, f64>,
    vocab: &crate::tokenizer::Vocabulary,
    k: usize,
) -> Vec<usize> {
    let mut scored: Vec<(usize, f64)> = eligible
        .iter()
        .map(|&ordinal| {
            let pos = instance.context_positions[ordinal];
            let tok = vocab.token(instance.ids[pos]).unwrap_or("[UNK]");
            (ordinal, scores.get(tok).copied().unwrap_or(0.0))
        })
        .collect();
    // Descending score, ties to the lowest position index.
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
    let mut ordinals: Vec<usize> = scored.into_iter().take(k).map(|(o, _)| o).collect();
    ordinals.sort_unstable();
    ordinals
}
