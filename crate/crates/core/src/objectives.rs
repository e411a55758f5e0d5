//! Training losses over per-position vocabulary logits, and label
//! prediction.
//!
//! Two families of label loss are provided. The classic cloze loss
//! ([`pet_ce_loss`]) softmaxes over the label tokens only, so non-label
//! vocabulary entries never receive gradient. The decoupled label loss
//! ([`decoupled_label_loss`]) instead reads each label's probability off the
//! full-vocabulary softmax and scores it with binary cross-entropy: the
//! correct label token is pushed toward probability one and every incorrect
//! label token toward zero, which leaves gradient on the whole vocabulary.
//! The label-conditioned loss applies the same binary scheme to masked
//! context tokens under inputs that contain a correct or incorrect label.
//!
//! Every loss has a `_grad` companion returning exact logit gradients; all
//! internal arithmetic runs in f64 regardless of the scalar type.

use thiserror::Error;

use crate::scalar::Scalar;

/// Probabilities are clamped to [EPS, 1 - EPS] before logarithms so that
/// binary cross-entropy stays finite for arbitrary finite logits.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("duplicate candidate token id {0}")]
    DuplicateCandidateToken(u32),
    #[error("true label index {index} out of range for {count} labels")]
    BadTrueLabel { index: usize, count: usize },
    #[error("no candidates")]
    EmptyCandidates,
    #[error("labels indistinguishable: every position was filtered as common")]
    LabelsIndistinguishable,
    #[error("mask plan is empty")]
    EmptyPlan,
    #[error("rendering for label {label} has {logits} logit rows but {tokens} tokens")]
    MismatchedRendering { label: usize, logits: usize, tokens: usize },
    #[error("token id {0} out of range for logit row of {1}")]
    TokenOutOfRange(u32, usize),
}

/// Per-batch loss components. `total` is always their plain sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown<S> {
    pub l_d: S,
    pub l_m: S,
    pub total: S,
}

/// Combines the decoupled label loss and the label-conditioned loss with
/// unit weights.
pub fn adapet_loss<S: Scalar>(l_d: S, l_m: S) -> LossBreakdown<S> {
    LossBreakdown { l_d, l_m, total: l_d + l_m }
}

fn clamp(q: f64) -> f64 {
    q.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

fn interior(q: f64) -> bool {
    q > PROB_EPS && q < 1.0 - PROB_EPS
}

/// Stable softmax over a logit row, in f64.
fn softmax_f64<S: Scalar>(logits: &[S]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |a, v| a.max(v.widen()));
    let exps: Vec<f64> = logits.iter().map(|v| (v.widen() - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Probability of `token` under the full-vocabulary softmax of `logits`,
/// clamped away from 0 and 1.
pub fn vocab_prob<S: Scalar>(logits: &[S], token: u32) -> Result<S, ObjectiveError> {
    let probs = softmax_f64(logits);
    let p = probs
        .get(token as usize)
        .copied()
        .ok_or(ObjectiveError::TokenOutOfRange(token, logits.len()))?;
    Ok(S::from_f64_lossy(clamp(p)))
}

fn check_candidates(candidates: &[u32], true_idx: usize) -> Result<(), ObjectiveError> {
    if candidates.is_empty() {
        return Err(ObjectiveError::EmptyCandidates);
    }
    if true_idx >= candidates.len() {
        return Err(ObjectiveError::BadTrueLabel { index: true_idx, count: candidates.len() });
    }
    for (i, &a) in candidates.iter().enumerate() {
        if candidates[..i].contains(&a) {
            return Err(ObjectiveError::DuplicateCandidateToken(a));
        }
    }
    Ok(())
}

/// Cross-entropy over a softmax restricted to the label tokens. Non-label
/// logits do not enter the loss and carry exactly zero gradient.
pub fn pet_ce_loss<S: Scalar>(
    logits: &[S],
    candidates: &[u32],
    true_idx: usize,
) -> Result<S, ObjectiveError> {
    Ok(pet_ce_loss_grad(logits, candidates, true_idx)?.0)
}

/// Loss and full-vocabulary logit gradient for [`pet_ce_loss`].
pub fn pet_ce_loss_grad<S: Scalar>(
    logits: &[S],
    candidates: &[u32],
    true_idx: usize,
) -> Result<(S, Vec<S>), ObjectiveError> {
    check_candidates(candidates, true_idx)?;
    let label_logits: Vec<S> = candidates
        .iter()
        .map(|&c| {
            logits
                .get(c as usize)
                .copied()
                .ok_or(ObjectiveError::TokenOutOfRange(c, logits.len()))
        })
        .collect::<Result<_, _>>()?;
    let q = softmax_f64(&label_logits);
    let loss = -clamp(q[true_idx]).ln();
    let mut d_logits = vec![S::zero(); logits.len()];
    for (i, &tok) in candidates.iter().enumerate() {
        let delta = if i == true_idx { 1.0 } else { 0.0 };
        d_logits[tok as usize] = S::from_f64_lossy(q[i] - delta);
    }
    Ok((S::from_f64_lossy(loss), d_logits))
}

/// Binary cross-entropy terms over full-vocabulary probabilities: the true
/// label token is scored against 1, every other label token against 0.
pub fn decoupled_label_loss<S: Scalar>(
    logits: &[S],
    candidates: &[u32],
    true_idx: usize,
) -> Result<S, ObjectiveError> {
    check_candidates(candidates, true_idx)?;
    let probs = softmax_f64(logits);
    let mut loss = 0.0;
    for (i, &tok) in candidates.iter().enumerate() {
        let q = *probs
            .get(tok as usize)
            .ok_or(ObjectiveError::TokenOutOfRange(tok, logits.len()))?;
        if i == true_idx {
            loss -= clamp(q).ln();
        } else {
            loss -= (1.0 - clamp(q)).ln();
        }
    }
    Ok(S::from_f64_lossy(loss))
}

/// Loss and logit gradient for [`decoupled_label_loss`].
pub fn decoupled_label_loss_grad<S: Scalar>(
    logits: &[S],
    candidates: &[u32],
    true_idx: usize,
) -> Result<(S, Vec<S>), ObjectiveError> {
    check_candidates(candidates, true_idx)?;
    let probs = softmax_f64(logits);
    let mut loss = 0.0;
    let mut factors: Vec<(usize, f64)> = Vec::with_capacity(candidates.len());
    for (i, &tok) in candidates.iter().enumerate() {
        let ti = tok as usize;
        let q = *probs.get(ti).ok_or(ObjectiveError::TokenOutOfRange(tok, logits.len()))?;
        if i == true_idx {
            loss += bce_pos(q);
            factors.push((ti, bce_pos_factor(q)));
        } else {
            loss += bce_neg(q);
            factors.push((ti, bce_neg_factor(q)));
        }
    }
    Ok((S::from_f64_lossy(loss), factors_to_grad(&probs, &factors)))
}

// d(loss)/d(logit_v) for one BCE term on softmax probability q of token z
// decomposes as factor * (delta_{v,z} - p_v); the helpers below give the
// factor, with clamping making the gradient zero outside the interior.
fn bce_pos(q: f64) -> f64 {
    -clamp(q).ln()
}

fn bce_neg(q: f64) -> f64 {
    -(1.0 - clamp(q)).ln()
}

fn bce_pos_factor(q: f64) -> f64 {
    if interior(q) {
        -1.0
    } else {
        0.0
    }
}

fn bce_neg_factor(q: f64) -> f64 {
    if interior(q) {
        q / (1.0 - q)
    } else {
        0.0
    }
}

fn factors_to_grad<S: Scalar>(probs: &[f64], factors: &[(usize, f64)]) -> Vec<S> {
    let total: f64 = factors.iter().map(|(_, f)| f).sum();
    let mut grad: Vec<f64> = probs.iter().map(|&p| -total * p).collect();
    for &(token, f) in factors {
        grad[token] += f;
    }
    grad.into_iter().map(S::from_f64_lossy).collect()
}

/// One label's rendering: its verbalization tokens and the logit rows at
/// that rendering's mask positions.
#[derive(Debug, Clone)]
pub struct LabelRendering<S> {
    pub tokens: Vec<u32>,
    pub logits: Vec<Vec<S>>,
}

fn check_renderings<S: Scalar>(
    renderings: &[LabelRendering<S>],
    true_idx: usize,
) -> Result<(), ObjectiveError> {
    if renderings.is_empty() {
        return Err(ObjectiveError::EmptyCandidates);
    }
    if true_idx >= renderings.len() {
        return Err(ObjectiveError::BadTrueLabel { index: true_idx, count: renderings.len() });
    }
    for (i, r) in renderings.iter().enumerate() {
        if r.tokens.len() != r.logits.len() {
            return Err(ObjectiveError::MismatchedRendering {
                label: i,
                logits: r.logits.len(),
                tokens: r.tokens.len(),
            });
        }
    }
    Ok(())
}

/// Positions kept after filtering tokens common to all labels.
///
/// A position index is "common" when every label carries the same token id
/// there; that only has meaning when all labels have the same token count,
/// so labels of differing lengths keep every position.
fn kept_positions<S: Scalar>(renderings: &[LabelRendering<S>]) -> Vec<Vec<usize>> {
    let first_len = renderings[0].tokens.len();
    let equal_lengths = renderings.iter().all(|r| r.tokens.len() == first_len);
    if !equal_lengths {
        return renderings.iter().map(|r| (0..r.tokens.len()).collect()).collect();
    }
    let keep: Vec<usize> = (0..first_len)
        .filter(|&p| !renderings.iter().all(|r| r.tokens[p] == renderings[0].tokens[p]))
        .collect();
    renderings.iter().map(|_| keep.clone()).collect()
}

/// Multi-token decoupled label loss: per kept token position, the true
/// label's tokens are scored against 1 in its own rendering and every other
/// label's tokens against 0 in theirs. Positions where all labels share a
/// token contribute nothing.
pub fn decoupled_label_loss_multi<S: Scalar>(
    renderings: &[LabelRendering<S>],
    true_idx: usize,
) -> Result<S, ObjectiveError> {
    Ok(decoupled_label_loss_multi_grad(renderings, true_idx)?.0)
}

/// Loss and per-(label, position) logit gradients for
/// [`decoupled_label_loss_multi`]. Gradient rows align with each
/// rendering's logit rows; filtered positions get zero rows.
pub fn decoupled_label_loss_multi_grad<S: Scalar>(
    renderings: &[LabelRendering<S>],
    true_idx: usize,
) -> Result<(S, Vec<Vec<Vec<S>>>), ObjectiveError> {
    check_renderings(renderings, true_idx)?;
    let kept = kept_positions(renderings);
    if kept.iter().any(|k| k.is_empty()) {
        return Err(ObjectiveError::LabelsIndistinguishable);
    }

    let mut loss = 0.0;
    let mut grads: Vec<Vec<Vec<S>>> = Vec::with_capacity(renderings.len());
    for (i, rendering) in renderings.iter().enumerate() {
        let mut label_grads: Vec<Vec<S>> =
            rendering.logits.iter().map(|row| vec![S::zero(); row.len()]).collect();
        for &p in &kept[i] {
            let row = &rendering.logits[p];
            let tok = rendering.tokens[p];
            let ti = tok as usize;
            let probs = softmax_f64(row);
            let q = *probs.get(ti).ok_or(ObjectiveError::TokenOutOfRange(tok, row.len()))?;
            let factor = if i == true_idx {
                loss += bce_pos(q);
                bce_pos_factor(q)
            } else {
                loss += bce_neg(q);
                bce_neg_factor(q)
            };
            label_grads[p] = factors_to_grad(&probs, &[(ti, factor)]);
        }
        grads.push(label_grads);
    }
    Ok((S::from_f64_lossy(loss), grads))
}

/// Label-conditioned masked-token loss. `per_label_logits[y][p]` is the
/// vocabulary logit row at masked position `p` when the input carries label
/// `y`'s verbalization; `originals[p]` is the token that was masked out.
/// Under the true label the original token is scored against 1; under every
/// other label against 0. `positives_only` drops the incorrect-label terms.
pub fn label_conditioned_mlm_loss<S: Scalar>(
    per_label_logits: &[Vec<Vec<S>>],
    originals: &[u32],
    true_idx: usize,
    positives_only: bool,
) -> Result<S, ObjectiveError> {
    Ok(label_conditioned_mlm_loss_grad(per_label_logits, originals, true_idx, positives_only)?.0)
}

/// Loss and per-(label, position) logit gradients for
/// [`label_conditioned_mlm_loss`].
pub fn label_conditioned_mlm_loss_grad<S: Scalar>(
    per_label_logits: &[Vec<Vec<S>>],
    originals: &[u32],
    true_idx: usize,
    positives_only: bool,
) -> Result<(S, Vec<Vec<Vec<S>>>), ObjectiveError> {
    if originals.is_empty() {
        return Err(ObjectiveError::EmptyPlan);
    }
    if per_label_logits.is_empty() {
        return Err(ObjectiveError::EmptyCandidates);
    }
    if true_idx >= per_label_logits.len() {
        return Err(ObjectiveError::BadTrueLabel {
            index: true_idx,
            count: per_label_logits.len(),
        });
    }
    for (i, rows) in per_label_logits.iter().enumerate() {
        if rows.len() != originals.len() {
            return Err(ObjectiveError::MismatchedRendering {
                label: i,
                logits: rows.len(),
                tokens: originals.len(),
            });
        }
    }

    let mut loss = 0.0;
    let mut grads: Vec<Vec<Vec<S>>> = Vec::with_capacity(per_label_logits.len());
    for (i, rows) in per_label_logits.iter().enumerate() {
        let positive = i == true_idx;
        if !positive && positives_only {
            grads.push(rows.iter().map(|row| vec![S::zero(); row.len()]).collect());
            continue;
        }
        let mut label_grads = Vec::with_capacity(rows.len());
        for (row, &orig) in rows.iter().zip(originals) {
            let ti = orig as usize;
            let probs = softmax_f64(row);
            let q = *probs.get(ti).ok_or(ObjectiveError::TokenOutOfRange(orig, row.len()))?;
            let factor = if positive {
                loss += bce_pos(q);
                bce_pos_factor(q)
            } else {
                loss += bce_neg(q);
                bce_neg_factor(q)
            };
            label_grads.push(factors_to_grad(&probs, &[(ti, factor)]));
        }
        grads.push(label_grads);
    }
    Ok((S::from_f64_lossy(loss), grads))
}

/// Binary cross-entropy over per-label binary logits: target 1 for the true
/// label's pass, 0 for every other, summed.
pub fn rtd_loss<S: Scalar>(scores: &[S], true_idx: usize) -> Result<S, ObjectiveError> {
    Ok(rtd_loss_grad(scores, true_idx)?.0)
}

/// Loss and per-score gradient for [`rtd_loss`].
pub fn rtd_loss_grad<S: Scalar>(
    scores: &[S],
    true_idx: usize,
) -> Result<(S, Vec<S>), ObjectiveError> {
    if scores.is_empty() {
        return Err(ObjectiveError::EmptyCandidates);
    }
    if true_idx >= scores.len() {
        return Err(ObjectiveError::BadTrueLabel { index: true_idx, count: scores.len() });
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(scores.len());
    for (i, s) in scores.iter().enumerate() {
        let x = s.widen();
        let sigma = 1.0 / (1.0 + (-x).exp());
        if i == true_idx {
            loss += softplus(-x); // -ln(sigma)
            grad.push(S::from_f64_lossy(sigma - 1.0));
        } else {
            loss += softplus(x); // -ln(1 - sigma)
            grad.push(S::from_f64_lossy(sigma));
        }
    }
    Ok((S::from_f64_lossy(loss), grad))
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Argmax over per-label scores, ties broken by the lowest label index.
pub fn predict_label<S: Scalar>(scores: &[S]) -> Option<usize> {
    let mut best: Option<(usize, S)> = None;
    for (i, &s) in scores.iter().enumerate() {
        match best {
            Some((_, b)) if s <= b => {}
            _ => best = Some((i, s)),
        }
    }
    best.map(|(i, _)| i)
}

/// Full-vocabulary probability of each single-token candidate.
pub fn label_probs_single<S: Scalar>(
    logits: &[S],
    candidates: &[u32],
) -> Result<Vec<S>, ObjectiveError> {
    let probs = softmax_f64(logits);
    candidates
        .iter()
        .map(|&tok| {
            probs
                .get(tok as usize)
                .map(|&p| S::from_f64_lossy(clamp(p)))
                .ok_or(ObjectiveError::TokenOutOfRange(tok, logits.len()))
        })
        .collect()
}

/// Mean log-probability of a label's tokens across its rendering's mask
/// positions, the score used to rank multi-token labels.
pub fn mean_log_prob<S: Scalar>(
    logit_rows: &[Vec<S>],
    tokens: &[u32],
) -> Result<S, ObjectiveError> {
    if logit_rows.len() != tokens.len() || tokens.is_empty() {
        return Err(ObjectiveError::MismatchedRendering {
            label: 0,
            logits: logit_rows.len(),
            tokens: tokens.len(),
        });
    }
    let mut sum = 0.0;
    for (row, &tok) in logit_rows.iter().zip(tokens) {
        let probs = softmax_f64(row);
        let q = *probs
            .get(tok as usize)
            .ok_or(ObjectiveError::TokenOutOfRange(tok, row.len()))?;
        sum += clamp(q).ln();
    }
    Ok(S::from_f64_lossy(sum / tokens.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn pet_equal_logits_gives_ln2() {
        let logits = vec![0.5f64; 6];
        let loss = pet_ce_loss(&logits, &[2, 4], 0).unwrap();
        assert_relative_eq!(loss, LN2, epsilon = 1e-12);
    }

    #[test]
    fn pet_two_label_softmax_oracle() {
        // Labels at logits (2.0, 0.0): loss = -ln(e^2 / (e^2 + 1)) = ln(1 + e^-2).
        let logits = vec![2.0f64, 0.0, -1.0, 3.0];
        let loss = pet_ce_loss(&logits, &[0, 1], 0).unwrap();
        let oracle = (1.0 + (-2.0f64).exp()).ln();
        assert_relative_eq!(loss, oracle, epsilon = 1e-12);
        assert_relative_eq!(loss, 0.1269, epsilon = 5e-4);
    }

    #[test]
    fn pet_gradient_is_zero_on_non_label_logits() {
        let logits = vec![0.3f64, -0.2, 1.4, 0.9, -2.0];
        let (_, grad) = pet_ce_loss_grad(&logits, &[1, 3], 0).unwrap();
        assert_eq!(grad[0], 0.0);
        assert_eq!(grad[2], 0.0);
        assert_eq!(grad[4], 0.0);
        assert!(grad[1] != 0.0 && grad[3] != 0.0);
    }

    #[test]
    fn pet_rejects_duplicate_candidates() {
        let logits = vec![0.0f64; 4];
        assert!(matches!(
            pet_ce_loss(&logits, &[1, 1], 0),
            Err(ObjectiveError::DuplicateCandidateToken(1))
        ));
    }

    #[test]
    fn vocab_prob_uniform_and_oracle() {
        let logits = vec![1.0f64; 4];
        assert_relative_eq!(vocab_prob(&logits, 2).unwrap(), 0.25, epsilon = 1e-12);

        // logits [2,0,0,0], token 0 -> e^2/(e^2+3).
        let logits = vec![2.0f64, 0.0, 0.0, 0.0];
        let oracle = 2f64.exp() / (2f64.exp() + 3.0);
        assert_relative_eq!(vocab_prob(&logits, 0).unwrap(), oracle, epsilon = 1e-12);
        assert_relative_eq!(vocab_prob(&logits, 0).unwrap(), 0.7112, epsilon = 5e-4);

        let total: f64 = (0..4).map(|t| vocab_prob(&logits, t).unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn decoupled_two_token_vocab_is_two_ln2() {
        let logits = vec![0.0f64, 0.0];
        let loss = decoupled_label_loss(&logits, &[0, 1], 0).unwrap();
        assert_relative_eq!(loss, 2.0 * LN2, epsilon = 1e-9);
    }

    #[test]
    fn decoupled_matches_direct_arithmetic_oracle() {
        // |V|=4, logits [2,0,0,0], labels {0, 1}, true = 0.
        let logits = vec![2.0f64, 0.0, 0.0, 0.0];
        let z = 2f64.exp() + 3.0;
        let q0 = 2f64.exp() / z;
        let q1 = 1.0 / z;
        let oracle = -q0.ln() - (1.0 - q1).ln();
        let loss = decoupled_label_loss(&logits, &[0, 1], 0).unwrap();
        assert_relative_eq!(loss, oracle, epsilon = 1e-12);
        assert_relative_eq!(loss, 0.4420, epsilon = 5e-4);
    }

    #[test]
    fn decoupled_gradient_touches_non_label_logits() {
        let logits = vec![2.0f64, 0.0, 0.0, 0.0];
        let (_, grad) = decoupled_label_loss_grad(&logits, &[0, 1], 0).unwrap();
        assert!(grad[2].abs() > 1e-6, "non-label gradient should be nonzero, got {grad:?}");
        // Finite-difference confirmation at the same point.
        let h = 1e-6;
        let mut up = logits.clone();
        up[2] += h;
        let mut down = logits.clone();
        down[2] -= h;
        let fd = (decoupled_label_loss::<f64>(&up, &[0, 1], 0).unwrap()
            - decoupled_label_loss::<f64>(&down, &[0, 1], 0).unwrap())
            / (2.0 * h);
        assert_relative_eq!(grad[2], fd, epsilon = 1e-5);
    }

    #[test]
    fn multi_token_filters_shared_position() {
        // Labels "new york" vs "new jersey": position 0 filtered, position 1
        // contributes one positive and one negative term.
        let ny = LabelRendering {
            tokens: vec![10, 11],
            logits: vec![vec![0.1f64; 16], vec![0.2; 16]],
        };
        let nj = LabelRendering {
            tokens: vec![10, 12],
            logits: vec![vec![0.3; 16], vec![0.4; 16]],
        };
        let loss = decoupled_label_loss_multi(&[ny.clone(), nj.clone()], 0).unwrap();
        // Oracle: only position 1 contributes.
        let q_pos = vocab_prob::<f64>(&ny.logits[1], 11).unwrap();
        let q_neg = vocab_prob::<f64>(&nj.logits[1], 12).unwrap();
        let oracle = -q_pos.ln() - (1.0 - q_neg).ln();
        assert_relative_eq!(loss, oracle, epsilon = 1e-12);
        // The filtered position gets a zero gradient row.
        let (_, grads) = decoupled_label_loss_multi_grad(&[ny, nj], 0).unwrap();
        assert!(grads[0][0].iter().all(|&g| g == 0.0));
        assert!(grads[1][0].iter().all(|&g| g == 0.0));
        assert!(grads[0][1].iter().any(|&g| g != 0.0));
    }

    #[test]
    fn multi_token_differing_lengths_keep_all_positions() {
        let a = LabelRendering { tokens: vec![3, 4], logits: vec![vec![0.1f64; 8]; 2] };
        let b = LabelRendering { tokens: vec![3, 4, 5], logits: vec![vec![0.2; 8]; 3] };
        let loss = decoupled_label_loss_multi(&[a.clone(), b.clone()], 0).unwrap();
        let mut oracle = 0.0;
        for (row, tok) in a.logits.iter().zip(&a.tokens) {
            oracle -= vocab_prob::<f64>(row, *tok).unwrap().ln();
        }
        for (row, tok) in b.logits.iter().zip(&b.tokens) {
            oracle -= (1.0 - vocab_prob::<f64>(row, *tok).unwrap()).ln();
        }
        assert_relative_eq!(loss, oracle, epsilon = 1e-12);
    }

    #[test]
    fn multi_token_hand_summed_oracle() {
        // 2 labels x 2 tokens with distinct synthetic logits.
        let rows_a = vec![
            vec![0.5f64, -0.3, 0.8, 0.0, 1.1],
            vec![-0.2, 0.9, 0.4, -1.0, 0.3],
        ];
        let rows_b = vec![
            vec![1.5, 0.3, -0.8, 0.2, -0.1],
            vec![0.0, -0.9, 1.4, 1.0, -0.3],
        ];
        let a = LabelRendering { tokens: vec![0, 2], logits: rows_a.clone() };
        let b = LabelRendering { tokens: vec![1, 4], logits: rows_b.clone() };
        let loss = decoupled_label_loss_multi(&[a, b], 1).unwrap();
        let mut oracle = 0.0;
        oracle -= (1.0 - vocab_prob::<f64>(&rows_a[0], 0).unwrap()).ln();
        oracle -= (1.0 - vocab_prob::<f64>(&rows_a[1], 2).unwrap()).ln();
        oracle -= vocab_prob::<f64>(&rows_b[0], 1).unwrap().ln();
        oracle -= vocab_prob::<f64>(&rows_b[1], 4).unwrap().ln();
        assert_relative_eq!(loss, oracle, epsilon = 1e-12);
    }

    #[test]
    fn multi_token_identical_labels_error() {
        let a = LabelRendering { tokens: vec![5, 6], logits: vec![vec![0.0f64; 8]; 2] };
        let b = LabelRendering { tokens: vec![5, 6], logits: vec![vec![0.1; 8]; 2] };
        assert!(matches!(
            decoupled_label_loss_multi(&[a, b], 0),
            Err(ObjectiveError::LabelsIndistinguishable)
        ));
    }

    #[test]
    fn label_conditioned_uniform_oracle() {
        // Single masked position, 2 labels, uniform logits, |V|=4:
        // -ln(0.25) - ln(0.75).
        let rows = vec![vec![vec![0.0f64; 4]], vec![vec![0.0f64; 4]]];
        let loss = label_conditioned_mlm_loss(&rows, &[3], 0, false).unwrap();
        let oracle = -(0.25f64).ln() - (0.75f64).ln();
        assert_relative_eq!(loss, oracle, epsilon = 1e-12);
        assert_relative_eq!(loss, 1.6740, epsilon = 5e-4);
    }

    #[test]
    fn label_conditioned_single_label_has_positive_terms_only() {
        let rows = vec![vec![vec![0.0f64; 4]]];
        let loss = label_conditioned_mlm_loss(&rows, &[3], 0, false).unwrap();
        assert_relative_eq!(loss, -(0.25f64).ln(), epsilon = 1e-12);
    }

    #[test]
    fn label_conditioned_positives_only_drops_negative_terms() {
        let rows = vec![vec![vec![0.0f64; 4]], vec![vec![0.0f64; 4]]];
        let full = label_conditioned_mlm_loss(&rows, &[3], 0, false).unwrap();
        let pos = label_conditioned_mlm_loss(&rows, &[3], 0, true).unwrap();
        assert_relative_eq!(pos, -(0.25f64).ln(), epsilon = 1e-12);
        assert!(pos < full);
    }

    #[test]
    fn label_conditioned_is_additive_over_positions() {
        let row_a = vec![0.7f64, -0.1, 0.2, 0.9];
        let row_b = vec![-0.5, 0.3, 1.2, 0.0];
        let both = vec![vec![row_a.clone(), row_b.clone()], vec![row_b.clone(), row_a.clone()]];
        let first = vec![vec![row_a.clone()], vec![row_b.clone()]];
        let second = vec![vec![row_b], vec![row_a]];
        let joint = label_conditioned_mlm_loss(&both, &[1, 2], 0, false).unwrap();
        let split = label_conditioned_mlm_loss(&first, &[1], 0, false).unwrap()
            + label_conditioned_mlm_loss(&second, &[2], 0, false).unwrap();
        assert_relative_eq!(joint, split, epsilon = 1e-12);
    }

    #[test]
    fn label_conditioned_empty_plan_is_error() {
        let rows: Vec<Vec<Vec<f64>>> = vec![vec![], vec![]];
        assert!(matches!(
            label_conditioned_mlm_loss(&rows, &[], 0, false),
            Err(ObjectiveError::EmptyPlan)
        ));
    }

    #[test]
    fn adapet_sum_matches_component_oracles() {
        let b = adapet_loss(0.4420f64, 1.6740);
        assert_relative_eq!(b.total, 2.1160, epsilon = 1e-9);
        // Conditioning disabled: total reduces to the label loss alone.
        let no_lc = adapet_loss(0.4420f64, 0.0);
        assert_relative_eq!(no_lc.total, no_lc.l_d, epsilon = 1e-12);
    }

    #[test]
    fn rtd_symmetric_and_sigmoid_oracle() {
        let loss = rtd_loss(&[0.0f64, 0.0], 0).unwrap();
        assert_relative_eq!(loss, 2.0 * LN2, epsilon = 1e-12);

        // logits (+4, -4), true = first: -ln(sigma(4)) - ln(1 - sigma(-4)).
        let s4 = 1.0 / (1.0 + (-4.0f64).exp());
        let sm4 = 1.0 / (1.0 + 4.0f64.exp());
        let oracle = -s4.ln() - (1.0 - sm4).ln();
        let loss = rtd_loss(&[4.0f64, -4.0], 0).unwrap();
        assert_relative_eq!(loss, oracle, epsilon = 1e-12);
        assert_relative_eq!(loss, 0.0363, epsilon = 5e-4);
    }

    #[test]
    fn predict_label_argmax_and_ties() {
        assert_eq!(predict_label(&[0.7f64, 0.1]), Some(0));
        assert_eq!(predict_label(&[0.1f64, 0.7]), Some(1));
        assert_eq!(predict_label(&[0.4f64, 0.4, 0.2]), Some(0));
        assert_eq!(predict_label::<f64>(&[]), None);
    }

    #[test]
    fn predict_label_is_shift_invariant() {
        let logits = vec![0.3f64, 1.9, -0.7, 0.2];
        let shifted: Vec<f64> = logits.iter().map(|&x| x + 123.0).collect();
        let cands = [0u32, 1, 3];
        let a = predict_label(&label_probs_single(&logits, &cands).unwrap());
        let b = predict_label(&label_probs_single(&shifted, &cands).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn mean_log_prob_matches_exhaustive_oracle() {
        let rows = vec![vec![0.4f64, -0.2, 0.8], vec![1.0, 0.0, -0.5]];
        let tokens = [2u32, 0];
        let got = mean_log_prob(&rows, &tokens).unwrap();
        let oracle = (vocab_prob::<f64>(&rows[0], 2).unwrap().ln()
            + vocab_prob::<f64>(&rows[1], 0).unwrap().ln())
            / 2.0;
        assert_relative_eq!(got, oracle, epsilon = 1e-12);
    }

    #[test]
    fn losses_stay_finite_under_extreme_logits() {
        let logits = vec![500.0f64, -500.0, 0.0, 0.0];
        for t in 0..2 {
            let l = decoupled_label_loss(&logits, &[0, 1], t).unwrap();
            assert!(l.is_finite() && l >= 0.0);
        }
        let l = pet_ce_loss(&logits, &[0, 1], 1).unwrap();
        assert!(l.is_finite() && l >= 0.0);
    }
}
