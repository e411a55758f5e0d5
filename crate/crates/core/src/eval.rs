//! Prediction and evaluation: scoring label candidates with a model (or an
//! ensemble), and turning predictions into task metrics.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::metrics::{self, EvalReport, MetricKind, QuestionJudgments};
use crate::model::{forward, Mat, Params, RtdHead};
use crate::objectives::{self, ObjectiveError};
use crate::pvp::{render, render_label_conditioned, Pvp, PvpError};
use crate::scalar::Scalar;
use crate::task::{TaskExample, TaskId};
use crate::tokenizer::Vocabulary;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Pvp(#[from] PvpError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("example has no labels to predict over")]
    NoLabels,
    #[error("example lacks a gold label")]
    MissingGold,
    #[error("ensemble is empty")]
    EmptyEnsemble,
    #[error("ensemble members disagree on model config")]
    MismatchedConfig,
}

/// Anything that maps token ids to per-position vocabulary logits.
pub trait LogitSource<S> {
    fn logits(&mut self, ids: &[u32]) -> Result<Mat<S>, EvalError>;
}

/// A single model.
pub struct ModelSource<'a, S> {
    pub params: &'a Params<S>,
}

impl<'a, S: Scalar> LogitSource<S> for ModelSource<'a, S> {
    fn logits(&mut self, ids: &[u32]) -> Result<Mat<S>, EvalError> {
        Ok(forward(self.params, ids)?.logits)
    }
}

/// Several models sharing one config, scored by averaging their logits.
pub struct EnsembleSource<'a, S> {
    models: Vec<&'a Params<S>>,
}

impl<'a, S: Scalar> EnsembleSource<'a, S> {
    pub fn new(models: Vec<&'a Params<S>>) -> Result<Self, EvalError> {
        let first = models.first().ok_or(EvalError::EmptyEnsemble)?;
        if models.iter().any(|m| m.config != first.config) {
            return Err(EvalError::MismatchedConfig);
        }
        Ok(Self { models })
    }
}

impl<'a, S: Scalar> LogitSource<S> for EnsembleSource<'a, S> {
    fn logits(&mut self, ids: &[u32]) -> Result<Mat<S>, EvalError> {
        ensemble_logits(&self.models, ids)
    }
}

/// Elementwise mean of per-model logits. Accumulates in f64 so that k
/// copies of one model reproduce its logits to well under 1e-6.
pub fn ensemble_logits<S: Scalar>(models: &[&Params<S>], ids: &[u32]) -> Result<Mat<S>, EvalError> {
    let first = models.first().ok_or(EvalError::EmptyEnsemble)?;
    if models.iter().any(|m| m.config != first.config) {
        return Err(EvalError::MismatchedConfig);
    }
    let mut acc: Vec<f64> = Vec::new();
    let mut shape = (0usize, 0usize);
    for params in models {
        let logits = forward(*params, ids)?.logits;
        if acc.is_empty() {
            shape = (logits.rows, logits.cols);
            acc = vec![0.0; logits.data.len()];
        }
        for (a, &v) in acc.iter_mut().zip(&logits.data) {
            *a += v.widen();
        }
    }
    let inv = 1.0 / models.len() as f64;
    Ok(Mat {
        rows: shape.0,
        cols: shape.1,
        data: acc.into_iter().map(|v| S::from_f64_lossy(v * inv)).collect(),
    })
}

/// Predicts a label for one example by cloze scoring.
///
/// Single-token label sets share one rendering and are ranked by
/// full-vocabulary probability at the mask. Multi-token label sets get one
/// rendering per label, ranked by mean per-token log-probability. A
/// single-label set (correct-answer-only ingestion) counts as predicted
/// only when every mask position's vocabulary argmax is the candidate
/// token.
pub fn predict<S: Scalar>(
    source: &mut dyn LogitSource<S>,
    pvp: &Pvp,
    vocab: &Vocabulary,
    example: &TaskExample,
    max_len: usize,
) -> Result<String, EvalError> {
    let labels = example.label_set();
    let first = labels.first().ok_or(EvalError::NoLabels)?;

    let probe = render(pvp, vocab, example, first, max_len)?;
    if labels.len() == 1 {
        let logits = source.logits(&probe.ids)?;
        let tokens = &probe.candidates[0].tokens;
        let hit = probe.mask_positions.iter().zip(tokens).all(|(&pos, &tok)| {
            objectives::predict_label(logits.row(pos)) == Some(tok as usize)
        });
        return Ok(if hit { first.clone() } else { format!("not_{first}") });
    }

    let single_token = probe.candidates.iter().all(|c| c.tokens.len() == 1);
    if single_token {
        let logits = source.logits(&probe.ids)?;
        let row = logits.row(probe.mask_positions[0]);
        let tokens: Vec<u32> = probe.candidates.iter().map(|c| c.tokens[0]).collect();
        let probs = objectives::label_probs_single(row, &tokens)?;
        let idx = objectives::predict_label(&probs).expect("nonempty labels");
        return Ok(labels[idx].clone());
    }

    let mut scores = Vec::with_capacity(labels.len());
    for label in &labels {
        let instance = render(pvp, vocab, example, label, max_len)?;
        let logits = source.logits(&instance.ids)?;
        let rows: Vec<Vec<S>> =
            instance.mask_positions.iter().map(|&p| logits.row(p).to_vec()).collect();
        let tokens = &instance
            .candidates
            .iter()
            .find(|c| &c.label == label)
            .expect("rendered label is a candidate")
            .tokens;
        scores.push(objectives::mean_log_prob(&rows, tokens)?);
    }
    let idx = objectives::predict_label(&scores).expect("nonempty labels");
    Ok(labels[idx].clone())
}

/// Predicts by binary-head scoring: each label is written into the input
/// and the head judges the inserted tokens, one forward pass per label.
pub fn predict_rtd<S: Scalar>(
    params: &Params<S>,
    head: &RtdHead<S>,
    pvp: &Pvp,
    vocab: &Vocabulary,
    example: &TaskExample,
    max_len: usize,
) -> Result<String, EvalError> {
    let labels = example.label_set();
    if labels.is_empty() {
        return Err(EvalError::NoLabels);
    }
    let mut scores = Vec::with_capacity(labels.len());
    for label in &labels {
        let instance = render_label_conditioned(pvp, vocab, example, label, max_len)?;
        let fwd = forward(params, &instance.ids)?;
        let mut sum = 0.0;
        for &pos in &instance.inserted_positions {
            sum += head.score_at(&fwd, pos)?.widen();
        }
        scores.push(S::from_f64_lossy(sum / instance.inserted_positions.len().max(1) as f64));
    }
    let idx = objectives::predict_label(&scores).expect("nonempty labels");
    Ok(labels[idx].clone())
}

/// Scores every example and assembles the task's metric report.
pub fn evaluate<S: Scalar>(
    source: &mut dyn LogitSource<S>,
    pvp: &Pvp,
    vocab: &Vocabulary,
    examples: &[TaskExample],
    max_len: usize,
    kind: MetricKind,
) -> Result<EvalReport, EvalError> {
    let mut preds = Vec::with_capacity(examples.len());
    for example in examples {
        preds.push(predict(source, pvp, vocab, example, max_len)?);
    }
    report_from_predictions(&preds, examples, kind)
}

/// Builds the metric report from already-computed predictions.
pub fn report_from_predictions(
    preds: &[String],
    examples: &[TaskExample],
    kind: MetricKind,
) -> Result<EvalReport, EvalError> {
    let golds: Vec<String> = examples
        .iter()
        .map(|e| e.label.clone().ok_or(EvalError::MissingGold))
        .collect::<Result<_, _>>()?;

    let mut metrics = BTreeMap::new();
    metrics.insert("accuracy".to_string(), metrics::accuracy(preds, &golds));
    let mut n_questions = None;
    match kind {
        MetricKind::Accuracy => {}
        MetricKind::MacroF1 => {
            let labels = examples
                .first()
                .map(|e| e.label_set())
                .unwrap_or_default();
            metrics.insert("macro_f1".to_string(), metrics::macro_f1(preds, &golds, &labels));
        }
        MetricKind::MultiRcF1a => {
            let questions = group_judgments(preds, &golds, examples);
            let (em, f1a) = metrics::multirc_em_f1a(&questions);
            metrics.insert("em".to_string(), em);
            metrics.insert("f1a".to_string(), f1a);
            n_questions = Some(questions.len());
        }
    }
    Ok(EvalReport { metrics, n_examples: examples.len(), n_questions })
}

/// Groups candidate judgments by (passage, question), preserving first-seen
/// question order.
fn group_judgments(
    preds: &[String],
    golds: &[String],
    examples: &[TaskExample],
) -> Vec<QuestionJudgments> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, QuestionJudgments> = BTreeMap::new();
    for ((pred, gold), example) in preds.iter().zip(golds).zip(examples) {
        let key = format!(
            "{}\u{1}{}",
            example.field("passage").unwrap_or(""),
            example.field("question").unwrap_or("")
        );
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        let entry = groups
            .entry(key)
            .or_insert_with(|| QuestionJudgments { preds: vec![], golds: vec![] });
        entry.preds.push(pred == "true");
        entry.golds.push(gold == "true");
    }
    order.into_iter().map(|k| groups.remove(&k).expect("key recorded")).collect()
}

/// The metric kind a task is selected on, honoring an explicit override.
pub fn metric_for(task: TaskId, explicit: Option<MetricKind>) -> MetricKind {
    explicit.unwrap_or_else(|| task.primary_metric())
}
