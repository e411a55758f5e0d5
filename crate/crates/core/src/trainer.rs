//! The fine-tuning loop: batch assembly with replacement, per-objective
//! loss/gradient construction, AdamW updates on a warmup-decay schedule,
//! and dev-metric checkpoint selection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{self, EvalError, ModelSource};
use crate::masking::{self, MaskError, MaskKind, MaskScheme};
use crate::metrics::MetricKind;
use crate::model::{
    backward, backward_from_hidden, forward, Mat, ModelConfig, ModelError, Params, RtdHead,
};
use crate::objectives::{self, LabelRendering, ObjectiveError};
use crate::optim::{adamw_step, lr_at, AdamState, OptimConfig, OptimError};
use crate::pvp::{render, render_label_conditioned, Pvp, PvpError};
use crate::scalar::Scalar;
use crate::task::TaskExample;
use crate::tokenizer::Vocabulary;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no training examples")]
    NoTrainExamples,
    #[error("no dev examples")]
    NoDevExamples,
    #[error("training example lacks a label")]
    UnlabeledExample,
    #[error("objective {0:?} requires single-token verbalizations for this task")]
    SingleTokenOnly(&'static str),
    #[error("no pattern-verbalizer pairs supplied")]
    NoPvps,
    #[error("invalid train config: {0}")]
    BadConfig(String),
    #[error("non-finite loss at batch {0}")]
    NonFiniteLoss(usize),
    #[error(transparent)]
    Pvp(#[from] PvpError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Which loss drives fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Cross-entropy over label-token logits only.
    Pet,
    /// Decoupled label loss plus label-conditioned masking loss.
    Adapet,
    /// Decoupled label loss alone.
    AdapetNoLc,
    /// Label conditioning restricted to the correct label's pass.
    AdapetLcPosOnly,
    /// Replaced-token detection with a binary head.
    Rtd,
}

impl Objective {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pet" => Some(Self::Pet),
            "adapet" => Some(Self::Adapet),
            "adapet_no_lc" => Some(Self::AdapetNoLc),
            "adapet_lc_pos_only" => Some(Self::AdapetLcPosOnly),
            "rtd" => Some(Self::Rtd),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Pet => "pet",
            Self::Adapet => "adapet",
            Self::AdapetNoLc => "adapet_no_lc",
            Self::AdapetLcPosOnly => "adapet_lc_pos_only",
            Self::Rtd => "rtd",
        }
    }

    fn label_conditioning(self) -> bool {
        matches!(self, Self::Adapet | Self::AdapetLcPosOnly)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub objective: Objective,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub total_batches: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub mask: MaskScheme,
    /// Sample a pattern uniformly per batch instead of training one.
    pub mtmp: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Adapet,
            lr: 1e-5,
            weight_decay: 1e-2,
            warmup_frac: 0.10,
            total_batches: 1000,
            batch_size: 16,
            seed: 42,
            eval_every: 50,
            mask: MaskScheme { kind: MaskKind::Variable, ratio: MaskScheme::DEFAULT_RATIO },
            mtmp: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0) {
            return Err(TrainError::BadConfig(format!(
                "warmup_frac {} out of (0, 1)",
                self.warmup_frac
            )));
        }
        if self.total_batches < self.eval_every || self.eval_every == 0 {
            return Err(TrainError::BadConfig(format!(
                "need 1 <= eval_every ({}) <= total_batches ({})",
                self.eval_every, self.total_batches
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be >= 1".into()));
        }
        if self.lr <= 0.0 {
            return Err(TrainError::BadConfig(format!("lr {} must be positive", self.lr)));
        }
        Ok(())
    }

    pub fn optim(&self) -> OptimConfig {
        OptimConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            warmup_frac: self.warmup_frac,
            total_steps: self.total_batches,
            ..OptimConfig::default()
        }
    }
}

/// One dev evaluation during training.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalPoint {
    pub batch: usize,
    pub metric: String,
    pub value: f64,
    pub l_d: f64,
    pub l_m: f64,
    pub total: f64,
}

/// The run's evaluation trace and selected checkpoint.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunHistory {
    pub evals: Vec<EvalPoint>,
    pub best_batch: usize,
    pub best_value: f64,
}

impl RunHistory {
    /// One JSON record per evaluation, in batch order.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for point in &self.evals {
            out.push_str(&serde_json::to_string(point).expect("eval point serializes"));
            out.push('\n');
        }
        out
    }
}

pub struct TrainOutcome<S> {
    pub best: Params<S>,
    pub best_head: Option<RtdHead<S>>,
    pub history: RunHistory,
}

/// Adam moments for the small binary head.
struct HeadAdam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl HeadAdam {
    fn new(dim: usize) -> Self {
        Self { m: vec![0.0; dim + 1], v: vec![0.0; dim + 1], step: 0 }
    }

    fn step<S: Scalar>(
        &mut self,
        head: &mut RtdHead<S>,
        grad_w: &[f64],
        grad_b: f64,
        lr: f64,
        opt: &OptimConfig,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let (bc1, bc2) = (1.0 - opt.beta1.powi(t), 1.0 - opt.beta2.powi(t));
        let dim = grad_w.len();
        for i in 0..=dim {
            let (g, theta) = if i < dim {
                (grad_w[i], head.w[i].widen())
            } else {
                (grad_b, head.b.widen())
            };
            self.m[i] = opt.beta1 * self.m[i] + (1.0 - opt.beta1) * g;
            self.v[i] = opt.beta2 * self.v[i] + (1.0 - opt.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            let updated =
                theta - lr * m_hat / (v_hat.sqrt() + opt.eps) - lr * opt.weight_decay * theta;
            if i < dim {
                head.w[i] = S::from_f64_lossy(updated);
            } else {
                head.b = S::from_f64_lossy(updated);
            }
        }
    }
}

/// Fine-tunes a freshly initialized model, returning the dev-selected
/// parameters and the evaluation history. Deterministic given the configs,
/// the data, and the pattern pool.
pub fn train<S: Scalar>(
    model_config: &ModelConfig,
    config: &TrainConfig,
    pvps: &[Pvp],
    vocab: &Vocabulary,
    train_examples: &[TaskExample],
    dev_examples: &[TaskExample],
    metric: MetricKind,
) -> Result<TrainOutcome<S>, TrainError> {
    config.validate()?;
    if train_examples.is_empty() {
        return Err(TrainError::NoTrainExamples);
    }
    if dev_examples.is_empty() {
        return Err(TrainError::NoDevExamples);
    }
    if pvps.is_empty() {
        return Err(TrainError::NoPvps);
    }

    let max_len = model_config.max_len;
    let opt = config.optim();
    let mut params = Params::<S>::init(model_config)?;
    let mut head = (config.objective == Objective::Rtd)
        .then(|| RtdHead::<S>::init(model_config));
    let mut adam = AdamState::new(model_config)?;
    let mut head_adam = HeadAdam::new(model_config.d_model);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let doc_scores = (config.mask.kind == MaskKind::Tfidf && config.objective.label_conditioning())
        .then(|| masking::tfidf_scores(train_examples));

    let mut history = RunHistory::default();
    let mut best: Option<(usize, f64, Params<S>, Option<RtdHead<S>>)> = None;
    let mut window = (0.0f64, 0.0f64, 0usize);

    for batch_idx in 1..=config.total_batches {
        let pvp = if config.mtmp {
            &pvps[rng.random_range(0..pvps.len())]
        } else {
            &pvps[0]
        };

        let mut grads = Params::<S>::zeros(model_config)?;
        let mut head_grad_w = vec![0.0f64; model_config.d_model];
        let mut head_grad_b = 0.0f64;
        let mut batch_l_d = 0.0f64;
        let mut batch_l_m = 0.0f64;

        for _ in 0..config.batch_size {
            let ex_idx = rng.random_range(0..train_examples.len());
            let example = &train_examples[ex_idx];
            let true_idx = example.label_index().ok_or(TrainError::UnlabeledExample)?;

            match config.objective {
                Objective::Pet => {
                    batch_l_d +=
                        pet_item(&params, &mut grads, pvp, vocab, example, true_idx, max_len)?;
                }
                Objective::Adapet | Objective::AdapetNoLc | Objective::AdapetLcPosOnly => {
                    batch_l_d += decoupled_item(
                        &params, &mut grads, pvp, vocab, example, true_idx, max_len,
                    )?;
                    if config.objective.label_conditioning() {
                        batch_l_m += lc_item(
                            &params,
                            &mut grads,
                            pvp,
                            vocab,
                            example,
                            true_idx,
                            max_len,
                            &config.mask,
                            config.objective == Objective::AdapetLcPosOnly,
                            doc_scores.as_ref().map(|s| &s[ex_idx]),
                            &mut rng,
                        )?;
                    }
                }
                Objective::Rtd => {
                    let h = head.as_mut().expect("rtd head initialized");
                    batch_l_d += rtd_item(
                        &params,
                        &mut grads,
                        h,
                        &mut head_grad_w,
                        &mut head_grad_b,
                        pvp,
                        vocab,
                        example,
                        true_idx,
                        max_len,
                    )?;
                }
            }
        }

        let inv = 1.0 / config.batch_size as f64;
        grads.scale(S::from_f64_lossy(inv));
        batch_l_d *= inv;
        batch_l_m *= inv;
        if !(batch_l_d + batch_l_m).is_finite() {
            return Err(TrainError::NonFiniteLoss(batch_idx));
        }

        let lr = lr_at(batch_idx, &opt);
        adamw_step(&mut params, &grads, &mut adam, lr, &opt)?;
        if let Some(h) = head.as_mut() {
            for g in head_grad_w.iter_mut() {
                *g *= inv;
            }
            head_adam.step(h, &head_grad_w, head_grad_b * inv, lr, &opt);
        }

        window.0 += batch_l_d;
        window.1 += batch_l_m;
        window.2 += 1;

        if batch_idx % config.eval_every == 0 {
            let report = match (&config.objective, head.as_ref()) {
                (Objective::Rtd, Some(h)) => {
                    let mut preds = Vec::with_capacity(dev_examples.len());
                    for ex in dev_examples {
                        preds.push(eval::predict_rtd(&params, h, &pvps[0], vocab, ex, max_len)?);
                    }
                    eval::report_from_predictions(&preds, dev_examples, metric)?
                }
                _ => {
                    let mut source = ModelSource { params: &params };
                    eval::evaluate(&mut source, &pvps[0], vocab, dev_examples, max_len, metric)?
                }
            };
            let value = report.primary(metric);
            let n = window.2.max(1) as f64;
            history.evals.push(EvalPoint {
                batch: batch_idx,
                metric: metric.name().to_string(),
                value,
                l_d: window.0 / n,
                l_m: window.1 / n,
                total: (window.0 + window.1) / n,
            });
            window = (0.0, 0.0, 0);
            let improved = best.as_ref().map_or(true, |(_, b, _, _)| value > *b);
            if improved {
                best = Some((batch_idx, value, params.clone(), head.clone()));
            }
        }
    }

    let (best_batch, best_value, best_params, best_head) =
        best.expect("eval_every <= total_batches guarantees at least one eval");
    history.best_batch = best_batch;
    history.best_value = best_value;
    Ok(TrainOutcome { best: best_params, best_head, history })
}

fn pet_item<S: Scalar>(
    params: &Params<S>,
    grads: &mut Params<S>,
    pvp: &Pvp,
    vocab: &Vocabulary,
    example: &TaskExample,
    true_idx: usize,
    max_len: usize,
) -> Result<f64, TrainError> {
    let labels = example.label_set();
    let instance = render(pvp, vocab, example, &labels[0], max_len)?;
    let candidates = instance
        .single_token_candidates()
        .ok_or(TrainError::SingleTokenOnly("pet"))?;
    let fwd = forward(params, &instance.ids)?;
    let pos = instance.mask_positions[0];
    let (loss, d_row) = objectives::pet_ce_loss_grad(fwd.logits.row(pos), &candidates, true_idx)?;
    let mut d_logits = Mat::zeros(fwd.logits.rows, fwd.logits.cols);
    d_logits.row_mut(pos).copy_from_slice(&d_row);
    grads.add_assign(&backward(params, &fwd, &d_logits)?);
    Ok(loss.widen())
}

fn decoupled_item<S: Scalar>(
    params: &Params<S>,
    grads: &mut Params<S>,
    pvp: &Pvp,
    vocab: &Vocabulary,
    example: &TaskExample,
    true_idx: usize,
    max_len: usize,
) -> Result<f64, TrainError> {
    let labels = example.label_set();
    let probe = render(pvp, vocab, example, &labels[0], max_len)?;

    if let Some(candidates) = probe.single_token_candidates() {
        let fwd = forward(params, &probe.ids)?;
        let pos = probe.mask_positions[0];
        let (loss, d_row) =
            objectives::decoupled_label_loss_grad(fwd.logits.row(pos), &candidates, true_idx)?;
        let mut d_logits = Mat::zeros(fwd.logits.rows, fwd.logits.cols);
        d_logits.row_mut(pos).copy_from_slice(&d_row);
        grads.add_assign(&backward(params, &fwd, &d_logits)?);
        return Ok(loss.widen());
    }

    // Multi-token: one rendering and one forward pass per label.
    let mut fwds = Vec::with_capacity(labels.len());
    let mut instances = Vec::with_capacity(labels.len());
    let mut renderings = Vec::with_capacity(labels.len());
    for label in &labels {
        let instance = render(pvp, vocab, example, label, max_len)?;
        let fwd = forward(params, &instance.ids)?;
        let tokens = instance
            .candidates
            .iter()
            .find(|c| &c.label == label)
            .expect("rendered label is a candidate")
            .tokens
            .clone();
        let logits: Vec<Vec<S>> =
            instance.mask_positions.iter().map(|&p| fwd.logits.row(p).to_vec()).collect();
        renderings.push(LabelRendering { tokens, logits });
        fwds.push(fwd);
        instances.push(instance);
    }
    let (loss, d_rows) = objectives::decoupled_label_loss_multi_grad(&renderings, true_idx)?;
    for ((instance, fwd), rows) in instances.iter().zip(&fwds).zip(&d_rows) {
        let mut d_logits = Mat::zeros(fwd.logits.rows, fwd.logits.cols);
        for (&pos, row) in instance.mask_positions.iter().zip(rows) {
            d_logits.row_mut(pos).copy_from_slice(row);
        }
        grads.add_assign(&backward(params, fwd, &d_logits)?);
    }
    Ok(loss.widen())
}

#[allow(clippy::too_many_arguments)]
fn lc_item<S: Scalar, R: Rng>(
    params: &Params<S>,
    grads: &mut Params<S>,
    pvp: &Pvp,
    vocab: &Vocabulary,
    example: &TaskExample,
    true_idx: usize,
    max_len: usize,
    scheme: &MaskScheme,
    positives_only: bool,
    doc_scores: Option<&std::collections::HashMap<String, f64>>,
    rng: &mut R,
) -> Result<f64, TrainError> {
    let labels = example.label_set();
    // Positive-only conditioning needs just the correct label's pass.
    let cond: Vec<usize> =
        if positives_only { vec![true_idx] } else { (0..labels.len()).collect() };
    let effective_true = if positives_only { 0 } else { true_idx };

    let mut renderings = Vec::with_capacity(cond.len());
    for &li in &cond {
        renderings.push(render_label_conditioned(pvp, vocab, example, &labels[li], max_len)?);
    }
    let plans = match doc_scores {
        Some(scores) => {
            masking::sample_shared_mask_plans_tfidf(&renderings, scheme, scores, vocab, rng)?
        }
        None => masking::sample_shared_mask_plans(&renderings, scheme, rng)?,
    };

    let mut fwds = Vec::with_capacity(cond.len());
    let mut per_label_rows: Vec<Vec<Vec<S>>> = Vec::with_capacity(cond.len());
    for (rendering, plan) in renderings.iter().zip(&plans) {
        let mut ids = rendering.ids.clone();
        plan.apply(&mut ids);
        let fwd = forward(params, &ids)?;
        per_label_rows
            .push(plan.positions.iter().map(|&p| fwd.logits.row(p).to_vec()).collect());
        fwds.push(fwd);
    }

    let originals = &plans[0].originals;
    let (loss, d_rows) = objectives::label_conditioned_mlm_loss_grad(
        &per_label_rows,
        originals,
        effective_true,
        positives_only,
    )?;
    for ((plan, fwd), rows) in plans.iter().zip(&fwds).zip(&d_rows) {
        let mut d_logits = Mat::zeros(fwd.logits.rows, fwd.logits.cols);
        for (&pos, row) in plan.positions.iter().zip(rows) {
            d_logits.row_mut(pos).copy_from_slice(row);
        }
        grads.add_assign(&backward(params, fwd, &d_logits)?);
    }
    Ok(loss.widen())
}

#[allow(clippy::too_many_arguments)]
fn rtd_item<S: Scalar>(
    params: &Params<S>,
    grads: &mut Params<S>,
    head: &RtdHead<S>,
    head_grad_w: &mut [f64],
    head_grad_b: &mut f64,
    pvp: &Pvp,
    vocab: &Vocabulary,
    example: &TaskExample,
    true_idx: usize,
    max_len: usize,
) -> Result<f64, TrainError> {
    let labels = example.label_set();
    let mut fwds = Vec::with_capacity(labels.len());
    let mut positions = Vec::with_capacity(labels.len());
    let mut scores = Vec::with_capacity(labels.len());
    for label in &labels {
        let instance = render_label_conditioned(pvp, vocab, example, label, max_len)?;
        let fwd = forward(params, &instance.ids)?;
        let mut sum = 0.0;
        for &pos in &instance.inserted_positions {
            sum += head.score_at(&fwd, pos)?.widen();
        }
        scores.push(S::from_f64_lossy(sum / instance.inserted_positions.len().max(1) as f64));
        positions.push(instance.inserted_positions.clone());
        fwds.push(fwd);
    }
    let (loss, d_scores) = objectives::rtd_loss_grad(&scores, true_idx)?;

    for ((fwd, inserted), &d_score) in fwds.iter().zip(&positions).zip(&d_scores) {
        let ds = d_score.widen();
        let per_pos = ds / inserted.len().max(1) as f64;
        let mut d_hidden = Mat::zeros(fwd.hidden().rows, fwd.hidden().cols);
        for &pos in inserted {
            let hidden_row = fwd.hidden().row(pos);
            for j in 0..head_grad_w.len() {
                d_hidden.row_mut(pos)[j] = S::from_f64_lossy(head.w[j].widen() * per_pos);
                head_grad_w[j] += hidden_row[j].widen() * per_pos;
            }
            *head_grad_b += per_pos;
        }
        grads.add_assign(&backward_from_hidden(params, fwd, &d_hidden)?);
    }
    Ok(loss.widen())
}
