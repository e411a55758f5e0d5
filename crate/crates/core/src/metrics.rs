//! Evaluation metrics: accuracy, macro-averaged F1, and the exact-match /
//! micro-F1 pair used for multi-answer reading comprehension.

use std::collections::BTreeMap;

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    Accuracy,
    MacroF1,
    MultiRcF1a,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Accuracy => "accuracy",
            MetricKind::MacroF1 => "macro_f1",
            MetricKind::MultiRcF1a => "f1a",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "accuracy" => Some(MetricKind::Accuracy),
            "macro_f1" => Some(MetricKind::MacroF1),
            "f1a" | "multirc" => Some(MetricKind::MultiRcF1a),
            _ => None,
        }
    }
}

/// Flat metric report for a single evaluation pass.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct EvalReport {
    pub metrics: BTreeMap<String, f64>,
    pub n_examples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_questions: Option<usize>,
}

impl EvalReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    /// The headline value used for checkpoint selection.
    pub fn primary(&self, kind: MetricKind) -> f64 {
        self.get(kind.name()).unwrap_or(0.0)
    }
}

/// Fraction of exact matches.
pub fn accuracy(preds: &[String], golds: &[String]) -> f64 {
    assert_eq!(preds.len(), golds.len(), "prediction/gold length mismatch");
    if preds.is_empty() {
        return 0.0;
    }
    let hits = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    hits as f64 / preds.len() as f64
}

/// Unweighted mean of per-class F1 over `labels`. A class absent from both
/// predictions and golds contributes an F1 of 0.
pub fn macro_f1(preds: &[String], golds: &[String], labels: &[String]) -> f64 {
    assert_eq!(preds.len(), golds.len(), "prediction/gold length mismatch");
    if labels.is_empty() {
        return 0.0;
    }
    let mut sum = 0.0;
    for label in labels {
        let tp = preds
            .iter()
            .zip(golds)
            .filter(|(p, g)| *p == label && *g == label)
            .count() as f64;
        let fp = preds
            .iter()
            .zip(golds)
            .filter(|(p, g)| *p == label && *g != label)
            .count() as f64;
        let fn_ = preds
            .iter()
            .zip(golds)
            .filter(|(p, g)| *p != label && *g == label)
            .count() as f64;
        let denom = 2.0 * tp + fp + fn_;
        sum += if denom == 0.0 { 0.0 } else { 2.0 * tp / denom };
    }
    sum / labels.len() as f64
}

/// One question's candidate-answer judgments: predicted and gold booleans,
/// aligned by candidate.
#[derive(Debug, Clone)]
pub struct QuestionJudgments {
    pub preds: Vec<bool>,
    pub golds: Vec<bool>,
}

/// Exact match over whole questions plus micro-averaged F1 over all
/// candidate judgments (positive class = true). A judgment set with no
/// positives anywhere scores F1a 1.0 when predictions match exactly.
pub fn multirc_em_f1a(questions: &[QuestionJudgments]) -> (f64, f64) {
    if questions.is_empty() {
        return (0.0, 0.0);
    }
    let em_hits = questions.iter().filter(|q| q.preds == q.golds).count();
    let em = em_hits as f64 / questions.len() as f64;

    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut fn_ = 0.0;
    for q in questions {
        assert_eq!(q.preds.len(), q.golds.len(), "judgment length mismatch");
        for (&p, &g) in q.preds.iter().zip(&q.golds) {
            match (p, g) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fn_ += 1.0,
                (false, false) => {}
            }
        }
    }
    let denom = 2.0 * tp + fp + fn_;
    let f1a = if denom == 0.0 { 1.0 } else { 2.0 * tp / denom };
    (em, f1a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn s(items: &[&str]) -> Vec<String> {
        items.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn accuracy_boundaries() {
        assert_eq!(accuracy(&s(&["a", "b"]), &s(&["a", "b"])), 1.0);
        assert_eq!(accuracy(&s(&["a", "b"]), &s(&["b", "a"])), 0.0);
        assert_relative_eq!(
            accuracy(&s(&["a", "b", "a"]), &s(&["a", "a", "a"])),
            2.0 / 3.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn accuracy_agrees_with_confusion_matrix_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let labels = ["x", "y", "z"];
        let preds: Vec<String> =
            (0..100).map(|_| labels[rng.random_range(0..3)].to_string()).collect();
        let golds: Vec<String> =
            (0..100).map(|_| labels[rng.random_range(0..3)].to_string()).collect();
        // Oracle: tally the diagonal of the confusion matrix.
        let mut confusion = std::collections::HashMap::new();
        for (p, g) in preds.iter().zip(&golds) {
            *confusion.entry((p.clone(), g.clone())).or_insert(0usize) += 1;
        }
        let diagonal: usize =
            labels.iter().map(|l| confusion.get(&(l.to_string(), l.to_string())).copied().unwrap_or(0)).sum();
        assert_relative_eq!(
            accuracy(&preds, &golds),
            diagonal as f64 / 100.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn macro_f1_perfect_is_one() {
        let golds = s(&["a", "b", "c", "a"]);
        assert_eq!(macro_f1(&golds, &golds, &s(&["a", "b", "c"])), 1.0);
    }

    #[test]
    fn macro_f1_hand_tally() {
        // golds [a,a,b], preds [a,b,b]:
        // F1(a): P=1, R=1/2 -> 2/3. F1(b): P=1/2, R=1 -> 2/3.
        let preds = s(&["a", "b", "b"]);
        let golds = s(&["a", "a", "b"]);
        assert_relative_eq!(macro_f1(&preds, &golds, &s(&["a", "b"])), 2.0 / 3.0, epsilon = 1e-9);
        // With a third class absent from both, its F1 = 0 enters the mean.
        assert_relative_eq!(
            macro_f1(&preds, &golds, &s(&["a", "b", "c"])),
            (2.0 / 3.0 + 2.0 / 3.0) / 3.0,
            epsilon = 1e-9
        );
    }

    #[test]
    fn macro_f1_label_permutation_invariance() {
        let preds = s(&["a", "b", "b", "c"]);
        let golds = s(&["a", "a", "b", "b"]);
        let l1 = macro_f1(&preds, &golds, &s(&["a", "b", "c"]));
        let l2 = macro_f1(&preds, &golds, &s(&["c", "a", "b"]));
        assert_relative_eq!(l1, l2, epsilon = 1e-12);
    }

    #[test]
    fn macro_f1_single_class_equals_class_f1() {
        let preds = s(&["a", "b", "a"]);
        let golds = s(&["a", "a", "b"]);
        // F1(a): tp=1, fp=1, fn=1 -> 2*1/(2+1+1) = 0.5.
        assert_relative_eq!(macro_f1(&preds, &golds, &s(&["a"])), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn multirc_perfect_judgments() {
        let qs = vec![QuestionJudgments { preds: vec![true, false], golds: vec![true, false] }];
        assert_eq!(multirc_em_f1a(&qs), (1.0, 1.0));
    }

    #[test]
    fn multirc_hand_tally() {
        // One question, preds [1,1,0] vs golds [1,0,0]: EM 0; P=0.5, R=1 -> F1a 2/3.
        let qs = vec![QuestionJudgments {
            preds: vec![true, true, false],
            golds: vec![true, false, false],
        }];
        let (em, f1a) = multirc_em_f1a(&qs);
        assert_eq!(em, 0.0);
        assert_relative_eq!(f1a, 2.0 / 3.0, epsilon = 1e-9);
    }

    #[test]
    fn f1a_grouping_invariant_em_not() {
        let grouped = vec![QuestionJudgments {
            preds: vec![true, false, true, true],
            golds: vec![true, false, false, true],
        }];
        let split = vec![
            QuestionJudgments { preds: vec![true, false], golds: vec![true, false] },
            QuestionJudgments { preds: vec![true, true], golds: vec![false, true] },
        ];
        let (em_g, f1a_g) = multirc_em_f1a(&grouped);
        let (em_s, f1a_s) = multirc_em_f1a(&split);
        assert_relative_eq!(f1a_g, f1a_s, epsilon = 1e-12);
        assert_ne!(em_g, em_s);
    }

    #[test]
    fn metrics_are_bounded_and_exact_only_on_identity() {
        let preds = s(&["a", "b", "a", "c"]);
        let golds = s(&["a", "b", "c", "c"]);
        let acc = accuracy(&preds, &golds);
        assert!((0.0..=1.0).contains(&acc));
        assert!(acc < 1.0);
        assert_eq!(accuracy(&golds, &golds), 1.0);
    }
}
