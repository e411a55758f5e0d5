//! Property tests over the tokenizer, losses, masking, and rendering.

use proptest::prelude::*;

use clozefit_core::catalog::builtin_pvps;
use clozefit_core::masking::{sample_mask_plan, MaskKind, MaskScheme};
use clozefit_core::objectives::{
    decoupled_label_loss, decoupled_label_loss_grad, decoupled_label_loss_multi, predict_label,
    pet_ce_loss_grad, LabelRendering,
};
use clozefit_core::pvp::render;
use clozefit_core::task::{TaskExample, TaskId};
use clozefit_core::tokenizer::{normalize_text, Vocabulary, MASK_ID};

/// Literal expansion of the decoupled loss, written naively and
/// independently: direct exponentials, no max-subtraction, plain logs.
fn decoupled_oracle(logits: &[f64], candidates: &[u32], true_idx: usize) -> f64 {
    let z: f64 = logits.iter().map(|&l| l.exp()).sum();
    let q = |tok: u32| (logits[tok as usize].exp() / z).clamp(1e-7, 1.0 - 1e-7);
    let mut loss = -q(candidates[true_idx]).ln();
    for (i, &c) in candidates.iter().enumerate() {
        if i != true_idx {
            loss -= (1.0 - q(c)).ln();
        }
    }
    loss
}

proptest! {
    #[test]
    fn tokenizer_round_trip_normalizes(words in proptest::collection::vec("[a-z]{1,6}", 1..12)) {
        let text = words.join(" ");
        let vocab = Vocabulary::build(&[text.clone()], 1).unwrap();
        let ids = vocab.encode(&text);
        prop_assert_eq!(vocab.decode(&ids).unwrap(), normalize_text(&text));
    }

    #[test]
    fn decoupled_loss_matches_literal_expansion(
        logits in proptest::collection::vec(-6.0f64..6.0, 4..16),
        seed in any::<u64>(),
    ) {
        let n_labels = 2 + (seed % 3) as usize;
        prop_assume!(logits.len() >= n_labels);
        let candidates: Vec<u32> = (0..n_labels as u32).collect();
        let true_idx = (seed / 7) as usize % n_labels;
        let loss = decoupled_label_loss(&logits, &candidates, true_idx).unwrap();
        let oracle = decoupled_oracle(&logits, &candidates, true_idx);
        prop_assert!((loss - oracle).abs() < 1e-6, "loss {} oracle {}", loss, oracle);
    }

    #[test]
    fn losses_nonnegative_and_finite(
        logits in proptest::collection::vec(-40.0f64..40.0, 3..12),
    ) {
        let candidates = [0u32, 1];
        for t in 0..2 {
            let d = decoupled_label_loss(&logits, &candidates, t).unwrap();
            prop_assert!(d.is_finite() && d >= 0.0);
            let (p, _) = pet_ce_loss_grad(&logits, &candidates, t).unwrap();
            prop_assert!(p.is_finite() && p >= 0.0);
        }
    }

    #[test]
    fn gradient_support_contrast(
        logits in proptest::collection::vec(-3.0f64..3.0, 6..10),
    ) {
        let candidates = [1u32, 3];
        let (_, pet_grad) = pet_ce_loss_grad(&logits, &candidates, 0).unwrap();
        let (_, dec_grad) = decoupled_label_loss_grad(&logits, &candidates, 0).unwrap();
        for (i, &g) in pet_grad.iter().enumerate() {
            if !candidates.contains(&(i as u32)) {
                prop_assert_eq!(g, 0.0);
            }
        }
        let nonlabel_support = dec_grad
            .iter()
            .enumerate()
            .filter(|(i, _)| !candidates.contains(&(*i as u32)))
            .any(|(_, &g)| g.abs() > 1e-12);
        prop_assert!(nonlabel_support);
    }

    #[test]
    fn multi_token_loss_invariant_under_label_permutation(
        base in proptest::collection::vec(-3.0f64..3.0, 8),
        perm_seed in 0usize..6,
    ) {
        // Three labels, two tokens each, sharing position 0.
        let rows = |shift: f64| vec![
            base.iter().map(|&x| x + shift).collect::<Vec<_>>(),
            base.iter().map(|&x| x * 0.5 + shift).collect::<Vec<_>>(),
        ];
        let labels = [
            LabelRendering { tokens: vec![0, 1], logits: rows(0.0) },
            LabelRendering { tokens: vec![0, 2], logits: rows(0.3) },
            LabelRendering { tokens: vec![0, 3], logits: rows(-0.2) },
        ];
        let perms = [[0usize, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let perm = perms[perm_seed];
        let permuted: Vec<LabelRendering<f64>> =
            perm.iter().map(|&i| labels[i].clone()).collect();
        let true_original = 1usize;
        let true_permuted = perm.iter().position(|&i| i == true_original).unwrap();
        let a = decoupled_label_loss_multi(&labels, true_original).unwrap();
        let b = decoupled_label_loss_multi(&permuted, true_permuted).unwrap();
        prop_assert!((a - b).abs() < 1e-9, "a {} b {}", a, b);
    }

    #[test]
    fn prediction_shift_invariance(
        scores in proptest::collection::vec(-5.0f64..5.0, 2..6),
        shift in -100.0f64..100.0,
    ) {
        let shifted: Vec<f64> = scores.iter().map(|&s| s + shift).collect();
        prop_assert_eq!(predict_label(&scores), predict_label(&shifted));
    }

    #[test]
    fn mask_plans_respect_context_and_revert(
        n_premise in 1usize..12,
        n_hypothesis in 1usize..6,
        seed in any::<u64>(),
        ratio in 0.05f64..0.5,
    ) {
        use rand::SeedableRng;
        let premise: Vec<String> = (0..n_premise).map(|i| format!("p{i}")).collect();
        let hypothesis: Vec<String> = (0..n_hypothesis).map(|i| format!("h{i}")).collect();
        let pvp = builtin_pvps(TaskId::Rte).unwrap().remove(0);
        let mut corpus = vec![premise.join(" "), hypothesis.join(" ")];
        corpus.extend(pvp.vocab_seed_text());
        let vocab = Vocabulary::build(&corpus, 1).unwrap();
        let example = TaskExample::new(
            TaskId::Rte,
            &[("premise", premise.join(" ").as_str()), ("hypothesis", hypothesis.join(" ").as_str())],
            Some("entailment"),
        );
        let instance = render(&pvp, &vocab, &example, "entailment", 64).unwrap();
        let scheme = MaskScheme::new(MaskKind::Variable, ratio).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let plan = sample_mask_plan(&instance, &scheme, &mut rng).unwrap();
        for &p in &plan.positions {
            prop_assert!(instance.context_positions.contains(&p));
            prop_assert!(!instance.mask_positions.contains(&p));
            prop_assert_ne!(instance.ids[p], MASK_ID);
        }
        let mut ids = instance.ids.clone();
        plan.apply(&mut ids);
        plan.revert(&mut ids);
        prop_assert_eq!(ids, instance.ids);
    }

    #[test]
    fn catalog_renderings_keep_masks_and_context_disjoint(
        p_words in proptest::collection::vec("[a-z]{1,5}", 1..10),
        q_words in proptest::collection::vec("[a-z]{1,5}", 1..6),
        pvp_idx in 0usize..6,
    ) {
        let pvps = builtin_pvps(TaskId::BoolQ).unwrap();
        let pvp = &pvps[pvp_idx];
        let mut corpus = vec![p_words.join(" "), q_words.join(" ")];
        corpus.extend(pvp.vocab_seed_text());
        let vocab = Vocabulary::build(&corpus, 1).unwrap();
        let example = TaskExample::new(
            TaskId::BoolQ,
            &[("passage", p_words.join(" ").as_str()), ("question", q_words.join(" ").as_str())],
            Some("true"),
        );
        for label in ["false", "true"] {
            let instance = render(pvp, &vocab, &example, label, 64).unwrap();
            for &m in &instance.mask_positions {
                prop_assert_eq!(instance.ids[m], MASK_ID);
                prop_assert!(!instance.context_positions.contains(&m));
            }
            let rendered = instance.candidates.iter().find(|c| c.label == label).unwrap();
            prop_assert_eq!(rendered.tokens.len(), instance.mask_positions.len());
        }
    }
}
