//! The built-in pattern-verbalizer catalog.
//!
//! Pattern numbering is 1-based and matches the order the pairs are
//! conventionally listed in for these tasks. Choice tasks carry separate
//! cause/effect pattern variants selected by the example's `question`
//! field, plus override patterns for label-conditioned rendering that feed
//! in only the conditioned choice.

use crate::pvp::{Pattern, PatternChoice, Pvp, Segment, Verbalizer};
use crate::task::{TaskError, TaskId};

/// Returns the built-in pattern-verbalizer pairs for `task`.
pub fn builtin_pvps(task: TaskId) -> Result<Vec<Pvp>, TaskError> {
    let pvps = match task {
        TaskId::BoolQ => boolq(),
        TaskId::Cb => entailment_family(
            task,
            &[("entailment", "yes"), ("contradiction", "no"), ("neutral", "maybe")],
        ),
        TaskId::Rte => entailment_family(
            task,
            &[("entailment", "yes"), ("not_entailment", "no")],
        ),
        TaskId::Copa => copa(),
        TaskId::Wic => wic(),
        TaskId::Wsc => wsc(),
        TaskId::MultiRc => multirc(),
        TaskId::Record => record(),
    };
    Ok(pvps)
}

/// Looks a catalog pair up by its 1-based index.
pub fn builtin_pvp(task: TaskId, index: usize) -> Result<Pvp, TaskError> {
    let pvps = builtin_pvps(task)?;
    let count = pvps.len();
    pvps.into_iter()
        .find(|p| p.index == index)
        .ok_or_else(|| TaskError::BadRecord {
            line: 0,
            msg: format!("pvp index {index} out of range for {task} (1..={count})"),
        })
}

fn make(task: TaskId, index: usize, template: &str, verbalizer: Verbalizer) -> Pvp {
    let pattern = Pattern::parse(template).expect("catalog template parses");
    pattern.check_fields(task).expect("catalog fields match schema");
    Pvp { task, index, pattern: PatternChoice::Fixed(pattern), lc_pattern: None, verbalizer }
}

fn static_verbalizer(map: &[(&str, &str)]) -> Verbalizer {
    Verbalizer::Static(
        map.iter().map(|(l, v)| (l.to_string(), v.to_string())).collect(),
    )
}

fn boolq() -> Vec<Pvp> {
    let templates = [
        "{passage}. Question: {question}? Answer: ___.",
        "{passage}. Based on the previous passage, {question}? ___.",
        "Based on the following passage, {question}? ___. {passage}",
    ];
    let verbalizers = [
        [("false", "no"), ("true", "yes")],
        [("false", "false"), ("true", "true")],
    ];
    let mut pvps = Vec::new();
    for (v, verb) in verbalizers.iter().enumerate() {
        for (t, template) in templates.iter().enumerate() {
            pvps.push(make(
                TaskId::BoolQ,
                v * templates.len() + t + 1,
                template,
                static_verbalizer(verb),
            ));
        }
    }
    pvps
}

fn entailment_family(task: TaskId, verbalizer: &[(&str, &str)]) -> Vec<Pvp> {
    let templates = [
        "{hypothesis}? | ___, {premise}",
        "\"{hypothesis}\"? | ___, \"{premise}\"",
        "{hypothesis}? | ___. {premise}",
        "\"{hypothesis}?\" | ___. \"{premise}\"",
    ];
    templates
        .iter()
        .enumerate()
        .map(|(i, t)| make(task, i + 1, t, static_verbalizer(verbalizer)))
        .collect()
}

fn copa() -> Vec<Pvp> {
    let verbalizer = Verbalizer::FromField(vec![
        ("choice1".to_string(), "choice1".to_string()),
        ("choice2".to_string(), "choice2".to_string()),
    ]);
    let main = [
        (
            "\"{choice1}\" or \"{choice2}\"? {premise}, because ___.",
            "\"{choice1}\" or \"{choice2}\"? {premise}, so ___.",
        ),
        (
            "{choice1} or {choice2}? {premise}, because ___.",
            "{choice1} or {choice2}? {premise}, so ___.",
        ),
    ];
    // Label conditioning sees one choice only, so the competing choice
    // cannot leak into the context.
    let lc = PatternChoice::PerQuestion {
        cause: Pattern::parse("Because {premise}, ___.").expect("catalog template parses"),
        effect: Pattern::parse("Because ___, {premise}.").expect("catalog template parses"),
    };
    main.iter()
        .enumerate()
        .map(|(i, (cause, effect))| Pvp {
            task: TaskId::Copa,
            index: i + 1,
            pattern: PatternChoice::PerQuestion {
                cause: Pattern::parse(cause).expect("catalog template parses"),
                effect: Pattern::parse(effect).expect("catalog template parses"),
            },
            lc_pattern: Some(lc.clone()),
            verbalizer: verbalizer.clone(),
        })
        .collect()
}

fn wic() -> Vec<Pvp> {
    let yes_no = [("false", "no"), ("true", "yes")];
    vec![
        make(
            TaskId::Wic,
            1,
            "\"{sentence1}\" / \"{sentence2}\" Similar sense of \"{word}\"? ___.",
            static_verbalizer(&yes_no),
        ),
        make(
            TaskId::Wic,
            2,
            "{sentence1} {sentence2} Does {word} have the same meaning in both sentences? ___.",
            static_verbalizer(&yes_no),
        ),
        make(
            TaskId::Wic,
            3,
            "{word}. Sense (1) (a) \"{sentence1}\" (___) \"{sentence2}\"",
            static_verbalizer(&[("false", "2"), ("true", "b")]),
        ),
    ]
}

fn wsc() -> Vec<Pvp> {
    let verbalizer =
        Verbalizer::FromField(vec![("true".to_string(), "span1".to_string())]);
    let templates = [
        "{text} The pronoun '*{span2}*' refers to ___.",
        "{text} In the previous sentence, the pronoun '*{span2}*' refers to ___.",
        "{text} In the passage above, what does the pronoun '*{span2}*' refer to? Answer: ___.",
    ];
    templates
        .iter()
        .enumerate()
        .map(|(i, t)| make(TaskId::Wsc, i + 1, t, verbalizer.clone()))
        .collect()
}

fn multirc() -> Vec<Pvp> {
    let yes_no = [("false", "no"), ("true", "yes")];
    let templates = [
        "{passage}. Question: {question}? Is it {answer}? ___.",
        "{passage}. Question: {question}? Is the correct answer \"{answer}\"? ___.",
        "{passage}. Based on the previous passage, {question}? Is \"{answer}\" a correct answer? ___.",
    ];
    templates
        .iter()
        .enumerate()
        .map(|(i, t)| make(TaskId::MultiRc, i + 1, t, static_verbalizer(&yes_no)))
        .collect()
}

fn record() -> Vec<Pvp> {
    // The task is already cloze-shaped: passage and question are simply
    // concatenated, and the question's @placeholder becomes the mask slot.
    let pattern = Pattern {
        template: "{passage} | {question}".to_string(),
        segments: vec![
            Segment::Field("passage".to_string()),
            Segment::PlaceholderField("question".to_string()),
        ],
    };
    vec![Pvp {
        task: TaskId::Record,
        index: 1,
        pattern: PatternChoice::Fixed(pattern),
        lc_pattern: None,
        verbalizer: Verbalizer::Entities,
    }]
}

/// Number of catalog pairs for `task`.
pub fn catalog_size(task: TaskId) -> usize {
    builtin_pvps(task).map(|v| v.len()).unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pvp::{render, render_label_conditioned};
    use crate::task::TaskExample;
    use crate::tokenizer::Vocabulary;

    #[test]
    fn catalog_sizes_match_the_published_pattern_counts() {
        let expected = [
            (TaskId::BoolQ, 6),
            (TaskId::Cb, 4),
            (TaskId::Rte, 4),
            (TaskId::Copa, 2),
            (TaskId::Wic, 3),
            (TaskId::Wsc, 3),
            (TaskId::MultiRc, 3),
            (TaskId::Record, 1),
        ];
        for (task, count) in expected {
            let pvps = builtin_pvps(task).unwrap();
            assert_eq!(pvps.len(), count, "{task}");
            for (i, pvp) in pvps.iter().enumerate() {
                assert_eq!(pvp.index, i + 1);
                assert_eq!(pvp.task, task);
            }
        }
        // Each choice-style pair carries both a cause and an effect pattern.
        for pvp in builtin_pvps(TaskId::Copa).unwrap() {
            assert!(matches!(pvp.pattern, PatternChoice::PerQuestion { .. }));
            assert!(pvp.lc_pattern.is_some());
        }
    }

    #[test]
    fn boolq_first_pattern_template_and_verbalizers() {
        let pvps = builtin_pvps(TaskId::BoolQ).unwrap();
        match &pvps[0].pattern {
            PatternChoice::Fixed(p) => {
                assert_eq!(p.template, "{passage}. Question: {question}? Answer: ___.");
            }
            _ => panic!("boolq pattern is fixed"),
        }
        assert_eq!(
            pvps[0].verbalizer,
            Verbalizer::Static(vec![
                ("false".into(), "no".into()),
                ("true".into(), "yes".into())
            ])
        );
        assert_eq!(
            pvps[3].verbalizer,
            Verbalizer::Static(vec![
                ("false".into(), "false".into()),
                ("true".into(), "true".into())
            ])
        );
    }

    #[test]
    fn cb_verbalizer_maps_entail_neutral_contradict_to_yes_maybe_no() {
        let pvps = builtin_pvps(TaskId::Cb).unwrap();
        for pvp in &pvps {
            let map = match &pvp.verbalizer {
                Verbalizer::Static(map) => map.clone(),
                _ => panic!("static verbalizer"),
            };
            let get = |l: &str| {
                map.iter().find(|(label, _)| label == l).map(|(_, v)| v.clone()).unwrap()
            };
            assert_eq!(get("entailment"), "yes");
            assert_eq!(get("neutral"), "maybe");
            assert_eq!(get("contradiction"), "no");
        }
    }

    #[test]
    fn rte_first_pattern_template_uses_part_separator_notation() {
        let pvps = builtin_pvps(TaskId::Rte).unwrap();
        match &pvps[0].pattern {
            PatternChoice::Fixed(p) => {
                assert_eq!(p.template, "{hypothesis}? | ___, {premise}");
            }
            _ => panic!("rte pattern is fixed"),
        }
    }

    fn copa_example(question: &str) -> TaskExample {
        TaskExample::new(
            TaskId::Copa,
            &[
                ("premise", "the sky turned bright"),
                ("choice1", "the sun was rising"),
                ("choice2", "the grass was cut"),
                ("question", question),
            ],
            Some("choice1"),
        )
    }

    fn copa_vocab(pvp: &Pvp) -> Vocabulary {
        let mut corpus = vec![
            "the sky turned bright".to_string(),
            "the sun was rising".to_string(),
            "the grass was cut".to_string(),
        ];
        corpus.extend(pvp.vocab_seed_text());
        Vocabulary::build(&corpus, 1).unwrap()
    }

    #[test]
    fn copa_mask_counts_follow_choice_token_lengths() {
        let pvp = builtin_pvp(TaskId::Copa, 2).unwrap();
        let vocab = copa_vocab(&pvp);
        let example = copa_example("cause");
        // Oracle: token lengths of each verbalization under the tokenizer.
        let len1 = vocab.encode("the sun was rising").len();
        let len2 = vocab.encode("the grass was cut").len();
        assert_eq!((len1, len2), (4, 4));
        let r1 = render(&pvp, &vocab, &example, "choice1", 64).unwrap();
        let r2 = render(&pvp, &vocab, &example, "choice2", 64).unwrap();
        assert_eq!(r1.mask_positions.len(), len1);
        assert_eq!(r2.mask_positions.len(), len2);

        // A 3-token vs 4-token pair yields different mask counts per label.
        let mut uneven = example.clone();
        uneven.fields.insert("choice1".into(), "the sun rose".into());
        let mut corpus = vec!["the sun rose".to_string()];
        corpus.extend(pvp.vocab_seed_text());
        corpus.push("the sky turned bright the grass was cut".into());
        let vocab2 = Vocabulary::build(&corpus, 1).unwrap();
        let r1 = render(&pvp, &vocab2, &uneven, "choice1", 64).unwrap();
        let r2 = render(&pvp, &vocab2, &uneven, "choice2", 64).unwrap();
        assert_eq!(r1.mask_positions.len(), 3);
        assert_eq!(r2.mask_positions.len(), 4);
    }

    #[test]
    fn copa_label_conditioning_uses_because_pattern_with_one_choice() {
        let pvp = builtin_pvp(TaskId::Copa, 1).unwrap();
        let vocab = copa_vocab(&pvp);
        let cause = copa_example("cause");
        let lc = render_label_conditioned(&pvp, &vocab, &cause, "choice1", 64).unwrap();
        assert_eq!(
            vocab.decode(&lc.ids).unwrap(),
            "because the sky turned bright , the sun was rising ."
        );
        // Only one choice appears in the conditioned input.
        assert!(!vocab.decode(&lc.ids).unwrap().contains("grass"));

        let effect = copa_example("effect");
        let lc = render_label_conditioned(&pvp, &vocab, &effect, "choice2", 64).unwrap();
        assert_eq!(
            vocab.decode(&lc.ids).unwrap(),
            "because the grass was cut , the sky turned bright ."
        );
    }

    #[test]
    fn wic_third_pattern_uses_letter_verbalizer() {
        let pvps = builtin_pvps(TaskId::Wic).unwrap();
        assert_eq!(
            pvps[2].verbalizer,
            Verbalizer::Static(vec![("false".into(), "2".into()), ("true".into(), "b".into())])
        );
    }

    #[test]
    fn wsc_verbalizes_the_named_span() {
        let pvp = builtin_pvp(TaskId::Wsc, 1).unwrap();
        let mut corpus = vec!["the cat chased its tail because it was bored".to_string()];
        corpus.extend(pvp.vocab_seed_text());
        let vocab = Vocabulary::build(&corpus, 1).unwrap();
        let example = TaskExample::new(
            TaskId::Wsc,
            &[
                ("text", "the cat chased its tail because it was bored"),
                ("span1", "the cat"),
                ("span2", "it"),
            ],
            Some("true"),
        );
        let instance = render(&pvp, &vocab, &example, "true", 64).unwrap();
        assert_eq!(instance.candidates.len(), 1);
        assert_eq!(vocab.decode(&instance.candidates[0].tokens).unwrap(), "the cat");
        assert_eq!(instance.mask_positions.len(), 2);
    }

    #[test]
    fn unknown_task_is_an_error() {
        assert!(crate::task::TaskId::parse("sst2").is_err());
    }
}
