use pdp_core::prompt_builder::truncate_to_budget;
use pdp_core::style_eval::Prior;
use pdp_core::{
    dot, ngram_overlap, postprocess, CandidateContext, CandidateIndex, CharacterCard,
    DialogHistory, Embedding, EmbeddingBackend, MatchedPair, MockHashBackend, PromptBuilder,
    Side, StyleClassifier,
};
use proptest::prelude::*;

fn vec_pair(max_dim: usize) -> impl Strategy<Value = (Vec<f32>, Vec<f32>)> {
    (1..=max_dim).prop_flat_map(|d| {
        (
            prop::collection::vec(-100.0f32..100.0, d),
            prop::collection::vec(-100.0f32..100.0, d),
        )
    })
}

fn words() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(vec!["quack", "fish", "swim", "rain", "sky", "beak", "the", "a"]), 0..8)
        .prop_map(|w| w.join(" "))
}

proptest! {
    #[test]
    fn dot_is_symmetric((a, b) in vec_pair(1024)) {
        let (a, b) = (Embedding::new(a).unwrap(), Embedding::new(b).unwrap());
        prop_assert_eq!(dot(&a, &b).unwrap(), dot(&b, &a).unwrap());
    }

    #[test]
    fn dot_is_homogeneous((a, b) in vec_pair(1024), exp in -8i32..8, sign in prop::bool::ANY) {
        // Power-of-two factors scale f32 exactly, so the identity holds to
        // summation rounding only.
        let lambda = if sign { 2f32.powi(exp) } else { -(2f32.powi(exp)) };
        let a = Embedding::new(a).unwrap();
        let b = Embedding::new(b).unwrap();
        let lhs = dot(&a.scaled(lambda).unwrap(), &b).unwrap();
        let rhs = f64::from(lambda) * dot(&a, &b).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-9 * rhs.abs().max(1e-300));
    }

    #[test]
    fn dot_is_homogeneous_for_any_finite_factor((a, b) in vec_pair(64), lambda in -50.0f32..50.0) {
        // Arbitrary factors round once per element when stored as f32.
        let a = Embedding::new(a).unwrap();
        let b = Embedding::new(b).unwrap();
        let lhs = dot(&a.scaled(lambda).unwrap(), &b).unwrap();
        let rhs = f64::from(lambda) * dot(&a, &b).unwrap();
        let bound: f64 = a.as_slice().iter().zip(b.as_slice())
            .map(|(x, y)| (f64::from(*x) * f64::from(*y) * f64::from(lambda)).abs())
            .sum();
        prop_assert!((lhs - rhs).abs() <= 1e-6 * bound.max(1e-30));
    }

    #[test]
    fn batch_embedding_equals_single(texts in prop::collection::vec("[a-z]{1,6}( [a-z]{1,6}){0,4}", 1..10), dim in 1usize..16) {
        let b = MockHashBackend::new(dim).unwrap();
        let batch = b.embed_contexts(&texts).unwrap();
        for (t, e) in texts.iter().zip(&batch) {
            prop_assert_eq!(&b.embed_one(t, Side::Context).unwrap(), e);
        }
    }

    #[test]
    fn index_scores_scale_with_embeddings(
        (pool, query) in (1usize..8).prop_flat_map(|d| (
            prop::collection::vec(prop::collection::vec(-1.0f32..1.0, d), 1..40),
            prop::collection::vec(-1.0f32..1.0, d),
        )),
        exp in -4i32..4,
    ) {
        let lambda = 2f32.powi(exp);
        let index = CandidateIndex::from_parts(
            (0..pool.len()).map(|id| CandidateContext { id, text: format!("c{id}") }).collect(),
            pool.iter().map(|v| Embedding::new(v.clone()).unwrap()).collect(),
            "p".into(),
        ).unwrap();
        let scaled = index.scaled(lambda).unwrap();
        let q = Embedding::new(query).unwrap();
        let base = index.score_all(&q).unwrap();
        let after = scaled.score_all(&q).unwrap();
        for ((i, s), (j, t)) in base.iter().zip(&after) {
            prop_assert_eq!(i, j);
            prop_assert_eq!(*t, f64::from(lambda) * s);
        }
    }

    #[test]
    fn postprocess_is_idempotent_and_stop_free(raw in "[ a-zA-Z:\n<>EOT]{0,40}") {
        let stops = PromptBuilder::default().stop_sequences();
        let once = postprocess(&raw, &stops);
        prop_assert_eq!(postprocess(&once, &stops), once.clone());
        for s in &stops {
            prop_assert!(!once.contains(s.as_str()));
        }
    }

    #[test]
    fn overlap_is_a_ratio_and_monotone(response in words(), mut utterances in prop::collection::vec(words(), 0..5), extra in words()) {
        let before = ngram_overlap(&response, &utterances, 2);
        prop_assert!((0.0..=1.0).contains(&before));
        utterances.push(extra);
        prop_assert!(ngram_overlap(&response, &utterances, 2) >= before);
    }

    #[test]
    fn posteriors_sum_to_one(
        classes in prop::collection::vec(prop::collection::vec(words(), 1..5), 2..6),
        text in words(),
        alpha in 0.1f64..3.0,
        freq in prop::bool::ANY,
    ) {
        let labelled: Vec<(String, Vec<String>)> = classes.into_iter().enumerate()
            .map(|(i, u)| (format!("c{i}"), u)).collect();
        let prior = if freq { Prior::Frequency } else { Prior::Uniform };
        let model = StyleClassifier::train_with(&labelled, alpha, prior).unwrap();
        let post = model.classify(&text);
        prop_assert!((post.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(post.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn duplicating_corpus_with_matching_alpha_keeps_posterior(
        classes in prop::collection::vec(prop::collection::vec(words(), 1..4), 2..4),
        text in words(),
        times in 2usize..4,
    ) {
        let labelled: Vec<(String, Vec<String>)> = classes.iter().enumerate()
            .map(|(i, u)| (format!("c{i}"), u.clone())).collect();
        let duplicated: Vec<(String, Vec<String>)> = classes.iter().enumerate()
            .map(|(i, u)| (format!("c{i}"), u.iter().cycle().take(u.len() * times).cloned().collect()))
            .collect();
        let a = StyleClassifier::train_with(&labelled, 1.0, Prior::Uniform).unwrap();
        let b = StyleClassifier::train_with(&duplicated, times as f64, Prior::Uniform).unwrap();
        for (p, q) in a.classify(&text).iter().zip(b.classify(&text)) {
            prop_assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn majority_posterior_counts_as_correct(a in prop::collection::vec(words(), 1..4), b in prop::collection::vec(words(), 1..4), text in words()) {
        let model = StyleClassifier::train(&[("a", a), ("b", b)]).unwrap();
        if model.classify(&text)[0] > 0.5 {
            prop_assert_eq!(model.style_accuracy(&[text.as_str()], "a").unwrap(), 1.0);
        }
    }

    #[test]
    fn prompts_keep_utterances_verbatim(
        utterances in prop::collection::vec("[A-Za-z!?.,' ]{1,30}[A-Za-z!?]", 1..8),
        history_exchanges in 0usize..3,
    ) {
        let card = CharacterCard::new("Pie the Duck", None, utterances.clone());
        let pairs: Vec<MatchedPair> = utterances.iter().enumerate().map(|(i, u)| MatchedPair {
            utterance_index: i,
            candidate_id: Some(i),
            pseudo_context: format!("context {i}"),
            utterance: u.clone(),
            match_score: 0.0,
            order_key: 0.0,
        }).collect();
        let mut history = DialogHistory::new();
        for n in 0..history_exchanges {
            history.push_exchange(format!("question {n}"), format!("answer {n}"));
        }
        let b = PromptBuilder::default();
        let pdp = b.render_pdp(&card, &pairs, &history, "final question").unwrap();
        let only = b.render_only_utterances(&card, &history, "final question").unwrap();
        for u in &utterances {
            prop_assert!(pdp.text.contains(u.as_str()));
            prop_assert!(only.text.contains(u.as_str()));
        }
        let user_lines = pdp.text.lines().filter(|l| l.starts_with("User: ")).count();
        prop_assert_eq!(user_lines, pairs.len() + history_exchanges + 1);

        let budget = pdp.char_len() - 1;
        if let Ok(kept) = truncate_to_budget(&card, &pairs, &history, "final question", budget) {
            if !kept.is_empty() {
                let cut = b.render_pdp(&card, &kept, &history, "final question").unwrap();
                prop_assert!(cut.char_len() <= budget);
                let user_lines = cut.text.lines().filter(|l| l.starts_with("User: ")).count();
                prop_assert_eq!(user_lines, kept.len() + history_exchanges + 1);
            }
        }
    }
}
