mod support;

use std::collections::BTreeMap;

use proptest::prelude::*;

use qapair::corpus::{
    build_dataset, strip_questions, Article, DatasetConfig, LeadSummarizer, OverlapClassifier,
    PairClassifier, QuestionFocusedSummarizer,
};
use qapair::evalkit::{binomial_ci, bleu, joint_accuracy, qacs, rouge_l, task_accuracy, AnnotationRecord, Task};
use qapair::lengthdecode::{
    constrained_generate, truncate_unfinished, BucketTable, DecodeConstraint, DecodeMode,
};
use qapair::pipelines::{wiring_for, Atom, Variant};
use qapair::seqcore::{TokenSequence, Vocabulary};

use support::*;

fn content_ids(max_len: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(7usize..32, 1..=max_len)
}

fn word() -> impl Strategy<Value = String> {
    "[a-e]{1,3}"
}

fn text(max: usize) -> impl Strategy<Value = String> {
    prop::collection::vec(word(), 1..=max).prop_map(|w| w.join(" "))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn states_have_one_row_per_token(src in content_ids(8), tgt in content_ids(8), seed in 0u64..100) {
        let m = tiny_model(seed);
        let enc = m.encode(&seq(&src)).unwrap();
        prop_assert_eq!(enc.states.shape(), (src.len(), 16));
        let (logits, dec) = m.decode_teacher_forced(&enc, &seq(&tgt)).unwrap();
        prop_assert_eq!(logits.shape(), (tgt.len(), 32));
        prop_assert_eq!(dec.states.rows(), tgt.len());
    }

    #[test]
    fn decoder_is_causal(src in content_ids(8), tgt in content_ids(8), repl in 7usize..32, cut in 0usize..8) {
        let m = tiny_model(1);
        let cut = cut % tgt.len();
        let mut other = tgt.clone();
        for t in &mut other[cut..] {
            *t = repl;
        }
        let enc = m.encode(&seq(&src)).unwrap();
        let (a, _) = m.decode_teacher_forced(&enc, &seq(&tgt)).unwrap();
        let (b, _) = m.decode_teacher_forced(&enc, &seq(&other)).unwrap();
        // Row i predicts token i from tokens before it.
        for r in 0..=cut {
            prop_assert_eq!(a.row(r), b.row(r));
        }
    }
}

proptest! {
    #[test]
    fn unit_beam_is_greedy(seed in any::<u64>(), bias in -3.0f64..3.0, b in 0usize..3) {
        let vocab = sentence_vocab();
        let lm = RandomLm { vocab: &vocab, seed, ctx: vec![], eos_bias: bias };
        let bucket = BucketTable::default().buckets()[b];
        let c = DecodeConstraint::new(bucket, 1).unwrap();
        let beam = constrained_generate(&lm, &c, DecodeMode::Beam, 0).unwrap();
        let greedy = constrained_generate(&lm, &c, DecodeMode::Greedy, 0).unwrap();
        prop_assert_eq!(beam, greedy);
    }

    #[test]
    fn seeded_sampling_repeats(seed in any::<u64>(), bias in -3.0f64..3.0) {
        let vocab = sentence_vocab();
        let lm = RandomLm { vocab: &vocab, seed: 3, ctx: vec![], eos_bias: bias };
        let c = DecodeConstraint::new(BucketTable::default().buckets()[0], 1).unwrap();
        let a = constrained_generate(&lm, &c, DecodeMode::Sample, seed).unwrap();
        let b = constrained_generate(&lm, &c, DecodeMode::Sample, seed).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn truncation_is_idempotent(ids in prop::collection::vec(7usize..22, 0..80), b in 0usize..3) {
        let vocab = sentence_vocab();
        let bucket = BucketTable::default().buckets()[b];
        let once = truncate_unfinished(&TokenSequence(ids), &bucket, &vocab);
        let twice = truncate_unfinished(&once, &bucket, &vocab);
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn generation_respects_bucket(seed in any::<u64>(), bias in -3.0f64..3.0, b in 0usize..3, m in 0usize..3) {
        let vocab = sentence_vocab();
        let lm = RandomLm { vocab: &vocab, seed, ctx: vec![], eos_bias: bias };
        let bucket = BucketTable::default().buckets()[b];
        let mode = [DecodeMode::Greedy, DecodeMode::Beam, DecodeMode::Sample][m];
        let out = constrained_generate(&lm, &DecodeConstraint::new(bucket, 3).unwrap(), mode, seed).unwrap();
        prop_assert!(bucket.contains(out.len()));
        let banned = vocab.non_content_ids();
        prop_assert!(out.iter().all(|t| !banned.contains(t)));
    }

    #[test]
    fn stripped_body_has_no_question(parts in prop::collection::vec((text(6), 0usize..3), 0..8)) {
        let body = parts
            .iter()
            .map(|(t, e)| format!("{t}{}", ['.', '!', '?'][*e]))
            .collect::<Vec<_>>()
            .join(" ");
        let out = strip_questions(&body);
        prop_assert!(out.split_whitespace().all(|t| !t.ends_with('?')));
        let kept = parts.iter().filter(|(_, e)| *e != 2).count();
        let ends = out.split_whitespace().filter(|t| t.ends_with(['.', '!'])).count();
        prop_assert_eq!(kept, ends);
    }

    #[test]
    fn vocabulary_round_trips(words in prop::collection::btree_set("[a-z]{1,6}", 1..20), picks in prop::collection::vec(any::<prop::sample::Index>(), 0..30)) {
        let words: Vec<String> = words.into_iter().collect();
        let v = Vocabulary::from_words(&words).unwrap();
        let ids: Vec<usize> = picks.iter().map(|i| v.id(&words[i.index(words.len())]).unwrap()).collect();
        prop_assert_eq!(v.encode(&v.decode(&ids)).0, ids);
    }

    #[test]
    fn metric_ranges(h in text(12), r in text(12)) {
        for s in [rouge_l(&h, &r).unwrap(), bleu(&h, &r).unwrap()] {
            prop_assert!((0.0..=100.0).contains(&s));
        }
        prop_assert!((rouge_l(&h, &h).unwrap() - 100.0).abs() < 1e-9);
        prop_assert!((bleu(&h, &h).unwrap() - 100.0).abs() < 1e-9);
        prop_assert_eq!(rouge_l(&h, &r).unwrap(), rouge_oracle(&h, &r));
    }

    #[test]
    fn qacs_lies_within_scores(pairs in prop::collection::vec((text(4), text(8)), 1..20)) {
        let scores: Vec<f64> = pairs.iter().map(|(q, a)| OverlapClassifier.score(q, a).unwrap()).collect();
        let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let m = qacs(&pairs, &OverlapClassifier).unwrap();
        prop_assert!(lo - 1e-12 <= m && m <= hi + 1e-12);
    }

    #[test]
    fn interval_narrows_with_more_data(k in 1usize..50, extra in 1usize..50) {
        let n = k + extra;
        let (lo1, hi1) = binomial_ci(k, n, 0.95).unwrap();
        let (lo2, hi2) = binomial_ci(4 * k, 4 * n, 0.95).unwrap();
        prop_assert!(hi2 - lo2 < hi1 - lo1);
    }

    #[test]
    fn joint_never_exceeds_tasks(votes in prop::collection::vec(prop::collection::vec(any::<bool>(), 9), 1..30)) {
        let records: Vec<AnnotationRecord> = votes
            .iter()
            .enumerate()
            .map(|(i, v)| AnnotationRecord {
                item_id: i.to_string(),
                model_id: "m".into(),
                bucket: None,
                votes: Task::JOINT
                    .iter()
                    .enumerate()
                    .map(|(j, &t)| (t, v[3 * j..3 * j + 3].to_vec()))
                    .collect::<BTreeMap<_, _>>(),
                at6_choice: None,
                at7_choice: None,
            })
            .collect();
        let joint = joint_accuracy(&records).unwrap();
        for t in Task::JOINT {
            prop_assert!(joint <= task_accuracy(&records, t).unwrap());
        }
    }
}

#[test]
fn question_reads_the_article_only_where_wired() {
    let trains_on_article = [Variant::DD, Variant::DSD, Variant::QDD, Variant::QaGen2S];
    // D-D swaps the article for the generated answer at inference.
    let infers_from_article = [Variant::DSD, Variant::QDD, Variant::QaGen2S];
    for v in Variant::TRAINABLE {
        let spec = wiring_for(v);
        assert_eq!(spec.train_qg_enc.contains(Atom::D), trains_on_article.contains(&v), "{v}");
        assert_eq!(spec.infer_qg_enc.contains(Atom::D), infers_from_article.contains(&v), "{v}");
        assert_eq!(spec.infer_qg_enc.contains(Atom::SPrime), !matches!(v, Variant::QDD | Variant::QaGen2S), "{v}");
    }
}

fn article_strategy() -> impl Strategy<Value = Article> {
    let sentence = prop::collection::vec("[a-h]{1,4}", 4..12).prop_map(|w| format!("{}.", w.join(" ")));
    (prop::collection::vec(sentence, 5..30), prop::sample::select(vec![
        "Why did the river flood?",
        "How do bees fly so far?",
        "What happened at the hearing?",
    ]))
        .prop_map(|(s, title)| Article {
            id: "p".into(),
            title: title.into(),
            body: s.join(" "),
            source_domain: String::new(),
            date: String::new(),
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn dataset_tuples_satisfy_invariants(articles in prop::collection::vec(article_strategy(), 0..4), threshold in 0.0f64..0.6) {
        let cfg = DatasetConfig { threshold, ..DatasetConfig::default() };
        let (lead, focused) = (LeadSummarizer::default(), QuestionFocusedSummarizer::default());
        let run = || build_dataset(&articles, &cfg, &[&lead, &focused], &OverlapClassifier).unwrap();
        let (tuples, report) = run();
        prop_assert_eq!((tuples.clone(), report.clone()), run());
        let mut seen = std::collections::BTreeSet::new();
        for t in &tuples {
            prop_assert!(t.validate(&cfg.buckets).is_ok());
            prop_assert!(cfg.buckets.get(t.length_bucket).contains(t.summary.split_whitespace().count()));
            prop_assert!(t.score >= threshold);
            prop_assert!(!t.article.contains('?'));
            prop_assert!(seen.insert((t.article_id.clone(), t.length_bucket)));
        }
        prop_assert_eq!(report.tuples, tuples.len());
        prop_assert!(report.articles_kept <= report.articles_in);
    }
}
