use proptest::prelude::*;

use promptner::episode::Span;
use promptner::episode::{
    sample_episode, spans_to_tags, tags_to_spans, validate_episode, SpanAnnotation, TaggedSentence,
    OUTSIDE,
};
use promptner::harness::{error_breakdown, mean_std, micro_f1, GoldSentence};
use promptner::inference::{
    flat_decode, knn_distribution, rerank, BonusScope, GoldenEntityBank, Prediction, RerankWeights,
    SentencePredictions,
};
use promptner::span_detector::{
    extract_candidates, rope_rotate, span_loss, ScoreMatrix, DEFAULT_ROPE_BASE,
};
use promptner::synthetic;
use promptner::tensor::{softmax, Matrix};
use promptner::training::lr_multiplier;

fn square(n: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-5.0..5.0f64, n * n).prop_map(move |v| Matrix::from_vec(n, n, v))
}

fn sized_square() -> impl Strategy<Value = Matrix> {
    (1usize..=6).prop_flat_map(square)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

proptest! {
    #[test]
    fn rope_preserves_norm(v in prop::collection::vec(-3.0..3.0f64, 1..16), pos in -300i64..300) {
        let v = if v.len() % 2 == 1 { v[1..].to_vec() } else { v };
        let r = rope_rotate(&v, pos, DEFAULT_ROPE_BASE).unwrap();
        prop_assert!((norm(&r) - norm(&v)).abs() < 1e-9);
        prop_assert_eq!(rope_rotate(&v, 0, DEFAULT_ROPE_BASE).unwrap(), v);
    }

    #[test]
    fn span_loss_is_nonnegative_and_falls_as_gold_rises(raw in sized_square(), pick in 0usize..100, bump in 0.01..3.0f64) {
        let n = raw.rows();
        let s = pick % n;
        let gold = [Span::new(s, s + (pick / n) % (n - s))];
        let before = span_loss(&ScoreMatrix::from_raw(&raw).unwrap(), &gold).unwrap();
        let mut up = raw.clone();
        up.row_mut(gold[0].start)[gold[0].end] += bump;
        let after = span_loss(&ScoreMatrix::from_raw(&up).unwrap(), &gold).unwrap();
        prop_assert!(before >= 0.0);
        prop_assert!(after < before);
    }

    #[test]
    fn candidates_are_upper_triangle_and_sorted(raw in sized_square(), k in 1usize..5) {
        let n = raw.rows();
        let c = extract_candidates(&ScoreMatrix::from_raw(&raw).unwrap(), k);
        prop_assert_eq!(c.len(), (3 * k).min(n * (n + 1) / 2));
        prop_assert!(c.iter().all(|x| x.span.start <= x.span.end && x.span.end < n));
        prop_assert!(c.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn knn_is_a_distribution_without_none(
        rows in prop::collection::vec((prop::collection::vec(-2.0..2.0f64, 4), 1usize..4), 1..10),
        u in prop::collection::vec(-2.0..2.0f64, 4),
        k in 1usize..12,
    ) {
        let bank = GoldenEntityBank {
            embeddings: Matrix::from_rows(&rows.iter().map(|r| r.0.clone()).collect::<Vec<_>>()),
            labels: rows.iter().map(|r| r.1).collect(),
            num_classes: 4,
        };
        let p = knn_distribution(&u, &bank, k).unwrap();
        prop_assert_eq!(p[0], 0.0);
        prop_assert!(p.iter().all(|v| *v >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rerank_without_gamma_is_the_mixture(
        pp in prop::collection::vec(0.0..1.0f64, 2..6),
        s in -10.0..10.0f64,
        gamma in 0.0..1.0f64,
    ) {
        let pk: Vec<f64> = pp.iter().rev().cloned().collect();
        let w = RerankWeights { gamma: 0.0, ..RerankWeights::from_gamma(gamma) };
        let f = rerank(s, &pp, &pk, &w, BonusScope::EntityOnly);
        for t in 0..pp.len() {
            prop_assert_eq!(f[t], w.alpha * pp[t] + w.beta * pk[t]);
        }
        let all = rerank(s, &pp, &pk, &RerankWeights::from_gamma(gamma), BonusScope::AllClasses);
        let ent = rerank(s, &pp, &pk, &RerankWeights::from_gamma(gamma), BonusScope::EntityOnly);
        prop_assert_eq!(&all[1..], &ent[1..]);
        prop_assert!(ent[0] <= all[0]);
    }

    #[test]
    fn tags_and_spans_round_trip(tags in prop::collection::vec(prop::sample::select(vec!["O", "person", "city"]), 1..12)) {
        let words: Vec<String> = (0..tags.len()).map(|i| format!("w{i}")).collect();
        let tags: Vec<String> = tags.into_iter().map(String::from).collect();
        let s = TaggedSentence::new("x", words, tags.clone()).unwrap();
        let spans = tags_to_spans(&s);
        prop_assert_eq!(spans_to_tags(tags.len(), &spans), tags.clone());
        prop_assert_eq!(spans.iter().map(|a| a.end - a.start + 1).sum::<usize>(), tags.iter().filter(|t| *t != OUTSIDE).count());
    }

    #[test]
    fn flat_decoding_never_overlaps(cands in prop::collection::vec((0usize..8, 0usize..4, 0.0..1.0f64), 0..12)) {
        let preds: Vec<Prediction> = cands
            .iter()
            .map(|&(s, len, score)| Prediction { start: s, end: s + len, label: "a".into(), score })
            .collect();
        let out = flat_decode(preds.clone());
        for (i, a) in out.iter().enumerate() {
            for b in &out[i + 1..] {
                prop_assert!(!a.span().overlaps(&b.span()));
            }
        }
        prop_assert!(out.windows(2).all(|w| w[0].start < w[1].start));
        if let Some(best) = preds.iter().map(|p| p.score).reduce(f64::max) {
            prop_assert!(out.iter().any(|p| p.score == best));
        }
    }

    #[test]
    fn error_split_accounts_for_every_false_positive(
        p in prop::collection::btree_set((0usize..3, 0usize..3, 0usize..3, 0usize..2), 0..10),
        g in prop::collection::btree_set((0usize..3, 0usize..3, 0usize..3, 0usize..2), 0..10),
    ) {
        let label = |l: usize| ["a", "b"][l].to_string();
        let build_p = |sid: usize| SentencePredictions {
            sentence_id: format!("s{sid}"),
            spans: p.iter().filter(|x| x.0 == sid && x.1 <= x.2)
                .map(|x| Prediction { start: x.1, end: x.2, label: label(x.3), score: 1.0 }).collect(),
        };
        let build_g = |sid: usize| GoldSentence {
            sentence_id: format!("s{sid}"),
            spans: g.iter().filter(|x| x.0 == sid && x.1 <= x.2).map(|x| SpanAnnotation::new(x.1, x.2, label(x.3))).collect(),
        };
        let preds: Vec<_> = (0..3).map(build_p).collect();
        let gold: Vec<_> = (0..3).map(build_g).collect();
        let f = micro_f1(&preds, &gold).unwrap();
        prop_assert!((0.0..=1.0).contains(&f.micro_f1));
        let pv: std::collections::BTreeSet<_> = p.iter().filter(|x| x.1 <= x.2).collect();
        let gv: std::collections::BTreeSet<_> = g.iter().filter(|x| x.1 <= x.2).collect();
        let eb = error_breakdown(&preds, &gold).unwrap();
        prop_assert_eq!(eb.fp_span + eb.fp_type, pv.difference(&gv).count());
        prop_assert_eq!(eb.no_fp, pv.difference(&gv).count() == 0);
    }

    #[test]
    fn population_std(xs in prop::collection::vec(-1.0..1.0f64, 1..8)) {
        let (m, s) = mean_std(&xs);
        let n = xs.len() as f64;
        let var = xs.iter().map(|x| x * x).sum::<f64>() / n - m * m;
        prop_assert!((s * s - var).abs() < 1e-9);
    }

    #[test]
    fn softmax_is_a_distribution(xs in prop::collection::vec(-500.0..500.0f64, 1..8)) {
        let p = softmax(&xs);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn schedule_stays_in_unit_range(step in 0usize..2000, max in 1usize..1000, warm in 0.0..1.0f64) {
        let m = lr_multiplier(step, max, warm);
        prop_assert!((0.0..=1.0).contains(&m));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn sampled_episodes_validate(seed in 0u64..10_000, k in 1usize..3) {
        let corpus = synthetic::corpus(&["person", "city", "food"], 40, 4, "p").unwrap();
        let ep = sample_episode(&corpus, 2, k, seed).unwrap();
        prop_assert!(validate_episode(&ep).passed());
        let support: std::collections::BTreeSet<_> = ep.support.iter().map(|s| &s.id).collect();
        prop_assert!(ep.query.iter().all(|s| !support.contains(&s.id)));
    }
}
