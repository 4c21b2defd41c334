mod common;

use std::collections::HashMap;

use proptest::collection::vec;
use proptest::prelude::*;

use common::{oracle_bm25, oracle_search, Keys};
use zner_core::eval::{self, BucketInput, RelationRecall};
use zner_core::ingest::{self, QuestionTemplate};
use zner_core::sparse::idf_formula;
use zner_core::*;

fn unit(dim: usize) -> impl Strategy<Value = Vec<f32>> {
    vec(-1.0f32..1.0, dim).prop_filter_map("non-zero", |v| {
        let n = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
        (n > 1e-3).then(|| v.iter().map(|&x| (f64::from(x) / n) as f32).collect())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn template_extraction_inverts_instantiation(
        prefix in "[A-Z][a-z ]{0,12}",
        suffix in "[ a-z]{0,8}[?.]",
        entity in "[A-Za-zéÜ0-9][A-Za-zéÜ0-9 '-]{0,20}",
    ) {
        let t = QuestionTemplate::new("P1", format!("{prefix}[E]{suffix}")).unwrap();
        let q = t.instantiate(&entity);
        let span = extract_entity_by_template(&q, &t).unwrap();
        prop_assert_eq!(&span.surface, &entity);
        span.validate(&q).unwrap();
    }

    #[test]
    fn key_count_law(title in "[A-Za-z ]{0,6}", words in vec("[a-z]{1,6}", 0..12), picks in vec(any::<bool>(), 12)) {
        let body = words.join(" ");
        let p = Passage::new("p", title.clone(), if body.is_empty() { "x".to_string() } else { body.clone() });
        let mut spans = Vec::new();
        let mut at = 0;
        for (w, pick) in words.iter().zip(&picks) {
            if *pick {
                spans.push(EntitySpan::from_host(&p.body, at, at + w.chars().count(), EntityType::Misc).unwrap());
            }
            at += w.chars().count() + 1;
        }
        let keys = enumerate_keys(&p, &spans);
        prop_assert_eq!(keys.len(), spans.len() + usize::from(!title.is_empty()));

        let mut a = Vec::new();
        let mut b = Vec::new();
        ingest::write_jsonl(&mut a, &keys).unwrap();
        ingest::write_jsonl(&mut b, &enumerate_keys(&p, &spans)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn idf_decreases_with_document_frequency(n in 1usize..100_000, a in 0usize..100_000, b in 0usize..100_000) {
        let (lo, hi) = (a.min(b).min(n), a.max(b).min(n));
        prop_assert!(idf_formula(n, lo) >= idf_formula(n, hi));
    }

    #[test]
    fn bm25_non_decreasing_in_tf_when_idf_positive(len in 2usize..20, tf in 1usize..19, fillers in 3usize..10) {
        prop_assume!(tf < len);
        let doc = |tf: usize| {
            let mut w = vec!["x"; tf];
            w.extend(vec!["y"; len - tf]);
            w.join(" ")
        };
        let build = |tf: usize| {
            let mut docs = vec![("d".to_string(), doc(tf))];
            docs.extend((0..fillers).map(|i| (format!("f{i}"), "y ".repeat(len))));
            InvertedIndex::from_texts(docs).unwrap()
        };
        let (lo, hi) = (build(tf), build(tf + 1));
        prop_assert!(lo.idf("x").unwrap() > 0.0);
        let q = vec!["x".to_string()];
        let p = Bm25Params::default();
        prop_assert!(hi.bm25_score(&p, &q, "d").unwrap() >= lo.bm25_score(&p, &q, "d").unwrap());
    }

    #[test]
    fn bm25_topk_matches_oracle(docs in vec("[a-e ]{1,20}", 1..40), query in "[a-f ]{0,10}", k in 1usize..50) {
        let docs: Vec<(String, String)> = docs.into_iter().enumerate().map(|(i, d)| (format!("d{i:02}"), d)).collect();
        let idx = InvertedIndex::from_texts(docs.iter().map(|(a, b)| (a.clone(), b))).unwrap();
        let got = idx.bm25_topk(&Bm25Params::default(), &query, k).unwrap();
        let want = oracle_bm25(&docs, &query, 0.9, 0.4, k);
        prop_assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(&want) {
            prop_assert_eq!(&g.0, &w.0);
            prop_assert!((g.1 - w.1).abs() <= 1e-12);
        }
    }

    #[test]
    fn is_positive_ignores_case_and_spacing(
        words in vec("[a-zA-Z]{1,6}", 1..8),
        pick in 0usize..8,
        seps in vec(prop_oneof![Just(" "), Just("  "), Just("\t"), Just(" \n ")], 8),
    ) {
        let pick = pick % words.len();
        let body: String = words.iter().zip(&seps).map(|(w, s)| format!("{w}{s}")).collect();
        let answer = words[pick].clone();
        let p1 = Passage::new("p", "", body.clone());
        let p2 = Passage::new("p", "", format!("  {}  ", body.to_uppercase().split_whitespace().collect::<Vec<_>>().join("   ")));
        let answers = vec![answer.to_lowercase()];
        let swapped = vec![format!(" {} ", answer.to_uppercase())];
        prop_assert!(is_positive(&p1, &answers));
        prop_assert_eq!(is_positive(&p1, &answers), is_positive(&p2, &swapped));
    }

    #[test]
    fn macro_equals_micro_for_equal_counts(n in 1usize..50, hits in vec(0usize..=50, 1..10)) {
        let rep = RecallReport {
            k_values: vec![20],
            relations: hits.iter().enumerate().map(|(i, &h)| RelationRecall {
                relation: format!("P{i}"),
                questions: n,
                hits: vec![h.min(n)],
            }).collect(),
            missing_runs: 0,
        };
        prop_assert!((rep.macro_avg(20).unwrap() - rep.micro_avg(20).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn buckets_partition(values in vec(0u8..20, 1..200), b in 1usize..10) {
        prop_assume!(b <= values.len());
        let inputs: Vec<BucketInput> = values.iter().enumerate()
            .map(|(i, &v)| BucketInput { qid: format!("q{i:03}"), idf_ent: Some(f64::from(v) / 2.0) })
            .collect();
        let rep = bucketize_by_idf_ent(&inputs, b).unwrap();
        let sizes = rep.sizes();
        prop_assert_eq!(sizes.iter().sum::<usize>(), values.len());
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        prop_assert!(sizes.windows(2).all(|w| w[0] >= w[1]));
        for w in rep.buckets.windows(2) {
            prop_assert!(w[0].max <= w[1].min);
        }
    }

    #[test]
    fn znrk_round_trip(dim in 1usize..16, n in 0usize..20, seed in any::<u64>()) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let entries: Vec<(String, Vec<f32>)> = (0..n).map(|i| (format!("é{i}"), common::random_unit(&mut rng, dim))).collect();
        let bytes = write_embeddings(&entries, dim).unwrap();
        let set = read_embeddings(&bytes).unwrap();
        let back: Vec<(String, Vec<f32>)> = set.iter().map(|(k, v)| (k.to_string(), v.to_vec())).collect();
        prop_assert_eq!(back, entries);
    }

    #[test]
    fn dense_search_matches_oracle(
        groups in (2usize..6).prop_flat_map(|d| (Just(d), vec(vec(unit(d), 1..5), 1..30), unit(d))),
        k in 1usize..40,
    ) {
        let (dim, passages, q) = groups;
        let keys: Keys = passages.iter().enumerate().flat_map(|(p, ks)| {
            ks.iter().enumerate().map(move |(j, v)| (format!("p{p}#{j}"), format!("p{p}"), v.clone()))
        }).collect();
        let index = MultiKeyIndex::build(keys.iter().map(|(a, b, c)| (a.clone(), b, c)), dim).unwrap();
        let got: Vec<(String, f64, String)> = index.search_topk(&q, k).unwrap()
            .into_iter().map(|h| (h.passage_id, h.score, h.best_key_id)).collect();
        prop_assert_eq!(got, oracle_search(&keys, &q, k));
    }
}

#[test]
fn recall_report_csv_is_stable() {
    let corpus_ps = [
        Passage::new("p1", "", "Leeds is a city"),
        Passage::new("p2", "", "Paris is a city"),
    ];
    let corpus: HashMap<&str, &Passage> = corpus_ps.iter().map(|p| (p.passage_id.as_str(), p)).collect();
    let records: Vec<EvalRecord> = [("q1", "P19", "Leeds"), ("q2", "P19", "Rome"), ("q3", "P50", "Paris")]
        .iter()
        .map(|(q, r, a)| EvalRecord {
            query_id: q.to_string(),
            relation_id: r.to_string(),
            question_text: String::new(),
            template_id: r.to_string(),
            gold_answers: vec![a.to_string()],
            extracted_entity: None,
        })
        .collect();
    let mut dense = eval::Run::new("dense");
    let mut bm25 = eval::Run::new("bm25");
    for r in &records {
        dense.insert(r.query_id.clone(), vec![("p2".into(), 0.9), ("p1".into(), 0.5)]);
        bm25.insert(r.query_id.clone(), vec![("p1".into(), 3.0)]);
    }
    let d = recall_at_k(&dense, &records, &corpus, &[1, 2]).unwrap();
    let b = recall_at_k(&bm25, &records, &corpus, &[1, 2]).unwrap();
    let table = eval::recall_table(&[("dense", &d), ("bm25", &b)]);
    assert_eq!(
        table.to_csv(),
        "relation,questions,dense@1,dense@2,bm25@1,bm25@2\n\
         P19,2,0.00,50.00,50.00,50.00\n\
         P50,1,100.00,100.00,0.00,0.00\n\
         macro,3,50.00,75.00,25.00,25.00\n\
         micro,3,33.33,66.67,33.33,33.33\n"
    );
}
