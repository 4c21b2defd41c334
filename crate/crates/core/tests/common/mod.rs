//! Generators and brute-force oracles shared by the integration tests.
//!
//! The oracles here deliberately avoid the library's scoring paths: they
//! recompute dot products, maxima, IDF and BM25 weights with plain loops.

#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn random_unit<R: Rng>(rng: &mut R, dim: usize) -> Vec<f32> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.iter().map(|x| (x / n) as f32).collect();
        }
    }
}

pub fn random_word<R: Rng>(rng: &mut R, len: usize) -> String {
    (0..len).map(|_| rng.gen_range(b'a'..=b'z') as char).collect()
}

/// Key triples `(key_id, passage_id, vector)`.
pub type Keys = Vec<(String, String, Vec<f32>)>;

/// Plain f64 dot product clamped to [-1, 1].
pub fn oracle_dot(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0f64;
    for i in 0..a.len() {
        s += a[i] as f64 * b[i] as f64;
    }
    s.clamp(-1.0, 1.0)
}

/// Naive double loop: every passage, every key; then a full sort.
pub fn oracle_search(keys: &Keys, query: &[f32], k: usize) -> Vec<(String, f64, String)> {
    let mut best: BTreeMap<&str, (f64, &str)> = BTreeMap::new();
    for (kid, pid, v) in keys {
        let s = oracle_dot(query, v);
        let e = best.entry(pid).or_insert((s, kid));
        if s > e.0 || (s == e.0 && kid.as_str() < e.1) {
            *e = (s, kid);
        }
    }
    let mut all: Vec<(String, f64, String)> = best
        .into_iter()
        .map(|(p, (s, k))| (p.to_string(), s, k.to_string()))
        .collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

/// A passage-grouped random key set with `min..=max` keys per passage.
pub fn random_keys<R: Rng>(rng: &mut R, passages: usize, min: usize, max: usize, dim: usize) -> Keys {
    let mut out = Vec::new();
    for p in 0..passages {
        let pid = format!("p{p:05}");
        for j in 0..rng.gen_range(min..=max) {
            out.push((format!("{pid}#{j}"), pid.clone(), random_unit(rng, dim)));
        }
    }
    out.shuffle(rng);
    out
}

pub const VOCAB: &[&str] = &[
    "the", "of", "born", "city", "river", "author", "film", "leeds", "paris", "job", "inside", "music",
    "war", "king", "north", "house", "school", "art", "sea", "park",
];

pub fn random_doc<R: Rng>(rng: &mut R, vocab: usize) -> String {
    let len = rng.gen_range(1..30);
    (0..len)
        .map(|_| VOCAB[rng.gen_range(0..vocab)])
        .collect::<Vec<_>>()
        .join(" ")
}

/// BM25 by scanning every document for every query term.
pub fn oracle_bm25(docs: &[(String, String)], query: &str, k1: f64, b: f64, k: usize) -> Vec<(String, f64)> {
    let toks: Vec<Vec<String>> = docs.iter().map(|(_, t)| zner_core::tokenize(t)).collect();
    let n = docs.len();
    let total: u64 = toks.iter().map(|t| t.len() as u64).sum();
    let avgdl = total as f64 / n as f64;
    let q = zner_core::tokenize(query);
    let mut scored: Vec<(String, f64)> = Vec::new();
    for (d, (pid, _)) in docs.iter().enumerate() {
        let mut score = 0.0;
        for t in &q {
            let tf = toks[d].iter().filter(|x| *x == t).count();
            if tf == 0 {
                continue;
            }
            let n_t = toks.iter().filter(|doc| doc.contains(t)).count();
            let idf = ((n as f64 - n_t as f64 + 0.5) / (n_t as f64 + 0.5)).ln();
            let tf = tf as f64;
            let dl = toks[d].len() as f64;
            score += idf * tf / (tf + k1 * (1.0 - b + b * dl / avgdl));
        }
        scored.push((pid.clone(), score));
    }
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

pub fn idf_map(pairs: &[(&str, f64)]) -> HashMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}
