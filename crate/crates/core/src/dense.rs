//! Exact multi-key dense retrieval.
//!
//! Every passage owns one or more unit-norm keys. A passage's score against
//! a query is the maximum cosine similarity over its keys, and search ranks
//! passages by that score with a brute-force scan.
//!
//! Ordering is total: passage score ties go to the smaller passage id, key
//! ties inside a passage go to the smaller key id. This makes results
//! independent of key order and of how the scan is sharded.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::ops::Range;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::ScoredHit;

/// Tolerance on key norms accepted by [`MultiKeyIndex::build`].
pub const KEY_NORM_TOLERANCE: f64 = 1e-5;

/// Cosine similarity of two unit vectors, accumulated in f64.
///
/// The result is clamped to `[-1, 1]` to absorb f32 rounding in the inputs.
pub fn cosine(q: &[f32], k: &[f32]) -> Result<f64> {
    if q.len() != k.len() {
        return Err(Error::DimensionMismatch {
            expected: q.len(),
            got: k.len(),
        });
    }
    Ok(dot(q, k))
}

#[inline]
fn dot(q: &[f32], k: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (&a, &b) in q.iter().zip(k) {
        acc += f64::from(a) * f64::from(b);
    }
    acc.clamp(-1.0, 1.0)
}

/// `true` if (score `a`, key `ka`) beats (score `b`, key `kb`) within one passage.
#[inline]
fn key_beats(a: f64, ka: &str, b: f64, kb: &str) -> bool {
    match a.total_cmp(&b) {
        Ordering::Greater => true,
        Ordering::Less => false,
        Ordering::Equal => ka < kb,
    }
}

/// Maxpool the similarities of one passage's keys against `query`.
pub fn score_passage<'a, I>(passage_id: &str, query: &[f32], keys: I) -> Result<ScoredHit>
where
    I: IntoIterator<Item = (&'a str, &'a [f32])>,
{
    let mut best: Option<(f64, &str)> = None;
    for (key_id, vector) in keys {
        let s = cosine(query, vector)?;
        best = match best {
            Some((bs, bk)) if !key_beats(s, key_id, bs, bk) => Some((bs, bk)),
            _ => Some((s, key_id)),
        };
    }
    let (score, key) = best.ok_or(Error::NoKeys)?;
    Ok(ScoredHit {
        passage_id: passage_id.to_string(),
        score,
        best_key_id: key.to_string(),
    })
}

/// Order hits by descending score, then ascending passage id.
pub fn rank_order(a_score: f64, a_id: &str, b_score: f64, b_id: &str) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a_id.cmp(b_id))
}

#[derive(Debug, Clone, PartialEq)]
struct PassageSlot {
    passage_id: String,
    rows: Range<usize>,
}

/// All keys of a corpus, stored contiguously and grouped by passage.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiKeyIndex {
    dim: usize,
    vectors: Vec<f32>,
    key_ids: Vec<String>,
    row_passage: Vec<u32>,
    passages: Vec<PassageSlot>,
}

impl MultiKeyIndex {
    /// Build from `(key_id, passage_id, vector)` triples.
    ///
    /// Passages appear in order of their first key; keys keep their input
    /// order within a passage.
    pub fn build<K, P, V, I>(keys: I, dim: usize) -> Result<Self>
    where
        K: Into<String>,
        P: AsRef<str>,
        V: AsRef<[f32]>,
        I: IntoIterator<Item = (K, P, V)>,
    {
        let mut order: Vec<String> = Vec::new();
        let mut grouped: HashMap<String, Vec<(String, V)>> = HashMap::new();
        let mut seen = HashSet::new();
        for (key_id, passage_id, vector) in keys {
            let key_id = key_id.into();
            let v = vector.as_ref();
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: v.len(),
                });
            }
            let n = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
            if n.is_nan() || (n - 1.0).abs() > KEY_NORM_TOLERANCE {
                return Err(Error::NotNormalized { id: key_id, norm: n });
            }
            if !seen.insert(key_id.clone()) {
                return Err(Error::DuplicateKeyId(key_id));
            }
            let pid = passage_id.as_ref();
            if !grouped.contains_key(pid) {
                order.push(pid.to_string());
            }
            grouped.entry(pid.to_string()).or_default().push((key_id, vector));
        }

        let mut index = Self {
            dim,
            vectors: Vec::with_capacity(seen.len() * dim),
            key_ids: Vec::with_capacity(seen.len()),
            row_passage: Vec::with_capacity(seen.len()),
            passages: Vec::with_capacity(order.len()),
        };
        for pid in order {
            let keys = grouped.remove(&pid).unwrap();
            index.push_passage(pid, keys.iter().map(|(k, v)| (k.as_str(), v.as_ref())));
        }
        Ok(index)
    }

    fn push_passage<'a>(&mut self, passage_id: String, keys: impl Iterator<Item = (&'a str, &'a [f32])>) {
        let start = self.key_ids.len();
        let slot = self.passages.len() as u32;
        for (key_id, v) in keys {
            self.key_ids.push(key_id.to_string());
            self.vectors.extend_from_slice(v);
            self.row_passage.push(slot);
        }
        let end = self.key_ids.len();
        if end > start {
            self.passages.push(PassageSlot {
                passage_id,
                rows: start..end,
            });
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn key_count(&self) -> usize {
        self.key_ids.len()
    }

    pub fn passage_count(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.key_ids.is_empty()
    }

    pub fn passage_ids(&self) -> impl Iterator<Item = &str> {
        self.passages.iter().map(|p| p.passage_id.as_str())
    }

    fn row(&self, r: usize) -> &[f32] {
        &self.vectors[r * self.dim..(r + 1) * self.dim]
    }

    /// The keys of one passage as `(key_id, vector)` pairs.
    pub fn passage_keys(&self, passage_id: &str) -> Option<Vec<(&str, &[f32])>> {
        let slot = self.passages.iter().find(|p| p.passage_id == passage_id)?;
        Some(
            slot.rows
                .clone()
                .map(|r| (self.key_ids[r].as_str(), self.row(r)))
                .collect(),
        )
    }

    /// All keys as `(key_id, passage_id, vector)` in storage order.
    pub fn keys(&self) -> impl Iterator<Item = (&str, &str, &[f32])> {
        (0..self.key_ids.len()).map(move |r| {
            (
                self.key_ids[r].as_str(),
                self.passages[self.row_passage[r] as usize].passage_id.as_str(),
                self.row(r),
            )
        })
    }

    /// Exact top-k passages by maxpooled cosine.
    pub fn search_topk(&self, query: &[f32], k: usize) -> Result<Vec<ScoredHit>> {
        self.search_sharded(query, k, 1)
    }

    /// Same as [`search_topk`](Self::search_topk), scanning the key rows in
    /// `shards` contiguous ranges on separate threads and merging the
    /// per-passage maxima. The result does not depend on `shards`.
    pub fn search_sharded(&self, query: &[f32], k: usize, shards: usize) -> Result<Vec<ScoredHit>> {
        if k == 0 {
            return Err(Error::InvalidK);
        }
        if self.is_empty() {
            return Ok(Vec::new());
        }
        if query.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: query.len(),
            });
        }
        let best = self.passage_maxima(query, shards.max(1));
        let mut scored: Vec<(f64, usize, usize)> = best
            .into_iter()
            .enumerate()
            .map(|(slot, b)| {
                let (score, row) = b.expect("every passage has at least one key");
                (score, slot, row)
            })
            .collect();
        let cmp = |a: &(f64, usize, usize), b: &(f64, usize, usize)| {
            rank_order(
                a.0,
                &self.passages[a.1].passage_id,
                b.0,
                &self.passages[b.1].passage_id,
            )
        };
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, cmp);
            scored.truncate(k);
        }
        scored.sort_unstable_by(cmp);
        Ok(scored
            .into_iter()
            .map(|(score, slot, row)| ScoredHit {
                passage_id: self.passages[slot].passage_id.clone(),
                score,
                best_key_id: self.key_ids[row].clone(),
            })
            .collect())
    }

    fn passage_maxima(&self, query: &[f32], shards: usize) -> Vec<Option<(f64, usize)>> {
        let rows = self.key_ids.len();
        let shards = shards.min(rows);
        let bounds: Vec<Range<usize>> = (0..shards)
            .map(|i| (i * rows / shards)..((i + 1) * rows / shards))
            .collect();
        let partials: Vec<Vec<(u32, f64, usize)>> = if shards == 1 {
            vec![self.scan(query, 0..rows)]
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = bounds
                    .iter()
                    .map(|r| {
                        let r = r.clone();
                        s.spawn(move || self.scan(query, r))
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().unwrap()).collect()
            })
        };
        let mut best: Vec<Option<(f64, usize)>> = vec![None; self.passages.len()];
        for part in partials {
            for (slot, score, row) in part {
                let cell = &mut best[slot as usize];
                *cell = match *cell {
                    Some((bs, br)) if !key_beats(score, &self.key_ids[row], bs, &self.key_ids[br]) => {
                        Some((bs, br))
                    }
                    _ => Some((score, row)),
                };
            }
        }
        best
    }

    /// Per-passage maxima over one contiguous range of key rows.
    fn scan(&self, query: &[f32], rows: Range<usize>) -> Vec<(u32, f64, usize)> {
        let mut out: Vec<(u32, f64, usize)> = Vec::new();
        for r in rows {
            let slot = self.row_passage[r];
            let s = dot(query, self.row(r));
            match out.last_mut() {
                Some(last) if last.0 == slot => {
                    if key_beats(s, &self.key_ids[r], last.1, &self.key_ids[last.2]) {
                        last.1 = s;
                        last.2 = r;
                    }
                }
                _ => out.push((slot, s, r)),
            }
        }
        out
    }

    /// Reduce the index with `sampler`. `idf_of_key` maps key ids to the
    /// IDF_ent of their surface and is only consulted by
    /// [`KeySampler::MaxIdfSingle`].
    pub fn apply_sampler(&self, sampler: KeySampler, idf_of_key: &HashMap<String, f64>) -> Result<Self> {
        let mut out = Self {
            dim: self.dim,
            vectors: Vec::new(),
            key_ids: Vec::new(),
            row_passage: Vec::new(),
            passages: Vec::new(),
        };
        for slot in &self.passages {
            let rows = slot.rows.clone();
            let keep: Range<usize> = match sampler {
                KeySampler::FullSet => rows,
                KeySampler::RandomSingle { seed } => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(&slot.passage_id));
                    let r = rows.start + rng.gen_range(0..rows.len());
                    r..r + 1
                }
                KeySampler::MaxIdfSingle => {
                    let mut best: Option<(f64, usize)> = None;
                    for r in rows {
                        let kid = &self.key_ids[r];
                        let idf = *idf_of_key.get(kid).ok_or_else(|| Error::MissingIdf(kid.clone()))?;
                        best = match best {
                            Some((bi, br)) if !key_beats(idf, kid, bi, &self.key_ids[br]) => Some((bi, br)),
                            _ => Some((idf, r)),
                        };
                    }
                    let r = best.expect("non-empty passage").1;
                    r..r + 1
                }
            };
            out.push_passage(
                slot.passage_id.clone(),
                keep.map(|r| (self.key_ids[r].as_str(), self.row(r))),
            );
        }
        Ok(out)
    }
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Which keys of each passage take part in search.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeySampler {
    FullSet,
    /// One uniformly chosen key per passage, reproducible from the seed.
    RandomSingle { seed: u64 },
    /// The key whose surface has the highest IDF_ent.
    MaxIdfSingle,
}

impl KeySampler {
    pub fn name(&self) -> &'static str {
        match self {
            KeySampler::FullSet => "full",
            KeySampler::RandomSingle { .. } => "random",
            KeySampler::MaxIdfSingle => "max-idf",
        }
    }

    /// Parse `full`, `random` or `max-idf`; `random` takes `seed`.
    pub fn parse_with_seed(s: &str, seed: u64) -> Result<Self> {
        match s {
            "full" => Ok(KeySampler::FullSet),
            "random" => Ok(KeySampler::RandomSingle { seed }),
            "max-idf" => Ok(KeySampler::MaxIdfSingle),
            other => Err(Error::UnknownSampler(other.to_string())),
        }
    }
}

impl FromStr for KeySampler {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse_with_seed(s, 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> MultiKeyIndex {
        MultiKeyIndex::build(
            vec![
                ("p1#0", "p1", vec![1.0f32, 0.0]),
                ("p2#0", "p2", vec![0.0, 1.0]),
                ("p2#1", "p2", vec![0.6, 0.8]),
                ("p3#0", "p3", vec![-1.0, 0.0]),
            ],
            2,
        )
        .unwrap()
    }

    #[test]
    fn cosine_cases() {
        let v = [0.6f32, 0.8];
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-7);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), -1.0);
        assert!(matches!(cosine(&[1.0], &[1.0, 0.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn build_counts_and_errors() {
        let idx = toy();
        assert_eq!(idx.key_count(), 4);
        assert_eq!(idx.passage_count(), 3);
        let dup = MultiKeyIndex::build(
            vec![("k", "a", vec![1.0f32]), ("k", "b", vec![1.0])],
            1,
        );
        assert_eq!(dup, Err(Error::DuplicateKeyId("k".into())));
        let bad = MultiKeyIndex::build(vec![("k", "a", vec![1.0f32, 0.0])], 3);
        assert!(matches!(bad, Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn empty_index_returns_nothing() {
        let idx = MultiKeyIndex::build(Vec::<(String, String, Vec<f32>)>::new(), 4).unwrap();
        assert!(idx.search_topk(&[1.0, 0.0, 0.0, 0.0], 5).unwrap().is_empty());
    }

    #[test]
    fn toy_search() {
        let hits = toy().search_topk(&[1.0, 0.0], 2).unwrap();
        let got: Vec<(&str, f64)> = hits.iter().map(|h| (h.passage_id.as_str(), h.score)).collect();
        assert_eq!(got[0], ("p1", 1.0));
        assert_eq!(got[1].0, "p2");
        assert!((got[1].1 - 0.6).abs() < 1e-7);
        assert_eq!(hits[1].best_key_id, "p2#1");
    }

    #[test]
    fn k_zero_and_truncation() {
        let idx = toy();
        assert_eq!(idx.search_topk(&[1.0, 0.0], 0), Err(Error::InvalidK));
        let all = idx.search_topk(&[1.0, 0.0], 10).unwrap();
        assert_eq!(all.len(), 3);
        assert_eq!(all[2].passage_id, "p3");
        assert_eq!(all[2].score, -1.0);
    }

    #[test]
    fn score_passage_max_and_ties() {
        // keys built so cosines are exactly 0.25, 0.5 and 0.75 against e1
        let keys = [
            ("a", vec![0.25f32, (1.0f32 - 0.0625).sqrt()]),
            ("b", vec![0.75f32, (1.0f32 - 0.5625).sqrt()]),
            ("c", vec![0.5f32, (0.75f32).sqrt()]),
        ];
        let hit = score_passage("p", &[1.0, 0.0], keys.iter().map(|(k, v)| (*k, v.as_slice()))).unwrap();
        assert_eq!(hit.score, 0.75);
        assert_eq!(hit.best_key_id, "b");

        let single = [("only", vec![0.37f32, (1.0f32 - 0.37 * 0.37).sqrt()])];
        let hit = score_passage("p", &[1.0, 0.0], single.iter().map(|(k, v)| (*k, v.as_slice()))).unwrap();
        assert_eq!(hit.score, f64::from(0.37f32));

        let tied = [("p#1", vec![0.8f32, 0.6]), ("p#0", vec![0.8f32, -0.6])];
        let hit = score_passage("p", &[1.0, 0.0], tied.iter().map(|(k, v)| (*k, v.as_slice()))).unwrap();
        assert_eq!(hit.best_key_id, "p#0");

        assert_eq!(
            score_passage("p", &[1.0], std::iter::empty()),
            Err(Error::NoKeys)
        );
    }

    #[test]
    fn max_idf_sampler() {
        let idx = toy();
        let idf: HashMap<String, f64> = [("p1#0", 1.0), ("p2#0", 7.2), ("p2#1", 3.1), ("p3#0", 0.5)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let pruned = idx.apply_sampler(KeySampler::MaxIdfSingle, &idf).unwrap();
        assert_eq!(pruned.key_count(), 3);
        assert_eq!(pruned.passage_keys("p2").unwrap()[0].0, "p2#0");
        let hits = pruned.search_topk(&[1.0, 0.0], 2).unwrap();
        assert_eq!(hits[1].passage_id, "p2");
        assert_eq!(hits[1].score, 0.0);

        let mut partial = idf.clone();
        partial.remove("p3#0");
        assert_eq!(
            idx.apply_sampler(KeySampler::MaxIdfSingle, &partial),
            Err(Error::MissingIdf("p3#0".into()))
        );
    }

    #[test]
    fn full_set_is_identity_and_random_is_seeded() {
        let idx = toy();
        let none = HashMap::new();
        assert_eq!(idx.apply_sampler(KeySampler::FullSet, &none).unwrap(), idx);
        let a = idx.apply_sampler(KeySampler::RandomSingle { seed: 7 }, &none).unwrap();
        let b = idx.apply_sampler(KeySampler::RandomSingle { seed: 7 }, &none).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.key_count(), 3);
    }

    #[test]
    fn sampler_names() {
        assert_eq!("random".parse::<KeySampler>().unwrap().name(), "random");
        assert_eq!(
            KeySampler::parse_with_seed("random", 5).unwrap(),
            KeySampler::RandomSingle { seed: 5 }
        );
        assert!("bogus".parse::<KeySampler>().is_err());
    }
}
