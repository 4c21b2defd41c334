//! BM25 lexical baseline and IDF statistics.
//!
//! IDF uses the natural log of `(N - n_t + 0.5) / (n_t + 0.5)` and may be
//! negative for very common terms. Term weights use the Lucene shape
//! `idf * tf / (tf + k1 * (1 - b + b * dl / avgdl))`, without the `(k1 + 1)`
//! numerator, which does not change the ranking.
//!
//! A passage is indexed as its title followed by its body.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Passage;

/// Lowercase and split on maximal runs of non-alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    /// Lucene defaults.
    fn default() -> Self {
        Self { k1: 0.9, b: 0.4 }
    }
}

/// IDF of a term with `n_t` postings in a corpus of `n` passages.
pub fn idf_formula(n: usize, n_t: usize) -> f64 {
    let (n, n_t) = (n as f64, n_t as f64);
    ((n - n_t + 0.5) / (n_t + 0.5)).ln()
}

/// Anything that can report an IDF value per term.
pub trait IdfSource {
    fn idf(&self, term: &str) -> Result<f64>;
}

impl IdfSource for HashMap<String, f64> {
    fn idf(&self, term: &str) -> Result<f64> {
        self.get(term)
            .copied()
            .ok_or_else(|| Error::MissingIdf(term.to_string()))
    }
}

/// Maximum IDF over the tokens of an entity surface.
pub fn idf_ent<S: IdfSource + ?Sized>(source: &S, surface: &str) -> Result<f64> {
    let tokens = tokenize(surface);
    if tokens.is_empty() {
        return Err(Error::NoTokens(surface.to_string()));
    }
    let mut best = f64::NEG_INFINITY;
    for t in &tokens {
        best = best.max(source.idf(t)?);
    }
    Ok(best)
}

/// Term → passage postings over a fixed corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct InvertedIndex {
    passage_ids: Vec<String>,
    doc_len: Vec<u32>,
    avgdl: f64,
    postings: HashMap<String, Vec<(u32, u32)>>,
    by_id: HashMap<String, u32>,
}

impl InvertedIndex {
    pub fn build(passages: &[Passage]) -> Result<Self> {
        Self::from_texts(passages.iter().map(|p| {
            let text = if p.title.is_empty() {
                p.body.clone()
            } else {
                format!("{}\n{}", p.title, p.body)
            };
            (p.passage_id.clone(), text)
        }))
    }

    /// Build from `(passage_id, text)` pairs.
    pub fn from_texts<I, S, T>(docs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, T)>,
        S: Into<String>,
        T: AsRef<str>,
    {
        let mut docs: Vec<(String, Vec<String>)> = docs
            .into_iter()
            .map(|(id, text)| (id.into(), tokenize(text.as_ref())))
            .collect();
        docs.sort_by(|a, b| a.0.cmp(&b.0));
        if let Some(w) = docs.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::DuplicateId(w[0].0.clone()));
        }

        let mut postings: HashMap<String, Vec<(u32, u32)>> = HashMap::new();
        let mut doc_len = Vec::with_capacity(docs.len());
        let mut passage_ids = Vec::with_capacity(docs.len());
        for (ord, (id, tokens)) in docs.into_iter().enumerate() {
            let mut tf: BTreeMap<&str, u32> = BTreeMap::new();
            for t in &tokens {
                *tf.entry(t.as_str()).or_insert(0) += 1;
            }
            for (term, count) in tf {
                postings
                    .entry(term.to_string())
                    .or_default()
                    .push((ord as u32, count));
            }
            doc_len.push(tokens.len() as u32);
            passage_ids.push(id);
        }
        Ok(Self::assemble(passage_ids, doc_len, postings))
    }

    fn assemble(
        passage_ids: Vec<String>,
        doc_len: Vec<u32>,
        postings: HashMap<String, Vec<(u32, u32)>>,
    ) -> Self {
        let total: u64 = doc_len.iter().map(|&l| u64::from(l)).sum();
        let avgdl = if doc_len.is_empty() {
            0.0
        } else {
            total as f64 / doc_len.len() as f64
        };
        let by_id = passage_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i as u32))
            .collect();
        Self {
            passage_ids,
            doc_len,
            avgdl,
            postings,
            by_id,
        }
    }

    /// Number of indexed passages.
    pub fn n(&self) -> usize {
        self.passage_ids.len()
    }

    pub fn avgdl(&self) -> f64 {
        self.avgdl
    }

    pub fn doc_len(&self, passage_id: &str) -> Option<u32> {
        self.by_id.get(passage_id).map(|&i| self.doc_len[i as usize])
    }

    /// Number of passages containing `term`.
    pub fn doc_freq(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn term_freq(&self, term: &str, passage_id: &str) -> u32 {
        let Some(&ord) = self.by_id.get(passage_id) else {
            return 0;
        };
        self.postings
            .get(term)
            .and_then(|p| p.binary_search_by_key(&ord, |&(o, _)| o).ok().map(|i| p[i].1))
            .unwrap_or(0)
    }

    pub fn passage_ids(&self) -> &[String] {
        &self.passage_ids
    }

    pub fn vocabulary_size(&self) -> usize {
        self.postings.len()
    }

    fn weight(&self, params: &Bm25Params, idf: f64, tf: u32, ord: usize) -> f64 {
        let tf = f64::from(tf);
        let dl = f64::from(self.doc_len[ord]);
        idf * tf / (tf + params.k1 * (1.0 - params.b + params.b * dl / self.avgdl))
    }

    /// BM25 score of one passage for a tokenized query.
    pub fn bm25_score(&self, params: &Bm25Params, query_terms: &[String], passage_id: &str) -> Result<f64> {
        let ord = *self
            .by_id
            .get(passage_id)
            .ok_or_else(|| Error::UnknownPassage(passage_id.to_string()))? as usize;
        let mut score = 0.0;
        for t in query_terms {
            let tf = self.term_freq(t, passage_id);
            if tf > 0 {
                score += self.weight(params, self.idf(t)?, tf, ord);
            }
        }
        Ok(score)
    }

    /// Exact BM25 ranking of every passage for `question`, truncated to `k`.
    ///
    /// Passages that match no query term score 0 and still take part in the
    /// ranking (IDF can be negative).
    pub fn bm25_topk(&self, params: &Bm25Params, question: &str, k: usize) -> Result<Vec<(String, f64)>> {
        if k == 0 {
            return Err(Error::InvalidK);
        }
        let mut scores = vec![0.0f64; self.n()];
        for t in tokenize(question) {
            if let Some(post) = self.postings.get(&t) {
                let idf = idf_formula(self.n(), post.len());
                for &(ord, tf) in post {
                    scores[ord as usize] += self.weight(params, idf, tf, ord as usize);
                }
            }
        }
        // ordinals follow ascending passage id, so a stable sort keeps the tie-break
        let mut order: Vec<usize> = (0..self.n()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        Ok(order
            .into_iter()
            .take(k)
            .map(|i| (self.passage_ids[i].clone(), scores[i]))
            .collect())
    }

    pub fn to_json(&self) -> String {
        let sidecar = Sidecar {
            format: SIDECAR_FORMAT.to_string(),
            version: SIDECAR_VERSION,
            n: self.n(),
            avgdl: self.avgdl,
            passages: self
                .passage_ids
                .iter()
                .zip(&self.doc_len)
                .map(|(id, &len)| SidecarPassage { id: id.clone(), len })
                .collect(),
            postings: self
                .postings
                .iter()
                .map(|(t, p)| (t.clone(), p.clone()))
                .collect(),
        };
        serde_json::to_string(&sidecar).expect("sidecar serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let sc: Sidecar = serde_json::from_str(s).map_err(|e| Error::InvalidRecord(e.to_string()))?;
        if sc.format != SIDECAR_FORMAT {
            return Err(Error::InvalidRecord(format!("not a BM25 sidecar: {:?}", sc.format)));
        }
        if sc.version != SIDECAR_VERSION {
            return Err(Error::UnsupportedVersion(sc.version));
        }
        if sc.n != sc.passages.len() {
            return Err(Error::InvalidRecord("passage count does not match n".into()));
        }
        let (passage_ids, doc_len): (Vec<String>, Vec<u32>) =
            sc.passages.into_iter().map(|p| (p.id, p.len)).unzip();
        if passage_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidRecord("passages not sorted by id".into()));
        }
        for (term, post) in &sc.postings {
            if post.iter().any(|&(o, tf)| o as usize >= sc.n || tf == 0)
                || post.windows(2).any(|w| w[0].0 >= w[1].0)
            {
                return Err(Error::InvalidRecord(format!("bad postings for {term:?}")));
            }
        }
        Ok(Self::assemble(passage_ids, doc_len, sc.postings.into_iter().collect()))
    }
}

impl IdfSource for InvertedIndex {
    fn idf(&self, term: &str) -> Result<f64> {
        if self.n() == 0 {
            return Err(Error::EmptyIndex);
        }
        Ok(idf_formula(self.n(), self.doc_freq(term)))
    }
}

const SIDECAR_FORMAT: &str = "zner-bm25";
const SIDECAR_VERSION: u32 = 1;

/// On-disk BM25 index.
///
/// `passages` is sorted by id and its positions are the document ordinals
/// used in `postings`, which map each term to `[ordinal, tf]` pairs sorted
/// by ordinal.
#[derive(Serialize, Deserialize)]
struct Sidecar {
    format: String,
    version: u32,
    n: usize,
    avgdl: f64,
    passages: Vec<SidecarPassage>,
    postings: BTreeMap<String, Vec<(u32, u32)>>,
}

#[derive(Serialize, Deserialize)]
struct SidecarPassage {
    id: String,
    len: u32,
}
