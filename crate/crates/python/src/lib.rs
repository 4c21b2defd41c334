//! Python bindings: the `zner` extension module.

use std::collections::HashMap;

use pyo3::create_exception;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use zner_core::eval::{self, BucketInput, Run};
use zner_core::{
    Bm25Params, ConditioningMode, EvalRecord, IdfSource, InvertedIndex, KeySampler, MultiKeyIndex, Passage,
    QuestionTemplate,
};

create_exception!(zner, ZnerError, PyValueError, "Validation or data error raised by zner.");

fn err(e: zner_core::Error) -> PyErr {
    ZnerError::new_err(e.to_string())
}

fn mode(name: &str) -> PyResult<ConditioningMode> {
    name.parse().map_err(err)
}

/// Exact maxpool search over entity keys.
#[pyclass(name = "MultiKeyIndex", module = "zner", frozen)]
struct PyMultiKeyIndex {
    inner: MultiKeyIndex,
}

#[pymethods]
impl PyMultiKeyIndex {
    /// `keys` is a list of `(key_id, passage_id, vector)` with unit-norm vectors.
    #[new]
    fn new(keys: Vec<(String, String, Vec<f32>)>, dim: usize) -> PyResult<Self> {
        let inner = MultiKeyIndex::build(keys.iter().map(|(k, p, v)| (k.as_str(), p.as_str(), v)), dim).map_err(err)?;
        Ok(Self { inner })
    }

    /// Top `k` passages as `(passage_id, score, best_key_id)`.
    #[pyo3(signature = (query, k, shards = 1))]
    fn search(&self, py: Python<'_>, query: Vec<f32>, k: usize, shards: usize) -> PyResult<Vec<(String, f64, String)>> {
        let hits = py
            .detach(|| self.inner.search_sharded(&query, k, shards))
            .map_err(err)?;
        Ok(hits.into_iter().map(|h| (h.passage_id, h.score, h.best_key_id)).collect())
    }

    /// A reduced index: `full`, `random` (with `seed`) or `max-idf` (with `idf`
    /// mapping key ids to IDF_ent).
    #[pyo3(signature = (sampler, seed = 0, idf = None))]
    fn apply_sampler(&self, sampler: &str, seed: u64, idf: Option<HashMap<String, f64>>) -> PyResult<Self> {
        let s = KeySampler::parse_with_seed(sampler, seed).map_err(err)?;
        let inner = self.inner.apply_sampler(s, &idf.unwrap_or_default()).map_err(err)?;
        Ok(Self { inner })
    }

    fn passage_keys(&self, passage_id: &str) -> Option<Vec<(String, Vec<f32>)>> {
        self.inner
            .passage_keys(passage_id)
            .map(|ks| ks.into_iter().map(|(k, v)| (k.to_string(), v.to_vec())).collect())
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn key_count(&self) -> usize {
        self.inner.key_count()
    }

    #[getter]
    fn passage_count(&self) -> usize {
        self.inner.passage_count()
    }

    fn __len__(&self) -> usize {
        self.inner.passage_count()
    }

    fn __repr__(&self) -> String {
        format!(
            "MultiKeyIndex(passages={}, keys={}, dim={})",
            self.inner.passage_count(),
            self.inner.key_count(),
            self.inner.dim()
        )
    }
}

/// BM25 inverted index over `title + "\n" + body`.
#[pyclass(name = "Bm25Index", module = "zner", frozen)]
struct PyBm25Index {
    inner: InvertedIndex,
}

#[pymethods]
impl PyBm25Index {
    /// `passages` is a list of `(passage_id, title, body)`.
    #[new]
    fn new(passages: Vec<(String, String, String)>) -> PyResult<Self> {
        let ps: Vec<Passage> = passages.into_iter().map(|(id, t, b)| Passage::new(id, t, b)).collect();
        Ok(Self {
            inner: InvertedIndex::build(&ps).map_err(err)?,
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: InvertedIndex::from_json(text).map_err(err)?,
        })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[pyo3(signature = (question, k, k1 = 0.9, b = 0.4))]
    fn topk(&self, question: &str, k: usize, k1: f64, b: f64) -> PyResult<Vec<(String, f64)>> {
        self.inner.bm25_topk(&Bm25Params { k1, b }, question, k).map_err(err)
    }

    #[pyo3(signature = (question, passage_id, k1 = 0.9, b = 0.4))]
    fn score(&self, question: &str, passage_id: &str, k1: f64, b: f64) -> PyResult<f64> {
        let terms = zner_core::tokenize(question);
        self.inner.bm25_score(&Bm25Params { k1, b }, &terms, passage_id).map_err(err)
    }

    fn idf(&self, term: &str) -> PyResult<f64> {
        self.inner.idf(term).map_err(err)
    }

    /// Largest token IDF in an entity surface.
    fn idf_ent(&self, surface: &str) -> PyResult<f64> {
        zner_core::idf_ent(&self.inner, surface).map_err(err)
    }

    fn doc_freq(&self, term: &str) -> usize {
        self.inner.doc_freq(term)
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn avgdl(&self) -> f64 {
        self.inner.avgdl()
    }
}

#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    zner_core::tokenize(text)
}

#[pyfunction]
fn cosine(q: Vec<f32>, k: Vec<f32>) -> PyResult<f64> {
    zner_core::cosine(&q, &k).map_err(err)
}

/// Deterministic hashed embedding; `mode` is `entity-in-context`,
/// `entity-alone` or `full-span`.
#[pyfunction]
#[pyo3(signature = (span, context, mode = "entity-in-context", dim = 64, seed = 0))]
fn mock_embed(span: &str, context: &str, mode: &str, dim: usize, seed: u64) -> PyResult<Vec<f32>> {
    zner_core::mock_embed(span, context, self::mode(mode)?, dim, seed).map_err(err)
}

/// Serialize `(id, vector)` pairs to ZNRK bytes.
#[pyfunction]
fn write_embeddings<'py>(py: Python<'py>, entries: Vec<(String, Vec<f32>)>, dim: usize) -> PyResult<Bound<'py, PyBytes>> {
    let bytes = zner_core::write_embeddings(&entries, dim).map_err(err)?;
    Ok(PyBytes::new(py, &bytes))
}

type Entry = (String, Vec<f32>);

/// Parse ZNRK bytes into `(dim, [(id, vector)])`.
#[pyfunction]
fn read_embeddings(data: &[u8]) -> PyResult<(usize, Vec<Entry>)> {
    let set = zner_core::read_embeddings(data).map_err(err)?;
    Ok((set.dim(), set.iter().map(|(k, v)| (k.to_string(), v.to_vec())).collect()))
}

/// `(start, end, surface)` of the `[E]` slot, in character offsets.
#[pyfunction]
fn extract_entity(question: &str, pattern: &str) -> PyResult<(usize, usize, String)> {
    let t = QuestionTemplate::new("", pattern).map_err(err)?;
    let span = zner_core::extract_entity_by_template(question, &t).map_err(err)?;
    Ok((span.start, span.end, span.surface))
}

#[pyfunction]
fn normalize_text(text: &str) -> String {
    eval::normalize_text(text)
}

#[pyfunction]
fn is_positive(body: &str, answers: Vec<String>) -> bool {
    zner_core::is_positive(&Passage::new("", "", body), &answers)
}

/// Equal-size buckets of `(qid, idf_ent)` by ascending IDF_ent, as
/// `(min, max, qids)`.
#[pyfunction]
fn bucketize(items: Vec<(String, f64)>, buckets: usize) -> PyResult<Vec<(f64, f64, Vec<String>)>> {
    let inputs: Vec<BucketInput> = items
        .into_iter()
        .map(|(qid, v)| BucketInput { qid, idf_ent: Some(v) })
        .collect();
    let rep = zner_core::bucketize_by_idf_ent(&inputs, buckets).map_err(err)?;
    Ok(rep.buckets.into_iter().map(|b| (b.min, b.max, b.qids)).collect())
}

type RecallByK = HashMap<usize, f64>;

/// Recall@k in percent as `(macro, micro, per_relation)`.
///
/// `run` maps qid to ranked passage ids, `questions` is a list of
/// `(qid, relation, answers)` and `corpus` maps passage id to body.
#[pyfunction]
fn recall_at_k(
    run: HashMap<String, Vec<String>>,
    questions: Vec<(String, String, Vec<String>)>,
    corpus: HashMap<String, String>,
    k_values: Vec<usize>,
) -> PyResult<(RecallByK, RecallByK, HashMap<String, RecallByK>)> {
    let mut r = Run::new("py");
    for (qid, pids) in run {
        let n = pids.len();
        r.insert(qid, pids.into_iter().enumerate().map(|(i, p)| (p, (n - i) as f64)).collect());
    }
    let records: Vec<EvalRecord> = questions
        .into_iter()
        .map(|(qid, rel, answers)| EvalRecord {
            query_id: qid,
            relation_id: rel.clone(),
            question_text: String::new(),
            template_id: rel,
            gold_answers: answers,
            extracted_entity: None,
        })
        .collect();
    let passages: Vec<Passage> = corpus.into_iter().map(|(id, body)| Passage::new(id, "", body)).collect();
    let lookup: HashMap<&str, &Passage> = passages.iter().map(|p| (p.passage_id.as_str(), p)).collect();
    let rep = zner_core::recall_at_k(&r, &records, &lookup, &k_values).map_err(err)?;

    let per_k = |f: &dyn Fn(usize) -> Option<f64>| -> RecallByK {
        rep.k_values.iter().map(|&k| (k, f(k).unwrap_or(0.0))).collect()
    };
    let relations = rep
        .relations
        .iter()
        .map(|rel| (rel.relation.clone(), per_k(&|k| rep.recall(&rel.relation, k))))
        .collect();
    Ok((per_k(&|k| rep.macro_avg(k)), per_k(&|k| rep.micro_avg(k)), relations))
}

#[pymodule]
fn zner(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("ZnerError", m.py().get_type::<ZnerError>())?;
    m.add_class::<PyMultiKeyIndex>()?;
    m.add_class::<PyBm25Index>()?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(cosine, m)?)?;
    m.add_function(wrap_pyfunction!(mock_embed, m)?)?;
    m.add_function(wrap_pyfunction!(write_embeddings, m)?)?;
    m.add_function(wrap_pyfunction!(read_embeddings, m)?)?;
    m.add_function(wrap_pyfunction!(extract_entity, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_text, m)?)?;
    m.add_function(wrap_pyfunction!(is_positive, m)?)?;
    m.add_function(wrap_pyfunction!(bucketize, m)?)?;
    m.add_function(wrap_pyfunction!(recall_at_k, m)?)?;
    Ok(())
}
