use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, Write};
use std::path::Path;

use serde::Serialize;
use zner_core::eval::{self, AblationInputs, BucketInput, Run, Table};
use zner_core::ingest::{self, KeyManifestEntry, QueryPrecursor, QuestionLine};
use zner_core::{
    idf_ent, read_embeddings, validate_corpus, write_embeddings, Bm25Params, ConditioningMode, EmbeddingSet, Error,
    EvalRecord, InvertedIndex, KeySampler, MockEmbedder, MultiKeyIndex, Passage,
};

use crate::config::{require, RunConfig};
use crate::{Failure, SearchArgs};

const KEYS_MANIFEST: &str = "keys.jsonl";
const QUERY_MANIFEST: &str = "queries.jsonl";
const CORPUS_SUMMARY: &str = "corpus_manifest.json";
const KEY_VECTORS: &str = "keys.znrk";
const BM25_SIDECAR: &str = "bm25.json";

fn query_vectors_name(mode: ConditioningMode) -> String {
    format!("queries-{mode}.znrk")
}

fn open(path: &Path) -> Result<BufReader<File>, Failure> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Failure::config(format!("cannot open {}: {e}", path.display())))
}

/// Open a file written by an earlier stage.
fn open_artifact(path: &Path, stage: &str) -> Result<BufReader<File>, Failure> {
    if !path.exists() {
        return Err(Failure::config(format!("{} not found; run `zner {stage}` first", path.display())));
    }
    open(path)
}

fn invalid(path: &Path, e: Error) -> Failure {
    Failure::config(format!("{}: {e}", path.display()))
}

fn corrupt(path: &Path, e: Error) -> Failure {
    Failure::data(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Failure::data(format!("cannot create {}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| Failure::data(format!("cannot write {}: {e}", path.display())))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn load_corpus(cfg: &RunConfig) -> Result<Vec<Passage>, Failure> {
    let path = require(&cfg.paths.corpus, "corpus")?;
    let passages = ingest::read_corpus(open(&path)?).map_err(|e| invalid(&path, e))?;
    let report = validate_corpus(&passages);
    if !report.is_clean() {
        return Err(Failure::config(format!(
            "{}: duplicate ids {:?}, empty bodies {:?}",
            path.display(),
            report.duplicate_ids,
            report.empty_bodies
        )));
    }
    if report.empty_title_count > 0 {
        log::info!("{} passages have no title", report.empty_title_count);
    }
    Ok(passages)
}

fn by_id(passages: &[Passage]) -> HashMap<&str, &Passage> {
    passages.iter().map(|p| (p.passage_id.as_str(), p)).collect()
}

#[derive(Serialize)]
struct CorpusSummary {
    passages: usize,
    titled_passages: usize,
    entity_spans: usize,
    keys: usize,
    zero_key_passages: Vec<String>,
    questions: usize,
    fallback_questions: usize,
}

pub fn ingest(cfg: &RunConfig) -> Result<(), Failure> {
    let passages = load_corpus(cfg)?;
    let lookup = by_id(&passages);
    let ann_path = require(&cfg.paths.annotations, "annotations")?;
    let annotations = ingest::load_ner_annotations(open(&ann_path)?, &lookup).map_err(|e| invalid(&ann_path, e))?;
    if !annotations.rejected.is_empty() {
        let lines: Vec<String> = annotations
            .rejected
            .iter()
            .take(10)
            .map(|(line, e)| format!("  line {line}: {e}"))
            .collect();
        return Err(Failure::config(format!(
            "{}: {} invalid annotations\n{}",
            ann_path.display(),
            annotations.rejected.len(),
            lines.join("\n")
        )));
    }
    let keys = ingest::enumerate_corpus_keys(&passages, &annotations.spans);

    let mut queries = Vec::new();
    if cfg.paths.questions.is_some() {
        let tpl_path = require(&cfg.paths.templates, "templates")?;
        let templates = ingest::read_templates(open(&tpl_path)?).map_err(|e| invalid(&tpl_path, e))?;
        let q_path = require(&cfg.paths.questions, "questions")?;
        let questions = ingest::read_questions(open(&q_path)?).map_err(|e| invalid(&q_path, e))?;
        for q in &questions {
            queries.push(ingest::build_query_record(q, &templates).map_err(|e| invalid(&q_path, e))?);
        }
    }

    let out = cfg.output_dir();
    let mut buf = Vec::new();
    ingest::write_jsonl(&mut buf, &keys.entries).map_err(|e| Failure::data(e.to_string()))?;
    write_file(&out.join(KEYS_MANIFEST), &buf)?;
    if !queries.is_empty() {
        let mut buf = Vec::new();
        ingest::write_jsonl(&mut buf, &queries).map_err(|e| Failure::data(e.to_string()))?;
        write_file(&out.join(QUERY_MANIFEST), &buf)?;
    }
    let summary = CorpusSummary {
        passages: passages.len(),
        titled_passages: passages.iter().filter(|p| p.has_title()).count(),
        entity_spans: annotations.span_count(),
        keys: keys.entries.len(),
        zero_key_passages: keys.zero_key_passages.clone(),
        questions: queries.len(),
        fallback_questions: queries.iter().filter(|q| q.fallback).count(),
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_file(&out.join(CORPUS_SUMMARY), json + "\n")?;

    println!("passages            {}", summary.passages);
    println!("entity spans        {}", summary.entity_spans);
    println!("keys                {}", summary.keys);
    println!("zero-key passages   {}", summary.zero_key_passages.len());
    println!("questions           {}", summary.questions);
    println!("template fallbacks  {}", summary.fallback_questions);
    Ok(())
}

fn load_manifest(cfg: &RunConfig) -> Result<Vec<KeyManifestEntry>, Failure> {
    let path = cfg.output_dir().join(KEYS_MANIFEST);
    ingest::read_jsonl(open_artifact(&path, "ingest")?).map_err(|e| corrupt(&path, e))
}

fn load_queries(cfg: &RunConfig) -> Result<Vec<QueryPrecursor>, Failure> {
    let path = cfg.output_dir().join(QUERY_MANIFEST);
    if !path.exists() {
        return Err(Failure::config(format!(
            "no questions: {} not found (set paths.questions and run `zner ingest`)",
            path.display()
        )));
    }
    let queries: Vec<QueryPrecursor> = ingest::read_jsonl(open(&path)?).map_err(|e| corrupt(&path, e))?;
    if queries.is_empty() {
        return Err(Failure::config(format!("no questions in {}", path.display())));
    }
    Ok(queries)
}

/// The vector a question is searched with under `mode`. Questions whose
/// template did not match always use the full question.
fn query_vector(embedder: &MockEmbedder, q: &QueryPrecursor, mode: ConditioningMode) -> zner_core::Result<Vec<f32>> {
    match (mode, &q.surface) {
        (ConditioningMode::FullSpan, _) | (_, None) => embedder.embed(&q.question, &q.question, ConditioningMode::FullSpan),
        (ConditioningMode::EntityAlone, Some(s)) => embedder.embed(s, "", mode),
        (ConditioningMode::EntityInFullContext, Some(s)) => embedder.embed(s, &q.question, mode),
    }
}

pub fn embed_mock(cfg: &RunConfig) -> Result<(), Failure> {
    let passages = load_corpus(cfg)?;
    let lookup = by_id(&passages);
    let manifest = load_manifest(cfg)?;
    let embedder = MockEmbedder::new(cfg.dim, cfg.seed);
    let dir = cfg.embeddings_dir();

    let mut keys = Vec::with_capacity(manifest.len());
    for entry in &manifest {
        let p = lookup
            .get(entry.pid.as_str())
            .ok_or_else(|| Failure::data(format!("key {} refers to unknown passage {}", entry.kid, entry.pid)))?;
        let v = embedder
            .embed(&entry.surface, &p.body, ConditioningMode::EntityInFullContext)
            .map_err(|e| Failure::data(format!("key {}: {e}", entry.kid)))?;
        keys.push((entry.kid.as_str(), v));
    }
    let bytes = write_embeddings(&keys, cfg.dim).map_err(|e| Failure::data(e.to_string()))?;
    write_file(&dir.join(KEY_VECTORS), bytes)?;
    println!("keys      {} vectors, dim {}", keys.len(), cfg.dim);

    if cfg.output_dir().join(QUERY_MANIFEST).exists() {
        let queries = load_queries(cfg)?;
        for &mode in &cfg.modes {
            let mut vecs = Vec::with_capacity(queries.len());
            for q in &queries {
                let v = query_vector(&embedder, q, mode).map_err(|e| Failure::data(format!("query {}: {e}", q.qid)))?;
                vecs.push((q.qid.as_str(), v));
            }
            let bytes = write_embeddings(&vecs, cfg.dim).map_err(|e| Failure::data(e.to_string()))?;
            write_file(&dir.join(query_vectors_name(mode)), bytes)?;
            println!("queries   {} vectors, mode {mode}", vecs.len());
        }
    }
    Ok(())
}

fn read_vectors(path: &Path) -> Result<EmbeddingSet, Failure> {
    let bytes = fs::read(path).map_err(|e| Failure::config(format!("cannot read {}: {e}", path.display())))?;
    let set = read_embeddings(&bytes).map_err(|e| corrupt(path, e))?;
    if set.renormalized() > 0 {
        log::warn!("{}: {} vectors were re-normalized on load", path.display(), set.renormalized());
    }
    Ok(set)
}

/// Key manifest and the full multi-key index, with coverage checked both ways.
fn load_dense(cfg: &RunConfig) -> Result<(Vec<KeyManifestEntry>, MultiKeyIndex), Failure> {
    let manifest = load_manifest(cfg)?;
    let path = cfg.embeddings_dir().join(KEY_VECTORS);
    if !path.exists() {
        return Err(Failure::config(format!("{} not found; run `zner embed-mock` first", path.display())));
    }
    let set = read_vectors(&path)?;
    let mut rows = Vec::with_capacity(manifest.len());
    for entry in &manifest {
        let v = set
            .get(&entry.kid)
            .ok_or_else(|| Failure::data(format!("key {} has no vector in {}", entry.kid, path.display())))?;
        rows.push((entry.kid.as_str(), entry.pid.as_str(), v));
    }
    if set.len() != manifest.len() {
        let known: HashMap<&str, ()> = manifest.iter().map(|e| (e.kid.as_str(), ())).collect();
        let orphan = set.ids().iter().find(|id| !known.contains_key(id.as_str()));
        return Err(Failure::data(format!(
            "{}: vector {:?} has no key in the manifest",
            path.display(),
            orphan.map(String::as_str).unwrap_or("?")
        )));
    }
    let index = MultiKeyIndex::build(rows, set.dim()).map_err(|e| corrupt(&path, e))?;
    Ok((manifest, index))
}

fn load_bm25(cfg: &RunConfig) -> Result<InvertedIndex, Failure> {
    let path = cfg.output_dir().join(BM25_SIDECAR);
    open_artifact(&path, "index")?;
    let text = fs::read_to_string(&path).map_err(|e| Failure::data(format!("cannot read {}: {e}", path.display())))?;
    InvertedIndex::from_json(&text).map_err(|e| corrupt(&path, e))
}

/// IDF_ent of every key surface. Surfaces with no tokens rank last.
fn key_idf(bm25: &InvertedIndex, manifest: &[KeyManifestEntry]) -> Result<HashMap<String, f64>, Failure> {
    let mut out = HashMap::with_capacity(manifest.len());
    for e in manifest {
        let v = match idf_ent(bm25, &e.surface) {
            Ok(v) => v,
            Err(Error::NoTokens(_)) => f64::NEG_INFINITY,
            Err(err) => return Err(Failure::data(format!("key {}: {err}", e.kid))),
        };
        out.insert(e.kid.clone(), v);
    }
    Ok(out)
}

fn sampled(
    cfg: &RunConfig,
    sampler: KeySampler,
    manifest: &[KeyManifestEntry],
    index: MultiKeyIndex,
) -> Result<MultiKeyIndex, Failure> {
    let idf = match sampler {
        KeySampler::MaxIdfSingle => key_idf(&load_bm25(cfg)?, manifest)?,
        KeySampler::FullSet => return Ok(index),
        KeySampler::RandomSingle { .. } => HashMap::new(),
    };
    index.apply_sampler(sampler, &idf).map_err(|e| Failure::data(e.to_string()))
}

pub fn index(cfg: &RunConfig) -> Result<(), Failure> {
    let passages = load_corpus(cfg)?;
    let lookup = by_id(&passages);
    let (manifest, dense) = load_dense(cfg)?;
    if let Some(e) = manifest.iter().find(|e| !lookup.contains_key(e.pid.as_str())) {
        return Err(Failure::data(format!("key {} refers to unknown passage {}", e.kid, e.pid)));
    }
    let bm25 = InvertedIndex::build(&passages).map_err(|e| Failure::data(e.to_string()))?;
    write_file(&cfg.output_dir().join(BM25_SIDECAR), bm25.to_json())?;

    let covered = dense.passage_count();
    println!("passages            {}", passages.len());
    println!("keys                {}", dense.key_count());
    println!("dim                 {}", dense.dim());
    println!(
        "keys per passage    {:.2}",
        if covered == 0 { 0.0 } else { dense.key_count() as f64 / covered as f64 }
    );
    println!("zero-key passages   {}", passages.len() - covered);
    println!("bm25 vocabulary     {}", bm25.vocabulary_size());
    Ok(())
}

fn load_query_vectors(cfg: &RunConfig, mode: ConditioningMode) -> Result<EmbeddingSet, Failure> {
    let path = cfg.embeddings_dir().join(query_vectors_name(mode));
    if !path.exists() {
        return Err(Failure::config(format!(
            "{} not found; run `zner embed-mock` with mode {mode} listed in run.modes",
            path.display()
        )));
    }
    read_vectors(&path)
}

/// A free-text question as a query record, matched against one relation's
/// template or, without one, the first template that matches.
fn adhoc_query(cfg: &RunConfig, question: &str, relation: Option<&str>) -> Result<QueryPrecursor, Failure> {
    let tpl_path = require(&cfg.paths.templates, "templates")?;
    let templates = ingest::read_templates(open(&tpl_path)?).map_err(|e| invalid(&tpl_path, e))?;
    let line = |relation: &str| QuestionLine {
        qid: "adhoc".into(),
        relation: relation.into(),
        question: question.into(),
        answers: Vec::new(),
    };
    if let Some(rel) = relation {
        return ingest::build_query_record(&line(rel), &templates).map_err(|e| Failure::config(e.to_string()));
    }
    for t in templates.iter() {
        if zner_core::extract_entity_by_template(question, t).is_ok() {
            return ingest::build_query_record(&line(&t.relation_id), &templates)
                .map_err(|e| Failure::config(e.to_string()));
        }
    }
    log::warn!("question matches no template; searching with the full question");
    Ok(QueryPrecursor {
        qid: "adhoc".into(),
        relation: String::new(),
        question: question.into(),
        answers: Vec::new(),
        start: None,
        end: None,
        surface: None,
        mode: ConditioningMode::FullSpan,
        fallback: true,
    })
}

pub fn search(cfg: &RunConfig, args: &SearchArgs) -> Result<(), Failure> {
    let k = args.k.unwrap_or_else(|| cfg.max_k());
    if k == 0 {
        return Err(Failure::config("k must be at least 1"));
    }
    let (manifest, index) = load_dense(cfg)?;
    let (qid, vector) = match (&args.qid, &args.question) {
        (Some(qid), _) => {
            let vectors = load_query_vectors(cfg, cfg.mode)?;
            let v = vectors
                .get(qid)
                .ok_or_else(|| Failure::data(format!("unknown query id {qid:?}")))?
                .to_vec();
            (qid.clone(), v)
        }
        (None, Some(text)) => {
            let q = adhoc_query(cfg, text, args.relation.as_deref())?;
            let embedder = MockEmbedder::new(index.dim(), cfg.seed);
            let v = query_vector(&embedder, &q, cfg.mode).map_err(|e| Failure::data(e.to_string()))?;
            if let Some(s) = &q.surface {
                log::info!("entity {s:?} from relation {}", q.relation);
            }
            (q.qid, v)
        }
        (None, None) => return Err(Failure::config("either --qid or --question is required")),
    };
    let index = sampled(cfg, cfg.sampler, &manifest, index)?;
    let hits = index
        .search_sharded(&vector, k, cfg.workers)
        .map_err(|e| Failure::data(e.to_string()))?;

    let surfaces: HashMap<&str, &str> = manifest.iter().map(|e| (e.kid.as_str(), e.surface.as_str())).collect();
    for (rank, h) in hits.iter().enumerate() {
        let surface = surfaces.get(h.best_key_id.as_str()).copied().unwrap_or("");
        println!("{}\t{}\t{:.6}\t{}", rank + 1, h.passage_id, h.score, surface);
    }

    let mut run = Run::new(args.tag.clone());
    run.insert(qid, hits.into_iter().map(|h| (h.passage_id, h.score)).collect());
    let out = cfg.output_dir();
    fs::create_dir_all(&out).map_err(|e| Failure::data(format!("cannot create {}: {e}", out.display())))?;
    let path = out.join("search.run");
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .and_then(|mut f| f.write_all(run.to_trec().as_bytes()))
        .map_err(|e| Failure::data(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

fn emit_table(cfg: &RunConfig, name: &str, table: &Table) -> Result<(), Failure> {
    write_file(&cfg.output_dir().join(name), table.to_csv())?;
    print!("{}", table.to_text());
    Ok(())
}

fn dense_run_for(
    cfg: &RunConfig,
    tag: &str,
    index: &MultiKeyIndex,
    records: &[EvalRecord],
) -> Result<Run, Failure> {
    let vectors = load_query_vectors(cfg, cfg.mode)?;
    let queries = records
        .iter()
        .filter_map(|r| vectors.get(&r.query_id).map(|v| (r.query_id.as_str(), v)));
    eval::dense_run(tag, index, queries, cfg.max_k(), cfg.workers).map_err(|e| Failure::data(e.to_string()))
}

pub fn eval(cfg: &RunConfig) -> Result<(), Failure> {
    let passages = load_corpus(cfg)?;
    let lookup = by_id(&passages);
    let records: Vec<EvalRecord> = load_queries(cfg)?.iter().map(QueryPrecursor::to_eval_record).collect();
    let out = cfg.output_dir();

    let mut runs: Vec<(String, Run)> = Vec::new();
    let (manifest, index) = load_dense(cfg)?;
    let index = sampled(cfg, cfg.sampler, &manifest, index)?;
    let dense = dense_run_for(cfg, "dense", &index, &records)?;
    write_file(&out.join("dense.run"), dense.to_trec())?;
    runs.push(("dense".into(), dense));

    if cfg.bm25 {
        let bm25 = load_bm25(cfg)?;
        let run = eval::bm25_run("bm25", &bm25, &Bm25Params::default(), &records, cfg.max_k())
            .map_err(|e| Failure::data(e.to_string()))?;
        write_file(&out.join("bm25.run"), run.to_trec())?;
        runs.push(("bm25".into(), run));
    }
    for path in &cfg.paths.runs {
        let run = Run::from_trec(open(path)?).map_err(|e| corrupt(path, e))?;
        let name = path.file_stem().map_or_else(|| run.tag.clone(), |s| s.to_string_lossy().into_owned());
        runs.push((name, run));
    }

    let mut reports = Vec::with_capacity(runs.len());
    for (name, run) in &runs {
        let rep = eval::recall_at_k(run, &records, &lookup, &cfg.k_values).map_err(|e| Failure::data(e.to_string()))?;
        reports.push((name.as_str(), rep));
    }
    let refs: Vec<(&str, &eval::RecallReport)> = reports.iter().map(|(n, r)| (*n, r)).collect();
    emit_table(cfg, "recall.csv", &eval::recall_table(&refs))
}

pub fn ablate(cfg: &RunConfig) -> Result<(), Failure> {
    let passages = load_corpus(cfg)?;
    let lookup = by_id(&passages);
    let records: Vec<EvalRecord> = load_queries(cfg)?.iter().map(QueryPrecursor::to_eval_record).collect();
    let (manifest, index) = load_dense(cfg)?;
    let idf_of_key = if cfg.samplers.contains(&KeySampler::MaxIdfSingle) {
        key_idf(&load_bm25(cfg)?, &manifest)?
    } else {
        HashMap::new()
    };
    let mut queries = HashMap::new();
    for &mode in &cfg.modes {
        queries.insert(mode, load_query_vectors(cfg, mode)?);
    }
    let inputs = AblationInputs {
        corpus: &lookup,
        index: &index,
        idf_of_key: &idf_of_key,
        queries: &queries,
        records: &records,
    };
    let cells = eval::run_ablation_suite(&inputs, &cfg.samplers, &cfg.modes, &cfg.k_values, cfg.workers)
        .map_err(|e| Failure::data(e.to_string()))?;
    emit_table(cfg, "ablation.csv", &eval::ablation_table(&cells))
}

pub fn buckets(cfg: &RunConfig) -> Result<(), Failure> {
    let passages = load_corpus(cfg)?;
    let lookup = by_id(&passages);
    let bm25 = load_bm25(cfg)?;
    let mut records = Vec::new();
    let mut inputs = Vec::new();
    let mut skipped = 0;
    for q in load_queries(cfg)? {
        if cfg.bucket_relation.as_ref().is_some_and(|r| *r != q.relation) {
            continue;
        }
        let idf = match &q.surface {
            Some(s) => match idf_ent(&bm25, s) {
                Ok(v) => Some(v),
                Err(Error::NoTokens(_)) => None,
                Err(e) => return Err(Failure::data(format!("query {}: {e}", q.qid))),
            },
            None => None,
        };
        match idf {
            Some(v) => {
                inputs.push(BucketInput { qid: q.qid.clone(), idf_ent: Some(v) });
                records.push(q.to_eval_record());
            }
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        log::warn!("{skipped} questions without an extracted entity are left out of the buckets");
    }
    let mut report = eval::bucketize_by_idf_ent(&inputs, cfg.bucket_count).map_err(|e| Failure::config(e.to_string()))?;

    let (manifest, index) = load_dense(cfg)?;
    let index = sampled(cfg, cfg.sampler, &manifest, index)?;
    let mut runs = vec![dense_run_for(cfg, "dense", &index, &records)?];
    if cfg.bm25 {
        runs.push(
            eval::bm25_run("bm25", &bm25, &Bm25Params::default(), &records, cfg.max_k())
                .map_err(|e| Failure::data(e.to_string()))?,
        );
    }
    for run in &runs {
        report
            .add_run(run, &records, &lookup, &cfg.k_values)
            .map_err(|e| Failure::data(e.to_string()))?;
    }
    emit_table(cfg, "buckets.csv", &report.table())
}
