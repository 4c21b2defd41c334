//! Recall@k evaluation, IDF_ent bucketing and the ablation grid.
//!
//! A retrieved passage is positive for a question when any gold answer,
//! after normalization, is a substring of the normalized passage body.
//! Recall values are percentages.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::BufRead;

use crate::dense::{KeySampler, MultiKeyIndex};
use crate::embedding::EmbeddingSet;
use crate::error::{Error, Result};
use crate::model::{ConditioningMode, EvalRecord, Passage};
use crate::sparse::{Bm25Params, InvertedIndex};

/// Lowercase, collapse whitespace runs to one space, trim.
pub fn normalize_text(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn is_positive(passage: &Passage, gold_answers: &[String]) -> bool {
    contains_answer(&normalize_text(&passage.body), gold_answers)
}

fn contains_answer(normalized_body: &str, gold_answers: &[String]) -> bool {
    gold_answers.iter().any(|a| {
        let a = normalize_text(a);
        !a.is_empty() && normalized_body.contains(&a)
    })
}

/// Sort and dedup `k_values`, rejecting an empty list or `k = 0`.
pub fn validate_k_values(k_values: &[usize]) -> Result<Vec<usize>> {
    if k_values.is_empty() || k_values.contains(&0) {
        return Err(Error::InvalidK);
    }
    let mut ks = k_values.to_vec();
    ks.sort_unstable();
    ks.dedup();
    Ok(ks)
}

/// Ranked results per query, as read from or written to a TREC run file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Run {
    pub tag: String,
    pub results: BTreeMap<String, Vec<(String, f64)>>,
}

impl Run {
    pub fn new(tag: impl Into<String>) -> Self {
        Self {
            tag: tag.into(),
            results: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, qid: impl Into<String>, ranked: Vec<(String, f64)>) {
        self.results.insert(qid.into(), ranked);
    }

    /// `qid Q0 passage_id rank score tag` lines, ranks starting at 1.
    pub fn to_trec(&self) -> String {
        let mut out = String::new();
        for (qid, hits) in &self.results {
            for (rank, (pid, score)) in hits.iter().enumerate() {
                writeln!(out, "{qid} Q0 {pid} {} {score:.6} {}", rank + 1, self.tag).unwrap();
            }
        }
        out
    }

    pub fn from_trec<R: BufRead>(reader: R) -> Result<Self> {
        let mut run = Run::default();
        let mut staged: BTreeMap<String, Vec<(usize, String, f64)>> = BTreeMap::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |reason: &str| Error::MalformedLine {
                line: i + 1,
                reason: reason.to_string(),
            };
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 6 {
                return Err(bad("expected 6 fields"));
            }
            let rank: usize = f[3].parse().map_err(|_| bad("rank is not an integer"))?;
            let score: f64 = f[4].parse().map_err(|_| bad("score is not a number"))?;
            if run.tag.is_empty() {
                run.tag = f[5].to_string();
            }
            staged
                .entry(f[0].to_string())
                .or_default()
                .push((rank, f[2].to_string(), score));
        }
        for (qid, mut hits) in staged {
            hits.sort_by_key(|h| h.0);
            run.results
                .insert(qid, hits.into_iter().map(|(_, p, s)| (p, s)).collect());
        }
        Ok(run)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelationRecall {
    pub relation: String,
    pub questions: usize,
    /// Hit counts, parallel to the report's `k_values`.
    pub hits: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecallReport {
    pub k_values: Vec<usize>,
    pub relations: Vec<RelationRecall>,
    pub missing_runs: usize,
}

fn pct(hits: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        hits as f64 * 100.0 / n as f64
    }
}

impl RecallReport {
    pub fn recall(&self, relation: &str, k: usize) -> Option<f64> {
        let ki = self.k_values.iter().position(|&x| x == k)?;
        let r = self.relations.iter().find(|r| r.relation == relation)?;
        Some(pct(r.hits[ki], r.questions))
    }

    /// Unweighted mean of per-relation recall.
    pub fn macro_avg(&self, k: usize) -> Option<f64> {
        let ki = self.k_values.iter().position(|&x| x == k)?;
        if self.relations.is_empty() {
            return Some(0.0);
        }
        let sum: f64 = self
            .relations
            .iter()
            .map(|r| pct(r.hits[ki], r.questions))
            .sum();
        Some(sum / self.relations.len() as f64)
    }

    /// Total hits over total questions.
    pub fn micro_avg(&self, k: usize) -> Option<f64> {
        let ki = self.k_values.iter().position(|&x| x == k)?;
        let hits = self.relations.iter().map(|r| r.hits[ki]).sum();
        Some(pct(hits, self.question_count()))
    }

    pub fn question_count(&self) -> usize {
        self.relations.iter().map(|r| r.questions).sum()
    }
}

/// Rank (0-based) of the first positive passage within the top `depth`.
fn first_positive(
    ranked: &[(String, f64)],
    answers: &[String],
    corpus: &HashMap<&str, &Passage>,
    depth: usize,
) -> Option<usize> {
    ranked.iter().take(depth).position(|(pid, _)| {
        corpus
            .get(pid.as_str())
            .is_some_and(|p| is_positive(p, answers))
    })
}

/// Recall@k for every relation and every `k`.
///
/// Questions without a ranked list in `run` count as misses and are tallied
/// in `missing_runs`.
pub fn recall_at_k(
    run: &Run,
    records: &[EvalRecord],
    corpus: &HashMap<&str, &Passage>,
    k_values: &[usize],
) -> Result<RecallReport> {
    let k_values = validate_k_values(k_values)?;
    let depth = *k_values.last().unwrap();
    let mut per_rel: BTreeMap<&str, RelationRecall> = BTreeMap::new();
    let mut missing = 0;
    for rec in records {
        let entry = per_rel.entry(&rec.relation_id).or_insert_with(|| RelationRecall {
            relation: rec.relation_id.clone(),
            questions: 0,
            hits: vec![0; k_values.len()],
        });
        entry.questions += 1;
        let first = match run.results.get(&rec.query_id) {
            Some(ranked) => first_positive(ranked, &rec.gold_answers, corpus, depth),
            None => {
                missing += 1;
                None
            }
        };
        if let Some(rank) = first {
            for (ki, &k) in k_values.iter().enumerate() {
                if rank < k {
                    entry.hits[ki] += 1;
                }
            }
        }
    }
    if missing > 0 {
        log::warn!("{missing} questions have no results in run {:?}", run.tag);
    }
    Ok(RecallReport {
        k_values,
        relations: per_rel.into_values().collect(),
        missing_runs: missing,
    })
}

/// One question's entity rarity, `None` when no entity was extracted.
#[derive(Debug, Clone, PartialEq)]
pub struct BucketInput {
    pub qid: String,
    pub idf_ent: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bucket {
    pub min: f64,
    pub max: f64,
    pub qids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BucketRecall {
    pub run: String,
    pub k: usize,
    /// Percent, one per bucket.
    pub recall: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BucketReport {
    pub buckets: Vec<Bucket>,
    pub recalls: Vec<BucketRecall>,
}

/// Split questions into `bucket_count` equal groups by ascending IDF_ent.
///
/// Ties are ordered by qid; the remainder goes to the earliest buckets.
pub fn bucketize_by_idf_ent(inputs: &[BucketInput], bucket_count: usize) -> Result<BucketReport> {
    let mut items: Vec<(&str, f64)> = Vec::with_capacity(inputs.len());
    for i in inputs {
        match i.idf_ent {
            Some(v) if v.is_finite() => items.push((&i.qid, v)),
            _ => return Err(Error::MissingEntity(i.qid.clone())),
        }
    }
    if bucket_count == 0 || bucket_count > items.len() {
        return Err(Error::TooManyBuckets {
            records: items.len(),
            buckets: bucket_count,
        });
    }
    items.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(b.0)));

    let base = items.len() / bucket_count;
    let extra = items.len() % bucket_count;
    let mut buckets = Vec::with_capacity(bucket_count);
    let mut at = 0;
    for b in 0..bucket_count {
        let size = base + usize::from(b < extra);
        let chunk = &items[at..at + size];
        at += size;
        buckets.push(Bucket {
            min: chunk[0].1,
            max: chunk[size - 1].1,
            qids: chunk.iter().map(|(q, _)| q.to_string()).collect(),
        });
    }
    Ok(BucketReport {
        buckets,
        recalls: Vec::new(),
    })
}

impl BucketReport {
    pub fn sizes(&self) -> Vec<usize> {
        self.buckets.iter().map(|b| b.qids.len()).collect()
    }

    /// Add per-bucket recall@k for `run`.
    pub fn add_run(
        &mut self,
        run: &Run,
        records: &[EvalRecord],
        corpus: &HashMap<&str, &Passage>,
        k_values: &[usize],
    ) -> Result<()> {
        let k_values = validate_k_values(k_values)?;
        let depth = *k_values.last().unwrap();
        let by_qid: HashMap<&str, &EvalRecord> =
            records.iter().map(|r| (r.query_id.as_str(), r)).collect();
        let firsts: Vec<Vec<Option<usize>>> = self
            .buckets
            .iter()
            .map(|b| {
                b.qids
                    .iter()
                    .map(|q| {
                        let rec = by_qid.get(q.as_str())?;
                        let ranked = run.results.get(q)?;
                        first_positive(ranked, &rec.gold_answers, corpus, depth)
                    })
                    .collect()
            })
            .collect();
        for &k in &k_values {
            let recall = firsts
                .iter()
                .map(|f| pct(f.iter().filter(|r| r.is_some_and(|r| r < k)).count(), f.len()))
                .collect();
            self.recalls.push(BucketRecall {
                run: run.tag.clone(),
                k,
                recall,
            });
        }
        Ok(())
    }

    pub fn table(&self) -> Table {
        let mut header = vec![
            "bucket".to_string(),
            "idf_min".to_string(),
            "idf_max".to_string(),
            "questions".to_string(),
        ];
        header.extend(self.recalls.iter().map(|r| format!("{}@{}", r.run, r.k)));
        let rows = self
            .buckets
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let mut row = vec![
                    (i + 1).to_string(),
                    format!("{:.4}", b.min),
                    format!("{:.4}", b.max),
                    b.qids.len().to_string(),
                ];
                row.extend(self.recalls.iter().map(|r| format!("{:.2}", r.recall[i])));
                row
            })
            .collect();
        Table { header, rows }
    }
}

type Ranked = Vec<(String, f64)>;

/// Run every query through the dense index on up to `workers` threads.
///
/// Output is identical for any worker count.
pub fn dense_run<'a, I>(tag: &str, index: &MultiKeyIndex, queries: I, k: usize, workers: usize) -> Result<Run>
where
    I: IntoIterator<Item = (&'a str, &'a [f32])>,
{
    let queries: Vec<(&str, &[f32])> = queries.into_iter().collect();
    let workers = workers.clamp(1, queries.len().max(1));
    let chunk = queries.len().div_ceil(workers).max(1);
    let search = |part: &[(&str, &[f32])]| -> Result<Vec<(String, Ranked)>> {
        part.iter()
            .map(|(qid, v)| {
                let hits = index.search_topk(v, k)?;
                Ok((
                    qid.to_string(),
                    hits.into_iter().map(|h| (h.passage_id, h.score)).collect(),
                ))
            })
            .collect()
    };
    let parts: Vec<Result<Vec<_>>> = if workers == 1 {
        vec![search(&queries)]
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = queries
                .chunks(chunk)
                .map(|part| s.spawn(move || search(part)))
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        })
    };
    let mut run = Run::new(tag);
    for part in parts {
        for (qid, hits) in part? {
            run.insert(qid, hits);
        }
    }
    Ok(run)
}

/// BM25 over each record's full question text.
pub fn bm25_run(tag: &str, index: &InvertedIndex, params: &Bm25Params, records: &[EvalRecord], k: usize) -> Result<Run> {
    let mut run = Run::new(tag);
    for r in records {
        run.insert(r.query_id.clone(), index.bm25_topk(params, &r.question_text, k)?);
    }
    Ok(run)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationCell {
    pub sampler: KeySampler,
    pub mode: ConditioningMode,
    pub report: RecallReport,
}

/// Inputs shared by every cell of the ablation grid.
pub struct AblationInputs<'a> {
    pub corpus: &'a HashMap<&'a str, &'a Passage>,
    pub index: &'a MultiKeyIndex,
    pub idf_of_key: &'a HashMap<String, f64>,
    pub queries: &'a HashMap<ConditioningMode, EmbeddingSet>,
    pub records: &'a [EvalRecord],
}

/// Recall for every (sampler, mode) pair, sampler-major.
pub fn run_ablation_suite(
    inputs: &AblationInputs<'_>,
    samplers: &[KeySampler],
    modes: &[ConditioningMode],
    k_values: &[usize],
    workers: usize,
) -> Result<Vec<AblationCell>> {
    let k_values = validate_k_values(k_values)?;
    let depth = *k_values.last().unwrap();
    let mut cells = Vec::with_capacity(samplers.len() * modes.len());
    for &sampler in samplers {
        let pruned;
        let index = if sampler == KeySampler::FullSet {
            inputs.index
        } else {
            pruned = inputs.index.apply_sampler(sampler, inputs.idf_of_key)?;
            &pruned
        };
        for &mode in modes {
            let qs = inputs.queries.get(&mode).ok_or_else(|| {
                Error::InvalidRecord(format!("no query embeddings for mode {mode}"))
            })?;
            let wanted = inputs
                .records
                .iter()
                .filter_map(|r| qs.get(&r.query_id).map(|v| (r.query_id.as_str(), v)));
            let tag = format!("{}-{}", sampler.name(), mode);
            let run = dense_run(&tag, index, wanted, depth, workers)?;
            let report = recall_at_k(&run, inputs.records, inputs.corpus, &k_values)?;
            cells.push(AblationCell {
                sampler,
                mode,
                report,
            });
        }
    }
    Ok(cells)
}

pub fn ablation_table(cells: &[AblationCell]) -> Table {
    let ks: Vec<usize> = cells.first().map(|c| c.report.k_values.clone()).unwrap_or_default();
    let mut header = vec!["sampler".to_string(), "mode".to_string()];
    header.extend(ks.iter().map(|k| format!("macro@{k}")));
    header.extend(ks.iter().map(|k| format!("micro@{k}")));
    let rows = cells
        .iter()
        .map(|c| {
            let mut row = vec![c.sampler.name().to_string(), c.mode.to_string()];
            row.extend(ks.iter().map(|&k| format!("{:.2}", c.report.macro_avg(k).unwrap_or(0.0))));
            row.extend(ks.iter().map(|&k| format!("{:.2}", c.report.micro_avg(k).unwrap_or(0.0))));
            row
        })
        .collect();
    Table { header, rows }
}

/// One row per relation plus macro and micro rows, one column per run and k.
pub fn recall_table(reports: &[(&str, &RecallReport)]) -> Table {
    let mut header = vec!["relation".to_string(), "questions".to_string()];
    for (name, rep) in reports {
        header.extend(rep.k_values.iter().map(|k| format!("{name}@{k}")));
    }
    let Some((_, first)) = reports.first() else {
        return Table { header, rows: Vec::new() };
    };
    let mut rows = Vec::new();
    for rel in &first.relations {
        let mut row = vec![rel.relation.clone(), rel.questions.to_string()];
        for (_, rep) in reports {
            for &k in &rep.k_values {
                row.push(format!("{:.2}", rep.recall(&rel.relation, k).unwrap_or(0.0)));
            }
        }
        rows.push(row);
    }
    for (label, f) in [
        ("macro", RecallReport::macro_avg as fn(&RecallReport, usize) -> Option<f64>),
        ("micro", RecallReport::micro_avg),
    ] {
        let mut row = vec![label.to_string(), first.question_count().to_string()];
        for (_, rep) in reports {
            for &k in &rep.k_values {
                row.push(format!("{:.2}", f(rep, k).unwrap_or(0.0)));
            }
        }
        rows.push(row);
    }
    Table { header, rows }
}

/// A small string table rendered as CSV or aligned text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).expect("in-memory write");
        for row in &self.rows {
            w.write_record(row).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
    }

    pub fn to_text(&self) -> String {
        let mut widths: Vec<usize> = self.header.iter().map(|h| h.chars().count()).collect();
        for row in &self.rows {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.chars().count());
            }
        }
        let mut out = String::new();
        let mut line = |cells: &[String]| {
            let parts: Vec<String> = cells
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, &w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            out.push_str(parts.join("  ").trim_end());
            out.push('\n');
        };
        line(&self.header);
        for row in &self.rows {
            line(row);
        }
        out
    }
}
