//! Corpus, annotation, template and question ingestion.
//!
//! All inputs are JSONL. Question entities are recovered by matching the
//! question against its relation's template; passage entities come from an
//! external NER annotation file.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{char_len, ConditioningMode, EntitySpan, EntityType, EvalRecord, Passage};

pub const PLACEHOLDER: &str = "[E]";

/// A question pattern with a single `[E]` slot for the entity name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuestionTemplate {
    pub relation_id: String,
    pub pattern: String,
    prefix_len: usize,
}

impl QuestionTemplate {
    pub fn new(relation_id: impl Into<String>, pattern: impl Into<String>) -> Result<Self> {
        let pattern = pattern.into();
        let mut parts = pattern.match_indices(PLACEHOLDER);
        let prefix_len = match (parts.next(), parts.next()) {
            (Some((at, _)), None) => at,
            _ => return Err(Error::BadTemplate(pattern)),
        };
        if pattern.len() == PLACEHOLDER.len() {
            return Err(Error::BadTemplate(pattern));
        }
        Ok(Self {
            relation_id: relation_id.into(),
            pattern,
            prefix_len,
        })
    }

    pub fn prefix(&self) -> &str {
        &self.pattern[..self.prefix_len]
    }

    pub fn suffix(&self) -> &str {
        &self.pattern[self.prefix_len + PLACEHOLDER.len()..]
    }

    /// Substitute `entity` for the placeholder.
    pub fn instantiate(&self, entity: &str) -> String {
        format!("{}{}{}", self.prefix(), entity, self.suffix())
    }
}

/// Recover the entity span from a question generated by `template`.
///
/// The literal prefix is anchored at the start and the literal suffix at the
/// end; the placeholder captures everything between them.
pub fn extract_entity_by_template(question: &str, template: &QuestionTemplate) -> Result<EntitySpan> {
    if question.is_empty() {
        return Err(Error::EmptyInput);
    }
    let (prefix, suffix) = (template.prefix(), template.suffix());
    if question.len() <= prefix.len() + suffix.len()
        || !question.starts_with(prefix)
        || !question.ends_with(suffix)
    {
        return Err(Error::NoMatch(template.pattern.clone()));
    }
    let surface = &question[prefix.len()..question.len() - suffix.len()];
    let start = char_len(prefix);
    Ok(EntitySpan {
        start,
        end: start + char_len(surface),
        surface: surface.to_string(),
        entity_type: EntityType::Unknown,
    })
}

/// Templates keyed by relation id.
#[derive(Debug, Clone, Default)]
pub struct TemplateSet {
    by_relation: BTreeMap<String, QuestionTemplate>,
}

impl TemplateSet {
    pub fn new(templates: impl IntoIterator<Item = QuestionTemplate>) -> Result<Self> {
        let mut by_relation = BTreeMap::new();
        for t in templates {
            let rel = t.relation_id.clone();
            if by_relation.insert(rel.clone(), t).is_some() {
                return Err(Error::DuplicateId(rel));
            }
        }
        Ok(Self { by_relation })
    }

    pub fn get(&self, relation_id: &str) -> Option<&QuestionTemplate> {
        self.by_relation.get(relation_id)
    }

    pub fn contains(&self, relation_id: &str) -> bool {
        self.by_relation.contains_key(relation_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &QuestionTemplate> {
        self.by_relation.values()
    }

    pub fn len(&self) -> usize {
        self.by_relation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_relation.is_empty()
    }
}

/// A question ready to be embedded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryPrecursor {
    pub qid: String,
    pub relation: String,
    pub question: String,
    pub answers: Vec<String>,
    pub start: Option<usize>,
    pub end: Option<usize>,
    pub surface: Option<String>,
    pub mode: ConditioningMode,
    /// Set when template matching failed and the full question is used.
    pub fallback: bool,
}

impl QueryPrecursor {
    pub fn entity_span(&self) -> Option<EntitySpan> {
        match (self.start, self.end, &self.surface) {
            (Some(start), Some(end), Some(surface)) => Some(EntitySpan {
                start,
                end,
                surface: surface.clone(),
                entity_type: EntityType::Unknown,
            }),
            _ => None,
        }
    }

    pub fn to_eval_record(&self) -> EvalRecord {
        EvalRecord {
            query_id: self.qid.clone(),
            relation_id: self.relation.clone(),
            question_text: self.question.clone(),
            template_id: self.relation.clone(),
            gold_answers: self.answers.clone(),
            extracted_entity: self.entity_span(),
        }
    }
}

/// Attach the template entity to a question, falling back to full-span
/// conditioning (flagged) when the question does not match its template.
pub fn build_query_record(
    question: &QuestionLine,
    templates: &TemplateSet,
) -> Result<QueryPrecursor> {
    let template = templates
        .get(&question.relation)
        .ok_or_else(|| Error::UnknownRelation(question.relation.clone()))?;
    let mut rec = QueryPrecursor {
        qid: question.qid.clone(),
        relation: question.relation.clone(),
        question: question.question.clone(),
        answers: question.answers.clone(),
        start: None,
        end: None,
        surface: None,
        mode: ConditioningMode::FullSpan,
        fallback: true,
    };
    match extract_entity_by_template(&question.question, template) {
        Ok(span) => {
            rec.start = Some(span.start);
            rec.end = Some(span.end);
            rec.surface = Some(span.surface);
            rec.mode = ConditioningMode::EntityInFullContext;
            rec.fallback = false;
        }
        Err(Error::NoMatch(_)) | Err(Error::EmptyInput) => {
            log::warn!("question {} does not match template for {}", question.qid, question.relation);
        }
        Err(e) => return Err(e),
    }
    Ok(rec)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeyKind {
    Entity,
    Title,
}

/// One line of the key manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyManifestEntry {
    pub kid: String,
    pub pid: String,
    pub start: Option<usize>,
    pub end: Option<usize>,
    pub kind: KeyKind,
    pub surface: String,
}

pub fn title_key_id(passage_id: &str) -> String {
    format!("{passage_id}#t")
}

pub fn entity_key_id(passage_id: &str, ordinal: usize) -> String {
    format!("{passage_id}#{ordinal}")
}

/// Keys for one passage: one per entity span, plus one for a non-empty title.
pub fn enumerate_keys(passage: &Passage, spans: &[EntitySpan]) -> Vec<KeyManifestEntry> {
    let pid = &passage.passage_id;
    let mut out: Vec<KeyManifestEntry> = spans
        .iter()
        .enumerate()
        .map(|(i, span)| KeyManifestEntry {
            kid: entity_key_id(pid, i),
            pid: pid.clone(),
            start: Some(span.start),
            end: Some(span.end),
            kind: KeyKind::Entity,
            surface: span.surface.clone(),
        })
        .collect();
    if passage.has_title() {
        out.push(KeyManifestEntry {
            kid: title_key_id(pid),
            pid: pid.clone(),
            start: None,
            end: None,
            kind: KeyKind::Title,
            surface: passage.title.clone(),
        });
    }
    out
}

#[derive(Debug, Clone, Default)]
pub struct CorpusKeys {
    pub entries: Vec<KeyManifestEntry>,
    /// Passages with no entities and no title; unreachable by dense search.
    pub zero_key_passages: Vec<String>,
}

/// Enumerate keys for every passage in corpus order.
pub fn enumerate_corpus_keys(
    passages: &[Passage],
    spans: &BTreeMap<String, Vec<EntitySpan>>,
) -> CorpusKeys {
    let mut out = CorpusKeys::default();
    for p in passages {
        let ps = spans.get(&p.passage_id).map(Vec::as_slice).unwrap_or(&[]);
        let keys = enumerate_keys(p, ps);
        if keys.is_empty() {
            out.zero_key_passages.push(p.passage_id.clone());
        }
        out.entries.extend(keys);
    }
    if !out.zero_key_passages.is_empty() {
        log::warn!(
            "{} passages have no keys and cannot be retrieved by dense search",
            out.zero_key_passages.len()
        );
    }
    out
}

// ---- JSONL wire formats ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusLine {
    pub id: String,
    #[serde(default)]
    pub title: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationLine {
    pub pid: String,
    pub start: usize,
    pub end: usize,
    #[serde(rename = "type")]
    pub entity_type: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateLine {
    pub relation: String,
    pub pattern: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionLine {
    pub qid: String,
    pub relation: String,
    pub question: String,
    pub answers: Vec<String>,
}

/// Parse every non-blank line of a JSONL stream. Line numbers are 1-based.
pub fn read_jsonl<T, R>(reader: R) -> Result<Vec<T>>
where
    T: for<'de> Deserialize<'de>,
    R: BufRead,
{
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

/// Write items as JSONL, one compact object per line.
pub fn write_jsonl<T: Serialize, W: Write>(mut writer: W, items: &[T]) -> Result<()> {
    for item in items {
        let s = serde_json::to_string(item).map_err(|e| Error::Io(e.to_string()))?;
        writer.write_all(s.as_bytes())?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_corpus<R: BufRead>(reader: R) -> Result<Vec<Passage>> {
    let lines: Vec<CorpusLine> = read_jsonl(reader)?;
    Ok(lines
        .into_iter()
        .map(|l| Passage::new(l.id, l.title, l.text))
        .collect())
}

pub fn read_templates<R: BufRead>(reader: R) -> Result<TemplateSet> {
    let lines: Vec<TemplateLine> = read_jsonl(reader)?;
    TemplateSet::new(
        lines
            .into_iter()
            .map(|l| QuestionTemplate::new(l.relation, l.pattern))
            .collect::<Result<Vec<_>>>()?,
    )
}

pub fn read_questions<R: BufRead>(reader: R) -> Result<Vec<QuestionLine>> {
    let questions: Vec<QuestionLine> = read_jsonl(reader)?;
    for q in &questions {
        if q.answers.is_empty() {
            return Err(Error::InvalidRecord(format!("{}: no gold answers", q.qid)));
        }
    }
    Ok(questions)
}

/// Validated annotations plus the per-line rejections.
#[derive(Debug, Clone, Default)]
pub struct Annotations {
    pub spans: BTreeMap<String, Vec<EntitySpan>>,
    pub rejected: Vec<(usize, Error)>,
}

impl Annotations {
    pub fn span_count(&self) -> usize {
        self.spans.values().map(Vec::len).sum()
    }
}

/// Load NER spans and validate each against its passage body.
///
/// Bad lines are collected in `rejected` rather than aborting the load.
pub fn load_ner_annotations<R: BufRead>(
    reader: R,
    passages: &HashMap<&str, &Passage>,
) -> Result<Annotations> {
    let mut out = Annotations::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        match parse_annotation(&line, lineno, passages) {
            Ok((pid, span)) => out.spans.entry(pid).or_default().push(span),
            Err(e) => out.rejected.push((lineno, e)),
        }
    }
    Ok(out)
}

fn parse_annotation(
    line: &str,
    lineno: usize,
    passages: &HashMap<&str, &Passage>,
) -> Result<(String, EntitySpan)> {
    let ann: AnnotationLine = serde_json::from_str(line).map_err(|e| Error::MalformedLine {
        line: lineno,
        reason: e.to_string(),
    })?;
    let entity_type = match ann.entity_type.parse()? {
        t @ (EntityType::Loc | EntityType::Org | EntityType::Per | EntityType::Misc) => t,
        other => return Err(Error::UnknownEntityType(other.to_string())),
    };
    let passage = passages
        .get(ann.pid.as_str())
        .ok_or_else(|| Error::UnknownPassage(ann.pid.clone()))?;
    let span = EntitySpan::from_host(&passage.body, ann.start, ann.end, entity_type)?;
    Ok((ann.pid, span))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p19() -> QuestionTemplate {
        QuestionTemplate::new("P19", "Where was [E] born?").unwrap()
    }

    #[test]
    fn extracts_ted_howard() {
        let span = extract_entity_by_template("Where was Ted Howard born?", &p19()).unwrap();
        assert_eq!(span.surface, "Ted Howard");
        assert_eq!((span.start, span.end), (10, 20));
    }

    #[test]
    fn extracts_inside_job() {
        let t = QuestionTemplate::new("P50", "Who is the author of [E]?").unwrap();
        let span = extract_entity_by_template("Who is the author of Inside Job?", &t).unwrap();
        assert_eq!(span.surface, "Inside Job");
    }

    #[test]
    fn suffix_mismatch_is_no_match() {
        assert!(matches!(
            extract_entity_by_template("Where was X educated?", &p19()),
            Err(Error::NoMatch(_))
        ));
        // literal parts are case-sensitive
        assert!(matches!(
            extract_entity_by_template("where was X born?", &p19()),
            Err(Error::NoMatch(_))
        ));
        // nothing left for the placeholder
        assert!(matches!(
            extract_entity_by_template("Where was born?", &p19()),
            Err(Error::NoMatch(_))
        ));
    }

    #[test]
    fn template_needs_one_placeholder() {
        assert!(QuestionTemplate::new("P", "no slot").is_err());
        assert!(QuestionTemplate::new("P", "[E] and [E]").is_err());
        assert!(QuestionTemplate::new("P", "[E]").is_err());
        assert!(QuestionTemplate::new("P", "[E]?").is_ok());
    }

    #[test]
    fn key_enumeration_counts() {
        let spans = vec![
            EntitySpan::from_host("Bob met Ann", 0, 3, EntityType::Per).unwrap(),
            EntitySpan::from_host("Bob met Ann", 8, 11, EntityType::Per).unwrap(),
        ];
        let titled = Passage::new("p", "Title", "Bob met Ann");
        let keys = enumerate_keys(&titled, &spans);
        assert_eq!(keys.len(), 3);
        assert_eq!(
            keys.iter().map(|k| k.kid.as_str()).collect::<Vec<_>>(),
            ["p#0", "p#1", "p#t"]
        );
        assert!(enumerate_keys(&Passage::new("p", "", "x"), &[]).is_empty());
        let only_title = enumerate_keys(&Passage::new("p", "T", "x"), &[]);
        assert_eq!(only_title.len(), 1);
        assert_eq!(only_title[0].kind, KeyKind::Title);
    }

    #[test]
    fn annotations_validated_against_body() {
        let p = Passage::new("p1", "", "Bob was here");
        let map: HashMap<&str, &Passage> = [("p1", &p)].into_iter().collect();
        let data = concat!(
            r#"{"pid":"p1","start":0,"end":3,"type":"PER"}"#, "\n",
            r#"{"pid":"p1","start":5,"end":2,"type":"PER"}"#, "\n",
            "not json\n",
            r#"{"pid":"p9","start":0,"end":1,"type":"LOC"}"#, "\n",
            r#"{"pid":"p1","start":0,"end":1,"type":"TITLE"}"#, "\n",
        );
        let ann = load_ner_annotations(data.as_bytes(), &map).unwrap();
        assert_eq!(ann.spans["p1"].len(), 1);
        assert_eq!(ann.spans["p1"][0].surface, "Bob");
        let lines: Vec<usize> = ann.rejected.iter().map(|(l, _)| *l).collect();
        assert_eq!(lines, vec![2, 3, 4, 5]);
        assert!(matches!(ann.rejected[0].1, Error::SpanOutOfBounds { .. }));
        assert!(matches!(ann.rejected[1].1, Error::MalformedLine { .. }));
        assert!(matches!(ann.rejected[2].1, Error::UnknownPassage(_)));
    }

    #[test]
    fn empty_annotation_file() {
        let ann = load_ner_annotations(&b""[..], &HashMap::new()).unwrap();
        assert!(ann.spans.is_empty());
        assert!(ann.rejected.is_empty());
    }

    #[test]
    fn query_record_paths() {
        let templates = TemplateSet::new([p19()]).unwrap();
        let q = |rel: &str, text: &str| QuestionLine {
            qid: "q".into(),
            relation: rel.into(),
            question: text.into(),
            answers: vec!["Leeds".into()],
        };
        let hit = build_query_record(&q("P19", "Where was Ted Howard born?"), &templates).unwrap();
        assert_eq!(hit.mode, ConditioningMode::EntityInFullContext);
        assert_eq!(hit.surface.as_deref(), Some("Ted Howard"));
        assert!(!hit.fallback);

        let miss = build_query_record(&q("P19", "Who raised Ted?"), &templates).unwrap();
        assert_eq!(miss.mode, ConditioningMode::FullSpan);
        assert!(miss.fallback);
        assert!(miss.entity_span().is_none());

        assert_eq!(
            build_query_record(&q("P999", "x"), &templates),
            Err(Error::UnknownRelation("P999".into()))
        );
    }

    #[test]
    fn manifest_wire_format() {
        let p = Passage::new("p1", "Leeds", "Bob");
        let spans = vec![EntitySpan::from_host("Bob", 0, 3, EntityType::Per).unwrap()];
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &enumerate_keys(&p, &spans)).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            concat!(
                r#"{"kid":"p1#0","pid":"p1","start":0,"end":3,"kind":"entity","surface":"Bob"}"#, "\n",
                r#"{"kid":"p1#t","pid":"p1","start":null,"end":null,"kind":"title","surface":"Leeds"}"#, "\n",
            )
        );
    }
}
