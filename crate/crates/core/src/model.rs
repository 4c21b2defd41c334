//! Domain types shared by ingestion, indexing and evaluation.
//!
//! Span offsets are character offsets (Unicode scalar values), never bytes.
//! Everything here is immutable once constructed.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on ‖v‖₂ for vectors held by keys and queries.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

/// A titled text unit; the retrieval target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Passage {
    pub passage_id: String,
    pub title: String,
    pub body: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

impl Passage {
    pub fn new(
        passage_id: impl Into<String>,
        title: impl Into<String>,
        body: impl Into<String>,
    ) -> Self {
        Self {
            passage_id: passage_id.into(),
            title: title.into(),
            body: body.into(),
            metadata: BTreeMap::new(),
        }
    }

    pub fn has_title(&self) -> bool {
        !self.title.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum EntityType {
    Loc,
    Org,
    Per,
    Misc,
    Title,
    Unknown,
}

impl EntityType {
    pub fn as_str(&self) -> &'static str {
        match self {
            EntityType::Loc => "LOC",
            EntityType::Org => "ORG",
            EntityType::Per => "PER",
            EntityType::Misc => "MISC",
            EntityType::Title => "TITLE",
            EntityType::Unknown => "UNKNOWN",
        }
    }
}

impl fmt::Display for EntityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EntityType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "LOC" => Ok(EntityType::Loc),
            "ORG" => Ok(EntityType::Org),
            "PER" => Ok(EntityType::Per),
            "MISC" => Ok(EntityType::Misc),
            "TITLE" => Ok(EntityType::Title),
            "UNKNOWN" => Ok(EntityType::Unknown),
            other => Err(Error::UnknownEntityType(other.to_string())),
        }
    }
}

/// Number of characters (Unicode scalar values) in `text`.
pub fn char_len(text: &str) -> usize {
    text.chars().count()
}

/// Slice `text` by character offsets `[start, end)`.
pub fn char_slice(text: &str, start: usize, end: usize) -> Result<&str> {
    let len = char_len(text);
    if start >= end || end > len {
        return Err(Error::SpanOutOfBounds { start, end, len });
    }
    let byte_at = |pos: usize| {
        text.char_indices()
            .nth(pos)
            .map(|(b, _)| b)
            .unwrap_or(text.len())
    };
    Ok(&text[byte_at(start)..byte_at(end)])
}

/// A typed character range inside a question or passage body.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    pub surface: String,
    pub entity_type: EntityType,
}

impl EntitySpan {
    /// Build a span over `host`, taking the surface from the host text.
    pub fn from_host(host: &str, start: usize, end: usize, entity_type: EntityType) -> Result<Self> {
        let surface = char_slice(host, start, end)?.to_string();
        Ok(Self {
            start,
            end,
            surface,
            entity_type,
        })
    }

    /// Check that this span still describes `host` exactly.
    pub fn validate(&self, host: &str) -> Result<()> {
        let found = char_slice(host, self.start, self.end)?;
        if found != self.surface {
            return Err(Error::SurfaceMismatch {
                surface: self.surface.clone(),
                found: found.to_string(),
            });
        }
        Ok(())
    }
}

/// Where a retrieval key came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Entity(EntitySpan),
    Title,
}

impl Provenance {
    pub fn entity_type(&self) -> EntityType {
        match self {
            Provenance::Entity(span) => span.entity_type,
            Provenance::Title => EntityType::Title,
        }
    }
}

fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

fn check_unit(id: &str, v: &[f32]) -> Result<()> {
    let norm = l2_norm(v);
    if !norm.is_finite() || (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
        return Err(Error::NotNormalized {
            id: id.to_string(),
            norm,
        });
    }
    Ok(())
}

/// One unit-norm vector attached to a passage.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalKey {
    pub key_id: String,
    pub passage_id: String,
    pub provenance: Provenance,
    pub vector: Vec<f32>,
}

impl RetrievalKey {
    pub fn new(
        key_id: impl Into<String>,
        passage_id: impl Into<String>,
        provenance: Provenance,
        vector: Vec<f32>,
    ) -> Result<Self> {
        let key_id = key_id.into();
        check_unit(&key_id, &vector)?;
        Ok(Self {
            key_id,
            passage_id: passage_id.into(),
            provenance,
            vector,
        })
    }
}

/// Which text the encoder sees when a query is embedded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConditioningMode {
    /// The entity span, conditioned on the whole question.
    EntityInFullContext,
    /// The entity span with no surrounding context.
    EntityAlone,
    /// The whole question as a single span.
    FullSpan,
}

impl ConditioningMode {
    pub const ALL: [ConditioningMode; 3] = [
        ConditioningMode::EntityInFullContext,
        ConditioningMode::EntityAlone,
        ConditioningMode::FullSpan,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ConditioningMode::EntityInFullContext => "entity-in-context",
            ConditioningMode::EntityAlone => "entity-alone",
            ConditioningMode::FullSpan => "full-span",
        }
    }

    pub fn requires_entity(&self) -> bool {
        !matches!(self, ConditioningMode::FullSpan)
    }
}

impl fmt::Display for ConditioningMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConditioningMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entity-in-context" => Ok(ConditioningMode::EntityInFullContext),
            "entity-alone" => Ok(ConditioningMode::EntityAlone),
            "full-span" => Ok(ConditioningMode::FullSpan),
            other => Err(Error::UnknownMode(other.to_string())),
        }
    }
}

/// An embedded question.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub query_id: String,
    pub question_text: String,
    pub entity_span: Option<EntitySpan>,
    pub mode: ConditioningMode,
    pub vector: Vec<f32>,
}

impl Query {
    pub fn new(
        query_id: impl Into<String>,
        question_text: impl Into<String>,
        entity_span: Option<EntitySpan>,
        mode: ConditioningMode,
        vector: Vec<f32>,
    ) -> Result<Self> {
        let query_id = query_id.into();
        if mode.requires_entity() && entity_span.is_none() {
            return Err(Error::MissingEntity(query_id));
        }
        check_unit(&query_id, &vector)?;
        Ok(Self {
            query_id,
            question_text: question_text.into(),
            entity_span,
            mode,
            vector,
        })
    }
}

/// A passage with its maxpooled score and the key that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredHit {
    pub passage_id: String,
    pub score: f64,
    pub best_key_id: String,
}

/// A question with gold answers, used for recall and bucketing.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub query_id: String,
    pub relation_id: String,
    pub question_text: String,
    pub template_id: String,
    pub gold_answers: Vec<String>,
    pub extracted_entity: Option<EntitySpan>,
}

impl EvalRecord {
    pub fn validate(&self) -> Result<()> {
        if self.gold_answers.is_empty() {
            return Err(Error::InvalidRecord(format!(
                "{}: no gold answers",
                self.query_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub passage_count: usize,
    pub duplicate_ids: Vec<String>,
    pub empty_bodies: Vec<String>,
    pub empty_title_count: usize,
}

impl ValidationReport {
    pub fn error_count(&self) -> usize {
        self.duplicate_ids.len() + self.empty_bodies.len()
    }

    pub fn is_clean(&self) -> bool {
        self.error_count() == 0
    }
}

/// Report duplicate ids, empty bodies and empty titles. Never fails.
pub fn validate_corpus(passages: &[Passage]) -> ValidationReport {
    let mut seen: HashMap<&str, usize> = HashMap::new();
    let mut report = ValidationReport {
        passage_count: passages.len(),
        ..Default::default()
    };
    for p in passages {
        let count = seen.entry(p.passage_id.as_str()).or_insert(0);
        *count += 1;
        if *count == 2 {
            report.duplicate_ids.push(p.passage_id.clone());
        }
        if p.passage_id.is_empty() || p.body.is_empty() {
            report.empty_bodies.push(p.passage_id.clone());
        }
        if p.title.is_empty() {
            report.empty_title_count += 1;
        }
    }
    report
}
