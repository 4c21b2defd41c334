//! Entity-keyed dense passage retrieval.
//!
//! Passages are indexed by several vector keys (one per named entity plus
//! one for the title) and scored by the best cosine similarity among their
//! keys. A BM25 baseline, IDF_ent statistics and a recall@k harness are
//! bundled for comparison and ablation.

pub mod dense;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod model;
pub mod sparse;

pub use dense::{cosine, score_passage, KeySampler, MultiKeyIndex};
pub use embedding::{mock_embed, read_embeddings, write_embeddings, EmbeddingSet, MockEmbedder};
pub use error::{Error, Result};
pub use eval::{bucketize_by_idf_ent, is_positive, recall_at_k, run_ablation_suite, RecallReport, Run};
pub use ingest::{enumerate_keys, extract_entity_by_template, KeyManifestEntry, QuestionTemplate};
pub use model::{
    validate_corpus, ConditioningMode, EntitySpan, EntityType, EvalRecord, Passage, Provenance, Query,
    RetrievalKey, ScoredHit, ValidationReport,
};
pub use sparse::{idf_ent, tokenize, Bm25Params, IdfSource, InvertedIndex};
