//! Evidence-grounded network flow forensics.
//!
//! Connection logs are normalized ([`ingest`]), rendered into sentences
//! ([`summarize`]), embedded ([`embed`]) and indexed into a three-collection
//! knowledge base ([`kb`]). Analyst questions run through filtered,
//! diversity-aware, reranked retrieval with an abstention gate
//! ([`retrieval`]) before a language model produces a citation-checked
//! verdict ([`generation`]). [`labeling`] and [`eval`] score verdicts
//! against SYN/ping flood ground truth.

pub mod config;
pub mod embed;
pub mod engine;
pub mod eval;
pub mod generation;
pub mod ingest;
pub mod kb;
pub mod labeling;
mod limit;
pub mod retrieval;
pub mod service;
pub mod summarize;
pub mod synth;

pub use config::Config;
pub use embed::{cosine, Embedder, EmbedderSpec, Embedding};
pub use engine::{Answer, Engine};
pub use eval::{ConfusionMatrix, EvalReport};
pub use generation::{Decision, Verdict};
pub use ingest::{AnomalyAnnotation, Proto, Severity, Timestamp, TrafficRecord};
pub use kb::{CollectionId, KBEntry, Metadata, MetadataFilter, Store};
pub use labeling::{LabelVerdict, LabeledInstance};
pub use retrieval::{RetrievalConfig, RetrievalResult};
pub use summarize::Summary;
