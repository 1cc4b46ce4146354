//! End-to-end wiring: knowledge-base construction, question answering and
//! batch triage of traffic groups.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::net::IpAddr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::Config;
use crate::embed::{EmbedError, Embedder};
use crate::eval::Prediction;
use crate::generation::{build_prompt, parse_verdict, GenerationError, LlmClient, Verdict};
use crate::ingest::{Proto, TrafficRecord};
use crate::kb::{CollectionId, KBEntry, KbError, Metadata, Store};
use crate::retrieval::{
    extract_entities, retrieve_with_entities, CrossScorer, QueryEntities, RetrievalConfig, RetrievalError,
    RetrievalResult, ScorerError,
};
use crate::summarize::{summarize_document, summarize_record, SourceHint, SummarizeError, SummarizeOptions};

const EMBED_BATCH: usize = 256;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("question is empty")]
    EmptyQuestion,
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Generation(#[from] GenerationError),
    #[error(transparent)]
    Store(#[from] KbError),
    #[error(transparent)]
    Summarize(#[from] SummarizeError),
    #[error("embedder produces {embedder}-dim vectors but the store holds {store}-dim vectors")]
    DimensionMismatch { embedder: usize, store: usize },
}

impl EngineError {
    /// True for failures of a remote backend rather than of the request.
    pub fn is_backend_unavailable(&self) -> bool {
        matches!(
            self,
            EngineError::Embed(EmbedError::RemoteUnavailable(_))
                | EngineError::Scorer(ScorerError::ScorerUnavailable(_))
                | EngineError::Generation(GenerationError::RemoteUnavailable(_))
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub verdict: Verdict,
    pub retrieval: RetrievalResult,
    /// Entities the retrieval filter was built from.
    pub entities: QueryEntities,
}

pub struct Engine {
    store: Store,
    embedder: Box<dyn Embedder>,
    scorer: Box<dyn CrossScorer>,
    llm: Box<dyn LlmClient>,
    pub retrieval: RetrievalConfig,
    pub context_tokens: Option<usize>,
}

impl Engine {
    pub fn new(
        store: Store,
        embedder: Box<dyn Embedder>,
        scorer: Box<dyn CrossScorer>,
        llm: Box<dyn LlmClient>,
        retrieval: RetrievalConfig,
    ) -> Result<Self, EngineError> {
        if embedder.dim() != store.dim() {
            return Err(EngineError::DimensionMismatch { embedder: embedder.dim(), store: store.dim() });
        }
        retrieval.validate()?;
        Ok(Self { store, embedder, scorer, llm, retrieval, context_tokens: None })
    }

    pub fn from_config(cfg: &Config, store: Store) -> Result<Self, EngineError> {
        let mut e = Self::new(store, cfg.embedder.build()?, cfg.scorer.build()?, cfg.llm.build()?, cfg.retrieval.clone())?;
        e.context_tokens = Some(cfg.llm.context_tokens);
        Ok(e)
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn into_store(self) -> Store {
        self.store
    }

    pub fn answer(&self, question: &str) -> Result<Answer, EngineError> {
        self.answer_with_entities(question, &extract_entities(question))
    }

    /// Answers with a caller-built filter; the language model is consulted
    /// only when the retrieval gate passes.
    pub fn answer_with_entities(&self, question: &str, entities: &QueryEntities) -> Result<Answer, EngineError> {
        if question.trim().is_empty() {
            return Err(EngineError::EmptyQuestion);
        }
        let qvec = self.embedder.embed(question)?;
        let retrieval =
            retrieve_with_entities(&self.store, &self.retrieval, question, &qvec, entities, self.scorer.as_ref())?;
        let verdict = if retrieval.passed() {
            let prompt = build_prompt(question, &retrieval, self.context_tokens)?;
            let raw = self.llm.complete(&prompt)?;
            if prompt.evidence_block.len() < retrieval.items.len() {
                let mut shown = retrieval.clone();
                shown.items.truncate(prompt.evidence_block.len());
                parse_verdict(&raw, &shown)?
            } else {
                parse_verdict(&raw, &retrieval)?
            }
        } else {
            Verdict::undecidable(&retrieval.diagnostics)
        };
        Ok(Answer { verdict, retrieval, entities: entities.clone() })
    }
}

fn collection_for(hint: SourceHint) -> CollectionId {
    match hint {
        SourceHint::Telemetry => CollectionId::Telemetry,
        SourceHint::Anomaly => CollectionId::Anomaly,
        SourceHint::Heuristic => CollectionId::Heuristic,
    }
}

fn upsert_embedded(store: &Store, embedder: &dyn Embedder, collection: CollectionId, items: Vec<(String, String, Metadata)>) -> Result<usize, EngineError> {
    let mut n = 0;
    for chunk in items.chunks(EMBED_BATCH) {
        let texts: Vec<&str> = chunk.iter().map(|c| c.1.as_str()).collect();
        let vectors = embedder.embed_batch(&texts)?;
        let entries: Vec<KBEntry> = chunk
            .iter()
            .zip(vectors)
            .map(|((id, text, meta), vector)| KBEntry { entry_id: id.clone(), summary: text.clone(), vector, meta: meta.clone() })
            .collect();
        store.upsert(collection, &entries)?;
        n += entries.len();
    }
    Ok(n)
}

/// Summarizes, embeds and upserts records; anomalous ones go to the anomaly
/// collection, the rest to telemetry. Returns per-collection counts.
pub fn index_records(
    store: &Store,
    embedder: &dyn Embedder,
    records: &[TrafficRecord],
    opts: &SummarizeOptions,
) -> Result<BTreeMap<CollectionId, usize>, EngineError> {
    let mut routed: BTreeMap<CollectionId, Vec<(String, String, Metadata)>> = BTreeMap::new();
    for r in records {
        let s = summarize_record(r, opts);
        routed.entry(collection_for(s.hint)).or_default().push((s.record_id, s.text, Metadata::from_record(r)));
    }
    let mut counts = BTreeMap::new();
    for (c, items) in routed {
        counts.insert(c, upsert_embedded(store, embedder, c, items)?);
    }
    Ok(counts)
}

/// Reference prose for the heuristic collection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceDoc {
    pub doc_id: String,
    pub text: String,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

pub fn read_docs_jsonl<R: BufRead>(input: R) -> Result<Vec<ReferenceDoc>, std::io::Error> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).map_err(std::io::Error::other)?);
        }
    }
    Ok(out)
}

pub fn index_documents(store: &Store, embedder: &dyn Embedder, docs: &[ReferenceDoc]) -> Result<usize, EngineError> {
    let mut items = Vec::new();
    for d in docs {
        for s in summarize_document(&d.doc_id, &d.text, &d.metadata)? {
            let meta = Metadata {
                record_id: s.record_id.clone(),
                heuristic_code: d.metadata.get("heuristic_code").and_then(|v| v.parse().ok()),
                label: d.metadata.get("taxonomy").cloned(),
                ..Default::default()
            };
            items.push((s.record_id, s.text, meta));
        }
    }
    upsert_embedded(store, embedder, CollectionId::Heuristic, items)
}

/// Key grouping records into one triage question.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FlowGroup {
    pub proto: String,
    pub src_ip: IpAddr,
    pub dst_ip: IpAddr,
}

pub fn triage_question(g: &FlowGroup) -> String {
    match Proto::from(g.proto.as_str()) {
        Proto::Icmp => format!("Is host {} sending an ICMP request flood to {}?", g.src_ip, g.dst_ip),
        Proto::Tcp => format!("Is host {} flooding {} with TCP connection attempts that end in a failed state?", g.src_ip, g.dst_ip),
        Proto::Udp => format!("Is host {} sending a UDP flow flood to {}?", g.src_ip, g.dst_ip),
        Proto::Other(p) => format!("Is host {} flooding {} with {} traffic?", g.src_ip, g.dst_ip, p.to_ascii_uppercase()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriageGroup {
    pub group: FlowGroup,
    pub question: String,
    pub verdict: Verdict,
    pub record_ids: Vec<String>,
}

/// Asks one question per `(proto, src, dst)` group and spreads the group's
/// verdict over its records. Groups are processed in key order.
pub fn triage(engine: &Engine, records: &[TrafficRecord]) -> Result<Vec<TriageGroup>, EngineError> {
    let mut groups: BTreeMap<FlowGroup, Vec<String>> = BTreeMap::new();
    for r in records {
        let key = FlowGroup { proto: r.proto.as_str().to_ascii_lowercase(), src_ip: r.src_ip, dst_ip: r.dst_ip };
        groups.entry(key).or_default().push(r.record_id.clone());
    }
    let groups: Vec<(FlowGroup, Vec<String>)> = groups.into_iter().collect();
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(8);
    let chunk = groups.len().div_ceil(workers).max(1);
    let results: Vec<Result<Vec<TriageGroup>, EngineError>> = std::thread::scope(|s| {
        let handles: Vec<_> = groups
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|(g, ids)| {
                            let question = triage_question(g);
                            let a = engine.answer(&question)?;
                            Ok(TriageGroup { group: g.clone(), question, verdict: a.verdict, record_ids: ids.clone() })
                        })
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("triage worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(groups.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// One prediction per record from triage output.
pub fn triage_predictions(groups: &[TriageGroup]) -> Vec<Prediction> {
    let mut out: Vec<Prediction> = groups
        .iter()
        .flat_map(|g| {
            g.record_ids
                .iter()
                .map(|id| Prediction::new(id.clone(), g.verdict.decision, g.verdict.attack_score()))
        })
        .collect();
    out.sort_by(|a, b| a.record_id.cmp(&b.record_id));
    out
}
