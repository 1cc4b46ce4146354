//! Hierarchical evidence retrieval.
//!
//! A question is turned into a metadata filter, then candidates flow through
//! five stages:
//!
//! 1. exact filtered search over all collections, top `fetch_k` by cosine;
//! 2. similarity threshold `tau`;
//! 3. maximal marginal relevance selection of up to `k` items;
//! 4. cross-encoder rerank with a score floor;
//! 5. the abstention gate, which requires at least `min_evidence` survivors.
//!
//! The stage-1 cosine is the bi-encoder pass; nothing is re-embedded.

use std::net::{IpAddr, Ipv4Addr};
use std::sync::LazyLock;
use std::time::Duration;

use chrono::{DateTime, FixedOffset, NaiveDate, NaiveTime, TimeZone, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{tokenize, unit_similarity, Embedding};
use crate::ingest::{Proto, Timestamp};
use crate::kb::{CollectionId, KbError, Metadata, MetadataFilter, SearchHit, Store};
use crate::limit::InFlightLimit;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("invalid retrieval config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Store(#[from] KbError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScorerError {
    #[error("cross-encoder scorer unavailable: {0}")]
    ScorerUnavailable(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub tau: f64,
    pub k: usize,
    /// Candidate pool size; `3 * k` when unset.
    pub fetch_k: Option<usize>,
    pub mmr_lambda: f64,
    pub min_evidence: usize,
    pub rerank_floor: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self { tau: 0.3, k: 5, fetch_k: None, mmr_lambda: 0.5, min_evidence: 2, rerank_floor: 0.2 }
    }
}

impl RetrievalConfig {
    pub fn fetch_k(&self) -> usize {
        self.fetch_k.unwrap_or(3 * self.k)
    }

    pub fn validate(&self) -> Result<(), RetrievalError> {
        let bad = |m: String| Err(RetrievalError::InvalidConfig(m));
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau {} outside [0, 1]", self.tau));
        }
        if !(0.0..=1.0).contains(&self.mmr_lambda) {
            return bad(format!("mmr_lambda {} outside [0, 1]", self.mmr_lambda));
        }
        if !(1 <= self.min_evidence && self.min_evidence <= self.k && self.k <= self.fetch_k()) {
            return bad(format!(
                "need 1 <= min_evidence ({}) <= k ({}) <= fetch_k ({})",
                self.min_evidence,
                self.k,
                self.fetch_k()
            ));
        }
        if !self.rerank_floor.is_finite() {
            return bad("rerank_floor must be finite".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeRange {
    pub start: Timestamp,
    pub end: Timestamp,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryEntities {
    pub ips: Vec<IpAddr>,
    pub ports: Vec<u16>,
    pub protos: Vec<Proto>,
    pub time_range: Option<TimeRange>,
    pub residual_text: String,
}

impl QueryEntities {
    pub fn is_empty(&self) -> bool {
        self.ips.is_empty() && self.ports.is_empty() && self.protos.is_empty() && self.time_range.is_none()
    }

    /// Folds `newer` into `self`: lists are unioned (first-seen order) and a
    /// time range in `newer` replaces the older one.
    pub fn merge(&mut self, newer: &QueryEntities) {
        fn union<T: PartialEq + Clone>(into: &mut Vec<T>, from: &[T]) {
            for v in from {
                if !into.contains(v) {
                    into.push(v.clone());
                }
            }
        }
        union(&mut self.ips, &newer.ips);
        union(&mut self.ports, &newer.ports);
        union(&mut self.protos, &newer.protos);
        if newer.time_range.is_some() {
            self.time_range = newer.time_range;
        }
        self.residual_text = newer.residual_text.clone();
    }
}

static IPV4: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\b(\d{1,3})\.(\d{1,3})\.(\d{1,3})\.(\d{1,3})\b(?::(\d{1,5})\b)?").unwrap());
static PORT_WORD: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\bports?\s+(\d{1,5})\b").unwrap());
static PROTO_WORD: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\b(tcp|udp|icmp|syn|ping|echo)\b").unwrap());
static DATETIME: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"\b(\d{4}-\d{2}-\d{2})(?:[T ](\d{2}):(\d{2})(?::(\d{2})(?:\.(\d{1,6}))?)?(Z|[+-]\d{2}:\d{2})?)?").unwrap()
});

fn push_unique<T: PartialEq>(v: &mut Vec<T>, x: T) {
    if !v.contains(&x) {
        v.push(x);
    }
}

/// Each date/time mention covers the interval implied by its precision: a
/// bare date is the whole UTC day, `HH:MM` a minute, `HH:MM:SS` a second.
fn mention_interval(caps: &regex::Captures<'_>) -> Option<TimeRange> {
    let date = NaiveDate::parse_from_str(&caps[1], "%Y-%m-%d").ok()?;
    let num = |i: usize| caps.get(i).map(|m| m.as_str().parse::<u32>().ok());
    let (start_time, span_micros) = match (num(2), num(3), num(4)) {
        (None, _, _) => (NaiveTime::MIN, 86_400_000_000i64),
        (Some(h), Some(m), None) => (NaiveTime::from_hms_opt(h?, m?, 0)?, 60_000_000),
        (Some(h), Some(m), Some(s)) => {
            let frac = caps.get(5).map(|f| {
                let digits = f.as_str();
                digits.parse::<u32>().unwrap_or(0) * 10u32.pow(6 - digits.len() as u32)
            });
            let t = NaiveTime::from_hms_micro_opt(h?, m?, s?, frac.unwrap_or(0))?;
            (t, if frac.is_some() { 1 } else { 1_000_000 })
        }
        _ => return None,
    };
    let naive = date.and_time(start_time);
    let start: DateTime<Utc> = match caps.get(6).map(|m| m.as_str()) {
        None | Some("Z") => naive.and_utc(),
        Some(off) => {
            let sign = if off.starts_with('-') { -1 } else { 1 };
            let h: i32 = off[1..3].parse().ok()?;
            let m: i32 = off[4..6].parse().ok()?;
            let tz = FixedOffset::east_opt(sign * (h * 3600 + m * 60))?;
            tz.from_local_datetime(&naive).single()?.with_timezone(&Utc)
        }
    };
    let start = Timestamp::from_datetime(start);
    Some(TimeRange { start, end: Timestamp(start.micros() + span_micros - 1) })
}

/// Pulls IPs, ports, protocol keywords and date/time mentions out of a
/// question. Nothing is removed from the text.
pub fn extract_entities(query: &str) -> QueryEntities {
    let mut e = QueryEntities { residual_text: query.to_string(), ..Default::default() };
    for caps in IPV4.captures_iter(query) {
        let octets: Option<Vec<u8>> = (1..=4).map(|i| caps[i].parse::<u8>().ok()).collect();
        let Some(o) = octets else { continue };
        push_unique(&mut e.ips, IpAddr::V4(Ipv4Addr::new(o[0], o[1], o[2], o[3])));
        if let Some(p) = caps.get(5).and_then(|m| m.as_str().parse::<u16>().ok()) {
            push_unique(&mut e.ports, p);
        }
    }
    for caps in PORT_WORD.captures_iter(query) {
        if let Ok(p) = caps[1].parse::<u16>() {
            push_unique(&mut e.ports, p);
        }
    }
    for caps in PROTO_WORD.captures_iter(query) {
        let proto = match caps[1].to_ascii_lowercase().as_str() {
            "tcp" | "syn" => Proto::Tcp,
            "udp" => Proto::Udp,
            _ => Proto::Icmp,
        };
        push_unique(&mut e.protos, proto);
    }
    let mut range: Option<TimeRange> = None;
    for caps in DATETIME.captures_iter(query) {
        if let Some(m) = mention_interval(&caps) {
            range = Some(match range {
                None => m,
                Some(r) => TimeRange { start: r.start.min(m.start), end: r.end.max(m.end) },
            });
        }
    }
    e.time_range = range;
    e
}

/// Builds the filter applied across all collections. Heuristic entries are
/// exempt from the 5-tuple and time clauses.
pub fn build_filter(e: &QueryEntities) -> MetadataFilter {
    MetadataFilter {
        endpoint_ips: e.ips.clone(),
        endpoint_ports: e.ports.clone(),
        protos: e.protos.clone(),
        ts_min: e.time_range.map(|r| r.start),
        ts_max: e.time_range.map(|r| r.end),
        tuple_exempt: vec![CollectionId::Heuristic],
        ..Default::default()
    }
}

/// Joint (query, passage) relevance in [0, 1].
pub trait CrossScorer: Send + Sync {
    fn score_batch(&self, query: &str, passages: &[&str]) -> Result<Vec<f64>, ScorerError>;

    fn score(&self, query: &str, passage: &str) -> Result<f64, ScorerError> {
        Ok(self.score_batch(query, &[passage])?[0])
    }

    /// Floor carried by the scorer itself, overriding the config's.
    fn floor(&self) -> Option<f64> {
        None
    }
}

/// Jaccard overlap of lowercase token sets.
#[derive(Debug, Clone, Copy, Default)]
pub struct JaccardScorer;

pub fn jaccard(a: &str, b: &str) -> f64 {
    use std::collections::BTreeSet;
    let a: BTreeSet<String> = tokenize(a).collect();
    let b: BTreeSet<String> = tokenize(b).collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

impl CrossScorer for JaccardScorer {
    fn score_batch(&self, query: &str, passages: &[&str]) -> Result<Vec<f64>, ScorerError> {
        Ok(passages.iter().map(|p| jaccard(query, p)).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    JaccardStub,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScorerSpec {
    pub kind: ScorerKind,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub api_key_env: Option<String>,
    pub floor: Option<f64>,
    pub max_in_flight: usize,
    pub timeout_secs: u64,
}

impl Default for ScorerSpec {
    fn default() -> Self {
        Self {
            kind: ScorerKind::JaccardStub,
            endpoint: None,
            model: None,
            api_key_env: None,
            floor: None,
            max_in_flight: 4,
            timeout_secs: 30,
        }
    }
}

impl ScorerSpec {
    pub fn build(&self) -> Result<Box<dyn CrossScorer>, ScorerError> {
        match self.kind {
            ScorerKind::JaccardStub => Ok(Box::new(JaccardScorer)),
            ScorerKind::Remote => Ok(Box::new(RemoteScorer::from_spec(self)?)),
        }
    }
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    model: &'a str,
    pairs: Vec<[&'a str; 2]>,
}

#[derive(Deserialize)]
struct ScoreResponse {
    scores: Vec<f64>,
}

/// Cross-encoder service client. Raw logits are min-max normalized per
/// batch; a batch whose logits are all equal scores 0.5 throughout.
pub struct RemoteScorer {
    agent: ureq::Agent,
    endpoint: String,
    model: String,
    token: Option<String>,
    floor: Option<f64>,
    limit: InFlightLimit,
}

impl RemoteScorer {
    pub fn from_spec(spec: &ScorerSpec) -> Result<Self, ScorerError> {
        let unavailable = ScorerError::ScorerUnavailable;
        let endpoint = spec.endpoint.clone().ok_or_else(|| unavailable("no endpoint configured".into()))?;
        let token = match &spec.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| unavailable(format!("environment variable {var} is not set")))?),
            None => None,
        };
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(spec.timeout_secs.max(1))))
            .build()
            .new_agent();
        Ok(Self {
            agent,
            endpoint,
            model: spec.model.clone().unwrap_or_default(),
            token,
            floor: spec.floor,
            limit: InFlightLimit::new(spec.max_in_flight),
        })
    }
}

pub fn min_max_normalize(raw: &[f64]) -> Vec<f64> {
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.5; raw.len()];
    }
    raw.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

impl CrossScorer for RemoteScorer {
    fn score_batch(&self, query: &str, passages: &[&str]) -> Result<Vec<f64>, ScorerError> {
        if passages.is_empty() {
            return Ok(Vec::new());
        }
        let _permit = self.limit.acquire();
        let mut req = self.agent.post(&self.endpoint);
        if let Some(tok) = &self.token {
            req = req.header("Authorization", &format!("Bearer {tok}"));
        }
        let body = ScoreRequest { model: &self.model, pairs: passages.iter().map(|p| [query, *p]).collect() };
        let resp: ScoreResponse = req
            .send_json(body)
            .map_err(|e| ScorerError::ScorerUnavailable(e.to_string()))?
            .body_mut()
            .read_json()
            .map_err(|e| ScorerError::ScorerUnavailable(format!("bad response body: {e}")))?;
        if resp.scores.len() != passages.len() || resp.scores.iter().any(|s| !s.is_finite()) {
            return Err(ScorerError::ScorerUnavailable("malformed score list".into()));
        }
        Ok(min_max_normalize(&resp.scores))
    }

    fn floor(&self) -> Option<f64> {
        self.floor
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gate {
    Passed,
    Abstained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalItem {
    pub entry_id: String,
    pub collection: CollectionId,
    pub summary: String,
    pub meta: Metadata,
    pub sim_score: f64,
    pub rerank_score: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub searched: usize,
    pub passed_tau: usize,
    pub mmr_selected: usize,
    pub passed_rerank: usize,
}

/// Evidence that survived (or failed) the quality gate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub items: Vec<RetrievalItem>,
    pub gate: Gate,
    pub diagnostics: Vec<String>,
    pub counts: StageCounts,
    pub filter: MetadataFilter,
}

impl RetrievalResult {
    pub fn passed(&self) -> bool {
        self.gate == Gate::Passed
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(|i| i.entry_id.as_str())
    }

    pub fn item(&self, entry_id: &str) -> Option<&RetrievalItem> {
        self.items.iter().find(|i| i.entry_id == entry_id)
    }
}

/// Greedy MMR over `candidates` (already sorted by relevance), returning
/// indices in selection order. Only the first max wins a tie.
pub fn mmr_select(candidates: &[SearchHit], k: usize, lambda: f64) -> Vec<usize> {
    let mut selected: Vec<usize> = Vec::with_capacity(k.min(candidates.len()));
    if candidates.is_empty() || k == 0 {
        return selected;
    }
    selected.push(0);
    let mut remaining: Vec<usize> = (1..candidates.len()).collect();
    // max similarity of each candidate to the selected set, updated incrementally
    let mut redundancy: Vec<f64> = candidates
        .iter()
        .map(|c| unit_similarity(c.entry.vector.as_slice(), candidates[0].entry.vector.as_slice()))
        .collect();
    while selected.len() < k && !remaining.is_empty() {
        let mut best_pos = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (pos, &c) in remaining.iter().enumerate() {
            let score = lambda * candidates[c].similarity - (1.0 - lambda) * redundancy[c];
            if score > best_score {
                best_score = score;
                best_pos = pos;
            }
        }
        let pick = remaining.remove(best_pos);
        selected.push(pick);
        let pv = candidates[pick].entry.vector.as_slice();
        for &c in &remaining {
            let s = unit_similarity(candidates[c].entry.vector.as_slice(), pv);
            if s > redundancy[c] {
                redundancy[c] = s;
            }
        }
    }
    selected
}

/// Runs the pipeline with entities extracted from `query`.
pub fn retrieve(
    store: &Store,
    cfg: &RetrievalConfig,
    query: &str,
    query_vec: &Embedding,
    scorer: &dyn CrossScorer,
) -> Result<RetrievalResult, RetrievalError> {
    retrieve_with_entities(store, cfg, query, query_vec, &extract_entities(query), scorer)
}

/// Runs the pipeline with caller-supplied entities (e.g. merged from a session).
pub fn retrieve_with_entities(
    store: &Store,
    cfg: &RetrievalConfig,
    query: &str,
    query_vec: &Embedding,
    entities: &QueryEntities,
    scorer: &dyn CrossScorer,
) -> Result<RetrievalResult, RetrievalError> {
    cfg.validate()?;
    let filter = build_filter(entities);
    let mut counts = StageCounts::default();
    let abstain = |counts: StageCounts, filter: MetadataFilter, msg: String| RetrievalResult {
        items: Vec::new(),
        gate: Gate::Abstained,
        diagnostics: vec![msg],
        counts,
        filter,
    };
    let need = cfg.min_evidence;

    let hits = store.search(&CollectionId::ALL, query_vec, &filter, cfg.fetch_k())?;
    counts.searched = hits.len();

    let survivors: Vec<SearchHit> = hits.into_iter().filter(|h| h.similarity >= cfg.tau).collect();
    counts.passed_tau = survivors.len();

    let picked = mmr_select(&survivors, cfg.k, cfg.mmr_lambda);
    counts.mmr_selected = picked.len();

    let floor = scorer.floor().unwrap_or(cfg.rerank_floor);
    let passages: Vec<&str> = picked.iter().map(|&i| survivors[i].entry.summary.as_str()).collect();
    let scores = if passages.is_empty() {
        Vec::new()
    } else {
        match scorer.score_batch(query, &passages) {
            Ok(s) => s,
            Err(e) => return Ok(abstain(counts, filter, format!("stage=rerank {e}"))),
        }
    };
    let mut items: Vec<RetrievalItem> = picked
        .iter()
        .zip(scores)
        .filter(|(_, s)| *s >= floor)
        .map(|(&i, rerank_score)| {
            let h = &survivors[i];
            RetrievalItem {
                entry_id: h.entry.entry_id.clone(),
                collection: h.collection,
                summary: h.entry.summary.clone(),
                meta: h.entry.meta.clone(),
                sim_score: h.similarity,
                rerank_score,
            }
        })
        .collect();
    items.sort_by(|a, b| {
        b.rerank_score
            .total_cmp(&a.rerank_score)
            .then(b.sim_score.total_cmp(&a.sim_score))
            .then(a.collection.cmp(&b.collection))
            .then_with(|| a.entry_id.cmp(&b.entry_id))
    });
    counts.passed_rerank = items.len();

    if counts.passed_rerank >= need {
        return Ok(RetrievalResult { items, gate: Gate::Passed, diagnostics: Vec::new(), counts, filter });
    }
    let msg = if counts.searched == 0 {
        "stage=search matched 0 entries".to_string()
    } else if counts.searched < need {
        format!("stage=search matched {} entries (need {need})", counts.searched)
    } else if counts.passed_tau < need {
        format!(
            "stage=threshold {} of {} candidates reached tau={} (need {need})",
            counts.passed_tau, counts.searched, cfg.tau
        )
    } else {
        format!(
            "stage=rerank {} of {} candidates reached rerank floor {} (need {need})",
            counts.passed_rerank, counts.mmr_selected, floor
        )
    };
    Ok(abstain(counts, filter, msg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::{Embedder, HashEmbedder};
    use crate::kb::KBEntry;

    #[test]
    fn entities_from_paper_queries() {
        let e = extract_entities("Show anomalies involving 203.0.113.5");
        assert_eq!(e.ips, vec!["203.0.113.5".parse::<IpAddr>().unwrap()]);
        assert!(e.protos.is_empty() && e.ports.is_empty() && e.time_range.is_none());
        let e = extract_entities("compare tcp syn activity");
        assert_eq!(e.protos, vec![Proto::Tcp]);
        let e = extract_entities("hello world");
        assert!(e.is_empty());
        assert_eq!(e.residual_text, "hello world");
    }

    #[test]
    fn entities_ports_and_bad_ips() {
        let e = extract_entities("traffic to 10.0.0.1:443 and port 22, not 300.1.1.1 or 10:05:23");
        assert_eq!(e.ips.len(), 1);
        assert_eq!(e.ports, vec![443, 22]);
        let e = extract_entities("port 70000");
        assert!(e.ports.is_empty());
        let e = extract_entities("any ping or ECHO traffic? also UDP");
        assert_eq!(e.protos, vec![Proto::Icmp, Proto::Udp]);
    }

    #[test]
    fn entities_time_ranges() {
        let e = extract_entities("what happened on 2022-01-09");
        let r = e.time_range.unwrap();
        assert_eq!(r.start, Timestamp::parse("2022-01-09T00:00:00Z").unwrap());
        assert_eq!(r.end.micros() - r.start.micros(), 86_400_000_000 - 1);
        let e = extract_entities("between 2022-01-09T10:00 and 2022-01-09 10:30:15");
        let r = e.time_range.unwrap();
        assert_eq!(r.start, Timestamp::parse("2022-01-09T10:00:00Z").unwrap());
        assert_eq!(r.end, Timestamp(Timestamp::parse("2022-01-09T10:30:15Z").unwrap().micros() + 999_999));
        let e = extract_entities("at 2022-01-09T11:00:00+01:00");
        assert_eq!(e.time_range.unwrap().start, Timestamp::parse("2022-01-09T10:00:00Z").unwrap());
    }

    fn meta(id: &str, src: &str, dst: &str, proto: Proto, ts: i64) -> Metadata {
        Metadata {
            record_id: id.into(),
            src_ip: Some(src.parse().unwrap()),
            dst_ip: Some(dst.parse().unwrap()),
            proto: Some(proto),
            ts: Some(Timestamp::from_secs(ts)),
            ..Default::default()
        }
    }

    #[test]
    fn filter_ip_either_end() {
        let f = build_filter(&extract_entities("anything about 10.0.0.1"));
        let a = meta("a", "10.0.0.1", "10.0.0.2", Proto::Tcp, 0);
        let b = meta("b", "10.0.0.3", "10.0.0.1", Proto::Tcp, 0);
        let c = meta("c", "10.0.0.3", "10.0.0.4", Proto::Tcp, 0);
        assert!(f.matches(CollectionId::Telemetry, &a));
        assert!(f.matches(CollectionId::Telemetry, &b));
        assert!(!f.matches(CollectionId::Telemetry, &c));
        let all = build_filter(&QueryEntities::default());
        assert!([&a, &b, &c].iter().all(|m| all.matches(CollectionId::Telemetry, m)));
    }

    #[test]
    fn filter_proto_and_time_conjunction() {
        let e = QueryEntities {
            protos: vec![Proto::Icmp],
            time_range: Some(TimeRange { start: Timestamp::from_secs(100), end: Timestamp::from_secs(200) }),
            ..Default::default()
        };
        let f = build_filter(&e);
        let fixtures = [
            (meta("1", "1.1.1.1", "2.2.2.2", Proto::Icmp, 150), true),
            (meta("2", "1.1.1.1", "2.2.2.2", Proto::Icmp, 250), false),
            (meta("3", "1.1.1.1", "2.2.2.2", Proto::Tcp, 150), false),
            (meta("4", "1.1.1.1", "2.2.2.2", Proto::Tcp, 250), false),
        ];
        for (m, want) in fixtures {
            assert_eq!(f.matches(CollectionId::Anomaly, &m), want, "{}", m.record_id);
        }
    }

    #[test]
    fn jaccard_examples() {
        assert_eq!(jaccard("icmp flood host", "icmp flood host"), 1.0);
        assert_eq!(jaccard("alpha beta", "gamma delta"), 0.0);
        assert!((jaccard("icmp flood host", "host sent icmp request") - 0.4).abs() < 1e-12);
        assert_eq!(JaccardScorer.score("a b", "A, B!").unwrap(), 1.0);
    }

    #[test]
    fn min_max() {
        assert_eq!(min_max_normalize(&[1.0, 3.0, 2.0]), vec![0.0, 1.0, 0.5]);
        assert_eq!(min_max_normalize(&[4.0]), vec![0.5]);
    }

    #[test]
    fn config_validation() {
        assert!(RetrievalConfig::default().validate().is_ok());
        assert_eq!(RetrievalConfig::default().fetch_k(), 15);
        let bad = RetrievalConfig { min_evidence: 6, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = RetrievalConfig { tau: 1.5, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    struct Down;
    impl CrossScorer for Down {
        fn score_batch(&self, _: &str, _: &[&str]) -> Result<Vec<f64>, ScorerError> {
            Err(ScorerError::ScorerUnavailable("connection refused".into()))
        }
    }

    fn store_with(texts: &[&str]) -> (tempfile::TempDir, Store) {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path(), 64).unwrap();
        let emb = HashEmbedder::new(64, 0);
        let entries: Vec<KBEntry> = texts
            .iter()
            .enumerate()
            .map(|(i, t)| KBEntry {
                entry_id: format!("e{i}"),
                summary: t.to_string(),
                vector: emb.embed(t).unwrap(),
                meta: Metadata { record_id: format!("e{i}"), ..Default::default() },
            })
            .collect();
        store.upsert(CollectionId::Telemetry, &entries).unwrap();
        (dir, store)
    }

    #[test]
    fn empty_store_abstains() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path(), 64).unwrap();
        let q = HashEmbedder::new(64, 0).embed("icmp flood").unwrap();
        let r = retrieve(&store, &RetrievalConfig::default(), "icmp flood", &q, &JaccardScorer).unwrap();
        assert_eq!(r.gate, Gate::Abstained);
        assert_eq!(r.diagnostics, vec!["stage=search matched 0 entries".to_string()]);
    }

    #[test]
    fn scorer_down_abstains() {
        let (_d, store) = store_with(&["echo flood host", "echo flood target", "echo flood again"]);
        let q = HashEmbedder::new(64, 0).embed("flood").unwrap();
        let r = retrieve(&store, &RetrievalConfig::default(), "flood", &q, &Down).unwrap();
        assert_eq!(r.gate, Gate::Abstained);
        assert!(r.diagnostics[0].contains("scorer unavailable"));
    }

    #[test]
    fn passes_with_overlapping_evidence() {
        let (_d, store) = store_with(&["burst flood host", "burst flood target", "handshake complete"]);
        let q = HashEmbedder::new(64, 0).embed("burst flood").unwrap();
        let r = retrieve(&store, &RetrievalConfig::default(), "burst flood", &q, &JaccardScorer).unwrap();
        assert_eq!(r.gate, Gate::Passed, "{:?}", r.diagnostics);
        assert!(r.items.len() >= 2);
        for it in &r.items {
            assert!(it.sim_score >= 0.3 && it.rerank_score >= 0.2);
        }
    }

    #[test]
    fn lambda_one_is_plain_top_k() {
        let (_d, store) = store_with(&["a b c", "a b c d", "a b", "a", "b c", "c d e", "a c e"]);
        let q = HashEmbedder::new(64, 0).embed("a b c").unwrap();
        let hits = store.search(&CollectionId::ALL, &q, &MetadataFilter::match_all(), 7).unwrap();
        assert_eq!(mmr_select(&hits, 4, 1.0), vec![0, 1, 2, 3]);
        // diversity pushes the near-duplicate down
        let diverse = mmr_select(&hits, 4, 0.3);
        assert_eq!(diverse[0], 0);
        assert_eq!(diverse.len(), 4);
    }
}
