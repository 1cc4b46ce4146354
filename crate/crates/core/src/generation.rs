//! Grounded prompt construction, LLM clients and verdict verification.
//!
//! The model must answer in three labeled sections:
//!
//! ```text
//! VERDICT: <attack|no-attack|undecidable> <one-line alert summary>
//! JUSTIFICATION: <reasoning citing evidence as [entry_id]>
//! MITIGATIONS:
//! 1. <step>
//! 2. <optional second step>
//! ```
//!
//! Every `[entry_id]` cited in the justification must belong to the
//! retrieved evidence set; a verdict citing anything else is rejected with
//! [`GenerationError::UnverifiedCitation`] instead of being repaired.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::sync::LazyLock;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{Proto, Severity};
use crate::kb::{CollectionId, Metadata};
use crate::limit::InFlightLimit;
use crate::retrieval::{RetrievalItem, RetrievalResult};

pub const CHARS_PER_TOKEN: usize = 4;

/// Words the system prompt forbids; flagged when a model uses them anyway.
pub const HEDGE_WORDS: &[&str] = &[
    "might", "possibly", "perhaps", "maybe", "probably", "likely", "could", "may", "seems", "appears",
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GenerationError {
    #[error("retrieval gate did not pass; no prompt can be built")]
    GateNotPassed,
    #[error("llm backend unavailable: {0}")]
    RemoteUnavailable(String),
    #[error("prompt needs ~{0} tokens, over the context budget even with minimal evidence")]
    ContextOverflow(usize),
    #[error("response violates the schema in section {0}")]
    SchemaViolation(String),
    #[error("unknown decision token `{0}`")]
    UnknownDecision(String),
    #[error("citation [{0}] is not part of the retrieved evidence")]
    UnverifiedCitation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Decision {
    Attack,
    NoAttack,
    Undecidable,
}

impl Decision {
    pub fn as_str(self) -> &'static str {
        match self {
            Decision::Attack => "attack",
            Decision::NoAttack => "no-attack",
            Decision::Undecidable => "undecidable",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub decision: Decision,
    pub alert_summary: String,
    pub justification: String,
    pub citations: Vec<String>,
    pub mitigations: Vec<String>,
    pub confidence: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl Verdict {
    /// The verdict returned when retrieval abstains, built from its diagnostics.
    pub fn undecidable(diagnostics: &[String]) -> Self {
        Self {
            decision: Decision::Undecidable,
            alert_summary: "Insufficient evidence to reach a verdict.".into(),
            justification: format!("Missing evidence: {}", diagnostics.join("; ")),
            citations: Vec::new(),
            mitigations: Vec::new(),
            confidence: 0.0,
            warnings: Vec::new(),
        }
    }

    /// Attack likelihood in [0, 1] for ROC sweeps: attack verdicts map to
    /// `0.5 + c/2`, no-attack to `0.5 - c/2`, undecidable to 0.5.
    pub fn attack_score(&self) -> f64 {
        match self.decision {
            Decision::Attack => 0.5 + self.confidence / 2.0,
            Decision::NoAttack => 0.5 - self.confidence / 2.0,
            Decision::Undecidable => 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceLine {
    pub entry_id: String,
    pub collection: CollectionId,
    pub summary: String,
    pub meta: Metadata,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub system_text: String,
    pub evidence_block: Vec<EvidenceLine>,
    pub question: String,
    pub schema_text: String,
}

pub const SYSTEM_TEXT: &str = "You are a network security analyst. Decide whether the traffic described by the evidence records is an attack. \
Base every statement on the evidence records only, and cite each record you rely on by its id in square brackets, for example [C1a2b3]. \
You may also cite heuristic codes that appear in the evidence. \
If the evidence is insufficient to decide, answer with the keyword undecidable and list the missing evidence. \
Give assertive, confident assessments. Do not hedge: never use words such as \"might\" or \"possibly\".";

pub const SCHEMA_TEXT: &str = "Answer with exactly three labeled sections, in this order:\n\
VERDICT: attack | no-attack | undecidable, followed by a one-line alert summary describing the detected activity\n\
JUSTIFICATION: the reasoning, citing every supporting record id in square brackets\n\
MITIGATIONS: one or two concise, numbered mitigation steps (omit only when undecidable)";

fn meta_line(m: &Metadata) -> String {
    let mut parts = Vec::new();
    if let Some(v) = &m.src_ip {
        parts.push(format!("src={v}"));
    }
    if let Some(v) = m.src_port {
        parts.push(format!("sport={v}"));
    }
    if let Some(v) = &m.dst_ip {
        parts.push(format!("dst={v}"));
    }
    if let Some(v) = m.dst_port {
        parts.push(format!("dport={v}"));
    }
    if let Some(v) = &m.proto {
        parts.push(format!("proto={v}"));
    }
    if let Some(v) = m.ts {
        parts.push(format!("ts={v}"));
    }
    if let Some(v) = &m.label {
        parts.push(format!("label={v}"));
    }
    if let Some(v) = m.heuristic_code {
        parts.push(format!("heuristic={v}"));
    }
    if let Some(v) = m.severity {
        parts.push(format!("severity={v}"));
    }
    parts.join("; ")
}

impl Prompt {
    pub fn user_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "QUESTION:\n{}\n", self.question);
        let _ = writeln!(s, "EVIDENCE:");
        for e in &self.evidence_block {
            let _ = writeln!(s, "[{}] ({}; {}) {}", e.entry_id, e.collection, meta_line(&e.meta), e.summary);
        }
        let _ = write!(s, "\nRESPONSE FORMAT:\n{}", self.schema_text);
        s
    }

    /// System and user text as one transcript.
    pub fn render(&self) -> String {
        format!("SYSTEM:\n{}\n\nUSER:\n{}\n", self.system_text, self.user_text())
    }

    pub fn token_estimate(&self) -> usize {
        (self.system_text.len() + self.user_text().len()).div_ceil(CHARS_PER_TOKEN)
    }
}

/// Builds the grounded prompt. With a token budget, lowest-ranked evidence
/// is dropped until the estimate fits; if a single item does not fit the
/// result is [`GenerationError::ContextOverflow`].
pub fn build_prompt(
    question: &str,
    r: &RetrievalResult,
    budget_tokens: Option<usize>,
) -> Result<Prompt, GenerationError> {
    if !r.passed() {
        return Err(GenerationError::GateNotPassed);
    }
    let mut seen = BTreeSet::new();
    let evidence_block = r
        .items
        .iter()
        .filter(|it| seen.insert(it.entry_id.clone()))
        .map(|it: &RetrievalItem| EvidenceLine {
            entry_id: it.entry_id.clone(),
            collection: it.collection,
            summary: it.summary.clone(),
            meta: it.meta.clone(),
        })
        .collect();
    let mut prompt = Prompt {
        system_text: SYSTEM_TEXT.to_string(),
        evidence_block,
        question: question.to_string(),
        schema_text: SCHEMA_TEXT.to_string(),
    };
    if let Some(cap) = budget_tokens {
        while prompt.token_estimate() > cap {
            if prompt.evidence_block.len() <= 1 {
                return Err(GenerationError::ContextOverflow(prompt.token_estimate()));
            }
            prompt.evidence_block.pop();
        }
    }
    Ok(prompt)
}

pub trait LlmClient: Send + Sync {
    fn complete(&self, prompt: &Prompt) -> Result<String, GenerationError>;
}

fn is_attack_evidence(m: &Metadata) -> bool {
    matches!(m.severity, Some(Severity::Anomalous | Severity::Suspicious)) || m.heuristic_code.is_some()
}

fn distinct<'a>(items: impl Iterator<Item = Option<String>> + 'a) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for v in items.flatten() {
        if !out.contains(&v) {
            out.push(v);
        }
    }
    out
}

/// Deterministic offline model: attack iff a strict majority of the
/// retrieved traffic records carry an anomalous/suspicious severity or a
/// heuristic code. Reference prose is cited in support but never votes;
/// evidence holding no traffic records at all is undecidable.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubLlm;

impl LlmClient for StubLlm {
    fn complete(&self, prompt: &Prompt) -> Result<String, GenerationError> {
        let ev: Vec<&EvidenceLine> =
            prompt.evidence_block.iter().filter(|e| e.collection != CollectionId::Heuristic).collect();
        if ev.is_empty() {
            let docs = prompt.evidence_block.iter().map(|e| format!("[{}]", e.entry_id)).collect::<Vec<_>>().join(" ");
            return Ok(format!(
                "VERDICT: undecidable\nNo traffic records match the question.\nJUSTIFICATION: Missing evidence: the retrieved entries {docs} are reference material only; no flow records for the queried hosts were retrieved.\n"
            ));
        }
        let flagged: Vec<&EvidenceLine> = ev.iter().copied().filter(|e| is_attack_evidence(&e.meta)).collect();
        let attack = 2 * flagged.len() > ev.len();
        let mut cited: Vec<&EvidenceLine> = if attack { flagged.clone() } else { ev.clone() };
        if attack {
            let codes: Vec<u32> = flagged.iter().filter_map(|e| e.meta.heuristic_code).collect();
            cited.extend(prompt.evidence_block.iter().filter(|e| {
                e.collection == CollectionId::Heuristic && e.meta.heuristic_code.is_some_and(|c| codes.contains(&c))
            }));
        }
        let refs = cited.iter().map(|e| format!("[{}]", e.entry_id)).collect::<Vec<_>>().join(" ");
        let hosts = distinct(ev.iter().filter(|e| !attack || is_attack_evidence(&e.meta)).map(|e| e.meta.dst_ip.map(|ip| ip.to_string())));
        let sources = distinct(ev.iter().filter(|e| !attack || is_attack_evidence(&e.meta)).map(|e| e.meta.src_ip.map(|ip| ip.to_string())));
        let hosts_txt = if hosts.is_empty() { "the queried hosts".to_string() } else { hosts.join(", ") };
        let sources_txt = if sources.is_empty() { "the offending sources".to_string() } else { sources.join(", ") };
        let proto = cited.iter().find_map(|e| e.meta.proto.clone());

        let mut out = String::new();
        if attack {
            let kind = match &proto {
                Some(Proto::Icmp) => "ICMP echo flood",
                Some(Proto::Tcp) => "TCP SYN flood",
                Some(Proto::Udp) => "UDP flood",
                _ => "flooding activity",
            };
            let codes = distinct(cited.iter().map(|e| e.meta.heuristic_code.map(|c| format!("heuristic {c}"))));
            let _ = writeln!(out, "VERDICT: attack");
            let _ = writeln!(out, "{kind} targeting {hosts_txt} from {sources_txt}.");
            let _ = writeln!(
                out,
                "JUSTIFICATION: {} of {} retrieved records carry anomaly annotations{}: {refs}. They form a strict majority of the evidence and describe the same flooding pattern.",
                flagged.len(),
                ev.len(),
                if codes.is_empty() { String::new() } else { format!(" ({})", codes.join(", ")) }
            );
            let _ = writeln!(out, "MITIGATIONS:");
            let steps = match &proto {
                Some(Proto::Icmp) => [
                    format!("Rate-limit inbound ICMP echo requests to {hosts_txt} at the network edge."),
                    format!("Block ICMP echo traffic from {sources_txt} until the flood stops."),
                ],
                Some(Proto::Tcp) => [
                    format!("Enable SYN cookies and shorten half-open connection timeouts on {hosts_txt}."),
                    format!("Rate-limit new TCP connections from {sources_txt} at the perimeter firewall."),
                ],
                _ => [
                    format!("Rate-limit traffic toward {hosts_txt} at the network edge."),
                    format!("Block traffic from {sources_txt} until the activity stops."),
                ],
            };
            let _ = writeln!(out, "1. {}\n2. {}", steps[0], steps[1]);
        } else {
            let _ = writeln!(out, "VERDICT: no-attack");
            let _ = writeln!(out, "Traffic involving {hosts_txt} is routine.");
            let _ = writeln!(
                out,
                "JUSTIFICATION: Only {} of {} retrieved records carry anomaly annotations, which is not a majority; the evidence {refs} describes routine traffic.",
                flagged.len(),
                ev.len()
            );
            let _ = writeln!(out, "MITIGATIONS:");
            let _ = writeln!(out, "1. Keep routine monitoring in place for {hosts_txt}; no containment action is required.");
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LlmKind {
    Stub,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmSpec {
    pub kind: LlmKind,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub api_key_env: Option<String>,
    pub context_tokens: usize,
    pub max_in_flight: usize,
    pub timeout_secs: u64,
}

impl Default for LlmSpec {
    fn default() -> Self {
        Self {
            kind: LlmKind::Stub,
            endpoint: None,
            model: None,
            api_key_env: None,
            context_tokens: 8192,
            max_in_flight: 2,
            timeout_secs: 60,
        }
    }
}

impl LlmSpec {
    pub fn build(&self) -> Result<Box<dyn LlmClient>, GenerationError> {
        match self.kind {
            LlmKind::Stub => Ok(Box::new(StubLlm)),
            LlmKind::Remote => Ok(Box::new(RemoteLlm::from_spec(self)?)),
        }
    }
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    temperature: f64,
    messages: [ChatMessage<'a>; 2],
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatContent,
}

#[derive(Deserialize)]
struct ChatContent {
    content: String,
}

/// Chat-completion client; always requests temperature 0.
pub struct RemoteLlm {
    agent: ureq::Agent,
    endpoint: String,
    model: String,
    token: Option<String>,
    context_tokens: usize,
    limit: InFlightLimit,
}

impl RemoteLlm {
    pub fn from_spec(spec: &LlmSpec) -> Result<Self, GenerationError> {
        let unavailable = GenerationError::RemoteUnavailable;
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
            context_tokens: spec.context_tokens,
            limit: InFlightLimit::new(spec.max_in_flight),
        })
    }
}

impl LlmClient for RemoteLlm {
    fn complete(&self, prompt: &Prompt) -> Result<String, GenerationError> {
        let estimate = prompt.token_estimate();
        if estimate > self.context_tokens {
            return Err(GenerationError::ContextOverflow(estimate));
        }
        let user = prompt.user_text();
        let body = ChatRequest {
            model: &self.model,
            temperature: 0.0,
            messages: [
                ChatMessage { role: "system", content: &prompt.system_text },
                ChatMessage { role: "user", content: &user },
            ],
        };
        let _permit = self.limit.acquire();
        let mut req = self.agent.post(&self.endpoint);
        if let Some(tok) = &self.token {
            req = req.header("Authorization", &format!("Bearer {tok}"));
        }
        let resp: ChatResponse = req
            .send_json(body)
            .map_err(|e| GenerationError::RemoteUnavailable(e.to_string()))?
            .body_mut()
            .read_json()
            .map_err(|e| GenerationError::RemoteUnavailable(format!("bad response body: {e}")))?;
        resp.choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| GenerationError::RemoteUnavailable("response has no choices".into()))
    }
}

static SECTION: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?im)^[ \t]*\**(VERDICT|JUSTIFICATION|MITIGATIONS)\**[ \t]*:").unwrap());
static CITATION: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\[([^\[\]\s]+)\]").unwrap());
static LIST_MARKER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\s*(?:\d+[.)]|[-*\u{2022}])\s*").unwrap());
static HEDGE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(&format!(r"(?i)\b({})\b", HEDGE_WORDS.join("|"))).unwrap()
});

/// Hedge words present in `text`, lowercased, in first-seen order.
pub fn hedge_words(text: &str) -> Vec<String> {
    distinct(HEDGE.find_iter(text).map(|m| Some(m.as_str().to_ascii_lowercase())))
}

fn parse_decision(content: &str) -> Result<(Decision, String), GenerationError> {
    let trimmed = content.trim_start();
    let lower = trimmed.to_ascii_lowercase();
    for (token, d) in [
        ("no-attack", Decision::NoAttack),
        ("no_attack", Decision::NoAttack),
        ("no attack", Decision::NoAttack),
        ("undecidable", Decision::Undecidable),
        ("attack", Decision::Attack),
    ] {
        if let Some(rest) = lower.strip_prefix(token) {
            if rest.chars().next().is_none_or(|c| !c.is_alphanumeric()) {
                let rest = &trimmed[token.len()..];
                let summary = rest
                    .trim_start_matches(|c: char| c.is_whitespace() || matches!(c, ':' | '-' | '.' | ',' | '\u{2014}' | '\u{2013}'))
                    .trim();
                return Ok((d, summary.to_string()));
            }
        }
    }
    let token: String = trimmed.split_whitespace().next().unwrap_or("").to_string();
    Err(GenerationError::UnknownDecision(token))
}

/// Parses and verifies a model response against the evidence it was given.
pub fn parse_verdict(raw: &str, r: &RetrievalResult) -> Result<Verdict, GenerationError> {
    let heads: Vec<(String, usize, usize)> = SECTION
        .captures_iter(raw)
        .map(|c| {
            let m = c.get(0).unwrap();
            (c[1].to_ascii_uppercase(), m.start(), m.end())
        })
        .collect();
    let mut sections: Vec<(String, String)> = Vec::new();
    for (i, (name, _, body_start)) in heads.iter().enumerate() {
        let end = heads.get(i + 1).map_or(raw.len(), |h| h.1);
        if sections.iter().any(|(n, _)| n == name) {
            return Err(GenerationError::SchemaViolation(name.clone()));
        }
        sections.push((name.clone(), raw[*body_start..end].trim().to_string()));
    }
    let section = |n: &str| sections.iter().find(|(name, _)| name == n).map(|(_, b)| b.as_str());

    let verdict_text = section("VERDICT").ok_or_else(|| GenerationError::SchemaViolation("VERDICT".into()))?;
    let (decision, alert_summary) = parse_decision(verdict_text)?;
    let justification = section("JUSTIFICATION")
        .ok_or_else(|| GenerationError::SchemaViolation("JUSTIFICATION".into()))?
        .to_string();

    let citations = distinct(CITATION.captures_iter(&justification).map(|c| Some(c[1].to_string())));
    let known: BTreeSet<&str> = r.ids().collect();
    if let Some(bad) = citations.iter().find(|c| !known.contains(c.as_str())) {
        return Err(GenerationError::UnverifiedCitation(bad.clone()));
    }

    let mitigations: Vec<String> = section("MITIGATIONS")
        .map(|body| {
            body.lines()
                .map(|l| LIST_MARKER.replace(l, "").trim().to_string())
                .filter(|l| !l.is_empty() && !l.eq_ignore_ascii_case("none") && !l.eq_ignore_ascii_case("n/a"))
                .collect()
        })
        .unwrap_or_default();

    let confidence = match decision {
        Decision::Undecidable => {
            if justification.is_empty() {
                return Err(GenerationError::SchemaViolation("JUSTIFICATION".into()));
            }
            0.0
        }
        Decision::Attack | Decision::NoAttack => {
            if citations.is_empty() {
                return Err(GenerationError::SchemaViolation("JUSTIFICATION".into()));
            }
            if !(1..=2).contains(&mitigations.len()) {
                return Err(GenerationError::SchemaViolation("MITIGATIONS".into()));
            }
            let sum: f64 = citations.iter().filter_map(|c| r.item(c)).map(|it| it.rerank_score).sum();
            sum / citations.len() as f64
        }
    };

    let warnings = hedge_words(raw)
        .into_iter()
        .map(|w| format!("hedging language: `{w}`"))
        .collect();

    Ok(Verdict { decision, alert_summary, justification, citations, mitigations, confidence, warnings })
}
