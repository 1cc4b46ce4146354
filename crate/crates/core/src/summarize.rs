//! Deterministic one-sentence rendering of traffic records.

use std::collections::BTreeMap;
use std::net::IpAddr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{Proto, Severity, TrafficRecord};

pub const CHUNK_CHARS: usize = 1000;
pub const CHUNK_OVERLAP: usize = 100;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SummarizeError {
    #[error("document passage is empty")]
    EmptyPassage,
}

/// Which collection a summary is routed to when the knowledge base is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceHint {
    Telemetry,
    Anomaly,
    Heuristic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Summary {
    pub record_id: String,
    pub text: String,
    pub hint: SourceHint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SummarizeOptions {
    /// Render byte/packet counts for TCP/UDP flows when present.
    pub include_counts: bool,
}

impl Default for SummarizeOptions {
    fn default() -> Self {
        Self { include_counts: true }
    }
}

pub fn icmp_type_name(t: u8) -> String {
    match t {
        8 => "request".into(),
        0 => "reply".into(),
        n => format!("type-{n} message"),
    }
}

fn endpoint(ip: &IpAddr, port: Option<u16>) -> String {
    match (ip, port) {
        (IpAddr::V4(v4), Some(p)) => format!("{v4}:{p}"),
        (IpAddr::V6(v6), Some(p)) => format!("[{v6}]:{p}"),
        (ip, None) => ip.to_string(),
    }
}

fn counts_clause(r: &TrafficRecord) -> String {
    let any = [r.pkts_orig, r.bytes_orig, r.pkts_resp, r.bytes_resp]
        .iter()
        .any(Option::is_some);
    if !any {
        return String::new();
    }
    let show = |v: Option<u64>| v.map_or_else(|| "?".to_string(), |n| n.to_string());
    format!(
        " (orig {} pkts/{} bytes, resp {} pkts/{} bytes)",
        show(r.pkts_orig),
        show(r.bytes_orig),
        show(r.pkts_resp),
        show(r.bytes_resp)
    )
}

fn flag_clause(r: &TrafficRecord) -> String {
    let Some(label) = r.label.as_ref().filter(|l| l.severity != Severity::Benign) else {
        return String::new();
    };
    let mut s = match &label.taxonomy {
        Some(t) => format!(", flagged as a potential {t} anomaly"),
        None => format!(", flagged as {} traffic", label.severity),
    };
    if let Some(code) = label.heuristic_code {
        s.push_str(&format!(" (heuristic {code})"));
    }
    s
}

/// Renders the record into its canonical sentence.
pub fn summarize_record(r: &TrafficRecord, opts: &SummarizeOptions) -> Summary {
    let dt = r.ts.to_datetime();
    let time = if r.ts.micros().rem_euclid(1_000_000) == 0 {
        dt.format("%H:%M:%S").to_string()
    } else {
        dt.format("%H:%M:%S%.6f").to_string()
    };
    let date = dt.format("%B %-d, %Y");
    let counts = if opts.include_counts { counts_clause(r) } else { String::new() };
    let body = match &r.proto {
        Proto::Icmp => format!(
            "host {} sent an ICMP {} to {}",
            r.src_ip,
            icmp_type_name(r.icmp_type.unwrap_or(8)),
            r.dst_ip
        ),
        Proto::Tcp => {
            let state = r
                .conn_state
                .as_ref()
                .map_or_else(|| "unknown".to_string(), |s| s.to_string());
            format!(
                "host {} opened a TCP connection to {} ending in state {}{}",
                endpoint(&r.src_ip, r.src_port),
                endpoint(&r.dst_ip, r.dst_port),
                state,
                counts
            )
        }
        Proto::Udp => format!(
            "host {} sent a UDP flow to {}{}",
            endpoint(&r.src_ip, r.src_port),
            endpoint(&r.dst_ip, r.dst_port),
            counts
        ),
        Proto::Other(p) => format!(
            "host {} sent {} traffic to {}",
            r.src_ip,
            p.to_ascii_uppercase(),
            r.dst_ip
        ),
    };
    let hint = match &r.label {
        Some(l) if l.severity != Severity::Benign => SourceHint::Anomaly,
        _ => SourceHint::Telemetry,
    };
    Summary {
        record_id: r.record_id.clone(),
        text: format!("At {time} on {date}, {body}{}.", flag_clause(r)),
        hint,
    }
}

/// Reference prose is passed through unchanged; passages longer than
/// [`CHUNK_CHARS`] are split into overlapping windows.
///
/// Single chunks keep `doc_id` as their id; multi-chunk documents get
/// `doc_id#0`, `doc_id#1`, ...
pub fn summarize_document(
    doc_id: &str,
    passage: &str,
    _metadata: &BTreeMap<String, String>,
) -> Result<Vec<Summary>, SummarizeError> {
    if passage.trim().is_empty() {
        return Err(SummarizeError::EmptyPassage);
    }
    let chunks = chunk_text(passage, CHUNK_CHARS, CHUNK_OVERLAP);
    let single = chunks.len() == 1;
    Ok(chunks
        .into_iter()
        .enumerate()
        .map(|(i, text)| Summary {
            record_id: if single { doc_id.to_string() } else { format!("{doc_id}#{i}") },
            text,
            hint: SourceHint::Heuristic,
        })
        .collect())
}

/// Splits on char boundaries into windows of at most `size` chars, each
/// starting `size - overlap` chars after the previous one.
pub fn chunk_text(text: &str, size: usize, overlap: usize) -> Vec<String> {
    assert!(overlap < size, "overlap must be smaller than chunk size");
    let chars: Vec<char> = text.chars().collect();
    if chars.len() <= size {
        return vec![text.to_string()];
    }
    let step = size - overlap;
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + size).min(chars.len());
        out.push(chars[start..end].iter().collect());
        if end == chars.len() {
            break;
        }
        start += step;
    }
    out
}
