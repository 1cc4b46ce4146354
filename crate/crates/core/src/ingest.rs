//! Connection-log and anomaly-annotation ingestion.
//!
//! Two input families are normalized into [`TrafficRecord`]:
//!
//! - Zeek `conn.log` files in their native TSV form (`#separator`,
//!   `#fields` and `#unset_field` headers are honored), or a comma-separated
//!   variant with a header row.
//! - MAWILab-style anomaly CSVs, where every row is a (possibly wildcarded)
//!   flow pattern plus an [`AnomalyAnnotation`].
//!
//! Parsing never aborts on a bad data line. Each bad line is collected as a
//! [`MalformedLine`] and the parse continues, so that
//! `records + malformed == data_lines` always holds for a report.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::net::IpAddr;
use std::str::FromStr;

use chrono::{DateTime, NaiveDateTime, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("missing required column `{0}`")]
    MissingRequiredColumn(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid record json at line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

/// A data line that could not be turned into a record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MalformedLine {
    pub line_no: usize,
    pub reason: String,
}

impl fmt::Display for MalformedLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line_no, self.reason)
    }
}

/// UTC instant with microsecond resolution, stored as epoch microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestamp(pub i64);

impl Timestamp {
    pub const MICROS_PER_SEC: i64 = 1_000_000;

    pub fn from_micros(micros: i64) -> Self {
        Self(micros)
    }

    pub fn from_secs(secs: i64) -> Self {
        Self(secs * Self::MICROS_PER_SEC)
    }

    pub fn micros(self) -> i64 {
        self.0
    }

    pub fn to_datetime(self) -> DateTime<Utc> {
        Utc.timestamp_micros(self.0)
            .single()
            .unwrap_or(DateTime::<Utc>::MIN_UTC)
    }

    pub fn from_datetime(dt: DateTime<Utc>) -> Self {
        Self(dt.timestamp_micros())
    }

    /// Accepts Zeek-style epoch seconds (`1641000000.123456`), RFC 3339,
    /// and naive `YYYY-MM-DD HH:MM:SS[.ffffff]` (read as UTC).
    pub fn parse(s: &str) -> Result<Self, String> {
        let s = s.trim();
        if s.is_empty() {
            return Err("empty timestamp".into());
        }
        if s.bytes().all(|b| b.is_ascii_digit() || b == b'.') {
            return Self::parse_epoch(s);
        }
        if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
            return Ok(Self::from_datetime(dt.with_timezone(&Utc)));
        }
        for fmt in ["%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S"] {
            if let Ok(ndt) = NaiveDateTime::parse_from_str(s, fmt) {
                return Ok(Self::from_datetime(ndt.and_utc()));
            }
        }
        Err(format!("unparseable timestamp `{s}`"))
    }

    fn parse_epoch(s: &str) -> Result<Self, String> {
        let (whole, frac) = match s.split_once('.') {
            Some((w, f)) => (w, f),
            None => (s, ""),
        };
        if whole.is_empty() || frac.contains('.') {
            return Err(format!("unparseable epoch timestamp `{s}`"));
        }
        let secs: i64 = whole
            .parse()
            .map_err(|_| format!("unparseable epoch timestamp `{s}`"))?;
        let mut micros = 0i64;
        for (i, b) in frac.bytes().take(6).enumerate() {
            micros += i64::from(b - b'0') * 10i64.pow(5 - i as u32);
        }
        secs.checked_mul(Self::MICROS_PER_SEC)
            .and_then(|v| v.checked_add(micros))
            .map(Self)
            .ok_or_else(|| format!("epoch timestamp `{s}` out of range"))
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_datetime().format("%Y-%m-%dT%H:%M:%S%.6fZ"))
    }
}

macro_rules! string_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(from = "String", into = "String")]
        pub enum $name {
            $($variant,)+
            Other(String),
        }

        impl $name {
            pub fn as_str(&self) -> &str {
                match self {
                    $(Self::$variant => $text,)+
                    Self::Other(s) => s.as_str(),
                }
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                s.as_str().into()
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                $(if s.eq_ignore_ascii_case($text) { return Self::$variant; })+
                Self::Other(s.to_string())
            }
        }

        impl From<$name> for String {
            fn from(v: $name) -> String {
                v.as_str().to_string()
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

string_enum!(
    /// Transport protocol. Unknown strings are preserved verbatim.
    Proto { Tcp => "tcp", Udp => "udp", Icmp => "icmp" }
);

string_enum!(
    /// Zeek connection state.
    ConnState { S0 => "S0", SF => "SF", SH => "SH", RSTR => "RSTR", RSTO => "RSTO", OTH => "OTH" }
);

impl Proto {
    pub fn has_ports(&self) -> bool {
        matches!(self, Proto::Tcp | Proto::Udp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Anomalous,
    Suspicious,
    Notice,
    Benign,
}

impl Severity {
    pub fn as_str(self) -> &'static str {
        match self {
            Severity::Anomalous => "anomalous",
            Severity::Suspicious => "suspicious",
            Severity::Notice => "notice",
            Severity::Benign => "benign",
        }
    }
}

impl FromStr for Severity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "anomalous" => Ok(Severity::Anomalous),
            "suspicious" => Ok(Severity::Suspicious),
            "notice" => Ok(Severity::Notice),
            "benign" => Ok(Severity::Benign),
            other => Err(other.to_string()),
        }
    }
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnomalyAnnotation {
    pub heuristic_code: Option<u32>,
    pub taxonomy: Option<String>,
    pub severity: Severity,
    pub anomaly_id: Option<String>,
}

/// One normalized connection or flow event.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficRecord {
    pub record_id: String,
    pub ts: Timestamp,
    pub src_ip: IpAddr,
    pub dst_ip: IpAddr,
    pub src_port: Option<u16>,
    pub dst_port: Option<u16>,
    pub proto: Proto,
    pub conn_state: Option<ConnState>,
    pub icmp_type: Option<u8>,
    pub icmp_code: Option<u8>,
    pub bytes_orig: Option<u64>,
    pub bytes_resp: Option<u64>,
    pub pkts_orig: Option<u64>,
    pub pkts_resp: Option<u64>,
    pub label: Option<AnomalyAnnotation>,
}

impl TrafficRecord {
    /// Checks the per-record invariants: ports iff tcp/udp, icmp type iff icmp.
    pub fn validate(&self) -> Result<(), String> {
        let ports = self.src_port.is_some() && self.dst_port.is_some();
        let any_port = self.src_port.is_some() || self.dst_port.is_some();
        if self.proto.has_ports() && !ports {
            return Err(format!("{} record without both ports", self.proto));
        }
        if !self.proto.has_ports() && any_port {
            return Err(format!("{} record must not carry ports", self.proto));
        }
        let is_icmp = self.proto == Proto::Icmp;
        if is_icmp != self.icmp_type.is_some() {
            return Err(if is_icmp {
                "icmp record without icmp_type".into()
            } else {
                format!("{} record must not carry icmp_type", self.proto)
            });
        }
        if !is_icmp && self.icmp_code.is_some() {
            return Err(format!("{} record must not carry icmp_code", self.proto));
        }
        if self.record_id.is_empty() {
            return Err("empty record_id".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConnLogDialect {
    ZeekTsv,
    Csv,
}

impl FromStr for ConnLogDialect {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "zeek-tsv" | "zeek" | "tsv" => Ok(Self::ZeekTsv),
            "csv" => Ok(Self::Csv),
            other => Err(format!("unknown dialect `{other}` (expected zeek-tsv or csv)")),
        }
    }
}

/// Maps canonical field names onto the header names used by an input file.
///
/// Lookups fall back to the built-in aliases when a field has no explicit
/// mapping. Header matching is case-insensitive.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ColumnMap(pub HashMap<String, String>);

impl ColumnMap {
    fn resolve(&self, header: &[String], canonical: &str, aliases: &[&str]) -> Option<usize> {
        let find = |name: &str| header.iter().position(|h| h.eq_ignore_ascii_case(name));
        if let Some(explicit) = self.0.get(canonical) {
            return find(explicit);
        }
        std::iter::once(canonical)
            .chain(aliases.iter().copied())
            .find_map(find)
    }
}

const CONN_COLUMNS: &[(&str, &[&str])] = &[
    ("ts", &[]),
    ("record_id", &["uid"]),
    ("src_ip", &["id.orig_h"]),
    ("src_port", &["id.orig_p"]),
    ("dst_ip", &["id.resp_h"]),
    ("dst_port", &["id.resp_p"]),
    ("proto", &[]),
    ("conn_state", &[]),
    ("icmp_type", &[]),
    ("icmp_code", &[]),
    ("bytes_orig", &["orig_bytes"]),
    ("bytes_resp", &["resp_bytes"]),
    ("pkts_orig", &["orig_pkts"]),
    ("pkts_resp", &["resp_pkts"]),
];

const REQUIRED_CONN: &[&str] = &["ts", "src_ip", "dst_ip", "proto"];

struct ConnColumns {
    idx: HashMap<&'static str, usize>,
}

impl ConnColumns {
    fn resolve(header: &[String], map: &ColumnMap) -> Result<Self, IngestError> {
        let mut idx = HashMap::new();
        for (canonical, aliases) in CONN_COLUMNS {
            if let Some(i) = map.resolve(header, canonical, aliases) {
                idx.insert(*canonical, i);
            }
        }
        for req in REQUIRED_CONN {
            if !idx.contains_key(req) {
                let shown = map.0.get(*req).map(String::as_str).unwrap_or(req);
                return Err(IngestError::MissingRequiredColumn(shown.to_string()));
            }
        }
        Ok(Self { idx })
    }

    fn get<'a>(&self, fields: &[&'a str], name: &str, unset: &str, empty: &str) -> Option<&'a str> {
        let v = *fields.get(*self.idx.get(name)?)?;
        let v = v.trim();
        (!v.is_empty() && v != unset && v != empty && v != "-").then_some(v)
    }
}

/// Outcome of parsing one connection log.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ParseReport {
    pub records: Vec<TrafficRecord>,
    pub malformed: Vec<MalformedLine>,
    pub data_lines: usize,
}

fn parse_opt<T: FromStr>(v: Option<&str>, what: &str) -> Result<Option<T>, String> {
    v.map(|s| s.parse::<T>().map_err(|_| format!("invalid {what} `{s}`")))
        .transpose()
}

fn build_record(
    cols: &ConnColumns,
    fields: &[&str],
    fallback_id: String,
    unset: &str,
    empty: &str,
) -> Result<TrafficRecord, String> {
    let get = |name: &str| cols.get(fields, name, unset, empty);
    let ts = Timestamp::parse(get("ts").ok_or("missing ts")?)?;
    let src_ip: IpAddr = parse_opt(get("src_ip"), "src_ip")?.ok_or("missing src_ip")?;
    let dst_ip: IpAddr = parse_opt(get("dst_ip"), "dst_ip")?.ok_or("missing dst_ip")?;
    let proto = Proto::from(get("proto").ok_or("missing proto")?);
    let src_port: Option<u16> = parse_opt(get("src_port"), "src_port")?;
    let dst_port: Option<u16> = parse_opt(get("dst_port"), "dst_port")?;
    let mut icmp_type: Option<u8> = parse_opt(get("icmp_type"), "icmp_type")?;
    let mut icmp_code: Option<u8> = parse_opt(get("icmp_code"), "icmp_code")?;

    let (src_port, dst_port) = match proto {
        Proto::Tcp | Proto::Udp => (src_port, dst_port),
        Proto::Icmp => {
            // Zeek carries the ICMP type/code in the orig/resp port columns.
            if icmp_type.is_none() {
                icmp_type = src_port
                    .map(|p| u8::try_from(p).map_err(|_| format!("icmp type {p} out of range")))
                    .transpose()?;
            }
            if icmp_code.is_none() {
                icmp_code = dst_port
                    .map(|p| u8::try_from(p).map_err(|_| format!("icmp code {p} out of range")))
                    .transpose()?;
            }
            (None, None)
        }
        Proto::Other(_) => (None, None),
    };
    if proto != Proto::Icmp {
        icmp_type = None;
        icmp_code = None;
    }

    let record = TrafficRecord {
        record_id: get("record_id").map(str::to_string).unwrap_or(fallback_id),
        ts,
        src_ip,
        dst_ip,
        src_port,
        dst_port,
        proto,
        conn_state: get("conn_state").map(ConnState::from),
        icmp_type,
        icmp_code,
        bytes_orig: parse_opt(get("bytes_orig"), "bytes_orig")?,
        bytes_resp: parse_opt(get("bytes_resp"), "bytes_resp")?,
        pkts_orig: parse_opt(get("pkts_orig"), "pkts_orig")?,
        pkts_resp: parse_opt(get("pkts_resp"), "pkts_resp")?,
        label: None,
    };
    record.validate()?;
    Ok(record)
}

fn unescape_separator(s: &str) -> String {
    let s = s.trim();
    if let Some(hex) = s.strip_prefix("\\x") {
        if let Ok(b) = u8::from_str_radix(hex, 16) {
            return (b as char).to_string();
        }
    }
    if s.is_empty() {
        "\t".into()
    } else {
        s.to_string()
    }
}

/// Parses a connection log. `source_name` seeds record ids for logs without
/// a `uid` column (`<source_name>:<line>`).
pub fn parse_conn_log<R: BufRead>(
    input: R,
    dialect: ConnLogDialect,
    source_name: &str,
    columns: &ColumnMap,
) -> Result<ParseReport, IngestError> {
    match dialect {
        ConnLogDialect::ZeekTsv => parse_zeek_tsv(input, source_name, columns),
        ConnLogDialect::Csv => parse_conn_csv(input, source_name, columns),
    }
}

fn parse_zeek_tsv<R: BufRead>(
    input: R,
    source_name: &str,
    columns: &ColumnMap,
) -> Result<ParseReport, IngestError> {
    let mut report = ParseReport::default();
    let mut separator = "\t".to_string();
    let mut unset = "-".to_string();
    let mut empty = "(empty)".to_string();
    let mut cols: Option<ConnColumns> = None;
    let mut ncols = 0usize;
    let mut seen = HashSet::new();

    for (i, line) in input.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let line = line.trim_end_matches('\r');
        if let Some(directive) = line.strip_prefix('#') {
            if let Some(rest) = directive.strip_prefix("separator") {
                separator = unescape_separator(rest);
                continue;
            }
            let mut parts = directive.split(separator.as_str());
            match parts.next() {
                Some("fields") => {
                    let header: Vec<String> = parts.map(str::to_string).collect();
                    ncols = header.len();
                    cols = Some(ConnColumns::resolve(&header, columns)?);
                }
                Some("unset_field") => unset = parts.next().unwrap_or("-").to_string(),
                Some("empty_field") => empty = parts.next().unwrap_or("(empty)").to_string(),
                _ => {}
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let cols = cols
            .as_ref()
            .ok_or_else(|| IngestError::MissingRequiredColumn("#fields".into()))?;
        report.data_lines += 1;
        let fields: Vec<&str> = line.split(separator.as_str()).collect();
        if fields.len() != ncols {
            report.malformed.push(MalformedLine {
                line_no,
                reason: format!("expected {ncols} fields, found {}", fields.len()),
            });
            continue;
        }
        push_record(
            &mut report,
            &mut seen,
            line_no,
            build_record(cols, &fields, format!("{source_name}:{line_no}"), &unset, &empty),
        );
    }
    Ok(report)
}

fn push_record(
    report: &mut ParseReport,
    seen: &mut HashSet<String>,
    line_no: usize,
    built: Result<TrafficRecord, String>,
) {
    match built {
        Ok(rec) if !seen.insert(rec.record_id.clone()) => report.malformed.push(MalformedLine {
            line_no,
            reason: format!("duplicate record_id `{}`", rec.record_id),
        }),
        Ok(rec) => report.records.push(rec),
        Err(reason) => report.malformed.push(MalformedLine { line_no, reason }),
    }
}

fn csv_reader<R: BufRead>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input)
}

fn csv_header<R: BufRead>(rdr: &mut csv::Reader<R>) -> Result<Option<Vec<String>>, IngestError> {
    match rdr.headers() {
        Ok(h) if h.is_empty() => Ok(None),
        Ok(h) => Ok(Some(h.iter().map(str::to_string).collect())),
        Err(e) => Err(IngestError::Io(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            e.to_string(),
        ))),
    }
}

fn parse_conn_csv<R: BufRead>(
    input: R,
    source_name: &str,
    columns: &ColumnMap,
) -> Result<ParseReport, IngestError> {
    let mut report = ParseReport::default();
    let mut rdr = csv_reader(input);
    let Some(header) = csv_header(&mut rdr)? else {
        return Ok(report);
    };
    let cols = ConnColumns::resolve(&header, columns)?;
    let mut seen = HashSet::new();
    for row in rdr.records() {
        report.data_lines += 1;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                let line_no = e.position().map_or(0, |p| p.line() as usize);
                report.malformed.push(MalformedLine { line_no, reason: e.to_string() });
                continue;
            }
        };
        let line_no = row.position().map_or(0, |p| p.line() as usize);
        if row.len() != header.len() {
            report.malformed.push(MalformedLine {
                line_no,
                reason: format!("expected {} fields, found {}", header.len(), row.len()),
            });
            continue;
        }
        let fields: Vec<&str> = row.iter().collect();
        push_record(
            &mut report,
            &mut seen,
            line_no,
            build_record(&cols, &fields, format!("{source_name}:{line_no}"), "-", ""),
        );
    }
    Ok(report)
}

/// Match pattern over a flow 5-tuple. Absent fields are wildcards.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowPattern {
    pub src_ip: Option<IpAddr>,
    pub dst_ip: Option<IpAddr>,
    pub src_port: Option<u16>,
    pub dst_port: Option<u16>,
    pub proto: Option<Proto>,
}

impl FlowPattern {
    pub fn matches(&self, r: &TrafficRecord) -> bool {
        fn field<T: PartialEq>(pat: &Option<T>, val: Option<&T>) -> bool {
            pat.as_ref().is_none_or(|p| val == Some(p))
        }
        field(&self.src_ip, Some(&r.src_ip))
            && field(&self.dst_ip, Some(&r.dst_ip))
            && field(&self.src_port, r.src_port.as_ref())
            && field(&self.dst_port, r.dst_port.as_ref())
            && field(&self.proto, Some(&r.proto))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct AnomalyReport {
    pub rows: Vec<(FlowPattern, AnomalyAnnotation)>,
    pub malformed: Vec<MalformedLine>,
    pub warnings: Vec<String>,
    pub data_lines: usize,
}

const ANOMALY_COLUMNS: &[(&str, &[&str])] = &[
    ("anomaly_id", &["anomalyID", "id"]),
    ("src_ip", &["srcIP"]),
    ("src_port", &["srcPort"]),
    ("dst_ip", &["dstIP"]),
    ("dst_port", &["dstPort"]),
    ("proto", &["protocol"]),
    ("taxonomy", &[]),
    ("heuristic", &["heuristic_code"]),
    ("label", &["severity"]),
];

fn is_wildcard(v: &str) -> bool {
    matches!(v.trim(), "" | "-" | "*")
}

/// Parses a MAWILab-style anomaly CSV into (pattern, annotation) rows,
/// preserving row order.
pub fn parse_anomaly_csv<R: BufRead>(
    input: R,
    columns: &ColumnMap,
) -> Result<AnomalyReport, IngestError> {
    let mut report = AnomalyReport::default();
    let mut rdr = csv_reader(input);
    let Some(header) = csv_header(&mut rdr)? else {
        return Ok(report);
    };
    let mut idx: HashMap<&str, usize> = HashMap::new();
    for (canonical, aliases) in ANOMALY_COLUMNS {
        if let Some(i) = columns.resolve(&header, canonical, aliases) {
            idx.insert(*canonical, i);
        }
    }
    for req in ["src_ip", "dst_ip", "label"] {
        if !idx.contains_key(req) {
            let shown = columns.0.get(req).map(String::as_str).unwrap_or(req);
            return Err(IngestError::MissingRequiredColumn(shown.to_string()));
        }
    }

    for row in rdr.records() {
        report.data_lines += 1;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                let line_no = e.position().map_or(0, |p| p.line() as usize);
                report.malformed.push(MalformedLine { line_no, reason: e.to_string() });
                continue;
            }
        };
        let line_no = row.position().map_or(0, |p| p.line() as usize);
        let get = |name: &str| {
            idx.get(name)
                .and_then(|&i| row.get(i))
                .filter(|v| !is_wildcard(v))
        };
        let parsed = (|| -> Result<(FlowPattern, AnomalyAnnotation, Option<String>), String> {
            let pattern = FlowPattern {
                src_ip: parse_opt(get("src_ip"), "src_ip")?,
                dst_ip: parse_opt(get("dst_ip"), "dst_ip")?,
                src_port: parse_opt(get("src_port"), "src_port")?,
                dst_port: parse_opt(get("dst_port"), "dst_port")?,
                proto: get("proto").map(Proto::from),
            };
            let heuristic_code: Option<u32> = parse_opt(get("heuristic"), "heuristic code")?;
            let label = get("label").ok_or("missing label")?;
            let (severity, warning) = match label.parse::<Severity>() {
                Ok(s) => (s, None),
                Err(v) => (
                    Severity::Suspicious,
                    Some(format!("line {line_no}: unknown severity `{v}`, defaulting to suspicious")),
                ),
            };
            let annotation = AnomalyAnnotation {
                heuristic_code,
                taxonomy: get("taxonomy").map(str::to_string),
                severity,
                anomaly_id: get("anomaly_id").map(str::to_string),
            };
            Ok((pattern, annotation, warning))
        })();
        match parsed {
            Ok((p, a, w)) => {
                if let Some(w) = w {
                    tracing::warn!("{w}");
                    report.warnings.push(w);
                }
                report.rows.push((p, a));
            }
            Err(reason) => report.malformed.push(MalformedLine { line_no, reason }),
        }
    }
    Ok(report)
}

/// Labels each record with the annotation of the first matching pattern.
/// Records without a match keep whatever label they already had.
pub fn annotate(
    records: Vec<TrafficRecord>,
    annotations: &[(FlowPattern, AnomalyAnnotation)],
) -> Vec<TrafficRecord> {
    records
        .into_iter()
        .map(|mut r| {
            if let Some((_, a)) = annotations.iter().find(|(p, _)| p.matches(&r)) {
                r.label = Some(a.clone());
            }
            r
        })
        .collect()
}

pub fn write_records_jsonl<W: Write>(mut out: W, records: &[TrafficRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Writes records as a Zeek `conn.log` (ICMP type/code in the port columns).
pub fn write_zeek_conn_log<W: Write>(mut out: W, records: &[TrafficRecord]) -> std::io::Result<()> {
    writeln!(out, "#separator \\x09")?;
    writeln!(out, "#set_separator\t,")?;
    writeln!(out, "#empty_field\t(empty)")?;
    writeln!(out, "#unset_field\t-")?;
    writeln!(out, "#path\tconn")?;
    writeln!(
        out,
        "#fields\tts\tuid\tid.orig_h\tid.orig_p\tid.resp_h\tid.resp_p\tproto\tconn_state\torig_bytes\tresp_bytes\torig_pkts\tresp_pkts"
    )?;
    writeln!(out, "#types\ttime\tstring\taddr\tport\taddr\tport\tenum\tstring\tcount\tcount\tcount\tcount")?;
    fn opt<T: fmt::Display>(v: Option<T>) -> String {
        v.map_or_else(|| "-".to_string(), |v| v.to_string())
    }
    for r in records {
        let (sp, dp) = match r.proto {
            Proto::Icmp => (r.icmp_type.map(u16::from), r.icmp_code.map(u16::from)),
            _ => (r.src_port, r.dst_port),
        };
        let us = r.ts.micros();
        writeln!(
            out,
            "{}.{:06}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            us.div_euclid(Timestamp::MICROS_PER_SEC),
            us.rem_euclid(Timestamp::MICROS_PER_SEC),
            r.record_id,
            r.src_ip,
            opt(sp),
            r.dst_ip,
            opt(dp),
            r.proto,
            opt(r.conn_state.as_ref()),
            opt(r.bytes_orig),
            opt(r.bytes_resp),
            opt(r.pkts_orig),
            opt(r.pkts_resp),
        )?;
    }
    out.flush()
}

pub fn read_records_jsonl<R: BufRead>(input: R) -> Result<Vec<TrafficRecord>, IngestError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|source| IngestError::Json { line: i + 1, source })?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const ZEEK_HEADER: &str = "#separator \\x09\n#set_separator\t,\n#empty_field\t(empty)\n#unset_field\t-\n#path\tconn\n#fields\tts\tuid\tid.orig_h\tid.orig_p\tid.resp_h\tid.resp_p\tproto\tservice\tduration\torig_bytes\tresp_bytes\tconn_state\torig_pkts\tresp_pkts\n#types\ttime\tstring\taddr\tport\taddr\tport\tenum\tstring\tinterval\tcount\tcount\tstring\tcount\tcount\n";

    fn zeek(body: &str) -> ParseReport {
        let text = format!("{ZEEK_HEADER}{body}");
        parse_conn_log(text.as_bytes(), ConnLogDialect::ZeekTsv, "conn.log", &ColumnMap::default()).unwrap()
    }

    #[test]
    fn zeek_s0_line() {
        let r = zeek("1641000000.500000\tCabc1\t192.0.2.7\t40000\t203.0.113.5\t80\ttcp\t-\t-\t0\t0\tS0\t1\t0\n");
        assert!(r.malformed.is_empty(), "{:?}", r.malformed);
        let rec = &r.records[0];
        assert_eq!(rec.proto, Proto::Tcp);
        assert_eq!(rec.conn_state, Some(ConnState::S0));
        assert_eq!(rec.src_ip.to_string(), "192.0.2.7");
        assert_eq!(rec.record_id, "Cabc1");
        assert_eq!(rec.ts, Timestamp(1_641_000_000_500_000));
        assert_eq!(rec.src_port, Some(40000));
        assert_eq!(rec.pkts_resp, Some(0));
    }

    #[test]
    fn zeek_icmp_ports_become_type_and_code() {
        let r = zeek("1641000000\t-\t192.0.2.7\t8\t203.0.113.5\t0\ticmp\t-\t-\t-\t-\tOTH\t1\t0\n");
        let rec = &r.records[0];
        assert_eq!(rec.icmp_type, Some(8));
        assert_eq!(rec.icmp_code, Some(0));
        assert_eq!(rec.src_port, None);
        // uid unset -> file:line fallback (header is 7 lines)
        assert_eq!(rec.record_id, "conn.log:8");
    }

    #[test]
    fn empty_input() {
        let r = parse_conn_log(&b""[..], ConnLogDialect::ZeekTsv, "x", &ColumnMap::default()).unwrap();
        assert!(r.records.is_empty() && r.malformed.is_empty());
        let r = parse_conn_log(&b""[..], ConnLogDialect::Csv, "x", &ColumnMap::default()).unwrap();
        assert!(r.records.is_empty() && r.malformed.is_empty());
    }

    #[test]
    fn six_lines_one_malformed() {
        let body = "\
1641000000\tC1\t10.0.0.1\t1000\t10.0.0.2\t80\ttcp\t-\t-\t-\t-\tSF\t3\t3
1641000001\tC2\t10.0.0.1\t1001\t10.0.0.2\t80\ttcp\t-\t-\t-\t-\tSF\t3\t3
1641000002\tC3\tnot-an-ip\t1002\t10.0.0.2\t80\ttcp\t-\t-\t-\t-\tSF\t3\t3
1641000003\tC4\t10.0.0.1\t53\t10.0.0.3\t53\tudp\t-\t-\t-\t-\tSF\t1\t1
1641000004\tC5\t10.0.0.1\t8\t10.0.0.3\t0\ticmp\t-\t-\t-\t-\tOTH\t1\t0
1641000005\tC6\t10.0.0.1\t1003\t10.0.0.2\t443\ttcp\t-\t-\t-\t-\tRSTO\t2\t1
";
        let r = zeek(body);
        assert_eq!(r.records.len(), 5);
        assert_eq!(r.malformed.len(), 1);
        assert_eq!(r.malformed[0].line_no, 10);
        assert_eq!(r.data_lines, 6);
    }

    #[test]
    fn wrong_field_count_and_duplicates_are_malformed() {
        let body = "1641000000\tC1\t10.0.0.1\n\
1641000000\tC1\t10.0.0.1\t1000\t10.0.0.2\t80\ttcp\t-\t-\t-\t-\tSF\t3\t3\n\
1641000000\tC1\t10.0.0.1\t1000\t10.0.0.2\t80\ttcp\t-\t-\t-\t-\tSF\t3\t3\n";
        let r = zeek(body);
        assert_eq!(r.records.len(), 1);
        assert_eq!(r.malformed.len(), 2);
        assert!(r.malformed[1].reason.contains("duplicate"));
    }

    #[test]
    fn tcp_without_ports_is_malformed() {
        let r = zeek("1641000000\tC1\t10.0.0.1\t-\t10.0.0.2\t80\ttcp\t-\t-\t-\t-\tSF\t3\t3\n");
        assert_eq!(r.malformed.len(), 1);
    }

    #[test]
    fn unknown_proto_preserved() {
        let r = zeek("1641000000\tC1\t10.0.0.1\t0\t10.0.0.2\t0\tunknown_transport\t-\t-\t-\t-\tOTH\t1\t0\n");
        assert_eq!(r.records[0].proto, Proto::Other("unknown_transport".into()));
        assert_eq!(r.records[0].src_port, None);
    }

    #[test]
    fn data_before_fields_is_fatal() {
        let err = parse_conn_log(&b"1\t2\t3\n"[..], ConnLogDialect::ZeekTsv, "x", &ColumnMap::default()).unwrap_err();
        assert!(matches!(err, IngestError::MissingRequiredColumn(c) if c == "#fields"));
    }

    #[test]
    fn missing_required_column() {
        let text = "ts,src_ip,dst_ip\n1,10.0.0.1,10.0.0.2\n";
        let err = parse_conn_log(text.as_bytes(), ConnLogDialect::Csv, "x", &ColumnMap::default()).unwrap_err();
        assert!(matches!(err, IngestError::MissingRequiredColumn(c) if c == "proto"));
    }

    #[test]
    fn csv_dialect_with_iso_timestamps() {
        let text = "ts,src_ip,src_port,dst_ip,dst_port,proto,conn_state,icmp_type\n\
2024-08-15 10:05:23,192.0.2.7,,203.0.113.5,,icmp,,8\n\
2024-08-15T10:05:24.25Z,192.0.2.7,5555,203.0.113.5,80,tcp,S0,\n";
        let r = parse_conn_log(text.as_bytes(), ConnLogDialect::Csv, "f.csv", &ColumnMap::default()).unwrap();
        assert!(r.malformed.is_empty(), "{:?}", r.malformed);
        assert_eq!(r.records[0].record_id, "f.csv:2");
        assert_eq!(r.records[0].icmp_type, Some(8));
        assert_eq!(r.records[1].ts.micros() - r.records[0].ts.micros(), 1_250_000);
    }

    #[test]
    fn csv_column_map_override() {
        let text = "time,a,b,p\n1641000000,10.0.0.1,10.0.0.2,icmp\n";
        let mut map = ColumnMap::default();
        for (k, v) in [("ts", "time"), ("src_ip", "a"), ("dst_ip", "b"), ("proto", "p")] {
            map.0.insert(k.into(), v.into());
        }
        let r = parse_conn_log(text.as_bytes(), ConnLogDialect::Csv, "m", &map).unwrap();
        // icmp with no type column -> malformed by invariant
        assert_eq!(r.malformed.len(), 1);
    }

    #[test]
    fn timestamp_parsing() {
        assert_eq!(Timestamp::parse("1641000000.1").unwrap(), Timestamp(1_641_000_000_100_000));
        assert_eq!(Timestamp::parse("1641000000.1234567").unwrap(), Timestamp(1_641_000_000_123_456));
        assert_eq!(
            Timestamp::parse("2022-01-01T01:20:00Z").unwrap(),
            Timestamp::parse("2022-01-01 01:20:00").unwrap()
        );
        assert_eq!(
            Timestamp::parse("2022-01-01T02:20:00+01:00").unwrap(),
            Timestamp::parse("2022-01-01T01:20:00Z").unwrap()
        );
        assert!(Timestamp::parse("yesterday").is_err());
        assert!(Timestamp::parse("1.2.3").is_err());
        assert_eq!(Timestamp(1_641_000_000_100_000).to_string(), "2022-01-01T01:20:00.100000Z");
    }

    const ANOMALY: &str = "anomalyID,srcIP,srcPort,dstIP,dstPort,taxonomy,heuristic,distance,nbDetectors,label\n";

    #[test]
    fn anomaly_rows() {
        let text = format!(
            "{ANOMALY}a1,192.0.2.7,,203.0.113.5,,ntscICecho,20,0.5,3,anomalous\n\
a2,198.51.100.1,,,80,DoS,,0.1,2,weird\n"
        );
        let r = parse_anomaly_csv(text.as_bytes(), &ColumnMap::default()).unwrap();
        assert_eq!(r.rows.len(), 2);
        let (p, a) = &r.rows[0];
        assert_eq!(a.heuristic_code, Some(20));
        assert_eq!(a.severity, Severity::Anomalous);
        assert_eq!(a.taxonomy.as_deref(), Some("ntscICecho"));
        assert_eq!(a.anomaly_id.as_deref(), Some("a1"));
        assert_eq!(p.src_port, None);
        assert_eq!(r.rows[1].1.severity, Severity::Suspicious);
        assert_eq!(r.rows[1].0.dst_ip, None);
        assert_eq!(r.warnings.len(), 1);
    }

    #[test]
    fn anomaly_header_only() {
        let r = parse_anomaly_csv(ANOMALY.as_bytes(), &ColumnMap::default()).unwrap();
        assert!(r.rows.is_empty());
    }

    #[test]
    fn anomaly_bad_heuristic_is_malformed() {
        let text = format!("{ANOMALY}a1,192.0.2.7,,203.0.113.5,,x,-3,0,0,anomalous\n");
        let r = parse_anomaly_csv(text.as_bytes(), &ColumnMap::default()).unwrap();
        assert_eq!(r.rows.len(), 0);
        assert_eq!(r.malformed.len(), 1);
    }

    fn tcp(id: &str, dport: u16) -> TrafficRecord {
        TrafficRecord {
            record_id: id.into(),
            ts: Timestamp::from_secs(1_641_000_000),
            src_ip: "10.0.0.1".parse().unwrap(),
            dst_ip: "10.0.0.2".parse().unwrap(),
            src_port: Some(4000),
            dst_port: Some(dport),
            proto: Proto::Tcp,
            conn_state: Some(ConnState::SF),
            icmp_type: None,
            icmp_code: None,
            bytes_orig: None,
            bytes_resp: None,
            pkts_orig: None,
            pkts_resp: None,
            label: None,
        }
    }

    fn ann(code: Option<u32>, sev: Severity) -> AnomalyAnnotation {
        AnomalyAnnotation { heuristic_code: code, taxonomy: None, severity: sev, anomaly_id: None }
    }

    #[test]
    fn wildcard_port_matches_any_port() {
        let text = format!("{ANOMALY}a1,10.0.0.1,,10.0.0.2,,DoS,,0,0,anomalous\n");
        let rows = parse_anomaly_csv(text.as_bytes(), &ColumnMap::default()).unwrap().rows;
        let out = annotate(vec![tcp("a", 80), tcp("b", 443)], &rows);
        assert!(out.iter().all(|r| r.label.is_some()));
        let text = format!("{ANOMALY}a1,10.0.0.1,,10.0.0.2,80,DoS,,0,0,anomalous\n");
        let rows = parse_anomaly_csv(text.as_bytes(), &ColumnMap::default()).unwrap().rows;
        let out = annotate(vec![tcp("a", 80), tcp("b", 443)], &rows);
        assert!(out[0].label.is_some() && out[1].label.is_none());
    }

    #[test]
    fn first_pattern_wins() {
        let rows = vec![
            (FlowPattern { dst_port: Some(80), ..Default::default() }, ann(Some(20), Severity::Anomalous)),
            (FlowPattern::default(), ann(None, Severity::Notice)),
        ];
        let out = annotate(vec![tcp("a", 80), tcp("b", 22)], &rows);
        // oracle: linear scan for the first match
        for r in &out {
            let expect = rows.iter().find(|(p, _)| p.matches(&tcp("x", r.dst_port.unwrap()))).map(|x| &x.1);
            assert_eq!(r.label.as_ref(), expect);
        }
        assert_eq!(out[0].label.as_ref().unwrap().heuristic_code, Some(20));
    }

    #[test]
    fn no_annotations_is_identity() {
        let input = vec![tcp("a", 80), tcp("b", 22)];
        assert_eq!(annotate(input.clone(), &[]), input);
    }

    #[test]
    fn jsonl_round_trip() {
        let mut r = tcp("a", 80);
        r.label = Some(ann(Some(20), Severity::Anomalous));
        let mut buf = Vec::new();
        write_records_jsonl(&mut buf, &[r.clone()]).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.contains("\"proto\":\"tcp\""));
        assert!(text.contains("\"conn_state\":\"SF\""));
        assert_eq!(read_records_jsonl(&buf[..]).unwrap(), vec![r]);
    }
}
