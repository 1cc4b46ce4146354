//! Ground-truth and expert-rule labels for SYN and ping flood evaluation,
//! plus a threshold-rule baseline detector.
//!
//! Windows are closed intervals `[t, t + W]` anchored at an event; every
//! event inside a window holding at least `min_requests` events is marked.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};
use std::net::IpAddr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{ConnState, Proto, TrafficRecord};

/// MAWILab heuristic code for ICMP echo floods.
pub const PING_HEURISTIC: u32 = 20;

pub const RULE_S0: &str = "S0";
pub const RULE_WINDOW: &str = "window>=10";
pub const RULE_WINDOW_SRC: &str = "window>=10/src";
pub const RULE_WINDOW_DST: &str = "window>=10/dst";
pub const RULE_HEURISTIC: &str = "heuristic-20";
pub const RULE_REVIEW: &str = "5-9-review";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelVerdict {
    Attack,
    Benign,
    Review,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledInstance {
    pub record_id: String,
    pub verdict: LabelVerdict,
    pub rule_fired: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Excluded {
    pub record_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelReport {
    pub labels: Vec<LabeledInstance>,
    pub excluded: Vec<Excluded>,
}

impl LabelReport {
    pub fn count(&self, v: LabelVerdict) -> usize {
        self.labels.iter().filter(|l| l.verdict == v).count()
    }
}

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("invalid window spec: {0}")]
    InvalidSpec(String),
    #[error("label file line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowSpec {
    pub window_seconds: u64,
    pub min_requests: usize,
    pub review_min: usize,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self { window_seconds: 20, min_requests: 10, review_min: 5 }
    }
}

impl WindowSpec {
    pub fn validate(&self) -> Result<(), LabelError> {
        if !(self.min_requests > self.review_min && self.review_min > 0) {
            return Err(LabelError::InvalidSpec(format!(
                "need min_requests ({}) > review_min ({}) > 0",
                self.min_requests, self.review_min
            )));
        }
        Ok(())
    }

    fn window_micros(&self) -> i64 {
        secs_to_micros(self.window_seconds)
    }
}

fn secs_to_micros(s: u64) -> i64 {
    i64::try_from(s).unwrap_or(i64::MAX).saturating_mul(1_000_000)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PingMode {
    GroundTruth,
    Expert,
}

impl std::str::FromStr for PingMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "ground_truth" | "gt" => Ok(Self::GroundTruth),
            "expert" => Ok(Self::Expert),
            other => Err(format!("unknown ping labeling mode `{other}`")),
        }
    }
}

/// Sliding-window scan over sorted timestamps.
///
/// Returns which events fall inside some window `[t_i, t_i + width]` with at
/// least `min` events, and the largest event count any window reaches.
pub fn window_scan(times: &[i64], width: i64, min: usize) -> (Vec<bool>, usize) {
    debug_assert!(times.windows(2).all(|w| w[0] <= w[1]));
    let n = times.len();
    let mut cover = vec![0i64; n + 1];
    let mut peak = 0;
    let mut j = 0;
    for i in 0..n {
        j = j.max(i);
        let limit = times[i].saturating_add(width);
        while j < n && times[j] <= limit {
            j += 1;
        }
        let count = j - i;
        peak = peak.max(count);
        if count >= min {
            cover[i] += 1;
            cover[j] -= 1;
        }
    }
    let mut acc = 0;
    let marked = cover[..n]
        .iter()
        .map(|d| {
            acc += d;
            acc > 0
        })
        .collect();
    (marked, peak)
}

fn sorted(records: &[TrafficRecord]) -> Vec<&TrafficRecord> {
    let mut v: Vec<&TrafficRecord> = records.iter().collect();
    v.sort_by(|a, b| a.ts.cmp(&b.ts).then_with(|| a.record_id.cmp(&b.record_id)));
    v
}

/// Marks every element of `items` covered by a firing window within its group.
fn grouped_marks<K: Ord>(
    items: &[&TrafficRecord],
    key: impl Fn(&TrafficRecord) -> K,
    width: i64,
    min: usize,
) -> (Vec<bool>, BTreeMap<K, usize>) {
    let mut groups: BTreeMap<K, Vec<usize>> = BTreeMap::new();
    for (i, r) in items.iter().enumerate() {
        groups.entry(key(r)).or_default().push(i);
    }
    let mut marks = vec![false; items.len()];
    let mut peaks = BTreeMap::new();
    for (k, idx) in groups {
        let times: Vec<i64> = idx.iter().map(|&i| items[i].ts.micros()).collect();
        let (m, peak) = window_scan(&times, width, min);
        for (pos, hit) in idx.iter().zip(m) {
            marks[*pos] = hit;
        }
        peaks.insert(k, peak);
    }
    (marks, peaks)
}

fn is_echo_request(r: &TrafficRecord) -> bool {
    r.proto == Proto::Icmp && r.icmp_type == Some(8)
}

/// SYN-flood labels: S0 is attack, completed or reset states are benign,
/// everything else is excluded and reported.
pub fn label_syn(records: &[TrafficRecord]) -> LabelReport {
    let mut out = LabelReport::default();
    for r in sorted(records) {
        if r.proto != Proto::Tcp {
            out.excluded.push(Excluded { record_id: r.record_id.clone(), reason: format!("proto {} is not tcp", r.proto) });
            continue;
        }
        let verdict = match &r.conn_state {
            Some(ConnState::S0) => Some(LabelVerdict::Attack),
            Some(ConnState::SH | ConnState::SF | ConnState::RSTR | ConnState::RSTO | ConnState::OTH) => {
                Some(LabelVerdict::Benign)
            }
            _ => None,
        };
        match verdict {
            Some(verdict) => out.labels.push(LabeledInstance {
                record_id: r.record_id.clone(),
                verdict,
                rule_fired: r.conn_state.as_ref().map(|s| s.to_string()).unwrap_or_default(),
            }),
            None => out.excluded.push(Excluded {
                record_id: r.record_id.clone(),
                reason: match &r.conn_state {
                    Some(s) => format!("conn_state {s} is outside the labeling rules"),
                    None => "conn_state absent".into(),
                },
            }),
        }
    }
    out
}

/// Ping-flood labels over all ICMP records; non-ICMP records are excluded.
///
/// Windows count echo requests per directional `(src, dst)` pair, and also
/// per source and per destination to catch one-to-many and many-to-one
/// floods. Ground-truth mode additionally marks every pair whose records
/// carry heuristic 20; expert mode sends pairs peaking in
/// `review_min..min_requests` to review.
pub fn label_ping(records: &[TrafficRecord], spec: &WindowSpec, mode: PingMode) -> Result<LabelReport, LabelError> {
    spec.validate()?;
    let all = sorted(records);
    let mut out = LabelReport::default();
    let icmp: Vec<&TrafficRecord> = all
        .into_iter()
        .filter(|r| {
            let keep = r.proto == Proto::Icmp;
            if !keep {
                out.excluded.push(Excluded { record_id: r.record_id.clone(), reason: format!("proto {} is not icmp", r.proto) });
            }
            keep
        })
        .collect();
    let requests: Vec<&TrafficRecord> = icmp.iter().copied().filter(|r| is_echo_request(r)).collect();
    let w = spec.window_micros();
    let min = spec.min_requests;
    let (pair_marks, pair_peaks) = grouped_marks(&requests, |r| (r.src_ip, r.dst_ip), w, min);
    let (src_marks, _) = grouped_marks(&requests, |r| r.src_ip, w, min);
    let (dst_marks, _) = grouped_marks(&requests, |r| r.dst_ip, w, min);

    let mut fired: BTreeMap<&str, &'static str> = BTreeMap::new();
    for (i, r) in requests.iter().enumerate() {
        let tag = if pair_marks[i] {
            RULE_WINDOW
        } else if src_marks[i] {
            RULE_WINDOW_SRC
        } else if dst_marks[i] {
            RULE_WINDOW_DST
        } else {
            continue;
        };
        fired.insert(r.record_id.as_str(), tag);
    }
    let h20_pairs: HashSet<(IpAddr, IpAddr)> = icmp
        .iter()
        .filter(|r| r.label.as_ref().and_then(|l| l.heuristic_code) == Some(PING_HEURISTIC))
        .map(|r| (r.src_ip, r.dst_ip))
        .collect();

    for r in icmp {
        let pair = (r.src_ip, r.dst_ip);
        let (verdict, rule) = if let Some(tag) = fired.get(r.record_id.as_str()) {
            (LabelVerdict::Attack, tag.to_string())
        } else if h20_pairs.contains(&pair) {
            (LabelVerdict::Attack, RULE_HEURISTIC.to_string())
        } else {
            let peak = pair_peaks.get(&pair).copied().unwrap_or(0);
            match mode {
                PingMode::Expert if (spec.review_min..min).contains(&peak) => {
                    (LabelVerdict::Review, RULE_REVIEW.to_string())
                }
                PingMode::Expert if peak < spec.review_min => (LabelVerdict::Benign, format!("window<{}", spec.review_min)),
                PingMode::Expert => (LabelVerdict::Benign, format!("window<{min}")),
                PingMode::GroundTruth => (LabelVerdict::Benign, format!("window<{min}")),
            }
        };
        out.labels.push(LabeledInstance { record_id: r.record_id.clone(), verdict, rule_fired: rule });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineThresholds {
    pub syn_window_seconds: u64,
    /// A source is flagged when its S0 count in one window exceeds this.
    pub syn_threshold: usize,
    pub ping_window_seconds: u64,
    pub ping_min_requests: usize,
}

impl Default for BaselineThresholds {
    fn default() -> Self {
        Self { syn_window_seconds: 60, syn_threshold: 50, ping_window_seconds: 10, ping_min_requests: 10 }
    }
}

impl BaselineThresholds {
    /// Thresholds no trace can reach.
    pub fn never() -> Self {
        Self { syn_threshold: usize::MAX, ping_min_requests: usize::MAX, ..Self::default() }
    }
}

/// Snort-style threshold detector: per-source S0 rate for SYN floods and a
/// per-pair echo-request window for ping floods. Every record gets a label.
pub fn rule_baseline(records: &[TrafficRecord], t: &BaselineThresholds) -> Vec<LabeledInstance> {
    let all = sorted(records);
    let s0: Vec<&TrafficRecord> = all
        .iter()
        .copied()
        .filter(|r| r.proto == Proto::Tcp && r.conn_state == Some(ConnState::S0))
        .collect();
    let pings: Vec<&TrafficRecord> = all.iter().copied().filter(|r| is_echo_request(r)).collect();
    let (syn_marks, _) = grouped_marks(
        &s0,
        |r| r.src_ip,
        secs_to_micros(t.syn_window_seconds),
        t.syn_threshold.saturating_add(1),
    );
    let (ping_marks, _) = grouped_marks(&pings, |r| (r.src_ip, r.dst_ip), secs_to_micros(t.ping_window_seconds), t.ping_min_requests);
    let syn_rule = format!("s0>{}/{}s", t.syn_threshold, t.syn_window_seconds);
    let ping_rule = format!("echo>={}/{}s", t.ping_min_requests, t.ping_window_seconds);
    let mut hits: BTreeMap<&str, &str> = BTreeMap::new();
    for (r, m) in s0.iter().zip(syn_marks) {
        if m {
            hits.insert(&r.record_id, &syn_rule);
        }
    }
    for (r, m) in pings.iter().zip(ping_marks) {
        if m {
            hits.insert(&r.record_id, &ping_rule);
        }
    }
    all.into_iter()
        .map(|r| match hits.get(r.record_id.as_str()) {
            Some(rule) => LabeledInstance { record_id: r.record_id.clone(), verdict: LabelVerdict::Attack, rule_fired: rule.to_string() },
            None => LabeledInstance { record_id: r.record_id.clone(), verdict: LabelVerdict::Benign, rule_fired: "below-threshold".into() },
        })
        .collect()
}

pub fn write_labels_jsonl<W: Write>(mut out: W, labels: &[LabeledInstance]) -> std::io::Result<()> {
    for l in labels {
        serde_json::to_writer(&mut out, l)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_labels_jsonl<R: BufRead>(input: R) -> Result<Vec<LabeledInstance>, LabelError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| LabelError::Json { line: i + 1, source })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{AnomalyAnnotation, Severity, Timestamp};

    fn ping(id: &str, src: &str, dst: &str, secs: f64) -> TrafficRecord {
        TrafficRecord {
            record_id: id.into(),
            ts: Timestamp::from_micros((secs * 1e6) as i64),
            src_ip: src.parse().unwrap(),
            dst_ip: dst.parse().unwrap(),
            src_port: None,
            dst_port: None,
            proto: Proto::Icmp,
            conn_state: None,
            icmp_type: Some(8),
            icmp_code: Some(0),
            bytes_orig: None,
            bytes_resp: None,
            pkts_orig: None,
            pkts_resp: None,
            label: None,
        }
    }

    fn tcp(id: &str, state: Option<ConnState>) -> TrafficRecord {
        TrafficRecord {
            proto: Proto::Tcp,
            conn_state: state,
            icmp_type: None,
            icmp_code: None,
            src_port: Some(1234),
            dst_port: Some(80),
            ..ping(id, "192.0.2.1", "203.0.113.5", 0.0)
        }
    }

    fn burst(n: usize, step: f64) -> Vec<TrafficRecord> {
        (0..n).map(|i| ping(&format!("p{i:02}"), "192.0.2.7", "203.0.113.5", i as f64 * step)).collect()
    }

    #[test]
    fn window_scan_boundaries() {
        let t: Vec<i64> = (0..10).map(|i| i * 2_000_000).collect();
        // ten events spanning 18 s fit into one 20 s window
        let (m, peak) = window_scan(&t, 20_000_000, 10);
        assert!(m.iter().all(|&x| x));
        assert_eq!(peak, 10);
        let (m, _) = window_scan(&t, 17_999_999, 10);
        assert!(m.iter().all(|&x| !x));
        // inclusive at both ends
        let t = [0, 20_000_000];
        assert_eq!(window_scan(&t, 20_000_000, 2).0, vec![true, true]);
        assert_eq!(window_scan(&[], 1, 1), (vec![], 0));
    }

    #[test]
    fn ten_per_second_is_attack() {
        let rep = label_ping(&burst(10, 1.0), &WindowSpec::default(), PingMode::GroundTruth).unwrap();
        assert_eq!(rep.count(LabelVerdict::Attack), 10);
        assert!(rep.labels.iter().all(|l| l.rule_fired == RULE_WINDOW));
    }

    #[test]
    fn nine_is_benign_in_ground_truth_and_review_for_experts() {
        let recs = burst(9, 2.0);
        let gt = label_ping(&recs, &WindowSpec::default(), PingMode::GroundTruth).unwrap();
        assert_eq!(gt.count(LabelVerdict::Benign), 9);
        let ex = label_ping(&burst(7, 2.0), &WindowSpec::default(), PingMode::Expert).unwrap();
        assert_eq!(ex.count(LabelVerdict::Review), 7);
        assert!(ex.labels.iter().all(|l| l.rule_fired == RULE_REVIEW));
        let ex = label_ping(&burst(4, 2.0), &WindowSpec::default(), PingMode::Expert).unwrap();
        assert_eq!(ex.count(LabelVerdict::Benign), 4);
    }

    #[test]
    fn heuristic_group_is_attack() {
        let mut recs = burst(3, 30.0);
        recs[1].label = Some(AnomalyAnnotation {
            heuristic_code: Some(20),
            taxonomy: None,
            severity: Severity::Anomalous,
            anomaly_id: None,
        });
        recs.push(ping("other", "192.0.2.8", "203.0.113.5", 5.0));
        let rep = label_ping(&recs, &WindowSpec::default(), PingMode::GroundTruth).unwrap();
        let by_id: BTreeMap<_, _> = rep.labels.iter().map(|l| (l.record_id.as_str(), l)).collect();
        for id in ["p00", "p01", "p02"] {
            assert_eq!(by_id[id].verdict, LabelVerdict::Attack);
            assert_eq!(by_id[id].rule_fired, RULE_HEURISTIC);
        }
        assert_eq!(by_id["other"].verdict, LabelVerdict::Benign);
    }

    #[test]
    fn aggregate_windows_catch_many_to_one() {
        let recs: Vec<_> = (0..10).map(|i| ping(&format!("m{i}"), &format!("198.51.100.{i}"), "203.0.113.5", i as f64)).collect();
        let rep = label_ping(&recs, &WindowSpec::default(), PingMode::GroundTruth).unwrap();
        assert!(rep.labels.iter().all(|l| l.verdict == LabelVerdict::Attack && l.rule_fired == RULE_WINDOW_DST));
        let recs: Vec<_> = (0..10).map(|i| ping(&format!("o{i}"), "192.0.2.7", &format!("198.51.100.{i}"), i as f64)).collect();
        let rep = label_ping(&recs, &WindowSpec::default(), PingMode::GroundTruth).unwrap();
        assert!(rep.labels.iter().all(|l| l.rule_fired == RULE_WINDOW_SRC));
    }

    #[test]
    fn non_icmp_is_excluded_and_replies_are_benign() {
        let mut recs = burst(10, 1.0);
        let mut reply = ping("r", "203.0.113.5", "192.0.2.7", 1.5);
        reply.icmp_type = Some(0);
        recs.push(reply);
        recs.push(tcp("t", Some(ConnState::S0)));
        let rep = label_ping(&recs, &WindowSpec::default(), PingMode::GroundTruth).unwrap();
        assert_eq!(rep.excluded.len(), 1);
        assert_eq!(rep.excluded[0].record_id, "t");
        assert_eq!(rep.count(LabelVerdict::Attack), 10);
        assert_eq!(rep.count(LabelVerdict::Benign), 1);
    }

    #[test]
    fn invalid_spec() {
        let spec = WindowSpec { min_requests: 5, review_min: 5, ..Default::default() };
        assert!(label_ping(&[], &spec, PingMode::Expert).is_err());
    }

    #[test]
    fn syn_rules() {
        let recs = vec![
            tcp("a", Some(ConnState::S0)),
            tcp("b", Some(ConnState::SF)),
            tcp("c", Some(ConnState::Other("REJ".into()))),
            tcp("d", None),
            ping("e", "192.0.2.1", "203.0.113.5", 0.0),
        ];
        let rep = label_syn(&recs);
        let got: Vec<_> = rep.labels.iter().map(|l| (l.record_id.as_str(), l.verdict, l.rule_fired.as_str())).collect();
        assert_eq!(got, vec![("a", LabelVerdict::Attack, "S0"), ("b", LabelVerdict::Benign, "SF")]);
        let ex: Vec<_> = rep.excluded.iter().map(|e| e.record_id.as_str()).collect();
        assert_eq!(ex, ["c", "d", "e"]);
    }

    #[test]
    fn baseline() {
        let mut recs: Vec<_> = (0..100)
            .map(|i| TrafficRecord { ts: Timestamp::from_micros(i * 100_000), ..tcp(&format!("s{i:03}"), Some(ConnState::S0)) })
            .collect();
        let other = TrafficRecord { src_ip: "192.0.2.99".parse().unwrap(), ..tcp("quiet", Some(ConnState::S0)) };
        recs.push(other);
        let out = rule_baseline(&recs, &BaselineThresholds::default());
        assert_eq!(out.iter().filter(|l| l.verdict == LabelVerdict::Attack).count(), 100);
        assert!(out.iter().any(|l| l.record_id == "quiet" && l.verdict == LabelVerdict::Benign));
        let out = rule_baseline(&recs, &BaselineThresholds::never());
        assert!(out.iter().all(|l| l.verdict == LabelVerdict::Benign));
        let out = rule_baseline(&burst(10, 1.0), &BaselineThresholds::default());
        assert!(out.iter().all(|l| l.verdict == LabelVerdict::Attack));
        // slow flood: ten requests spread over 18 s escape a 10 s window
        let out = rule_baseline(&burst(10, 2.0), &BaselineThresholds::default());
        assert!(out.iter().all(|l| l.verdict == LabelVerdict::Benign));
    }

    #[test]
    fn jsonl_round_trip() {
        let rep = label_ping(&burst(10, 1.0), &WindowSpec::default(), PingMode::GroundTruth).unwrap();
        let mut buf = Vec::new();
        write_labels_jsonl(&mut buf, &rep.labels).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with(r#"{"record_id":"p00","verdict":"attack","rule_fired":"window>=10"}"#));
        assert_eq!(read_labels_jsonl(&buf[..]).unwrap(), rep.labels);
    }
}
