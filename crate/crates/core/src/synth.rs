//! Seeded synthetic traffic with planted SYN and ping floods.
//!
//! Background traffic never contains S0 connections and keeps every ICMP
//! echo window (per pair, per source, per destination) well below the
//! review band, so the ground-truth labelers mark exactly the planted
//! flood records as attacks. Short diagnostic ping bursts of 5–9 requests,
//! some flagged suspicious by the anomaly feed, provide realistic near
//! misses.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::net::{IpAddr, Ipv4Addr};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::ReferenceDoc;
use crate::ingest::{write_zeek_conn_log, ConnState, Proto, Timestamp, TrafficRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub seed: u64,
    pub start: Timestamp,
    pub duration_secs: i64,
    pub tcp_flows: usize,
    pub udp_flows: usize,
    pub monitor_pings: usize,
    pub syn_floods: usize,
    pub ping_floods: usize,
    pub diagnostic_bursts: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            // 2024-08-15T00:00:00Z
            start: Timestamp::from_secs(1_723_680_000),
            duration_secs: 6 * 3600,
            tcp_flows: 3200,
            udp_flows: 1000,
            monitor_pings: 300,
            syn_floods: 6,
            ping_floods: 8,
            diagnostic_bursts: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnomalyRow {
    pub anomaly_id: String,
    pub src_ip: IpAddr,
    pub dst_ip: IpAddr,
    pub dst_port: Option<u16>,
    pub proto: Proto,
    pub taxonomy: Option<String>,
    pub heuristic: Option<u32>,
    pub label: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantedKind {
    SynFlood,
    PingFlood,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SynthCorpus {
    /// Time-sorted, unlabeled records as they would appear in `conn.log`.
    pub records: Vec<TrafficRecord>,
    pub anomalies: Vec<AnomalyRow>,
    pub planted: BTreeMap<String, PlantedKind>,
    pub docs: Vec<ReferenceDoc>,
}

impl SynthCorpus {
    pub fn conn_log(&self) -> String {
        let mut buf = Vec::new();
        write_zeek_conn_log(&mut buf, &self.records).expect("writing to memory");
        String::from_utf8(buf).expect("zeek output is utf-8")
    }

    /// MAWILab-style anomaly CSV; `*` marks wildcard fields.
    pub fn anomaly_csv(&self) -> String {
        let mut s = String::from("anomalyID,srcIP,srcPort,dstIP,dstPort,protocol,taxonomy,heuristic,distance,nbDetectors,label\n");
        let opt = |v: Option<String>| v.unwrap_or_else(|| "*".into());
        for a in &self.anomalies {
            let _ = writeln!(
                s,
                "{},{},*,{},{},{},{},{},0.0,4,{}",
                a.anomaly_id,
                a.src_ip,
                a.dst_ip,
                opt(a.dst_port.map(|p| p.to_string())),
                a.proto,
                a.taxonomy.clone().unwrap_or_default(),
                a.heuristic.map(|h| h.to_string()).unwrap_or_default(),
                a.label
            );
        }
        s
    }

    pub fn docs_jsonl(&self) -> String {
        self.docs.iter().map(|d| serde_json::to_string(d).expect("doc serializes") + "\n").collect()
    }

    pub fn planted_ids(&self, kind: PlantedKind) -> BTreeSet<String> {
        self.planted.iter().filter(|(_, k)| **k == kind).map(|(id, _)| id.clone()).collect()
    }
}

pub fn reference_docs() -> Vec<ReferenceDoc> {
    let doc = |id: &str, text: &str, meta: &[(&str, &str)]| ReferenceDoc {
        doc_id: id.into(),
        text: text.into(),
        metadata: meta.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
    };
    vec![
        doc(
            "ref-heuristic-20",
            "Heuristic 20 denotes ICMP echo request flood patterns: one host sends a rapid series of ICMP request packets to a target, usually without replies.",
            &[("heuristic_code", "20"), ("taxonomy", "DoS")],
        ),
        doc(
            "ref-syn-s0",
            "A TCP SYN flood shows as many TCP connection attempts from one host ending in state S0: the SYN is sent and the target never replies.",
            &[("taxonomy", "DoS")],
        ),
        doc(
            "ref-conn-states",
            "Connection states SF, SH, RSTO, RSTR and OTH describe completed, half-closed, reset or midstream TCP sessions and reflect normal traffic.",
            &[],
        ),
    ]
}

struct Gen {
    rng: ChaCha8Rng,
    start: i64,
    span: i64,
    uids: HashSet<String>,
    records: Vec<TrafficRecord>,
}

const UID_ALPHABET: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789";

fn v4(a: u8, b: u8, c: u8, d: u8) -> IpAddr {
    IpAddr::V4(Ipv4Addr::new(a, b, c, d))
}

impl Gen {
    fn uid(&mut self) -> String {
        loop {
            let mut s = String::from("C");
            for _ in 0..17 {
                s.push(UID_ALPHABET[self.rng.random_range(0..UID_ALPHABET.len())] as char);
            }
            if self.uids.insert(s.clone()) {
                return s;
            }
        }
    }

    fn any_time(&mut self) -> i64 {
        self.start + self.rng.random_range(0..self.span)
    }

    fn base(&mut self, ts: i64, src: IpAddr, dst: IpAddr, proto: Proto) -> TrafficRecord {
        TrafficRecord {
            record_id: self.uid(),
            ts: Timestamp::from_micros(ts),
            src_ip: src,
            dst_ip: dst,
            src_port: None,
            dst_port: None,
            proto,
            conn_state: None,
            icmp_type: None,
            icmp_code: None,
            bytes_orig: None,
            bytes_resp: None,
            pkts_orig: None,
            pkts_resp: None,
            label: None,
        }
    }

    fn tcp(&mut self, ts: i64, src: IpAddr, dst: IpAddr, dport: u16, state: ConnState) -> TrafficRecord {
        let mut r = self.base(ts, src, dst, Proto::Tcp);
        r.src_port = Some(self.rng.random_range(1024..=65535));
        r.dst_port = Some(dport);
        if state == ConnState::S0 {
            r.pkts_orig = Some(1);
            r.bytes_orig = Some(0);
            r.pkts_resp = Some(0);
            r.bytes_resp = Some(0);
        } else {
            r.pkts_orig = Some(self.rng.random_range(3..60));
            r.pkts_resp = Some(self.rng.random_range(2..80));
            r.bytes_orig = Some(self.rng.random_range(40..20_000));
            r.bytes_resp = Some(self.rng.random_range(40..200_000));
        }
        r.conn_state = Some(state);
        r
    }

    fn icmp(&mut self, ts: i64, src: IpAddr, dst: IpAddr, icmp_type: u8) -> TrafficRecord {
        let mut r = self.base(ts, src, dst, Proto::Icmp);
        r.icmp_type = Some(icmp_type);
        r.icmp_code = Some(0);
        r.pkts_orig = Some(1);
        r.bytes_orig = Some(64);
        r
    }
}

fn server(i: usize) -> IpAddr {
    v4(10, 0, 0, 1 + (i % 60) as u8)
}

fn client(i: usize) -> IpAddr {
    v4(10, 1, (i / 250) as u8, 1 + (i % 250) as u8)
}

/// Generates the corpus described by `spec`; identical specs give
/// identical corpora.
pub fn generate(spec: &SynthSpec) -> SynthCorpus {
    let mut g = Gen {
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
        start: spec.start.micros(),
        span: spec.duration_secs * 1_000_000,
        uids: HashSet::new(),
        records: Vec::new(),
    };
    let mut anomalies = Vec::new();
    let mut planted = BTreeMap::new();

    for _ in 0..spec.tcp_flows {
        let ts = g.any_time();
        let src = client(g.rng.random_range(0..200));
        let dst = server(g.rng.random_range(0..60));
        let dport = [80, 443, 443, 22, 25][g.rng.random_range(0..5)];
        let state = match g.rng.random_range(0..100) {
            0..75 => ConnState::SF,
            75..83 => ConnState::RSTO,
            83..90 => ConnState::RSTR,
            90..95 => ConnState::SH,
            _ => ConnState::OTH,
        };
        let r = g.tcp(ts, src, dst, dport, state);
        g.records.push(r);
    }
    for _ in 0..spec.udp_flows {
        let ts = g.any_time();
        let src = client(g.rng.random_range(0..200));
        let dst = server(g.rng.random_range(0..60));
        let mut r = g.base(ts, src, dst, Proto::Udp);
        r.src_port = Some(g.rng.random_range(1024..=65535));
        r.dst_port = Some(if g.rng.random_bool(0.8) { 53 } else { 123 });
        r.pkts_orig = Some(1);
        r.pkts_resp = Some(1);
        r.bytes_orig = Some(g.rng.random_range(40..120));
        r.bytes_resp = Some(g.rng.random_range(60..500));
        g.records.push(r);
    }
    // Sparse monitoring pings with replies: four monitors, twenty servers.
    for _ in 0..spec.monitor_pings {
        let ts = g.any_time();
        let mon = v4(10, 2, 0, g.rng.random_range(1..=4));
        let dst = server(g.rng.random_range(0..20));
        let req = g.icmp(ts, mon, dst, 8);
        let rtt = g.rng.random_range(200..50_000);
        let rep = g.icmp(ts + rtt, dst, mon, 0);
        g.records.push(req);
        g.records.push(rep);
    }
    // A few background pairs the feed marks as notices.
    for i in 0..5 {
        let pick = g.rng.random_range(0..g.records.len());
        let r = &g.records[pick];
        if r.proto != Proto::Tcp {
            continue;
        }
        anomalies.push(AnomalyRow {
            anomaly_id: format!("notice-{i}"),
            src_ip: r.src_ip,
            dst_ip: r.dst_ip,
            dst_port: r.dst_port,
            proto: Proto::Tcp,
            taxonomy: Some("unknown".into()),
            heuristic: None,
            label: "notice".into(),
        });
    }

    for f in 0..spec.syn_floods {
        let attacker = v4(198, 51, 100, 1 + f as u8);
        let victim = server(g.rng.random_range(0..60));
        let dport = if g.rng.random_bool(0.5) { 80 } else { 443 };
        let n = g.rng.random_range(20..=200);
        let mean_gap = g.rng.random_range(20_000..400_000);
        let mut t = g.any_time();
        for _ in 0..n {
            let r = g.tcp(t, attacker, victim, dport, ConnState::S0);
            planted.insert(r.record_id.clone(), PlantedKind::SynFlood);
            g.records.push(r);
            t += g.rng.random_range(1..=2 * mean_gap);
        }
        anomalies.push(AnomalyRow {
            anomaly_id: format!("syn-{f}"),
            src_ip: attacker,
            dst_ip: victim,
            dst_port: Some(dport),
            proto: Proto::Tcp,
            taxonomy: Some("DoS".into()),
            heuristic: None,
            label: "anomalous".into(),
        });
    }
    for f in 0..spec.ping_floods {
        let attacker = v4(203, 0, 113, 1 + f as u8);
        let victim = v4(10, 3, 0, 1 + f as u8);
        let n = g.rng.random_range(10..=60);
        // Alternate fast floods with slow ones that stay just inside the window.
        let gap_range = if f % 2 == 0 { 50_000..1_000_000 } else { 1_500_000..1_950_000 };
        let mut t = g.any_time();
        for _ in 0..n {
            let r = g.icmp(t, attacker, victim, 8);
            planted.insert(r.record_id.clone(), PlantedKind::PingFlood);
            g.records.push(r);
            t += g.rng.random_range(gap_range.clone());
        }
        anomalies.push(AnomalyRow {
            anomaly_id: format!("ping-{f}"),
            src_ip: attacker,
            dst_ip: victim,
            dst_port: None,
            proto: Proto::Icmp,
            taxonomy: Some("DoS".into()),
            heuristic: Some(20),
            label: "anomalous".into(),
        });
    }
    for b in 0..spec.diagnostic_bursts {
        let src = v4(192, 0, 2, 1 + b as u8);
        let dst = v4(10, 4, 0, 1 + b as u8);
        let n = g.rng.random_range(5..=9);
        let mut t = g.any_time();
        for _ in 0..n {
            let req = g.icmp(t, src, dst, 8);
            g.records.push(req);
            if g.rng.random_bool(0.5) {
                let rep = g.icmp(t + 1_000, dst, src, 0);
                g.records.push(rep);
            }
            t += g.rng.random_range(1_000_000..2_000_000);
        }
        if b % 2 == 0 {
            anomalies.push(AnomalyRow {
                anomaly_id: format!("diag-{b}"),
                src_ip: src,
                dst_ip: dst,
                dst_port: None,
                proto: Proto::Icmp,
                taxonomy: None,
                heuristic: None,
                label: "suspicious".into(),
            });
        }
    }

    let mut records = g.records;
    records.sort_by(|a, b| a.ts.cmp(&b.ts).then_with(|| a.record_id.cmp(&b.record_id)));
    SynthCorpus { records, anomalies, planted, docs: reference_docs() }
}
