//! Byte-level snapshots. Set `FLOWSIGHT_BLESS=1` to rewrite them after an
//! intentional change.

use std::path::PathBuf;

use flowsight_core::embed::HashEmbedder;
use flowsight_core::generation::{build_prompt, LlmClient, StubLlm};
use flowsight_core::kb::{CollectionId, Metadata, MetadataFilter};
use flowsight_core::retrieval::{Gate, RetrievalItem, RetrievalResult, StageCounts};
use flowsight_core::{Embedder, Proto, Severity, Timestamp};

fn check(name: &str, actual: &str) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    if std::env::var_os("FLOWSIGHT_BLESS").is_some() {
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert!(expected == actual, "{name} drifted from its snapshot:\n{actual}");
}

const TEXTS: &[&str] = &[
    "At 14:05:10 on November 15, 2024, host 192.168.1.5 sent an ICMP echo request to 10.0.0.8, flagged as a potential DoS anomaly (heuristic 20).",
    "host 10.1.3.7:51234 opened a TCP connection to 10.0.0.2:443 ending in state S0",
    "Is host 203.0.113.5 sending an ICMP request flood?",
    "!!!",
];

#[test]
fn stub_embedder_vectors_are_stable() {
    let mut out = String::new();
    for (dim, seed) in [(16usize, 0u64), (16, 7), (384, 0)] {
        let e = HashEmbedder::new(dim, seed);
        for t in TEXTS {
            let v = e.embed(t).unwrap();
            let nz: Vec<String> = v
                .as_slice()
                .iter()
                .enumerate()
                .filter(|(_, x)| **x != 0.0)
                .map(|(i, x)| format!("{i}:{:08x}", x.to_bits()))
                .collect();
            out.push_str(&format!("dim={dim} seed={seed} {t:?}\n  {}\n", nz.join(" ")));
        }
    }
    check("stub_vectors.txt", &out);
}

fn item(id: &str, c: CollectionId, summary: &str, meta: Metadata, sim: f64, rerank: f64) -> RetrievalItem {
    RetrievalItem { entry_id: id.into(), collection: c, summary: summary.into(), meta, sim_score: sim, rerank_score: rerank }
}

fn fixture() -> RetrievalResult {
    let flagged = |id: &str, secs: i64| Metadata {
        record_id: id.into(),
        src_ip: Some("203.0.113.5".parse().unwrap()),
        dst_ip: Some("10.3.0.5".parse().unwrap()),
        proto: Some(Proto::Icmp),
        ts: Some(Timestamp::from_secs(secs)),
        label: Some("DoS".into()),
        heuristic_code: Some(20),
        severity: Some(Severity::Anomalous),
        ..Default::default()
    };
    let doc = Metadata { record_id: "ref-heuristic-20".into(), heuristic_code: Some(20), ..Default::default() };
    RetrievalResult {
        items: vec![
            item("Cq1", CollectionId::Anomaly, "At 00:10:00 on August 15, 2024, host 203.0.113.5 sent an ICMP echo request to 10.3.0.5, flagged as a potential DoS anomaly (heuristic 20).", flagged("Cq1", 1_723_680_600), 0.71, 0.42),
            item("Cq2", CollectionId::Anomaly, "At 00:10:01 on August 15, 2024, host 203.0.113.5 sent an ICMP echo request to 10.3.0.5, flagged as a potential DoS anomaly (heuristic 20).", flagged("Cq2", 1_723_680_601), 0.70, 0.40),
            item("ref-heuristic-20", CollectionId::Heuristic, "Heuristic 20 marks ICMP echo request floods.", doc, 0.55, 0.31),
        ],
        gate: Gate::Passed,
        diagnostics: vec![],
        counts: StageCounts { searched: 12, passed_tau: 9, mmr_selected: 5, passed_rerank: 3 },
        filter: MetadataFilter::match_all(),
    }
}

#[test]
fn prompt_and_stub_answer_are_stable() {
    let r = fixture();
    let p = build_prompt("Is host 203.0.113.5 sending an ICMP request flood to 10.3.0.5?", &r, None).unwrap();
    let raw = StubLlm.complete(&p).unwrap();
    check("prompt.txt", &format!("{}\n---- stub answer ----\n{raw}\n", p.render()));
}
