//! Confusion matrices, detection metrics, ROC/AUC and baseline comparison.
//!
//! Attack is the positive class. Undecidable predictions are scored as
//! negatives and also tallied on their own; review labels are excluded.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::generation::Decision;
use crate::labeling::{LabelVerdict, LabeledInstance};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("predictions and labels share no record ids")]
    NoOverlap,
    #[error("labels contain a single class; AUC is undefined")]
    SingleClassLabels,
    #[error("reports were computed over different label sets")]
    LabelSetMismatch,
    #[error("score for {0} is not finite")]
    NonFiniteScore(String),
    #[error("prediction file line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, tn: u64, fp: u64, fn_: u64) -> Self {
        Self { tp, tn, fp, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Names of metrics whose denominator was zero and were reported as 0.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub degenerate: Vec<String>,
}

fn ratio(num: u64, den: u64, name: &str, flags: &mut Vec<String>) -> f64 {
    if den == 0 {
        flags.push(name.to_string());
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn metrics(m: &ConfusionMatrix) -> Metrics {
    let mut degenerate = Vec::new();
    let accuracy = ratio(m.tp + m.tn, m.total(), "accuracy", &mut degenerate);
    let precision = ratio(m.tp, m.tp + m.fp, "precision", &mut degenerate);
    let recall = ratio(m.tp, m.tp + m.fn_, "recall", &mut degenerate);
    let f1 = if precision + recall == 0.0 {
        degenerate.push("f1".into());
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Metrics { accuracy, precision, recall, f1, degenerate }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub record_id: String,
    pub decision: Decision,
    /// Attack likelihood in [0, 1] used for the ROC sweep.
    pub score: f64,
}

impl Prediction {
    pub fn new(record_id: impl Into<String>, decision: Decision, score: f64) -> Self {
        Self { record_id: record_id.into(), decision, score }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tally {
    pub matrix: ConfusionMatrix,
    pub excluded_count: usize,
    pub undecidable_count: usize,
    /// Sorted ids that entered the matrix.
    pub ids: Vec<String>,
}

fn label_map(labels: &[LabeledInstance]) -> BTreeMap<&str, LabelVerdict> {
    labels.iter().map(|l| (l.record_id.as_str(), l.verdict)).collect()
}

/// Counts over the ids present in both inputs.
pub fn confusion(predictions: &[Prediction], labels: &[LabeledInstance]) -> Result<Tally, EvalError> {
    let truth = label_map(labels);
    let mut seen = BTreeMap::new();
    for p in predictions {
        if truth.contains_key(p.record_id.as_str()) {
            seen.insert(p.record_id.as_str(), p);
        }
    }
    if seen.is_empty() {
        return Err(EvalError::NoOverlap);
    }
    let mut t = Tally { matrix: ConfusionMatrix::default(), excluded_count: 0, undecidable_count: 0, ids: Vec::new() };
    for (id, p) in seen {
        let positive = match truth[id] {
            LabelVerdict::Review => {
                t.excluded_count += 1;
                continue;
            }
            LabelVerdict::Attack => true,
            LabelVerdict::Benign => false,
        };
        if p.decision == Decision::Undecidable {
            t.undecidable_count += 1;
        }
        let predicted = p.decision == Decision::Attack;
        let m = &mut t.matrix;
        match (predicted, positive) {
            (true, true) => m.tp += 1,
            (true, false) => m.fp += 1,
            (false, true) => m.fn_ += 1,
            (false, false) => m.tn += 1,
        }
        t.ids.push(id.to_string());
    }
    Ok(t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Roc {
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// ROC over `(score, is_positive)` pairs. Thresholds are the distinct
/// scores in descending order; tied scores move the curve in one step.
pub fn roc_from_pairs(pairs: &[(f64, bool)]) -> Result<Roc, EvalError> {
    let pos = pairs.iter().filter(|p| p.1).count();
    let neg = pairs.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::SingleClassLabels);
    }
    if let Some(i) = pairs.iter().position(|p| !p.0.is_finite()) {
        return Err(EvalError::NonFiniteScore(format!("item {i}")));
    }
    let mut sorted = pairs.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == s {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    if points.last() != Some(&(1.0, 1.0)) {
        points.push((1.0, 1.0));
    }
    let auc = points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum();
    Ok(Roc { points, auc })
}

/// ROC over scored predictions joined to non-review labels.
pub fn roc_auc(scored: &[(String, f64)], labels: &[LabeledInstance]) -> Result<Roc, EvalError> {
    let truth = label_map(labels);
    let mut joined: BTreeMap<&str, (f64, bool)> = BTreeMap::new();
    for (id, s) in scored {
        match truth.get(id.as_str()) {
            Some(LabelVerdict::Attack) => joined.insert(id, (*s, true)),
            Some(LabelVerdict::Benign) => joined.insert(id, (*s, false)),
            _ => None,
        };
    }
    if joined.is_empty() {
        return Err(EvalError::NoOverlap);
    }
    if let Some((id, _)) = joined.iter().find(|(_, v)| !v.0.is_finite()) {
        return Err(EvalError::NonFiniteScore(id.to_string()));
    }
    roc_from_pairs(&joined.into_values().collect::<Vec<_>>())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub matrix: ConfusionMatrix,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub degenerate: Vec<String>,
    pub roc_points: Vec<(f64, f64)>,
    /// Absent when the labels hold a single class.
    pub auc: Option<f64>,
    pub evaluated_count: usize,
    pub excluded_count: usize,
    pub undecidable_count: usize,
    /// SHA-256 over the sorted evaluated ids.
    pub label_digest: String,
}

fn digest_ids(ids: &[String]) -> String {
    let mut h = Sha256::new();
    for id in ids {
        h.update(id.as_bytes());
        h.update(b"\n");
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn evaluate(predictions: &[Prediction], labels: &[LabeledInstance]) -> Result<EvalReport, EvalError> {
    let tally = confusion(predictions, labels)?;
    let m = metrics(&tally.matrix);
    let scored: Vec<(String, f64)> = predictions.iter().map(|p| (p.record_id.clone(), p.score)).collect();
    let (roc_points, auc, mut degenerate) = match roc_auc(&scored, labels) {
        Ok(r) => (r.points, Some(r.auc), m.degenerate),
        Err(EvalError::SingleClassLabels | EvalError::NoOverlap) => {
            let mut d = m.degenerate;
            d.push("auc".into());
            (Vec::new(), None, d)
        }
        Err(e) => return Err(e),
    };
    degenerate.dedup();
    Ok(EvalReport {
        matrix: tally.matrix,
        accuracy: m.accuracy,
        precision: m.precision,
        recall: m.recall,
        f1: m.f1,
        degenerate,
        roc_points,
        auc,
        evaluated_count: tally.ids.len(),
        excluded_count: tally.excluded_count,
        undecidable_count: tally.undecidable_count,
        label_digest: digest_ids(&tally.ids),
    })
}

/// Baseline labels as predictions: attack scores 1, benign 0.
pub fn predictions_from_labels(labels: &[LabeledInstance]) -> Vec<Prediction> {
    labels
        .iter()
        .filter(|l| l.verdict != LabelVerdict::Review)
        .map(|l| {
            let attack = l.verdict == LabelVerdict::Attack;
            Prediction::new(
                l.record_id.clone(),
                if attack { Decision::Attack } else { Decision::NoAttack },
                if attack { 1.0 } else { 0.0 },
            )
        })
        .collect()
}

pub fn write_predictions_jsonl<W: std::io::Write>(mut out: W, predictions: &[Prediction]) -> std::io::Result<()> {
    for p in predictions {
        serde_json::to_writer(&mut out, p)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_predictions_jsonl<R: BufRead>(input: R) -> Result<Vec<Prediction>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| EvalError::Json { line: i + 1, source })?);
    }
    Ok(out)
}

fn pct(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

impl EvalReport {
    pub fn to_markdown(&self) -> String {
        let m = &self.matrix;
        let mut s = String::new();
        let _ = writeln!(s, "# Evaluation report\n");
        let _ = writeln!(s, "| TP | TN | FP | FN |\n|---:|---:|---:|---:|");
        let _ = writeln!(s, "| {} | {} | {} | {} |\n", m.tp, m.tn, m.fp, m.fn_);
        let _ = writeln!(s, "| Metric | Value (%) |\n|---|---:|");
        for (name, v) in [("Accuracy", self.accuracy), ("Precision", self.precision), ("Recall", self.recall), ("F1", self.f1)] {
            let _ = writeln!(s, "| {name} | {} |", pct(v));
        }
        let auc = self.auc.map_or_else(|| "undefined".to_string(), |a| format!("{a:.4}"));
        let _ = writeln!(s, "\nAUC: {auc}\n");
        let _ = writeln!(s, "Evaluated: {}", self.evaluated_count);
        let _ = writeln!(s, "Excluded (review): {}", self.excluded_count);
        let _ = writeln!(s, "Undecidable (scored negative): {}", self.undecidable_count);
        if !self.degenerate.is_empty() {
            let _ = writeln!(s, "Degenerate metrics (reported as 0): {}", self.degenerate.join(", "));
        }
        s
    }

    pub fn roc_csv(&self) -> String {
        let mut s = String::from("fpr,tpr\n");
        for (f, t) in &self.roc_points {
            let _ = writeln!(s, "{f},{t}");
        }
        s
    }

    /// Writes `report.json`, `report.md` and `roc.csv` into `dir`.
    pub fn write_files(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let json = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(dir.join("report.json"), json + "\n")?;
        std::fs::write(dir.join("report.md"), self.to_markdown())?;
        std::fs::write(dir.join("roc.csv"), self.roc_csv())
    }
}

/// Per-metric differences, system minus baseline, in percentage points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub system: EvalReport,
    pub baseline: EvalReport,
    pub accuracy_pp: f64,
    pub precision_pp: f64,
    pub recall_pp: f64,
    pub f1_pp: f64,
    pub auc_pp: Option<f64>,
}

pub fn compare_report(system: &EvalReport, baseline: &EvalReport) -> Result<Comparison, EvalError> {
    if system.label_digest != baseline.label_digest {
        return Err(EvalError::LabelSetMismatch);
    }
    let pp = |a: f64, b: f64| (a - b) * 100.0;
    Ok(Comparison {
        system: system.clone(),
        baseline: baseline.clone(),
        accuracy_pp: pp(system.accuracy, baseline.accuracy),
        precision_pp: pp(system.precision, baseline.precision),
        recall_pp: pp(system.recall, baseline.recall),
        f1_pp: pp(system.f1, baseline.f1),
        auc_pp: system.auc.zip(baseline.auc).map(|(a, b)| pp(a, b)),
    })
}

impl Comparison {
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Metric | System (%) | Baseline (%) | Delta (pp) |\n|---|---:|---:|---:|\n");
        let rows = [
            ("Accuracy", self.system.accuracy, self.baseline.accuracy, self.accuracy_pp),
            ("Precision", self.system.precision, self.baseline.precision, self.precision_pp),
            ("Recall", self.system.recall, self.baseline.recall, self.recall_pp),
            ("F1", self.system.f1, self.baseline.f1, self.f1_pp),
        ];
        for (name, a, b, d) in rows {
            let _ = writeln!(s, "| {name} | {} | {} | {d:+.2} |", pct(a), pct(b));
        }
        if let (Some(a), Some(b), Some(d)) = (self.system.auc, self.baseline.auc, self.auc_pp) {
            let _ = writeln!(s, "| AUC | {} | {} | {d:+.2} |", pct(a), pct(b));
        }
        s
    }
}
