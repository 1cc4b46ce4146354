//! `flowsight` command line.
//!
//! Machine-readable output (JSON, JSON lines) goes to stdout; progress and
//! diagnostics go to stderr. Exit codes: 0 success (including undecidable
//! verdicts), 1 runtime failure, 2 usage error.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use flowsight_core::engine::{index_documents, index_records, read_docs_jsonl, triage, triage_predictions};
use flowsight_core::eval::{compare_report, evaluate, predictions_from_labels, read_predictions_jsonl, write_predictions_jsonl};
use flowsight_core::generation::LlmKind;
use flowsight_core::ingest::{annotate, parse_anomaly_csv, parse_conn_log, read_records_jsonl, write_records_jsonl, ConnLogDialect};
use flowsight_core::labeling::{label_ping, label_syn, read_labels_jsonl, rule_baseline, write_labels_jsonl, LabelReport, PingMode};
use flowsight_core::retrieval::ScorerKind;
use flowsight_core::service::{self, AppState, Session, SessionStore};
use flowsight_core::synth::{generate, SynthSpec};
use flowsight_core::embed::EmbedderKind;
use flowsight_core::{Answer, Config, Engine, Store, TrafficRecord};

#[derive(Debug, Parser)]
#[command(name = "flowsight", version, about = "Evidence-grounded network flow forensics")]
pub struct Cli {
    /// TOML or JSON config file; flags given on the command line win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Knowledge base directory.
    #[arg(long, global = true)]
    store: Option<PathBuf>,
    #[command(flatten)]
    backends: BackendArgs,
    #[command(flatten)]
    retrieval: RetrievalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct BackendArgs {
    /// Embedding dimension.
    #[arg(long, global = true)]
    dim: Option<usize>,
    #[arg(long, global = true, value_enum)]
    embedder: Option<EmbedderChoice>,
    #[arg(long, global = true)]
    embedder_endpoint: Option<String>,
    #[arg(long, global = true, value_enum)]
    scorer: Option<ScorerChoice>,
    #[arg(long, global = true)]
    scorer_endpoint: Option<String>,
    #[arg(long, global = true, value_enum)]
    llm: Option<LlmChoice>,
    #[arg(long, global = true)]
    llm_endpoint: Option<String>,
    #[arg(long, global = true)]
    llm_model: Option<String>,
}

#[derive(Debug, Args)]
struct RetrievalArgs {
    /// Minimum cosine similarity.
    #[arg(long, global = true)]
    tau: Option<f64>,
    /// Evidence items kept after diversification.
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true)]
    fetch_k: Option<usize>,
    /// Relevance/diversity trade-off in [0, 1].
    #[arg(long, global = true)]
    lambda: Option<f64>,
    #[arg(long, global = true)]
    min_evidence: Option<usize>,
    #[arg(long, global = true)]
    rerank_floor: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum EmbedderChoice {
    Stub,
    Remote,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ScorerChoice {
    Jaccard,
    Remote,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LlmChoice {
    Stub,
    Remote,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Attack {
    Syn,
    Ping,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Gt,
    Expert,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Dialect {
    ZeekTsv,
    Csv,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse a connection log (and optional anomaly CSV) into canonical JSON lines.
    Ingest {
        #[arg(long)]
        conn: PathBuf,
        #[arg(long, value_enum, default_value = "zeek-tsv")]
        dialect: Dialect,
        #[arg(long)]
        anomalies: Option<PathBuf>,
        /// Output file, `-` for stdout.
        #[arg(long, default_value = "-")]
        out: PathBuf,
    },
    /// Summarize, embed and index records (and reference documents) into the store.
    BuildKb {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        docs: Option<PathBuf>,
    },
    /// Apply the ground-truth or expert labeling rules.
    Label {
        #[arg(long)]
        records: PathBuf,
        #[arg(long, value_enum)]
        attack: Attack,
        #[arg(long, value_enum, default_value = "gt")]
        mode: Mode,
        #[arg(long)]
        window_seconds: Option<u64>,
        #[arg(long)]
        min_requests: Option<usize>,
        #[arg(long, default_value = "-")]
        out: PathBuf,
    },
    /// Score predictions against labels and write report.json, report.md and roc.csv.
    Eval {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        /// Second prediction set to compare against.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Predictions from the fixed-threshold rule baseline.
    Baseline {
        #[arg(long)]
        records: PathBuf,
        #[arg(long, default_value = "-")]
        out: PathBuf,
    },
    /// Ask one question; prints the verdict as JSON.
    Query {
        question: String,
        /// Print verdict, evidence and diagnostics instead of the verdict alone.
        #[arg(long)]
        full: bool,
    },
    /// Interactive questions with context carried between turns.
    Repl,
    /// Run the HTTP API.
    Serve {
        #[arg(long)]
        bind: Option<String>,
    },
    /// Ask the engine about every (protocol, source, destination) group and write per-record predictions.
    Triage {
        #[arg(long)]
        records: PathBuf,
        #[arg(long, default_value = "-")]
        out: PathBuf,
    },
    /// Write a seeded synthetic corpus: conn.log, anomalies.csv, docs.jsonl.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = &cli.store {
        cfg.store_path = s.clone();
    }
    let b = &cli.backends;
    if let Some(d) = b.dim {
        cfg.embedder.dim = d;
    }
    if let Some(e) = b.embedder {
        cfg.embedder.kind = match e {
            EmbedderChoice::Stub => EmbedderKind::HashStub,
            EmbedderChoice::Remote => EmbedderKind::Remote,
        };
    }
    if let Some(u) = &b.embedder_endpoint {
        cfg.embedder.endpoint = Some(u.clone());
    }
    if let Some(s) = b.scorer {
        cfg.scorer.kind = match s {
            ScorerChoice::Jaccard => ScorerKind::JaccardStub,
            ScorerChoice::Remote => ScorerKind::Remote,
        };
    }
    if let Some(u) = &b.scorer_endpoint {
        cfg.scorer.endpoint = Some(u.clone());
    }
    if let Some(l) = b.llm {
        cfg.llm.kind = match l {
            LlmChoice::Stub => LlmKind::Stub,
            LlmChoice::Remote => LlmKind::Remote,
        };
    }
    if let Some(u) = &b.llm_endpoint {
        cfg.llm.endpoint = Some(u.clone());
    }
    if let Some(m) = &b.llm_model {
        cfg.llm.model = Some(m.clone());
    }
    let r = &cli.retrieval;
    let rc = &mut cfg.retrieval;
    if let Some(v) = r.tau {
        rc.tau = v;
    }
    if let Some(v) = r.k {
        rc.k = v;
    }
    if let Some(v) = r.fetch_k {
        rc.fetch_k = Some(v);
    }
    if let Some(v) = r.lambda {
        rc.mmr_lambda = v;
    }
    if let Some(v) = r.min_evidence {
        rc.min_evidence = v;
    }
    if let Some(v) = r.rerank_floor {
        rc.rerank_floor = v;
    }
    rc.validate()?;
    Ok(cfg)
}

fn open_input(path: &Path) -> Result<Box<dyn BufRead>> {
    if path == Path::new("-") {
        return Ok(Box::new(BufReader::new(io::stdin())));
    }
    let f = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    Ok(Box::new(BufReader::new(f)))
}

fn open_output(path: &Path) -> Result<Box<dyn Write>> {
    if path == Path::new("-") {
        return Ok(Box::new(BufWriter::new(io::stdout())));
    }
    let f = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(Box::new(BufWriter::new(f)))
}

fn read_records(path: &Path) -> Result<Vec<TrafficRecord>> {
    Ok(read_records_jsonl(open_input(path)?).with_context(|| format!("reading {}", path.display()))?)
}

fn open_engine(cfg: &Config) -> Result<Engine> {
    let store = Store::open_read_only(&cfg.store_path)
        .with_context(|| format!("cannot open knowledge base at {}", cfg.store_path.display()))?;
    Ok(Engine::from_config(cfg, store)?)
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v)?;
    writeln!(out)?;
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Ingest { conn, dialect, anomalies, out } => {
            let dialect = match dialect {
                Dialect::ZeekTsv => ConnLogDialect::ZeekTsv,
                Dialect::Csv => ConnLogDialect::Csv,
            };
            let name = conn.file_name().map_or("conn".into(), |n| n.to_string_lossy().into_owned());
            let rep = parse_conn_log(open_input(&conn)?, dialect, &name, &cfg.conn_columns)?;
            for m in rep.malformed.iter().take(10) {
                eprintln!("{}:{}: {}", conn.display(), m.line_no, m.reason);
            }
            let mut records = rep.records;
            if let Some(a) = anomalies {
                let an = parse_anomaly_csv(open_input(&a)?, &cfg.anomaly_columns)?;
                for w in &an.warnings {
                    eprintln!("{}: {w}", a.display());
                }
                for m in an.malformed.iter().take(10) {
                    eprintln!("{}:{}: {}", a.display(), m.line_no, m.reason);
                }
                records = annotate(records, &an.rows);
            }
            let mut w = open_output(&out)?;
            write_records_jsonl(&mut w, &records)?;
            w.flush()?;
            eprintln!("ingest: {} records, {} malformed of {} data lines", records.len(), rep.malformed.len(), rep.data_lines);
        }
        Command::BuildKb { records, docs } => {
            let recs = read_records(&records)?;
            let store = Store::open(&cfg.store_path, cfg.embedder.dim)
                .with_context(|| format!("cannot open knowledge base at {}", cfg.store_path.display()))?;
            let embedder = cfg.embedder.build()?;
            let counts = index_records(&store, embedder.as_ref(), &recs, &cfg.summarize)?;
            for (c, n) in &counts {
                eprintln!("build-kb: {n} entries -> {c}");
            }
            if let Some(d) = docs {
                let docs = read_docs_jsonl(open_input(&d)?).with_context(|| format!("reading {}", d.display()))?;
                let n = index_documents(&store, embedder.as_ref(), &docs)?;
                eprintln!("build-kb: {n} entries -> heuristic");
            }
            let stats = store.stats();
            store.close()?;
            print_json(&stats)?;
        }
        Command::Label { records, attack, mode, window_seconds, min_requests, out } => {
            let recs = read_records(&records)?;
            let mut spec = cfg.window;
            if let Some(w) = window_seconds {
                spec.window_seconds = w;
            }
            if let Some(m) = min_requests {
                spec.min_requests = m;
            }
            let rep: LabelReport = match attack {
                Attack::Syn => label_syn(&recs),
                Attack::Ping => {
                    let mode = match mode {
                        Mode::Gt => PingMode::GroundTruth,
                        Mode::Expert => PingMode::Expert,
                    };
                    label_ping(&recs, &spec, mode)?
                }
            };
            let mut w = open_output(&out)?;
            write_labels_jsonl(&mut w, &rep.labels)?;
            w.flush()?;
            eprintln!("label: {} labeled, {} excluded", rep.labels.len(), rep.excluded.len());
        }
        Command::Eval { labels, predictions, baseline, out_dir } => {
            let labels = read_labels_jsonl(open_input(&labels)?)?;
            let preds = read_predictions_jsonl(open_input(&predictions)?)?;
            let report = evaluate(&preds, &labels)?;
            report.write_files(&out_dir)?;
            if let Some(b) = baseline {
                let base = evaluate(&read_predictions_jsonl(open_input(&b)?)?, &labels)?;
                let cmp = compare_report(&report, &base)?;
                std::fs::write(out_dir.join("comparison.md"), cmp.to_markdown())?;
                std::fs::write(out_dir.join("comparison.json"), serde_json::to_vec_pretty(&cmp)?)?;
            }
            print_json(&report)?;
            eprintln!("eval: wrote {}", out_dir.display());
        }
        Command::Baseline { records, out } => {
            let recs = read_records(&records)?;
            let preds = predictions_from_labels(&rule_baseline(&recs, &cfg.baseline));
            let mut w = open_output(&out)?;
            write_predictions_jsonl(&mut w, &preds)?;
            w.flush()?;
        }
        Command::Query { question, full } => {
            if question.trim().is_empty() {
                bail!("question is empty");
            }
            let engine = open_engine(&cfg)?;
            let answer = engine.answer(&question)?;
            if full {
                print_json(&answer)?;
            } else {
                print_json(&answer.verdict)?;
            }
        }
        Command::Repl => {
            let engine = open_engine(&cfg)?;
            repl(&engine, io::stdin().lock(), &mut io::stdout().lock())?;
        }
        Command::Serve { bind } => {
            let _ = tracing_subscriber::fmt().with_writer(io::stderr).try_init();
            let bind = bind.unwrap_or_else(|| cfg.service.bind.clone());
            let token = match &cfg.service.auth_token_env {
                Some(var) => Some(std::env::var(var).with_context(|| format!("environment variable {var} is not set"))?),
                None => None,
            };
            let sessions = SessionStore::open(cfg.session_dir(), Duration::from_secs(cfg.service.session_ttl_secs))
                .map_err(anyhow::Error::from)?;
            let swept = sessions.sweep(chrono::Utc::now()).map_err(anyhow::Error::from)?;
            if swept > 0 {
                eprintln!("serve: dropped {swept} expired sessions");
            }
            let state = AppState::new(open_engine(&cfg)?, sessions, token);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(service::serve(state, &bind))?;
        }
        Command::Triage { records, out } => {
            let recs = read_records(&records)?;
            let engine = open_engine(&cfg)?;
            let groups = triage(&engine, &recs)?;
            let preds = triage_predictions(&groups);
            let mut w = open_output(&out)?;
            write_predictions_jsonl(&mut w, &preds)?;
            w.flush()?;
            let attacks = groups.iter().filter(|g| g.verdict.decision == flowsight_core::Decision::Attack).count();
            eprintln!("triage: {} groups, {attacks} judged attack, {} predictions", groups.len(), preds.len());
        }
        Command::Synth { out_dir, seed } => {
            let mut spec = SynthSpec::default();
            if let Some(s) = seed {
                spec.seed = s;
            }
            let corpus = generate(&spec);
            std::fs::create_dir_all(&out_dir)?;
            std::fs::write(out_dir.join("conn.log"), corpus.conn_log())?;
            std::fs::write(out_dir.join("anomalies.csv"), corpus.anomaly_csv())?;
            std::fs::write(out_dir.join("docs.jsonl"), corpus.docs_jsonl())?;
            eprintln!("synth: {} records, {} planted attack records", corpus.records.len(), corpus.planted.len());
        }
    }
    Ok(())
}

fn print_turn(out: &mut impl Write, answer: &Answer) -> io::Result<()> {
    let v = &answer.verdict;
    writeln!(out, "verdict: {} (confidence {:.2})", v.decision.as_str(), v.confidence)?;
    writeln!(out, "summary: {}", v.alert_summary)?;
    writeln!(out, "justification: {}", v.justification)?;
    for (i, m) in v.mitigations.iter().enumerate() {
        writeln!(out, "mitigation {}: {m}", i + 1)?;
    }
    for c in &v.citations {
        if let Some(item) = answer.retrieval.item(c) {
            writeln!(out, "  [{c}] ({}) {}", item.collection, item.summary)?;
        }
    }
    for w in &v.warnings {
        writeln!(out, "warning: {w}")?;
    }
    let n = &answer.retrieval.counts;
    writeln!(
        out,
        "stages: searched={} passed_tau={} mmr_selected={} passed_rerank={}",
        n.searched, n.passed_tau, n.mmr_selected, n.passed_rerank
    )?;
    for d in &answer.retrieval.diagnostics {
        writeln!(out, "diagnostic: {d}")?;
    }
    Ok(())
}

/// One question per line. `:reset` clears the carried context, `:quit` ends.
pub fn repl(engine: &Engine, input: impl BufRead, out: &mut impl Write) -> Result<()> {
    let mut session = Session::new(chrono::Utc::now());
    eprint!("> ");
    for line in input.lines() {
        let q = line?;
        let q = q.trim();
        match q {
            "" => {}
            ":quit" | ":q" => break,
            ":reset" => {
                session = Session::new(chrono::Utc::now());
                writeln!(out, "context cleared")?;
            }
            _ => match engine.answer_with_entities(q, &session.entities_for(q)) {
                Ok(a) => {
                    print_turn(out, &a)?;
                    session.record_turn(q, &a, chrono::Utc::now());
                }
                Err(e) => eprintln!("error: {e}"),
            },
        }
        out.flush()?;
        eprint!("> ");
    }
    eprintln!();
    Ok(())
}
