//! Shared fixtures for the benchmarks.

use flowsight_core::embed::HashEmbedder;
use flowsight_core::engine::{index_documents, index_records};
use flowsight_core::summarize::SummarizeOptions;
use flowsight_core::synth::{generate, reference_docs, SynthCorpus, SynthSpec};
use flowsight_core::Store;

pub const DIM: usize = 384;

pub fn corpus() -> SynthCorpus {
    generate(&SynthSpec::default())
}

/// Indexes the default synthetic corpus into `dir`.
pub fn indexed_store(dir: &std::path::Path, corpus: &SynthCorpus) -> Store {
    let store = Store::open(dir, DIM).expect("open store");
    let emb = HashEmbedder::new(DIM, 0);
    index_records(&store, &emb, &corpus.records, &SummarizeOptions::default()).expect("index records");
    index_documents(&store, &emb, &reference_docs()).expect("index docs");
    store
}
