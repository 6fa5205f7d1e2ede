//! Datasets, BM25 negatives and prompt rendering.

mod bm25;
mod data;
mod template;

pub use bm25::{
    analyze, bm25_score, build_triplets, Bm25Index, Bm25Params, CorpusStats, TripletBuild,
    TripletConfig,
};
pub use data::{
    format_qrels, format_run, parse_qrels, read_qrels, read_records, read_run, read_triplets,
    triplets_to_jsonl, write_records, Qrels, Records, Run, RunEntry, Triplet,
};
pub use template::{
    truncate_pair, ChatWrapper, PromptBuilder, PromptPair, RenderedPrompt, Style, TemplateConfig,
    PRESETS,
};
