//! First-stage BM25 retrieval, TREC run/qrels files and ranking metrics.

mod bm25;
mod metrics;
mod trec;

pub use bm25::{bm25_topk, build_index, Bm25Params, InvertedIndex, Posting};
pub use metrics::{
    evaluate, mrr_at_k, ndcg_at_k, recall_at_k, write_report_csv, Metric, MetricError, MetricsReport,
    QueryMetrics,
};
pub use trec::{parse_qrels, parse_run, read_qrels, read_run, write_run, Qrels, Run, TrecError};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum IndexError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("document `{0}` is empty")]
    EmptyDocument(String),
}
