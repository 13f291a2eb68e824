//! Retrieval and similarity-distribution evaluation.

mod aggregate;
mod heldout;
mod histogram;
mod prcurve;
mod ranking;
pub mod report;
pub mod trec;

pub use aggregate::{aggregate_report, AggregateReport, ModelSummary};
pub use heldout::{heldout_run, intra_inter, pairwise_similarities, SampleKind, SimilaritySample};
pub use histogram::{similarity_histogram, symmetric_kl, Histogram, DEFAULT_BINS, SMOOTHING};
pub use prcurve::{pr_curve, PRCurve, PRPoint, ThresholdSweep};
pub use ranking::{map_at_k, mrr_at_k, ndcg_at_k, MetricResult, QrelSet, RunRanking};

use thiserror::Error;

use crate::corpus::CorpusError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("k must be at least 1")]
    ZeroCutoff,
    #[error("query `{0}` is in the run but has no relevance judgments")]
    MissingQrels(String),
    #[error("query `{0}` has no relevant passage")]
    NoRelevant(String),
    #[error("duplicate passage `{passage}` for query `{query}`")]
    DuplicatePassage { query: String, passage: String },
    #[error("non-finite score for ({0}, {1})")]
    NonFiniteScore(String, String),
    #[error("all samples belong to one class")]
    OneClass,
    #[error("no samples")]
    Empty,
    #[error("invalid histogram: {0}")]
    InvalidHistogram(String),
    #[error("invalid threshold sweep: {0}")]
    InvalidSweep(String),
    #[error("histogram layouts differ")]
    LayoutMismatch,
    #[error("model `{0}` is missing dataset `{1}`")]
    DatasetMismatch(String, String),
    #[error("missing embedding for `{0}`")]
    MissingEmbedding(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;
