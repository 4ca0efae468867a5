//! Weighted Chamfer reranking over precomputed multi-vector embeddings.
//!
//! The crate is organised along the pipeline:
//!
//! - [`store`]: binary embedding store and tokenized-text sidecar.
//! - [`scoring`]: per-token minimum distances, Chamfer / Weighted Chamfer,
//!   sparse feature vectors and candidate reranking.
//! - [`weights`]: IDF weights, sum-to-one normalization, unseen-token backfill.
//! - [`trainer`]: cross-entropy ranking loss, hard-negative mining, Adam with
//!   a cosine schedule.
//! - [`retrieval`]: BM25 first stage, TREC run/qrels files, ranking metrics.
//! - [`theory`]: planted-weight synthetic data, least-squares weight recovery
//!   and convexity probes.
//!
//! Distances are "smaller is better" throughout; only the TREC run writer
//! flips the sign so downstream tools see "larger is better".

pub mod io;
pub mod retrieval;
pub mod scoring;
pub mod store;
pub mod theory;
pub mod trainer;
pub mod weights;

pub use scoring::{FeatureVector, RankedList};
pub use store::{EmbeddingStore, MultiVecRecord, TokenId, TokenizedCorpus, Vocab};
pub use weights::WeightTable;
