//! Chamfer and Weighted Chamfer distances over multi-vector records.
//!
//! For a query `q` and document `d`, each query position contributes the L2
//! distance to its nearest document row. Chamfer averages those minima over
//! query positions; Weighted Chamfer scales each minimum by the weight of the
//! query token id first. Because the weighted score is linear in the weight
//! vector, a (q, d) pair is summarised by a sparse [`FeatureVector`] with one
//! entry per distinct query token id, and `η_w(q, d) = <w, x(q, d)>`.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};

use rayon::prelude::*;
use thiserror::Error;

use crate::store::{EmbeddingStore, MultiVecRecord, TokenId};
use crate::weights::WeightTable;

#[derive(Debug, Error, PartialEq)]
pub enum ScoringError {
    #[error("dimension mismatch: query has {query}, document has {doc}")]
    DimensionMismatch { query: usize, doc: usize },
    #[error("query `{0}` has no tokens")]
    EmptyQuery(String),
    #[error("document `{0}` has no tokens")]
    EmptyDocument(String),
    #[error("token {token} is outside weight table of size {vocab_size}")]
    TokenOutOfRange { token: TokenId, vocab_size: usize },
    #[error("candidate `{0}` not found in store")]
    MissingCandidate(String),
}

#[inline]
fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let diff = f64::from(x) - f64::from(y);
            diff * diff
        })
        .sum()
}

fn check_pair(query: &MultiVecRecord, doc: &MultiVecRecord) -> Result<(), ScoringError> {
    if query.dim != doc.dim {
        return Err(ScoringError::DimensionMismatch {
            query: query.dim,
            doc: doc.dim,
        });
    }
    if query.is_empty() {
        return Err(ScoringError::EmptyQuery(query.item_id.clone()));
    }
    if doc.is_empty() {
        return Err(ScoringError::EmptyDocument(doc.item_id.clone()));
    }
    Ok(())
}

/// Distance from every query row to its nearest document row.
pub fn min_dists(query: &MultiVecRecord, doc: &MultiVecRecord) -> Result<Vec<f64>, ScoringError> {
    check_pair(query, doc)?;
    Ok(query
        .rows()
        .map(|q| {
            // sqrt is monotone, so take it once after the scan.
            doc.rows()
                .map(|d| squared_distance(q, d))
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect())
}

/// Mean over query positions of the nearest-row distance. In `[0, 2]` for
/// unit-norm inputs.
pub fn chamfer(query: &MultiVecRecord, doc: &MultiVecRecord) -> Result<f64, ScoringError> {
    let dists = min_dists(query, doc)?;
    Ok(dists.iter().sum::<f64>() / dists.len() as f64)
}

/// Sparse per-token-id minimum-distance features, pre-scaled by `1/len(q)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    /// Sorted by token id, one entry per distinct query token.
    entries: Vec<(TokenId, f64)>,
    query_len: usize,
}

impl FeatureVector {
    /// Builds a feature vector from arbitrary entries; duplicate ids are summed.
    pub fn from_entries<I>(entries: I, query_len: usize) -> Self
    where
        I: IntoIterator<Item = (TokenId, f64)>,
    {
        let mut map = BTreeMap::new();
        for (t, x) in entries {
            *map.entry(t).or_insert(0.0) += x;
        }
        FeatureVector {
            entries: map.into_iter().collect(),
            query_len,
        }
    }

    pub fn entries(&self) -> &[(TokenId, f64)] {
        &self.entries
    }

    pub fn query_len(&self) -> usize {
        self.query_len
    }

    pub fn get(&self, token: TokenId) -> f64 {
        self.entries
            .binary_search_by_key(&token, |&(t, _)| t)
            .map(|i| self.entries[i].1)
            .unwrap_or(0.0)
    }

    pub fn tokens(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.entries.iter().map(|&(t, _)| t)
    }

    /// `<w, x>` against a dense weight slice.
    ///
    /// Panics if a token id is outside `weights`; use [`weighted_chamfer`] for
    /// the checked version.
    #[inline]
    pub fn dot(&self, weights: &[f64]) -> f64 {
        self.entries.iter().map(|&(t, x)| weights[t.index()] * x).sum()
    }

    /// Largest token id plus one, or 0 when empty.
    pub fn required_vocab(&self) -> usize {
        self.entries.last().map_or(0, |&(t, _)| t.index() + 1)
    }
}

/// Features `x(q, d)`: for each distinct query token `t`, the sum of its
/// positions' nearest-row distances divided by `len(q)`.
pub fn extract_features(
    query: &MultiVecRecord,
    doc: &MultiVecRecord,
) -> Result<FeatureVector, ScoringError> {
    let dists = min_dists(query, doc)?;
    let mut sums: BTreeMap<TokenId, f64> = BTreeMap::new();
    for (&t, &dist) in query.token_ids.iter().zip(&dists) {
        *sums.entry(t).or_insert(0.0) += dist;
    }
    let len = dists.len() as f64;
    Ok(FeatureVector {
        entries: sums.into_iter().map(|(t, s)| (t, s / len)).collect(),
        query_len: dists.len(),
    })
}

/// `η_w(q, d) = Σ_t w_t · x_t`.
pub fn weighted_chamfer(features: &FeatureVector, weights: &WeightTable) -> Result<f64, ScoringError> {
    let w = weights.as_slice();
    if features.required_vocab() > w.len() {
        let token = features
            .tokens()
            .find(|t| t.index() >= w.len())
            .expect("some token is out of range");
        return Err(ScoringError::TokenOutOfRange {
            token,
            vocab_size: w.len(),
        });
    }
    Ok(features.dot(w))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredItem {
    pub item_id: String,
    pub score: f64,
}

/// What a [`RankedList`] score means.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum ScoreKind {
    /// Smaller is better (Chamfer-style distances).
    Distance,
    /// Larger is better (BM25, scores read from run files).
    #[default]
    Similarity,
}

/// An ordered list of scored items, best first.
///
/// Lists built with [`RankedList::by_distance`] are ascending;
/// [`RankedList::by_score`] lists are descending. Ties are always broken by
/// ascending item id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RankedList {
    items: Vec<ScoredItem>,
    kind: ScoreKind,
}

impl RankedList {
    pub fn by_distance(mut items: Vec<ScoredItem>) -> Self {
        items.sort_by(|a, b| a.score.total_cmp(&b.score).then_with(|| a.item_id.cmp(&b.item_id)));
        RankedList {
            items,
            kind: ScoreKind::Distance,
        }
    }

    pub fn by_score(mut items: Vec<ScoredItem>) -> Self {
        items.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.item_id.cmp(&b.item_id)));
        RankedList {
            items,
            kind: ScoreKind::Similarity,
        }
    }

    /// Takes the order as given, e.g. from a run file.
    pub fn from_ordered(items: Vec<ScoredItem>) -> Self {
        RankedList {
            items,
            kind: ScoreKind::Similarity,
        }
    }

    pub fn kind(&self) -> ScoreKind {
        self.kind
    }

    /// Score on the "larger is better" scale used by run files.
    pub fn similarity(&self, index: usize) -> f64 {
        let s = self.items[index].score;
        match self.kind {
            ScoreKind::Similarity => s,
            ScoreKind::Distance if s == 0.0 => 0.0,
            ScoreKind::Distance => -s,
        }
    }

    pub fn items(&self) -> &[ScoredItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(|s| s.item_id.as_str())
    }

    pub fn truncate(&mut self, k: usize) {
        self.items.truncate(k);
    }
}

/// Scores every candidate with `η_w` and sorts ascending, ties by item id.
/// Repeated candidate ids are scored once.
pub fn rerank<S: AsRef<str> + Sync>(
    query: &MultiVecRecord,
    candidates: &[S],
    store: &EmbeddingStore,
    weights: &WeightTable,
) -> Result<RankedList, ScoringError> {
    let mut seen = HashSet::with_capacity(candidates.len());
    let mut docs = Vec::with_capacity(candidates.len());
    for id in candidates {
        let id = id.as_ref();
        let doc = store
            .get(id)
            .ok_or_else(|| ScoringError::MissingCandidate(id.to_owned()))?;
        if seen.insert(id) {
            docs.push(doc);
        }
    }
    let items = docs
        .par_iter()
        .map(|doc| {
            let features = extract_features(query, doc)?;
            Ok(ScoredItem {
                item_id: doc.item_id.clone(),
                score: weighted_chamfer(&features, weights)?,
            })
        })
        .collect::<Result<Vec<_>, ScoringError>>()?;
    Ok(RankedList::by_distance(items))
}

/// Orders two distances, ties by id. Shared with hard-negative mining.
pub(crate) fn distance_order(a: (f64, &str), b: (f64, &str)) -> Ordering {
    a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1))
}
