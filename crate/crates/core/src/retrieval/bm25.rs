use std::collections::{BTreeSet, HashMap};

use super::IndexError;
use crate::scoring::{RankedList, ScoredItem};
use crate::store::{TokenId, TokenizedCorpus};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    /// Lucene defaults.
    fn default() -> Self {
        Bm25Params { k1: 1.5, b: 0.75 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Posting {
    /// Ordinal of the document in corpus order.
    pub doc: u32,
    pub tf: u32,
}

#[derive(Debug, Clone)]
pub struct InvertedIndex {
    doc_ids: Vec<String>,
    doc_len: Vec<u32>,
    /// Postings sorted by document ordinal.
    postings: HashMap<TokenId, Vec<Posting>>,
    avgdl: f64,
    params: Bm25Params,
}

impl InvertedIndex {
    pub fn n_docs(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn avgdl(&self) -> f64 {
        self.avgdl
    }

    pub fn doc_id(&self, ordinal: u32) -> &str {
        &self.doc_ids[ordinal as usize]
    }

    pub fn doc_len(&self, ordinal: u32) -> u32 {
        self.doc_len[ordinal as usize]
    }

    pub fn postings(&self, token: TokenId) -> &[Posting] {
        self.postings.get(&token).map_or(&[], Vec::as_slice)
    }

    pub fn df(&self, token: TokenId) -> usize {
        self.postings(token).len()
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn with_params(mut self, params: Bm25Params) -> Self {
        self.params = params;
        self
    }

    /// `ln(1 + (N − df + 0.5) / (df + 0.5))`.
    pub fn idf(&self, token: TokenId) -> f64 {
        let n = self.n_docs() as f64;
        let df = self.df(token) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }
}

pub fn build_index(corpus: &TokenizedCorpus) -> Result<InvertedIndex, IndexError> {
    if corpus.is_empty() {
        return Err(IndexError::EmptyCorpus);
    }
    let mut postings: HashMap<TokenId, Vec<Posting>> = HashMap::new();
    let mut doc_len = Vec::with_capacity(corpus.len());
    let mut tf: HashMap<TokenId, u32> = HashMap::new();
    for (ordinal, doc) in corpus.docs.iter().enumerate() {
        if doc.tokens.is_empty() {
            return Err(IndexError::EmptyDocument(doc.item_id.clone()));
        }
        tf.clear();
        for &t in &doc.tokens {
            *tf.entry(t).or_insert(0) += 1;
        }
        for (&t, &count) in &tf {
            postings.entry(t).or_default().push(Posting {
                doc: ordinal as u32,
                tf: count,
            });
        }
        doc_len.push(doc.tokens.len() as u32);
    }
    let avgdl = doc_len.iter().map(|&l| f64::from(l)).sum::<f64>() / doc_len.len() as f64;
    Ok(InvertedIndex {
        doc_ids: corpus.docs.iter().map(|d| d.item_id.clone()).collect(),
        doc_len,
        postings,
        avgdl,
        params: Bm25Params::default(),
    })
}

/// Top-`k` documents by BM25, descending, ties by document id. Each distinct
/// query token counts once; documents matching no query token are omitted.
pub fn bm25_topk(index: &InvertedIndex, query: &[TokenId], k: usize) -> RankedList {
    let Bm25Params { k1, b } = index.params;
    let terms: BTreeSet<TokenId> = query.iter().copied().collect();
    let mut scores: HashMap<u32, f64> = HashMap::new();
    for &t in &terms {
        let postings = index.postings(t);
        if postings.is_empty() {
            continue;
        }
        let idf = index.idf(t);
        for p in postings {
            let tf = f64::from(p.tf);
            let norm = 1.0 - b + b * f64::from(index.doc_len(p.doc)) / index.avgdl;
            *scores.entry(p.doc).or_insert(0.0) += idf * tf / (tf + k1 * norm);
        }
    }

    let mut hits: Vec<(u32, f64)> = scores.into_iter().collect();
    let cmp = |a: &(u32, f64), b: &(u32, f64)| {
        b.1.total_cmp(&a.1)
            .then_with(|| index.doc_id(a.0).cmp(index.doc_id(b.0)))
    };
    if k < hits.len() {
        if k == 0 {
            hits.clear();
        } else {
            hits.select_nth_unstable_by(k - 1, cmp);
            hits.truncate(k);
        }
    }
    hits.sort_by(cmp);
    RankedList::from_ordered(
        hits.into_iter()
            .map(|(doc, score)| ScoredItem {
                item_id: index.doc_id(doc).to_owned(),
                score,
            })
            .collect(),
    )
}
