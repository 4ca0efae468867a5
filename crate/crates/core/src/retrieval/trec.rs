//! TREC qrels and run files.
//!
//! Qrels: `qid 0 docid grade`. Runs: `qid Q0 docid rank score tag`, rank
//! from 1, larger score = better.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

use crate::scoring::{RankedList, ScoredItem};

#[derive(Debug, Error)]
pub enum TrecError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: duplicate entry for query `{qid}`, document `{docid}`")]
    Duplicate { line: usize, qid: String, docid: String },
}

/// Graded relevance judgments, `qid → docid → grade`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    judgments: BTreeMap<String, BTreeMap<String, u32>>,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns false (and keeps the old grade) if the pair already exists.
    pub fn insert(&mut self, qid: &str, docid: &str, grade: u32) -> bool {
        let docs = self.judgments.entry(qid.to_owned()).or_default();
        if docs.contains_key(docid) {
            return false;
        }
        docs.insert(docid.to_owned(), grade);
        true
    }

    pub fn grade(&self, qid: &str, docid: &str) -> u32 {
        self.judgments
            .get(qid)
            .and_then(|d| d.get(docid))
            .copied()
            .unwrap_or(0)
    }

    pub fn query(&self, qid: &str) -> Option<&BTreeMap<String, u32>> {
        self.judgments.get(qid)
    }

    pub fn contains_query(&self, qid: &str) -> bool {
        self.judgments.contains_key(qid)
    }

    pub fn qids(&self) -> impl Iterator<Item = &str> {
        self.judgments.keys().map(String::as_str)
    }

    /// Number of documents with grade > 0 for `qid`.
    pub fn n_relevant(&self, qid: &str) -> usize {
        self.judgments
            .get(qid)
            .map_or(0, |d| d.values().filter(|&&g| g > 0).count())
    }

    pub fn len(&self) -> usize {
        self.judgments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.judgments.is_empty()
    }

    pub fn write<W: Write>(&self, out: &mut W) -> io::Result<()> {
        for (qid, docs) in &self.judgments {
            for (docid, grade) in docs {
                writeln!(out, "{qid} 0 {docid} {grade}")?;
            }
        }
        Ok(())
    }
}

pub fn parse_qrels(text: &str) -> Result<Qrels, TrecError> {
    let mut qrels = Qrels::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let err = |message: String| TrecError::Parse { line: i + 1, message };
        if fields.len() != 4 {
            return Err(err(format!("expected `qid 0 docid grade`, got {} fields", fields.len())));
        }
        let grade: u32 = fields[3]
            .parse()
            .map_err(|_| err(format!("grade `{}` is not a non-negative integer", fields[3])))?;
        if !qrels.insert(fields[0], fields[2], grade) {
            return Err(TrecError::Duplicate {
                line: i + 1,
                qid: fields[0].to_owned(),
                docid: fields[2].to_owned(),
            });
        }
    }
    Ok(qrels)
}

pub fn read_qrels(path: impl AsRef<Path>) -> Result<Qrels, TrecError> {
    parse_qrels(&fs::read_to_string(path)?)
}

/// Ranked lists per query, ordered by qid.
pub type Run = BTreeMap<String, RankedList>;

/// Parses a run; within a query, entries are ordered by the rank column
/// (file order breaks ties).
pub fn parse_run(text: &str) -> Result<Run, TrecError> {
    let mut rows: BTreeMap<String, Vec<(u64, ScoredItem)>> = BTreeMap::new();
    let mut seen: HashSet<(String, String)> = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let err = |message: String| TrecError::Parse { line: i + 1, message };
        if fields.len() != 6 {
            return Err(err(format!(
                "expected `qid Q0 docid rank score tag`, got {} fields",
                fields.len()
            )));
        }
        let rank: u64 = fields[3]
            .parse()
            .map_err(|_| err(format!("invalid rank `{}`", fields[3])))?;
        let score: f64 = fields[4]
            .parse()
            .ok()
            .filter(|s: &f64| !s.is_nan())
            .ok_or_else(|| err(format!("invalid score `{}`", fields[4])))?;
        if !seen.insert((fields[0].to_owned(), fields[2].to_owned())) {
            return Err(TrecError::Duplicate {
                line: i + 1,
                qid: fields[0].to_owned(),
                docid: fields[2].to_owned(),
            });
        }
        rows.entry(fields[0].to_owned()).or_default().push((
            rank,
            ScoredItem {
                item_id: fields[2].to_owned(),
                score,
            },
        ));
    }
    Ok(rows
        .into_iter()
        .map(|(qid, mut items)| {
            items.sort_by_key(|(rank, _)| *rank);
            (qid, RankedList::from_ordered(items.into_iter().map(|(_, s)| s).collect()))
        })
        .collect())
}

pub fn read_run(path: impl AsRef<Path>) -> Result<Run, TrecError> {
    parse_run(&fs::read_to_string(path)?)
}

/// Writes a run. Distance-ranked lists are emitted with negated scores so
/// that larger is better in the file.
pub fn write_run<W: Write>(run: &Run, tag: &str, out: &mut W) -> io::Result<()> {
    for (qid, list) in run {
        for (i, item) in list.items().iter().enumerate() {
            writeln!(
                out,
                "{qid} Q0 {} {} {} {tag}",
                item.item_id,
                i + 1,
                list.similarity(i)
            )?;
        }
    }
    Ok(())
}
