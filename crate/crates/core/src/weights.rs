//! Token weight tables: IDF zero-shot weights, sum-to-one normalization,
//! unseen-token backfill and the text weight-file format.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::io::atomic_write;
use crate::store::{TokenId, TokenizedCorpus, Vocab};

#[derive(Debug, Error)]
pub enum WeightError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("document `{item_id}`: token {token} outside vocabulary of size {vocab_size}")]
    TokenOutOfRange {
        item_id: String,
        token: TokenId,
        vocab_size: usize,
    },
    #[error("sample fraction {0} must be in (0, 1]")]
    InvalidSampleFraction(f64),
    #[error("document frequencies cover zero documents")]
    NoDocuments,
    #[error("weights sum to zero")]
    ZeroSum,
    #[error("weights have a non-finite sum")]
    NonFiniteSum,
    #[error("seen tokens carry zero learned weight")]
    ZeroSeenMass,
    #[error("weight table has {found} entries, expected {expected}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("weight file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("weight file line {line}: duplicate token {token}")]
    DuplicateToken { line: usize, token: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Uniform,
    Idf,
    Learned,
    Backfilled,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Uniform => "uniform",
            Provenance::Idf => "idf",
            Provenance::Learned => "learned",
            Provenance::Backfilled => "backfilled",
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Provenance {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(Provenance::Uniform),
            "idf" => Ok(Provenance::Idf),
            "learned" => Ok(Provenance::Learned),
            "backfilled" => Ok(Provenance::Backfilled),
            other => Err(format!("unknown provenance `{other}`")),
        }
    }
}

/// Weight given to special (marker/padding) tokens before normalization.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum SpecialPolicy {
    #[default]
    Zero,
    One,
}

impl SpecialPolicy {
    pub fn value(self) -> f64 {
        match self {
            SpecialPolicy::Zero => 0.0,
            SpecialPolicy::One => 1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SpecialPolicy::Zero => "zero",
            SpecialPolicy::One => "one",
        }
    }
}

impl fmt::Display for SpecialPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SpecialPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "zero" | "0" => Ok(SpecialPolicy::Zero),
            "one" | "1" => Ok(SpecialPolicy::One),
            other => Err(format!("special policy must be `zero` or `one`, got `{other}`")),
        }
    }
}

/// Dense per-token weights over the whole vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTable {
    weights: Vec<f64>,
    provenance: Provenance,
    special_policy: SpecialPolicy,
}

impl WeightTable {
    pub fn new(weights: Vec<f64>, provenance: Provenance, special_policy: SpecialPolicy) -> Self {
        WeightTable {
            weights,
            provenance,
            special_policy,
        }
    }

    /// Learned-provenance table over raw values.
    pub fn from_vec(weights: Vec<f64>) -> Self {
        Self::new(weights, Provenance::Learned, SpecialPolicy::default())
    }

    /// All ones: Weighted Chamfer reduces to plain Chamfer.
    pub fn ones(vocab_size: usize) -> Self {
        Self::new(vec![1.0; vocab_size], Provenance::Uniform, SpecialPolicy::One)
    }

    /// `1/|support|` on `support`, zero elsewhere.
    pub fn uniform_over(vocab_size: usize, support: &BTreeSet<TokenId>) -> Self {
        let mut weights = vec![0.0; vocab_size];
        let value = 1.0 / support.len().max(1) as f64;
        for t in support {
            weights[t.index()] = value;
        }
        Self::new(weights, Provenance::Uniform, SpecialPolicy::default())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn get(&self, token: TokenId) -> f64 {
        self.weights.get(token.index()).copied().unwrap_or(0.0)
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn special_policy(&self) -> SpecialPolicy {
        self.special_policy
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn with_special_policy(mut self, policy: SpecialPolicy) -> Self {
        self.special_policy = policy;
        self
    }

    pub fn sum(&self) -> f64 {
        compensated_sum(self.weights.iter().copied())
    }

    /// Scales every entry by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.weights.iter_mut().for_each(|w| *w *= c);
        out
    }
}

/// Neumaier summation; keeps the post-normalization sum within a few ulps of
/// one for large vocabularies.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Per-token document frequencies over a (possibly sub-sampled) corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DocFreq {
    pub n_docs: usize,
    /// `counts[t]` = number of documents containing `t` at least once.
    pub counts: Vec<u32>,
}

impl DocFreq {
    pub fn get(&self, token: TokenId) -> u32 {
        self.counts.get(token.index()).copied().unwrap_or(0)
    }
}

/// Counts document presence per token. With `sample_fraction < 1` a seeded
/// subset of `round(fraction * len)` documents (at least one) is counted.
pub fn count_doc_freq(
    corpus: &TokenizedCorpus,
    vocab_size: usize,
    sample_fraction: f64,
    seed: u64,
) -> Result<DocFreq, WeightError> {
    if corpus.is_empty() {
        return Err(WeightError::EmptyCorpus);
    }
    if !(sample_fraction > 0.0 && sample_fraction <= 1.0) {
        return Err(WeightError::InvalidSampleFraction(sample_fraction));
    }
    let selected: Vec<usize> = if sample_fraction >= 1.0 {
        (0..corpus.len()).collect()
    } else {
        let amount = ((sample_fraction * corpus.len() as f64).round() as usize).clamp(1, corpus.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, corpus.len(), amount).into_vec();
        idx.sort_unstable();
        idx
    };

    let mut counts = vec![0u32; vocab_size];
    // Last document index that touched each token; gives set semantics
    // without allocating a set per document.
    let mut last_doc = vec![usize::MAX; vocab_size];
    for &di in &selected {
        let doc = &corpus.docs[di];
        for &t in &doc.tokens {
            if t.index() >= vocab_size {
                return Err(WeightError::TokenOutOfRange {
                    item_id: doc.item_id.clone(),
                    token: t,
                    vocab_size,
                });
            }
            if last_doc[t.index()] != di {
                last_doc[t.index()] = di;
                counts[t.index()] += 1;
            }
        }
    }
    Ok(DocFreq {
        n_docs: selected.len(),
        counts,
    })
}

/// `ln((N − n + 0.5) / (n + 0.5) + 1)`.
pub fn idf(n_docs: usize, doc_freq: u32) -> f64 {
    let n = f64::from(doc_freq);
    ((n_docs as f64 - n + 0.5) / (n + 0.5) + 1.0).ln()
}

/// IDF weights before normalization: tokens absent from the corpus get 0,
/// special tokens get the policy value.
pub fn idf_unnormalized(
    df: &DocFreq,
    vocab: &Vocab,
    policy: SpecialPolicy,
) -> Result<WeightTable, WeightError> {
    if df.n_docs == 0 {
        return Err(WeightError::NoDocuments);
    }
    if df.counts.len() != vocab.size() {
        return Err(WeightError::LengthMismatch {
            expected: vocab.size(),
            found: df.counts.len(),
        });
    }
    let mut weights: Vec<f64> = df
        .counts
        .iter()
        .map(|&n| if n == 0 { 0.0 } else { idf(df.n_docs, n) })
        .collect();
    for &s in vocab.special_ids() {
        weights[s.index()] = policy.value();
    }
    Ok(WeightTable::new(weights, Provenance::Idf, policy))
}

/// Normalized IDF table.
pub fn compute_idf(
    df: &DocFreq,
    vocab: &Vocab,
    policy: SpecialPolicy,
) -> Result<WeightTable, WeightError> {
    normalize_sum(&idf_unnormalized(df, vocab, policy)?)
}

/// Rescales in place so the entries sum to one. A slice already summing to
/// one within 1e-12 is left untouched, which makes the operation idempotent.
pub fn normalize_in_place(weights: &mut [f64]) -> Result<(), WeightError> {
    let sum = compensated_sum(weights.iter().copied());
    if !sum.is_finite() {
        return Err(WeightError::NonFiniteSum);
    }
    if sum == 0.0 {
        return Err(WeightError::ZeroSum);
    }
    if (sum - 1.0).abs() <= 1e-12 {
        return Ok(());
    }
    weights.iter_mut().for_each(|w| *w /= sum);
    Ok(())
}

pub fn normalize_sum(table: &WeightTable) -> Result<WeightTable, WeightError> {
    let mut out = table.clone();
    normalize_in_place(&mut out.weights)?;
    Ok(out)
}

/// Gives unseen tokens their IDF weight and rescales learned weights on the
/// seen tokens so that the seen mass matches the IDF table's seen mass.
pub fn backfill_unseen(
    learned: &WeightTable,
    idf: &WeightTable,
    seen: &BTreeSet<TokenId>,
) -> Result<WeightTable, WeightError> {
    if learned.len() != idf.len() {
        return Err(WeightError::LengthMismatch {
            expected: idf.len(),
            found: learned.len(),
        });
    }
    let mut weights = idf.weights.clone();
    if !seen.is_empty() {
        let learned_mass = compensated_sum(seen.iter().map(|t| learned.get(*t)));
        if learned_mass == 0.0 || !learned_mass.is_finite() {
            return Err(WeightError::ZeroSeenMass);
        }
        let idf_mass = compensated_sum(seen.iter().map(|t| idf.get(*t)));
        let scale = idf_mass / learned_mass;
        for t in seen {
            if t.index() >= weights.len() {
                return Err(WeightError::LengthMismatch {
                    expected: weights.len(),
                    found: t.index() + 1,
                });
            }
            weights[t.index()] = learned.weights[t.index()] * scale;
        }
    }
    Ok(WeightTable::new(weights, Provenance::Backfilled, idf.special_policy))
}

/// Writes the header plus one `token<TAB>weight` line per nonzero entry.
pub fn write_weights<W: Write>(table: &WeightTable, w: &mut W) -> io::Result<()> {
    writeln!(w, "# vocab_size={}", table.len())?;
    writeln!(w, "# provenance={}", table.provenance)?;
    writeln!(w, "# special_policy={}", table.special_policy)?;
    for (t, &x) in table.weights.iter().enumerate() {
        if x != 0.0 {
            writeln!(w, "{t}\t{x:.16e}")?;
        }
    }
    Ok(())
}

pub fn save_weights(table: &WeightTable, path: impl AsRef<Path>) -> Result<(), WeightError> {
    atomic_write(path.as_ref(), |w| write_weights(table, w))?;
    Ok(())
}

pub fn parse_weights(text: &str) -> Result<WeightTable, WeightError> {
    let mut vocab_size = None;
    let mut provenance = None;
    let mut policy = None;
    let mut entries: Vec<(usize, u32, f64)> = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |message: String| WeightError::Parse {
            line: line_no,
            message,
        };
        if let Some(header) = line.strip_prefix('#') {
            let Some((key, value)) = header.trim().split_once('=') else {
                continue;
            };
            match key.trim() {
                "vocab_size" => {
                    vocab_size = Some(
                        value
                            .trim()
                            .parse::<usize>()
                            .map_err(|_| parse_err(format!("invalid vocab_size `{value}`")))?,
                    )
                }
                "provenance" => provenance = Some(value.trim().parse().map_err(parse_err)?),
                "special_policy" => policy = Some(value.trim().parse().map_err(parse_err)?),
                _ => {}
            }
            continue;
        }
        let mut fields = line.split_whitespace();
        let (Some(tok), Some(val), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(parse_err("expected `token_id<TAB>weight`".into()));
        };
        let token = tok
            .parse::<u32>()
            .map_err(|_| parse_err(format!("invalid token id `{tok}`")))?;
        let weight = val
            .parse::<f64>()
            .ok()
            .filter(|w| w.is_finite())
            .ok_or_else(|| parse_err(format!("invalid weight `{val}`")))?;
        entries.push((line_no, token, weight));
    }

    let vocab_size = vocab_size.ok_or(WeightError::Parse {
        line: 0,
        message: "missing `# vocab_size=` header".into(),
    })?;
    let mut weights = vec![0.0; vocab_size];
    let mut filled = vec![false; vocab_size];
    for (line, token, weight) in entries {
        let idx = token as usize;
        if idx >= vocab_size {
            return Err(WeightError::Parse {
                line,
                message: format!("token {token} outside vocab_size {vocab_size}"),
            });
        }
        if filled[idx] {
            return Err(WeightError::DuplicateToken { line, token });
        }
        filled[idx] = true;
        weights[idx] = weight;
    }
    Ok(WeightTable::new(
        weights,
        provenance.unwrap_or(Provenance::Learned),
        policy.unwrap_or_default(),
    ))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<WeightTable, WeightError> {
    parse_weights(&fs::read_to_string(path)?)
}
