//! Planted-weight synthetic data and numerical probes.
//!
//! Scores produced from a hidden weight vector `w*` are linear in the
//! feature vectors, `s = <w*, x(q, d)>`, so `w*` is identifiable by least
//! squares whenever the observed feature matrix has full column rank on the
//! observed tokens. [`recover_weights`] solves the normal equations through a
//! symmetric eigendecomposition of the sample Gram matrix and reports its
//! smallest eigenvalue; [`sample_complexity_sweep`] measures how often exact
//! recovery succeeds as the number of samples grows.
//!
//! The module also hosts the convexity chord probe and the finite-difference
//! gradient check used to validate the training objective.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::{self, Write};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::io::parse_key_values;
use crate::retrieval::{Qrels, Run};
use crate::scoring::{extract_features, FeatureVector, RankedList, ScoredItem, ScoringError};
use crate::store::{EmbeddingStore, MultiVecRecord, StoreError, TokenId, TokenizedCorpus, TokenizedDoc, Vocab};
use crate::trainer::{ce_grad, ce_loss, QueryLabels, TrainError, TrainQuery};
use crate::weights::{Provenance, SpecialPolicy, WeightTable};

/// Recovery counts as exact when every weight is within this of the truth.
pub const RECOVERY_TOLERANCE: f64 = 1e-6;
/// Chord violations below this are treated as roundoff.
pub const CONVEXITY_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum TheoryError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("spec line {line}: {message}")]
    SpecParse { line: usize, message: String },
    #[error("recovery needs at least one sample")]
    EmptyInput,
    #[error("{features} feature vectors but {scores} scores")]
    LengthMismatch { features: usize, scores: usize },
    #[error("score {index} is not finite")]
    NonFiniteScore { index: usize },
    #[error("token {token} outside vocabulary of size {vocab_size}")]
    TokenOutOfRange { token: TokenId, vocab_size: usize },
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum PlantedWeights {
    /// `1/T` on every token.
    Uniform,
    /// A draw from the flat Dirichlet over the `T`-simplex.
    RandomSimplex,
    Given(Vec<f64>),
}

/// Synthetic corpus shape for recovery experiments.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub vocab_size: usize,
    pub dim: usize,
    pub n_queries: usize,
    pub n_docs: usize,
    /// Inclusive length ranges.
    pub query_len: (usize, usize),
    pub doc_len: (usize, usize),
    /// Distinct documents scored against each query.
    pub pairs_per_query: usize,
    /// Std-dev of per-occurrence perturbation of token vectors; 0 makes
    /// embeddings depend on the token id only.
    pub context_noise: f64,
    pub planted: PlantedWeights,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            vocab_size: 64,
            dim: 16,
            n_queries: 500,
            n_docs: 200,
            query_len: (1, 32),
            doc_len: (1, 32),
            pairs_per_query: 1,
            context_noise: 0.1,
            planted: PlantedWeights::RandomSimplex,
            seed: 0,
        }
    }
}

fn check_range(name: &str, (lo, hi): (usize, usize)) -> Result<(), TheoryError> {
    if lo == 0 || lo > hi {
        return Err(TheoryError::InvalidSpec(format!("{name} range {lo}..={hi} must satisfy 1 <= min <= max")));
    }
    Ok(())
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), TheoryError> {
        let bad = |m: String| Err(TheoryError::InvalidSpec(m));
        if self.vocab_size == 0 || self.dim == 0 {
            return bad("vocab_size and dim must be at least 1".into());
        }
        check_range("query_len", self.query_len)?;
        check_range("doc_len", self.doc_len)?;
        if self.vocab_size < self.query_len.1 {
            return bad(format!(
                "vocab_size {} smaller than max query length {}",
                self.vocab_size, self.query_len.1
            ));
        }
        if self.n_queries > 0 && (self.n_docs == 0 || self.pairs_per_query > self.n_docs) {
            return bad(format!(
                "pairs_per_query {} needs at least that many documents (have {})",
                self.pairs_per_query, self.n_docs
            ));
        }
        if !(self.context_noise.is_finite() && self.context_noise >= 0.0) {
            return bad("context_noise must be finite and non-negative".into());
        }
        if let PlantedWeights::Given(w) = &self.planted {
            if w.len() != self.vocab_size || w.iter().any(|x| !x.is_finite()) {
                return bad("given planted weights must be finite with length vocab_size".into());
            }
        }
        Ok(())
    }

    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self, TheoryError> {
        let mut s = SyntheticSpec::default();
        get(map, "vocab_size", &mut s.vocab_size)?;
        get(map, "dim", &mut s.dim)?;
        get(map, "n_queries", &mut s.n_queries)?;
        get(map, "n_docs", &mut s.n_docs)?;
        get(map, "query_len_min", &mut s.query_len.0)?;
        get(map, "query_len_max", &mut s.query_len.1)?;
        get(map, "doc_len_min", &mut s.doc_len.0)?;
        get(map, "doc_len_max", &mut s.doc_len.1)?;
        get(map, "pairs_per_query", &mut s.pairs_per_query)?;
        get(map, "context_noise", &mut s.context_noise)?;
        get(map, "seed", &mut s.seed)?;
        if let Some(p) = map.get("planted") {
            s.planted = match p.as_str() {
                "uniform" => PlantedWeights::Uniform,
                "random-simplex" => PlantedWeights::RandomSimplex,
                other => {
                    return Err(TheoryError::InvalidSpec(format!(
                        "planted must be `uniform` or `random-simplex`, got `{other}`"
                    )))
                }
            };
        }
        s.validate()?;
        Ok(s)
    }

    pub fn parse(text: &str) -> Result<Self, TheoryError> {
        let map = parse_key_values(text).map_err(|(line, message)| TheoryError::SpecParse { line, message })?;
        Self::from_map(&map)
    }
}

fn get<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str, slot: &mut T) -> Result<(), TheoryError> {
    if let Some(v) = map.get(key) {
        *slot = v
            .parse()
            .map_err(|_| TheoryError::InvalidSpec(format!("invalid value `{v}` for {key}")))?;
    }
    Ok(())
}

/// A random unit vector.
fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Per-token base embeddings plus optional per-occurrence noise.
struct TokenEmbedder {
    base: Vec<Vec<f64>>,
    noise: f64,
    dim: usize,
}

impl TokenEmbedder {
    fn new(rng: &mut ChaCha8Rng, vocab_size: usize, dim: usize, noise: f64) -> Self {
        TokenEmbedder {
            base: (0..vocab_size).map(|_| unit_vector(rng, dim)).collect(),
            noise,
            dim,
        }
    }

    fn record(&self, rng: &mut ChaCha8Rng, id: String, tokens: Vec<TokenId>) -> MultiVecRecord {
        let mut vectors = Vec::with_capacity(tokens.len() * self.dim);
        for t in &tokens {
            let mut v = self.base[t.index()].clone();
            if self.noise > 0.0 {
                for x in &mut v {
                    let g: f64 = StandardNormal.sample(rng);
                    *x += self.noise * g;
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            vectors.extend(v.iter().map(|x| (x / norm) as f32));
        }
        MultiVecRecord::new(id, tokens, vectors, self.dim).expect("shape is consistent by construction")
    }
}

fn random_tokens(rng: &mut ChaCha8Rng, vocab_size: usize, (lo, hi): (usize, usize)) -> Vec<TokenId> {
    let len = rng.gen_range(lo..=hi);
    (0..len).map(|_| TokenId(rng.gen_range(0..vocab_size) as u32)).collect()
}

fn planted_table(rng: &mut ChaCha8Rng, planted: &PlantedWeights, vocab_size: usize) -> WeightTable {
    let w = match planted {
        PlantedWeights::Uniform => vec![1.0 / vocab_size as f64; vocab_size],
        PlantedWeights::RandomSimplex => {
            let raw: Vec<f64> = (0..vocab_size).map(|_| Exp1.sample(rng)).collect();
            let sum: f64 = raw.iter().sum();
            raw.into_iter().map(|x| x / sum).collect()
        }
        PlantedWeights::Given(w) => w.clone(),
    };
    WeightTable::new(w, Provenance::Learned, SpecialPolicy::Zero)
}

/// Generated corpus, planted weights and exact scores.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    /// Queries `q0..` followed by documents `d0..`.
    pub store: EmbeddingStore,
    pub planted: WeightTable,
    pub pairs: Vec<(String, String)>,
    pub features: Vec<FeatureVector>,
    pub scores: Vec<f64>,
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData, TheoryError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let planted = planted_table(&mut rng, &spec.planted, spec.vocab_size);
    let embedder = TokenEmbedder::new(&mut rng, spec.vocab_size, spec.dim, spec.context_noise);

    let mut store = EmbeddingStore::new(spec.dim, Vocab::new(spec.vocab_size));
    for i in 0..spec.n_queries {
        let tokens = random_tokens(&mut rng, spec.vocab_size, spec.query_len);
        store.push(embedder.record(&mut rng, format!("q{i}"), tokens))?;
    }
    for j in 0..spec.n_docs {
        let tokens = random_tokens(&mut rng, spec.vocab_size, spec.doc_len);
        store.push(embedder.record(&mut rng, format!("d{j}"), tokens))?;
    }

    let mut pairs = Vec::with_capacity(spec.n_queries * spec.pairs_per_query);
    for i in 0..spec.n_queries {
        for j in sample(&mut rng, spec.n_docs, spec.pairs_per_query).into_iter() {
            pairs.push((format!("q{i}"), format!("d{j}")));
        }
    }
    let features = pairs
        .par_iter()
        .map(|(q, d)| extract_features(store.get(q).unwrap(), store.get(d).unwrap()))
        .collect::<Result<Vec<_>, _>>()?;
    let scores = features.iter().map(|f| f.dot(planted.as_slice())).collect();
    Ok(SyntheticData {
        store,
        planted,
        pairs,
        features,
        scores,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryReport {
    /// Dense estimate over the full vocabulary; zero off the support.
    pub w_hat: Vec<f64>,
    /// Tokens with a nonzero feature in some sample, ascending.
    pub support: Vec<TokenId>,
    /// Smallest eigenvalue of `(1/n) XᵀX` restricted to the support.
    pub min_eig: f64,
    pub rank_deficient: bool,
    /// `‖ŵ − w*‖∞` once compared against a known truth.
    pub max_abs_err: Option<f64>,
}

impl RecoveryReport {
    /// Records `‖ŵ − w*‖∞` over the whole vocabulary, so tokens never observed
    /// count as errors of size `|w*_t|`.
    pub fn compare(&mut self, truth: &[f64]) -> f64 {
        let err = self
            .w_hat
            .iter()
            .zip(truth)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        self.max_abs_err = Some(err);
        err
    }
}

/// Least-squares estimate of the weights behind `scores = <w, x>`.
///
/// Builds `A = (1/n) XᵀX` and `c = (1/n) Xᵀs` over the observed support,
/// eigendecomposes `A`, and applies its pseudo-inverse. Eigenvalues at or
/// below `1e-10 · trace(A) / p` (with `p` the support size) are treated as
/// zero and flag the system as rank deficient.
pub fn recover_weights(
    features: &[FeatureVector],
    scores: &[f64],
    vocab_size: usize,
) -> Result<RecoveryReport, TheoryError> {
    if features.len() != scores.len() {
        return Err(TheoryError::LengthMismatch {
            features: features.len(),
            scores: scores.len(),
        });
    }
    if features.is_empty() {
        return Err(TheoryError::EmptyInput);
    }
    if let Some(index) = scores.iter().position(|s| !s.is_finite()) {
        return Err(TheoryError::NonFiniteScore { index });
    }

    let support: Vec<TokenId> = features
        .iter()
        .flat_map(|f| f.entries().iter().filter(|e| e.1 != 0.0).map(|e| e.0))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if let Some(&token) = support.iter().find(|t| t.index() >= vocab_size) {
        return Err(TheoryError::TokenOutOfRange { token, vocab_size });
    }
    let column: HashMap<TokenId, usize> = support.iter().enumerate().map(|(i, &t)| (t, i)).collect();
    let p = support.len();
    let n = features.len() as f64;

    if p == 0 {
        return Ok(RecoveryReport {
            w_hat: vec![0.0; vocab_size],
            support,
            min_eig: 0.0,
            rank_deficient: true,
            max_abs_err: None,
        });
    }

    let mut gram = DMatrix::<f64>::zeros(p, p);
    let mut rhs = DVector::<f64>::zeros(p);
    for (f, &s) in features.iter().zip(scores) {
        let cols: Vec<(usize, f64)> = f
            .entries()
            .iter()
            .filter(|e| e.1 != 0.0)
            .map(|&(t, x)| (column[&t], x))
            .collect();
        for &(i, xi) in &cols {
            rhs[i] += s * xi;
            for &(j, xj) in &cols {
                gram[(i, j)] += xi * xj;
            }
        }
    }
    gram /= n;
    rhs /= n;

    let trace = gram.trace();
    let eig = SymmetricEigen::new(gram);
    let min_eig = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let threshold = 1e-10 * trace / p as f64;
    let rank_deficient = min_eig <= threshold;

    // ŵ = Σ_{λ_i > thr} (q_iᵀ c / λ_i) q_i
    let mut solution = DVector::<f64>::zeros(p);
    for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda > threshold {
            let q = eig.eigenvectors.column(i);
            solution += q * (q.dot(&rhs) / lambda);
        }
    }
    let mut w_hat = vec![0.0; vocab_size];
    for (i, t) in support.iter().enumerate() {
        w_hat[t.index()] = solution[i];
    }
    Ok(RecoveryReport {
        w_hat,
        support,
        min_eig,
        rank_deficient,
        max_abs_err: None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub n: usize,
    pub seed: u64,
    pub min_eig: f64,
    pub max_abs_err: f64,
    pub success: bool,
}

/// Per-`n` aggregate of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSummary {
    pub n: usize,
    pub success_rate: f64,
    pub median_min_eig: f64,
}

/// Recovery success over `repeats` seeds (`spec.seed + r`) for every `n` in
/// the grid. Each sample pairs a fresh query with one random document.
/// Rows are ordered by grid position, then seed.
pub fn sample_complexity_sweep(
    spec: &SyntheticSpec,
    n_grid: &[usize],
    repeats: usize,
) -> Result<Vec<SweepRow>, TheoryError> {
    let jobs: Vec<(usize, u64)> = n_grid
        .iter()
        .flat_map(|&n| (0..repeats as u64).map(move |r| (n, spec.seed.wrapping_add(r))))
        .collect();
    jobs.par_iter()
        .map(|&(n, seed)| {
            if n == 0 {
                return Ok(SweepRow {
                    n,
                    seed,
                    min_eig: 0.0,
                    max_abs_err: f64::INFINITY,
                    success: false,
                });
            }
            let run_spec = SyntheticSpec {
                n_queries: n,
                pairs_per_query: 1,
                seed,
                ..spec.clone()
            };
            let data = generate_synthetic(&run_spec)?;
            let mut report = recover_weights(&data.features, &data.scores, spec.vocab_size)?;
            let err = report.compare(data.planted.as_slice());
            Ok(SweepRow {
                n,
                seed,
                min_eig: report.min_eig,
                max_abs_err: err,
                success: err <= RECOVERY_TOLERANCE,
            })
        })
        .collect()
}

pub fn summarize_sweep(rows: &[SweepRow]) -> Vec<SweepSummary> {
    let mut grid: Vec<usize> = Vec::new();
    for r in rows {
        if !grid.contains(&r.n) {
            grid.push(r.n);
        }
    }
    grid.into_iter()
        .map(|n| {
            let group: Vec<&SweepRow> = rows.iter().filter(|r| r.n == n).collect();
            let mut eigs: Vec<f64> = group.iter().map(|r| r.min_eig).collect();
            eigs.sort_by(f64::total_cmp);
            let median = if eigs.is_empty() {
                f64::NAN
            } else if eigs.len() % 2 == 1 {
                eigs[eigs.len() / 2]
            } else {
                0.5 * (eigs[eigs.len() / 2 - 1] + eigs[eigs.len() / 2])
            };
            SweepSummary {
                n,
                success_rate: group.iter().filter(|r| r.success).count() as f64 / group.len().max(1) as f64,
                median_min_eig: median,
            }
        })
        .collect()
}

/// `n,seed,min_eig,max_abs_err,success` rows.
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: &mut W) -> io::Result<()> {
    writeln!(out, "n,seed,min_eig,max_abs_err,success")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{:e},{:e},{}",
            r.n, r.seed, r.min_eig, r.max_abs_err, r.success as u8
        )?;
    }
    Ok(())
}

/// A family of losses the chord probe can sample from.
pub trait ChordLoss: Sync {
    type Instance;
    fn dim(&self) -> usize;
    fn sample_instance(&self, rng: &mut ChaCha8Rng) -> Self::Instance;
    fn loss(&self, instance: &Self::Instance, w: &[f64]) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvexityReport {
    pub trials: usize,
    pub violations: usize,
    /// Largest `f(λa + (1−λ)b) − (λf(a) + (1−λ)f(b))`, floored at 0.
    pub max_violation: f64,
}

/// Samples instances, weight pairs in `[-scale, scale]^T` and mixing
/// coefficients, and counts chord inequalities broken by more than
/// [`CONVEXITY_TOLERANCE`].
pub fn convexity_probe<L: ChordLoss>(target: &L, trials: usize, weight_scale: f64, seed: u64) -> ConvexityReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = target.dim();
    let mut violations = 0;
    let mut max_violation = 0.0f64;
    for _ in 0..trials {
        let inst = target.sample_instance(&mut rng);
        let a: Vec<f64> = (0..dim).map(|_| rng.gen_range(-weight_scale..=weight_scale)).collect();
        let b: Vec<f64> = (0..dim).map(|_| rng.gen_range(-weight_scale..=weight_scale)).collect();
        let lambda: f64 = rng.gen();
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| lambda * x + (1.0 - lambda) * y).collect();
        let gap = target.loss(&inst, &mix) - (lambda * target.loss(&inst, &a) + (1.0 - lambda) * target.loss(&inst, &b));
        if gap > CONVEXITY_TOLERANCE {
            violations += 1;
        }
        max_violation = max_violation.max(gap);
    }
    ConvexityReport {
        trials,
        violations,
        max_violation,
    }
}

/// Random sparse feature vector with values in `[0, 2]`.
fn random_features(rng: &mut ChaCha8Rng, vocab_size: usize, max_tokens: usize) -> FeatureVector {
    let len = rng.gen_range(1..=max_tokens.min(vocab_size));
    let tokens = sample(rng, vocab_size, len);
    let entries: Vec<(TokenId, f64)> = tokens
        .into_iter()
        .map(|t| (TokenId(t as u32), rng.gen_range(0.0..=2.0)))
        .collect();
    FeatureVector::from_entries(entries, len)
}

/// A random query with fixed positives and negatives.
#[derive(Debug, Clone)]
pub struct RankingInstance {
    pub query: TrainQuery,
    pub negatives: Vec<String>,
}

/// Random cross-entropy instances over a small vocabulary.
#[derive(Debug, Clone, Copy)]
pub struct CrossEntropyFamily {
    pub vocab_size: usize,
    pub max_positives: usize,
    pub max_negatives: usize,
    pub max_tokens: usize,
}

impl Default for CrossEntropyFamily {
    fn default() -> Self {
        CrossEntropyFamily {
            vocab_size: 12,
            max_positives: 3,
            max_negatives: 8,
            max_tokens: 6,
        }
    }
}

impl CrossEntropyFamily {
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> RankingInstance {
        let n_pos = rng.gen_range(1..=self.max_positives);
        let n_neg = rng.gen_range(0..=self.max_negatives);
        let mut features = HashMap::new();
        let positives: Vec<String> = (0..n_pos).map(|i| format!("p{i}")).collect();
        let negatives: Vec<String> = (0..n_neg).map(|i| format!("n{i}")).collect();
        for id in positives.iter().chain(&negatives) {
            features.insert(id.clone(), random_features(rng, self.vocab_size, self.max_tokens));
        }
        let labels = QueryLabels {
            qid: "synthetic".into(),
            positives,
            negative_pool: negatives.clone(),
        };
        RankingInstance {
            query: TrainQuery::new(labels, features).expect("generated instance is valid"),
            negatives,
        }
    }
}

impl ChordLoss for CrossEntropyFamily {
    type Instance = RankingInstance;

    fn dim(&self) -> usize {
        self.vocab_size
    }

    fn sample_instance(&self, rng: &mut ChaCha8Rng) -> RankingInstance {
        self.sample(rng)
    }

    fn loss(&self, inst: &RankingInstance, w: &[f64]) -> f64 {
        ce_loss(&inst.query, &inst.negatives, &WeightTable::from_vec(w.to_vec())).expect("valid instance")
    }
}

/// `<c, w> + c0` with random coefficients.
#[derive(Debug, Clone, Copy)]
pub struct LinearFamily {
    pub dim: usize,
}

impl ChordLoss for LinearFamily {
    type Instance = (Vec<f64>, f64);

    fn dim(&self) -> usize {
        self.dim
    }

    fn sample_instance(&self, rng: &mut ChaCha8Rng) -> Self::Instance {
        ((0..self.dim).map(|_| rng.gen_range(-1.0..1.0)).collect(), rng.gen_range(-1.0..1.0))
    }

    fn loss(&self, (c, c0): &Self::Instance, w: &[f64]) -> f64 {
        c.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + c0
    }
}

/// Negation of another family; concave wherever the inner one is strictly
/// convex, used to check that the probe can fail.
#[derive(Debug, Clone, Copy)]
pub struct Negated<L>(pub L);

impl<L: ChordLoss> ChordLoss for Negated<L> {
    type Instance = L::Instance;

    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn sample_instance(&self, rng: &mut ChaCha8Rng) -> Self::Instance {
        self.0.sample_instance(rng)
    }

    fn loss(&self, inst: &Self::Instance, w: &[f64]) -> f64 {
        -self.0.loss(inst, w)
    }
}

/// Central-difference check of [`ce_grad`] against [`ce_loss`].
///
/// Returns `‖g − g_fd‖∞ / ‖g_fd‖∞` (the absolute error when the
/// finite-difference gradient is exactly zero).
pub fn gradient_check(instance: &RankingInstance, w: &[f64], h: f64) -> Result<f64, TheoryError> {
    let table = WeightTable::from_vec(w.to_vec());
    let analytic = ce_grad(&instance.query, &instance.negatives, &table)?;
    let mut numeric = vec![0.0; w.len()];
    let mut probe = w.to_vec();
    for i in 0..w.len() {
        probe[i] = w[i] + h;
        let up = ce_loss(&instance.query, &instance.negatives, &WeightTable::from_vec(probe.clone()))?;
        probe[i] = w[i] - h;
        let down = ce_loss(&instance.query, &instance.negatives, &WeightTable::from_vec(probe.clone()))?;
        probe[i] = w[i];
        numeric[i] = (up - down) / (2.0 * h);
    }
    let diff = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let scale = numeric.iter().map(|x| x.abs()).fold(0.0, f64::max);
    Ok(if scale > 0.0 { diff / scale } else { diff })
}

/// Shape of a planted few-shot reranking task.
#[derive(Debug, Clone, PartialEq)]
pub struct FewShotSpec {
    pub vocab_size: usize,
    pub dim: usize,
    pub n_docs: usize,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub query_len: (usize, usize),
    pub doc_len: (usize, usize),
    /// Negatives per labelled query: the closest non-relevant documents under
    /// plain Chamfer, standing in for a first-stage retriever.
    pub pool_size: usize,
    /// Fraction of the vocabulary carrying most of the planted weight.
    pub informative_fraction: f64,
    pub context_noise: f64,
    pub seed: u64,
}

impl Default for FewShotSpec {
    fn default() -> Self {
        FewShotSpec {
            vocab_size: 200,
            dim: 16,
            n_docs: 500,
            n_train: 100,
            n_valid: 50,
            n_test: 50,
            query_len: (4, 12),
            doc_len: (8, 32),
            pool_size: 100,
            informative_fraction: 0.5,
            context_noise: 0.1,
            seed: 0,
        }
    }
}

impl FewShotSpec {
    pub fn validate(&self) -> Result<(), TheoryError> {
        if self.vocab_size == 0 || self.dim == 0 || self.n_docs == 0 {
            return Err(TheoryError::InvalidSpec("vocab_size, dim and n_docs must be positive".into()));
        }
        check_range("query_len", self.query_len)?;
        check_range("doc_len", self.doc_len)?;
        if self.pool_size >= self.n_docs {
            return Err(TheoryError::InvalidSpec(format!(
                "pool_size {} must be below n_docs {}",
                self.pool_size, self.n_docs
            )));
        }
        if !(0.0..=1.0).contains(&self.informative_fraction) {
            return Err(TheoryError::InvalidSpec("informative_fraction must lie in [0, 1]".into()));
        }
        if !(self.context_noise.is_finite() && self.context_noise >= 0.0) {
            return Err(TheoryError::InvalidSpec("context_noise must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self, TheoryError> {
        let mut s = FewShotSpec::default();
        get(map, "vocab_size", &mut s.vocab_size)?;
        get(map, "dim", &mut s.dim)?;
        get(map, "n_docs", &mut s.n_docs)?;
        get(map, "n_train", &mut s.n_train)?;
        get(map, "n_valid", &mut s.n_valid)?;
        get(map, "n_test", &mut s.n_test)?;
        get(map, "query_len_min", &mut s.query_len.0)?;
        get(map, "query_len_max", &mut s.query_len.1)?;
        get(map, "doc_len_min", &mut s.doc_len.0)?;
        get(map, "doc_len_max", &mut s.doc_len.1)?;
        get(map, "pool_size", &mut s.pool_size)?;
        get(map, "informative_fraction", &mut s.informative_fraction)?;
        get(map, "context_noise", &mut s.context_noise)?;
        get(map, "seed", &mut s.seed)?;
        s.validate()?;
        Ok(s)
    }

    pub fn parse(text: &str) -> Result<Self, TheoryError> {
        let map = parse_key_values(text).map_err(|(line, message)| TheoryError::SpecParse { line, message })?;
        Self::from_map(&map)
    }
}

/// Files for an end-to-end few-shot run.
#[derive(Debug, Clone)]
pub struct FewShotTask {
    /// `train*`, `valid*` and `test*` query records.
    pub queries: EmbeddingStore,
    pub docs: EmbeddingStore,
    pub corpus: TokenizedCorpus,
    pub train: Vec<QueryLabels>,
    pub valid: Vec<QueryLabels>,
    pub test_qrels: Qrels,
    /// Every document for every test query, in corpus order.
    pub test_candidates: Run,
    pub planted: WeightTable,
}

/// Builds a corpus where each query's single relevant document is the one
/// with the lowest planted Weighted Chamfer distance. Informative tokens get
/// planted weights in `[0.5, 1.5]`, the rest in `[0, 0.05]`.
pub fn generate_fewshot(spec: &FewShotSpec) -> Result<FewShotTask, TheoryError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_informative = ((spec.informative_fraction * spec.vocab_size as f64).round() as usize).min(spec.vocab_size);
    let informative: BTreeSet<usize> = sample(&mut rng, spec.vocab_size, n_informative).into_iter().collect();
    let planted: Vec<f64> = (0..spec.vocab_size)
        .map(|t| {
            if informative.contains(&t) {
                rng.gen_range(0.5..=1.5)
            } else {
                rng.gen_range(0.0..=0.05)
            }
        })
        .collect();
    let sum: f64 = planted.iter().sum();
    let planted = WeightTable::new(
        planted.into_iter().map(|w| w / sum).collect(),
        Provenance::Learned,
        SpecialPolicy::Zero,
    );

    let embedder = TokenEmbedder::new(&mut rng, spec.vocab_size, spec.dim, spec.context_noise);
    let vocab = Vocab::new(spec.vocab_size);
    let mut docs = EmbeddingStore::new(spec.dim, vocab.clone());
    let mut corpus = TokenizedCorpus::default();
    for j in 0..spec.n_docs {
        let tokens = random_tokens(&mut rng, spec.vocab_size, spec.doc_len);
        let id = format!("d{j:04}");
        corpus.docs.push(TokenizedDoc {
            item_id: id.clone(),
            tokens: tokens.clone(),
        });
        docs.push(embedder.record(&mut rng, id, tokens))?;
    }

    let mut queries = EmbeddingStore::new(spec.dim, vocab);
    let splits = [("train", spec.n_train), ("valid", spec.n_valid), ("test", spec.n_test)];
    for (prefix, count) in splits {
        for i in 0..count {
            let tokens = random_tokens(&mut rng, spec.vocab_size, spec.query_len);
            queries.push(embedder.record(&mut rng, format!("{prefix}{i:03}"), tokens))?;
        }
    }

    let ones = WeightTable::ones(spec.vocab_size);
    let labelled: Vec<(String, QueryLabels)> = queries
        .records()
        .par_iter()
        .map(|q| {
            let mut planted_scores = Vec::with_capacity(docs.len());
            let mut plain_scores = Vec::with_capacity(docs.len());
            for d in docs.records() {
                let f = extract_features(q, d)?;
                planted_scores.push((f.dot(planted.as_slice()), d.item_id.as_str()));
                plain_scores.push((f.dot(ones.as_slice()), d.item_id.as_str()));
            }
            let positive = planted_scores
                .iter()
                .min_by(|a, b| crate::scoring::distance_order(**a, **b))
                .unwrap()
                .1
                .to_owned();
            plain_scores.sort_by(|a, b| crate::scoring::distance_order(*a, *b));
            let negative_pool = plain_scores
                .iter()
                .map(|s| s.1)
                .filter(|&id| id != positive)
                .take(spec.pool_size)
                .map(str::to_owned)
                .collect();
            Ok((
                q.item_id.clone(),
                QueryLabels {
                    qid: q.item_id.clone(),
                    positives: vec![positive],
                    negative_pool,
                },
            ))
        })
        .collect::<Result<_, TheoryError>>()?;

    let mut train = Vec::new();
    let mut valid = Vec::new();
    let mut test_qrels = Qrels::new();
    let mut test_candidates = Run::new();
    let all_docs: Vec<ScoredItem> = docs
        .records()
        .iter()
        .enumerate()
        .map(|(i, d)| ScoredItem {
            item_id: d.item_id.clone(),
            score: -(i as f64),
        })
        .collect();
    for (qid, labels) in labelled {
        if qid.starts_with("train") {
            train.push(labels);
        } else if qid.starts_with("valid") {
            valid.push(labels);
        } else {
            test_qrels.insert(&qid, &labels.positives[0], 1);
            test_candidates.insert(qid, RankedList::from_ordered(all_docs.clone()));
        }
    }
    Ok(FewShotTask {
        queries,
        docs,
        corpus,
        train,
        valid,
        test_qrels,
        test_candidates,
        planted,
    })
}

/// Renders a spec back to `key=value` lines.
pub fn spec_to_key_values(spec: &SyntheticSpec) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "vocab_size={}", spec.vocab_size);
    let _ = writeln!(s, "dim={}", spec.dim);
    let _ = writeln!(s, "n_queries={}", spec.n_queries);
    let _ = writeln!(s, "n_docs={}", spec.n_docs);
    let _ = writeln!(s, "query_len_min={}", spec.query_len.0);
    let _ = writeln!(s, "query_len_max={}", spec.query_len.1);
    let _ = writeln!(s, "doc_len_min={}", spec.doc_len.0);
    let _ = writeln!(s, "doc_len_max={}", spec.doc_len.1);
    let _ = writeln!(s, "pairs_per_query={}", spec.pairs_per_query);
    let _ = writeln!(s, "context_noise={}", spec.context_noise);
    let planted = match spec.planted {
        PlantedWeights::Uniform => "uniform",
        _ => "random-simplex",
    };
    let _ = writeln!(s, "planted={planted}");
    let _ = writeln!(s, "seed={}", spec.seed);
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::chamfer;
    use crate::store::validate_store;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            vocab_size: 16,
            dim: 8,
            n_queries: 40,
            n_docs: 20,
            query_len: (1, 8),
            doc_len: (1, 8),
            ..Default::default()
        }
    }

    #[test]
    fn synthetic_store_is_valid_and_deterministic() {
        let a = generate_synthetic(&small_spec()).unwrap();
        assert!(validate_store(&a.store).is_valid());
        assert_eq!(a.store.len(), 60);
        assert_eq!(a.pairs.len(), 40);
        assert!((a.planted.sum() - 1.0).abs() < 1e-12);
        let b = generate_synthetic(&small_spec()).unwrap();
        assert_eq!(
            crate::store::encode_store(&a.store).unwrap(),
            crate::store::encode_store(&b.store).unwrap()
        );
        assert_eq!(
            a.scores.iter().map(|s| s.to_bits()).collect::<Vec<_>>(),
            b.scores.iter().map(|s| s.to_bits()).collect::<Vec<_>>()
        );
        let c = generate_synthetic(&SyntheticSpec { seed: 1, ..small_spec() }).unwrap();
        assert_ne!(a.scores, c.scores);
    }

    #[test]
    fn uniform_planted_scales_chamfer() {
        let spec = SyntheticSpec {
            planted: PlantedWeights::Uniform,
            ..small_spec()
        };
        let data = generate_synthetic(&spec).unwrap();
        for ((q, d), s) in data.pairs.iter().zip(&data.scores) {
            let c = chamfer(data.store.get(q).unwrap(), data.store.get(d).unwrap()).unwrap();
            assert!((s - c / 16.0).abs() < 1e-12);
        }
    }

    #[test]
    fn self_pair_scores_zero() {
        let data = generate_synthetic(&small_spec()).unwrap();
        let q = data.store.get("q0").unwrap();
        let f = extract_features(q, q).unwrap();
        assert_eq!(f.dot(data.planted.as_slice()), 0.0);
    }

    #[test]
    fn recovery_scalar_case() {
        let f = FeatureVector::from_entries([(TokenId(0), 0.5)], 1);
        let report = recover_weights(&[f], &[0.25], 1).unwrap();
        assert!((report.w_hat[0] - 0.5).abs() < 1e-12);
        assert!(!report.rank_deficient);
        assert!((report.min_eig - 0.25).abs() < 1e-15);
    }

    #[test]
    fn recovery_underdetermined_is_flagged() {
        let spec = SyntheticSpec {
            n_queries: 5,
            ..small_spec()
        };
        let data = generate_synthetic(&spec).unwrap();
        let report = recover_weights(&data.features, &data.scores, 16).unwrap();
        assert!(report.support.len() > 5);
        assert!(report.rank_deficient);
        assert!(report.min_eig >= -1e-9);
    }

    #[test]
    fn recovery_errors() {
        assert!(matches!(recover_weights(&[], &[], 4), Err(TheoryError::EmptyInput)));
        let f = FeatureVector::from_entries([(TokenId(0), 0.5)], 1);
        assert!(matches!(
            recover_weights(&[f.clone()], &[f64::NAN], 4),
            Err(TheoryError::NonFiniteScore { index: 0 })
        ));
        assert!(matches!(
            recover_weights(&[f], &[1.0, 2.0], 4),
            Err(TheoryError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn recovery_small_full_rank() {
        let data = generate_synthetic(&SyntheticSpec {
            n_queries: 200,
            ..small_spec()
        })
        .unwrap();
        let mut report = recover_weights(&data.features, &data.scores, 16).unwrap();
        assert!(!report.rank_deficient);
        assert!(report.compare(data.planted.as_slice()) <= RECOVERY_TOLERANCE);
    }

    #[test]
    fn probe_linear_and_negated() {
        let linear = convexity_probe(&LinearFamily { dim: 5 }, 500, 5.0, 3);
        assert_eq!(linear.violations, 0);
        assert!(linear.max_violation <= 1e-12);

        let ce = convexity_probe(&CrossEntropyFamily::default(), 500, 5.0, 3);
        assert_eq!(ce.violations, 0);

        let neg = convexity_probe(&Negated(CrossEntropyFamily::default()), 500, 5.0, 3);
        assert!(neg.violations > 0);
    }

    #[test]
    fn sweep_rows_and_zero_n() {
        let rows = sample_complexity_sweep(&small_spec(), &[0, 200], 3).unwrap();
        assert_eq!(rows.len(), 6);
        assert!(rows[..3].iter().all(|r| r.n == 0 && !r.success));
        assert_eq!(rows[3].seed, 0);
        let summary = summarize_sweep(&rows);
        assert_eq!(summary[0].success_rate, 0.0);
        assert_eq!(summary[1].n, 200);
        let mut buf = Vec::new();
        write_sweep_csv(&rows, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 7);
    }

    #[test]
    fn spec_text_round_trip() {
        let spec = SyntheticSpec {
            planted: PlantedWeights::Uniform,
            seed: 9,
            ..small_spec()
        };
        assert_eq!(SyntheticSpec::parse(&spec_to_key_values(&spec)).unwrap(), spec);
        assert!(SyntheticSpec::parse("query_len_min=0\n").is_err());
        assert!(SyntheticSpec::parse("vocab_size=4\n").is_err());
    }

    #[test]
    fn fewshot_small_task_shape() {
        let spec = FewShotSpec {
            vocab_size: 30,
            n_docs: 40,
            n_train: 6,
            n_valid: 3,
            n_test: 4,
            pool_size: 10,
            ..Default::default()
        };
        let task = generate_fewshot(&spec).unwrap();
        assert_eq!(task.train.len(), 6);
        assert_eq!(task.valid.len(), 3);
        assert_eq!(task.test_qrels.len(), 4);
        assert_eq!(task.test_candidates.len(), 4);
        assert!(task.train.iter().all(|l| l.positives.len() == 1 && l.negative_pool.len() == 10));
        assert!(validate_store(&task.docs).is_valid());
        assert!(validate_store(&task.queries).is_valid());
        assert_eq!(task.corpus.len(), 40);
    }

    #[test]
    fn fewshot_spec_parse() {
        let spec = FewShotSpec::parse("n_docs=50\npool_size=10\nseed=4\n").unwrap();
        assert_eq!(spec.n_docs, 50);
        assert_eq!(spec.seed, 4);
        assert!(FewShotSpec::parse("pool_size=500\n").is_err());
        assert!(FewShotSpec::parse("informative_fraction=2\n").is_err());
    }
}
