//! Few-shot token-weight learning.
//!
//! Per query the objective is a blend of two softmax cross-entropy ranking
//! losses over nested hard-negative sets `Λ1 ⊆ Λ2`:
//!
//! ```text
//! L(q) = α · CE(q; D+, Λ1) + (1 − α) · CE(q; D+, Λ2)
//! CE(q; D+, N) = Σ_{d ∈ D+} [ η(d) + LSE_{d' ∈ D+ ∪ N}(−η(d')) ]
//! ```
//!
//! Since `η(d) = <w, x(q, d)>` is linear in `w`, CE is a linear term plus a
//! log-sum-exp and hence convex. The gradient is
//! `Σ_{D+} x_d − |D+| · Σ_{d'} p_{d'} x_{d'}` with `p` the softmax of `−η`.
//!
//! Training runs full batch: every iteration re-mines the hardest negatives
//! under the current weights, takes one Adam step with a cosine-annealed
//! learning rate and rescales the weights to sum to one.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::io::{self, Write};

use rayon::prelude::*;
use thiserror::Error;

use crate::io::parse_key_values;
use crate::scoring::{distance_order, FeatureVector};
use crate::store::TokenId;
use crate::weights::{normalize_in_place, Provenance, WeightError, WeightTable};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("config line {line}: {message}")]
    ConfigParse { line: usize, message: String },
    #[error("training set line {line}: {message}")]
    SetParse { line: usize, message: String },
    #[error("query `{qid}` has no positives")]
    EmptyPositives { qid: String },
    #[error("query `{qid}`: `{item}` is both positive and negative")]
    Overlap { qid: String, item: String },
    #[error("query `{qid}`: no features for `{item}`")]
    MissingFeatures { qid: String, item: String },
    #[error("query `{qid}`: `{item}` is not in the negative pool")]
    NotInPool { qid: String, item: String },
    #[error("query `{qid}`: `{item}` is in Λ1 but not in Λ2")]
    NotNested { qid: String, item: String },
    #[error("query `{qid}`: requested {requested} negatives from a pool of {available}")]
    PoolTooSmall {
        qid: String,
        requested: usize,
        available: usize,
    },
    #[error("query `{qid}`: token {token} outside weight table of size {vocab_size}")]
    TokenOutOfRange {
        qid: String,
        token: TokenId,
        vocab_size: usize,
    },
    #[error("iteration {iter} outside schedule of {iterations} iterations")]
    IterOutOfRange { iter: usize, iterations: usize },
    #[error("gradient has a non-finite entry")]
    NonFiniteGradient,
    #[error("gradient has {found} entries, weights have {expected}")]
    GradientLength { expected: usize, found: usize },
    #[error(transparent)]
    Weights(#[from] WeightError),
}

/// Optimizer, schedule and objective settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Blend between the Λ1 loss (α) and the Λ2 loss (1 − α).
    pub alpha: f64,
    pub lambda1_size: usize,
    pub lambda2_size: usize,
    pub lr0: f64,
    pub lr_min: f64,
    pub iterations: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Carried for reproducible callers; the full-batch loop draws no randomness.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.1,
            lambda1_size: 10,
            lambda2_size: 100,
            lr0: 1e-4,
            lr_min: 1e-8,
            iterations: 100,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

pub const CONFIG_KEYS: [&str; 10] = [
    "alpha",
    "lambda1_size",
    "lambda2_size",
    "lr0",
    "lr_min",
    "iterations",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "seed",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} not in [0, 1]", self.alpha));
        }
        if self.alpha > 0.0 && self.lambda1_size > self.lambda2_size {
            return bad(format!(
                "lambda1_size {} exceeds lambda2_size {}",
                self.lambda1_size, self.lambda2_size
            ));
        }
        if !(self.lr0.is_finite() && self.lr0 > 0.0 && self.lr_min.is_finite() && self.lr_min >= 0.0) {
            return bad("learning rates must be finite, lr0 > 0 and lr_min >= 0".into());
        }
        if self.lr_min > self.lr0 {
            return bad(format!("lr_min {} exceeds lr0 {}", self.lr_min, self.lr0));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} {b} not in [0, 1)"));
            }
        }
        if !(self.adam_eps.is_finite() && self.adam_eps > 0.0) {
            return bad(format!("adam_eps {} must be positive", self.adam_eps));
        }
        Ok(())
    }

    /// Overrides defaults with any known keys in `map`. Unknown keys are
    /// left for the caller.
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self, TrainError> {
        fn get<T: std::str::FromStr>(
            map: &BTreeMap<String, String>,
            key: &str,
            slot: &mut T,
        ) -> Result<(), TrainError> {
            if let Some(v) = map.get(key) {
                *slot = v
                    .parse()
                    .map_err(|_| TrainError::InvalidConfig(format!("invalid value `{v}` for {key}")))?;
            }
            Ok(())
        }
        let mut c = TrainConfig::default();
        get(map, "alpha", &mut c.alpha)?;
        get(map, "lambda1_size", &mut c.lambda1_size)?;
        get(map, "lambda2_size", &mut c.lambda2_size)?;
        get(map, "lr0", &mut c.lr0)?;
        get(map, "lr_min", &mut c.lr_min)?;
        get(map, "iterations", &mut c.iterations)?;
        get(map, "adam_beta1", &mut c.adam_beta1)?;
        get(map, "adam_beta2", &mut c.adam_beta2)?;
        get(map, "adam_eps", &mut c.adam_eps)?;
        get(map, "seed", &mut c.seed)?;
        c.validate()?;
        Ok(c)
    }

    pub fn parse(text: &str) -> Result<Self, TrainError> {
        let map = parse_key_values(text)
            .map_err(|(line, message)| TrainError::ConfigParse { line, message })?;
        Self::from_map(&map)
    }

    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "alpha={}", self.alpha);
        let _ = writeln!(s, "lambda1_size={}", self.lambda1_size);
        let _ = writeln!(s, "lambda2_size={}", self.lambda2_size);
        let _ = writeln!(s, "lr0={}", self.lr0);
        let _ = writeln!(s, "lr_min={}", self.lr_min);
        let _ = writeln!(s, "iterations={}", self.iterations);
        let _ = writeln!(s, "adam_beta1={}", self.adam_beta1);
        let _ = writeln!(s, "adam_beta2={}", self.adam_beta2);
        let _ = writeln!(s, "adam_eps={}", self.adam_eps);
        let _ = writeln!(s, "seed={}", self.seed);
        s
    }
}

/// Relevance labels for one query, as read from a training-set file.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct QueryLabels {
    pub qid: String,
    pub positives: Vec<String>,
    pub negative_pool: Vec<String>,
}

/// Parses `qid<TAB>+item` / `qid<TAB>-item` lines. Queries come back sorted
/// by qid; items keep file order with repeats dropped.
pub fn parse_training_set(text: &str) -> Result<Vec<QueryLabels>, TrainError> {
    let mut by_qid: BTreeMap<String, (QueryLabels, HashSet<String>)> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| TrainError::SetParse {
            line: line_no,
            message,
        };
        let (qid, item) = line
            .split_once('\t')
            .ok_or_else(|| err("expected `qid<TAB>+item` or `qid<TAB>-item`".into()))?;
        let item = item.trim();
        let (positive, id) = match item.split_at_checked(1) {
            Some(("+", id)) if !id.is_empty() => (true, id),
            Some(("-", id)) if !id.is_empty() => (false, id),
            _ => return Err(err(format!("item `{item}` must start with `+` or `-`"))),
        };
        let (labels, seen) = by_qid.entry(qid.to_owned()).or_insert_with(|| {
            (
                QueryLabels {
                    qid: qid.to_owned(),
                    ..Default::default()
                },
                HashSet::new(),
            )
        });
        let already_pos = labels.positives.iter().any(|p| p == id);
        let already_neg = labels.negative_pool.iter().any(|p| p == id);
        if (positive && already_neg) || (!positive && already_pos) {
            return Err(TrainError::Overlap {
                qid: qid.to_owned(),
                item: id.to_owned(),
            });
        }
        if seen.insert(id.to_owned()) {
            if positive {
                labels.positives.push(id.to_owned());
            } else {
                labels.negative_pool.push(id.to_owned());
            }
        }
    }
    Ok(by_qid.into_values().map(|(l, _)| l).collect())
}

/// Inverse of [`parse_training_set`].
pub fn write_training_set<W: Write>(labels: &[QueryLabels], out: &mut W) -> io::Result<()> {
    for l in labels {
        for p in &l.positives {
            writeln!(out, "{}\t+{p}", l.qid)?;
        }
        for n in &l.negative_pool {
            writeln!(out, "{}\t-{n}", l.qid)?;
        }
    }
    Ok(())
}

/// A query with its labels and precomputed features `x(q, d)` for every
/// labelled item.
#[derive(Debug, Clone)]
pub struct TrainQuery {
    pub qid: String,
    pub positives: Vec<String>,
    pub negative_pool: Vec<String>,
    pub features: HashMap<String, FeatureVector>,
}

impl TrainQuery {
    pub fn new(labels: QueryLabels, features: HashMap<String, FeatureVector>) -> Result<Self, TrainError> {
        let q = TrainQuery {
            qid: labels.qid,
            positives: labels.positives,
            negative_pool: labels.negative_pool,
            features,
        };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.positives.is_empty() {
            return Err(TrainError::EmptyPositives {
                qid: self.qid.clone(),
            });
        }
        let pos: HashSet<&str> = self.positives.iter().map(String::as_str).collect();
        for n in &self.negative_pool {
            if pos.contains(n.as_str()) {
                return Err(TrainError::Overlap {
                    qid: self.qid.clone(),
                    item: n.clone(),
                });
            }
        }
        for item in self.positives.iter().chain(&self.negative_pool) {
            if !self.features.contains_key(item) {
                return Err(TrainError::MissingFeatures {
                    qid: self.qid.clone(),
                    item: item.clone(),
                });
            }
        }
        Ok(())
    }

    fn feature(&self, item: &str) -> Result<&FeatureVector, TrainError> {
        self.features.get(item).ok_or_else(|| TrainError::MissingFeatures {
            qid: self.qid.clone(),
            item: item.to_owned(),
        })
    }

    fn check_vocab(&self, vocab_size: usize) -> Result<(), TrainError> {
        for f in self.features.values() {
            if f.required_vocab() > vocab_size {
                let token = f.tokens().find(|t| t.index() >= vocab_size).unwrap();
                return Err(TrainError::TokenOutOfRange {
                    qid: self.qid.clone(),
                    token,
                    vocab_size,
                });
            }
        }
        Ok(())
    }

    fn negatives_from_pool<'a>(&'a self, negatives: &[String]) -> Result<Vec<&'a FeatureVector>, TrainError> {
        negatives
            .iter()
            .map(|n| {
                if !self.negative_pool.iter().any(|p| p == n) {
                    return Err(TrainError::NotInPool {
                        qid: self.qid.clone(),
                        item: n.clone(),
                    });
                }
                self.feature(n)
            })
            .collect()
    }

    fn positive_features(&self) -> Result<Vec<&FeatureVector>, TrainError> {
        if self.positives.is_empty() {
            return Err(TrainError::EmptyPositives {
                qid: self.qid.clone(),
            });
        }
        self.positives.iter().map(|p| self.feature(p)).collect()
    }
}

/// Sparse gradient contributions `(token, value)`; summed in order.
type GradTerms = Vec<(TokenId, f64)>;

/// Cross-entropy over `positives ∪ negatives`, optionally adding
/// `scale · ∇CE` to `grad`.
fn cross_entropy(
    positives: &[&FeatureVector],
    negatives: &[&FeatureVector],
    w: &[f64],
    grad: Option<(&mut GradTerms, f64)>,
) -> f64 {
    let candidates = || positives.iter().chain(negatives.iter());
    let neg_eta: Vec<f64> = candidates().map(|f| -f.dot(w)).collect();
    let max = neg_eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = neg_eta.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let lse = max + total.ln();

    let loss: f64 = neg_eta[..positives.len()].iter().map(|z| lse - z).sum();

    if let Some((terms, scale)) = grad {
        let n_pos = positives.len() as f64;
        let mut p_sum = 0.0;
        for (f, e) in candidates().zip(&exps) {
            let p = e / total;
            p_sum += p;
            for &(t, x) in f.entries() {
                terms.push((t, -scale * n_pos * p * x));
            }
        }
        debug_assert!((p_sum - 1.0).abs() <= 1e-12, "softmax sums to {p_sum}");
        for f in positives {
            for &(t, x) in f.entries() {
                terms.push((t, scale * x));
            }
        }
    }
    loss
}

fn densify(terms: &GradTerms, len: usize) -> Vec<f64> {
    let mut g = vec![0.0; len];
    for &(t, x) in terms {
        g[t.index()] += x;
    }
    g
}

/// Cross-entropy ranking loss of `q` against the given negatives.
pub fn ce_loss(q: &TrainQuery, negatives: &[String], w: &WeightTable) -> Result<f64, TrainError> {
    q.check_vocab(w.len())?;
    let pos = q.positive_features()?;
    let neg = q.negatives_from_pool(negatives)?;
    Ok(cross_entropy(&pos, &neg, w.as_slice(), None))
}

/// Dense gradient of [`ce_loss`] with respect to `w`.
pub fn ce_grad(q: &TrainQuery, negatives: &[String], w: &WeightTable) -> Result<Vec<f64>, TrainError> {
    q.check_vocab(w.len())?;
    let pos = q.positive_features()?;
    let neg = q.negatives_from_pool(negatives)?;
    let mut terms = Vec::new();
    cross_entropy(&pos, &neg, w.as_slice(), Some((&mut terms, 1.0)));
    Ok(densify(&terms, w.len()))
}

fn blended(
    pos: &[&FeatureVector],
    lambda1: &[&FeatureVector],
    lambda2: &[&FeatureVector],
    alpha: f64,
    w: &[f64],
    mut grad: Option<&mut GradTerms>,
) -> f64 {
    let mut loss = 0.0;
    if alpha > 0.0 {
        loss += alpha * cross_entropy(pos, lambda1, w, grad.as_deref_mut().map(|g| (g, alpha)));
    }
    if alpha < 1.0 {
        let beta = 1.0 - alpha;
        loss += beta * cross_entropy(pos, lambda2, w, grad.map(|g| (g, beta)));
    }
    loss
}

/// `α · CE(Λ1) + (1 − α) · CE(Λ2)` and its dense gradient.
pub fn blended_loss_grad(
    q: &TrainQuery,
    lambda1: &[String],
    lambda2: &[String],
    alpha: f64,
    w: &WeightTable,
) -> Result<(f64, Vec<f64>), TrainError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(TrainError::InvalidConfig(format!("alpha {alpha} not in [0, 1]")));
    }
    let outer: HashSet<&str> = lambda2.iter().map(String::as_str).collect();
    if let Some(item) = lambda1.iter().find(|n| !outer.contains(n.as_str())) {
        return Err(TrainError::NotNested {
            qid: q.qid.clone(),
            item: item.clone(),
        });
    }
    q.check_vocab(w.len())?;
    let pos = q.positive_features()?;
    let l1 = q.negatives_from_pool(lambda1)?;
    let l2 = q.negatives_from_pool(lambda2)?;
    let mut terms = Vec::new();
    let loss = blended(&pos, &l1, &l2, alpha, w.as_slice(), Some(&mut terms));
    Ok((loss, densify(&terms, w.len())))
}

/// Pool indices sorted by current distance, ties by item id.
fn hardest_first(pool: &[(&str, &FeatureVector)], w: &[f64]) -> Vec<usize> {
    let etas: Vec<f64> = pool.iter().map(|(_, f)| f.dot(w)).collect();
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&a, &b| distance_order((etas[a], pool[a].0), (etas[b], pool[b].0)));
    order
}

/// The `lambda2_size` closest pool items under `w` (Λ2) and the
/// `lambda1_size` closest of those (Λ1).
pub fn mine_hard_negatives(
    q: &TrainQuery,
    w: &WeightTable,
    lambda1_size: usize,
    lambda2_size: usize,
) -> Result<(Vec<String>, Vec<String>), TrainError> {
    if lambda2_size > q.negative_pool.len() || lambda1_size > lambda2_size {
        return Err(TrainError::PoolTooSmall {
            qid: q.qid.clone(),
            requested: lambda2_size.max(lambda1_size),
            available: if lambda1_size > lambda2_size {
                lambda2_size
            } else {
                q.negative_pool.len()
            },
        });
    }
    q.check_vocab(w.len())?;
    let pool: Vec<(&str, &FeatureVector)> = q
        .negative_pool
        .iter()
        .map(|n| Ok((n.as_str(), q.feature(n)?)))
        .collect::<Result<_, TrainError>>()?;
    let order = hardest_first(&pool, w.as_slice());
    let lambda2: Vec<String> = order[..lambda2_size]
        .iter()
        .map(|&i| pool[i].0.to_owned())
        .collect();
    let lambda1 = lambda2[..lambda1_size].to_vec();
    Ok((lambda1, lambda2))
}

/// Cosine annealing from `lr0` at iteration 0 to `lr_min` at `iterations`.
pub fn cosine_lr(iter: usize, config: &TrainConfig) -> Result<f64, TrainError> {
    if iter > config.iterations {
        return Err(TrainError::IterOutOfRange {
            iter,
            iterations: config.iterations,
        });
    }
    if config.iterations == 0 {
        return Ok(config.lr0);
    }
    // Interpolation weight c ∈ [0, 1]; this form hits both endpoints exactly.
    let c = 0.5 * (1.0 + (PI * iter as f64 / config.iterations as f64).cos());
    Ok(config.lr0 * c + config.lr_min * (1.0 - c))
}

/// First and second moment estimates for Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    /// One bias-corrected Adam update of `w` in place.
    pub fn step(&mut self, grad: &[f64], lr: f64, w: &mut [f64], config: &TrainConfig) -> Result<(), TrainError> {
        if grad.len() != w.len() || self.m.len() != w.len() {
            return Err(TrainError::GradientLength {
                expected: w.len(),
                found: grad.len(),
            });
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFiniteGradient);
        }
        let (b1, b2) = (config.adam_beta1, config.adam_beta2);
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for i in 0..w.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            w[i] -= lr * m_hat / (v_hat.sqrt() + config.adam_eps);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterLog {
    pub iter: usize,
    pub lr: f64,
    /// Total blended loss at the weights entering this iteration.
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Normalized weights; zero outside `seen`.
    pub weights: WeightTable,
    /// Token ids appearing in any training feature vector.
    pub seen: BTreeSet<TokenId>,
    /// One row per iteration plus a final row at `iterations` holding the
    /// loss of the returned weights.
    pub log: Vec<IterLog>,
}

impl TrainOutcome {
    pub fn initial_loss(&self) -> f64 {
        self.log.first().map_or(f64::NAN, |l| l.loss)
    }

    pub fn final_loss(&self) -> f64 {
        self.log.last().map_or(f64::NAN, |l| l.loss)
    }
}

/// Tokens with a feature entry in any labelled item of any query.
pub fn seen_tokens(data: &[TrainQuery]) -> BTreeSet<TokenId> {
    data.iter()
        .flat_map(|q| q.features.values())
        .flat_map(|f| f.tokens())
        .collect()
}

struct Prepared<'a> {
    positives: Vec<&'a FeatureVector>,
    pool: Vec<(&'a str, &'a FeatureVector)>,
    lambda1: usize,
    lambda2: usize,
}

impl Prepared<'_> {
    fn loss_and_terms(&self, alpha: f64, w: &[f64], with_grad: bool) -> (f64, GradTerms) {
        let order = hardest_first(&self.pool, w);
        let l2: Vec<&FeatureVector> = order[..self.lambda2].iter().map(|&i| self.pool[i].1).collect();
        let l1 = &l2[..self.lambda1];
        let mut terms = Vec::new();
        let loss = blended(
            &self.positives,
            l1,
            &l2,
            alpha,
            w,
            with_grad.then_some(&mut terms),
        );
        (loss, terms)
    }
}

/// Full-batch training from `init`.
///
/// `init` is restricted to the seen tokens and normalized before the first
/// step. Per-query negative-set sizes are capped at that query's pool size.
/// When `alpha == 0` no Λ1 set is mined.
pub fn train(data: &[TrainQuery], config: &TrainConfig, init: &WeightTable) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let vocab_size = init.len();
    for q in data {
        q.validate()?;
        q.check_vocab(vocab_size)?;
    }
    let seen = seen_tokens(data);

    let mut w = vec![0.0; vocab_size];
    for t in &seen {
        w[t.index()] = init.as_slice()[t.index()];
    }
    normalize_in_place(&mut w)?;

    let prepared: Vec<Prepared> = data
        .iter()
        .map(|q| {
            let pool: Vec<(&str, &FeatureVector)> = q
                .negative_pool
                .iter()
                .map(|n| (n.as_str(), &q.features[n]))
                .collect();
            let lambda2 = config.lambda2_size.min(pool.len());
            let lambda1 = if config.alpha > 0.0 {
                config.lambda1_size.min(lambda2)
            } else {
                0
            };
            Prepared {
                positives: q.positives.iter().map(|p| &q.features[p]).collect(),
                pool,
                lambda1,
                lambda2,
            }
        })
        .collect();

    let evaluate = |w: &[f64], with_grad: bool| -> (f64, Vec<f64>) {
        let per_query: Vec<(f64, GradTerms)> = prepared
            .par_iter()
            .map(|p| p.loss_and_terms(config.alpha, w, with_grad))
            .collect();
        let mut grad = vec![0.0; vocab_size];
        let mut loss = 0.0;
        for (l, terms) in &per_query {
            loss += l;
            for &(t, x) in terms {
                grad[t.index()] += x;
            }
        }
        (loss, grad)
    };

    let mut adam = AdamState::new(vocab_size);
    let mut log = Vec::with_capacity(config.iterations + 1);
    for iter in 0..config.iterations {
        let lr = cosine_lr(iter, config)?;
        let (loss, grad) = evaluate(&w, true);
        log.push(IterLog { iter, lr, loss });
        adam.step(&grad, lr, &mut w, config)?;
        normalize_in_place(&mut w)?;
    }
    let (final_loss, _) = evaluate(&w, false);
    log.push(IterLog {
        iter: config.iterations,
        lr: cosine_lr(config.iterations, config)?,
        loss: final_loss,
    });

    Ok(TrainOutcome {
        weights: WeightTable::new(w, Provenance::Learned, init.special_policy()),
        seen,
        log,
    })
}

/// Writes the `iter,lr,loss` CSV.
pub fn write_log_csv<W: Write>(log: &[IterLog], out: &mut W) -> io::Result<()> {
    writeln!(out, "iter,lr,loss")?;
    for row in log {
        writeln!(out, "{},{:e},{}", row.iter, row.lr, row.loss)?;
    }
    Ok(())
}
