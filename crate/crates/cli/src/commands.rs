use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;
use wchamfer::retrieval::{
    bm25_topk, build_index, evaluate, recall_at_k, write_report_csv, write_run, Metric, MetricsReport, Qrels, Run,
};
use wchamfer::scoring::{extract_features, rerank};
use wchamfer::theory::{
    generate_fewshot, generate_synthetic, sample_complexity_sweep, spec_to_key_values, summarize_sweep,
    write_sweep_csv, FewShotSpec, SweepRow, SyntheticSpec,
};
use wchamfer::trainer::{
    train, write_log_csv, write_training_set, QueryLabels, TrainConfig, TrainOutcome, TrainQuery, CONFIG_KEYS,
};
use wchamfer::weights::{backfill_unseen, compute_idf, count_doc_freq, Provenance, SpecialPolicy};
use wchamfer::{EmbeddingStore, TokenId, TokenizedCorpus, Vocab, WeightTable};

use crate::files::{self, parse_list, ConfigFile};
use crate::UsageError;

#[derive(Debug, Clone)]
pub struct IdfArgs {
    pub corpus: PathBuf,
    pub out: PathBuf,
    pub special: SpecialPolicy,
    pub special_ids: Vec<u32>,
    /// Fraction of documents counted.
    pub sample: f64,
    /// Defaults to the largest token id in the corpus plus one.
    pub vocab_size: Option<usize>,
    pub seed: u64,
}

pub fn cmd_idf(args: &IdfArgs) -> Result<WeightTable> {
    let corpus = files::load_corpus(&args.corpus)?;
    let vocab_size = args.vocab_size.unwrap_or_else(|| corpus.implied_vocab_size());
    let vocab = Vocab::with_special_ids(vocab_size, args.special_ids.iter().map(|&t| TokenId(t)))
        .context("special token ids")?;
    let df = count_doc_freq(&corpus, vocab_size, args.sample, args.seed).context("counting document frequencies")?;
    let table = compute_idf(&df, &vocab, args.special).context("computing IDF weights")?;
    files::save_weights(&table, &args.out)?;
    eprintln!(
        "idf: {} documents counted, {} tokens with nonzero weight",
        df.n_docs,
        table.as_slice().iter().filter(|&&w| w != 0.0).count()
    );
    Ok(table)
}

const TRAIN_KEYS: [&str; 12] = [
    "queries",
    "docs",
    "corpus",
    "train_set",
    "valid_set",
    "out",
    "report",
    "log",
    "special_policy",
    "special_ids",
    "idf_sample",
    "select_k",
];

/// Everything `train` needs, resolved from a config file.
#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub queries: PathBuf,
    pub docs: PathBuf,
    /// Tokenized documents for IDF; the document store's tokens otherwise.
    pub corpus: Option<PathBuf>,
    pub train_set: PathBuf,
    pub valid_set: PathBuf,
    pub out: PathBuf,
    pub report: PathBuf,
    pub log: Option<PathBuf>,
    pub special_policy: SpecialPolicy,
    pub special_ids: Vec<u32>,
    pub idf_sample: f64,
    /// Cutoff of the Recall used to pick between IDF and learned weights.
    pub select_k: usize,
    pub train: TrainConfig,
    /// Set when the config gives `lambda1_size` together with `alpha = 0`.
    pub lambda1_ignored: bool,
}

impl TrainSettings {
    pub fn from_config(config: &ConfigFile, seed: Option<u64>) -> Result<Self> {
        let allowed: Vec<&str> = TRAIN_KEYS.iter().chain(CONFIG_KEYS.iter()).copied().collect();
        config.check_keys(&allowed)?;
        let mut train = TrainConfig::from_map(&config.values).context("training config")?;
        if let Some(seed) = seed {
            train.seed = seed;
        }
        let out = config.require_path("out")?;
        let report = config.path_value("report").unwrap_or_else(|| {
            let mut name = out.file_name().unwrap_or_default().to_owned();
            name.push(".report");
            out.with_file_name(name)
        });
        Ok(TrainSettings {
            queries: config.require_path("queries")?,
            docs: config.require_path("docs")?,
            corpus: config.path_value("corpus"),
            train_set: config.require_path("train_set")?,
            valid_set: config.require_path("valid_set")?,
            out,
            report,
            log: config.path_value("log"),
            special_policy: match config.get("special_policy") {
                None => SpecialPolicy::Zero,
                Some(v) => v.parse().map_err(UsageError)?,
            },
            special_ids: config
                .get("special_ids")
                .map(|v| parse_list(v, "special token id"))
                .transpose()?
                .unwrap_or_default(),
            idf_sample: config.parsed("idf_sample")?.unwrap_or(1.0),
            select_k: config.parsed("select_k")?.unwrap_or(10),
            lambda1_ignored: train.alpha == 0.0 && config.get("lambda1_size").is_some(),
            train,
        })
    }
}

/// What `train` decided.
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub weights: WeightTable,
    pub valid_recall_idf: f64,
    pub valid_recall_learned: f64,
    pub selected_learned: bool,
    /// Log of the run whose weights were compared on validation.
    pub first_run: TrainOutcome,
    /// Log of the final run on train ∪ validation, when learned weights won.
    pub retrain: Option<TrainOutcome>,
}

fn build_train_queries(
    labels: &[QueryLabels],
    queries: &EmbeddingStore,
    docs: &EmbeddingStore,
) -> Result<Vec<TrainQuery>> {
    labels
        .par_iter()
        .map(|l| {
            let q = queries
                .get(&l.qid)
                .ok_or_else(|| anyhow!("query `{}` is not in the query store", l.qid))?;
            let mut features = HashMap::new();
            for item in l.positives.iter().chain(&l.negative_pool) {
                let d = docs
                    .get(item)
                    .ok_or_else(|| anyhow!("document `{item}` (query `{}`) is not in the document store", l.qid))?;
                features.insert(item.clone(), extract_features(q, d)?);
            }
            Ok(TrainQuery::new(l.clone(), features)?)
        })
        .collect()
}

/// Mean Recall@k when each query ranks its own positives and negative pool.
fn labelled_recall(
    labels: &[QueryLabels],
    queries: &EmbeddingStore,
    docs: &EmbeddingStore,
    weights: &WeightTable,
    k: usize,
) -> Result<f64> {
    let mut qrels = Qrels::new();
    let mut total = 0.0;
    for l in labels {
        for p in &l.positives {
            qrels.insert(&l.qid, p, 1);
        }
        let q = queries
            .get(&l.qid)
            .ok_or_else(|| anyhow!("query `{}` is not in the query store", l.qid))?;
        let candidates: Vec<&String> = l.positives.iter().chain(&l.negative_pool).collect();
        let ranked = rerank(q, &candidates, docs, weights)?;
        total += recall_at_k(&ranked, &qrels, &l.qid, k)?;
    }
    Ok(total / labels.len() as f64)
}

/// Merges label sets by qid, keeping first occurrences.
fn union_labels(a: &[QueryLabels], b: &[QueryLabels]) -> Result<Vec<QueryLabels>> {
    let mut merged: BTreeMap<String, QueryLabels> = BTreeMap::new();
    for l in a.iter().chain(b) {
        let entry = merged.entry(l.qid.clone()).or_insert_with(|| QueryLabels {
            qid: l.qid.clone(),
            ..Default::default()
        });
        for p in &l.positives {
            if entry.negative_pool.contains(p) {
                bail!("`{p}` is both positive and negative for query `{}` across splits", l.qid);
            }
            if !entry.positives.contains(p) {
                entry.positives.push(p.clone());
            }
        }
        for n in &l.negative_pool {
            if entry.positives.contains(n) {
                bail!("`{n}` is both positive and negative for query `{}` across splits", l.qid);
            }
            if !entry.negative_pool.contains(n) {
                entry.negative_pool.push(n.clone());
            }
        }
    }
    Ok(merged.into_values().collect())
}

/// Backfilled learned weights with special tokens pinned to their IDF value.
fn finish_learned(outcome: &TrainOutcome, idf: &WeightTable, vocab: &Vocab) -> Result<WeightTable> {
    let mut table = backfill_unseen(&outcome.weights, idf, &outcome.seen)?;
    for &s in vocab.special_ids() {
        table.as_mut_slice()[s.index()] = idf.get(s);
    }
    Ok(table)
}

pub fn cmd_train(settings: &TrainSettings) -> Result<TrainSummary> {
    if settings.lambda1_ignored {
        eprintln!("warning: alpha = 0, so lambda1_size is ignored");
    }
    let queries = files::load_store(&settings.queries, "query store")?;
    let docs = files::load_store(&settings.docs, "document store")?;
    if queries.dim() != docs.dim() {
        bail!("query store dim {} differs from document store dim {}", queries.dim(), docs.dim());
    }
    let vocab_size = queries.vocab().size().max(docs.vocab().size());
    let vocab = Vocab::with_special_ids(vocab_size, settings.special_ids.iter().map(|&t| TokenId(t)))
        .context("special token ids")?;

    let corpus = match &settings.corpus {
        Some(path) => files::load_corpus(path)?,
        None => TokenizedCorpus::from_store(&docs),
    };
    let df = count_doc_freq(&corpus, vocab_size, settings.idf_sample, settings.train.seed)
        .context("counting document frequencies")?;
    let idf = compute_idf(&df, &vocab, settings.special_policy).context("computing IDF weights")?;

    let train_labels = files::load_training_set(&settings.train_set, "training set")?;
    let valid_labels = files::load_training_set(&settings.valid_set, "validation set")?;
    if train_labels.is_empty() {
        bail!("training set is empty");
    }
    if valid_labels.is_empty() {
        bail!("validation set is empty");
    }
    let train_queries = build_train_queries(&train_labels, &queries, &docs).context("preparing training queries")?;

    let init = WeightTable::ones(vocab_size).with_special_policy(settings.special_policy);
    let first_run = train(&train_queries, &settings.train, &init).context("training")?;
    let learned = finish_learned(&first_run, &idf, &vocab).context("backfilling learned weights")?;

    let k = settings.select_k;
    let valid_recall_idf = labelled_recall(&valid_labels, &queries, &docs, &idf, k).context("validating IDF weights")?;
    let valid_recall_learned =
        labelled_recall(&valid_labels, &queries, &docs, &learned, k).context("validating learned weights")?;
    let selected_learned = valid_recall_learned > valid_recall_idf;

    let (weights, retrain) = if selected_learned {
        let all_labels = union_labels(&train_labels, &valid_labels)?;
        let all_queries = build_train_queries(&all_labels, &queries, &docs).context("preparing union queries")?;
        let outcome = train(&all_queries, &settings.train, &init).context("retraining on train and validation")?;
        let table = finish_learned(&outcome, &idf, &vocab)
            .context("backfilling retrained weights")?
            .with_provenance(Provenance::Backfilled);
        (table, Some(outcome))
    } else {
        (idf, None)
    };

    files::save_weights(&weights, &settings.out)?;
    let mut report = String::new();
    let _ = writeln!(report, "selection_metric=recall@{k}");
    let _ = writeln!(report, "train_queries={}", train_labels.len());
    let _ = writeln!(report, "valid_queries={}", valid_labels.len());
    let _ = writeln!(report, "valid_recall_idf={valid_recall_idf}");
    let _ = writeln!(report, "valid_recall_learned={valid_recall_learned}");
    let _ = writeln!(report, "selected={}", if selected_learned { "learned" } else { "idf" });
    let _ = writeln!(report, "retrained_on_union={selected_learned}");
    let _ = writeln!(report, "initial_loss={}", first_run.initial_loss());
    let _ = writeln!(report, "final_loss={}", first_run.final_loss());
    if let Some(r) = &retrain {
        let _ = writeln!(report, "retrain_final_loss={}", r.final_loss());
    }
    let _ = writeln!(report, "provenance={}", weights.provenance());
    files::write_file(&settings.report, "selection report", |w| w.write_all(report.as_bytes()))?;
    if let Some(log) = &settings.log {
        let rows = &retrain.as_ref().unwrap_or(&first_run).log;
        files::write_file(log, "training log", |w| write_log_csv(rows, w))?;
    }
    eprintln!(
        "train: validation recall@{k} idf={valid_recall_idf:.4} learned={valid_recall_learned:.4}; wrote {} weights",
        weights.provenance()
    );

    Ok(TrainSummary {
        weights,
        valid_recall_idf,
        valid_recall_learned,
        selected_learned,
        first_run,
        retrain,
    })
}

#[derive(Debug, Clone)]
pub enum CandidateSource {
    /// BM25 over this tokenized corpus, or the document store's tokens.
    Bm25(Option<PathBuf>),
    /// First-stage run file.
    File(PathBuf),
}

#[derive(Debug, Clone)]
pub struct RerankArgs {
    pub queries: PathBuf,
    pub docs: PathBuf,
    pub weights: PathBuf,
    pub candidates: CandidateSource,
    pub out: PathBuf,
    /// Candidates reranked per query.
    pub k: usize,
    pub tag: String,
}

pub fn cmd_rerank(args: &RerankArgs) -> Result<Run> {
    if args.k == 0 {
        return Err(UsageError("--k must be at least 1".into()).into());
    }
    let queries = files::load_store(&args.queries, "query store")?;
    let docs = files::load_store(&args.docs, "document store")?;
    let weights = files::load_weights(&args.weights)?;

    let candidates: BTreeMap<String, Vec<String>> = match &args.candidates {
        CandidateSource::File(path) => files::load_run(path)?
            .into_iter()
            .map(|(qid, list)| (qid, list.ids().take(args.k).map(str::to_owned).collect()))
            .collect(),
        CandidateSource::Bm25(corpus) => {
            let corpus = match corpus {
                Some(path) => files::load_corpus(path)?,
                None => TokenizedCorpus::from_store(&docs),
            };
            let index = build_index(&corpus).context("building BM25 index")?;
            queries
                .records()
                .iter()
                .map(|q| {
                    let list = bm25_topk(&index, &q.token_ids, args.k);
                    (q.item_id.clone(), list.ids().map(str::to_owned).collect())
                })
                .collect()
        }
    };

    let mut run = Run::new();
    for (qid, ids) in &candidates {
        let q = queries
            .get(qid)
            .ok_or_else(|| anyhow!("query `{qid}` is not in the query store"))?;
        let ranked = rerank(q, ids, &docs, &weights).with_context(|| format!("reranking query `{qid}`"))?;
        run.insert(qid.clone(), ranked);
    }
    files::write_file(&args.out, "run", |w| write_run(&run, &args.tag, w))?;
    eprintln!("rerank: {} queries", run.len());
    Ok(run)
}

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub run: PathBuf,
    pub qrels: PathBuf,
    pub ks: Vec<usize>,
    pub out: PathBuf,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<MetricsReport> {
    if args.ks.is_empty() || args.ks.contains(&0) {
        return Err(UsageError("--k needs positive cutoffs".into()).into());
    }
    let run = files::load_run(&args.run)?;
    let qrels = files::load_qrels(&args.qrels)?;
    let report = evaluate(&run, &qrels, &args.ks)?;
    if !report.missing_qrels.is_empty() {
        eprintln!(
            "warning: {} run queries have no judgments: {}",
            report.missing_qrels.len(),
            report.missing_qrels.join(" ")
        );
    }
    if !report.no_relevant.is_empty() {
        eprintln!(
            "warning: {} queries have no relevant documents and are skipped: {}",
            report.no_relevant.len(),
            report.no_relevant.join(" ")
        );
    }
    let unjudged = qrels.qids().filter(|q| !run.contains_key(*q)).count();
    if unjudged > 0 {
        eprintln!("warning: {unjudged} judged queries are missing from the run");
    }
    if report.per_query.is_empty() {
        bail!("run and qrels share no query with a relevant document");
    }
    files::write_file(&args.out, "metrics report", |w| write_report_csv(&report, w))?;
    for metric in Metric::ALL {
        for &k in &args.ks {
            println!("{metric}@{k}\t{:.6}", report.mean(metric, k).unwrap_or(f64::NAN));
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthTask {
    Recovery,
    FewShot,
}

#[derive(Debug, Clone)]
pub struct SynthArgs {
    pub task: SynthTask,
    pub spec: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: Option<u64>,
}

fn load_synthetic_spec(path: Option<&Path>, seed: Option<u64>) -> Result<SyntheticSpec> {
    let mut spec = match path {
        Some(p) => SyntheticSpec::parse(&files::read_text(p, "spec")?)
            .with_context(|| format!("parsing spec `{}`", p.display()))?,
        None => SyntheticSpec::default(),
    };
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    Ok(spec)
}

/// Writes a synthetic recovery data set or a few-shot reranking task into
/// `out_dir`.
pub fn cmd_synth(args: &SynthArgs) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating output directory `{}`", args.out_dir.display()))?;
    let dir = &args.out_dir;
    let mut written = Vec::new();
    let mut out = |name: &str| {
        let p = dir.join(name);
        written.push(p.clone());
        p
    };
    match args.task {
        SynthTask::Recovery => {
            let spec = load_synthetic_spec(args.spec.as_deref(), args.seed)?;
            let data = generate_synthetic(&spec)?;
            files::save_store(&data.store, &out("store.mvst"), "store")?;
            files::save_weights(&data.planted, &out("planted.weights"))?;
            files::write_file(&out("pairs.tsv"), "pairs", |w| {
                for ((q, d), s) in data.pairs.iter().zip(&data.scores) {
                    writeln!(w, "{q}\t{d}\t{s:.17e}")?;
                }
                Ok(())
            })?;
            files::write_file(&out("spec.txt"), "spec", |w| {
                w.write_all(spec_to_key_values(&spec).as_bytes())
            })?;
        }
        SynthTask::FewShot => {
            let mut spec = match &args.spec {
                Some(p) => FewShotSpec::parse(&files::read_text(p, "spec")?)
                    .with_context(|| format!("parsing spec `{}`", p.display()))?,
                None => FewShotSpec::default(),
            };
            if let Some(seed) = args.seed {
                spec.seed = seed;
            }
            let task = generate_fewshot(&spec)?;
            files::save_store(&task.queries, &out("queries.mvst"), "query store")?;
            files::save_store(&task.docs, &out("docs.mvst"), "document store")?;
            files::save_corpus(&task.corpus, &out("corpus.tsv"))?;
            files::write_file(&out("train.tsv"), "training set", |w| write_training_set(&task.train, w))?;
            files::write_file(&out("valid.tsv"), "validation set", |w| write_training_set(&task.valid, w))?;
            files::write_file(&out("test.qrels"), "qrels", |w| task.test_qrels.write(w))?;
            files::write_file(&out("test_candidates.run"), "run", |w| {
                write_run(&task.test_candidates, "candidates", w)
            })?;
            files::save_weights(&task.planted, &out("planted.weights"))?;
            let config = format!(
                "queries=queries.mvst\ndocs=docs.mvst\ncorpus=corpus.tsv\ntrain_set=train.tsv\n\
                 valid_set=valid.tsv\nout=learned.weights\nlog=train_log.csv\n{}",
                TrainConfig {
                    lambda1_size: TrainConfig::default().lambda1_size.min(spec.pool_size),
                    lambda2_size: spec.pool_size,
                    seed: spec.seed,
                    ..TrainConfig::default()
                }
                .to_key_values()
            );
            files::write_file(&out("train.conf"), "train config", |w| w.write_all(config.as_bytes()))?;
        }
    }
    eprintln!("synth: wrote {} files to {}", written.len(), dir.display());
    Ok(written)
}

#[derive(Debug, Clone)]
pub struct RecoverArgs {
    pub spec: Option<PathBuf>,
    pub grid: Vec<usize>,
    pub repeats: usize,
    pub out: PathBuf,
    pub seed: Option<u64>,
}

pub fn cmd_recover(args: &RecoverArgs) -> Result<Vec<SweepRow>> {
    if args.grid.is_empty() || args.repeats == 0 {
        return Err(UsageError("--grid and --repeats must be non-empty".into()).into());
    }
    let spec = load_synthetic_spec(args.spec.as_deref(), args.seed)?;
    let rows = sample_complexity_sweep(&spec, &args.grid, args.repeats)?;
    files::write_file(&args.out, "sweep", |w| write_sweep_csv(&rows, w))?;
    let summary = summarize_sweep(&rows);
    for s in &summary {
        println!("n={}\tsuccess_rate={:.3}\tmedian_min_eig={:e}", s.n, s.success_rate, s.median_min_eig);
    }
    let lo = args.grid.iter().min().unwrap();
    let hi = args.grid.iter().max().unwrap();
    let rate = |n: usize| summary.iter().find(|s| s.n == n).map_or(0.0, |s| s.success_rate);
    println!(
        "trend: success rate at n={hi} ({:.3}) {} rate at n={lo} ({:.3})",
        rate(*hi),
        if rate(*hi) >= rate(*lo) { ">=" } else { "<" },
        rate(*lo)
    );
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(qid: &str, pos: &[&str], neg: &[&str]) -> QueryLabels {
        QueryLabels {
            qid: qid.into(),
            positives: pos.iter().map(|s| s.to_string()).collect(),
            negative_pool: neg.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn union_merges_by_qid() {
        let a = [labels("q1", &["a"], &["b"]), labels("q2", &["c"], &[])];
        let b = [labels("q1", &["a", "d"], &["e"]), labels("q0", &["x"], &["y"])];
        let u = union_labels(&a, &b).unwrap();
        assert_eq!(u.len(), 3);
        assert_eq!(u[0].qid, "q0");
        assert_eq!(u[1].positives, ["a", "d"]);
        assert_eq!(u[1].negative_pool, ["b", "e"]);
        assert!(union_labels(&a, &[labels("q1", &["b"], &[])]).is_err());
    }
}
