use std::fmt;
use std::io::{self, Write};

use thiserror::Error;

use super::trec::{Qrels, Run};
use crate::scoring::RankedList;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("cutoff k must be at least 1")]
    ZeroK,
    #[error("query `{0}` has no relevant documents")]
    NoRelevant(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Metric {
    Recall,
    Mrr,
    Ndcg,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Recall, Metric::Mrr, Metric::Ndcg];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Recall => "recall",
            Metric::Mrr => "mrr",
            Metric::Ndcg => "ndcg",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn check(qrels: &Qrels, qid: &str, k: usize) -> Result<usize, MetricError> {
    if k == 0 {
        return Err(MetricError::ZeroK);
    }
    match qrels.n_relevant(qid) {
        0 => Err(MetricError::NoRelevant(qid.to_owned())),
        n => Ok(n),
    }
}

/// Fraction of the relevant documents (grade > 0) found in the top `k`.
pub fn recall_at_k(ranked: &RankedList, qrels: &Qrels, qid: &str, k: usize) -> Result<f64, MetricError> {
    let n_relevant = check(qrels, qid, k)?;
    let hits = ranked
        .ids()
        .take(k)
        .filter(|d| qrels.grade(qid, d) > 0)
        .count();
    Ok(hits as f64 / n_relevant as f64)
}

/// Reciprocal rank of the first relevant document in the top `k`, else 0.
pub fn mrr_at_k(ranked: &RankedList, qrels: &Qrels, qid: &str, k: usize) -> Result<f64, MetricError> {
    check(qrels, qid, k)?;
    Ok(ranked
        .ids()
        .take(k)
        .position(|d| qrels.grade(qid, d) > 0)
        .map_or(0.0, |i| 1.0 / (i + 1) as f64))
}

fn dcg(grades: impl Iterator<Item = u32>) -> f64 {
    grades
        .enumerate()
        .map(|(i, g)| f64::from(g) / ((i + 2) as f64).log2())
        .sum()
}

/// Linear-gain nDCG: `Σ grade_i / log2(i + 1)` over the top `k`, divided by
/// the same sum over the ideal ordering of the judged grades.
pub fn ndcg_at_k(ranked: &RankedList, qrels: &Qrels, qid: &str, k: usize) -> Result<f64, MetricError> {
    check(qrels, qid, k)?;
    let mut ideal: Vec<u32> = qrels
        .query(qid)
        .map(|d| d.values().copied().collect())
        .unwrap_or_default();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg = dcg(ideal.into_iter().take(k));
    if idcg == 0.0 {
        return Err(MetricError::NoRelevant(qid.to_owned()));
    }
    let actual = dcg(ranked.ids().take(k).map(|d| qrels.grade(qid, d)));
    Ok(actual / idcg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryMetrics {
    pub qid: String,
    /// `(metric, k, value)` in metric-major, then k order.
    pub values: Vec<(Metric, usize, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub ks: Vec<usize>,
    /// Scored queries, sorted by qid.
    pub per_query: Vec<QueryMetrics>,
    /// Unweighted means over `per_query`, same order as each row's values.
    pub means: Vec<(Metric, usize, f64)>,
    /// Run queries whose judgments contain no relevant document.
    pub no_relevant: Vec<String>,
    /// Run queries absent from the qrels.
    pub missing_qrels: Vec<String>,
}

impl MetricsReport {
    pub fn mean(&self, metric: Metric, k: usize) -> Option<f64> {
        self.means
            .iter()
            .find(|(m, kk, _)| *m == metric && *kk == k)
            .map(|t| t.2)
    }

    pub fn value(&self, qid: &str, metric: Metric, k: usize) -> Option<f64> {
        self.per_query
            .iter()
            .find(|q| q.qid == qid)?
            .values
            .iter()
            .find(|(m, kk, _)| *m == metric && *kk == k)
            .map(|t| t.2)
    }
}

/// Scores every run query that has judgments with at least one relevant
/// document; the rest are listed in the report and left out of the means.
pub fn evaluate(run: &Run, qrels: &Qrels, ks: &[usize]) -> Result<MetricsReport, MetricError> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(MetricError::ZeroK);
    }
    let mut per_query = Vec::new();
    let mut no_relevant = Vec::new();
    let mut missing_qrels = Vec::new();
    for (qid, ranked) in run {
        if !qrels.contains_query(qid) {
            missing_qrels.push(qid.clone());
            continue;
        }
        if qrels.n_relevant(qid) == 0 {
            no_relevant.push(qid.clone());
            continue;
        }
        let mut values = Vec::with_capacity(3 * ks.len());
        for metric in Metric::ALL {
            for &k in ks {
                let v = match metric {
                    Metric::Recall => recall_at_k(ranked, qrels, qid, k)?,
                    Metric::Mrr => mrr_at_k(ranked, qrels, qid, k)?,
                    Metric::Ndcg => ndcg_at_k(ranked, qrels, qid, k)?,
                };
                values.push((metric, k, v));
            }
        }
        per_query.push(QueryMetrics {
            qid: qid.clone(),
            values,
        });
    }

    let means = if per_query.is_empty() {
        Vec::new()
    } else {
        let n = per_query.len() as f64;
        (0..per_query[0].values.len())
            .map(|j| {
                let (m, k, _) = per_query[0].values[j];
                (m, k, per_query.iter().map(|q| q.values[j].2).sum::<f64>() / n)
            })
            .collect()
    };
    Ok(MetricsReport {
        ks: ks.to_vec(),
        per_query,
        means,
        no_relevant,
        missing_qrels,
    })
}

/// `metric,k,qid,value` rows followed by `metric,k,ALL,mean` rows.
pub fn write_report_csv<W: Write>(report: &MetricsReport, out: &mut W) -> io::Result<()> {
    writeln!(out, "metric,k,qid,value")?;
    for q in &report.per_query {
        for (m, k, v) in &q.values {
            writeln!(out, "{m},{k},{},{v}", q.qid)?;
        }
    }
    for (m, k, v) in &report.means {
        writeln!(out, "{m},{k},ALL,{v}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::super::trec::parse_qrels;
    use super::*;
    use crate::scoring::ScoredItem;

    fn ranked(ids: &[&str]) -> RankedList {
        RankedList::from_ordered(
            ids.iter()
                .enumerate()
                .map(|(i, id)| ScoredItem {
                    item_id: id.to_string(),
                    score: -(i as f64),
                })
                .collect(),
        )
    }

    fn qrels() -> Qrels {
        parse_qrels("q 0 d1 1\nq 0 d3 1\nq 0 d2 0\nz 0 d1 0\n").unwrap()
    }

    #[test]
    fn recall_examples() {
        let q = qrels();
        assert_eq!(recall_at_k(&ranked(&["d1", "d3"]), &q, "q", 2).unwrap(), 1.0);
        assert_eq!(recall_at_k(&ranked(&["d1", "d2", "d3"]), &q, "q", 2).unwrap(), 0.5);
        assert_eq!(recall_at_k(&ranked(&["d1"]), &q, "q", 0), Err(MetricError::ZeroK));
        assert_eq!(
            recall_at_k(&ranked(&["d1"]), &q, "z", 5),
            Err(MetricError::NoRelevant("z".into()))
        );
    }

    #[test]
    fn mrr_examples() {
        let q = qrels();
        assert_eq!(mrr_at_k(&ranked(&["d1", "d2"]), &q, "q", 10).unwrap(), 1.0);
        assert_eq!(mrr_at_k(&ranked(&["x", "d2", "d3"]), &q, "q", 10).unwrap(), 1.0 / 3.0);
        assert_eq!(mrr_at_k(&ranked(&["x", "d2", "d3"]), &q, "q", 2).unwrap(), 0.0);
    }

    #[test]
    fn ndcg_examples() {
        let q = qrels();
        assert_eq!(ndcg_at_k(&ranked(&["d1", "d3", "d2"]), &q, "q", 3).unwrap(), 1.0);
        // DCG = 1, IDCG = 1 + 1/log2(3)
        let v = ndcg_at_k(&ranked(&["d1", "d2", "d3"]), &q, "q", 2).unwrap();
        let expected = 1.0 / (1.0 + 1.0 / 3f64.log2());
        assert!((v - expected).abs() < 1e-15);
        assert!((v - 0.61315).abs() < 1e-5);
        assert_eq!(
            ndcg_at_k(&ranked(&["d1"]), &q, "z", 2),
            Err(MetricError::NoRelevant("z".into()))
        );
    }

    #[test]
    fn graded_ndcg() {
        let q = parse_qrels("q 0 a 3\nq 0 b 1\n").unwrap();
        let v = ndcg_at_k(&ranked(&["b", "a"]), &q, "q", 2).unwrap();
        let dcg = 1.0 + 3.0 / 3f64.log2();
        let idcg = 3.0 + 1.0 / 3f64.log2();
        assert!((v - dcg / idcg).abs() < 1e-15);
    }

    #[test]
    fn evaluate_means_and_flags() {
        let q = parse_qrels("a 0 d1 1\nb 0 d1 1\nc 0 d1 0\n").unwrap();
        let mut run = Run::new();
        run.insert("a".into(), ranked(&["d1"]));
        run.insert("b".into(), ranked(&["d2"]));
        run.insert("c".into(), ranked(&["d1"]));
        run.insert("x".into(), ranked(&["d1"]));
        let report = evaluate(&run, &q, &[1, 10]).unwrap();
        assert_eq!(report.per_query.len(), 2);
        assert_eq!(report.mean(Metric::Recall, 1), Some(0.5));
        assert_eq!(report.mean(Metric::Ndcg, 10), Some(0.5));
        assert_eq!(report.value("a", Metric::Mrr, 10), Some(1.0));
        assert_eq!(report.no_relevant, vec!["c".to_string()]);
        assert_eq!(report.missing_qrels, vec!["x".to_string()]);

        let mut buf = Vec::new();
        write_report_csv(&report, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("metric,k,qid,value\nrecall,1,a,1\n"));
        assert!(text.contains("\nrecall,10,ALL,0.5\n"));
        assert_eq!(text.lines().count(), 1 + 2 * 6 + 6);

        assert_eq!(evaluate(&run, &q, &[]), Err(MetricError::ZeroK));
    }
}
