//! Classification metrics, F1 aggregation across clients, and the
//! summary-statistics feature dataset with its correlation matrix.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::error_stats::{csv_err, ClassSummaries, ErrorSummary, GlobalSummary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    /// Counts under the rule "anomaly iff error > threshold".
    pub fn at_threshold(errors: &[f64], labels: &[u8], threshold: f64) -> Self {
        let mut c = Confusion::default();
        for (&e, &l) in errors.iter().zip(labels) {
            match (e > threshold, l == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn f1(&self) -> f64 {
        f1_counts(self.tp, self.fp, self.fn_)
    }
}

/// `2tp / (2tp + fp + fn)`, zero when the denominator is zero.
pub fn f1_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

pub fn f1(c: &Confusion) -> f64 {
    c.f1()
}

/// F1 at every candidate threshold. Errors are sorted once per class and each
/// candidate is located by binary search, so the cost is `O((n + m) log n)`
/// instead of `O(n * m)`. Candidates may come in any order.
pub fn f1_curve(errors: &[f64], labels: &[u8], candidates: &[f64]) -> Vec<f64> {
    let mut pos: Vec<f64> = Vec::new();
    let mut neg: Vec<f64> = Vec::new();
    for (&e, &l) in errors.iter().zip(labels) {
        if l == 1 {
            pos.push(e);
        } else {
            neg.push(e);
        }
    }
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);

    candidates
        .iter()
        .map(|&theta| {
            // number of values <= theta, i.e. predicted normal
            let fn_ = pos.partition_point(|&x| x <= theta);
            let tn = neg.partition_point(|&x| x <= theta);
            f1_counts(pos.len() - fn_, neg.len() - tn, fn_)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum F1Aggregation {
    #[default]
    Mean,
    WeightedMean,
}

/// Clients x candidates grid of F1 scores.
#[derive(Debug, Clone, PartialEq)]
pub struct F1Matrix {
    pub candidates: Vec<f64>,
    pub scores: Vec<Vec<f64>>,
    /// Per-client validation sample counts, used by weighted aggregation.
    pub client_counts: Vec<usize>,
}

impl F1Matrix {
    pub fn new(candidates: Vec<f64>, scores: Vec<Vec<f64>>, client_counts: Vec<usize>) -> Result<Self> {
        if scores.is_empty() || candidates.is_empty() {
            return Err(Error::invalid("F1 matrix needs at least one client and one candidate"));
        }
        if scores.len() != client_counts.len() {
            return Err(Error::invalid("one count per client row is required"));
        }
        if let Some(row) = scores.iter().position(|r| r.len() != candidates.len()) {
            return Err(Error::invalid(format!(
                "client row {row} has {} scores for {} candidates",
                scores[row].len(),
                candidates.len()
            )));
        }
        if scores.iter().flatten().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::invalid("F1 scores must lie in [0, 1]"));
        }
        Ok(Self {
            candidates,
            scores,
            client_counts,
        })
    }

    /// Per-candidate aggregate over clients.
    pub fn column_scores(&self, mode: F1Aggregation) -> Vec<f64> {
        let weights: Vec<f64> = match mode {
            F1Aggregation::Mean => vec![1.0; self.scores.len()],
            F1Aggregation::WeightedMean => self.client_counts.iter().map(|&c| c as f64).collect(),
        };
        let total: f64 = weights.iter().sum();
        let total = if total > 0.0 { total } else { 1.0 };
        (0..self.candidates.len())
            .map(|j| {
                self.scores
                    .iter()
                    .zip(&weights)
                    .map(|(row, w)| w * row[j])
                    .sum::<f64>()
                    / total
            })
            .collect()
    }
}

/// Argmax of the aggregated F1 column scores. Ties go to the smallest candidate.
pub fn aggregate_f1(matrix: &F1Matrix, mode: F1Aggregation) -> (f64, f64) {
    let cols = matrix.column_scores(mode);
    best_candidate(&matrix.candidates, &cols)
}

/// `(threshold, score)` with the highest score; earliest wins ties, so with
/// ascending candidates the smallest threshold is returned.
pub(crate) fn best_candidate(candidates: &[f64], scores: &[f64]) -> (f64, f64) {
    let mut best = 0;
    for j in 1..scores.len() {
        if scores[j] > scores[best] {
            best = j;
        }
    }
    (candidates[best], scores[best])
}

/// Feature names in CSV column order; the last entry is the label.
pub const STAT_FEATURE_COLUMNS: [&str; 21] = [
    "local_normal_mean",
    "local_normal_variance",
    "local_normal_skewness",
    "local_normal_kurtosis",
    "local_normal_count",
    "local_anomaly_mean",
    "local_anomaly_variance",
    "local_anomaly_skewness",
    "local_anomaly_kurtosis",
    "local_anomaly_count",
    "global_normal_mean",
    "global_normal_variance",
    "global_normal_skewness",
    "global_normal_kurtosis",
    "global_normal_proportional_count",
    "global_anomaly_mean",
    "global_anomaly_variance",
    "global_anomaly_skewness",
    "global_anomaly_kurtosis",
    "global_anomaly_proportional_count",
    "f1_difference",
];

/// One client's row in the follow-up dataset: 20 features and the
/// federated-minus-local F1 label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StatFeatureRow {
    pub features: [f64; 20],
    pub f1_difference: f64,
}

impl StatFeatureRow {
    pub fn values(&self) -> [f64; 21] {
        let mut out = [0.0; 21];
        out[..20].copy_from_slice(&self.features);
        out[20] = self.f1_difference;
        out
    }
}

fn local_block(s: Option<&ErrorSummary>) -> [f64; 5] {
    match s {
        Some(s) => [s.mean, s.variance, s.skewness, s.kurtosis, s.count as f64],
        None => [0.0; 5],
    }
}

fn global_block(g: Option<&GlobalSummary>, local_count: usize) -> [f64; 5] {
    match g {
        Some(g) => {
            let prop = if g.count > 0 {
                local_count as f64 / g.count as f64
            } else {
                0.0
            };
            [g.mean, g.variance, g.skewness, g.kurtosis, prop]
        }
        None => [0.0; 5],
    }
}

/// Builds a feature row. A missing class is encoded as zeros with count 0.
pub fn collect_stat_features(
    local: &ClassSummaries,
    global_normal: Option<&GlobalSummary>,
    global_anomaly: Option<&GlobalSummary>,
    f1_local: f64,
    f1_fed: f64,
) -> StatFeatureRow {
    let n_count = local.normal.map_or(0, |s| s.count);
    let a_count = local.anomaly.map_or(0, |s| s.count);
    let mut features = [0.0; 20];
    features[0..5].copy_from_slice(&local_block(local.normal.as_ref()));
    features[5..10].copy_from_slice(&local_block(local.anomaly.as_ref()));
    features[10..15].copy_from_slice(&global_block(global_normal, n_count));
    features[15..20].copy_from_slice(&global_block(global_anomaly, a_count));
    StatFeatureRow {
        features,
        f1_difference: f1_fed - f1_local,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    pub values: Vec<Vec<f64>>,
    /// Columns with zero variance; their rows and columns are all zero.
    pub constant_columns: Vec<usize>,
}

/// Pearson correlation between all columns of `rows` (each row has the same
/// width).
pub fn correlation_of_columns(rows: &[Vec<f64>]) -> Result<CorrelationMatrix> {
    if rows.len() < 2 {
        return Err(Error::invalid("correlation needs at least two rows"));
    }
    let width = rows[0].len();
    if rows.iter().any(|r| r.len() != width) {
        return Err(Error::invalid("all rows must have the same width"));
    }
    let n = rows.len() as f64;
    let means: Vec<f64> = (0..width)
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n)
        .collect();
    let centered: Vec<Vec<f64>> = (0..width)
        .map(|j| rows.iter().map(|r| r[j] - means[j]).collect())
        .collect();
    let norms: Vec<f64> = centered
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let constant_columns: Vec<usize> = (0..width).filter(|&j| norms[j] == 0.0).collect();

    let mut values = vec![vec![0.0; width]; width];
    for i in 0..width {
        if norms[i] == 0.0 {
            continue;
        }
        values[i][i] = 1.0;
        for j in (i + 1)..width {
            if norms[j] == 0.0 {
                continue;
            }
            let dot: f64 = centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum();
            let r = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            values[i][j] = r;
            values[j][i] = r;
        }
    }
    Ok(CorrelationMatrix {
        values,
        constant_columns,
    })
}

/// 21 x 21 Pearson correlation over the features and the label.
pub fn correlation_matrix(rows: &[StatFeatureRow]) -> Result<CorrelationMatrix> {
    let table: Vec<Vec<f64>> = rows.iter().map(|r| r.values().to_vec()).collect();
    correlation_of_columns(&table)
}

pub fn write_stat_features_csv<W: Write>(rows: &[StatFeatureRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(STAT_FEATURE_COLUMNS).map_err(csv_err)?;
    for r in rows {
        w.write_record(r.values().iter().map(|v| v.to_string()))
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("<features csv>", e))
}

pub fn write_correlation_csv<W: Write>(m: &CorrelationMatrix, names: &[&str], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![""];
    header.extend_from_slice(names);
    w.write_record(&header).map_err(csv_err)?;
    for (name, row) in names.iter().zip(&m.values) {
        let mut rec = vec![name.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("<correlation csv>", e))
}
