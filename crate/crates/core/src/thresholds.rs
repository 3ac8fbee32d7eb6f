//! Threshold selection: the summary-statistics federated method and the
//! local and federated baselines it is compared against.
//!
//! Every method returns a cut point on reconstruction error; samples with an
//! error strictly greater than the threshold are classified as anomalies.

use std::fmt;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::error_stats::{
    aggregate, generate_candidates, overlap_region, ClassSummaries, ErrorSummary, FormulaMode,
    GlobalSummary, OverlapRegion,
};
use crate::metrics::{best_candidate, f1_curve, F1Aggregation, F1Matrix};
use crate::util::{linspace, mean, quantile_sorted, sorted_copy, std_pop};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodTag {
    OurMethod,
    FedMinmax,
    FedMseStd,
    FedFiltered,
    LocalMinmax,
    Kqe,
    Iqr,
    Percentile,
    LargestMse,
    Pot,
    LocalMseStd,
}

impl MethodTag {
    pub const ALL: [MethodTag; 11] = [
        MethodTag::OurMethod,
        MethodTag::FedMinmax,
        MethodTag::FedMseStd,
        MethodTag::FedFiltered,
        MethodTag::LocalMinmax,
        MethodTag::Iqr,
        MethodTag::Percentile,
        MethodTag::Kqe,
        MethodTag::LargestMse,
        MethodTag::LocalMseStd,
        MethodTag::Pot,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodTag::OurMethod => "our_method",
            MethodTag::FedMinmax => "fed_minmax",
            MethodTag::FedMseStd => "fed_mse_std",
            MethodTag::FedFiltered => "fed_filtered",
            MethodTag::LocalMinmax => "local_minmax",
            MethodTag::Kqe => "kqe",
            MethodTag::Iqr => "iqr",
            MethodTag::Percentile => "percentile",
            MethodTag::LargestMse => "largest_mse",
            MethodTag::Pot => "pot",
            MethodTag::LocalMseStd => "local_mse_std",
        }
    }

    /// Row label used in the summary tables.
    pub fn display_name(self) -> &'static str {
        match self {
            MethodTag::OurMethod => "Our Method",
            MethodTag::FedMinmax => "Fed Threshold",
            MethodTag::FedMseStd => "Fed Mean MSE + StD",
            MethodTag::FedFiltered => "Fed Filtered Threshold",
            MethodTag::LocalMinmax => "Local Iterative",
            MethodTag::Iqr => "Local Inter Quantile Range",
            MethodTag::Percentile => "Local Percentile",
            MethodTag::Kqe => "Local Kernel Quantile Estimator",
            MethodTag::LargestMse => "Local Max MSE",
            MethodTag::LocalMseStd => "Local Mean MSE + Std",
            MethodTag::Pot => "Local Peak Over Threshold",
        }
    }

    /// One threshold shared by all clients.
    pub fn is_federated(self) -> bool {
        matches!(
            self,
            MethodTag::OurMethod | MethodTag::FedMinmax | MethodTag::FedMseStd | MethodTag::FedFiltered
        )
    }

    /// Whether the method looks at validation labels.
    pub fn uses_labels(self) -> bool {
        matches!(
            self,
            MethodTag::OurMethod | MethodTag::FedMinmax | MethodTag::LocalMinmax
        )
    }
}

impl fmt::Display for MethodTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodTag::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                let known: Vec<_> = MethodTag::ALL.iter().map(|m| m.as_str()).collect();
                Error::Config(format!("unknown method `{s}`; expected one of {}", known.join(", ")))
            })
    }
}

/// Tunable parameters for all methods.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MethodParams {
    pub candidates: usize,
    pub aggregation: F1Aggregation,
    pub formula_mode: FormulaMode,
    pub refine: bool,
    pub z_cut: f64,
    pub percentile: f64,
    pub kqe_q: f64,
    pub pot_u_quantile: f64,
    pub pot_risk: f64,
}

impl Default for MethodParams {
    fn default() -> Self {
        Self {
            candidates: 1000,
            aggregation: F1Aggregation::Mean,
            formula_mode: FormulaMode::ExactPooled,
            refine: false,
            z_cut: 1.5,
            percentile: 99.0,
            kqe_q: 0.99,
            pot_u_quantile: 0.98,
            pot_risk: 1e-3,
        }
    }
}

/// Everything the server derived while running the summary-statistics method.
#[derive(Debug, Clone, PartialEq)]
pub struct OurMethodOutcome {
    pub threshold: f64,
    pub score: f64,
    pub normal: GlobalSummary,
    pub anomaly: GlobalSummary,
    pub region: OverlapRegion,
    pub candidates: Vec<f64>,
}

/// Summary-statistics federated threshold.
///
/// Pools the per-class summaries, builds the overlap region, spreads `n`
/// candidates over it, asks every client for its F1 vector through
/// `client_eval`, and returns the candidate with the best aggregate F1.
/// `client_counts` are the clients' validation sizes, in the same order as
/// the rows `client_eval` returns.
pub fn our_method<F>(
    summaries: &[ClassSummaries],
    client_counts: &[usize],
    n: usize,
    aggregation: F1Aggregation,
    mode: FormulaMode,
    refine: bool,
    client_eval: F,
) -> Result<OurMethodOutcome>
where
    F: FnOnce(&[f64]) -> Vec<Vec<f64>>,
{
    if n < 2 {
        return Err(Error::invalid(format!("need at least 2 candidates, got {n}")));
    }
    let normals: Vec<ErrorSummary> = summaries.iter().filter_map(|s| s.normal).collect();
    let anomalies: Vec<ErrorSummary> = summaries.iter().filter_map(|s| s.anomaly).collect();
    if anomalies.is_empty() {
        return Err(Error::NoAnomalyStatistics);
    }
    if normals.is_empty() {
        return Err(Error::invalid("no client holds normal validation statistics"));
    }
    let normal = aggregate(&normals, mode)?;
    let anomaly = aggregate(&anomalies, mode)?;
    let region = overlap_region(&normal, &anomaly, refine);
    let candidates = generate_candidates(&region, n)?;

    let scores = client_eval(&candidates);
    let matrix = F1Matrix::new(candidates, scores, client_counts.to_vec())?;
    let (threshold, score) = crate::metrics::aggregate_f1(&matrix, aggregation);
    Ok(OurMethodOutcome {
        threshold,
        score,
        normal,
        anomaly,
        region,
        candidates: matrix.candidates,
    })
}

/// Candidates spread evenly between the global minimum and maximum error,
/// chosen by aggregate F1. Returns `(threshold, aggregate score)`.
pub fn fed_minmax<F>(
    global_min: f64,
    global_max: f64,
    n: usize,
    client_counts: &[usize],
    aggregation: F1Aggregation,
    client_eval: F,
) -> Result<(f64, f64)>
where
    F: FnOnce(&[f64]) -> Vec<Vec<f64>>,
{
    if !global_min.is_finite() || !global_max.is_finite() || global_min > global_max {
        return Err(Error::invalid(format!(
            "fed_minmax needs finite min <= max, got [{global_min}, {global_max}]"
        )));
    }
    if n < 2 {
        return Err(Error::invalid(format!("need at least 2 candidates, got {n}")));
    }
    // every error is identical; only one cut is distinguishable
    let candidates = if global_min == global_max {
        log::warn!("all errors equal {global_min}; fed_minmax uses a single candidate");
        vec![global_min]
    } else {
        linspace(global_min, global_max, n)
    };
    let scores = client_eval(&candidates);
    let matrix = F1Matrix::new(candidates, scores, client_counts.to_vec())?;
    Ok(crate::metrics::aggregate_f1(&matrix, aggregation))
}

/// Mean over clients of `mu_i + sigma_i` of their (label-blind) validation errors.
pub fn fed_mse_std(summaries: &[ErrorSummary]) -> Result<f64> {
    if summaries.is_empty() {
        return Err(Error::invalid("fed_mse_std needs at least one summary"));
    }
    Ok(summaries.iter().map(|s| s.mean + s.std()).sum::<f64>() / summaries.len() as f64)
}

/// Drops local thresholds whose population z-score exceeds `z_cut` in
/// magnitude and returns the largest survivor.
pub fn fed_filtered(local_thresholds: &[f64], z_cut: f64) -> Result<f64> {
    if local_thresholds.is_empty() {
        return Err(Error::invalid("fed_filtered needs at least one local threshold"));
    }
    let max_of = |it: &mut dyn Iterator<Item = f64>| it.fold(f64::NEG_INFINITY, f64::max);
    let m = mean(local_thresholds);
    let sd = std_pop(local_thresholds);
    if sd == 0.0 {
        return Ok(max_of(&mut local_thresholds.iter().copied()));
    }
    let kept = max_of(
        &mut local_thresholds
            .iter()
            .copied()
            .filter(|t| ((t - m) / sd).abs() <= z_cut),
    );
    if kept.is_finite() {
        Ok(kept)
    } else {
        Ok(max_of(&mut local_thresholds.iter().copied()))
    }
}

/// Local iterative search: `n` candidates between the client's smallest and
/// largest error, best local F1 wins (ties to the smallest).
pub fn local_minmax(errors: &[f64], labels: &[u8], n: usize) -> Result<f64> {
    if errors.len() != labels.len() {
        return Err(Error::invalid("errors and labels differ in length"));
    }
    let anomalies = labels.iter().filter(|&&l| l == 1).count();
    if anomalies == 0 || anomalies == labels.len() {
        return Err(Error::invalid("local_minmax needs both normal and anomalous samples"));
    }
    if n < 2 {
        return Err(Error::invalid(format!("need at least 2 candidates, got {n}")));
    }
    let lo = errors.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = errors.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let candidates = linspace(lo, hi, n);
    let scores = f1_curve(errors, labels, &candidates);
    Ok(best_candidate(&candidates, &scores).0)
}

fn non_empty(errors: &[f64], what: &str) -> Result<()> {
    if errors.is_empty() {
        Err(Error::invalid(format!("{what} needs at least one error value")))
    } else {
        Ok(())
    }
}

/// `Q3 + 1.5 * IQR` of normal validation errors.
pub fn iqr(errors: &[f64]) -> Result<f64> {
    non_empty(errors, "iqr")?;
    let s = sorted_copy(errors);
    let q1 = quantile_sorted(&s, 0.25);
    let q3 = quantile_sorted(&s, 0.75);
    Ok(q3 + 1.5 * (q3 - q1))
}

/// The `p`-th percentile (0-100) of normal validation errors.
pub fn percentile(errors: &[f64], p: f64) -> Result<f64> {
    non_empty(errors, "percentile")?;
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::invalid(format!("percentile must be in [0, 100], got {p}")));
    }
    Ok(quantile_sorted(&sorted_copy(errors), p / 100.0))
}

pub fn largest_mse(errors: &[f64]) -> Result<f64> {
    non_empty(errors, "largest_mse")?;
    Ok(errors.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

/// Mean plus population standard deviation of normal validation errors.
pub fn local_mse_std(errors: &[f64]) -> Result<f64> {
    non_empty(errors, "local_mse_std")?;
    Ok(mean(errors) + std_pop(errors))
}

/// Dispatches the label-free single-statistic local methods.
pub fn local_simple(method: MethodTag, errors: &[f64], params: &MethodParams) -> Result<f64> {
    match method {
        MethodTag::Iqr => iqr(errors),
        MethodTag::Percentile => percentile(errors, params.percentile),
        MethodTag::LargestMse => largest_mse(errors),
        MethodTag::LocalMseStd => local_mse_std(errors),
        other => Err(Error::invalid(format!("{other} is not a simple local method"))),
    }
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

fn sample_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Silverman's rule-of-thumb bandwidth `0.9 * min(sd, IQR/1.34) * n^(-1/5)`.
pub fn silverman_bandwidth(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n < 2 {
        return 0.0;
    }
    let sd = sample_std(sorted);
    let spread = (quantile_sorted(sorted, 0.75) - quantile_sorted(sorted, 0.25)) / 1.34;
    let scale = match (sd > 0.0, spread > 0.0) {
        (true, true) => sd.min(spread),
        (true, false) => sd,
        (false, true) => spread,
        (false, false) => 0.0,
    };
    0.9 * scale * (n as f64).powf(-0.2)
}

/// Kernel quantile estimate: a Gaussian-kernel-weighted average of the order
/// statistics around level `q`.
///
/// The data-scale Silverman bandwidth `h` (or `bandwidth`, when given) is
/// carried to the probability scale through the kernel density at the
/// empirical quantile. As `h -> 0` the estimate collapses onto the empirical
/// quantile.
pub fn kqe(errors: &[f64], q: f64, bandwidth: Option<f64>) -> Result<f64> {
    non_empty(errors, "kqe")?;
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::invalid(format!("kqe level must be in (0, 1), got {q}")));
    }
    let sorted = sorted_copy(errors);
    if sorted[0] == sorted[sorted.len() - 1] {
        warn!("kqe on constant input; returning the constant");
        return Ok(sorted[0]);
    }
    let h = bandwidth.unwrap_or_else(|| silverman_bandwidth(&sorted));
    let empirical = quantile_sorted(&sorted, q);
    let n = sorted.len() as f64;

    let density = if h > 0.0 {
        sorted
            .iter()
            .map(|x| {
                let z = (empirical - x) / h;
                (-0.5 * z * z).exp()
            })
            .sum::<f64>()
            / (n * h * (2.0 * std::f64::consts::PI).sqrt())
    } else {
        0.0
    };
    let h_prob = h * density;
    if !(h_prob > 1e-12) {
        return Ok(empirical);
    }

    let mut weighted = 0.0;
    let mut total = 0.0;
    let mut prev = std_normal_cdf((0.0 - q) / h_prob);
    for (i, x) in sorted.iter().enumerate() {
        let next = std_normal_cdf(((i + 1) as f64 / n - q) / h_prob);
        let w = next - prev;
        weighted += w * x;
        total += w;
        prev = next;
    }
    if total > 0.0 {
        Ok(weighted / total)
    } else {
        Ok(empirical)
    }
}

/// Generalized Pareto fit by the method of moments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpdFit {
    pub shape: f64,
    pub scale: f64,
}

pub const POT_MIN_EXCEEDANCES: usize = 8;

/// Peaks-over-threshold: fit a Generalized Pareto tail above the
/// `u_quantile` empirical quantile and return the error level exceeded with
/// probability `risk`.
pub fn pot(errors: &[f64], u_quantile: f64, risk: f64) -> Result<f64> {
    non_empty(errors, "pot")?;
    if !(u_quantile > 0.0 && u_quantile < 1.0) || !(risk > 0.0 && risk < 1.0) {
        return Err(Error::invalid("pot needs u_quantile and risk in (0, 1)"));
    }
    let sorted = sorted_copy(errors);
    let u = quantile_sorted(&sorted, u_quantile);
    let excess: Vec<f64> = sorted.iter().filter(|&&e| e > u).map(|e| e - u).collect();
    if excess.len() < POT_MIN_EXCEEDANCES {
        return Err(Error::InsufficientTail {
            exceedances: excess.len(),
            required: POT_MIN_EXCEEDANCES,
        });
    }
    let m = mean(&excess);
    let v = std_pop(&excess).powi(2);
    if v <= 0.0 {
        warn!("pot: exceedances have zero variance; falling back to the maximum error");
        return Ok(sorted[sorted.len() - 1]);
    }
    let ratio = m * m / v;
    let fit = GpdFit {
        shape: 0.5 * (1.0 - ratio),
        scale: 0.5 * m * (1.0 + ratio),
    };
    let n = errors.len() as f64;
    let n_u = excess.len() as f64;
    let r = risk * n / n_u;
    if fit.shape.abs() < 1e-6 {
        Ok(u + fit.scale * (n_u / (risk * n)).ln())
    } else {
        Ok(u + fit.scale / fit.shape * (r.powf(-fit.shape) - 1.0))
    }
}

/// 1 where the error is strictly above the threshold.
pub fn classify(errors: &[f64], threshold: f64) -> Vec<u8> {
    errors.iter().map(|&e| u8::from(e > threshold)).collect()
}
