//! Reconstruction-error summary statistics.
//!
//! Clients reduce their validation errors to an [`ErrorSummary`] per class
//! (mean, variance, skewness, kurtosis, count). Only these five-tuples reach
//! the server, which pools them into a [`GlobalSummary`] per class, derives
//! the interval where the normal and anomalous error distributions overlap,
//! and spreads candidate thresholds across it.
//!
//! All moments use the population convention; kurtosis is Pearson
//! (a normal distribution has kurtosis 3).

use std::io::{Read, Write};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::linspace;

/// Moments of one client's errors for one class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub mean: f64,
    pub variance: f64,
    pub skewness: f64,
    pub kurtosis: f64,
    pub count: usize,
    /// Set when fewer than 3 samples or zero variance.
    pub degenerate_skewness: bool,
    /// Set when fewer than 4 samples or zero variance.
    pub degenerate_kurtosis: bool,
}

impl ErrorSummary {
    /// Builds a summary from already-known moments (e.g. a decoded wire record).
    pub fn from_moments(mean: f64, variance: f64, skewness: f64, kurtosis: f64, count: usize) -> Self {
        let flat = variance <= 0.0;
        Self {
            mean,
            variance,
            skewness: if flat { 0.0 } else { skewness },
            kurtosis: if flat { 0.0 } else { kurtosis },
            count,
            degenerate_skewness: flat || count < 3,
            degenerate_kurtosis: flat || count < 4,
        }
    }

    pub fn std(&self) -> f64 {
        self.variance.sqrt()
    }

    /// Zero variance: skewness and kurtosis carry no information.
    pub fn is_flat(&self) -> bool {
        self.variance <= 0.0
    }

    /// Central moment sums `(M2, M3, M4)` where `Mk = n * m_k`.
    fn central_sums(&self) -> (f64, f64, f64) {
        let n = self.count as f64;
        let m2 = self.variance;
        if m2 <= 0.0 {
            return (0.0, 0.0, 0.0);
        }
        let s = m2.sqrt();
        (n * m2, n * self.skewness * s * m2, n * self.kurtosis * m2 * m2)
    }
}

/// Population moments of `errors`.
pub fn summarize(errors: &[f64]) -> Result<ErrorSummary> {
    if errors.is_empty() {
        return Err(Error::invalid("cannot summarize an empty error vector"));
    }
    if errors.iter().all(|&e| e == errors[0]) {
        return Ok(ErrorSummary::from_moments(errors[0], 0.0, 0.0, 0.0, errors.len()));
    }
    let n = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / n;
    let (mut s2, mut s3, mut s4) = (0.0, 0.0, 0.0);
    for &e in errors {
        let d = e - mean;
        let d2 = d * d;
        s2 += d2;
        s3 += d2 * d;
        s4 += d2 * d2;
    }
    let m2 = s2 / n;
    if m2 <= 0.0 {
        return Ok(ErrorSummary::from_moments(mean, 0.0, 0.0, 0.0, errors.len()));
    }
    let skewness = (s3 / n) / m2.powf(1.5);
    let kurtosis = (s4 / n) / (m2 * m2);
    Ok(ErrorSummary::from_moments(mean, m2, skewness, kurtosis, errors.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorClass {
    Normal,
    Anomaly,
}

impl ErrorClass {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorClass::Normal => "normal",
            ErrorClass::Anomaly => "anomaly",
        }
    }
}

/// A client's summaries split by ground-truth label.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClassSummaries {
    pub normal: Option<ErrorSummary>,
    pub anomaly: Option<ErrorSummary>,
}

impl ClassSummaries {
    /// Splits `errors` by `labels` (1 = anomaly) and summarizes each class
    /// that has at least one sample.
    pub fn from_labeled(errors: &[f64], labels: &[u8]) -> Result<Self> {
        if errors.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} errors but {} labels",
                errors.len(),
                labels.len()
            )));
        }
        let (mut normal, mut anomaly) = (Vec::new(), Vec::new());
        for (&e, &l) in errors.iter().zip(labels) {
            if l == 1 {
                anomaly.push(e);
            } else {
                normal.push(e);
            }
        }
        let summarize_opt = |v: &[f64]| (!v.is_empty()).then(|| summarize(v)).transpose();
        Ok(Self {
            normal: summarize_opt(&normal)?,
            anomaly: summarize_opt(&anomaly)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormulaMode {
    /// Weighted formulas exactly as printed in the method description,
    /// including the `sqrt(N_i)` and `N_i` factors on skewness and kurtosis.
    Paper,
    /// Exact pooled central moments.
    #[default]
    ExactPooled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalSummary {
    pub mean: f64,
    pub variance: f64,
    pub skewness: f64,
    pub kurtosis: f64,
    pub count: usize,
    pub mode: FormulaMode,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl GlobalSummary {
    pub fn std(&self) -> f64 {
        self.variance.sqrt()
    }

    /// Hand-built summary, mostly for tests and examples.
    pub fn from_parts(mean: f64, variance: f64, skewness: f64, kurtosis: f64, count: usize) -> Self {
        Self {
            mean,
            variance,
            skewness,
            kurtosis,
            count,
            mode: FormulaMode::ExactPooled,
            warnings: Vec::new(),
        }
    }
}

/// Pools per-client summaries of one class into global statistics.
pub fn aggregate(summaries: &[ErrorSummary], mode: FormulaMode) -> Result<GlobalSummary> {
    if summaries.is_empty() {
        return Err(Error::invalid("cannot aggregate an empty list of summaries"));
    }
    if summaries.iter().any(|s| s.count == 0) {
        return Err(Error::invalid("every summary needs a count of at least 1"));
    }
    let total: usize = summaries.iter().map(|s| s.count).sum();
    let n_total = total as f64;

    let mean = summaries
        .iter()
        .map(|s| s.count as f64 * s.mean)
        .sum::<f64>()
        / n_total;
    let variance = summaries
        .iter()
        .map(|s| {
            let d = s.mean - mean;
            s.count as f64 * (s.variance + d * d)
        })
        .sum::<f64>()
        / n_total;

    let mut warnings = Vec::new();
    let (skewness, kurtosis) = if variance <= 0.0 {
        (0.0, 0.0)
    } else {
        match mode {
            FormulaMode::Paper => {
                let sigma_g = variance.sqrt();
                let (mut s_num, mut k_num) = (0.0, 0.0);
                for (i, s) in summaries.iter().enumerate() {
                    if s.is_flat() {
                        let msg = format!(
                            "summary {i} has zero variance; its skewness/kurtosis terms are skipped"
                        );
                        warn!("{msg}");
                        warnings.push(msg);
                        continue;
                    }
                    let n = s.count as f64;
                    let ratio = sigma_g / s.std();
                    s_num += n * s.skewness * n.sqrt() * ratio.powi(3);
                    k_num += n * s.kurtosis * n * ratio.powi(4);
                }
                (s_num / n_total, k_num / n_total)
            }
            FormulaMode::ExactPooled => {
                let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
                for s in summaries {
                    let n = s.count as f64;
                    let d = s.mean - mean;
                    let (c2, c3, c4) = s.central_sums();
                    m2 += c2 + n * d * d;
                    m3 += c3 + 3.0 * d * c2 + n * d * d * d;
                    m4 += c4 + 4.0 * d * c3 + 6.0 * d * d * c2 + n * d * d * d * d;
                }
                let (m2, m3, m4) = (m2 / n_total, m3 / n_total, m4 / n_total);
                if m2 <= 0.0 {
                    (0.0, 0.0)
                } else {
                    (m3 / m2.powf(1.5), m4 / (m2 * m2))
                }
            }
        }
    };

    Ok(GlobalSummary {
        mean,
        variance,
        skewness,
        kurtosis,
        count: total,
        mode,
        warnings,
    })
}

/// Interval of error values where the normal and anomaly distributions meet.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapRegion {
    pub lower: f64,
    pub upper: f64,
    /// The raw `mu +/- 3 sigma` bands did not intersect; `lower`/`upper` then
    /// span the gap between the two bands instead.
    pub degenerate: bool,
}

impl OverlapRegion {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lower && x <= self.upper
    }
}

/// `(low, high)` band of one distribution: `mu -/+ 3 sigma`, optionally
/// shifted toward the long tail by skewness and widened by excess kurtosis
/// with a Cornish-Fisher-style correction at z = 3.
fn band(s: &GlobalSummary, refine: bool) -> (f64, f64) {
    let sigma = s.std();
    let (mut lo, mut hi) = (s.mean - 3.0 * sigma, s.mean + 3.0 * sigma);
    if refine && sigma > 0.0 {
        // (z^2 - 1) * S / 6 at z = 3
        let shift = sigma * s.skewness * 8.0 / 6.0;
        let widen = 3.0 * sigma * ((s.kurtosis - 3.0) / 24.0).max(0.0);
        lo += shift - widen;
        hi += shift + widen;
    }
    (lo, hi)
}

/// Lower bound is the larger of the two band floors, upper bound the smaller
/// of the two band ceilings. When those cross, the region is flagged
/// degenerate and becomes the gap between the bands, so candidates still lie
/// between the two distributions.
pub fn overlap_region(normal: &GlobalSummary, anomaly: &GlobalSummary, refine: bool) -> OverlapRegion {
    let (n_lo, n_hi) = band(normal, refine);
    let (a_lo, a_hi) = band(anomaly, refine);
    let lower = n_lo.max(a_lo);
    let upper = n_hi.min(a_hi);
    if lower < upper {
        OverlapRegion {
            lower,
            upper,
            degenerate: false,
        }
    } else {
        OverlapRegion {
            lower: upper,
            upper: lower,
            degenerate: true,
        }
    }
}

/// `n` evenly spaced thresholds over the region, both endpoints included.
/// A zero-width region yields its single point.
pub fn generate_candidates(region: &OverlapRegion, n: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::invalid(format!("need at least 2 candidates, got {n}")));
    }
    if !region.lower.is_finite() || !region.upper.is_finite() || region.lower > region.upper {
        return Err(Error::invalid(format!(
            "invalid region [{}, {}]",
            region.lower, region.upper
        )));
    }
    if region.width() == 0.0 {
        warn!("zero-width overlap region at {}; using a single candidate", region.lower);
        return Ok(vec![region.lower]);
    }
    let mut out = linspace(region.lower, region.upper, n);
    out.dedup();
    Ok(out)
}

/// One client-to-server summary payload.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub client_id: usize,
    pub class: ErrorClass,
    pub mean: f64,
    pub variance: f64,
    pub skewness: f64,
    pub kurtosis: f64,
    pub count: usize,
}

impl SummaryRecord {
    pub fn new(client_id: usize, class: ErrorClass, s: &ErrorSummary) -> Self {
        Self {
            client_id,
            class,
            mean: s.mean,
            variance: s.variance,
            skewness: s.skewness,
            kurtosis: s.kurtosis,
            count: s.count,
        }
    }

    pub fn summary(&self) -> ErrorSummary {
        ErrorSummary::from_moments(self.mean, self.variance, self.skewness, self.kurtosis, self.count)
    }

    /// Scalars carried on the wire (everything except the routing fields).
    pub const SCALARS: usize = 5;
}

/// Writes records as CSV with header
/// `client_id,class,mean,variance,skewness,kurtosis,count`.
pub fn write_summary_csv<W: Write>(records: &[SummaryRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("<summary csv>", e))
}

pub fn read_summary_csv<R: Read>(input: R) -> Result<Vec<SummaryRecord>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize()
        .enumerate()
        .map(|(i, rec)| {
            rec.map_err(|e| Error::Parse {
                row: i + 2,
                col: 0,
                msg: e.to_string(),
            })
        })
        .collect()
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io("<csv>", io),
        other => Error::invalid(format!("csv: {other:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-300)
    }

    #[test]
    fn two_point_moments() {
        let s = summarize(&[0.0, 2.0]).unwrap();
        assert_eq!((s.mean, s.variance, s.skewness, s.kurtosis), (1.0, 1.0, 0.0, 1.0));
        assert!(s.degenerate_skewness && s.degenerate_kurtosis);
    }

    #[test]
    fn constant_vector_is_degenerate() {
        let s = summarize(&[0.7, 0.7, 0.7]).unwrap();
        assert_eq!(s.mean, 0.7);
        assert_eq!(s.variance, 0.0);
        assert_eq!((s.skewness, s.kurtosis), (0.0, 0.0));
        assert!(s.degenerate_skewness && s.degenerate_kurtosis);
    }

    #[test]
    fn empty_is_error() {
        assert!(summarize(&[]).is_err());
    }

    #[test]
    fn standard_normal_shape() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
        let xs: Vec<f64> = (0..100_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let s = summarize(&xs).unwrap();
        assert!(s.skewness.abs() <= 0.05, "skewness {}", s.skewness);
        assert!((2.9..=3.1).contains(&s.kurtosis), "kurtosis {}", s.kurtosis);
    }

    #[test]
    fn aggregate_worked_example() {
        let a = ErrorSummary::from_moments(1.0, 1.0, 0.0, 1.0, 2);
        let b = ErrorSummary::from_moments(4.0, 0.0, 0.0, 0.0, 1);
        for mode in [FormulaMode::Paper, FormulaMode::ExactPooled] {
            let g = aggregate(&[a, b], mode).unwrap();
            assert!(close(g.mean, 2.0, 1e-15));
            assert!(close(g.variance, 8.0 / 3.0, 1e-15));
            assert_eq!(g.count, 3);
        }
        // exact pooled skewness of {0, 2, 4} is zero, kurtosis 1.5
        let g = aggregate(&[a, b], FormulaMode::ExactPooled).unwrap();
        assert!(g.skewness.abs() < 1e-12);
        assert!(close(g.kurtosis, 1.5, 1e-12));
        let p = aggregate(&[a, b], FormulaMode::Paper).unwrap();
        assert_eq!(p.warnings.len(), 1);
    }

    #[test]
    fn single_summary_passes_through() {
        let s = summarize(&[0.1, 0.5, 0.2, 0.9, 0.4]).unwrap();
        for mode in [FormulaMode::Paper, FormulaMode::ExactPooled] {
            let g = aggregate(&[s], mode).unwrap();
            assert_eq!(g.mean, s.mean);
            assert!(close(g.variance, s.variance, 1e-15));
        }
        let g = aggregate(&[s], FormulaMode::ExactPooled).unwrap();
        assert!(close(g.skewness, s.skewness, 1e-12));
        assert!(close(g.kurtosis, s.kurtosis, 1e-12));
    }

    #[test]
    fn paper_mode_scales_with_count_for_identical_clients() {
        let s = summarize(&[0.1, 0.5, 0.2, 0.9, 0.4]).unwrap();
        let k = [s; 4];
        let p = aggregate(&k, FormulaMode::Paper).unwrap();
        let e = aggregate(&k, FormulaMode::ExactPooled).unwrap();
        assert!(close(p.mean, s.mean, 1e-15) && close(p.variance, s.variance, 1e-15));
        assert!(close(e.skewness, s.skewness, 1e-12));
        // the printed formulas multiply by sqrt(N_i) and N_i respectively
        assert!(close(p.skewness, s.skewness * 5f64.sqrt(), 1e-12));
        assert!(close(p.kurtosis, s.kurtosis * 5.0, 1e-12));
    }

    #[test]
    fn overlap_examples() {
        let g = |m: f64, sd: f64| GlobalSummary::from_parts(m, sd * sd, 0.0, 3.0, 10);
        let r = overlap_region(&g(1.0, 0.5), &g(5.0, 1.0), false);
        assert_eq!((r.lower, r.upper, r.degenerate), (2.0, 2.5, false));
        let r = overlap_region(&g(0.0, 1.0), &g(0.0, 1.0), false);
        assert_eq!((r.lower, r.upper), (-3.0, 3.0));
        let r = overlap_region(&g(0.0, 0.1), &g(10.0, 0.1), false);
        assert!(r.degenerate);
        assert!(close(r.lower, 0.3, 1e-12) && close(r.upper, 9.7, 1e-12));
    }

    #[test]
    fn refine_shifts_toward_long_tail() {
        let n = GlobalSummary::from_parts(1.0, 0.25, 1.5, 3.0, 100);
        let a = GlobalSummary::from_parts(2.0, 0.25, 0.0, 3.0, 100);
        let plain = overlap_region(&n, &a, false);
        let refined = overlap_region(&n, &a, true);
        assert!(refined.upper > plain.upper);
        // zero skew and normal kurtosis leave a band untouched
        assert_eq!(band(&a, true), band(&a, false));
        let heavy = GlobalSummary::from_parts(2.0, 0.25, 0.0, 9.0, 100);
        let (lo, hi) = band(&heavy, true);
        assert!(lo < 0.5 && hi > 3.5);
    }

    #[test]
    fn candidate_generation() {
        let r = OverlapRegion { lower: 0.0, upper: 1.0, degenerate: false };
        assert_eq!(generate_candidates(&r, 3).unwrap(), vec![0.0, 0.5, 1.0]);
        let r = OverlapRegion { lower: 2.0, upper: 2.5, degenerate: false };
        let c = generate_candidates(&r, 1000).unwrap();
        assert_eq!((c.len(), c[0], c[999]), (1000, 2.0, 2.5));
        assert!(close(c[1] - c[0], 0.5 / 999.0, 1e-9));
        let z = OverlapRegion { lower: 1.5, upper: 1.5, degenerate: true };
        assert_eq!(generate_candidates(&z, 10).unwrap(), vec![1.5]);
        assert!(generate_candidates(&r, 1).is_err());
    }

    #[test]
    fn summary_csv_round_trip() {
        let s = summarize(&[0.12, 0.5, 0.33, 0.91]).unwrap();
        let recs = vec![
            SummaryRecord::new(0, ErrorClass::Normal, &s),
            SummaryRecord::new(3, ErrorClass::Anomaly, &s),
        ];
        let mut buf = Vec::new();
        write_summary_csv(&recs, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("client_id,class,mean,variance,skewness,kurtosis,count\n"));
        assert_eq!(read_summary_csv(&buf[..]).unwrap(), recs);
    }

    proptest! {
        #[test]
        fn pooled_matches_concatenation(
            values in prop::collection::vec(0.0f64..10.0, 3..300),
            cuts in prop::collection::vec(any::<prop::sample::Index>(), 0..6),
        ) {
            let mut idx: Vec<usize> = cuts.iter().map(|c| c.index(values.len())).collect();
            idx.push(0);
            idx.push(values.len());
            idx.sort_unstable();
            idx.dedup();
            let parts: Vec<ErrorSummary> = idx
                .windows(2)
                .map(|w| summarize(&values[w[0]..w[1]]).unwrap())
                .collect();
            let whole = summarize(&values).unwrap();
            let pooled = aggregate(&parts, FormulaMode::ExactPooled).unwrap();
            let paper = aggregate(&parts, FormulaMode::Paper).unwrap();
            prop_assert!(close(pooled.mean, whole.mean, 1e-9));
            prop_assert!(close(pooled.variance, whole.variance, 1e-9));
            prop_assert!((pooled.skewness - whole.skewness).abs() <= 1e-9 * whole.skewness.abs().max(1e-3));
            prop_assert!(close(pooled.kurtosis, whole.kurtosis, 1e-9));
            prop_assert_eq!(paper.mean, pooled.mean);
            prop_assert_eq!(paper.variance, pooled.variance);
        }

        #[test]
        fn overlap_symmetric_without_refine(
            m1 in -5.0f64..5.0, s1 in 0.01f64..3.0, m2 in -5.0f64..5.0, s2 in 0.01f64..3.0,
        ) {
            let a = GlobalSummary::from_parts(m1, s1 * s1, 0.0, 3.0, 5);
            let b = GlobalSummary::from_parts(m2, s2 * s2, 0.0, 3.0, 5);
            prop_assert_eq!(overlap_region(&a, &b, false), overlap_region(&b, &a, false));
        }

        #[test]
        fn candidates_strictly_increasing(lo in -10.0f64..10.0, width in 1e-6f64..10.0, n in 2usize..2000) {
            let r = OverlapRegion { lower: lo, upper: lo + width, degenerate: false };
            let c = generate_candidates(&r, n).unwrap();
            prop_assert!(c.windows(2).all(|w| w[0] < w[1]));
            prop_assert_eq!(c[0], lo);
            prop_assert_eq!(*c.last().unwrap(), lo + width);
        }
    }
}
