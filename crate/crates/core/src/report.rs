//! CSV and plain-text artifacts produced from result rows.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::error_stats::csv_err;
use crate::federation::RoundLogEntry;
use crate::harness::{FollowupOutput, ResultRow};
use crate::metrics::{write_correlation_csv, write_stat_features_csv, STAT_FEATURE_COLUMNS};
use crate::thresholds::{MethodTag, OurMethodOutcome};

fn to_bytes<F>(build: F) -> Result<Vec<u8>>
where
    F: FnOnce(&mut csv::Writer<&mut Vec<u8>>) -> Result<()>,
{
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        build(&mut w)?;
        w.flush().map_err(|e| Error::io("<buffer>", e))?;
    }
    Ok(buf)
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf> {
    let path = dir.join(name);
    std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// `results.csv` bytes. Wall time lives in `timing.csv` so that this file is
/// byte-identical across runs of the same configuration.
pub fn results_csv(rows: &[ResultRow]) -> Result<Vec<u8>> {
    to_bytes(|w| {
        w.write_record([
            "scenario_id",
            "dataset",
            "scheme",
            "num_clients",
            "corrupt_clients",
            "method",
            "client_id",
            "split",
            "f1",
            "threshold",
            "config_hash",
        ])
        .map_err(csv_err)?;
        for r in rows {
            w.write_record([
                r.scenario_id.as_str(),
                &r.dataset,
                &r.scheme,
                &r.num_clients.to_string(),
                &r.corrupt_clients.to_string(),
                r.method.as_str(),
                &r.client_id,
                &r.split,
                &r.f1.to_string(),
                &r.threshold.to_string(),
                &r.config_hash,
            ])
            .map_err(csv_err)?;
        }
        Ok(())
    })
}

fn globals(rows: &[ResultRow]) -> impl Iterator<Item = &ResultRow> {
    rows.iter().filter(|r| r.is_global())
}

fn timing_csv(rows: &[ResultRow]) -> Result<Vec<u8>> {
    to_bytes(|w| {
        w.write_record([
            "scenario_id",
            "dataset",
            "scheme",
            "num_clients",
            "corrupt_clients",
            "method",
            "federated",
            "total_ms",
            "per_client_ms",
        ])
        .map_err(csv_err)?;
        for r in globals(rows) {
            w.write_record([
                r.scenario_id.as_str(),
                &r.dataset,
                &r.scheme,
                &r.num_clients.to_string(),
                &r.corrupt_clients.to_string(),
                r.method.as_str(),
                &r.method.is_federated().to_string(),
                &format!("{:.6}", r.wall_time_ms),
                &format!("{:.6}", r.wall_time_ms / r.num_clients as f64),
            ])
            .map_err(csv_err)?;
        }
        Ok(())
    })
}

/// Per-client F1 for box plots across distributions.
fn f1_by_client_csv(rows: &[ResultRow]) -> Result<Vec<u8>> {
    to_bytes(|w| {
        w.write_record(["dataset", "scheme", "num_clients", "method", "client_id", "f1"])
            .map_err(csv_err)?;
        for r in rows.iter().filter(|r| !r.is_global()) {
            w.write_record([
                r.dataset.as_str(),
                &r.scheme,
                &r.num_clients.to_string(),
                r.method.as_str(),
                &r.client_id,
                &r.f1.to_string(),
            ])
            .map_err(csv_err)?;
        }
        Ok(())
    })
}

/// Global F1 against an integer x-axis taken from each row.
fn f1_against(rows: &[ResultRow], axis: &str, x: fn(&ResultRow) -> usize) -> Result<Vec<u8>> {
    to_bytes(|w| {
        w.write_record(["dataset", "scheme", axis, "method", "f1"]).map_err(csv_err)?;
        for r in globals(rows) {
            w.write_record([
                r.dataset.as_str(),
                &r.scheme,
                &x(r).to_string(),
                r.method.as_str(),
                &r.f1.to_string(),
            ])
            .map_err(csv_err)?;
        }
        Ok(())
    })
}

fn column_key(r: &ResultRow, multi_scheme: bool) -> String {
    if multi_scheme {
        format!("{} ({})", r.dataset, r.scheme)
    } else {
        r.dataset.clone()
    }
}

/// Method-by-dataset table of average global F1.
pub fn summary_table(rows: &[ResultRow]) -> String {
    let schemes: std::collections::BTreeSet<&str> = globals(rows).map(|r| r.scheme.as_str()).collect();
    let multi = schemes.len() > 1;
    let mut columns: Vec<String> = Vec::new();
    let mut cells: BTreeMap<(MethodTag, String), (f64, usize)> = BTreeMap::new();
    let mut methods: Vec<MethodTag> = Vec::new();
    for r in globals(rows) {
        let key = column_key(r, multi);
        if !columns.contains(&key) {
            columns.push(key.clone());
        }
        if !methods.contains(&r.method) {
            methods.push(r.method);
        }
        let cell = cells.entry((r.method, key)).or_insert((0.0, 0));
        cell.0 += r.f1;
        cell.1 += 1;
    }
    methods.sort_by_key(|m| MethodTag::ALL.iter().position(|x| x == m));

    let name_width = methods
        .iter()
        .map(|m| m.display_name().len())
        .max()
        .unwrap_or(6)
        .max("Method".len());
    let widths: Vec<usize> = columns.iter().map(|c| c.len().max(6)).collect();
    let mut out = String::new();
    let _ = write!(out, "{:<name_width$}", "Method");
    for (c, w) in columns.iter().zip(&widths) {
        let _ = write!(out, "  {c:>w$}");
    }
    out.push('\n');
    let rule = name_width + widths.iter().map(|w| w + 2).sum::<usize>();
    out.push_str(&"-".repeat(rule));
    out.push('\n');
    for m in methods {
        let _ = write!(out, "{:<name_width$}", m.display_name());
        for (c, w) in columns.iter().zip(&widths) {
            match cells.get(&(m, c.clone())) {
                Some((sum, k)) => {
                    let _ = write!(out, "  {:>w$.4}", sum / *k as f64);
                }
                None => {
                    let _ = write!(out, "  {:>w$}", "-");
                }
            }
        }
        out.push('\n');
    }
    out
}

/// Writes `results.csv`, `timing.csv`, the per-figure CSVs and `summary.txt`
/// into `dir`. Returns the written paths. Empty input is rejected before
/// anything touches the disk.
pub fn emit_report(rows: &[ResultRow], dir: &Path) -> Result<Vec<PathBuf>> {
    if rows.is_empty() {
        return Err(Error::invalid("no result rows to report"));
    }
    let files: Vec<(&str, Vec<u8>)> = vec![
        ("results.csv", results_csv(rows)?),
        ("timing.csv", timing_csv(rows)?),
        ("f1_by_client.csv", f1_by_client_csv(rows)?),
        ("f1_vs_clients.csv", f1_against(rows, "num_clients", |r| r.num_clients)?),
        ("f1_vs_corruption.csv", f1_against(rows, "corrupt_clients", |r| r.corrupt_clients)?),
        ("summary.txt", summary_table(rows).into_bytes()),
    ];
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    files
        .iter()
        .map(|(name, bytes)| write_file(dir, name, bytes))
        .collect()
}

/// Round log with columns `round,client_id,local_final_mse,wall_time_ms`.
pub fn write_round_log<W: Write>(log: &[RoundLogEntry], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["round", "client_id", "local_final_mse", "wall_time_ms"])
        .map_err(csv_err)?;
    for e in log {
        w.write_record([
            e.round.to_string(),
            e.client_id.to_string(),
            e.local_final_mse.to_string(),
            format!("{:.3}", e.wall_time_ms),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("<round log>", e))
}

/// Global class statistics and the candidate interval of one run.
pub fn write_overlap_csv<W: Write>(label: &str, o: &OurMethodOutcome, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "scenario", "class", "mean", "variance", "skewness", "kurtosis", "count", "lower", "upper",
        "degenerate", "threshold",
    ])
    .map_err(csv_err)?;
    for (class, g) in [("normal", &o.normal), ("anomaly", &o.anomaly)] {
        w.write_record([
            label.to_string(),
            class.to_string(),
            g.mean.to_string(),
            g.variance.to_string(),
            g.skewness.to_string(),
            g.kurtosis.to_string(),
            g.count.to_string(),
            o.region.lower.to_string(),
            o.region.upper.to_string(),
            o.region.degenerate.to_string(),
            o.threshold.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("<overlap csv>", e))
}

/// `stat_features.csv` and `correlation.csv` for the follow-up study.
pub fn emit_followup(out: &FollowupOutput, dir: &Path) -> Result<Vec<PathBuf>> {
    if out.rows.is_empty() {
        return Err(Error::invalid("no follow-up rows to write"));
    }
    let mut features = Vec::new();
    write_stat_features_csv(&out.rows, &mut features)?;
    let mut corr = Vec::new();
    write_correlation_csv(&out.correlation, &STAT_FEATURE_COLUMNS, &mut corr)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(vec![
        write_file(dir, "stat_features.csv", &features)?,
        write_file(dir, "correlation.csv", &corr)?,
    ])
}
