//! Dataset ingestion, scaling, train/validation/test splitting, client
//! partitioning (even, non-IID k-means, Dirichlet-random), synthetic data and
//! corrupt-client injection.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use log::{info, warn};
use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::error_stats::csv_err;
use crate::federation::{ClientState, LabeledData};
use crate::util::mix_seed;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    /// 1 = anomaly.
    pub labels: Vec<u8>,
    pub feature_names: Vec<String>,
    pub name: String,
    /// Original class value per row, kept for multi-class sources.
    pub classes: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<u8>, name: impl Into<String>) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::invalid(format!(
                "{} rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        let feature_names = (0..features.ncols()).map(|j| format!("x{j}")).collect();
        Ok(Self {
            features,
            labels,
            feature_names,
            name: name.into(),
            classes: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn anomaly_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    fn labeled_subset(&self, idx: &[usize]) -> LabeledData {
        LabeledData {
            features: self.features.select(Axis(0), idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Shapes of the public benchmark datasets: (rows, anomalies, dims).
const KNOWN_SHAPES: [(&str, usize, usize, usize); 3] = [
    ("shuttle", 49_097, 3_511, 9),
    ("covertype", 581_012, 2_747, 10),
    ("creditcard", 284_807, 492, 29),
];

/// Reads a headered numeric CSV. `positive_label` selects the anomaly class;
/// `None` picks the rarest class.
pub fn load_csv(path: &Path, label_column: &str, positive_label: Option<&str>) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let headers = reader.headers().map_err(csv_err)?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h.trim() == label_column)
        .ok_or_else(|| Error::Parse {
            row: 1,
            col: 0,
            msg: format!("missing label column `{label_column}`"),
        })?;
    let feature_names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != label_idx)
        .map(|(_, h)| h.trim().to_string())
        .collect();

    let mut flat = Vec::new();
    let mut classes = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let row = r + 2;
        let record = record.map_err(|e| Error::Parse {
            row,
            col: 0,
            msg: e.to_string(),
        })?;
        if record.len() != headers.len() {
            return Err(Error::Parse {
                row,
                col: record.len() + 1,
                msg: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        for (c, cell) in record.iter().enumerate() {
            if c == label_idx {
                classes.push(cell.trim().to_string());
                continue;
            }
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                row,
                col: c + 1,
                msg: format!("non-numeric cell `{cell}`"),
            })?;
            flat.push(v);
        }
    }

    let n = classes.len();
    let features = Array2::from_shape_vec((n, feature_names.len()), flat)
        .map_err(|e| Error::invalid(e.to_string()))?;

    let positive = match positive_label {
        Some(p) => p.to_string(),
        None => rarest_class(&classes)
            .ok_or_else(|| Error::invalid("cannot pick an anomaly class from an empty file"))?,
    };
    let matches = |c: &str| {
        c == positive
            || matches!((c.parse::<f64>(), positive.parse::<f64>()), (Ok(a), Ok(b)) if a == b)
    };
    let labels: Vec<u8> = classes.iter().map(|c| u8::from(matches(c))).collect();

    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    let ds = Dataset {
        features,
        labels,
        feature_names,
        name,
        classes: Some(classes),
    };
    info!(
        "loaded {}: {} rows, {} anomalies, {} features",
        ds.name,
        ds.len(),
        ds.anomaly_count(),
        ds.dim()
    );
    check_known_shape(&ds);
    Ok(ds)
}

fn rarest_class(classes: &[String]) -> Option<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for c in classes {
        *counts.entry(c.as_str()).or_default() += 1;
    }
    counts
        .into_iter()
        .min_by_key(|&(_, n)| n)
        .map(|(c, _)| c.to_string())
}

/// Compares a loaded dataset with the published shape of a known benchmark.
/// Returns `Some(true)` on a match, `Some(false)` on a mismatch and `None`
/// when the name is not recognised.
pub fn check_known_shape(ds: &Dataset) -> Option<bool> {
    let key = ds.name.to_lowercase().replace(['_', '-', ' '], "");
    let &(name, rows, anomalies, dims) = KNOWN_SHAPES.iter().find(|(n, ..)| key.contains(n))?;
    let ok = ds.len() == rows && ds.anomaly_count() == anomalies && ds.dim() == dims;
    if !ok {
        warn!(
            "{name}: expected {rows} rows / {anomalies} anomalies / {dims} dims, got {} / {} / {}",
            ds.len(),
            ds.anomaly_count(),
            ds.dim()
        );
    }
    Some(ok)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMethod {
    #[default]
    Minmax,
    Zscore,
}

/// Per-feature affine map `(x - offset) * factor`.
#[derive(Debug, Clone, PartialEq)]
pub struct Scaler {
    pub method: ScaleMethod,
    pub offset: Vec<f64>,
    pub factor: Vec<f64>,
}

impl Scaler {
    /// Fits on the given rows. Constant features get factor 0 and map to 0.
    pub fn fit(data: ArrayView2<f64>, rows: &[usize], method: ScaleMethod) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::invalid("scaler needs at least one fitting row"));
        }
        let fit = data.select(Axis(0), rows);
        let (offset, factor) = fit
            .columns()
            .into_iter()
            .map(|col| match method {
                ScaleMethod::Minmax => {
                    let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    (lo, if hi > lo { 1.0 / (hi - lo) } else { 0.0 })
                }
                ScaleMethod::Zscore => {
                    let n = col.len() as f64;
                    let m = col.sum() / n;
                    let sd = (col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt();
                    (m, if sd > 0.0 { 1.0 / sd } else { 0.0 })
                }
            })
            .unzip();
        Ok(Self {
            method,
            offset,
            factor,
        })
    }

    pub fn transform(&self, data: ArrayView2<f64>) -> Array2<f64> {
        let mut out = data.to_owned();
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            let (o, f) = (self.offset[j], self.factor[j]);
            col.mapv_inplace(|x| (x - o) * f);
        }
        out
    }

    /// Inverse map; constant features come back as their fitted offset.
    pub fn inverse(&self, data: ArrayView2<f64>) -> Array2<f64> {
        let mut out = data.to_owned();
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            let (o, f) = (self.offset[j], self.factor[j]);
            col.mapv_inplace(|x| if f == 0.0 { o } else { x / f + o });
        }
        out
    }
}

/// Fits a scaler on `fit_on` (training rows) and applies it to every row.
pub fn scale(ds: &Dataset, method: ScaleMethod, fit_on: &[usize]) -> Result<(Dataset, Scaler)> {
    let scaler = Scaler::fit(ds.features.view(), fit_on, method)?;
    let scaled = Dataset {
        features: scaler.transform(ds.features.view()),
        ..ds.clone()
    };
    Ok((scaled, scaler))
}

/// Row indices of the three splits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Normal rows are divided train/val/test by the given fractions; anomalies
/// only go to validation and test, in the ratio `val_frac : test_frac`.
pub fn split(ds: &Dataset, train_frac: f64, val_frac: f64, seed: u64) -> Result<SplitIndices> {
    if !(train_frac > 0.0 && val_frac > 0.0 && train_frac + val_frac < 1.0) {
        return Err(Error::Config(format!(
            "split fractions must be positive and leave a test remainder, got {train_frac}/{val_frac}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut normals, mut anomalies): (Vec<usize>, Vec<usize>) =
        (0..ds.len()).partition(|&i| ds.labels[i] == 0);
    normals.shuffle(&mut rng);
    anomalies.shuffle(&mut rng);

    let n = normals.len() as f64;
    let n_train = (train_frac * n).round() as usize;
    let n_val = ((val_frac * n).round() as usize).min(normals.len() - n_train);
    let a_val = (anomalies.len() as f64 * val_frac / (1.0 - train_frac)).round() as usize;
    if a_val == 0 || a_val >= anomalies.len() {
        return Err(Error::Config(format!(
            "{} anomalies cannot populate both validation and test splits",
            anomalies.len()
        )));
    }
    if n_train == 0 {
        return Err(Error::Config("training split would be empty".into()));
    }

    let mut val: Vec<usize> = normals[n_train..n_train + n_val].to_vec();
    val.extend_from_slice(&anomalies[..a_val]);
    let mut test: Vec<usize> = normals[n_train + n_val..].to_vec();
    test.extend_from_slice(&anomalies[a_val..]);
    let mut train = normals[..n_train].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(SplitIndices { train, val, test })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionScheme {
    #[default]
    Even,
    NoniidKmeans,
    Random,
}

impl PartitionScheme {
    pub fn as_str(self) -> &'static str {
        match self {
            PartitionScheme::Even => "even",
            PartitionScheme::NoniidKmeans => "noniid_kmeans",
            PartitionScheme::Random => "random",
        }
    }
}

/// Per-split assignment of dataset rows to clients.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionPlan {
    pub scheme: PartitionScheme,
    pub seed: u64,
    pub train: Vec<Vec<usize>>,
    pub val: Vec<Vec<usize>>,
    pub test: Vec<Vec<usize>>,
}

impl PartitionPlan {
    pub fn num_clients(&self) -> usize {
        self.train.len()
    }

    fn splits(&self) -> [(&'static str, &Vec<Vec<usize>>); 3] {
        [("train", &self.train), ("val", &self.val), ("test", &self.test)]
    }

    /// CSV rows `split,client_id,sample_index`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["split", "client_id", "sample_index"]).map_err(csv_err)?;
        for (name, clients) in self.splits() {
            for (cid, rows) in clients.iter().enumerate() {
                for r in rows {
                    w.write_record([name, &cid.to_string(), &r.to_string()])
                        .map_err(csv_err)?;
                }
            }
        }
        w.flush().map_err(|e| Error::io("<partition csv>", e))
    }

    /// Checks that every split is covered exactly once.
    pub fn conserves(&self, splits: &SplitIndices) -> bool {
        let check = |clients: &Vec<Vec<usize>>, split: &Vec<usize>| {
            let mut all: Vec<usize> = clients.iter().flatten().copied().collect();
            all.sort_unstable();
            let mut expect = split.clone();
            expect.sort_unstable();
            all == expect
        };
        check(&self.train, &splits.train)
            && check(&self.val, &splits.val)
            && check(&self.test, &splits.test)
    }
}

fn check_clients(num_clients: usize, min: usize) -> Result<()> {
    if num_clients < min {
        return Err(Error::invalid(format!("need at least {min} clients, got {num_clients}")));
    }
    Ok(())
}

/// Shuffled round-robin, anomalies dealt first so their per-client counts
/// differ by at most one.
pub fn partition_even(ds: &Dataset, splits: &SplitIndices, num_clients: usize, seed: u64) -> Result<PartitionPlan> {
    check_clients(num_clients, 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut deal = |rows: &[usize], split: &str| {
        let (mut normals, mut anomalies): (Vec<usize>, Vec<usize>) =
            rows.iter().partition(|&&i| ds.labels[i] == 0);
        anomalies.shuffle(&mut rng);
        normals.shuffle(&mut rng);
        if split == "val" && !anomalies.is_empty() && anomalies.len() < num_clients {
            warn!(
                "only {} validation anomalies for {num_clients} clients; some clients get none",
                anomalies.len()
            );
        }
        let mut out = vec![Vec::new(); num_clients];
        for (k, i) in anomalies.into_iter().chain(normals).enumerate() {
            out[k % num_clients].push(i);
        }
        out
    };
    Ok(PartitionPlan {
        scheme: PartitionScheme::Even,
        seed,
        train: deal(&splits.train, "train"),
        val: deal(&splits.val, "val"),
        test: deal(&splits.test, "test"),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Array2<f64>,
    pub iterations: usize,
    /// Within-cluster sum of squares after initialization and after each iteration.
    pub wcss_history: Vec<f64>,
}

impl KMeansResult {
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.centroids.nrows()];
        for &a in &self.assignments {
            s[a] += 1;
        }
        s
    }

    pub fn nearest(&self, point: ndarray::ArrayView1<f64>) -> usize {
        nearest_centroid(point, self.centroids.view()).0
    }
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest_centroid(p: ndarray::ArrayView1<f64>, centroids: ArrayView2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, row) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(p, row);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn wcss(points: ArrayView2<f64>, centroids: ArrayView2<f64>, assign: &[usize]) -> f64 {
    points
        .rows()
        .into_iter()
        .zip(assign)
        .map(|(p, &a)| sq_dist(p, centroids.row(a)))
        .sum()
}

/// k-means++ seeding followed by Lloyd iterations until assignments stop
/// changing or `max_iters` is reached. A point only moves to a strictly closer
/// centroid. Empty clusters are re-seeded with the point of the largest
/// cluster farthest from its centroid.
pub fn kmeans(points: ArrayView2<f64>, k: usize, seed: u64, max_iters: usize) -> Result<KMeansResult> {
    let n = points.nrows();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("k must be in 1..={n}, got {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centroids = Array2::zeros((k, points.ncols()));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&points.row(first));
    let mut d2: Vec<f64> = points.rows().into_iter().map(|p| sq_dist(p, points.row(first))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&points.row(pick));
        for (i, p) in points.rows().into_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, centroids.row(c)));
        }
    }

    let mut assign: Vec<usize> = points
        .rows()
        .into_iter()
        .map(|p| nearest_centroid(p, centroids.view()).0)
        .collect();
    let mut history = vec![wcss(points, centroids.view(), &assign)];
    let mut iterations = 0;

    loop {
        // update step with empty-cluster repair
        let mut sizes = vec![0usize; k];
        for &a in &assign {
            sizes[a] += 1;
        }
        for empty in (0..k).filter(|&c| sizes[c] == 0).collect::<Vec<_>>() {
            let largest = (0..k).max_by_key(|&c| (sizes[c], std::cmp::Reverse(c))).unwrap();
            if sizes[largest] <= 1 {
                break;
            }
            let far = (0..n)
                .filter(|&i| assign[i] == largest)
                .max_by(|&a, &b| {
                    sq_dist(points.row(a), centroids.row(largest))
                        .total_cmp(&sq_dist(points.row(b), centroids.row(largest)))
                        .then(b.cmp(&a))
                })
                .unwrap();
            assign[far] = empty;
            sizes[largest] -= 1;
            sizes[empty] = 1;
        }
        let mut sums = Array2::<f64>::zeros(centroids.dim());
        for (p, &a) in points.rows().into_iter().zip(&assign) {
            let mut row = sums.row_mut(a);
            row += &p;
        }
        for (c, &size) in sizes.iter().enumerate() {
            if size > 0 {
                let mean = &sums.row(c) / size as f64;
                centroids.row_mut(c).assign(&mean);
            }
        }
        let after_update = wcss(points, centroids.view(), &assign);

        if iterations >= max_iters {
            history.push(after_update);
            break;
        }
        iterations += 1;

        // assignment step: move only to a strictly closer centroid
        let mut changed = false;
        for (i, p) in points.rows().into_iter().enumerate() {
            let current = sq_dist(p, centroids.row(assign[i]));
            let (best, d) = nearest_centroid(p, centroids.view());
            if d < current {
                assign[i] = best;
                changed = true;
            }
        }
        let after_assign = wcss(points, centroids.view(), &assign);
        debug_assert!(after_assign <= after_update * (1.0 + 1e-12) + 1e-12);
        debug_assert!(
            after_update <= history.last().unwrap() * (1.0 + 1e-12) + 1e-12,
            "WCSS increased: {} -> {}",
            history.last().unwrap(),
            after_update
        );
        history.push(after_assign);
        if !changed {
            break;
        }
    }

    Ok(KMeansResult {
        assignments: assign,
        centroids,
        iterations,
        wcss_history: history,
    })
}

/// Non-IID partition. Multi-class sources give each client whole normal
/// classes; binary sources cluster the normal rows with k-means. Anomalies are
/// always clustered with k-means and cluster `j` goes to client `j`.
pub fn partition_noniid(
    ds: &Dataset,
    splits: &SplitIndices,
    num_clients: usize,
    seed: u64,
) -> Result<PartitionPlan> {
    check_clients(num_clients, 2)?;
    let mut train = vec![Vec::new(); num_clients];
    let mut val = vec![Vec::new(); num_clients];
    let mut test = vec![Vec::new(); num_clients];

    // normal rows
    let normal_classes: BTreeSet<&str> = match &ds.classes {
        Some(cls) => (0..ds.len())
            .filter(|&i| ds.labels[i] == 0)
            .map(|i| cls[i].as_str())
            .collect(),
        None => BTreeSet::new(),
    };
    if normal_classes.len() >= num_clients {
        let owner: BTreeMap<&str, usize> = normal_classes
            .iter()
            .enumerate()
            .map(|(rank, &c)| (c, rank % num_clients))
            .collect();
        let cls = ds.classes.as_ref().unwrap();
        for (rows, out) in [(&splits.train, &mut train), (&splits.val, &mut val), (&splits.test, &mut test)] {
            for &i in rows.iter().filter(|&&i| ds.labels[i] == 0) {
                out[owner[cls[i].as_str()]].push(i);
            }
        }
    } else {
        if splits.train.len() < num_clients {
            return Err(Error::invalid("fewer training rows than clients"));
        }
        let fit = ds.features.select(Axis(0), &splits.train);
        let km = kmeans(fit.view(), num_clients, mix_seed(seed, 1), 100)?;
        for (&i, &c) in splits.train.iter().zip(&km.assignments) {
            train[c].push(i);
        }
        for (rows, out) in [(&splits.val, &mut val), (&splits.test, &mut test)] {
            for &i in rows.iter().filter(|&&i| ds.labels[i] == 0) {
                out[km.nearest(ds.features.row(i))].push(i);
            }
        }
    }

    // anomalous rows from validation and test are clustered together
    let anomalies: Vec<usize> = splits
        .val
        .iter()
        .chain(&splits.test)
        .copied()
        .filter(|&i| ds.labels[i] == 1)
        .collect();
    if !anomalies.is_empty() {
        let mut k = num_clients;
        if k > anomalies.len() {
            warn!("k reduced from {k} to the anomaly count {}", anomalies.len());
            k = anomalies.len();
        }
        let pts = ds.features.select(Axis(0), &anomalies);
        let km = kmeans(pts.view(), k, mix_seed(seed, 2), 100)?;
        let in_val: BTreeSet<usize> = splits.val.iter().copied().collect();
        for (&i, &c) in anomalies.iter().zip(&km.assignments) {
            if in_val.contains(&i) {
                val[c].push(i);
            } else {
                test[c].push(i);
            }
        }
    }
    for v in train.iter_mut().chain(val.iter_mut()).chain(test.iter_mut()) {
        v.sort_unstable();
    }
    Ok(PartitionPlan {
        scheme: PartitionScheme::NoniidKmeans,
        seed,
        train,
        val,
        test,
    })
}

/// Client sizes for `total` rows from Dirichlet proportions; every client
/// gets at least one row when `total >= proportions.len()`.
fn allocate(total: usize, proportions: &[f64]) -> Vec<usize> {
    let k = proportions.len();
    let floor = if total >= k { 1 } else { 0 };
    let mut sizes = vec![floor; k];
    if floor == 0 {
        for s in sizes.iter_mut().take(total) {
            *s = 1;
        }
        return sizes;
    }
    let rest = total - k;
    let raw: Vec<f64> = proportions.iter().map(|p| p * rest as f64).collect();
    let mut given = 0;
    for (s, r) in sizes.iter_mut().zip(&raw) {
        let f = r.floor() as usize;
        *s += f;
        given += f;
    }
    // largest remainders, ties to the lower client index
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &c in order.iter().take(rest - given) {
        sizes[c] += 1;
    }
    sizes
}

fn dirichlet(rng: &mut ChaCha8Rng, k: usize, concentration: f64) -> Vec<f64> {
    let gamma = Gamma::new(concentration, 1.0).expect("positive concentration");
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.iter().map(|d| d / total).collect()
    } else {
        vec![1.0 / k as f64; k]
    }
}

/// Uneven random partition with Dirichlet(`concentration`) client shares,
/// drawn independently per split.
pub fn partition_random(
    splits: &SplitIndices,
    num_clients: usize,
    seed: u64,
    concentration: f64,
) -> Result<PartitionPlan> {
    check_clients(num_clients, 2)?;
    if !(concentration > 0.0) || !concentration.is_finite() {
        return Err(Error::invalid("concentration must be a positive finite number"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut deal = |rows: &[usize]| {
        let props = dirichlet(&mut rng, num_clients, concentration);
        let sizes = allocate(rows.len(), &props);
        let mut shuffled = rows.to_vec();
        shuffled.shuffle(&mut rng);
        let mut out = Vec::with_capacity(num_clients);
        let mut start = 0;
        for s in sizes {
            let mut part = shuffled[start..start + s].to_vec();
            part.sort_unstable();
            out.push(part);
            start += s;
        }
        out
    };
    Ok(PartitionPlan {
        scheme: PartitionScheme::Random,
        seed,
        train: deal(&splits.train),
        val: deal(&splits.val),
        test: deal(&splits.test),
    })
}

/// Materializes client states. Client `i` gets shuffling seed `mix_seed(seed, i)`.
pub fn build_clients(ds: &Dataset, plan: &PartitionPlan, seed: u64) -> Vec<ClientState> {
    (0..plan.num_clients())
        .map(|c| ClientState {
            client_id: c,
            train: ds.features.select(Axis(0), &plan.train[c]),
            val: ds.labeled_subset(&plan.val[c]),
            test: ds.labeled_subset(&plan.test[c]),
            seed: mix_seed(seed, c as u64),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub corrupt_client_ids: BTreeSet<usize>,
    pub noise_sigma_scale: f64,
}

/// Adds Gaussian noise with per-feature std `noise_sigma_scale * train_std`
/// to the validation features of a listed client. Labels, training and test
/// data are untouched; unlisted clients are returned unchanged.
pub fn corrupt(client: &ClientState, spec: &CorruptionSpec, seed: u64) -> ClientState {
    if !spec.corrupt_client_ids.contains(&client.client_id) || spec.noise_sigma_scale == 0.0 {
        return client.clone();
    }
    let n = client.train.nrows() as f64;
    let stds: Vec<f64> = client
        .train
        .columns()
        .into_iter()
        .map(|col| {
            if col.is_empty() {
                return 0.0;
            }
            let m = col.sum() / n;
            (col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt()
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, client.client_id as u64));
    let mut out = client.clone();
    for mut row in out.val.features.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            let sd = spec.noise_sigma_scale * stds[j];
            let z: f64 = StandardNormal.sample(&mut rng);
            if sd > 0.0 {
                *v += sd * z;
            }
        }
    }
    out
}

/// Parameters of the synthetic stand-in dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_normal: usize,
    pub num_anomaly: usize,
    pub dim: usize,
    pub separation: f64,
    /// Anomaly blob `b` (0-based) is centred at `separation * (b + 1)` on every axis.
    #[serde(default = "one")]
    pub anomaly_blobs: usize,
}

fn one() -> usize {
    1
}

/// Standard-normal normal rows, anomalies shifted by `separation` on every axis.
pub fn synth(num_normal: usize, num_anomaly: usize, dim: usize, separation: f64, seed: u64) -> Result<Dataset> {
    synth_spec(
        &SynthSpec {
            num_normal,
            num_anomaly,
            dim,
            separation,
            anomaly_blobs: 1,
        },
        seed,
    )
}

pub fn synth_spec(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    if spec.dim == 0 {
        return Err(Error::invalid("synthetic dimension must be at least 1"));
    }
    if spec.anomaly_blobs == 0 {
        return Err(Error::invalid("anomaly_blobs must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let n = spec.num_normal + spec.num_anomaly;
    let mut features = Array2::zeros((n, spec.dim));
    let mut labels = Vec::with_capacity(n);
    for (i, mut row) in features.rows_mut().into_iter().enumerate() {
        let shift = if i < spec.num_normal {
            labels.push(0);
            0.0
        } else {
            labels.push(1);
            let blob = (i - spec.num_normal) % spec.anomaly_blobs;
            spec.separation * (blob + 1) as f64
        };
        for v in row.iter_mut() {
            *v = unit.sample(&mut rng) + shift;
        }
    }
    let mut ds = Dataset::new(features, labels, "synthetic")?;
    if spec.anomaly_blobs > 1 {
        ds.classes = None;
    }
    Ok(ds)
}
