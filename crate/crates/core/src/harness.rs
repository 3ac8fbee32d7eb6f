//! Experiment runner: data preparation, federated training, threshold
//! selection for every configured method, and per-client test evaluation.

use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{DatasetRef, ScenarioConfig};
use crate::data::{
    build_clients, corrupt, load_csv, partition_even, partition_noniid, partition_random, scale,
    split, synth_spec, CorruptionSpec, Dataset, PartitionPlan, PartitionScheme, SplitIndices,
};
use crate::error::{Error, Result, StageExt};
use crate::error_stats::{summarize, ClassSummaries};
use crate::federation::{
    run_fedavg, Channel, ClientState, FedOutcome, MessageKind, MessageRecord, RoundLogEntry,
};
use crate::metrics::{
    collect_stat_features, correlation_matrix, f1_curve, Confusion, CorrelationMatrix,
    StatFeatureRow,
};
use crate::nn::{default_hidden_dims, ModelParams};
use crate::thresholds::{
    fed_filtered, fed_minmax, fed_mse_std, kqe, local_minmax, local_mse_std, local_simple,
    our_method, percentile, pot, MethodParams, MethodTag, OurMethodOutcome,
};
use crate::util::{mean, mix_seed};

/// One line of `results.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub scenario_id: String,
    pub dataset: String,
    pub scheme: String,
    pub num_clients: usize,
    pub corrupt_clients: usize,
    pub method: MethodTag,
    /// Client index, or `"global"` for the across-client row.
    pub client_id: String,
    pub split: String,
    pub f1: f64,
    pub threshold: f64,
    /// Threshold computation time; excluded from `results.csv`.
    pub wall_time_ms: f64,
    pub config_hash: String,
}

impl ResultRow {
    pub fn is_global(&self) -> bool {
        self.client_id == "global"
    }
}

/// Everything needed before training: the scaled dataset and client views.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset: Dataset,
    pub splits: SplitIndices,
    pub plan: PartitionPlan,
    pub clients: Vec<ClientState>,
}

#[derive(Debug, Clone)]
pub struct ScenarioOutput {
    pub config_hash: String,
    pub rows: Vec<ResultRow>,
    pub round_log: Vec<RoundLogEntry>,
    pub fedavg_messages: Vec<MessageRecord>,
    /// Client/server traffic of each threshold method.
    pub method_messages: Vec<(MethodTag, Vec<MessageRecord>)>,
    pub our_method: Option<OurMethodOutcome>,
    /// Per-client validation summaries as seen after corruption.
    pub client_summaries: Vec<ClassSummaries>,
    pub corrupt_clients: Vec<usize>,
    pub model: ModelParams,
}

impl ScenarioOutput {
    pub fn global_row(&self, method: MethodTag) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.method == method && r.is_global())
    }

    pub fn global_f1(&self, method: MethodTag) -> Option<f64> {
        self.global_row(method).map(|r| r.f1)
    }

    pub fn client_f1(&self, method: MethodTag, client: usize) -> Option<f64> {
        let id = client.to_string();
        self.rows
            .iter()
            .find(|r| r.method == method && r.client_id == id)
            .map(|r| r.f1)
    }
}

fn load_dataset(cfg: &ScenarioConfig) -> Result<Dataset> {
    match &cfg.dataset {
        DatasetRef::Synth(spec) => synth_spec(spec, cfg.seeds.data),
        DatasetRef::Csv {
            path,
            label_column,
            positive_label,
        } => load_csv(path, label_column, positive_label.as_deref()),
    }
}

/// Loads or synthesizes the data, splits it, fits the scaler on the training
/// rows and partitions every split across clients.
pub fn prepare(cfg: &ScenarioConfig) -> Result<Prepared> {
    cfg.validate()?;
    let raw = load_dataset(cfg).stage("data")?;
    let splits = split(&raw, cfg.split.train_frac, cfg.split.val_frac, cfg.seeds.data).stage("split")?;
    let (dataset, _) = scale(&raw, cfg.split.scale, &splits.train).stage("scale")?;
    let seed = cfg.seeds.partition;
    let plan = match cfg.scheme {
        PartitionScheme::Even => partition_even(&dataset, &splits, cfg.num_clients, seed),
        PartitionScheme::NoniidKmeans => partition_noniid(&dataset, &splits, cfg.num_clients, seed),
        PartitionScheme::Random => partition_random(&splits, cfg.num_clients, seed, cfg.concentration),
    }
    .stage("partition")?;
    let clients = build_clients(&dataset, &plan, cfg.seeds.model);
    Ok(Prepared {
        dataset,
        splits,
        plan,
        clients,
    })
}

pub fn initial_model(cfg: &ScenarioConfig, input_dim: usize) -> Result<ModelParams> {
    let hidden = if cfg.model.hidden_dims.is_empty() {
        default_hidden_dims(input_dim)
    } else {
        cfg.model.hidden_dims.clone()
    };
    ModelParams::init(input_dim, &hidden, cfg.seeds.model)
}

/// FedAvg training of one shared model on the clients' normal-only training rows.
pub fn train(cfg: &ScenarioConfig, prepared: &Prepared, channel: Option<&Channel>) -> Result<FedOutcome> {
    let init = initial_model(cfg, prepared.dataset.dim()).stage("train")?;
    let mut fed = cfg.fed;
    fed.train.seed = cfg.seeds.model;
    run_fedavg(&prepared.clients, &init, &fed, channel).stage("train")
}

/// Corrupted client ids for `count`: a prefix of a fixed seeded permutation.
pub fn corrupt_set(cfg: &ScenarioConfig, count: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..cfg.num_clients).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seeds.partition, 0xc0)));
    let mut chosen = ids[..count.min(ids.len())].to_vec();
    chosen.sort_unstable();
    chosen
}

struct ClientErrors {
    val: Vec<f64>,
    val_labels: Vec<u8>,
    test: Vec<f64>,
    test_labels: Vec<u8>,
}

impl ClientErrors {
    fn val_normals(&self) -> Vec<f64> {
        self.val
            .iter()
            .zip(&self.val_labels)
            .filter(|(_, &l)| l == 0)
            .map(|(&e, _)| e)
            .collect()
    }
}

fn client_errors(model: &ModelParams, clients: &[ClientState]) -> Result<Vec<ClientErrors>> {
    clients
        .iter()
        .map(|c| {
            Ok(ClientErrors {
                val: model.mse_per_sample(c.val.features.view())?,
                val_labels: c.val.labels.clone(),
                test: model.mse_per_sample(c.test.features.view())?,
                test_labels: c.test.labels.clone(),
            })
        })
        .collect()
}

struct MethodRun {
    thresholds: Vec<f64>,
    shared: Option<f64>,
    our: Option<OurMethodOutcome>,
}

/// Last-resort local threshold: the largest validation error, or +inf when
/// the client has no validation rows at all.
fn max_or_inf(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::INFINITY
    } else {
        xs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

fn local_threshold(tag: MethodTag, e: &ClientErrors, params: &MethodParams, client: usize) -> Result<f64> {
    if tag == MethodTag::LocalMinmax {
        return match local_minmax(&e.val, &e.val_labels, params.candidates) {
            Ok(t) => Ok(t),
            Err(Error::InvalidArgument(msg)) => {
                warn!("client {client}: local_minmax unavailable ({msg}); using largest error");
                Ok(max_or_inf(&e.val))
            }
            Err(other) => Err(other),
        };
    }
    let normals = e.val_normals();
    if normals.is_empty() {
        warn!("client {client}: no normal validation errors for {tag}; using largest error");
        return Ok(max_or_inf(&e.val));
    }
    match tag {
        MethodTag::Kqe => kqe(&normals, params.kqe_q, None).or_else(|err| {
            warn!("client {client}: kqe failed ({err}); using percentile");
            percentile(&normals, params.kqe_q * 100.0)
        }),
        MethodTag::Pot => match pot(&normals, params.pot_u_quantile, params.pot_risk) {
            Err(Error::InsufficientTail { exceedances, .. }) => {
                log::debug!("client {client}: pot has {exceedances} exceedances; using percentile");
                percentile(&normals, params.pot_u_quantile * 100.0)
            }
            other => other,
        },
        _ => local_simple(tag, &normals, params),
    }
}

/// Runs one method over all clients. Federated methods exchange only
/// summaries, scalars and F1 vectors through `ch`.
fn compute_method(tag: MethodTag, errs: &[ClientErrors], params: &MethodParams, ch: &Channel) -> Result<MethodRun> {
    let n_clients = errs.len();
    let val_counts: Vec<usize> = errs.iter().map(|e| e.val.len()).collect();
    let f1_vectors = |candidates: &[f64]| -> Vec<Vec<f64>> {
        errs.iter()
            .enumerate()
            .map(|(i, e)| {
                ch.send(MessageKind::CandidateThresholds, i, candidates.len());
                let v = f1_curve(&e.val, &e.val_labels, candidates);
                ch.send(MessageKind::F1Vector, i, v.len());
                v
            })
            .collect()
    };
    let shared = |theta: f64| MethodRun {
        thresholds: vec![theta; n_clients],
        shared: Some(theta),
        our: None,
    };

    match tag {
        MethodTag::OurMethod => {
            let mut summaries = Vec::with_capacity(n_clients);
            for (i, e) in errs.iter().enumerate() {
                if e.val.is_empty() {
                    continue;
                }
                let s = ClassSummaries::from_labeled(&e.val, &e.val_labels)?;
                for _ in s.normal.iter().chain(s.anomaly.iter()) {
                    ch.send(MessageKind::SummaryRecord, i, crate::error_stats::SummaryRecord::SCALARS);
                }
                summaries.push(s);
            }
            let out = our_method(
                &summaries,
                &val_counts,
                params.candidates,
                params.aggregation,
                params.formula_mode,
                params.refine,
                f1_vectors,
            )?;
            Ok(MethodRun {
                our: Some(out.clone()),
                ..shared(out.threshold)
            })
        }
        MethodTag::FedMinmax => {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for (i, e) in errs.iter().enumerate().filter(|(_, e)| !e.val.is_empty()) {
                ch.send(MessageKind::ErrorExtremes, i, 2);
                lo = lo.min(e.val.iter().copied().fold(f64::INFINITY, f64::min));
                hi = hi.max(max_or_inf(&e.val));
            }
            let (theta, _) = fed_minmax(lo, hi, params.candidates, &val_counts, params.aggregation, f1_vectors)?;
            Ok(shared(theta))
        }
        MethodTag::FedMseStd => {
            let mut summaries = Vec::with_capacity(n_clients);
            for (i, e) in errs.iter().enumerate().filter(|(_, e)| !e.val.is_empty()) {
                summaries.push(summarize(&e.val)?);
                ch.send(MessageKind::SummaryRecord, i, crate::error_stats::SummaryRecord::SCALARS);
            }
            Ok(shared(fed_mse_std(&summaries)?))
        }
        MethodTag::FedFiltered => {
            let mut locals = Vec::with_capacity(n_clients);
            for (i, e) in errs.iter().enumerate().filter(|(_, e)| !e.val.is_empty()) {
                locals.push(local_mse_std(&e.val)?);
                ch.send(MessageKind::LocalThreshold, i, 1);
            }
            Ok(shared(fed_filtered(&locals, params.z_cut)?))
        }
        local => {
            let thresholds = errs
                .iter()
                .enumerate()
                .map(|(i, e)| local_threshold(local, e, params, i))
                .collect::<Result<Vec<_>>>()?;
            Ok(MethodRun {
                thresholds,
                shared: None,
                our: None,
            })
        }
    }
}

/// Selects thresholds on validation data for every configured method and
/// reports F1 on each client's test data. Corruption from `cfg` is applied to
/// the validation features first.
pub fn evaluate(cfg: &ScenarioConfig, clients: &[ClientState], model: &ModelParams) -> Result<ScenarioOutput> {
    let corrupted_ids = corrupt_set(cfg, cfg.corruption.num_corrupt);
    let spec = CorruptionSpec {
        corrupt_client_ids: corrupted_ids.iter().copied().collect(),
        noise_sigma_scale: cfg.corruption.noise_sigma_scale,
    };
    let noise_seed = mix_seed(cfg.seeds.data, 0xbad);
    let clients: Vec<ClientState> = clients.iter().map(|c| corrupt(c, &spec, noise_seed)).collect();
    let errs = client_errors(model, &clients).stage("errors")?;
    let client_summaries = errs
        .iter()
        .map(|e| {
            if e.val.is_empty() {
                Ok(ClassSummaries::default())
            } else {
                ClassSummaries::from_labeled(&e.val, &e.val_labels)
            }
        })
        .collect::<Result<Vec<_>>>()
        .stage("errors")?;

    let hash = cfg.hash();
    let dataset = match &cfg.dataset {
        DatasetRef::Synth(_) => "synthetic".to_string(),
        DatasetRef::Csv { .. } => cfg.dataset_name(),
    };
    let n = clients.len();
    let mut rows = Vec::with_capacity(cfg.methods.len() * (n + 1));
    let mut method_messages = Vec::with_capacity(cfg.methods.len());
    let mut our = None;

    for &tag in &cfg.methods {
        let mut best_ms = f64::INFINITY;
        let mut run = None;
        let mut messages = Vec::new();
        for _ in 0..cfg.timing_repeats {
            let ch = Channel::new();
            let started = Instant::now();
            let r = compute_method(tag, &errs, &cfg.params, &ch).stage("threshold")?;
            best_ms = best_ms.min(started.elapsed().as_secs_f64() * 1e3);
            messages = ch.messages();
            run = Some(r);
        }
        let run = run.expect("timing_repeats >= 1");
        let row = |client_id: String, f1: f64, threshold: f64, wall: f64| ResultRow {
            scenario_id: cfg.scenario_id.clone(),
            dataset: dataset.clone(),
            scheme: cfg.scheme.as_str().to_string(),
            num_clients: n,
            corrupt_clients: corrupted_ids.len(),
            method: tag,
            client_id,
            split: "test".into(),
            f1,
            threshold,
            wall_time_ms: wall,
            config_hash: hash.clone(),
        };

        let per_client_ms = if tag.is_federated() { best_ms } else { best_ms / n as f64 };
        let mut scored = Vec::new();
        let mut all = Vec::with_capacity(n);
        for (i, (e, &theta)) in errs.iter().zip(&run.thresholds).enumerate() {
            let f1 = Confusion::at_threshold(&e.test, &e.test_labels, theta).f1();
            if e.test_labels.contains(&1) {
                scored.push(f1);
            }
            all.push(f1);
            rows.push(row(i.to_string(), f1, theta, per_client_ms));
        }
        let global_f1 = if scored.is_empty() { mean(&all) } else { mean(&scored) };
        let global_theta = run.shared.unwrap_or_else(|| {
            let finite: Vec<f64> = run.thresholds.iter().copied().filter(|t| t.is_finite()).collect();
            mean(&finite)
        });
        rows.push(row("global".into(), global_f1, global_theta, best_ms));
        info!("{} {tag}: global F1 {global_f1:.4}, threshold {global_theta:.6}", cfg.scenario_id);
        if run.our.is_some() {
            our = run.our;
        }
        method_messages.push((tag, messages));
    }

    Ok(ScenarioOutput {
        config_hash: hash,
        rows,
        round_log: Vec::new(),
        fedavg_messages: Vec::new(),
        method_messages,
        our_method: our,
        client_summaries,
        corrupt_clients: corrupted_ids,
        model: model.clone(),
    })
}

/// Full pipeline: prepare, train, select thresholds, evaluate on test data.
/// Errors carry the name of the failing stage; no partial output is produced.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioOutput> {
    let prepared = prepare(cfg)?;
    let channel = Channel::new();
    let fed = train(cfg, &prepared, Some(&channel))?;
    let mut out = evaluate(cfg, &prepared.clients, &fed.model)?;
    out.round_log = fed.round_log;
    out.fedavg_messages = channel.messages();
    Ok(out)
}

/// Reruns the scenario for each client count with freshly derived partitions.
pub fn sweep_clients(base: &ScenarioConfig, counts: &[usize]) -> Result<Vec<(usize, ScenarioOutput)>> {
    if let Some(&bad) = counts.iter().find(|&&c| c < 2) {
        return Err(Error::Config(format!("client counts must be at least 2, got {bad}")));
    }
    counts
        .iter()
        .map(|&n| {
            let mut cfg = base.clone();
            cfg.num_clients = n;
            cfg.corruption.num_corrupt = cfg.corruption.num_corrupt.min(n);
            info!("client sweep: {n} clients");
            run_scenario(&cfg).map(|o| (n, o))
        })
        .collect()
}

/// Trains once on clean data, then reruns threshold selection with the
/// validation features of a growing, nested set of clients corrupted.
pub fn sweep_corruption(base: &ScenarioConfig, counts: &[usize]) -> Result<Vec<(usize, ScenarioOutput)>> {
    if let Some(&bad) = counts.iter().find(|&&c| c > base.num_clients) {
        return Err(Error::Config(format!(
            "cannot corrupt {bad} of {} clients",
            base.num_clients
        )));
    }
    let prepared = prepare(base)?;
    let channel = Channel::new();
    let fed = train(base, &prepared, Some(&channel))?;
    counts
        .iter()
        .map(|&c| {
            let mut cfg = base.clone();
            cfg.corruption.num_corrupt = c;
            info!("corruption sweep: {c} corrupt clients");
            let mut out = evaluate(&cfg, &prepared.clients, &fed.model)?;
            out.round_log = fed.round_log.clone();
            out.fedavg_messages = channel.messages();
            Ok((c, out))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct FollowupOutput {
    pub rows: Vec<StatFeatureRow>,
    pub correlation: CorrelationMatrix,
}

/// Builds the per-client summary-statistics dataset labelled with the gain of
/// the federated threshold over `local_method`, across all three partition
/// schemes and the given client counts.
pub fn followup_dataset(
    base: &ScenarioConfig,
    client_counts: &[usize],
    local_method: MethodTag,
) -> Result<FollowupOutput> {
    if local_method.is_federated() {
        return Err(Error::Config(format!("{local_method} is not a local method")));
    }
    let mut rows = Vec::new();
    for scheme in [PartitionScheme::Even, PartitionScheme::NoniidKmeans, PartitionScheme::Random] {
        for &n in client_counts {
            let mut cfg = base.clone();
            cfg.scheme = scheme;
            cfg.num_clients = n;
            cfg.methods = vec![MethodTag::OurMethod, local_method];
            let out = run_scenario(&cfg)?;
            let our = out.our_method.as_ref().expect("our_method was requested");
            for (i, summary) in out.client_summaries.iter().enumerate() {
                let fed = out.client_f1(MethodTag::OurMethod, i).unwrap_or(0.0);
                let local = out.client_f1(local_method, i).unwrap_or(0.0);
                rows.push(collect_stat_features(summary, Some(&our.normal), Some(&our.anomaly), local, fed));
            }
        }
    }
    let correlation = correlation_matrix(&rows)?;
    Ok(FollowupOutput { rows, correlation })
}
