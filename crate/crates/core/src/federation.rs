//! In-process FedAvg: broadcast, parallel local training, weighted averaging.

use std::sync::Mutex;
use std::time::Instant;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{train_local, ModelParams, TrainConfig};
use crate::util::mix_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientWeighting {
    Uniform,
    #[default]
    BySampleCount,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FedConfig {
    pub rounds: usize,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub client_weighting: ClientWeighting,
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::invalid("rounds must be at least 1"));
        }
        self.train.validate()
    }
}

/// Feature rows with binary anomaly labels (1 = anomaly).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledData {
    pub features: Array2<f64>,
    pub labels: Vec<u8>,
}

impl LabeledData {
    pub fn new(features: Array2<f64>, labels: Vec<u8>) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::invalid(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        Ok(Self { features, labels })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            features: Array2::zeros((0, dim)),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn anomaly_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }
}

/// Everything one simulated client holds locally. Training rows are normal-only.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub client_id: usize,
    pub train: Array2<f64>,
    pub val: LabeledData,
    pub test: LabeledData,
    /// Base seed for this client's local shuffling.
    pub seed: u64,
}

impl ClientState {
    pub fn dim(&self) -> usize {
        self.train.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MessageKind {
    ModelBroadcast,
    ModelUpdate,
    SummaryRecord,
    ErrorExtremes,
    LocalThreshold,
    CandidateThresholds,
    F1Vector,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MessageRecord {
    pub kind: MessageKind,
    pub client_id: usize,
    /// Number of scalar values carried.
    pub scalars: usize,
}

/// Instrumented client/server channel. Every simulated transfer goes through
/// [`Channel::send`] so tests can audit what crossed the boundary.
#[derive(Debug, Default)]
pub struct Channel {
    log: Mutex<Vec<MessageRecord>>,
}

impl Channel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn send(&self, kind: MessageKind, client_id: usize, scalars: usize) {
        self.log.lock().unwrap().push(MessageRecord {
            kind,
            client_id,
            scalars,
        });
    }

    pub fn messages(&self) -> Vec<MessageRecord> {
        self.log.lock().unwrap().clone()
    }

    pub fn count(&self, kind: MessageKind) -> usize {
        self.log
            .lock()
            .unwrap()
            .iter()
            .filter(|m| m.kind == kind)
            .count()
    }

    pub fn clear(&self) {
        self.log.lock().unwrap().clear();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundLogEntry {
    pub round: usize,
    pub client_id: usize,
    pub local_final_mse: f64,
    pub wall_time_ms: f64,
}

#[derive(Debug, Clone)]
pub struct FedOutcome {
    pub model: ModelParams,
    pub round_log: Vec<RoundLogEntry>,
}

/// Element-wise weighted mean of dimension-compatible models. Weights are
/// normalized internally. Terms are summed in a canonical order so the
/// result does not depend on the order of the inputs.
pub fn average_params(params: &[ModelParams], weights: &[f64]) -> Result<ModelParams> {
    let first = params
        .first()
        .ok_or_else(|| Error::invalid("cannot average an empty list of models"))?;
    if params.len() != weights.len() {
        return Err(Error::invalid(format!(
            "{} models but {} weights",
            params.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::invalid("weights must be finite and non-negative"));
    }
    let total = sorted_sum(weights.to_vec());
    if !(total > 0.0) {
        return Err(Error::invalid("weights must sum to a positive value"));
    }
    if let Some(k) = params.iter().position(|p| !p.same_shape(first)) {
        return Err(Error::invalid(format!(
            "model {k} does not match the shape of model 0"
        )));
    }

    let norm: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let mut out = first.clone();
    let mut terms = Vec::with_capacity(params.len());
    for (li, layer) in out.layers_mut().iter_mut().enumerate() {
        for (idx, w) in layer.weights.indexed_iter_mut() {
            terms.clear();
            terms.extend(
                params
                    .iter()
                    .zip(&norm)
                    .map(|(p, nw)| nw * p.layers()[li].weights[idx]),
            );
            *w = sorted_sum(std::mem::take(&mut terms));
        }
        for (idx, b) in layer.bias.indexed_iter_mut() {
            terms.clear();
            terms.extend(
                params
                    .iter()
                    .zip(&norm)
                    .map(|(p, nw)| nw * p.layers()[li].bias[idx]),
            );
            *b = sorted_sum(std::mem::take(&mut terms));
        }
    }
    Ok(out)
}

fn sorted_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

/// Trains `initial` with FedAvg over `clients` for `cfg.rounds` rounds.
///
/// Every client participates in every round. Local training runs in parallel;
/// results are aggregated in `client_id` order. A client without training
/// rows returns the broadcast model unchanged.
pub fn run_fedavg(
    clients: &[ClientState],
    initial: &ModelParams,
    cfg: &FedConfig,
    channel: Option<&Channel>,
) -> Result<FedOutcome> {
    cfg.validate()?;
    if clients.is_empty() {
        return Err(Error::invalid("run_fedavg needs at least one client"));
    }
    let dim = initial.input_dim();
    if let Some(c) = clients.iter().find(|c| c.dim() != dim) {
        return Err(Error::invalid(format!(
            "client {} has {} features, model expects {dim}",
            c.client_id,
            c.dim()
        )));
    }

    let mut order: Vec<&ClientState> = clients.iter().collect();
    order.sort_by_key(|c| c.client_id);

    let weights: Vec<f64> = order
        .iter()
        .map(|c| match cfg.client_weighting {
            ClientWeighting::Uniform => 1.0,
            ClientWeighting::BySampleCount => c.train.nrows() as f64,
        })
        .collect();

    let mut global = initial.clone();
    let mut round_log = Vec::with_capacity(cfg.rounds * clients.len());

    for round in 0..cfg.rounds {
        if let Some(ch) = channel {
            for c in &order {
                ch.send(MessageKind::ModelBroadcast, c.client_id, global.num_params());
            }
        }

        let results: Vec<Result<(ModelParams, f64, f64)>> = order
            .par_iter()
            .map(|client| {
                let started = Instant::now();
                if client.train.nrows() == 0 {
                    return Ok((global.clone(), f64::NAN, 0.0));
                }
                let train_cfg = TrainConfig {
                    seed: mix_seed(client.seed, round as u64),
                    ..cfg.train
                };
                let outcome = train_local(&global, client.train.view(), &train_cfg).map_err(
                    |e| match e {
                        Error::DivergedTraining { epoch } => Error::ClientDiverged {
                            round,
                            client: client.client_id,
                            epoch,
                        },
                        other => other,
                    },
                )?;
                let elapsed = started.elapsed().as_secs_f64() * 1e3;
                Ok((outcome.model.clone(), outcome.final_loss(), elapsed))
            })
            .collect();

        let mut local_models = Vec::with_capacity(order.len());
        for (client, res) in order.iter().zip(results) {
            let (model, loss, ms) = res?;
            if let Some(ch) = channel {
                ch.send(MessageKind::ModelUpdate, client.client_id, model.num_params());
            }
            round_log.push(RoundLogEntry {
                round,
                client_id: client.client_id,
                local_final_mse: loss,
                wall_time_ms: ms,
            });
            local_models.push(model);
        }

        // Standard FedAvg replacement: the new global model is the weighted
        // mean of the returned client models.
        let round_weights = if weights.iter().sum::<f64>() > 0.0 {
            weights.clone()
        } else {
            vec![1.0; order.len()]
        };
        global = average_params(&local_models, &round_weights)?;
    }

    Ok(FedOutcome {
        model: global,
        round_log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Optimizer;

    fn tiny(value: f64) -> ModelParams {
        let mut m = ModelParams::init(2, &[1], 0).unwrap();
        for l in m.layers_mut() {
            l.weights.fill(value);
            l.bias.fill(value);
        }
        m
    }

    fn client(id: usize, seed: u64, rows: usize) -> ClientState {
        let train = Array2::from_shape_fn((rows, 4), |(i, j)| ((i * 5 + j * 3) % 7) as f64 / 7.0);
        ClientState {
            client_id: id,
            train,
            val: LabeledData::empty(4),
            test: LabeledData::empty(4),
            seed,
        }
    }

    fn cfg(rounds: usize, lr: f64) -> FedConfig {
        FedConfig {
            rounds,
            train: TrainConfig {
                local_epochs: 2,
                learning_rate: lr,
                batch_size: 8,
                seed: 0,
                optimizer: Optimizer::Sgd,
            },
            client_weighting: ClientWeighting::BySampleCount,
        }
    }

    #[test]
    fn uniform_average_of_two() {
        let avg = average_params(&[tiny(1.0), tiny(3.0)], &[1.0, 1.0]).unwrap();
        assert!(avg.layers()[0].weights.iter().all(|&w| w == 2.0));
    }

    #[test]
    fn weighted_average() {
        let avg = average_params(&[tiny(1.0), tiny(2.0)], &[2.0, 3.0]).unwrap();
        assert!(avg.layers()[1].bias.iter().all(|&b| (b - 1.6).abs() < 1e-15));
    }

    #[test]
    fn single_model_average_is_identity() {
        let m = ModelParams::init(5, &[3, 2], 8).unwrap();
        assert_eq!(average_params(std::slice::from_ref(&m), &[0.7]).unwrap(), m);
    }

    #[test]
    fn average_rejects_bad_input() {
        assert!(average_params(&[], &[]).is_err());
        assert!(average_params(&[tiny(1.0)], &[0.0]).is_err());
        let other = ModelParams::init(3, &[1], 0).unwrap();
        assert!(average_params(&[tiny(1.0), other], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn zero_rounds_rejected() {
        let init = ModelParams::init(4, &[2], 0).unwrap();
        assert!(run_fedavg(&[client(0, 1, 10)], &init, &cfg(0, 0.1), None).is_err());
    }

    #[test]
    fn zero_learning_rate_returns_initial_model() {
        let init = ModelParams::init(4, &[2], 0).unwrap();
        let out = run_fedavg(&[client(0, 1, 10), client(1, 2, 12)], &init, &cfg(1, 0.0), None)
            .unwrap();
        assert_eq!(out.model, init);
    }

    #[test]
    fn single_client_matches_sequential_local_training() {
        let init = ModelParams::init(4, &[2], 3).unwrap();
        let c = client(0, 77, 24);
        let fc = cfg(3, 0.1);
        let fed = run_fedavg(std::slice::from_ref(&c), &init, &fc, None).unwrap();

        let mut m = init.clone();
        for round in 0..3 {
            let tc = TrainConfig {
                seed: mix_seed(77, round),
                ..fc.train
            };
            m = train_local(&m, c.train.view(), &tc).unwrap().model;
        }
        assert_eq!(fed.model, m);
    }

    #[test]
    fn identical_clients_average_to_either() {
        let init = ModelParams::init(4, &[2], 3).unwrap();
        let a = client(0, 5, 16);
        let b = ClientState {
            client_id: 1,
            ..a.clone()
        };
        let fc = cfg(1, 0.1);
        let fed = run_fedavg(&[a.clone(), b], &init, &fc, None).unwrap();
        let solo = run_fedavg(&[a], &init, &fc, None).unwrap();
        assert_eq!(fed.model, solo.model);
    }

    #[test]
    fn message_count_is_two_per_client_per_round() {
        let init = ModelParams::init(4, &[2], 3).unwrap();
        let clients: Vec<_> = (0..3).map(|i| client(i, i as u64, 10 + i)).collect();
        let ch = Channel::new();
        run_fedavg(&clients, &init, &cfg(4, 0.05), Some(&ch)).unwrap();
        assert_eq!(ch.count(MessageKind::ModelBroadcast), 12);
        assert_eq!(ch.count(MessageKind::ModelUpdate), 12);
        assert_eq!(ch.messages().len(), 2 * 3 * 4);
    }

    #[test]
    fn divergence_names_round_and_client() {
        let init = ModelParams::init(4, &[2], 3).unwrap();
        let mut bad = client(1, 0, 8);
        bad.train.fill(1e200);
        let fc = cfg(2, 1.0);
        match run_fedavg(&[client(0, 0, 8), bad], &init, &fc, None) {
            Err(Error::ClientDiverged { round, client, .. }) => {
                assert_eq!((round, client), (0, 1));
            }
            other => panic!("expected ClientDiverged, got {other:?}"),
        }
    }
}
