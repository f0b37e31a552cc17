//! Synchronous federated averaging over in-process or TCP transports.
//!
//! Each round the server broadcasts the global parameters, every client runs
//! [`train_local`] on its own data, the server averages the returned vectors
//! and broadcasts the result, and every client tests it on its local test
//! split. Only parameter vectors, scalar metrics and control frames ever
//! leave a client.

mod tcp;
pub mod wire;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{ClientDataset, Split};
use crate::error::{Error, Result};
use crate::neural::{
    evaluate, train_local, ConfusionMatrix, EpochMetrics, Evaluation, ModelArch, ModelParams, Network, TrainConfig,
    TrainState,
};
use crate::seed::derive_seed;

pub use tcp::{join, serve, ClientSession};

/// Default time a server waits for any expected frame.
pub const DEFAULT_TIMEOUT_SECS: u64 = 120;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Transport {
    InProcess,
    Tcp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedConfig {
    pub clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub transport: Transport,
    /// Stop once the mean client test accuracy reaches this value.
    pub early_accept: Option<f64>,
    pub timeout_secs: u64,
    /// Weight the average by training-set size instead of the plain mean.
    pub weighted_average: bool,
    /// Use inverse-frequency class weights in each client's loss.
    pub class_weights: bool,
    pub arch: ModelArch,
}

impl Default for FedConfig {
    fn default() -> Self {
        FedConfig {
            clients: 4,
            rounds: 5,
            local_epochs: 8,
            learning_rate: 3e-4,
            batch_size: 64,
            seed: 0,
            transport: Transport::InProcess,
            early_accept: None,
            timeout_secs: DEFAULT_TIMEOUT_SECS,
            weighted_average: false,
            class_weights: false,
            arch: ModelArch::tsa_default(),
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::invalid("at least one client is required"));
        }
        if self.rounds == 0 {
            return Err(Error::invalid("at least one round is required"));
        }
        if let Some(a) = self.early_accept {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::invalid(format!("early-accept threshold {a} outside [0, 1]")));
            }
        }
        self.train_config(0, 1).validate()
    }

    /// Local training settings of one client in a given (1-based) round.
    pub fn train_config(&self, client_id: u32, round: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            local_epochs: self.local_epochs,
            batch_size: self.batch_size,
            seed: client_seed(self.seed, client_id),
            class_weights: None,
            epoch_offset: round.saturating_sub(1) * self.local_epochs,
        }
    }
}

/// Per-client training seed derived from the run seed.
pub fn client_seed(global: u64, client_id: u32) -> u64 {
    derive_seed(global, 0x1000 + client_id as u64)
}

/// Seeded initial global parameters.
pub fn initialize(net: &Network, seed: u64) -> ModelParams {
    net.init_params(derive_seed(seed, 0))
}

/// Elementwise mean of the client vectors.
///
/// Each coordinate is accumulated as `min + Σ(x − min) / N` over its sorted
/// values, so the result does not depend on client order and a list of
/// identical vectors averages to exactly that vector.
pub fn fed_avg(list: &[ModelParams]) -> Result<ModelParams> {
    let first = list.first().ok_or_else(|| Error::invalid("cannot average an empty list"))?;
    for p in &list[1..] {
        first.check_compatible(p)?;
    }
    let n = list.len() as f64;
    let mut column = vec![0.0; list.len()];
    let values = (0..first.values.len())
        .map(|i| {
            for (c, p) in column.iter_mut().zip(list) {
                *c = p.values[i];
            }
            column.sort_by(f64::total_cmp);
            let lo = column[0];
            if lo == column[column.len() - 1] {
                return lo;
            }
            lo + column.iter().map(|x| x - lo).sum::<f64>() / n
        })
        .collect();
    Ok(ModelParams { arch_hash: first.arch_hash, values })
}

/// Weighted mean `Σ wᵢ θᵢ / Σ wᵢ`, accumulated in sorted order per coordinate.
pub fn fed_avg_weighted(list: &[ModelParams], weights: &[f64]) -> Result<ModelParams> {
    let first = list.first().ok_or_else(|| Error::invalid("cannot average an empty list"))?;
    if weights.len() != list.len() || weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::invalid("one finite non-negative weight per client is required"));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::invalid("weights sum to zero"));
    }
    for p in &list[1..] {
        first.check_compatible(p)?;
    }
    let mut column: Vec<(f64, f64)> = vec![(0.0, 0.0); list.len()];
    let values = (0..first.values.len())
        .map(|i| {
            for ((c, p), &w) in column.iter_mut().zip(list).zip(weights) {
                *c = (p.values[i], w);
            }
            column.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
            let lo = column[0].0;
            lo + column.iter().map(|(x, w)| w * (x - lo)).sum::<f64>() / total
        })
        .collect();
    Ok(ModelParams { arch_hash: first.arch_hash, values })
}

/// What a client uploads after local training.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    pub round: usize,
    pub client_id: u32,
    pub params: ModelParams,
    pub train_samples: usize,
    pub epochs: Vec<EpochMetrics>,
}

impl LocalUpdate {
    pub fn train_loss(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.train_loss)
    }

    pub fn val_loss(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.val_loss)
    }
}

/// Client-side state shared by both transports.
#[derive(Debug)]
pub struct LocalClient<'a> {
    pub client_id: u32,
    net: &'a Network,
    data: &'a ClientDataset,
    cfg: FedConfig,
    state: TrainState,
}

impl<'a> LocalClient<'a> {
    pub fn new(client_id: u32, net: &'a Network, data: &'a ClientDataset, cfg: &FedConfig) -> Result<Self> {
        if data.indices(Split::Train).is_empty() {
            return Err(Error::invalid(format!("client {client_id} has an empty training split")));
        }
        if data.indices(Split::Test).is_empty() {
            return Err(Error::invalid(format!("client {client_id} has an empty test split")));
        }
        Ok(LocalClient { client_id, net, data, cfg: cfg.clone(), state: TrainState::default() })
    }

    /// Trains round `round` (1-based) starting from the broadcast parameters.
    pub fn train_round(&mut self, global: &ModelParams, round: usize) -> Result<LocalUpdate> {
        let mut tc = self.cfg.train_config(self.client_id, round);
        if self.cfg.class_weights {
            tc.class_weights = Some(self.data.class_weights());
        }
        let out = train_local(self.net, global, self.data, &tc, &mut self.state)?;
        Ok(LocalUpdate {
            round,
            client_id: self.client_id,
            params: out.params,
            train_samples: self.data.indices(Split::Train).len(),
            epochs: out.epochs,
        })
    }

    pub fn test(&self, global: &ModelParams) -> Result<Evaluation> {
        evaluate(self.net, global, self.data, Split::Test)
    }
}

/// Averages the uploads of one round according to the config.
pub fn aggregate(cfg: &FedConfig, updates: &[LocalUpdate]) -> Result<ModelParams> {
    let params: Vec<ModelParams> = updates.iter().map(|u| u.params.clone()).collect();
    if cfg.weighted_average {
        let w: Vec<f64> = updates.iter().map(|u| u.train_samples as f64).collect();
        fed_avg_weighted(&params, &w)
    } else {
        fed_avg(&params)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundReport {
    pub client_id: u32,
    /// Local training curve of this round; empty when only the final losses
    /// are known (a TCP server sees just the uploaded summary).
    pub epochs: Vec<EpochMetrics>,
    pub train_loss: f64,
    pub val_loss: f64,
    pub test_accuracy: f64,
    pub confusion: ConfusionMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub clients: Vec<ClientRoundReport>,
    pub train_seconds: f64,
    pub aggregate_seconds: f64,
    pub bytes_sent: u64,
    pub bytes_received: u64,
}

impl RoundReport {
    pub fn mean_test_accuracy(&self) -> f64 {
        self.clients.iter().map(|c| c.test_accuracy).sum::<f64>() / self.clients.len() as f64
    }

    pub fn mean_val_loss(&self) -> f64 {
        self.clients.iter().map(|c| c.val_loss).sum::<f64>() / self.clients.len() as f64
    }

    /// The report without timing and traffic fields, for transport comparisons.
    pub fn without_timing(&self) -> RoundReport {
        RoundReport {
            train_seconds: 0.0,
            aggregate_seconds: 0.0,
            bytes_sent: 0,
            bytes_received: 0,
            clients: self.clients.iter().map(|c| ClientRoundReport { epochs: Vec::new(), ..c.clone() }).collect(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FedOutcome {
    pub initial: ModelParams,
    pub global: ModelParams,
    pub rounds: Vec<RoundReport>,
    /// Global parameters broadcast after each round.
    pub round_globals: Vec<ModelParams>,
}

fn early_accept_reached(cfg: &FedConfig, report: &RoundReport) -> bool {
    cfg.early_accept.is_some_and(|a| report.mean_test_accuracy() >= a)
}

/// Runs every client on its own thread each round. Client ids are the
/// datasets' `client_id`s; results are reduced in client-id order.
pub fn run_federated(cfg: &FedConfig, datasets: &[ClientDataset]) -> Result<FedOutcome> {
    cfg.validate()?;
    if datasets.len() != cfg.clients {
        return Err(Error::invalid(format!(
            "config expects {} clients, got {} datasets",
            cfg.clients,
            datasets.len()
        )));
    }
    let net = Network::new(cfg.arch.clone())?;
    let mut order: Vec<&ClientDataset> = datasets.iter().collect();
    order.sort_by_key(|d| d.client_id);
    if order.windows(2).any(|w| w[0].client_id == w[1].client_id) {
        return Err(Error::invalid("client ids must be distinct"));
    }
    for d in &order {
        if d.shape.len() != net.input_len() {
            return Err(Error::Shape(format!("client {} windows do not match the network input", d.client_id)));
        }
    }
    let mut clients = order
        .iter()
        .map(|d| LocalClient::new(d.client_id as u32, &net, d, cfg))
        .collect::<Result<Vec<_>>>()?;

    let initial = initialize(&net, cfg.seed);
    let mut global = initial.clone();
    let mut rounds = Vec::with_capacity(cfg.rounds);
    let mut round_globals = Vec::with_capacity(cfg.rounds);
    for round in 1..=cfg.rounds {
        let t0 = Instant::now();
        let updates: Vec<LocalUpdate> = std::thread::scope(|s| {
            let handles: Vec<_> = clients
                .iter_mut()
                .map(|c| {
                    let g = &global;
                    s.spawn(move || c.train_round(g, round))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("client thread panicked"))
                .collect::<Result<Vec<_>>>()
        })?;
        let t1 = Instant::now();
        global = aggregate(cfg, &updates)?;
        let t2 = Instant::now();
        let mut reports = Vec::with_capacity(clients.len());
        for (c, u) in clients.iter().zip(&updates) {
            let ev = c.test(&global)?;
            reports.push(ClientRoundReport {
                client_id: c.client_id,
                epochs: u.epochs.clone(),
                train_loss: u.train_loss(),
                val_loss: u.val_loss(),
                test_accuracy: ev.accuracy,
                confusion: ev.confusion,
            });
        }
        let report = RoundReport {
            round,
            clients: reports,
            train_seconds: (t1 - t0).as_secs_f64(),
            aggregate_seconds: (t2 - t1).as_secs_f64(),
            bytes_sent: 0,
            bytes_received: 0,
        };
        log::info!(
            "round {round}: mean val loss {:.5}, mean test accuracy {:.4}",
            report.mean_val_loss(),
            report.mean_test_accuracy()
        );
        let stop = early_accept_reached(cfg, &report);
        rounds.push(report);
        round_globals.push(global.clone());
        if stop {
            log::info!("early-accept threshold reached after round {round}");
            break;
        }
    }
    Ok(FedOutcome { initial, global, rounds, round_globals })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CentralOutcome {
    pub params: ModelParams,
    pub epochs: Vec<EpochMetrics>,
    pub test: Evaluation,
    pub train_samples: usize,
}

/// Trains one model on the union of all client datasets for
/// `rounds × local_epochs` epochs, with the seed schedule client 0 would use.
pub fn run_centralized(cfg: &FedConfig, datasets: &[ClientDataset]) -> Result<CentralOutcome> {
    cfg.validate()?;
    let merged = ClientDataset::merge(datasets)?;
    let net = Network::new(cfg.arch.clone())?;
    let client_id = merged.client_id as u32;
    let mut tc = cfg.train_config(client_id, 1);
    tc.local_epochs = cfg.rounds * cfg.local_epochs;
    if cfg.class_weights {
        tc.class_weights = Some(merged.class_weights());
    }
    let out = train_local(&net, &initialize(&net, cfg.seed), &merged, &tc, &mut TrainState::default())?;
    let test = evaluate(&net, &out.params, &merged, Split::Test)?;
    Ok(CentralOutcome {
        params: out.params,
        epochs: out.epochs,
        test,
        train_samples: merged.indices(Split::Train).len(),
    })
}
