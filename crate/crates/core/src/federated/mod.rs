//! Federated training across edge servers and the single-shard baseline.

mod partition;
mod server;

pub use partition::{partition, partitioner, IidPartitioner, LabelSkewPartitioner, PartitionFactory, PartitionParams, Partitioner, PARTITIONERS};
pub use server::{aggregate, aggregation_weights, cumulative_gradient, server_update, DeltaUpdate, FedAvg, ServerFactory, ServerUpdate, SERVER_UPDATES};

use std::fmt;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::neural::{evaluate, train_epoch, AdamState, ModelParams, PlateauScheduler, TrainConfig, PLATEAU_MIN_DELTA};
use crate::rng::{SeedStreams, StreamRng};

#[derive(Debug, Clone, PartialEq)]
pub struct FlConfig {
    pub clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub partition: String,
    pub partition_params: PartitionParams,
    pub server_update: String,
    /// Decision threshold on the sigmoid outputs.
    pub threshold: f64,
    /// Stop once the mean validation F1 reaches this value.
    pub stop_f1: Option<f64>,
    /// Stop after this many rounds without validation-loss improvement.
    pub stop_patience: Option<usize>,
    /// Start every round with fresh Adam moments instead of keeping them.
    pub reset_optimizer: bool,
    /// Train clients one after another instead of on the thread pool.
    pub sequential: bool,
}

impl Default for FlConfig {
    fn default() -> Self {
        Self {
            clients: 5,
            rounds: 30,
            local_epochs: 5,
            partition: "iid".into(),
            partition_params: PartitionParams::default(),
            server_update: "fedavg".into(),
            threshold: 0.5,
            stop_f1: None,
            stop_patience: None,
            reset_optimizer: false,
            sequential: false,
        }
    }
}

impl FlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::invalid("need at least one client"));
        }
        if self.rounds == 0 || self.local_epochs == 0 {
            return Err(Error::invalid("rounds and local epochs must be positive"));
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return Err(Error::invalid(format!("threshold must lie in [0, 1), got {}", self.threshold)));
        }
        if !(0.0..=1.0).contains(&self.partition_params.label_skew) {
            return Err(Error::invalid("label skew must lie in [0, 1]"));
        }
        if let Some(f) = self.stop_f1 {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::invalid(format!("stop_f1 must lie in [0, 1], got {f}")));
            }
        }
        if self.stop_patience == Some(0) {
            return Err(Error::invalid("stop_patience must be positive"));
        }
        PARTITIONERS.lookup(&self.partition)?;
        SERVER_UPDATES.lookup(&self.server_update)?;
        Ok(())
    }
}

/// An edge server's private shard and the optimizer state it keeps between rounds.
pub struct ClientState {
    pub id: usize,
    pub x: Array2<f64>,
    pub y: Array2<f64>,
    pub optimizer: AdamState,
    pub rng: StreamRng,
}

impl ClientState {
    pub fn new(id: usize, shard: &Dataset, template: &ModelParams, rng: StreamRng) -> Self {
        Self {
            id,
            x: shard.feature_matrix(),
            y: shard.label_matrix(),
            optimizer: AdamState::new(template),
            rng,
        }
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }
}

pub struct LocalUpdate {
    pub params: ModelParams,
    pub train_loss: f64,
}

/// Starts from the broadcast model and runs `epochs` passes over the shard.
pub fn local_train(client: &mut ClientState, global: &ModelParams, epochs: usize, cfg: &TrainConfig, lr: f64) -> Result<LocalUpdate> {
    if epochs == 0 {
        return Err(Error::invalid("local training needs at least one epoch"));
    }
    let mut params = global.clone();
    let mut train_loss = 0.0;
    for _ in 0..epochs {
        train_loss = train_epoch(&mut params, &mut client.optimizer, &client.x, &client.y, cfg, lr, &mut client.rng)?;
    }
    Ok(LocalUpdate { params, train_loss })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundMetrics {
    pub round: usize,
    /// Learning rate used during the round.
    pub lr: f64,
    pub train_loss: f64,
    pub mean_val_loss: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub subset_accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Direction {
    Broadcast,
    Upload,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Broadcast => "broadcast",
            Direction::Upload => "upload",
        })
    }
}

/// One model transfer between the control center and an edge server.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Transfer {
    pub round: usize,
    pub direction: Direction,
    pub sender: String,
    pub receiver: String,
    pub bytes: usize,
    pub sha256: String,
}

fn transfer(round: usize, direction: Direction, client: usize, params: &ModelParams) -> Transfer {
    let (sender, receiver) = match direction {
        Direction::Broadcast => ("server".to_string(), format!("client{client}")),
        Direction::Upload => (format!("client{client}"), "server".to_string()),
    };
    Transfer {
        round,
        direction,
        sender,
        receiver,
        bytes: params.to_bytes().len(),
        sha256: params.digest(),
    }
}

pub struct ValidationSet {
    pub x: Array2<f64>,
    pub y: Array2<f64>,
}

impl ValidationSet {
    pub fn from_datasets(val: &[Dataset]) -> Vec<Self> {
        val.iter()
            .map(|d| Self {
                x: d.feature_matrix(),
                y: d.label_matrix(),
            })
            .collect()
    }
}

/// Loss and metrics averaged over the validation subsets.
pub fn validate_model(params: &ModelParams, val: &[ValidationSet], cfg: &TrainConfig, threshold: f64) -> Result<(f64, MetricReport)> {
    if val.is_empty() {
        return Err(Error::invalid("no validation data"));
    }
    let mut losses = 0.0;
    let mut reports = Vec::with_capacity(val.len());
    for v in val {
        let (l, probs) = evaluate(params, &v.x, &v.y, cfg)?;
        losses += l;
        reports.push(MetricReport::evaluate(probs.view(), v.y.view(), threshold)?);
    }
    Ok((losses / val.len() as f64, MetricReport::average(&reports)?))
}

#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub params: ModelParams,
    pub rounds: Vec<RoundMetrics>,
    pub ledger: Vec<Transfer>,
    pub shard_sizes: Vec<usize>,
}

impl TrainingRun {
    pub fn final_metrics(&self) -> Option<&RoundMetrics> {
        self.rounds.last()
    }

    pub fn best_f1(&self) -> f64 {
        self.rounds.iter().map(|r| r.f1).fold(0.0, f64::max)
    }
}

struct RoundLoop {
    scheduler: PlateauScheduler,
    lr: f64,
    best_loss: f64,
    stale: usize,
}

impl RoundLoop {
    fn new(cfg: &TrainConfig) -> Self {
        Self {
            scheduler: PlateauScheduler::new(cfg.plateau_factor, cfg.plateau_patience),
            lr: cfg.lr,
            best_loss: f64::INFINITY,
            stale: 0,
        }
    }

    /// Records a finished round; returns true when training should stop.
    fn finish(&mut self, m: &RoundMetrics, fl: &FlConfig) -> bool {
        if let Some(f) = self.scheduler.observe(m.mean_val_loss) {
            self.lr *= f;
        }
        if m.mean_val_loss < self.best_loss - PLATEAU_MIN_DELTA {
            self.best_loss = m.mean_val_loss;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        fl.stop_f1.is_some_and(|t| m.f1 >= t) || fl.stop_patience.is_some_and(|p| self.stale >= p)
    }
}

fn at_round(round: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Divergence { round: None, what } => Error::Divergence { round: Some(round), what },
        other => other,
    }
}

fn round_metrics(round: usize, lr: f64, train_loss: f64, val_loss: f64, r: &MetricReport) -> Result<RoundMetrics> {
    if !val_loss.is_finite() {
        return Err(Error::Divergence {
            round: Some(round),
            what: "non-finite validation loss".into(),
        });
    }
    Ok(RoundMetrics {
        round,
        lr,
        train_loss,
        mean_val_loss: val_loss,
        accuracy: r.accuracy,
        precision: r.precision,
        recall: r.recall,
        f1: r.f1,
        subset_accuracy: r.subset_accuracy,
    })
}

fn shards_for(train: &Dataset, fl: &FlConfig, streams: &SeedStreams) -> Result<Vec<Dataset>> {
    if !train.standardized {
        return Err(Error::invalid("training data must be standardized before training"));
    }
    let strategy = partitioner(&fl.partition, &fl.partition_params)?;
    partition(train, fl.clients, strategy.as_ref(), &mut streams.stream("partition"))
}

/// Federated training: broadcast, local epochs on every shard, server update,
/// validation, learning-rate schedule.
pub fn run_training(seed: u64, train: &Dataset, val: &[Dataset], cfg: &TrainConfig, fl: &FlConfig) -> Result<TrainingRun> {
    cfg.validate()?;
    fl.validate()?;
    let streams = SeedStreams::new(seed);
    let meters = train.n_features();
    let mut global = ModelParams::init(&cfg.architecture(meters), &mut streams.stream("init"));
    let shards = shards_for(train, fl, &streams)?;
    let mut clients: Vec<ClientState> = shards
        .iter()
        .enumerate()
        .map(|(m, s)| ClientState::new(m, s, &global, streams.indexed("dropout", m as u64)))
        .collect();
    let sizes: Vec<usize> = clients.iter().map(ClientState::len).collect();
    let server = server_update(&fl.server_update)?;
    let val = ValidationSet::from_datasets(val);
    let mut state = RoundLoop::new(cfg);
    let mut rounds = Vec::with_capacity(fl.rounds);
    let mut ledger = Vec::with_capacity(2 * fl.rounds * fl.clients);

    for k in 1..=fl.rounds {
        let lr = state.lr;
        ledger.extend(clients.iter().map(|c| transfer(k, Direction::Broadcast, c.id, &global)));
        if fl.reset_optimizer {
            for c in &mut clients {
                c.optimizer = AdamState::new(&global);
            }
        }
        let step = |c: &mut ClientState| local_train(c, &global, fl.local_epochs, cfg, lr);
        let updates: Vec<LocalUpdate> = if fl.sequential {
            clients.iter_mut().map(step).collect::<Result<_>>()
        } else {
            clients.par_iter_mut().map(step).collect::<Result<_>>()
        }
        .map_err(at_round(k))?;
        ledger.extend(updates.iter().zip(&clients).map(|(u, c)| transfer(k, Direction::Upload, c.id, &u.params)));

        let train_loss = updates.iter().zip(&sizes).map(|(u, &n)| u.train_loss * n as f64).sum::<f64>() / train.len() as f64;
        let locals: Vec<ModelParams> = updates.into_iter().map(|u| u.params).collect();
        global = server.apply(&global, &locals, &sizes, lr)?;
        if !global.all_finite() {
            return Err(Error::Divergence {
                round: Some(k),
                what: "non-finite global model".into(),
            });
        }
        let (val_loss, report) = validate_model(&global, &val, cfg, fl.threshold)?;
        let m = round_metrics(k, lr, train_loss, val_loss, &report)?;
        let stop = state.finish(&m, fl);
        rounds.push(m);
        if stop {
            break;
        }
    }
    Ok(TrainingRun {
        params: global,
        rounds,
        ledger,
        shard_sizes: sizes,
    })
}

/// Trains one edge server alone on its own shard for the same number of
/// epochs a federated run spends locally, evaluating where a round would end.
pub fn run_baseline(seed: u64, train: &Dataset, val: &[Dataset], cfg: &TrainConfig, fl: &FlConfig, shard_index: usize) -> Result<TrainingRun> {
    cfg.validate()?;
    fl.validate()?;
    if shard_index >= fl.clients {
        return Err(Error::invalid(format!("shard {shard_index} out of range for {} clients", fl.clients)));
    }
    let streams = SeedStreams::new(seed);
    let mut params = ModelParams::init(&cfg.architecture(train.n_features()), &mut streams.stream("init"));
    let shards = shards_for(train, fl, &streams)?;
    let mut client = ClientState::new(shard_index, &shards[shard_index], &params, streams.indexed("dropout", shard_index as u64));
    let val = ValidationSet::from_datasets(val);
    let mut state = RoundLoop::new(cfg);
    let mut rounds = Vec::with_capacity(fl.rounds);

    for k in 1..=fl.rounds {
        let lr = state.lr;
        if fl.reset_optimizer {
            client.optimizer = AdamState::new(&params);
        }
        let u = local_train(&mut client, &params, fl.local_epochs, cfg, lr).map_err(at_round(k))?;
        params = u.params;
        let (val_loss, report) = validate_model(&params, &val, cfg, fl.threshold)?;
        let m = round_metrics(k, lr, u.train_loss, val_loss, &report)?;
        let stop = state.finish(&m, fl);
        rounds.push(m);
        if stop {
            break;
        }
    }
    Ok(TrainingRun {
        params,
        rounds,
        ledger: Vec::new(),
        shard_sizes: vec![client.len()],
    })
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    Ok(std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?))
}

pub fn write_rounds_csv(rounds: &[RoundMetrics], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "round,lr,mean_val_loss,accuracy,precision,recall,f1,subset_accuracy,train_loss").map_err(io)?;
    for r in rounds {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.round, r.lr, r.mean_val_loss, r.accuracy, r.precision, r.recall, r.f1, r.subset_accuracy, r.train_loss
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn write_ledger_csv(ledger: &[Transfer], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "round,direction,sender,receiver,bytes,sha256").map_err(io)?;
    for t in ledger {
        writeln!(w, "{},{},{},{},{},{}", t.round, t.direction, t.sender, t.receiver, t.bytes, t.sha256).map_err(io)?;
    }
    w.flush().map_err(io)
}
