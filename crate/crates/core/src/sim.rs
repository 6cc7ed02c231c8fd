//! The federated round loop: client sampling, local training, update
//! bookkeeping and pluggable aggregation.

use std::collections::BTreeMap;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{craft_malicious, dba_assign_subtriggers, AttackConfig, AttackContext, AttackKind, TriggerSpec};
use crate::data::Dataset;
use crate::defense::DefenseDiagnostics;
use crate::error::{config_err, Error, Result};
use crate::model::FlatModel;
use crate::rng::{self, Purpose};
use crate::stats::median;
use crate::task::{train_local, TaskModel, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DefenseKind {
    None,
    #[default]
    Guardfl,
    Krum,
    MultiKrum,
    Ndc,
    WeakDp,
}

impl std::str::FromStr for DefenseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" | "fedavg" => DefenseKind::None,
            "guardfl" => DefenseKind::Guardfl,
            "krum" => DefenseKind::Krum,
            "multi_krum" => DefenseKind::MultiKrum,
            "ndc" => DefenseKind::Ndc,
            "weak_dp" => DefenseKind::WeakDp,
            other => return Err(config_err(format!("unknown defense {other:?}"))),
        })
    }
}

/// Per-round learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// `lr_0 / sqrt(r)`.
    InvSqrt,
}

impl LrSchedule {
    pub fn rate(self, base: f64, round: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::InvSqrt => base / (round.max(1) as f64).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub total_clients: usize,
    pub clients_per_round: usize,
    pub max_rounds: usize,
    pub local_epochs: usize,
    pub seed: u64,
    pub pmr: f64,
    pub defense: DefenseKind,
    pub lr_schedule: LrSchedule,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            total_clients: 200,
            clients_per_round: 10,
            max_rounds: 600,
            local_epochs: 2,
            seed: 0,
            pmr: 0.25,
            defense: DefenseKind::Guardfl,
            lr_schedule: LrSchedule::Constant,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_clients == 0 {
            return Err(config_err("total_clients must be positive"));
        }
        if self.clients_per_round == 0 || self.clients_per_round > self.total_clients {
            return Err(config_err(format!(
                "clients_per_round must be in [1, {}], got {}",
                self.total_clients, self.clients_per_round
            )));
        }
        if self.max_rounds == 0 {
            return Err(config_err("max_rounds must be at least 1"));
        }
        if !(0.0..=0.55).contains(&self.pmr) {
            return Err(config_err(format!("pmr must lie in [0, 0.55], got {}", self.pmr)));
        }
        Ok(())
    }

    /// Size of the compromised population, `floor(pmr * M)`.
    pub fn num_compromised(&self) -> usize {
        (self.pmr * self.total_clients as f64 + 1e-9).floor() as usize
    }

    /// Compromised clients are ids `0..num_compromised()`.
    pub fn is_compromised(&self, client: usize) -> bool {
        client < self.num_compromised()
    }
}

/// One client's contribution to a round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdateRecord {
    pub client_id: usize,
    pub weights: FlatModel,
    pub update: FlatModel,
    pub prev_update: FlatModel,
    pub sample_count: usize,
}

/// `m` distinct ids drawn uniformly from `[0, M)`, returned in ascending order.
pub fn select_clients(cfg: &SimConfig, round: usize) -> Result<Vec<usize>> {
    if cfg.clients_per_round > cfg.total_clients {
        return Err(config_err(format!(
            "cannot select {} of {} clients",
            cfg.clients_per_round, cfg.total_clients
        )));
    }
    let mut rng = rng::stream(cfg.seed, Purpose::ClientSelection, round as u64, 0);
    let mut ids = index::sample(&mut rng, cfg.total_clients, cfg.clients_per_round).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Builds a record. `prev` is the client's weights from the previous round
/// if it took part; otherwise the previous update is taken to be the global
/// model's own step `G_r - G_prev`.
pub fn compute_updates(
    client_id: usize,
    weights: FlatModel,
    g_r: &FlatModel,
    prev: Option<&FlatModel>,
    g_prev: &FlatModel,
    sample_count: usize,
) -> Result<ClientUpdateRecord> {
    let update = weights.sub(g_r)?;
    let prev_update = match prev {
        Some(p) => p.sub(g_prev)?,
        None => g_r.sub(g_prev)?,
    };
    Ok(ClientUpdateRecord { client_id, weights, update, prev_update, sample_count })
}

/// Sample-weighted mean of the records' weights, summed in ascending client
/// id order. If every client reports zero samples the mean is unweighted.
pub fn fedavg_aggregate(records: &[ClientUpdateRecord]) -> Result<FlatModel> {
    let models: Vec<(usize, &FlatModel, f64)> =
        records.iter().map(|r| (r.client_id, &r.weights, r.sample_count as f64)).collect();
    weighted_mean(models)
}

pub(crate) fn weighted_mean(mut items: Vec<(usize, &FlatModel, f64)>) -> Result<FlatModel> {
    if items.is_empty() {
        return Err(Error::Aggregation("no models to aggregate".into()));
    }
    items.sort_by_key(|(id, _, _)| *id);
    let total: f64 = items.iter().map(|(_, _, n)| n).sum();
    let uniform = total <= 0.0;
    let mut out = items[0].1.zeros_like();
    for (_, w, n) in &items {
        let coef = if uniform { 1.0 / items.len() as f64 } else { n / total };
        out.axpy(coef, w)?;
    }
    // an average of identical models must reproduce the model exactly
    if items.iter().all(|(_, w, _)| w == &items[0].1) {
        return Ok(items[0].1.clone());
    }
    Ok(out)
}

/// Server-side state carried between rounds.
#[derive(Debug, Clone)]
pub struct GlobalState {
    /// Number of completed rounds.
    pub round: usize,
    pub global_model: FlatModel,
    pub prev_global: FlatModel,
    /// Weights submitted in the most recent round, by client id.
    pub last_weights: BTreeMap<usize, FlatModel>,
}

impl GlobalState {
    pub fn new(initial: FlatModel) -> Self {
        Self { round: 0, prev_global: initial.clone(), global_model: initial, last_weights: BTreeMap::new() }
    }
}

/// What an aggregator sees. `global` is the model broadcast this round.
#[derive(Debug, Clone, Copy)]
pub struct AggregationInput<'a> {
    pub round: usize,
    pub records: &'a [ClientUpdateRecord],
    pub global: &'a FlatModel,
}

#[derive(Debug, Clone)]
pub struct AggregationOutput {
    pub model: FlatModel,
    /// Clients the aggregator judged malicious this round.
    pub flagged: Vec<usize>,
    pub diagnostics: Option<DefenseDiagnostics>,
}

/// A server aggregation rule, possibly stateful across rounds.
pub trait Aggregator: Send + Sync {
    fn name(&self) -> &'static str;
    fn aggregate(&mut self, input: AggregationInput<'_>) -> Result<AggregationOutput>;
}

/// Plain sample-weighted averaging.
#[derive(Debug, Clone, Copy, Default)]
pub struct FedAvg;

impl Aggregator for FedAvg {
    fn name(&self) -> &'static str {
        "fedavg"
    }

    fn aggregate(&mut self, input: AggregationInput<'_>) -> Result<AggregationOutput> {
        Ok(AggregationOutput { model: fedavg_aggregate(input.records)?, flagged: Vec::new(), diagnostics: None })
    }
}

/// Summary of one executed round.
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub round: usize,
    pub selected: Vec<usize>,
    /// Selected clients that ran the attack this round.
    pub attacking: Vec<usize>,
    pub flagged: Vec<usize>,
    pub median_update_norm: f64,
    pub learning_rate: f64,
    pub records: Vec<ClientUpdateRecord>,
    pub diagnostics: Option<DefenseDiagnostics>,
}

/// A complete simulation: configuration, client data, and mutable state.
pub struct Simulation {
    cfg: SimConfig,
    train: TrainConfig,
    attack: AttackConfig,
    task: TaskModel,
    clients: Vec<Dataset>,
    trigger: TriggerSpec,
    dba_triggers: BTreeMap<usize, TriggerSpec>,
    aggregator: Box<dyn Aggregator>,
    state: GlobalState,
}

impl Simulation {
    /// `clients[i]` is client `i`'s local data. `train.epochs` is replaced by
    /// `cfg.local_epochs`.
    pub fn new(
        cfg: SimConfig,
        mut train: TrainConfig,
        attack: AttackConfig,
        task: TaskModel,
        clients: Vec<Dataset>,
        aggregator: Box<dyn Aggregator>,
    ) -> Result<Self> {
        cfg.validate()?;
        if clients.len() != cfg.total_clients {
            return Err(config_err(format!(
                "{} client datasets for {} clients",
                clients.len(),
                cfg.total_clients
            )));
        }
        train.epochs = cfg.local_epochs;
        train.validate()?;
        let dims = task.dims();
        attack.validate(dims[0], *dims.last().expect("output layer"))?;
        let trigger = attack.trigger();
        let dba_triggers = if attack.kind == AttackKind::Dba {
            let ids: Vec<usize> = (0..cfg.num_compromised()).collect();
            dba_assign_subtriggers(&trigger, attack.dba_parts, &ids)?
        } else {
            BTreeMap::new()
        };
        let initial = task.init(&mut rng::stream(cfg.seed, Purpose::ModelInit, 0, 0));
        Ok(Self {
            cfg,
            train,
            attack,
            task,
            clients,
            trigger,
            dba_triggers,
            aggregator,
            state: GlobalState::new(initial),
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn attack(&self) -> &AttackConfig {
        &self.attack
    }

    pub fn task(&self) -> &TaskModel {
        &self.task
    }

    pub fn state(&self) -> &GlobalState {
        &self.state
    }

    pub fn trigger(&self) -> &TriggerSpec {
        &self.trigger
    }

    pub fn aggregator(&self) -> &dyn Aggregator {
        self.aggregator.as_ref()
    }

    pub fn is_finished(&self) -> bool {
        self.state.round >= self.cfg.max_rounds
    }

    /// Select, train locally (in parallel), aggregate, advance.
    pub fn run_round(&mut self) -> Result<RoundOutcome> {
        if self.is_finished() {
            return Err(config_err(format!("all {} rounds already ran", self.cfg.max_rounds)));
        }
        let round = self.state.round + 1;
        let selected = select_clients(&self.cfg, round)?;
        let mut train = self.train;
        train.learning_rate = self.cfg.lr_schedule.rate(self.train.learning_rate, round);

        let global = &self.state.global_model;
        let trained: Vec<(usize, FlatModel, bool)> = selected
            .par_iter()
            .map(|&id| self.train_client(id, round, global, &train))
            .collect::<Result<_>>()?;

        let mut records = Vec::with_capacity(trained.len());
        let mut attacking = Vec::new();
        for (id, weights, attacked) in trained {
            if attacked {
                attacking.push(id);
            }
            let prev = self.state.last_weights.get(&id);
            records.push(compute_updates(
                id,
                weights,
                &self.state.global_model,
                prev,
                &self.state.prev_global,
                self.clients[id].len(),
            )?);
        }
        let norms: Vec<f64> = records.iter().map(|r| r.update.norm()).collect();
        let median_update_norm = median(&norms).unwrap_or(0.0);

        let out = self.aggregator.aggregate(AggregationInput { round, records: &records, global: &self.state.global_model })?;
        if out.model.params().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite global model after round {round}")));
        }

        let last_weights = records.iter().map(|r| (r.client_id, r.weights.clone())).collect();
        let prev = std::mem::replace(&mut self.state.global_model, out.model);
        self.state.prev_global = prev;
        self.state.last_weights = last_weights;
        self.state.round = round;

        Ok(RoundOutcome {
            round,
            selected,
            attacking,
            flagged: out.flagged,
            median_update_norm,
            learning_rate: train.learning_rate,
            records,
            diagnostics: out.diagnostics,
        })
    }

    fn train_client(&self, id: usize, round: usize, global: &FlatModel, train: &TrainConfig) -> Result<(usize, FlatModel, bool)> {
        let data = &self.clients[id];
        if self.cfg.is_compromised(id) {
            let trigger = self.dba_triggers.get(&id).unwrap_or(&self.trigger);
            let ctx = AttackContext {
                task: &self.task,
                global,
                data,
                train,
                trigger,
                clients_per_round: self.cfg.clients_per_round,
                seed: self.cfg.seed,
                round,
                client: id,
            };
            if let Some(outcome) = craft_malicious(&self.attack, &ctx)? {
                return Ok((id, outcome.model, true));
            }
        }
        let mut rng = rng::stream(self.cfg.seed, Purpose::LocalTraining, round as u64, id as u64);
        let outcome = train_local(&self.task, global, data, train, &mut rng)?;
        Ok((id, outcome.model, false))
    }
}
