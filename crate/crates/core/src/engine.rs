//! Synchronous round loop: selection, local training, FedAvg aggregation,
//! battery accounting, central evaluation and early stopping.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{DatasetKind, ExperimentConfig};
use crate::data::{self, Dataset, Partition};
use crate::energy::{self, BatteryParams, BatteryState, PowerRole};
use crate::error::{Error, Result};
use crate::nn::{self, Batch, ModelParams};
use crate::rng::{mix_seed, stream};
use crate::selection::{self, SelectionContext, Strategy};
use crate::similarity::{self, ClusterModel, ClusterOptions, SimilarityMatrix};

// stream tags for seed derivation
const TRAIN_STREAM: u64 = 0x7261;
const ROLE_STREAM: u64 = 0x726f;
const KMEANS_STREAM: u64 = 0x6b6d;
const DIAG_ROUND: u64 = u64::MAX;

/// Training data, the client partition and the central test set.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Dataset,
    pub test: Batch,
    pub partition: Partition,
}

/// Loads (or generates) the dataset, splits off the test set and partitions
/// the training data.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let (train, test) = load_datasets(cfg)?;
    prepare_from(cfg, train, test)
}

/// Loads the train/test datasets named by the config.
pub fn load_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match cfg.dataset {
        DatasetKind::Synthetic => {
            let full = data::gen_synthetic(
                cfg.synthetic_classes,
                cfg.synthetic_dim,
                cfg.synthetic_per_class,
                cfg.synthetic_spread,
                cfg.data_seed,
            )?;
            data::split_holdout(&full, cfg.holdout_fraction, cfg.data_seed)
        }
        DatasetKind::Mnist => {
            let (Some(images), Some(labels)) = (&cfg.mnist_images, &cfg.mnist_labels) else {
                return Err(Error::InvalidConfig(
                    "dataset: mnist needs mnist_images and mnist_labels".into(),
                ));
            };
            let full = data::load_mnist(images, labels)?;
            match (&cfg.mnist_test_images, &cfg.mnist_test_labels) {
                (Some(ti), Some(tl)) => Ok((full, data::load_mnist(ti, tl)?)),
                _ => data::split_holdout(&full, cfg.holdout_fraction, cfg.data_seed),
            }
        }
    }
}

/// Partitions already-loaded data according to the config.
pub fn prepare_from(cfg: &ExperimentConfig, train: Dataset, test: Dataset) -> Result<PreparedData> {
    let partition = data::partition_noniid(
        &train,
        cfg.client_count,
        cfg.shard_clients(),
        cfg.shard_size,
        cfg.majority_class,
        cfg.partition_seed,
    )?;
    Ok(PreparedData {
        test: test.to_batch(),
        train,
        partition,
    })
}

/// Result of one client's local training.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    pub model: ModelParams,
    pub sample_count: usize,
    pub steps: usize,
}

/// Copies `global` and runs `epochs` passes of shuffled minibatch SGD over
/// the client's samples.
pub fn local_train(
    dataset: &Dataset,
    indices: &[usize],
    global: &ModelParams,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<LocalUpdate> {
    if indices.is_empty() {
        return Err(Error::ContractViolation("local training on an empty partition".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
    }
    let mut model = global.clone();
    let mut order = indices.to_vec();
    let mut steps = 0;
    for _ in 0..epochs {
        order.shuffle(rng);
        for chunk in order.chunks(batch_size) {
            let batch = dataset.batch(chunk);
            let (_, grads) = nn::loss_and_grad(&model, &batch)?;
            model.apply_sgd(&grads, lr)?;
            steps += 1;
        }
    }
    Ok(LocalUpdate {
        model,
        sample_count: indices.len(),
        steps,
    })
}

/// Sample-count weighted parameter average.
pub fn aggregate(updates: &[(ModelParams, usize)]) -> Result<ModelParams> {
    let Some((first, _)) = updates.first() else {
        return Err(Error::InvalidInput("no updates to aggregate".into()));
    };
    let total: usize = updates.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(Error::InvalidInput("updates carry zero samples".into()));
    }
    let mut out = ModelParams::zeros(&first.layer_dims())?;
    for (model, n) in updates {
        out.check_shape(model, "aggregate")?;
        let w = *n as f64 / total as f64;
        for (dst, src) in out.layers.iter_mut().zip(&model.layers) {
            for (d, s) in dst.weights.iter_mut().zip(&src.weights) {
                *d += w * s;
            }
            for (d, s) in dst.bias.iter_mut().zip(&src.bias) {
                *d += w * s;
            }
        }
    }
    Ok(out)
}

/// One simulated device.
#[derive(Debug, Clone, PartialEq)]
pub struct Client {
    pub id: usize,
    pub role: PowerRole,
    pub params: BatteryParams,
    pub battery: BatteryState,
    pub selections: usize,
    pub standby_rounds: usize,
    /// Drain charged for the one-time similarity upload.
    pub init_charge: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub selected: Vec<usize>,
    pub test_accuracy: f64,
    /// Clients alive after this round's battery step.
    pub alive_count: usize,
    /// Every client's level at the start of the round.
    pub battery_snapshot: Vec<f64>,
    #[serde(skip)]
    pub wall_time: Duration,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxRounds,
    NetworkDeath,
    InsufficientClients,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSummary {
    pub id: usize,
    pub role: PowerRole,
    pub params: BatteryParams,
    pub selections: usize,
    pub standby_rounds: usize,
    pub init_charge: f64,
    pub final_level: f64,
    pub death_round: Option<usize>,
    pub sample_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityDiagnostics {
    pub matrix: SimilarityMatrix,
    pub clusters: ClusterModel,
    /// Matrix rebuilt from the final global model, when requested.
    pub final_matrix: Option<SimilarityMatrix>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentHistory {
    pub config: ExperimentConfig,
    pub energy_only: bool,
    pub initial_accuracy: f64,
    pub rounds: Vec<RoundRecord>,
    pub rounds_lasted: usize,
    pub final_accuracy: f64,
    pub stop_reason: StopReason,
    pub clients: Vec<ClientSummary>,
    pub similarity: Option<SimilarityDiagnostics>,
}

impl ExperimentHistory {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("history is serializable");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format {
            field: "history".into(),
            reason: e.to_string(),
        })
    }

    /// `round,selected,test_accuracy,alive_count,b0..b{K-1}`; selected ids
    /// are `;`-separated.
    pub fn rounds_csv(&self) -> String {
        let k = self.clients.len();
        let mut out = String::from("round,selected,test_accuracy,alive_count");
        for i in 0..k {
            let _ = write!(out, ",b{i}");
        }
        out.push('\n');
        for r in &self.rounds {
            let sel: Vec<String> = r.selected.iter().map(|s| s.to_string()).collect();
            let _ = write!(
                out,
                "{},{},{},{}",
                r.round,
                sel.join(";"),
                r.test_accuracy,
                r.alive_count
            );
            for b in &r.battery_snapshot {
                let _ = write!(out, ",{b}");
            }
            out.push('\n');
        }
        out
    }

    pub fn accuracy_curve(&self) -> Vec<f64> {
        self.rounds.iter().map(|r| r.test_accuracy).collect()
    }
}

/// Whether rounds train models or only advance selection and batteries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Full,
    /// Skips local training and evaluation after the (FedLE) bootstrap.
    /// Selection and battery trajectories match `Full` for every strategy.
    EnergyOnly,
}

/// State of one experiment run.
pub struct Simulation<'d> {
    cfg: ExperimentConfig,
    data: &'d PreparedData,
    mode: RunMode,
    clients: Vec<Client>,
    capacities: Vec<u64>,
    global: ModelParams,
    selection_rng: ChaCha8Rng,
    bootstrap: Option<(SimilarityMatrix, ClusterModel)>,
    round: usize,
    records: Vec<RoundRecord>,
    initial_accuracy: f64,
    stop: Option<StopReason>,
}

/// Low/high roles: a seeded permutation, the first `round(f*K)` clients of
/// which are low-powered.
pub fn assign_roles(client_count: usize, low_fraction: f64, seed: u64) -> Vec<PowerRole> {
    let low = (client_count as f64 * low_fraction).round() as usize;
    let mut order: Vec<usize> = (0..client_count).collect();
    order.shuffle(&mut stream(&[seed, ROLE_STREAM]));
    let mut roles = vec![PowerRole::High; client_count];
    for &id in order.iter().take(low) {
        roles[id] = PowerRole::Low;
    }
    roles
}

impl<'d> Simulation<'d> {
    pub fn new(cfg: &ExperimentConfig, data: &'d PreparedData, mode: RunMode) -> Result<Self> {
        cfg.validate()?;
        if data.partition.client_count() != cfg.client_count {
            return Err(Error::InvalidConfig(format!(
                "partition has {} clients, config {}",
                data.partition.client_count(),
                cfg.client_count
            )));
        }
        let roles = assign_roles(cfg.client_count, cfg.low_power_fraction, cfg.battery_seed);
        let mut battery_rng = stream(&[cfg.battery_seed]);
        let mut clients = Vec::with_capacity(cfg.client_count);
        for (id, role) in roles.into_iter().enumerate() {
            let params = energy::draw_battery_params(role, cfg.scales(), &mut battery_rng)?;
            clients.push(Client {
                id,
                role,
                battery: BatteryState::new(&params, cfg.critical_level),
                params,
                selections: 0,
                standby_rounds: 0,
                init_charge: 0.0,
            });
        }
        let capacities = clients
            .iter()
            .map(|c| selection::capacity(&c.params, cfg.critical_level))
            .collect();
        let dims = cfg.layer_dims(data.train.dim(), data.train.class_count);
        let global = nn::init_model(&dims, cfg.init_seed)?;
        let initial_accuracy = match mode {
            RunMode::Full => nn::evaluate(&global, &data.test)?,
            RunMode::EnergyOnly => 0.0,
        };
        Ok(Self {
            cfg: cfg.clone(),
            data,
            mode,
            clients,
            capacities,
            global,
            selection_rng: stream(&[cfg.selection_seed]),
            bootstrap: None,
            round: 0,
            records: Vec::new(),
            initial_accuracy,
            stop: None,
        })
    }

    pub fn clients(&self) -> &[Client] {
        &self.clients
    }

    pub fn global(&self) -> &ModelParams {
        &self.global
    }

    pub fn records(&self) -> &[RoundRecord] {
        &self.records
    }

    pub fn levels(&self) -> Vec<f64> {
        self.clients.iter().map(|c| c.battery.level).collect()
    }

    fn train_client(&self, id: usize, model: &ModelParams, round: u64, epochs: usize) -> Result<LocalUpdate> {
        let mut rng = stream(&[self.cfg.init_seed, TRAIN_STREAM, round, id as u64]);
        local_train(
            &self.data.train,
            &self.data.partition.clients[id],
            model,
            epochs,
            self.cfg.learning_rate,
            self.cfg.batch_size,
            &mut rng,
        )
    }

    /// Every client trains one epoch from `model`; returns their similarity matrix.
    fn similarity_from(&self, model: &ModelParams, round: u64) -> Result<SimilarityMatrix> {
        let vectors = (0..self.clients.len())
            .into_par_iter()
            .map(|id| {
                self.train_client(id, model, round, 1)
                    .map(|u| nn::flatten_partial(&u.model))
            })
            .collect::<Result<Vec<_>>>()?;
        similarity::build_similarity_matrix(&vectors, self.cfg.metric)
    }

    /// One-time similarity matrix and clustering. Every client pays one
    /// standby and one communication cost. Later calls return the cached
    /// result without charging anything.
    pub fn bootstrap_similarity(&mut self) -> Result<&(SimilarityMatrix, ClusterModel)> {
        if self.bootstrap.is_none() {
            if self.round != 0 {
                return Err(Error::ContractViolation(
                    "similarity bootstrap must run before round 1".into(),
                ));
            }
            let matrix = self.similarity_from(&self.global, 0)?;
            let clusters = similarity::cluster_clients(
                &matrix,
                &ClusterOptions {
                    k: self.cfg.cluster_count,
                    space: self.cfg.cluster_space,
                    seed: mix_seed(&[self.cfg.selection_seed, KMEANS_STREAM]),
                    max_iters: self.cfg.kmeans_max_iters,
                    tol: self.cfg.kmeans_tol,
                },
            )?;
            let critical = self.cfg.critical_level;
            for c in self.clients.iter_mut().filter(|c| c.battery.alive) {
                c.battery = energy::step_battery(&c.battery, &c.params, false, 1, critical)?;
                c.init_charge = energy::step_cost(&c.params, false, 1);
                if !c.battery.alive {
                    c.battery.death_round = Some(0);
                }
            }
            self.bootstrap = Some((matrix, clusters));
        }
        Ok(self.bootstrap.as_ref().expect("just set"))
    }

    fn alive_ids(&self) -> Vec<usize> {
        self.clients
            .iter()
            .filter(|c| c.battery.alive)
            .map(|c| c.id)
            .collect()
    }

    /// Runs one round, or returns `None` once a stop condition holds.
    pub fn run_round(&mut self) -> Result<Option<&RoundRecord>> {
        if self.stop.is_some() {
            return Ok(None);
        }
        if self.round >= self.cfg.max_rounds {
            self.stop = Some(StopReason::MaxRounds);
            return Ok(None);
        }
        let levels = self.levels();
        if !energy::network_alive(&levels, self.cfg.critical_level, self.cfg.dead_fraction_stop) {
            self.stop = Some(StopReason::NetworkDeath);
            return Ok(None);
        }
        let alive = self.alive_ids();
        let m = self.cfg.clients_per_round();
        if alive.len() < m {
            self.stop = Some(StopReason::InsufficientClients);
            return Ok(None);
        }
        if self.cfg.strategy == Strategy::FedLe && self.bootstrap.is_none() {
            return Err(Error::ContractViolation(
                "FedLE round before similarity bootstrap".into(),
            ));
        }

        let started = Instant::now();
        let round = self.round + 1;
        let params: Vec<BatteryParams> = self.clients.iter().map(|c| c.params).collect();
        let ctx = SelectionContext {
            round,
            alive: &alive,
            battery_levels: &levels,
            battery_params: &params,
            clusters: self.bootstrap.as_ref().map(|(_, c)| c),
            m,
            critical: self.cfg.critical_level,
            w_maj: self.cfg.w_maj,
        };
        let selected = match selection::select(
            self.cfg.strategy,
            &ctx,
            &self.capacities,
            &mut self.selection_rng,
        ) {
            Ok(s) => s,
            Err(Error::InsufficientClients { .. }) => {
                self.stop = Some(StopReason::InsufficientClients);
                return Ok(None);
            }
            Err(e) => return Err(e),
        };

        if self.mode == RunMode::Full {
            let updates = selected
                .par_iter()
                .map(|&id| {
                    self.train_client(id, &self.global, round as u64, self.cfg.local_epochs)
                        .map(|u| (u.model, u.sample_count))
                })
                .collect::<Result<Vec<_>>>()?;
            self.global = aggregate(&updates)?;
        }

        let critical = self.cfg.critical_level;
        for c in self.clients.iter_mut().filter(|c| c.battery.alive) {
            let chosen = selected.contains(&c.id);
            c.battery = energy::step_battery(&c.battery, &c.params, chosen, 0, critical)?;
            c.standby_rounds += 1;
            if chosen {
                c.selections += 1;
            }
            if !c.battery.alive {
                c.battery.death_round = Some(round);
            }
        }

        let test_accuracy = match self.mode {
            RunMode::Full => nn::evaluate(&self.global, &self.data.test)?,
            RunMode::EnergyOnly => 0.0,
        };
        self.round = round;
        self.records.push(RoundRecord {
            round,
            selected,
            test_accuracy,
            alive_count: self.clients.iter().filter(|c| c.battery.alive).count(),
            battery_snapshot: levels,
            wall_time: started.elapsed(),
        });
        Ok(self.records.last())
    }

    /// Runs rounds until a stop condition and returns the history.
    pub fn run(mut self) -> Result<ExperimentHistory> {
        if self.cfg.strategy == Strategy::FedLe {
            self.bootstrap_similarity()?;
        }
        while self.run_round()?.is_some() {
            let r = self.records.last().expect("round recorded");
            log::debug!(
                "{} round {} selected {:?} acc {:.4} alive {}",
                self.cfg.strategy,
                r.round,
                r.selected,
                r.test_accuracy,
                r.alive_count
            );
        }
        self.finish()
    }

    fn finish(self) -> Result<ExperimentHistory> {
        let final_matrix = if self.cfg.diagnostic_final_matrix && self.mode == RunMode::Full {
            Some(self.similarity_from(&self.global, DIAG_ROUND)?)
        } else {
            None
        };
        let similarity = self.bootstrap.map(|(matrix, clusters)| SimilarityDiagnostics {
            matrix,
            clusters,
            final_matrix,
        });
        let clients = self
            .clients
            .iter()
            .map(|c| ClientSummary {
                id: c.id,
                role: c.role,
                params: c.params,
                selections: c.selections,
                standby_rounds: c.standby_rounds,
                init_charge: c.init_charge,
                final_level: c.battery.level,
                death_round: c.battery.death_round,
                sample_count: self.data.partition.clients[c.id].len(),
            })
            .collect();
        Ok(ExperimentHistory {
            rounds_lasted: self.records.len(),
            final_accuracy: self
                .records
                .last()
                .map_or(self.initial_accuracy, |r| r.test_accuracy),
            initial_accuracy: self.initial_accuracy,
            energy_only: self.mode == RunMode::EnergyOnly,
            stop_reason: self.stop.unwrap_or(StopReason::MaxRounds),
            config: self.cfg,
            rounds: self.records,
            clients,
            similarity,
        })
    }
}

/// Runs one experiment on already prepared data.
pub fn run_with_data(cfg: &ExperimentConfig, data: &PreparedData, mode: RunMode) -> Result<ExperimentHistory> {
    Simulation::new(cfg, data, mode)?.run()
}

/// Validates the config, prepares data and runs the experiment.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentHistory> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    run_with_data(cfg, &data, RunMode::Full)
}
