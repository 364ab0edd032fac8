//! Experiment runner: wires data, models, optimizer, protocols and the
//! simulator into one run and writes its metric files.

mod config;
mod output;

pub use config::{
    BaselineConfig, DataConfig, DataSource, ExperimentConfig, InversionFeatures, ModelConfig, SystemConfig,
    TrainingConfig,
};
pub use output::{compare, read_summary, write_outputs, ComparisonRow, CSV_HEADER, CSV_VERSION_LINE};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{gen_synthetic, load_csv, partition, train_test_split, DataError, LabeledDataset, PartitionSpec};
use crate::model::{full_model, split, ArchitectureSpec, ModelError, SplitSizes};
use crate::nn::{accuracy, DenseNet};
use crate::protocol::{
    fedavg_round, invert_server_model, oranfed_round, splitme_round, vanilla_sfl_round, FederationState, Protocol,
    ProtocolError, RoundOutcome, TrainConfig, TransferLedger, Upload,
};
use crate::simnet::{execute_round, sample_profiles, RoundRecord, SimClock, SimEnv, SimError};
use crate::sysopt::{allocate, select_trainers, uniform_plan, RoundPlan, SelectorState};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("comparison error: {0}")]
    Compare(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Training data split across clients plus the shared test set.
#[derive(Clone, Debug)]
pub struct Workbench {
    pub clients: Vec<LabeledDataset>,
    pub test: LabeledDataset,
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<Workbench, HarnessError> {
    let d = &cfg.data;
    let split_data = match d.source {
        DataSource::Synthetic => gen_synthetic(d.samples, d.features, d.classes, d.separation, d.seed)?,
        DataSource::Csv => {
            let path = d.csv_path.as_ref().expect("validated");
            let ds = load_csv(path, &d.csv_schema()?)?;
            let spec = cfg.architecture();
            if ds.feature_width() != spec.input_width() || ds.class_count() != spec.class_count() {
                return Err(HarnessError::Config(format!(
                    "csv has {} features and {} classes; model expects {} and {}",
                    ds.feature_width(),
                    ds.class_count(),
                    spec.input_width(),
                    spec.class_count()
                )));
            }
            train_test_split(&ds, d.seed)
        }
    };
    let clients = partition(
        &split_data.train,
        &PartitionSpec {
            clients: cfg.system.clients,
            mode: d.partition,
            seed: d.seed,
        },
    )?;
    Ok(Workbench {
        clients,
        test: split_data.test,
    })
}

/// Selection and allocation inputs behind one emitted plan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanTrace {
    pub round: usize,
    /// Uplink estimate used by the selection filter.
    pub t_max_ms: f64,
    /// Local-update cap used for selection.
    pub e_cap: usize,
    pub plan: Option<RoundPlan>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub protocol: String,
    pub seed: u64,
    pub data_seed: u64,
    pub rounds_executed: usize,
    pub rounds_skipped: usize,
    pub rounds_to_target: Option<usize>,
    pub time_to_target_ms: Option<f64>,
    pub final_accuracy: f64,
    pub total_uplink_bits: u64,
    pub total_downlink_bits: u64,
    pub total_volume_mb: f64,
    pub total_time_ms: f64,
    pub total_r_co: f64,
    pub total_r_cp: f64,
    pub mean_k: f64,
    pub mean_transfer_events: f64,
    pub inversion_ms: f64,
    pub failure: Option<String>,
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub records: Vec<RoundRecord>,
    pub plans: Vec<PlanTrace>,
    pub ledger: TransferLedger,
    pub model: DenseNet,
    pub summary: Summary,
    /// Set when training diverged; records stop at the failing round.
    pub diverged: bool,
}

/// Per-protocol round driver.
struct Driver<'a> {
    cfg: &'a ExperimentConfig,
    train: TrainConfig,
    spec: ArchitectureSpec,
    env: SimEnv,
    bench: &'a Workbench,
    selector: Option<SelectorState>,
    last_selected: Vec<usize>,
    last_uploads: Vec<Upload>,
}

impl Driver<'_> {
    /// Plan for `round`, or `None` when nobody fits the deadline.
    fn plan(&mut self, round: usize) -> Result<(PlanTrace, Option<RoundPlan>), HarnessError> {
        let protocol = self.cfg.protocol;
        let m = self.cfg.system.clients;
        match protocol {
            Protocol::Splitme | Protocol::Oranfed => {
                let work = self.env.workload(protocol);
                let sel = self.selector.as_ref().expect("selector for planned protocols");
                let selected = select_trainers(&work, &self.env.deadlines_ms(), sel, sel.e_last);
                let trace = PlanTrace {
                    round,
                    t_max_ms: sel.t_max_ms,
                    e_cap: sel.e_last,
                    plan: None,
                };
                if selected.is_empty() {
                    return Ok((trace, None));
                }
                let plan = allocate(&selected, &work, &self.env.costs, sel.e_last).map_err(SimError::from)?;
                Ok((
                    PlanTrace {
                        plan: Some(plan.clone()),
                        ..trace
                    },
                    Some(plan),
                ))
            }
            Protocol::Fedavg | Protocol::Sfl => {
                let (k, e) = if protocol == Protocol::Fedavg {
                    (self.cfg.baselines.fedavg_clients, self.cfg.baselines.fedavg_local_updates)
                } else {
                    (self.cfg.baselines.sfl_clients, self.cfg.baselines.sfl_local_updates)
                };
                let k = k.min(m);
                let mut rng = ChaCha8Rng::seed_from_u64(crate::protocol::derive_seed(self.cfg.seed, round, usize::MAX, 7));
                let mut selected = rand::seq::index::sample(&mut rng, m, k).into_vec();
                selected.sort_unstable();
                let plan = uniform_plan(m, &selected, e);
                Ok((
                    PlanTrace {
                        round,
                        t_max_ms: 0.0,
                        e_cap: e,
                        plan: Some(plan.clone()),
                    },
                    Some(plan),
                ))
            }
        }
    }

    fn transition(&self, state: &FederationState, plan: &RoundPlan) -> Result<(FederationState, RoundOutcome), ProtocolError> {
        let data = &self.bench.clients;
        match self.cfg.protocol {
            Protocol::Splitme => splitme_round(state, plan, data, &self.train),
            Protocol::Fedavg => fedavg_round(state, &plan.selected, plan.local_updates, data, &self.train),
            Protocol::Sfl => vanilla_sfl_round(state, &plan.selected, plan.local_updates, data, &self.train),
            Protocol::Oranfed => oranfed_round(state, plan, data, &self.train),
        }
    }

    /// Joined model for evaluation or deployment. SplitMe recovers its server
    /// side by inversion over the last round's participants.
    fn joined(&self, state: &FederationState) -> Result<DenseNet, HarnessError> {
        if self.cfg.protocol != Protocol::Splitme {
            return Ok(state.client.join(&state.server).map_err(ModelError::from)?);
        }
        let participants: Vec<usize> = if self.last_selected.is_empty() {
            (0..self.cfg.system.clients).collect()
        } else {
            self.last_selected.clone()
        };
        let features: Vec<Array2<f64>> = match self.cfg.training.inversion_features {
            InversionFeatures::Uploaded if !self.last_uploads.is_empty() => {
                self.last_uploads.iter().map(|u| u.activations.clone()).collect()
            }
            _ => participants
                .iter()
                .map(|&m| state.client.forward(self.bench.clients[m].features.view()))
                .collect::<Result<_, _>>()
                .map_err(ModelError::from)?,
        };
        let pairs: Vec<_> = participants
            .iter()
            .zip(&features)
            .map(|(&m, f)| (self.bench.clients[m].labels.view(), f.view()))
            .collect();
        let inv = invert_server_model(&state.server, &pairs, self.cfg.training.gamma, &self.spec.server_activations())
            .map_err(SimError::from)?;
        Ok(state.client.join(&inv.server).map_err(ModelError::from)?)
    }

    fn evaluate(&self, state: &FederationState) -> Result<(DenseNet, f64), HarnessError> {
        let model = self.joined(state)?;
        let pred = model.forward(self.bench.test.features.view()).map_err(ModelError::from)?;
        let acc = accuracy(pred.view(), self.bench.test.labels.view());
        Ok((model, acc))
    }
}

fn initial_state(cfg: &ExperimentConfig, spec: &ArchitectureSpec) -> Result<FederationState, HarnessError> {
    if cfg.protocol == Protocol::Splitme {
        let models = split(spec, cfg.seed)?;
        Ok(FederationState::new(models.client, models.inverse_server))
    } else {
        let (client, server) = full_model(spec, cfg.seed)?
            .split_at(spec.cut_index)
            .map_err(ModelError::from)?;
        Ok(FederationState::new(client, server))
    }
}

/// Runs one experiment in memory. Configuration and data problems are
/// errors; divergence ends the run early and is reported in the summary.
pub fn run(cfg: &ExperimentConfig) -> Result<RunReport, HarnessError> {
    cfg.validate()?;
    let bench = prepare_data(cfg)?;
    run_on(cfg, &bench)
}

/// [`run`] on already prepared data.
pub fn run_on(cfg: &ExperimentConfig, bench: &Workbench) -> Result<RunReport, HarnessError> {
    cfg.validate()?;
    let spec = cfg.architecture();
    let samples: Vec<usize> = bench.clients.iter().map(|d| d.len()).collect();
    let env = SimEnv {
        profiles: sample_profiles(cfg.system.clients, cfg.system.profile_seed, &cfg.system.ranges())?,
        sizes: SplitSizes::from_spec(&spec).with_samples(&samples),
        costs: cfg.system.cost_params(),
    };
    let selector = match cfg.protocol {
        Protocol::Splitme | Protocol::Oranfed => Some(
            SelectorState::initial(&env.workload(cfg.protocol), &env.costs, cfg.system.alpha, cfg.system.e_initial)
                .map_err(SimError::from)?,
        ),
        _ => None,
    };
    let mut driver = Driver {
        cfg,
        train: cfg.train_config()?,
        spec: spec.clone(),
        env,
        bench,
        selector,
        last_selected: Vec::new(),
        last_uploads: Vec::new(),
    };

    let mut state = initial_state(cfg, &spec)?;
    let mut clock = SimClock::new();
    let mut ledger = TransferLedger::new();
    let mut records = Vec::new();
    let mut plans = Vec::new();
    let mut failure = None;
    let mut rounds_to_target = None;
    let mut time_to_target_ms = None;

    for round in 0..cfg.rounds {
        let (trace, plan) = driver.plan(round)?;
        plans.push(trace);
        let Some(plan) = plan else {
            records.push(RoundRecord::skipped(round, cfg.protocol));
            clock.skip();
            continue;
        };
        let result = execute_round(&driver.env, &mut clock, &mut ledger, cfg.protocol, &plan, || {
            driver.transition(&state, &plan)
        });
        let (next, outcome, mut record, acc) = match result {
            Ok(r) => r,
            Err(SimError::Protocol(e @ ProtocolError::Diverged { .. })) => {
                failure = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e.into()),
        };
        state = next;
        driver.last_selected = plan.selected.clone();
        driver.last_uploads = outcome.uploads;
        if let Some(sel) = driver.selector.as_mut() {
            sel.observe(acc.max_uplink_ms);
            sel.e_last = plan.local_updates;
        }
        let last = round + 1 == cfg.rounds;
        if (round + 1) % cfg.eval_interval == 0 || last {
            let (_, test_acc) = driver.evaluate(&state)?;
            record.test_acc = Some(test_acc);
            if rounds_to_target.is_none() && cfg.target_accuracy.is_some_and(|t| test_acc >= t) {
                rounds_to_target = Some(round + 1);
                time_to_target_ms = Some(clock.wall_ms);
            }
        }
        let reached = rounds_to_target.is_some();
        records.push(record);
        if reached {
            break;
        }
    }

    let (model, final_accuracy) = driver.evaluate(&state)?;
    let mut inversion_ms = 0.0;
    if cfg.protocol == Protocol::Splitme {
        inversion_ms = cfg.system.inversion_ms_per_layer * spec.server_widths().len().saturating_sub(1) as f64;
        clock.charge(inversion_ms);
    }
    let summary = summarize(cfg, &records, &ledger, final_accuracy, rounds_to_target, time_to_target_ms, inversion_ms, failure.clone());
    Ok(RunReport {
        config: cfg.clone(),
        records,
        plans,
        ledger,
        model,
        summary,
        diverged: failure.is_some(),
    })
}

#[allow(clippy::too_many_arguments)]
fn summarize(
    cfg: &ExperimentConfig,
    records: &[RoundRecord],
    ledger: &TransferLedger,
    final_accuracy: f64,
    rounds_to_target: Option<usize>,
    time_to_target_ms: Option<f64>,
    inversion_ms: f64,
    failure: Option<String>,
) -> Summary {
    let executed: Vec<&RoundRecord> = records.iter().filter(|r| !r.skipped).collect();
    let n = executed.len();
    let mean = |f: &dyn Fn(&RoundRecord) -> f64| {
        if n == 0 {
            0.0
        } else {
            executed.iter().map(|r| f(r)).sum::<f64>() / n as f64
        }
    };
    let total_uplink_bits: u64 = records.iter().map(|r| r.uplink_bits).sum();
    let total_downlink_bits: u64 = records.iter().map(|r| r.downlink_bits).sum();
    debug_assert_eq!(total_uplink_bits + total_downlink_bits, ledger.total_bits());
    Summary {
        protocol: cfg.protocol.name().to_string(),
        seed: cfg.seed,
        data_seed: cfg.data.seed,
        rounds_executed: n,
        rounds_skipped: records.len() - n,
        rounds_to_target,
        time_to_target_ms,
        final_accuracy,
        total_uplink_bits,
        total_downlink_bits,
        total_volume_mb: crate::simnet::bits_to_mb(total_uplink_bits + total_downlink_bits),
        total_time_ms: records.iter().map(|r| r.t_total_ms).sum(),
        total_r_co: records.iter().map(|r| r.r_co).sum(),
        total_r_cp: records.iter().map(|r| r.r_cp).sum(),
        mean_k: mean(&|r| r.k() as f64),
        mean_transfer_events: mean(&|r| r.transfer_events),
        inversion_ms,
        failure,
    }
}
