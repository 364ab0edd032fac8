//! Training protocols as pure round transitions over simulated participants.
//!
//! Every protocol keeps a client-side and a server-side [`DenseNet`] in
//! [`FederationState`]. For SplitMe the server side is the inverse model
//! (labels → cut representation); for the baselines it is the back half of
//! the ordinary model.

mod baselines;
mod inversion;
mod ledger;
mod splitme;

pub use baselines::{fedavg_round, oranfed_round, sfl_gradients, vanilla_sfl_round};
pub use inversion::{allreduce_sum, invert_server_model, Inversion};
pub use ledger::{Channel, Direction, TransferEvent, TransferKind, TransferLedger};
pub use splitme::splitme_round;

use std::fmt;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::LabeledDataset;
use crate::nn::{backward, Batch, DenseNet, GradClipBound, Gradients, Loss, NnError};
use crate::ridge::SolveError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("no participant selected")]
    EmptySelection,
    #[error("local updates must be at least 1")]
    ZeroLocalUpdates,
    #[error("training diverged in round {round}")]
    Diverged { round: usize },
    #[error("inversion of server layer {layer} failed: {source}")]
    Inversion { layer: usize, source: SolveError },
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Splitme,
    Fedavg,
    Sfl,
    Oranfed,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Splitme => "splitme",
            Protocol::Fedavg => "fedavg",
            Protocol::Sfl => "sfl",
            Protocol::Oranfed => "oranfed",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "splitme" => Ok(Protocol::Splitme),
            "fedavg" => Ok(Protocol::Fedavg),
            "sfl" => Ok(Protocol::Sfl),
            "oranfed" => Ok(Protocol::Oranfed),
            other => Err(format!("unknown protocol `{other}`")),
        }
    }
}

/// Global models between rounds.
#[derive(Clone, Debug, PartialEq)]
pub struct FederationState {
    pub client: DenseNet,
    pub server: DenseNet,
    /// Index of the next round to run.
    pub round: usize,
}

impl FederationState {
    pub fn new(client: DenseNet, server: DenseNet) -> Self {
        Self { client, server, round: 0 }
    }
}

/// Optimizer settings shared by all protocols.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Client-side learning rate (SplitMe step 2).
    pub lr_client: f64,
    /// Inverse-server learning rate (SplitMe step 3).
    pub lr_server: f64,
    /// Learning rate of the baselines.
    pub lr: f64,
    pub batch_size: usize,
    pub clip: GradClipBound,
    /// Ridge factor of the final inversion.
    pub gamma: f64,
    pub seed: u64,
}

/// Cut-layer activations a client uploaded in a SplitMe round.
#[derive(Clone, Debug, PartialEq)]
pub struct Upload {
    pub client: usize,
    pub activations: Array2<f64>,
}

/// Learning-side result of one round.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundOutcome {
    /// Mean training loss over every local step of every participant.
    pub loss: f64,
    pub events: Vec<TransferEvent>,
    pub uploads: Vec<Upload>,
}

/// Deterministic per-(round, client, stream) seed.
pub(crate) fn derive_seed(seed: u64, round: usize, client: usize, stream: u64) -> u64 {
    let mut z = seed
        ^ (round as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (client as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ stream.wrapping_mul(0x1656_67B1_9E37_79F9);
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Minibatches drawn without replacement, reshuffled once the permutation
/// runs out.
pub(crate) struct MinibatchSampler {
    order: Vec<usize>,
    cursor: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl MinibatchSampler {
    pub(crate) fn new(n: usize, batch: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self {
            order,
            cursor: 0,
            batch: batch.clamp(1, n.max(1)),
            rng,
        }
    }

    pub(crate) fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let out = self.order[self.cursor..self.cursor + self.batch].to_vec();
        self.cursor += self.batch;
        out
    }
}

pub(crate) fn rows(m: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    m.select(Axis(0), idx)
}

pub(crate) fn check_round(selected: &[usize], local_updates: usize, data: &[LabeledDataset]) -> Result<(), ProtocolError> {
    if selected.is_empty() {
        return Err(ProtocolError::EmptySelection);
    }
    if local_updates == 0 {
        return Err(ProtocolError::ZeroLocalUpdates);
    }
    if let Some(&m) = selected.iter().find(|&&m| m >= data.len()) {
        return Err(ProtocolError::Config(format!("client {m} has no dataset")));
    }
    if let Some(&m) = selected.iter().find(|&&m| data[m].is_empty()) {
        return Err(ProtocolError::Config(format!("client {m} has an empty dataset")));
    }
    Ok(())
}

pub(crate) fn ensure_finite(net: &DenseNet, round: usize) -> Result<(), ProtocolError> {
    if net.is_finite() {
        Ok(())
    } else {
        Err(ProtocolError::Diverged { round })
    }
}

/// [`backward`] that reports overflowing outputs as divergence rather than as
/// a malformed prediction.
pub(crate) fn guarded_backward(net: &DenseNet, batch: &Batch, round: usize) -> Result<(f64, Gradients), ProtocolError> {
    let (loss, grads) =
        backward(net, batch, Loss::KlDivergence).map_err(|e| overflow_or(e, || net.forward(batch.inputs.view()), round))?;
    if !loss.is_finite() {
        return Err(ProtocolError::Diverged { round });
    }
    Ok((loss, grads))
}

pub(crate) fn overflow_or(
    err: NnError,
    output: impl FnOnce() -> Result<Array2<f64>, NnError>,
    round: usize,
) -> ProtocolError {
    match output() {
        Ok(out) if out.iter().any(|v| !v.is_finite()) => ProtocolError::Diverged { round },
        _ => ProtocolError::Nn(err),
    }
}

/// Uniform average over the participants of one round.
pub fn aggregate(models: &[DenseNet]) -> Result<DenseNet, ProtocolError> {
    Ok(DenseNet::mean(models)?)
}
