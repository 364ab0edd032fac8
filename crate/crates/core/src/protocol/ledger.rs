use serde::{Deserialize, Serialize};

use super::Protocol;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Uplink,
    Downlink,
}

/// What a transfer carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TransferKind {
    /// Client model and the inverse model's output on the client's labels.
    ModelAndInverseLabels,
    /// Updated client model and cut-layer activations of the whole local dataset.
    ModelAndActivations,
    /// Cut-layer activations of one minibatch.
    SmashedBatch,
    /// Gradient of one minibatch at the cut.
    GradientBatch,
    /// Client-side model exchanged with the aggregation server.
    ClientModel,
    FullModel,
}

/// Link a transfer uses. Split-learning exchanges and model transfers run
/// between a client and its server-side application; the separate
/// aggregation server only averages client-side models in vanilla SFL.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Channel {
    ClientServer,
    Aggregator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferEvent {
    pub protocol: Protocol,
    pub round: usize,
    pub client: usize,
    pub direction: Direction,
    pub kind: TransferKind,
    pub channel: Channel,
    pub bits: u64,
}

/// Append-only record of every transfer.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TransferLedger {
    events: Vec<TransferEvent>,
}

impl TransferLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn extend(&mut self, events: impl IntoIterator<Item = TransferEvent>) {
        self.events.extend(events);
    }

    pub fn events(&self) -> &[TransferEvent] {
        &self.events
    }

    fn in_round(&self, round: usize) -> impl Iterator<Item = &TransferEvent> {
        self.events.iter().filter(move |e| e.round == round)
    }

    /// Client–server transfer events of `client` in `round`.
    pub fn transfer_events(&self, round: usize, client: usize) -> usize {
        self.in_round(round)
            .filter(|e| e.client == client && e.channel == Channel::ClientServer)
            .count()
    }

    pub fn bits(&self, round: usize, direction: Direction) -> u64 {
        self.in_round(round)
            .filter(|e| e.direction == direction)
            .map(|e| e.bits)
            .sum()
    }

    pub fn total_bits(&self) -> u64 {
        self.events.iter().map(|e| e.bits).sum()
    }

    pub fn rounds(&self) -> Vec<usize> {
        let mut r: Vec<usize> = self.events.iter().map(|e| e.round).collect();
        r.sort_unstable();
        r.dedup();
        r
    }
}
