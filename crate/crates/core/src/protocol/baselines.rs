use ndarray::Array2;
use rayon::prelude::*;

use super::{
    aggregate, check_round, derive_seed, ensure_finite, guarded_backward, overflow_or, rows, Channel, Direction, FederationState, MinibatchSampler, Protocol,
    ProtocolError, RoundOutcome, TrainConfig, TransferEvent, TransferKind,
};
use crate::data::LabeledDataset;
use crate::model::{payload_bits, SCALAR_BITS};
use crate::nn::{backward_with_upstream, clip_then_step, Batch, DenseNet, Gradients, Loss};
use crate::sysopt::RoundPlan;

const FULL_STREAM: u64 = 3;
const SFL_STREAM: u64 = 4;

/// Trained client half, server half and per-step losses of one participant.
type LocalRun = (DenseNet, DenseNet, Vec<f64>);

fn finish(
    state: &FederationState,
    results: Vec<LocalRun>,
    events: Vec<TransferEvent>,
) -> Result<(FederationState, RoundOutcome), ProtocolError> {
    let losses: Vec<f64> = results.iter().flat_map(|r| r.2.iter().copied()).collect();
    let loss = losses.iter().sum::<f64>() / losses.len() as f64;
    let clients: Vec<DenseNet> = results.iter().map(|r| r.0.clone()).collect();
    let servers: Vec<DenseNet> = results.iter().map(|r| r.1.clone()).collect();
    let client = aggregate(&clients)?;
    let server = aggregate(&servers)?;
    if !loss.is_finite() || !client.is_finite() || !server.is_finite() {
        return Err(ProtocolError::Diverged { round: state.round });
    }
    let next = FederationState {
        client,
        server,
        round: state.round + 1,
    };
    Ok((
        next,
        RoundOutcome {
            loss,
            events,
            uploads: Vec::new(),
        },
    ))
}

fn full_model_round(
    protocol: Protocol,
    state: &FederationState,
    selected: &[usize],
    local_updates: usize,
    data: &[LabeledDataset],
    cfg: &TrainConfig,
) -> Result<(FederationState, RoundOutcome), ProtocolError> {
    check_round(selected, local_updates, data)?;
    let cut = state.client.depth();
    let global = state.client.join(&state.server)?;
    let results: Vec<LocalRun> = selected
        .par_iter()
        .map(|&m| {
            let d = &data[m];
            let mut net = global.clone();
            let mut sampler = MinibatchSampler::new(d.len(), cfg.batch_size, derive_seed(cfg.seed, state.round, m, FULL_STREAM));
            let mut losses = Vec::with_capacity(local_updates);
            for _ in 0..local_updates {
                ensure_finite(&net, state.round)?;
                let idx = sampler.next_batch();
                let batch = Batch::new(rows(&d.features, &idx), rows(&d.labels, &idx))?;
                let (loss, grads) = guarded_backward(&net, &batch, state.round)?;
                losses.push(loss);
                net = clip_then_step(&net, grads, cfg.lr, cfg.clip)?;
            }
            ensure_finite(&net, state.round)?;
            let (c, s) = net.split_at(cut)?;
            Ok((c, s, losses))
        })
        .collect::<Result<_, ProtocolError>>()?;

    let bits = payload_bits(&global);
    let events = selected
        .iter()
        .flat_map(|&m| {
            [Direction::Downlink, Direction::Uplink].map(|direction| TransferEvent {
                protocol,
                round: state.round,
                client: m,
                direction,
                kind: TransferKind::FullModel,
                channel: Channel::ClientServer,
                bits,
            })
        })
        .collect();
    finish(state, results, events)
}

/// FedAvg over the given clients with `E` full-model local steps each.
pub fn fedavg_round(
    state: &FederationState,
    selected: &[usize],
    local_updates: usize,
    data: &[LabeledDataset],
    cfg: &TrainConfig,
) -> Result<(FederationState, RoundOutcome), ProtocolError> {
    full_model_round(Protocol::Fedavg, state, selected, local_updates, data, cfg)
}

/// FedAvg driven by a deadline-aware plan. Learning is identical to
/// [`fedavg_round`]; only the accounting differs.
pub fn oranfed_round(
    state: &FederationState,
    plan: &RoundPlan,
    data: &[LabeledDataset],
    cfg: &TrainConfig,
) -> Result<(FederationState, RoundOutcome), ProtocolError> {
    full_model_round(Protocol::Oranfed, state, &plan.selected, plan.local_updates, data, cfg)
}

/// Loss and gradients of one split step: the client forwards to the cut, the
/// server computes the loss and returns the cut gradient, the client
/// backpropagates it. Returns `(loss, client grads, server grads, smashed)`.
pub fn sfl_gradients(
    client: &DenseNet,
    server: &DenseNet,
    batch: &Batch,
) -> Result<(f64, Gradients, Gradients, Array2<f64>), ProtocolError> {
    let smashed = client.forward(batch.inputs.view())?;
    let out = server.forward(smashed.view())?;
    let (loss, upstream) = Loss::KlDivergence.evaluate(out.view(), batch.targets.view())?;
    let (server_grads, cut_grad) = backward_with_upstream(server, smashed.view(), upstream.view())?;
    let (client_grads, _) = backward_with_upstream(client, batch.inputs.view(), cut_grad.view())?;
    Ok((loss, client_grads, server_grads, smashed))
}

/// Vanilla split federated learning: per local step one smashed batch goes up
/// and one gradient batch comes down. Each client trains its own copy of the
/// server half and both halves are averaged at the end of the round.
pub fn vanilla_sfl_round(
    state: &FederationState,
    selected: &[usize],
    local_updates: usize,
    data: &[LabeledDataset],
    cfg: &TrainConfig,
) -> Result<(FederationState, RoundOutcome), ProtocolError> {
    check_round(selected, local_updates, data)?;
    let per_client: Vec<(LocalRun, Vec<u64>)> = selected
        .par_iter()
        .map(|&m| {
            let d = &data[m];
            let mut client = state.client.clone();
            let mut server = state.server.clone();
            let mut sampler = MinibatchSampler::new(d.len(), cfg.batch_size, derive_seed(cfg.seed, state.round, m, SFL_STREAM));
            let mut losses = Vec::with_capacity(local_updates);
            let mut batch_bits = Vec::with_capacity(local_updates);
            for _ in 0..local_updates {
                ensure_finite(&client, state.round)?;
                ensure_finite(&server, state.round)?;
                let idx = sampler.next_batch();
                let batch = Batch::new(rows(&d.features, &idx), rows(&d.labels, &idx))?;
                let (loss, cg, sg, smashed) = sfl_gradients(&client, &server, &batch).map_err(|e| match e {
                    ProtocolError::Nn(err) => overflow_or(
                        err,
                        || server.forward(client.forward(batch.inputs.view())?.view()),
                        state.round,
                    ),
                    other => other,
                })?;
                if !loss.is_finite() {
                    return Err(ProtocolError::Diverged { round: state.round });
                }
                losses.push(loss);
                batch_bits.push(smashed.len() as u64 * SCALAR_BITS);
                client = clip_then_step(&client, cg, cfg.lr, cfg.clip)?;
                server = clip_then_step(&server, sg, cfg.lr, cfg.clip)?;
            }
            Ok(((client, server, losses), batch_bits))
        })
        .collect::<Result<_, ProtocolError>>()?;

    let sync_bits = payload_bits(&state.client);
    let mut events = Vec::new();
    for (&m, (_, batch_bits)) in selected.iter().zip(&per_client) {
        let event = |direction, kind, channel, bits| TransferEvent {
            protocol: Protocol::Sfl,
            round: state.round,
            client: m,
            direction,
            kind,
            channel,
            bits,
        };
        events.push(event(Direction::Downlink, TransferKind::ClientModel, Channel::Aggregator, sync_bits));
        for &bits in batch_bits {
            events.push(event(Direction::Uplink, TransferKind::SmashedBatch, Channel::ClientServer, bits));
            events.push(event(Direction::Downlink, TransferKind::GradientBatch, Channel::ClientServer, bits));
        }
        events.push(event(Direction::Uplink, TransferKind::ClientModel, Channel::Aggregator, sync_bits));
    }
    let results = per_client.into_iter().map(|(r, _)| r).collect();
    finish(state, results, events)
}
