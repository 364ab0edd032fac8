use rayon::prelude::*;

use super::{
    aggregate, check_round, derive_seed, ensure_finite, guarded_backward, rows, Channel, Direction, FederationState, MinibatchSampler, Protocol,
    ProtocolError, RoundOutcome, TrainConfig, TransferEvent, TransferKind, Upload,
};
use crate::data::LabeledDataset;
use crate::model::payload_bits;
use crate::nn::{clip_then_step, Batch, DenseNet};
use crate::sysopt::RoundPlan;

const CLIENT_STREAM: u64 = 1;
const SERVER_STREAM: u64 = 2;

struct ClientResult {
    client: DenseNet,
    inverse: DenseNet,
    losses: Vec<f64>,
    activations: ndarray::Array2<f64>,
    download_bits: u64,
    upload_bits: u64,
}

/// `E` clipped SGD steps of `net` on `KL(net(inputs) ‖ targets)`.
fn local_kl_updates(
    mut net: DenseNet,
    inputs: &ndarray::Array2<f64>,
    targets: &ndarray::Array2<f64>,
    steps: usize,
    lr: f64,
    cfg: &TrainConfig,
    seed: u64,
    round: usize,
    losses: &mut Vec<f64>,
) -> Result<DenseNet, ProtocolError> {
    let mut sampler = MinibatchSampler::new(inputs.nrows(), cfg.batch_size, seed);
    for _ in 0..steps {
        ensure_finite(&net, round)?;
        let idx = sampler.next_batch();
        let batch = Batch::new(rows(inputs, &idx), rows(targets, &idx))?;
        let (loss, grads) = guarded_backward(&net, &batch, round)?;
        losses.push(loss);
        net = clip_then_step(&net, grads, lr, cfg.clip)?;
    }
    ensure_finite(&net, round)?;
    Ok(net)
}

fn run_client(
    state: &FederationState,
    m: usize,
    data: &LabeledDataset,
    steps: usize,
    cfg: &TrainConfig,
) -> Result<ClientResult, ProtocolError> {
    ensure_finite(&state.server, state.round)?;
    // step 1: download w_C and s^{-1}(Y_m)
    let targets = state.server.forward(data.labels.view())?;
    let client_bits = payload_bits(&state.client);
    let download_bits = client_bits + targets.len() as u64 * crate::model::SCALAR_BITS;

    // step 2: client mimics the inverse model, then encodes all local data
    let mut losses = Vec::with_capacity(steps);
    let client = local_kl_updates(
        state.client.clone(),
        &data.features,
        &targets,
        steps,
        cfg.lr_client,
        cfg,
        derive_seed(cfg.seed, state.round, m, CLIENT_STREAM),
        state.round,
        &mut losses,
    )?;
    let activations = client.forward(data.features.view())?;
    if activations.iter().any(|v| !v.is_finite()) {
        return Err(ProtocolError::Diverged { round: state.round });
    }
    let upload_bits = client_bits + activations.len() as u64 * crate::model::SCALAR_BITS;

    // step 3: the paired rApp fits the inverse model to the uploaded features
    let mut server_losses = Vec::new();
    let inverse = local_kl_updates(
        state.server.clone(),
        &data.labels,
        &activations,
        steps,
        cfg.lr_server,
        cfg,
        derive_seed(cfg.seed, state.round, m, SERVER_STREAM),
        state.round,
        &mut server_losses,
    )?;
    Ok(ClientResult {
        client,
        inverse,
        losses,
        activations,
        download_bits,
        upload_bits,
    })
}

/// One SplitMe round (steps 1–3) over the clients selected by `plan`.
pub fn splitme_round(
    state: &FederationState,
    plan: &RoundPlan,
    data: &[LabeledDataset],
    cfg: &TrainConfig,
) -> Result<(FederationState, RoundOutcome), ProtocolError> {
    check_round(&plan.selected, plan.local_updates, data)?;
    let results: Vec<ClientResult> = plan
        .selected
        .par_iter()
        .map(|&m| run_client(state, m, &data[m], plan.local_updates, cfg))
        .collect::<Result<_, _>>()?;

    let losses: Vec<f64> = results.iter().flat_map(|r| r.losses.iter().copied()).collect();
    let loss = losses.iter().sum::<f64>() / losses.len() as f64;
    let clients: Vec<DenseNet> = results.iter().map(|r| r.client.clone()).collect();
    let inverses: Vec<DenseNet> = results.iter().map(|r| r.inverse.clone()).collect();
    let client = aggregate(&clients)?;
    let server = aggregate(&inverses)?;
    if !loss.is_finite() || !client.is_finite() || !server.is_finite() {
        return Err(ProtocolError::Diverged { round: state.round });
    }

    let mut events = Vec::with_capacity(2 * results.len());
    let mut uploads = Vec::with_capacity(results.len());
    for (&m, r) in plan.selected.iter().zip(results) {
        let event = |direction, kind, bits| TransferEvent {
            protocol: Protocol::Splitme,
            round: state.round,
            client: m,
            direction,
            kind,
            channel: Channel::ClientServer,
            bits,
        };
        events.push(event(Direction::Downlink, TransferKind::ModelAndInverseLabels, r.download_bits));
        events.push(event(Direction::Uplink, TransferKind::ModelAndActivations, r.upload_bits));
        uploads.push(Upload {
            client: m,
            activations: r.activations,
        });
    }
    let next = FederationState {
        client,
        server,
        round: state.round + 1,
    };
    Ok((next, RoundOutcome { loss, events, uploads }))
}
