mod common;

use common::*;
use ndarray::{concatenate, Array2, Axis};
use splitme::data::{gen_synthetic, partition, LabeledDataset, PartitionMode, PartitionSpec};
use splitme::model::{full_model, split, ArchitectureSpec};
use splitme::nn::{backward, Activation, Batch, DenseNet, GradClipBound, Loss};
use splitme::protocol::*;
use splitme::sysopt::{uniform_plan, RoundPlan};

fn spec() -> ArchitectureSpec {
    ArchitectureSpec {
        layer_widths: vec![6, 8, 5, 7, 3],
        cut_index: 2,
    }
}

fn clients(m: usize, seed: u64) -> Vec<LabeledDataset> {
    let data = gen_synthetic(300, 6, 3, 4.0, seed).unwrap();
    partition(
        &data.train,
        &PartitionSpec {
            clients: m,
            mode: PartitionMode::OneClassPerClient,
            seed,
        },
    )
    .unwrap()
}

fn train_cfg(lr: f64) -> TrainConfig {
    TrainConfig {
        lr_client: lr,
        lr_server: lr / 2.0,
        lr,
        batch_size: 16,
        clip: GradClipBound::new(25.0).unwrap(),
        gamma: 1e-3,
        seed: 5,
    }
}

fn splitme_state() -> FederationState {
    let m = split(&spec(), 3).unwrap();
    FederationState::new(m.client, m.inverse_server)
}

fn baseline_state() -> FederationState {
    let (c, s) = full_model(&spec(), 3).unwrap().split_at(2).unwrap();
    FederationState::new(c, s)
}

#[test]
fn splitme_zero_lr_keeps_models() {
    let data = clients(6, 1);
    let state = splitme_state();
    let plan = uniform_plan(6, &[0, 2, 5], 3);
    let (next, out) = splitme_round(&state, &plan, &data, &train_cfg(0.0)).unwrap();
    assert_eq!(next.client, state.client);
    assert_eq!(next.server, state.server);
    assert_eq!(next.round, 1);
    assert!(out.loss.is_finite());
}

#[test]
fn splitme_single_participant_is_its_own_average() {
    let data = clients(3, 2);
    let state = splitme_state();
    let cfg = train_cfg(0.05);
    let (next, out) = splitme_round(&state, &uniform_plan(3, &[1], 4), &data, &cfg).unwrap();
    assert_eq!(aggregate(std::slice::from_ref(&next.client)).unwrap(), next.client);
    assert_eq!(out.uploads.len(), 1);
    assert_eq!(out.uploads[0].activations.nrows(), data[1].len());
    assert_ne!(next.client, state.client);
}

#[test]
fn splitme_rejects_empty_and_zero_updates() {
    let data = clients(3, 2);
    let state = splitme_state();
    let empty = RoundPlan::new(3, vec![], &[], 2);
    assert_eq!(
        splitme_round(&state, &empty, &data, &train_cfg(0.1)).unwrap_err(),
        ProtocolError::EmptySelection
    );
    let zero = uniform_plan(3, &[0], 0);
    assert_eq!(
        splitme_round(&state, &zero, &data, &train_cfg(0.1)).unwrap_err(),
        ProtocolError::ZeroLocalUpdates
    );
}

#[test]
fn splitme_divergence_carries_round() {
    let data = clients(3, 2);
    let mut state = splitme_state();
    state.round = 7;
    state.client.layers_mut()[0].weight[[0, 0]] = f64::NAN;
    let err = splitme_round(&state, &uniform_plan(3, &[0, 1], 1), &data, &train_cfg(0.1)).unwrap_err();
    assert_eq!(err, ProtocolError::Diverged { round: 7 });

    // finite parameters whose outputs overflow count as divergence too
    let mut cfg = train_cfg(1e300);
    cfg.clip = GradClipBound::new(1e300).unwrap();
    let err = splitme_round(&splitme_state(), &uniform_plan(3, &[0, 1], 3), &data, &cfg).unwrap_err();
    assert_eq!(err, ProtocolError::Diverged { round: 0 });
    let err = vanilla_sfl_round(&baseline_state(), &[0, 1], 3, &data, &cfg).unwrap_err();
    assert_eq!(err, ProtocolError::Diverged { round: 0 });
}

#[test]
fn splitme_records_one_uplink_and_one_downlink_per_client() {
    let data = clients(6, 4);
    let plan = uniform_plan(6, &[0, 1, 4], 5);
    let (_, out) = splitme_round(&splitme_state(), &plan, &data, &train_cfg(0.05)).unwrap();
    let mut ledger = TransferLedger::new();
    ledger.extend(out.events);
    for &m in &plan.selected {
        assert_eq!(ledger.transfer_events(0, m), 2);
    }
    let ups = ledger.events().iter().filter(|e| e.direction == Direction::Uplink).count();
    assert_eq!(ups, 3);
}

#[test]
fn splitme_kl_loss_trends_down() {
    let data = clients(3, 9);
    let mut state = splitme_state();
    let cfg = train_cfg(0.05);
    let plan = uniform_plan(3, &[0, 1], 5);
    let mut losses = Vec::new();
    for _ in 0..30 {
        let (next, out) = splitme_round(&state, &plan, &data, &cfg).unwrap();
        losses.push(out.loss);
        state = next;
    }
    let avg: Vec<f64> = losses.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
    for w in avg.windows(2) {
        assert!(w[1] < w[0], "moving average rose: {avg:?}");
    }
}

#[test]
fn inversion_recovers_linear_server() {
    let (inverse, o, y, a1, c1, a2, c2) = linear_inversion_case(11, 40, 4, 3);
    let inv = invert_server_model(&inverse, &[(y.view(), o.view())], 0.0, &[Activation::Identity, Activation::Identity])
        .unwrap();
    let l = inv.server.layers();
    let err = |a: &Array2<f64>, b: &Array2<f64>| (a - b).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(err(&l[0].weight, &a1) < 1e-6);
    assert!(err(&l[1].weight, &a2) < 1e-6);
    assert!((&l[0].bias - &c1).iter().all(|v| v.abs() < 1e-6));
    assert!((&l[1].bias - &c2).iter().all(|v| v.abs() < 1e-6));
    assert_eq!(inv.allreduce_pairs, 2);
}

#[test]
fn inversion_split_matches_pooled() {
    let mut r = rng(21);
    let inverse = DenseNet::random(&[3, 5, 4], Activation::Relu, Activation::Softmax, &mut r);
    let acts = [Activation::Relu, Activation::Identity];
    let y1 = random_stochastic(30, 3, &mut r);
    let y2 = random_stochastic(25, 3, &mut r);
    let o1 = random_stochastic(30, 4, &mut r);
    let o2 = random_stochastic(25, 4, &mut r);
    let split = invert_server_model(&inverse, &[(y1.view(), o1.view()), (y2.view(), o2.view())], 1e-3, &acts).unwrap();
    let y = concatenate(Axis(0), &[y1.view(), y2.view()]).unwrap();
    let o = concatenate(Axis(0), &[o1.view(), o2.view()]).unwrap();
    let pooled = invert_server_model(&inverse, &[(y.view(), o.view())], 1e-3, &acts).unwrap();
    for (a, b) in split.server.layers().iter().zip(pooled.server.layers()) {
        assert!((&a.weight - &b.weight).iter().all(|v| v.abs() < 1e-10));
        assert!((&a.bias - &b.bias).iter().all(|v| v.abs() < 1e-10));
    }
}

#[test]
fn inversion_singular_without_ridge() {
    let mut r = rng(3);
    let inverse = DenseNet::random(&[3, 4], Activation::Relu, Activation::Softmax, &mut r);
    let y = random_stochastic(10, 3, &mut r);
    let mut o = random_matrix(10, 4, &mut r);
    let dup = o.column(2).to_owned();
    o.column_mut(3).assign(&dup);
    let err = invert_server_model(&inverse, &[(y.view(), o.view())], 0.0, &[Activation::Identity]).unwrap_err();
    assert!(matches!(err, ProtocolError::Inversion { layer: 1, .. }));
}

#[test]
fn fedavg_zero_lr_and_volume() {
    let data = clients(6, 5);
    let state = baseline_state();
    let (next, out) = fedavg_round(&state, &[0, 3], 4, &data, &train_cfg(0.0)).unwrap();
    assert_eq!(next.client, state.client);
    assert_eq!(next.server, state.server);
    let d = splitme::model::payload_bits(&state.client.join(&state.server).unwrap());
    let up: u64 = out.events.iter().filter(|e| e.direction == Direction::Uplink).map(|e| e.bits).sum();
    assert_eq!(up, 2 * d);
}

#[test]
fn fedavg_identical_clients_match_centralized_sgd() {
    let data = gen_synthetic(60, 6, 3, 3.0, 8).unwrap().train;
    let copies = vec![data.clone(), data.clone(), data.clone()];
    let mut cfg = train_cfg(0.1);
    cfg.batch_size = data.len();
    let state = baseline_state();
    let (next, _) = fedavg_round(&state, &[0, 1, 2], 1, &copies, &cfg).unwrap();
    // single-node step on the whole dataset
    let joined = state.client.join(&state.server).unwrap();
    let batch = Batch::new(data.features.clone(), data.labels.clone()).unwrap();
    let (_, g) = backward(&joined, &batch, Loss::KlDivergence).unwrap();
    let stepped = splitme::nn::clip_then_step(&joined, g, 0.1, cfg.clip).unwrap();
    let fed = next.client.join(&next.server).unwrap();
    for (a, b) in fed.layers().iter().zip(stepped.layers()) {
        assert!((&a.weight - &b.weight).iter().all(|v| v.abs() < 1e-12));
        assert!((&a.bias - &b.bias).iter().all(|v| v.abs() < 1e-12));
    }
}

#[test]
fn oranfed_with_uniform_plan_matches_fedavg() {
    let data = clients(6, 6);
    let cfg = train_cfg(0.05);
    let mut a = baseline_state();
    let mut b = baseline_state();
    let selected: Vec<usize> = (0..6).collect();
    for _ in 0..3 {
        let (na, oa) = fedavg_round(&a, &selected, 3, &data, &cfg).unwrap();
        let (nb, ob) = oranfed_round(&b, &uniform_plan(6, &selected, 3), &data, &cfg).unwrap();
        assert_eq!(na, nb);
        assert_eq!(oa.loss, ob.loss);
        a = na;
        b = nb;
    }
}

#[test]
fn sfl_gradient_matches_joined_model() {
    for seed in 0..10 {
        let mut r = rng(100 + seed);
        let full = DenseNet::random(&[5, 6, 4, 3], Activation::Relu, Activation::Softmax, &mut r);
        let (client, server) = full.clone().split_at(2).unwrap();
        let batch = Batch::new(random_matrix(7, 5, &mut r), random_stochastic(7, 3, &mut r)).unwrap();
        let (loss, cg, sg, smashed) = sfl_gradients(&client, &server, &batch).unwrap();
        let (joined_loss, jg) = backward(&full, &batch, Loss::KlDivergence).unwrap();
        assert!((loss - joined_loss).abs() <= 1e-12 * joined_loss.abs().max(1.0));
        let mut split_flat = flatten(&cg);
        split_flat.extend(flatten(&sg));
        assert!(relative_error(&split_flat, &flatten(&jg)) < 1e-10);
        assert_eq!(smashed.dim(), (7, 4));
    }
}

#[test]
fn sfl_events_and_zero_lr() {
    let data = clients(3, 7);
    let state = baseline_state();
    let (next, out) = vanilla_sfl_round(&state, &[2], 1, &data, &train_cfg(0.0)).unwrap();
    assert_eq!(next.client, state.client);
    assert_eq!(next.server, state.server);
    let mut ledger = TransferLedger::new();
    ledger.extend(out.events);
    assert_eq!(ledger.transfer_events(0, 2), 2);
    let (_, out) = vanilla_sfl_round(&state, &[0, 1], 6, &data, &train_cfg(0.01)).unwrap();
    let mut ledger = TransferLedger::new();
    ledger.extend(out.events);
    assert_eq!(ledger.transfer_events(0, 0), 12);
    assert_eq!(ledger.transfer_events(0, 1), 12);
}

#[test]
fn rounds_are_deterministic() {
    let data = clients(6, 8);
    let cfg = train_cfg(0.05);
    let plan = uniform_plan(6, &[1, 2, 3], 4);
    let s = splitme_state();
    assert_eq!(splitme_round(&s, &plan, &data, &cfg).unwrap(), splitme_round(&s, &plan, &data, &cfg).unwrap());
    let b = baseline_state();
    assert_eq!(
        vanilla_sfl_round(&b, &[0, 4], 3, &data, &cfg).unwrap(),
        vanilla_sfl_round(&b, &[0, 4], 3, &data, &cfg).unwrap()
    );
}

#[test]
fn aggregation_of_copies_is_exact() {
    let net = full_model(&spec(), 9).unwrap();
    let copies = vec![net.clone(); 7];
    assert_eq!(aggregate(&copies).unwrap(), net);
}
