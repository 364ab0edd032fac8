//! Simulated O-RAN environment: client profiles, the round clock and the
//! binding of protocol transfers to the time and cost model.
//!
//! Time is simulated in milliseconds and never read from the host.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::SplitSizes;
use crate::protocol::{Channel, Direction, Protocol, ProtocolError, RoundOutcome, TransferLedger};
use crate::sysopt::{comm_cost, comp_cost, round_time, CostParams, PlanError, RoundPlan, Workload};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error("invalid profile ranges: {0}")]
    Ranges(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Slice {
    Embb,
    Urllc,
    Mmtc,
}

impl Slice {
    pub const ALL: [Slice; 3] = [Slice::Embb, Slice::Urllc, Slice::Mmtc];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientProfile {
    /// Client-side time per minibatch (ms).
    pub q_c_ms: f64,
    /// Server-side time per minibatch (ms).
    pub q_s_ms: f64,
    /// Slice deadline per round (ms).
    pub t_round_ms: f64,
    pub slice: Slice,
}

/// Closed intervals the profile fields are drawn from uniformly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileRanges {
    pub q_c_ms: (f64, f64),
    pub q_s_ms: (f64, f64),
    pub t_round_ms: (f64, f64),
}

impl Default for ProfileRanges {
    fn default() -> Self {
        Self {
            q_c_ms: (0.34, 0.46),
            q_s_ms: (1.2, 1.6),
            t_round_ms: (50.0, 100.0),
        }
    }
}

impl ProfileRanges {
    pub fn validate(&self) -> Result<(), SimError> {
        for (name, (lo, hi)) in [("q_c_ms", self.q_c_ms), ("q_s_ms", self.q_s_ms), ("t_round_ms", self.t_round_ms)] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(SimError::Ranges(format!("{name} = ({lo}, {hi})")));
            }
        }
        Ok(())
    }
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Deterministic profiles; slices are assigned round-robin.
pub fn sample_profiles(clients: usize, seed: u64, ranges: &ProfileRanges) -> Result<Vec<ClientProfile>, SimError> {
    ranges.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..clients)
        .map(|m| ClientProfile {
            q_c_ms: draw(&mut rng, ranges.q_c_ms),
            q_s_ms: draw(&mut rng, ranges.q_s_ms),
            t_round_ms: draw(&mut rng, ranges.t_round_ms),
            slice: Slice::ALL[m % 3],
        })
        .collect())
}

/// Simulated wall clock; advances only on executed rounds.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SimClock {
    pub round: usize,
    pub wall_ms: f64,
    /// `T_total` of every executed round, in order.
    pub executed_ms: Vec<f64>,
}

impl SimClock {
    pub fn new() -> Self {
        Self::default()
    }

    fn advance(&mut self, t_total_ms: f64) {
        self.round += 1;
        self.wall_ms += t_total_ms;
        self.executed_ms.push(t_total_ms);
    }

    /// A round that never ran: counts toward the round index only.
    pub fn skip(&mut self) {
        self.round += 1;
    }

    /// Extra simulated time outside the per-round model.
    pub fn charge(&mut self, ms: f64) {
        self.wall_ms += ms;
    }
}

/// One line of the per-round metric stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub protocol: Protocol,
    pub selected: Vec<usize>,
    /// Bandwidth fractions of the selected clients, in `selected` order.
    pub bandwidth: Vec<f64>,
    pub local_updates: usize,
    pub t_total_ms: f64,
    /// Client-side part of `t_total_ms`: slowest compute plus uplink.
    pub makespan_ms: f64,
    pub r_co: f64,
    pub r_cp: f64,
    pub uplink_bits: u64,
    pub downlink_bits: u64,
    /// Client–server transfer events per selected client.
    pub transfer_events: f64,
    pub loss: f64,
    pub test_acc: Option<f64>,
    pub skipped: bool,
}

impl RoundRecord {
    pub fn skipped(round: usize, protocol: Protocol) -> Self {
        Self {
            round,
            protocol,
            selected: Vec::new(),
            bandwidth: Vec::new(),
            local_updates: 0,
            t_total_ms: 0.0,
            makespan_ms: 0.0,
            r_co: 0.0,
            r_cp: 0.0,
            uplink_bits: 0,
            downlink_bits: 0,
            transfer_events: 0.0,
            loss: f64::NAN,
            test_acc: None,
            skipped: true,
        }
    }

    pub fn k(&self) -> usize {
        self.selected.len()
    }
}

/// Everything the accounting needs besides the plan.
#[derive(Clone, Debug, PartialEq)]
pub struct SimEnv {
    pub profiles: Vec<ClientProfile>,
    pub sizes: SplitSizes,
    pub costs: CostParams,
}

impl SimEnv {
    pub fn deadlines_ms(&self) -> Vec<f64> {
        self.profiles.iter().map(|p| p.t_round_ms).collect()
    }

    /// Per-step work and per-round upload the protocol's time model uses.
    pub fn workload(&self, protocol: Protocol) -> Workload {
        match protocol {
            Protocol::Splitme | Protocol::Sfl => Workload::split(&self.profiles, &self.sizes),
            Protocol::Fedavg | Protocol::Oranfed => Workload::full_model(&self.profiles, &self.sizes),
        }
    }
}

/// Time and resource figures of one executed round.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Accounting {
    pub t_total_ms: f64,
    pub makespan_ms: f64,
    pub max_uplink_ms: f64,
    pub r_co: f64,
    pub r_cp: f64,
}

/// Time model of a round. SplitMe and the full-model protocols upload once
/// after local training; the rApp side (SplitMe only) runs afterwards. In
/// vanilla SFL every local step waits for its smashed-batch upload, so each
/// client's time adds compute and all its uplinks. Downlink delay is ignored.
pub fn account(env: &SimEnv, protocol: Protocol, plan: &RoundPlan, outcome: &RoundOutcome) -> Result<Accounting, SimError> {
    let work = env.workload(protocol);
    let r_co = comm_cost(plan, &env.costs);
    let r_cp = comp_cost(plan, &work, &env.costs)?;
    if protocol != Protocol::Sfl {
        let timing = round_time(plan, &work, &env.costs)?;
        return Ok(Accounting {
            t_total_ms: timing.total_ms,
            makespan_ms: timing.makespan_ms,
            max_uplink_ms: timing.max_uplink_ms(),
            r_co,
            r_cp,
        });
    }
    let e = plan.local_updates as f64;
    let mut up_bits: BTreeMap<usize, f64> = BTreeMap::new();
    for ev in outcome.events.iter().filter(|ev| ev.direction == Direction::Uplink) {
        *up_bits.entry(ev.client).or_default() += ev.bits as f64;
    }
    let mut t_total: f64 = 0.0;
    let mut max_uplink: f64 = 0.0;
    for &m in &plan.selected {
        let b = plan.bandwidth[m];
        if !(b > 0.0) {
            return Err(PlanError::ZeroBandwidth(m).into());
        }
        let uplink = up_bits.get(&m).copied().unwrap_or(0.0) / (b * env.costs.bits_per_ms());
        max_uplink = max_uplink.max(uplink);
        t_total = t_total.max(e * (work.client_ms[m] + work.server_ms[m]) + uplink);
    }
    Ok(Accounting {
        t_total_ms: t_total,
        makespan_ms: t_total,
        max_uplink_ms: max_uplink,
        r_co,
        r_cp,
    })
}

/// Runs `transition`, books its transfers and time, and advances the clock.
/// On error nothing is booked and the clock stays put.
pub fn execute_round<S, F>(
    env: &SimEnv,
    clock: &mut SimClock,
    ledger: &mut TransferLedger,
    protocol: Protocol,
    plan: &RoundPlan,
    transition: F,
) -> Result<(S, RoundOutcome, RoundRecord, Accounting), SimError>
where
    F: FnOnce() -> Result<(S, RoundOutcome), ProtocolError>,
{
    plan.validate(&env.costs)?;
    let (state, outcome) = transition()?;
    let acc = account(env, protocol, plan, &outcome)?;
    let bits = |d: Direction| outcome.events.iter().filter(|e| e.direction == d).map(|e| e.bits).sum();
    let events = outcome.events.iter().filter(|e| e.channel == Channel::ClientServer).count();
    let record = RoundRecord {
        round: clock.round,
        protocol,
        selected: plan.selected.clone(),
        bandwidth: plan.selected.iter().map(|&m| plan.bandwidth[m]).collect(),
        local_updates: plan.local_updates,
        t_total_ms: acc.t_total_ms,
        makespan_ms: acc.makespan_ms,
        r_co: acc.r_co,
        r_cp: acc.r_cp,
        uplink_bits: bits(Direction::Uplink),
        downlink_bits: bits(Direction::Downlink),
        transfer_events: events as f64 / plan.selected.len() as f64,
        loss: outcome.loss,
        test_acc: None,
        skipped: false,
    };
    ledger.extend(outcome.events.iter().cloned());
    clock.advance(acc.t_total_ms);
    Ok((state, outcome, record, acc))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeRow {
    pub protocol: Protocol,
    pub round: usize,
    pub uplink_mb: f64,
    pub downlink_mb: f64,
    pub cumulative_mb: f64,
}

pub fn bits_to_mb(bits: u64) -> f64 {
    bits as f64 / 8.0 / 1e6
}

/// Per-protocol, per-round volume with running totals.
pub fn volume_report(ledger: &TransferLedger) -> Vec<VolumeRow> {
    let mut per: BTreeMap<(Protocol, usize), (u64, u64)> = BTreeMap::new();
    for e in ledger.events() {
        let slot = per.entry((e.protocol, e.round)).or_default();
        match e.direction {
            Direction::Uplink => slot.0 += e.bits,
            Direction::Downlink => slot.1 += e.bits,
        }
    }
    let mut running: BTreeMap<Protocol, u64> = BTreeMap::new();
    per.into_iter()
        .map(|((protocol, round), (up, down))| {
            let total = running.entry(protocol).or_default();
            *total += up + down;
            VolumeRow {
                protocol,
                round,
                uplink_mb: bits_to_mb(up),
                downlink_mb: bits_to_mb(down),
                cumulative_mb: bits_to_mb(*total),
            }
        })
        .collect()
}
