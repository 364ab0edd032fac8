//! Resource cost and latency model of one training round, deadline-aware
//! trainer selection, joint bandwidth / local-update allocation, and
//! learning-rate utilities from the convergence analysis.

mod allocate;
mod cost;
mod select;
mod theory;

pub use allocate::{allocate, allocate_bandwidth, min_makespan, uniform_plan};
pub use cost::{
    comm_cost, comp_cost, k_epsilon, k_epsilon_real, round_time, total_cost, uplink_time, CostBreakdown, RoundTiming,
};
pub use select::{select_trainers, SelectorState};
pub use theory::{lr_condition, lr_condition_value, max_stable_lr, theory_lr};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::SplitSizes;
use crate::simnet::ClientProfile;

/// Tolerance on `Σ b = 1` for emitted plans.
pub const BANDWIDTH_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("no trainer selected")]
    EmptySelection,
    #[error("{selected} trainers at minimum fraction {b_min} exceed the bandwidth budget")]
    MinimumBandwidth { selected: usize, b_min: f64 },
    #[error("selected client {0} has no bandwidth")]
    ZeroBandwidth(usize),
    #[error("local updates must be at least 1")]
    ZeroLocalUpdates,
    #[error("invalid plan: {0}")]
    Invalid(String),
    #[error("invalid cost parameters: {0}")]
    Params(String),
}

/// Prices and constants of the cost model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostParams {
    /// Total uplink bandwidth `B` in bits per second.
    pub bandwidth_bps: f64,
    /// Unit cost of bandwidth usage.
    pub p_c: f64,
    /// Unit cost of compute time (per ms).
    pub p_tr: f64,
    /// Trade-off between resource cost and learning time.
    pub rho: f64,
    /// Minimum bandwidth fraction of a selected client.
    pub b_min: f64,
    /// Constant in front of the round-count order.
    pub kappa: f64,
    /// Target accuracy level in the round-count bound.
    pub epsilon: f64,
}

impl CostParams {
    pub fn validate(&self, clients: usize) -> Result<(), PlanError> {
        let positive = [
            ("bandwidth_bps", self.bandwidth_bps),
            ("p_c", self.p_c),
            ("p_tr", self.p_tr),
            ("b_min", self.b_min),
            ("kappa", self.kappa),
            ("epsilon", self.epsilon),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(PlanError::Params(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(PlanError::Params(format!("rho must lie in [0,1], got {}", self.rho)));
        }
        if clients > 0 && self.b_min > 1.0 / clients as f64 + 1e-15 {
            return Err(PlanError::Params(format!(
                "b_min {} exceeds 1/M for M = {clients}",
                self.b_min
            )));
        }
        Ok(())
    }

    /// Bandwidth in bits per millisecond.
    pub fn bits_per_ms(&self) -> f64 {
        self.bandwidth_bps / 1000.0
    }
}

/// Decisions for one round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundPlan {
    /// Selected client indices, ascending.
    pub selected: Vec<usize>,
    /// Bandwidth fraction for every client; zero for unselected ones.
    pub bandwidth: Vec<f64>,
    pub local_updates: usize,
}

impl RoundPlan {
    pub fn new(clients: usize, mut selected: Vec<usize>, fractions: &[f64], local_updates: usize) -> Self {
        selected.sort_unstable();
        let mut bandwidth = vec![0.0; clients];
        for (&m, &b) in selected.iter().zip(fractions) {
            bandwidth[m] = b;
        }
        Self {
            selected,
            bandwidth,
            local_updates,
        }
    }

    pub fn is_selected(&self, m: usize) -> bool {
        self.selected.binary_search(&m).is_ok()
    }

    pub fn k(&self) -> usize {
        self.selected.len()
    }

    /// Checks the bandwidth constraints and the local-update range.
    pub fn validate(&self, costs: &CostParams) -> Result<(), PlanError> {
        if self.local_updates == 0 {
            return Err(PlanError::ZeroLocalUpdates);
        }
        if self.selected.windows(2).any(|w| w[0] >= w[1]) {
            return Err(PlanError::Invalid("selection is not strictly ascending".into()));
        }
        for (m, &b) in self.bandwidth.iter().enumerate() {
            if self.is_selected(m) {
                if b <= 0.0 {
                    return Err(PlanError::ZeroBandwidth(m));
                }
                if b < costs.b_min * (1.0 - 1e-12) || b > 1.0 + BANDWIDTH_SUM_TOL {
                    return Err(PlanError::Invalid(format!("client {m} fraction {b} outside [b_min, 1]")));
                }
            } else if b != 0.0 {
                return Err(PlanError::Invalid(format!("unselected client {m} has bandwidth {b}")));
            }
        }
        if !self.selected.is_empty() {
            let sum: f64 = self.selected.iter().map(|&m| self.bandwidth[m]).sum();
            if (sum - 1.0).abs() > BANDWIDTH_SUM_TOL {
                return Err(PlanError::Invalid(format!("bandwidth fractions sum to {sum}")));
            }
        }
        Ok(())
    }
}

/// Per-client work of one local update and the bits each client uploads once
/// per round.
#[derive(Clone, Debug, PartialEq)]
pub struct Workload {
    /// Client-side time per local update (ms).
    pub client_ms: Vec<f64>,
    /// Server-side time per local update (ms).
    pub server_ms: Vec<f64>,
    /// Uplink payload per round (bits).
    pub uplink_bits: Vec<f64>,
}

impl Workload {
    /// Split training: `Q_C,m`, `Q_S,m` and `S_m + ω·d`.
    pub fn split(profiles: &[ClientProfile], sizes: &SplitSizes) -> Self {
        Self {
            client_ms: profiles.iter().map(|p| p.q_c_ms).collect(),
            server_ms: profiles.iter().map(|p| p.q_s_ms).collect(),
            uplink_bits: (0..profiles.len()).map(|m| sizes.uplink_bits(m)).collect(),
        }
    }

    /// Whole model on the client, full model `d` uploaded. The client's
    /// per-batch time scales its split-model time by the parameter ratio.
    pub fn full_model(profiles: &[ClientProfile], sizes: &SplitSizes) -> Self {
        Self {
            client_ms: profiles.iter().map(|p| p.q_c_ms / sizes.omega).collect(),
            server_ms: vec![0.0; profiles.len()],
            uplink_bits: vec![sizes.d_bits as f64; profiles.len()],
        }
    }

    pub fn clients(&self) -> usize {
        self.client_ms.len()
    }
}
