use serde::{Deserialize, Serialize};

use super::{CostParams, PlanError, Workload};

/// Running state of deadline-aware trainer selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectorState {
    /// Running estimate of the maximum uplink time (ms).
    pub t_max_ms: f64,
    /// Local updates used in the previous round.
    pub e_last: usize,
    pub alpha: f64,
}

impl SelectorState {
    /// Starts from the estimate where every client is selected and the
    /// bandwidth is split uniformly: `max_m M·(S_m + ω·d)/B`.
    pub fn initial(work: &Workload, costs: &CostParams, alpha: f64, e_initial: usize) -> Result<Self, PlanError> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(PlanError::Params(format!("alpha must lie in (0,1), got {alpha}")));
        }
        if e_initial == 0 {
            return Err(PlanError::ZeroLocalUpdates);
        }
        let m = work.clients() as f64;
        let t_max_ms = work
            .uplink_bits
            .iter()
            .map(|&bits| m * bits / costs.bits_per_ms())
            .fold(0.0, f64::max);
        if !(t_max_ms > 0.0) {
            return Err(PlanError::Params("initial uplink estimate must be positive".into()));
        }
        Ok(Self {
            t_max_ms,
            e_last: e_initial,
            alpha,
        })
    }

    /// Exponential update with the largest realized uplink time of the round.
    pub fn observe(&mut self, realized_max_ms: f64) {
        self.t_max_ms = self.alpha * self.t_max_ms + (1.0 - self.alpha) * realized_max_ms;
    }
}

/// Every client whose `E·(Q_C,m + Q_S,m) + t_max` fits its deadline.
pub fn select_trainers(work: &Workload, deadlines_ms: &[f64], state: &SelectorState, local_updates: usize) -> Vec<usize> {
    let e = local_updates as f64;
    (0..work.clients())
        .filter(|&m| e * (work.client_ms[m] + work.server_ms[m]) + state.t_max_ms <= deadlines_ms[m])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(qc: f64, qs: f64) -> Workload {
        Workload {
            client_ms: vec![qc],
            server_ms: vec![qs],
            uplink_bits: vec![1e6],
        }
    }

    fn state(t: f64, alpha: f64) -> SelectorState {
        SelectorState {
            t_max_ms: t,
            e_last: 10,
            alpha,
        }
    }

    #[test]
    fn deadline_filter() {
        let w = one(0.4, 1.4);
        assert_eq!(select_trainers(&w, &[90.0], &state(70.0, 0.7), 10), vec![0]);
        assert!(select_trainers(&w, &[80.0], &state(70.0, 0.7), 10).is_empty());
    }

    #[test]
    fn estimate_update() {
        let mut s = state(100.0, 0.7);
        s.observe(50.0);
        assert!((s.t_max_ms - 85.0).abs() < 1e-12);
    }

    #[test]
    fn initial_estimate_assumes_uniform_split() {
        let w = Workload {
            client_ms: vec![0.4, 0.4],
            server_ms: vec![1.4, 1.4],
            uplink_bits: vec![1e6, 3e6],
        };
        let costs = super::super::CostParams {
            bandwidth_bps: 1e9,
            p_c: 1.0,
            p_tr: 1.0,
            rho: 0.8,
            b_min: 0.02,
            kappa: 1.0,
            epsilon: 1.0,
        };
        let s = SelectorState::initial(&w, &costs, 0.7, 20).unwrap();
        assert!((s.t_max_ms - 6.0).abs() < 1e-12);
        assert!(SelectorState::initial(&w, &costs, 1.0, 20).is_err());
    }
}
