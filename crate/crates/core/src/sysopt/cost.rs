use serde::{Deserialize, Serialize};

use super::{CostParams, PlanError, RoundPlan, Workload};

/// Communication cost `Σ_selected b_m·B·p_c`.
pub fn comm_cost(plan: &RoundPlan, costs: &CostParams) -> f64 {
    plan.selected
        .iter()
        .map(|&m| plan.bandwidth[m] * costs.bandwidth_bps * costs.p_c)
        .sum()
}

/// Computation cost `Σ_selected E·(Q_C,m + Q_S,m)·p_tr`.
pub fn comp_cost(plan: &RoundPlan, work: &Workload, costs: &CostParams) -> Result<f64, PlanError> {
    if plan.local_updates == 0 {
        return Err(PlanError::ZeroLocalUpdates);
    }
    let e = plan.local_updates as f64;
    Ok(plan
        .selected
        .iter()
        .map(|&m| e * (work.client_ms[m] + work.server_ms[m]) * costs.p_tr)
        .sum())
}

/// Uplink time in ms of `bits` over fraction `b_m` of the bandwidth.
pub fn uplink_time(bits: f64, b_m: f64, costs: &CostParams) -> Result<f64, PlanError> {
    if !(b_m > 0.0) {
        return Err(PlanError::Invalid(format!("bandwidth fraction {b_m} is not positive")));
    }
    Ok(bits / (b_m * costs.bits_per_ms()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundTiming {
    pub total_ms: f64,
    /// `max_m E·Q_C,m + T_m^co`.
    pub makespan_ms: f64,
    /// `max_m E·Q_S,m`.
    pub server_ms: f64,
    /// `(client, E·Q_C,m, T_m^co)` for every selected client.
    pub phases: Vec<(usize, f64, f64)>,
}

impl RoundTiming {
    pub fn max_uplink_ms(&self) -> f64 {
        self.phases.iter().map(|p| p.2).fold(0.0, f64::max)
    }
}

/// `T_total = max{E·Q_C,m + T_m^co} + max{E·Q_S,m}` over the selected set.
pub fn round_time(plan: &RoundPlan, work: &Workload, costs: &CostParams) -> Result<RoundTiming, PlanError> {
    let e = plan.local_updates as f64;
    let mut phases = Vec::with_capacity(plan.k());
    let mut makespan = 0.0f64;
    let mut server = 0.0f64;
    for &m in &plan.selected {
        let b = plan.bandwidth[m];
        if b <= 0.0 {
            return Err(PlanError::ZeroBandwidth(m));
        }
        let compute = e * work.client_ms[m];
        let up = uplink_time(work.uplink_bits[m], b, costs)?;
        makespan = makespan.max(compute + up);
        server = server.max(e * work.server_ms[m]);
        phases.push((m, compute, up));
    }
    Ok(RoundTiming {
        total_ms: makespan + server,
        makespan_ms: makespan,
        server_ms: server,
        phases,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub r_co: f64,
    pub r_cp: f64,
    pub t_total_ms: f64,
    /// `ρ(R^co + R^cp) + (1−ρ)T^total`.
    pub cost: f64,
    pub k_epsilon: u64,
    /// `K_ε(E)·cost`.
    pub objective: f64,
}

pub fn total_cost(plan: &RoundPlan, work: &Workload, costs: &CostParams) -> Result<CostBreakdown, PlanError> {
    let r_co = comm_cost(plan, costs);
    let r_cp = comp_cost(plan, work, costs)?;
    let t_total_ms = round_time(plan, work, costs)?.total_ms;
    let cost = costs.rho * (r_co + r_cp) + (1.0 - costs.rho) * t_total_ms;
    let k = k_epsilon(plan.local_updates, costs)?;
    Ok(CostBreakdown {
        r_co,
        r_cp,
        t_total_ms,
        cost,
        k_epsilon: k,
        objective: k as f64 * cost,
    })
}

/// `κ·(E+1)²/(E²·ε²)`.
pub fn k_epsilon_real(local_updates: usize, costs: &CostParams) -> Result<f64, PlanError> {
    if local_updates == 0 {
        return Err(PlanError::ZeroLocalUpdates);
    }
    let e = local_updates as f64;
    Ok(costs.kappa * ((e + 1.0) * (e + 1.0)) / (e * e * costs.epsilon * costs.epsilon))
}

/// Rounds needed for ε-accuracy, rounded up.
pub fn k_epsilon(local_updates: usize, costs: &CostParams) -> Result<u64, PlanError> {
    Ok(k_epsilon_real(local_updates, costs)?.ceil() as u64)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn params() -> CostParams {
        CostParams {
            bandwidth_bps: 1e9,
            p_c: 1.0,
            p_tr: 1.0,
            rho: 0.8,
            b_min: 1.0 / 50.0,
            kappa: 1.0,
            epsilon: 1.0,
        }
    }

    fn work(qc: &[f64], qs: &[f64], bits: &[f64]) -> Workload {
        Workload {
            client_ms: qc.to_vec(),
            server_ms: qs.to_vec(),
            uplink_bits: bits.to_vec(),
        }
    }

    #[test]
    fn comm_cost_is_b_times_pc() {
        let plan = RoundPlan::new(3, vec![0, 2], &[0.5, 0.5], 1);
        assert_eq!(comm_cost(&plan, &params()), 1e9);
        let empty = RoundPlan::new(3, vec![], &[], 1);
        assert_eq!(comm_cost(&empty, &params()), 0.0);
    }

    #[test]
    fn comp_cost_substitution() {
        let plan = RoundPlan::new(1, vec![0], &[1.0], 10);
        let w = work(&[0.4], &[1.4], &[0.0]);
        assert!((comp_cost(&plan, &w, &params()).unwrap() - 18.0).abs() < 1e-12);
        let zero = RoundPlan::new(1, vec![0], &[1.0], 0);
        assert_eq!(comp_cost(&zero, &w, &params()), Err(PlanError::ZeroLocalUpdates));
        let three = RoundPlan::new(3, vec![0, 1, 2], &[0.3, 0.3, 0.4], 10);
        let w3 = work(&[0.4; 3], &[1.4; 3], &[0.0; 3]);
        assert!((comp_cost(&three, &w3, &params()).unwrap() - 54.0).abs() < 1e-12);
    }

    #[test]
    fn uplink_time_substitution() {
        assert!((uplink_time(1e6, 0.5, &params()).unwrap() - 2.0).abs() < 1e-12);
        assert!((uplink_time(1e6, 1.0, &params()).unwrap() - 1.0).abs() < 1e-12);
        assert!(uplink_time(1e6, 0.0, &params()).is_err());
    }

    #[test]
    fn round_time_single_client_sums_phases() {
        let plan = RoundPlan::new(1, vec![0], &[1.0], 5);
        let w = work(&[0.4], &[1.5], &[2e6]);
        let t = round_time(&plan, &w, &params()).unwrap();
        assert!((t.total_ms - (2.0 + 2.0 + 7.5)).abs() < 1e-12);
    }

    #[test]
    fn degenerate_tradeoffs() {
        let plan = RoundPlan::new(2, vec![0, 1], &[0.5, 0.5], 3);
        let w = work(&[0.4, 0.45], &[1.3, 1.5], &[1e6, 2e6]);
        let mut c = params();
        c.rho = 1.0;
        let b = total_cost(&plan, &w, &c).unwrap();
        assert_eq!(b.cost, b.r_co + b.r_cp);
        c.rho = 0.0;
        let b = total_cost(&plan, &w, &c).unwrap();
        assert_eq!(b.cost, b.t_total_ms);
    }

    #[test]
    fn k_epsilon_formula_and_limit() {
        let c = params();
        assert_eq!(k_epsilon(1, &c).unwrap(), 4);
        assert!(k_epsilon(1_000_000, &c).unwrap() <= (c.kappa / (c.epsilon * c.epsilon)).ceil() as u64 + 1);
        assert!(k_epsilon(0, &c).is_err());
        let mut prev = f64::INFINITY;
        for e in 1..=100 {
            let v = k_epsilon_real(e, &c).unwrap();
            assert!(v < prev);
            prev = v;
        }
    }
}
