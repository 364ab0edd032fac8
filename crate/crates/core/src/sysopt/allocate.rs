use super::{total_cost, CostParams, PlanError, RoundPlan, Workload};

/// Relative bisection tolerance on the deadline value.
const BISECTION_TOL: f64 = 1e-9;

fn check_selection(selected: &[usize], costs: &CostParams) -> Result<(), PlanError> {
    if selected.is_empty() {
        return Err(PlanError::EmptySelection);
    }
    if selected.len() as f64 * costs.b_min > 1.0 + 1e-12 {
        return Err(PlanError::MinimumBandwidth {
            selected: selected.len(),
            b_min: costs.b_min,
        });
    }
    Ok(())
}

/// Smallest feasible fractions for makespan target `tau` (ms).
fn fractions_for(tau: f64, selected: &[usize], work: &Workload, costs: &CostParams, e: f64) -> Vec<f64> {
    selected
        .iter()
        .map(|&m| {
            let slack = tau - e * work.client_ms[m];
            let need = if slack > 0.0 {
                work.uplink_bits[m] / (costs.bits_per_ms() * slack)
            } else {
                f64::INFINITY
            };
            need.max(costs.b_min)
        })
        .collect()
}

/// Smallest achievable `max_m E·Q_C,m + T_m^co` over the bandwidth simplex,
/// found by bisection on the target value.
pub fn min_makespan(selected: &[usize], work: &Workload, costs: &CostParams, local_updates: usize) -> Result<f64, PlanError> {
    check_selection(selected, costs)?;
    let e = local_updates as f64;
    let mut lo = selected.iter().map(|&m| e * work.client_ms[m]).fold(0.0, f64::max);
    // every client at b_min is feasible here
    let mut hi = selected
        .iter()
        .map(|&m| e * work.client_ms[m] + work.uplink_bits[m] / (costs.bits_per_ms() * costs.b_min))
        .fold(0.0, f64::max);
    let feasible = |tau: f64| fractions_for(tau, selected, work, costs, e).iter().sum::<f64>() <= 1.0;
    while hi - lo > BISECTION_TOL * hi.abs().max(f64::MIN_POSITIVE) {
        let mid = 0.5 * (lo + hi);
        if feasible(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Makespan-minimizing fractions for a fixed number of local updates: the
/// minimal feasible fractions at the bisected target, with the leftover
/// spread over the part above `b_min` so no fraction drops below it.
pub fn allocate_bandwidth(
    selected: &[usize],
    work: &Workload,
    costs: &CostParams,
    local_updates: usize,
) -> Result<Vec<f64>, PlanError> {
    let tau = min_makespan(selected, work, costs, local_updates)?;
    let raw = fractions_for(tau, selected, work, costs, local_updates as f64);
    let floor = selected.len() as f64 * costs.b_min;
    let excess: f64 = raw.iter().map(|b| b - costs.b_min).sum();
    if excess <= 0.0 {
        return Ok(vec![1.0 / selected.len() as f64; selected.len()]);
    }
    let scale = (1.0 - floor).max(0.0) / excess;
    Ok(raw.into_iter().map(|b| costs.b_min + (b - costs.b_min) * scale).collect())
}

/// Equal split over the selected set.
pub fn uniform_plan(clients: usize, selected: &[usize], local_updates: usize) -> RoundPlan {
    let b = 1.0 / selected.len().max(1) as f64;
    RoundPlan::new(clients, selected.to_vec(), &vec![b; selected.len()], local_updates)
}

/// Chooses `E ∈ {1..e_last}` and bandwidth fractions minimizing
/// `K_ε(E)·cost`. Ties keep the smaller `E`.
pub fn allocate(selected: &[usize], work: &Workload, costs: &CostParams, e_last: usize) -> Result<RoundPlan, PlanError> {
    check_selection(selected, costs)?;
    if e_last == 0 {
        return Err(PlanError::ZeroLocalUpdates);
    }
    let mut best: Option<(f64, RoundPlan)> = None;
    for e in 1..=e_last {
        let fractions = allocate_bandwidth(selected, work, costs, e)?;
        let plan = RoundPlan::new(work.clients(), selected.to_vec(), &fractions, e);
        let objective = total_cost(&plan, work, costs)?.objective;
        if best.as_ref().is_none_or(|(v, _)| objective < *v) {
            best = Some((objective, plan));
        }
    }
    Ok(best.expect("at least one candidate").1)
}
