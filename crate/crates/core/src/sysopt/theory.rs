use super::PlanError;

/// Left-hand side of the local learning-rate condition,
/// `−η/2 + 8λ₁E²L²η³ + 2λ₁η²L`.
pub fn lr_condition_value(eta: f64, lambda1: f64, local_updates: usize, smoothness: f64) -> f64 {
    let e = local_updates as f64;
    -eta / 2.0 + 8.0 * lambda1 * e * e * smoothness * smoothness * eta.powi(3) + 2.0 * lambda1 * eta * eta * smoothness
}

/// True when the learning rate satisfies the convergence condition.
pub fn lr_condition(eta: f64, lambda1: f64, local_updates: usize, smoothness: f64) -> bool {
    lr_condition_value(eta, lambda1, local_updates, smoothness) <= 0.0
}

/// Largest learning rate meeting the condition: the positive root of
/// `8λ₁E²L²η² + 2λ₁Lη − 1/2`, in cancellation-free form.
pub fn max_stable_lr(lambda1: f64, local_updates: usize, smoothness: f64) -> f64 {
    let e = local_updates as f64;
    let a = 8.0 * lambda1 * e * e * smoothness * smoothness;
    let b = 2.0 * lambda1 * smoothness;
    1.0 / (b + (b * b + 2.0 * a).sqrt())
}

/// `1/(√(T·E)·(2L·Σq_m·B + L·Σq_m·B²))` where `B` is the distribution-distance
/// lower bound of the side being trained.
pub fn theory_lr(
    iterations: f64,
    local_updates: usize,
    smoothness: f64,
    weights: &[f64],
    distance_bound: f64,
) -> Result<f64, PlanError> {
    let inputs = [iterations, local_updates as f64, smoothness, distance_bound];
    if inputs.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(PlanError::Params("learning-rate inputs must be positive".into()));
    }
    if weights.is_empty() || weights.iter().any(|&q| q < 0.0) {
        return Err(PlanError::Params("client weights must be non-negative".into()));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(PlanError::Params(format!("client weights sum to {total}, not 1")));
    }
    let linear: f64 = weights.iter().map(|q| q * distance_bound).sum();
    let quadratic: f64 = weights.iter().map(|q| q * distance_bound * distance_bound).sum();
    let denom = (iterations * local_updates as f64).sqrt() * (2.0 * smoothness * linear + smoothness * quadratic);
    Ok(1.0 / denom)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_rate_satisfies_condition() {
        assert!(lr_condition(1e-9, 5.0, 20, 3.0));
    }

    #[test]
    fn unit_inputs_violate_condition() {
        assert!((lr_condition_value(1.0, 1.0, 1, 1.0) - 9.5).abs() < 1e-15);
        assert!(!lr_condition(1.0, 1.0, 1, 1.0));
    }

    #[test]
    fn theory_lr_substitution() {
        let q = [0.25; 4];
        assert!((theory_lr(1.0, 1, 1.0, &q, 1.0).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let a = theory_lr(16.0, 3, 2.0, &q, 0.7).unwrap();
        let b = theory_lr(64.0, 3, 2.0, &q, 0.7).unwrap();
        assert!((a / b - 2.0).abs() < 1e-12);
        assert!(theory_lr(1.0, 1, 1.0, &[0.5, 0.4], 1.0).is_err());
    }
}
