//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use splitme::data::LabeledDataset;
use splitme::nn::{Activation, Batch, DenseNet, Layer, Loss};
use splitme::sysopt::{k_epsilon, CostParams, Workload};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rows: usize, cols: usize, r: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| r.random_range(-1.0..1.0))
}

pub fn random_stochastic(rows: usize, cols: usize, r: &mut ChaCha8Rng) -> Array2<f64> {
    let mut m = Array2::from_shape_fn((rows, cols), |_| r.random_range(0.05..1.0));
    for mut row in m.rows_mut() {
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    m
}

/// Central-difference gradient of the batch loss with respect to every
/// parameter, in layer order (weights row-major, then bias).
pub fn finite_difference(net: &DenseNet, batch: &Batch, loss: Loss, h: f64) -> Vec<f64> {
    let value = |n: &DenseNet| {
        let out = n.forward(batch.inputs.view()).unwrap();
        loss.evaluate(out.view(), batch.targets.view()).unwrap().0
    };
    let mut out = Vec::new();
    for l in 0..net.depth() {
        let (rows, cols) = net.layers()[l].weight.dim();
        for i in 0..rows {
            for j in 0..cols {
                let mut p = net.clone();
                p.layers_mut()[l].weight[[i, j]] += h;
                let mut m = net.clone();
                m.layers_mut()[l].weight[[i, j]] -= h;
                out.push((value(&p) - value(&m)) / (2.0 * h));
            }
        }
        for i in 0..rows {
            let mut p = net.clone();
            p.layers_mut()[l].bias[i] += h;
            let mut m = net.clone();
            m.layers_mut()[l].bias[i] -= h;
            out.push((value(&p) - value(&m)) / (2.0 * h));
        }
    }
    out
}

pub fn flatten(grads: &splitme::nn::Gradients) -> Vec<f64> {
    grads
        .layers
        .iter()
        .flat_map(|g| g.weight.iter().copied().chain(g.bias.iter().copied()).collect::<Vec<_>>())
        .collect()
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-8)
}

/// Random network plus a batch valid for `loss`.
pub fn random_case(seed: u64) -> (DenseNet, Batch, Loss) {
    let mut r = rng(seed);
    let depth = r.random_range(1..=3);
    let widths: Vec<usize> = (0..=depth).map(|_| r.random_range(2..=5)).collect();
    let hidden = if r.random_bool(0.5) { Activation::Relu } else { Activation::Identity };
    let kl = r.random_bool(0.5);
    let output = if kl {
        Activation::Softmax
    } else if r.random_bool(0.5) {
        Activation::Identity
    } else {
        Activation::Relu
    };
    let mut net = DenseNet::random(&widths, hidden, output, &mut r);
    // zero biases behind dead units put pre-activations exactly on the ReLU kink
    for l in net.layers_mut() {
        l.bias.mapv_inplace(|_| r.random_range(-0.5..0.5));
    }
    let rows = r.random_range(1..=6);
    let inputs = random_matrix(rows, widths[0], &mut r);
    let out = *widths.last().unwrap();
    let (targets, loss) = if kl {
        (random_stochastic(rows, out, &mut r), Loss::KlDivergence)
    } else {
        (random_matrix(rows, out, &mut r), Loss::SquaredError)
    };
    (net, Batch::new(inputs, targets).unwrap(), loss)
}

/// Dense LU solve of `(a0 + γI)·W = a1` through nalgebra.
pub fn dense_solve(a0: &Array2<f64>, a1: &Array2<f64>, gamma: f64) -> Array2<f64> {
    let p = a0.nrows();
    let q = a1.ncols();
    let a = nalgebra::DMatrix::from_fn(p, p, |i, j| a0[[i, j]] + if i == j { gamma } else { 0.0 });
    let b = nalgebra::DMatrix::from_fn(p, q, |i, j| a1[[i, j]]);
    let x = a.lu().solve(&b).expect("nonsingular oracle system");
    Array2::from_shape_fn((p, q), |(i, j)| x[(i, j)])
}

pub fn random_spd(p: usize, r: &mut ChaCha8Rng) -> Array2<f64> {
    let g = random_matrix(p + 3, p, r);
    let mut a = g.t().dot(&g);
    for i in 0..p {
        a[[i, i]] += 0.1;
    }
    a
}

/// Objective `K_ε(E)·cost` of fixed fractions over `selected`, computed
/// from the raw formulas.
pub fn objective_by_hand(selected: &[usize], fractions: &[f64], work: &Workload, costs: &CostParams, e: usize) -> f64 {
    let ef = e as f64;
    let bms = costs.bandwidth_bps / 1000.0;
    let r_co: f64 = fractions.iter().map(|b| b * costs.bandwidth_bps * costs.p_c).sum();
    let r_cp: f64 = selected
        .iter()
        .map(|&m| ef * (work.client_ms[m] + work.server_ms[m]) * costs.p_tr)
        .sum();
    let makespan = selected
        .iter()
        .zip(fractions)
        .map(|(&m, &b)| ef * work.client_ms[m] + work.uplink_bits[m] / (b * bms))
        .fold(f64::NEG_INFINITY, f64::max);
    let server = selected.iter().map(|&m| ef * work.server_ms[m]).fold(0.0, f64::max);
    let cost = costs.rho * (r_co + r_cp) + (1.0 - costs.rho) * (makespan + server);
    k_epsilon(e, costs).unwrap() as f64 * cost
}

fn simplex_points(k: usize, units: usize, min_units: usize) -> Vec<Vec<usize>> {
    fn rec(k: usize, left: usize, min_units: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k == 1 {
            if left >= min_units {
                cur.push(left);
                out.push(cur.clone());
                cur.pop();
            }
            return;
        }
        for v in min_units..=left.saturating_sub(min_units * (k - 1)) {
            cur.push(v);
            rec(k - 1, left - v, min_units, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(k, units, min_units, &mut Vec::new(), &mut out);
    out
}

/// Grid search over the bandwidth simplex at resolution 1e-4 for every E.
/// A full 1e-4 grid is too large for four clients, so a 1e-2 grid is refined
/// around its best point in two rounds (1e-3, then 1e-4). The objective is
/// convex in the fractions for fixed E, so local refinement reaches the grid
/// optimum.
pub fn grid_oracle(selected: &[usize], work: &Workload, costs: &CostParams, e_last: usize) -> f64 {
    let k = selected.len();
    let mut best = f64::INFINITY;
    for e in 1..=e_last {
        let eval = |b: &[f64]| {
            if b.iter().any(|&x| x < costs.b_min - 1e-12) {
                return f64::INFINITY;
            }
            objective_by_hand(selected, b, work, costs, e)
        };
        let coarse_min = (costs.b_min * 100.0).ceil() as usize;
        let mut centre: Vec<f64> = Vec::new();
        let mut centre_val = f64::INFINITY;
        for p in simplex_points(k, 100, coarse_min) {
            let b: Vec<f64> = p.iter().map(|&u| u as f64 / 100.0).collect();
            let v = eval(&b);
            if v < centre_val {
                centre_val = v;
                centre = b;
            }
        }
        for step in [1e-3, 1e-4] {
            let span = 20i64;
            let base = centre.clone();
            let mut offsets = vec![-span; k - 1];
            loop {
                let mut b: Vec<f64> = base[..k - 1]
                    .iter()
                    .zip(&offsets)
                    .map(|(&x, &o)| x + o as f64 * step)
                    .collect();
                let last = 1.0 - b.iter().sum::<f64>();
                b.push(last);
                let v = eval(&b);
                if v < centre_val {
                    centre_val = v;
                    centre = b;
                }
                let mut i = 0;
                while i < k - 1 {
                    offsets[i] += 1;
                    if offsets[i] <= span {
                        break;
                    }
                    offsets[i] = -span;
                    i += 1;
                }
                if i == k - 1 {
                    break;
                }
            }
        }
        best = best.min(centre_val);
    }
    best
}

/// Softmax regression by full-batch gradient descent on one node.
pub fn logistic_oracle(train: &LabeledDataset, test: &LabeledDataset, iterations: usize, lr: f64) -> f64 {
    let d = train.feature_width();
    let c = train.class_count();
    let n = train.len() as f64;
    let mut w = Array2::<f64>::zeros((d, c));
    let mut b = Array1::<f64>::zeros(c);
    let probs = |x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>| {
        let mut z = x.dot(w) + b;
        for mut row in z.rows_mut() {
            let mx = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            row.mapv_inplace(|v| (v - mx).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        z
    };
    for _ in 0..iterations {
        let g = probs(&train.features, &w, &b) - &train.labels;
        w = w - train.features.t().dot(&g) * (lr / n);
        b = b - g.sum_axis(ndarray::Axis(0)) * (lr / n);
    }
    let p = probs(&test.features, &w, &b);
    splitme::nn::accuracy(p.view(), test.labels.view())
}

/// Two-layer linear server `O → H → Y` and an inverse model that maps `Y`
/// back to `H` exactly. Returns `(inverse, cut activations, labels, A1, a1, A2, a2)`.
#[allow(clippy::type_complexity)]
pub fn linear_inversion_case(
    seed: u64,
    rows: usize,
    cut: usize,
    hidden: usize,
) -> (DenseNet, Array2<f64>, Array2<f64>, Array2<f64>, Array1<f64>, Array2<f64>, Array1<f64>) {
    let mut r = rng(seed);
    let o = random_matrix(rows, cut, &mut r);
    let a1 = random_matrix(hidden, cut, &mut r);
    let c1 = Array1::from_shape_fn(hidden, |_| r.random_range(-1.0..1.0));
    // well-conditioned square map so the inverse exists
    let mut a2 = random_matrix(hidden, hidden, &mut r) * 0.3;
    for i in 0..hidden {
        a2[[i, i]] += 1.5;
    }
    let c2 = Array1::from_shape_fn(hidden, |_| r.random_range(-1.0..1.0));
    let h = o.dot(&a1.t()) + &c1;
    let y = h.dot(&a2.t()) + &c2;
    let a2_inv = dense_solve(&a2, &Array2::eye(hidden), 0.0);
    // inverse layer 1: y → A2⁻¹(y − c2); layer 2 maps to the cut width and is never used as supervision
    let inv1 = Layer::new(a2_inv.clone(), -a2_inv.dot(&c2), Activation::Identity).unwrap();
    let inv2 = Layer::new(random_matrix(cut, hidden, &mut r), Array1::zeros(cut), Activation::Identity).unwrap();
    let inverse = DenseNet::new(vec![inv1, inv2]).unwrap();
    (inverse, o, y, a1, c1, a2, c2)
}
