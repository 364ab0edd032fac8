use ndarray::{s, Array1, Array2, ArrayView2};

use super::ProtocolError;
use crate::nn::{Activation, DenseNet, Layer};
use crate::ridge::ridge_solve;

/// Recovered server-side model and how many all-reduce pairs it took.
#[derive(Clone, Debug, PartialEq)]
pub struct Inversion {
    pub server: DenseNet,
    pub allreduce_pairs: usize,
}

/// Sums per-participant partial matrices in participant order.
pub fn allreduce_sum(parts: &[Array2<f64>]) -> Result<Array2<f64>, ProtocolError> {
    let first = parts
        .first()
        .ok_or_else(|| ProtocolError::Config("all-reduce over no participants".into()))?;
    let mut acc = first.clone();
    for p in &parts[1..] {
        if p.dim() != acc.dim() {
            return Err(ProtocolError::Config("all-reduce shape mismatch".into()));
        }
        acc += p;
    }
    Ok(acc)
}

/// `[o | 1]`, so the least-squares fit also recovers the bias.
fn with_ones(o: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::ones((o.nrows(), o.ncols() + 1));
    out.slice_mut(s![.., ..o.ncols()]).assign(o);
    out
}

/// Layer-wise recovery of the server-side model from the inverse model.
///
/// Server layer `l` (1-based, `n` layers) is fitted to the representation the
/// inverse model produces after `n − l` of its layers, so the last server layer
/// maps onto the labels themselves. Its input is the cut-layer activation
/// pushed through the already recovered layers. `activations[l-1]` gives the
/// activation of recovered layer `l`.
pub fn invert_server_model(
    inverse: &DenseNet,
    participants: &[(ArrayView2<f64>, ArrayView2<f64>)],
    gamma: f64,
    activations: &[Activation],
) -> Result<Inversion, ProtocolError> {
    if participants.is_empty() {
        return Err(ProtocolError::Config("inversion needs at least one participant".into()));
    }
    let n = inverse.depth();
    if n == 0 || activations.len() != n {
        return Err(ProtocolError::Config(format!(
            "inverse model has {n} layers but {} server activations were given",
            activations.len()
        )));
    }
    let mut inputs: Vec<Array2<f64>> = participants.iter().map(|(_, x)| x.to_owned()).collect();
    let mut layers = Vec::with_capacity(n);
    for l in 1..=n {
        let mut gram = Vec::with_capacity(participants.len());
        let mut cross = Vec::with_capacity(participants.len());
        for ((labels, _), o) in participants.iter().zip(&inputs) {
            let z = inverse.forward_prefix(*labels, n - l)?;
            if z.nrows() != o.nrows() {
                return Err(ProtocolError::Config(format!(
                    "layer {l}: {} supervision rows but {} input rows",
                    z.nrows(),
                    o.nrows()
                )));
            }
            let oa = with_ones(o);
            gram.push(oa.t().dot(&oa));
            cross.push(oa.t().dot(&z));
        }
        let a0 = allreduce_sum(&gram)?;
        let a1 = allreduce_sum(&cross)?;
        let w = ridge_solve(a0.view(), a1.view(), gamma).map_err(|source| ProtocolError::Inversion { layer: l, source })?;
        let p = w.nrows() - 1;
        let weight = w.slice(s![..p, ..]).t().to_owned();
        let bias: Array1<f64> = w.row(p).to_owned();
        let layer = Layer::new(weight, bias, activations[l - 1])?;
        let single = DenseNet::new(vec![layer.clone()])?;
        for o in &mut inputs {
            *o = single.forward(o.view())?;
        }
        layers.push(layer);
    }
    Ok(Inversion {
        server: DenseNet::new(layers)?,
        allreduce_pairs: n,
    })
}
