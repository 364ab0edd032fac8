//! Dense feed-forward networks with manual backpropagation.
//!
//! Rows are samples throughout: a layer maps `X: n×in` to `act(X·Wᵀ + b): n×out`
//! with `W` stored as `out×in`.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Floor applied inside logarithms of the KL loss.
pub const PROB_FLOOR: f64 = 1e-12;

/// Row-sum tolerance for inputs that must be probability vectors.
pub const STOCHASTIC_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
    Softmax,
}

impl Activation {
    pub fn tag(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Identity => 1,
            Activation::Softmax => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Identity),
            2 => Some(Activation::Softmax),
            _ => None,
        }
    }

    fn apply(self, z: &mut Array2<f64>) {
        match self {
            Activation::Identity => {}
            Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
            Activation::Softmax => softmax_rows_inplace(z),
        }
    }
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows_inplace(z: &mut Array2<f64>) {
    for mut row in z.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

pub fn softmax_rows(z: ArrayView2<f64>) -> Array2<f64> {
    let mut out = z.to_owned();
    softmax_rows_inplace(&mut out);
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn new(weight: Array2<f64>, bias: Array1<f64>, activation: Activation) -> Result<Self, NnError> {
        if weight.nrows() != bias.len() {
            return Err(NnError::Config(format!(
                "bias length {} does not match weight rows {}",
                bias.len(),
                weight.nrows()
            )));
        }
        Ok(Self { weight, bias, activation })
    }

    pub fn zeros(input: usize, output: usize, activation: Activation) -> Self {
        Self {
            weight: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
            activation,
        }
    }

    /// He-uniform weights, zero bias.
    pub fn random<R: Rng + ?Sized>(input: usize, output: usize, activation: Activation, rng: &mut R) -> Self {
        let limit = (6.0 / input.max(1) as f64).sqrt();
        let weight = Array2::from_shape_fn((output, input), |_| rng.random_range(-limit..limit));
        Self {
            weight,
            bias: Array1::zeros(output),
            activation,
        }
    }

    pub fn input_width(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_width(&self) -> usize {
        self.weight.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn pre_activation(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut z = x.dot(&self.weight.t());
        z += &self.bias;
        z
    }
}

/// Ordered stack of dense layers. Also serves as the parameter container
/// exchanged between participants.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct DenseNet {
    layers: Vec<Layer>,
}

pub type ModelParams = DenseNet;

impl DenseNet {
    pub fn new(layers: Vec<Layer>) -> Result<Self, NnError> {
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].output_width() != pair[1].input_width() {
                return Err(NnError::Config(format!(
                    "layer {} outputs {} values but layer {} expects {}",
                    i,
                    pair[0].output_width(),
                    i + 1,
                    pair[1].input_width()
                )));
            }
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.weight.nrows() != layer.bias.len() {
                return Err(NnError::Config(format!("layer {i}: bias/weight shape mismatch")));
            }
        }
        let net = Self { layers };
        if !net.is_finite() {
            return Err(NnError::Input("non-finite parameter".into()));
        }
        Ok(net)
    }

    /// Random network over `widths` (input width first). Hidden layers use
    /// `hidden`, the last layer uses `output`.
    pub fn random<R: Rng + ?Sized>(widths: &[usize], hidden: Activation, output: Activation, rng: &mut R) -> Self {
        let n = widths.len().saturating_sub(1);
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { output } else { hidden };
                Layer::random(widths[i], widths[i + 1], act, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn into_layers(self) -> Vec<Layer> {
        self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_width(&self) -> Option<usize> {
        self.layers.first().map(Layer::input_width)
    }

    pub fn output_width(&self) -> Option<usize> {
        self.layers.last().map(Layer::output_width)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    fn check_input(&self, inputs: ArrayView2<f64>) -> Result<(), NnError> {
        if let Some(w) = self.input_width() {
            if inputs.ncols() != w {
                return Err(NnError::Config(format!(
                    "input width {} does not match first layer width {}",
                    inputs.ncols(),
                    w
                )));
            }
        }
        Ok(())
    }

    pub fn forward(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>, NnError> {
        self.forward_prefix(inputs, self.layers.len())
    }

    /// Output after the first `depth` layers.
    pub fn forward_prefix(&self, inputs: ArrayView2<f64>, depth: usize) -> Result<Array2<f64>, NnError> {
        self.check_input(inputs)?;
        if depth > self.layers.len() {
            return Err(NnError::Config(format!(
                "depth {depth} exceeds network depth {}",
                self.layers.len()
            )));
        }
        let mut a = inputs.to_owned();
        for layer in &self.layers[..depth] {
            let mut z = layer.pre_activation(a.view());
            layer.activation.apply(&mut z);
            a = z;
        }
        Ok(a)
    }

    /// Post-activation outputs of every layer, input first.
    fn trace(&self, inputs: ArrayView2<f64>) -> Vec<Array2<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(inputs.to_owned());
        for layer in &self.layers {
            let mut z = layer.pre_activation(acts.last().unwrap().view());
            layer.activation.apply(&mut z);
            acts.push(z);
        }
        acts
    }

    /// Splits into the first `cut` layers and the remainder.
    pub fn split_at(mut self, cut: usize) -> Result<(DenseNet, DenseNet), NnError> {
        if cut > self.layers.len() {
            return Err(NnError::Config(format!("cut {cut} beyond depth {}", self.layers.len())));
        }
        let back = self.layers.split_off(cut);
        Ok((self, DenseNet { layers: back }))
    }

    pub fn join(&self, back: &DenseNet) -> Result<DenseNet, NnError> {
        let mut layers = self.layers.clone();
        layers.extend(back.layers.iter().cloned());
        DenseNet::new(layers)
    }

    /// Element-wise arithmetic mean of identically shaped networks.
    pub fn mean<'a, I>(nets: I) -> Result<DenseNet, NnError>
    where
        I: IntoIterator<Item = &'a DenseNet>,
    {
        let mut iter = nets.into_iter();
        let first = iter
            .next()
            .ok_or_else(|| NnError::Input("cannot average an empty set of models".into()))?;
        // running mean: exact when every input is identical
        let mut acc = first.clone();
        let mut count = 1usize;
        for net in iter {
            if !acc.same_shape(net) {
                return Err(NnError::Config("cannot average models of different shapes".into()));
            }
            count += 1;
            let k = count as f64;
            for (a, b) in acc.layers.iter_mut().zip(&net.layers) {
                Zip::from(&mut a.weight).and(&b.weight).for_each(|x, &y| *x += (y - *x) / k);
                Zip::from(&mut a.bias).and(&b.bias).for_each(|x, &y| *x += (y - *x) / k);
            }
        }
        Ok(acc)
    }

    pub fn same_shape(&self, other: &DenseNet) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weight.dim() == b.weight.dim() && a.activation == b.activation
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradClipBound(f64);

impl GradClipBound {
    pub fn new(g1: f64) -> Result<Self, NnError> {
        if !(g1 > 0.0 && g1.is_finite()) {
            return Err(NnError::Input(format!("gradient bound must be positive, got {g1}")));
        }
        Ok(Self(g1))
    }

    pub fn g1(self) -> f64 {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
}

impl Batch {
    pub fn new(inputs: Array2<f64>, targets: Array2<f64>) -> Result<Self, NnError> {
        if inputs.nrows() != targets.nrows() {
            return Err(NnError::Input(format!(
                "{} input rows but {} target rows",
                inputs.nrows(),
                targets.nrows()
            )));
        }
        if inputs.nrows() == 0 {
            return Err(NnError::Input("empty batch".into()));
        }
        Ok(Self { inputs, targets })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Loss {
    SquaredError,
    KlDivergence,
}

impl Loss {
    pub fn evaluate(self, pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<(f64, Array2<f64>), NnError> {
        match self {
            Loss::SquaredError => squared_error(pred, target),
            Loss::KlDivergence => kl_loss(pred, target),
        }
    }
}

fn check_same_shape(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<(), NnError> {
    if pred.dim() != target.dim() {
        return Err(NnError::Config(format!(
            "prediction shape {:?} does not match target shape {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    if pred.nrows() == 0 {
        return Err(NnError::Input("empty prediction".into()));
    }
    Ok(())
}

/// Mean over rows of the squared l2 error.
pub fn squared_error(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<(f64, Array2<f64>), NnError> {
    check_same_shape(pred, target)?;
    let n = pred.nrows() as f64;
    let diff = &pred - &target;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    Ok((loss, diff * (2.0 / n)))
}

fn check_stochastic(m: ArrayView2<f64>, what: &str) -> Result<(), NnError> {
    for (i, row) in m.rows().into_iter().enumerate() {
        if row.iter().any(|&v| v < -STOCHASTIC_TOL || !v.is_finite()) {
            return Err(NnError::Input(format!("{what} row {i} has a negative or non-finite entry")));
        }
        let sum = row.sum();
        if (sum - 1.0).abs() > STOCHASTIC_TOL {
            return Err(NnError::Input(format!("{what} row {i} sums to {sum}, not 1")));
        }
    }
    Ok(())
}

/// `mean_rows Σ_j target·ln(target/pred)`, i.e. the log-ratio weighted by the
/// second argument. Returns the loss and its gradient with respect to `pred`.
pub fn kl_loss(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<(f64, Array2<f64>), NnError> {
    check_same_shape(pred, target)?;
    check_stochastic(pred, "prediction")?;
    check_stochastic(target, "target")?;
    let n = pred.nrows() as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(pred.dim());
    Zip::from(&mut grad).and(&pred).and(&target).for_each(|g, &p, &t| {
        if t > 0.0 {
            loss += t * (t.max(PROB_FLOOR).ln() - p.max(PROB_FLOOR).ln());
            if p > PROB_FLOOR {
                *g = -t / (p * n);
            }
        }
    });
    Ok((loss / n, grad))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Gradients shaped like a [`DenseNet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

impl Gradients {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self {
            layers: net
                .layers()
                .iter()
                .map(|l| LayerGrad {
                    weight: Array2::zeros(l.weight.dim()),
                    bias: Array1::zeros(l.bias.len()),
                })
                .collect(),
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|g| g.weight.iter().chain(g.bias.iter()).map(|v| v * v).sum::<f64>())
            .sum()
    }

    pub fn scaled(mut self, factor: f64) -> Self {
        for g in &mut self.layers {
            g.weight.mapv_inplace(|v| v * factor);
            g.bias.mapv_inplace(|v| v * factor);
        }
        self
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|g| g.weight.iter().chain(g.bias.iter()).all(|v| v.is_finite()))
    }
}

/// Mean-batch loss and its gradient with respect to every parameter of `net`.
pub fn backward(net: &DenseNet, batch: &Batch, loss: Loss) -> Result<(f64, Gradients), NnError> {
    net.check_input(batch.inputs.view())?;
    let acts = net.trace(batch.inputs.view());
    let output = acts.last().unwrap();
    let (value, mut delta) = loss.evaluate(output.view(), batch.targets.view())?;
    let grads = propagate(net, &acts, &mut delta);
    Ok((value, grads))
}

/// Gradient of `Σ upstream ⊙ net(inputs)` with respect to parameters and inputs.
/// Used when the loss lives on another participant (split training).
pub fn backward_with_upstream(
    net: &DenseNet,
    inputs: ArrayView2<f64>,
    upstream: ArrayView2<f64>,
) -> Result<(Gradients, Array2<f64>), NnError> {
    net.check_input(inputs)?;
    let acts = net.trace(inputs);
    if acts.last().unwrap().dim() != upstream.dim() {
        return Err(NnError::Config("upstream gradient shape mismatch".into()));
    }
    let mut delta = upstream.to_owned();
    let grads = propagate(net, &acts, &mut delta);
    Ok((grads, delta))
}

/// Backpropagates `delta` (gradient w.r.t. the network output) and leaves the
/// gradient with respect to the network input in `delta`.
fn propagate(net: &DenseNet, acts: &[Array2<f64>], delta: &mut Array2<f64>) -> Gradients {
    let mut grads = Vec::with_capacity(net.depth());
    for (l, layer) in net.layers().iter().enumerate().rev() {
        let out = &acts[l + 1];
        match layer.activation {
            Activation::Identity => {}
            Activation::Relu => Zip::from(&mut *delta).and(out).for_each(|d, &a| {
                if a <= 0.0 {
                    *d = 0.0;
                }
            }),
            Activation::Softmax => {
                for (mut d, p) in delta.rows_mut().into_iter().zip(out.rows()) {
                    let dot = d.dot(&p);
                    Zip::from(&mut d).and(&p).for_each(|di, &pi| *di = pi * (*di - dot));
                }
            }
        }
        let weight = delta.t().dot(&acts[l]);
        let bias = delta.sum_axis(Axis(0));
        grads.push(LayerGrad { weight, bias });
        *delta = delta.dot(&layer.weight);
    }
    grads.reverse();
    Gradients { layers: grads }
}

/// Rescales `grads` so that its squared norm does not exceed `g1`.
pub fn clip_gradients(grads: Gradients, bound: GradClipBound) -> Gradients {
    let sq = grads.sq_norm();
    if sq > bound.g1() {
        let factor = (bound.g1() / sq).sqrt();
        grads.scaled(factor)
    } else {
        grads
    }
}

/// Global-norm clipping followed by a plain SGD step.
pub fn clip_then_step(net: &DenseNet, grads: Gradients, lr: f64, bound: GradClipBound) -> Result<DenseNet, NnError> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(NnError::Input(format!("learning rate must be non-negative, got {lr}")));
    }
    if grads.layers.len() != net.depth() {
        return Err(NnError::Config("gradient depth does not match network".into()));
    }
    let grads = clip_gradients(grads, bound);
    let mut next = net.clone();
    for (layer, g) in next.layers.iter_mut().zip(&grads.layers) {
        if layer.weight.dim() != g.weight.dim() || layer.bias.len() != g.bias.len() {
            return Err(NnError::Config("gradient shape does not match network".into()));
        }
        layer.weight.scaled_add(-lr, &g.weight);
        layer.bias.scaled_add(-lr, &g.bias);
    }
    Ok(next)
}

/// Index of the largest entry in each row.
pub fn argmax_rows(m: ArrayView2<f64>) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Fraction of rows whose argmax agrees.
pub fn accuracy(pred: ArrayView2<f64>, one_hot: ArrayView2<f64>) -> f64 {
    let p = argmax_rows(pred);
    let t = argmax_rows(one_hot);
    if p.is_empty() {
        return 0.0;
    }
    p.iter().zip(&t).filter(|(a, b)| a == b).count() as f64 / p.len() as f64
}
