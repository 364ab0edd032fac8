//! Model architecture, the client/server split, payload sizing and the model
//! file format.
//!
//! Model file layout (all integers and scalars little-endian):
//!
//! ```text
//! magic      8 bytes   "SPLITME\0"
//! version    u32       1
//! layers     u32       L
//! header     L × { rows: u32, cols: u32, activation: u8 }
//! data       L × { weight: rows·cols f64 row-major, bias: rows f64 }
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Activation, DenseNet, Layer, NnError};

pub const MODEL_MAGIC: &[u8; 8] = b"SPLITME\0";
pub const MODEL_VERSION: u32 = 1;

/// Bits per transmitted scalar.
pub const SCALAR_BITS: u64 = 64;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("model file format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Widths of every representation of the full model, input first and class
/// count last; `cut_index` layers run on the client.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSpec {
    pub layer_widths: Vec<usize>,
    pub cut_index: usize,
}

impl ArchitectureSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layer_widths.len() < 3 {
            return Err(ModelError::Config("need at least two layers (three widths)".into()));
        }
        if let Some(pos) = self.layer_widths.iter().position(|&w| w == 0) {
            return Err(ModelError::Config(format!("layer width at position {pos} is zero")));
        }
        let layers = self.layer_count();
        if self.cut_index < 1 || self.cut_index >= layers {
            return Err(ModelError::Config(format!(
                "cut index {} out of range 1..{}",
                self.cut_index, layers
            )));
        }
        Ok(())
    }

    pub fn layer_count(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn class_count(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    pub fn cut_width(&self) -> usize {
        self.layer_widths[self.cut_index]
    }

    pub fn client_widths(&self) -> &[usize] {
        &self.layer_widths[..=self.cut_index]
    }

    pub fn server_widths(&self) -> &[usize] {
        &self.layer_widths[self.cut_index..]
    }

    /// Reversed server widths: class count first, cut width last.
    pub fn inverse_server_widths(&self) -> Vec<usize> {
        self.server_widths().iter().rev().copied().collect()
    }

    /// Activations of the server-side model recovered by inversion:
    /// ReLU on hidden layers, identity on the output.
    pub fn server_activations(&self) -> Vec<Activation> {
        let n = self.layer_count() - self.cut_index;
        (0..n)
            .map(|i| if i + 1 == n { Activation::Identity } else { Activation::Relu })
            .collect()
    }

    pub fn client_param_count(&self) -> usize {
        param_count(self.client_widths())
    }

    pub fn total_param_count(&self) -> usize {
        param_count(&self.layer_widths)
    }
}

fn param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// Payload sizes entering the uplink-time model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSizes {
    /// Size of the entire model in bits.
    pub d_bits: u64,
    /// Client share of the parameter count.
    pub omega: f64,
    pub cut_width: usize,
    /// Activation payload of each client over its full local dataset.
    pub s_m_bits: Vec<u64>,
}

impl SplitSizes {
    pub fn from_spec(spec: &ArchitectureSpec) -> Self {
        Self {
            d_bits: spec.total_param_count() as u64 * SCALAR_BITS,
            omega: spec.client_param_count() as f64 / spec.total_param_count() as f64,
            cut_width: spec.cut_width(),
            s_m_bits: Vec::new(),
        }
    }

    /// Fills per-client activation payloads from local dataset sizes.
    pub fn with_samples(mut self, samples: &[usize]) -> Self {
        self.s_m_bits = samples.iter().map(|&n| self.activation_bits(n)).collect();
        self
    }

    pub fn activation_bits(&self, rows: usize) -> u64 {
        rows as u64 * self.cut_width as u64 * SCALAR_BITS
    }

    /// `ω·d` in bits.
    pub fn client_model_bits(&self) -> f64 {
        self.omega * self.d_bits as f64
    }

    /// `S_m + ω·d` for client `m`.
    pub fn uplink_bits(&self, m: usize) -> f64 {
        self.s_m_bits[m] as f64 + self.client_model_bits()
    }
}

/// Freshly initialized SplitMe participants.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitModels {
    pub client: DenseNet,
    pub inverse_server: DenseNet,
    /// Server half of the initial full model.
    pub server: DenseNet,
    pub sizes: SplitSizes,
}

/// Initial full model `w⁰ = [w_C⁰, w_S⁰]`: ReLU hidden layers, softmax output.
pub fn full_model(spec: &ArchitectureSpec, seed: u64) -> Result<DenseNet, ModelError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(DenseNet::random(&spec.layer_widths, Activation::Relu, Activation::Softmax, &mut rng))
}

/// Builds the client-side model (softmax at the cut), the inverse server-side
/// model and the payload sizes. The client starts from the same weights as the
/// front of [`full_model`] with the same seed.
pub fn split(spec: &ArchitectureSpec, seed: u64) -> Result<SplitModels, ModelError> {
    let full = full_model(spec, seed)?;
    let (mut client, server) = full.split_at(spec.cut_index)?;
    if let Some(last) = client.layers_mut().last_mut() {
        last.activation = Activation::Softmax;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15);
    let inverse_server = DenseNet::random(
        &spec.inverse_server_widths(),
        Activation::Relu,
        Activation::Softmax,
        &mut rng,
    );
    Ok(SplitModels {
        client,
        inverse_server,
        server,
        sizes: SplitSizes::from_spec(spec),
    })
}

pub fn payload_bits(params: &DenseNet) -> u64 {
    params.param_count() as u64 * SCALAR_BITS
}

pub fn write_model<W: Write>(params: &DenseNet, mut w: W) -> Result<(), ModelError> {
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&MODEL_VERSION.to_le_bytes())?;
    w.write_all(&(params.depth() as u32).to_le_bytes())?;
    for layer in params.layers() {
        w.write_all(&(layer.weight.nrows() as u32).to_le_bytes())?;
        w.write_all(&(layer.weight.ncols() as u32).to_le_bytes())?;
        w.write_all(&[layer.activation.tag()])?;
    }
    for layer in params.layers() {
        for v in layer.weight.iter().chain(layer.bias.iter()) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn take<'a>(buf: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8], ModelError> {
    if buf.len() < n {
        return Err(ModelError::Format(format!("truncated while reading {what}")));
    }
    let (head, tail) = buf.split_at(n);
    *buf = tail;
    Ok(head)
}

fn take_u32(buf: &mut &[u8], what: &str) -> Result<u32, ModelError> {
    Ok(u32::from_le_bytes(take(buf, 4, what)?.try_into().unwrap()))
}

pub fn read_model<R: Read>(mut r: R) -> Result<DenseNet, ModelError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut buf = bytes.as_slice();
    if take(&mut buf, 8, "magic")? != MODEL_MAGIC {
        return Err(ModelError::Format("bad magic".into()));
    }
    let version = take_u32(&mut buf, "version")?;
    if version != MODEL_VERSION {
        return Err(ModelError::Format(format!("unsupported version {version}")));
    }
    let count = take_u32(&mut buf, "layer count")? as usize;
    let mut shapes = Vec::with_capacity(count.min(1024));
    for i in 0..count {
        let rows = take_u32(&mut buf, "layer header")? as usize;
        let cols = take_u32(&mut buf, "layer header")? as usize;
        let tag = take(&mut buf, 1, "layer header")?[0];
        let act = Activation::from_tag(tag)
            .ok_or_else(|| ModelError::Format(format!("layer {i}: unknown activation tag {tag}")))?;
        shapes.push((rows, cols, act));
    }
    let mut layers = Vec::with_capacity(count);
    for (i, &(rows, cols, act)) in shapes.iter().enumerate() {
        let mut scalars = |n: usize| -> Result<Vec<f64>, ModelError> {
            let raw = take(&mut buf, n * 8, &format!("layer {i} data"))?;
            Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
        };
        let weight = Array2::from_shape_vec((rows, cols), scalars(rows * cols)?)
            .map_err(|e| ModelError::Format(e.to_string()))?;
        let bias = Array1::from_vec(scalars(rows)?);
        layers.push(Layer::new(weight, bias, act)?);
    }
    if !buf.is_empty() {
        return Err(ModelError::Format(format!("{} trailing bytes", buf.len())));
    }
    DenseNet::new(layers).map_err(|e| ModelError::Format(e.to_string()))
}

pub fn save(params: &DenseNet, path: &Path) -> Result<(), ModelError> {
    let mut bytes = Vec::new();
    write_model(params, &mut bytes)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<DenseNet, ModelError> {
    read_model(fs::File::open(path)?)
}
