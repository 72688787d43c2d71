//! Building blocks layered on the raw graph ops: attention, linear layers,
//! activations and weight initialization.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Graph, NodeId, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: NodeId) -> NodeId {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
            Activation::Identity => x,
        }
    }
}

/// Projection matrices for one self-attention block. All are `d x d`; heads
/// are column slices of width `d / heads`.
#[derive(Debug, Clone, Copy)]
pub struct AttnParams {
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    pub wo: NodeId,
}

pub struct AttnOutput {
    pub out: NodeId,
    /// Per-head attention matrices (softmax outputs), `s x s` each.
    pub weights: Vec<NodeId>,
}

/// Scaled dot-product self-attention over a sequence `e` of shape `[s, d]`,
/// with per-head outputs concatenated and mixed by `wo`.
pub fn multi_head_attention(g: &mut Graph, e: NodeId, p: &AttnParams, heads: usize) -> Result<AttnOutput> {
    let d = g.value(e).cols();
    if heads == 0 || d % heads != 0 {
        return Err(TensorError::Config(format!("width {d} not divisible into {heads} heads")));
    }
    let dh = d / heads;
    let q = g.matmul(e, p.wq)?;
    let k = g.matmul(e, p.wk)?;
    let v = g.matmul(e, p.wv)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scaled = g.scale(scores, scale);
        let attn = g.softmax(scaled, 1)?;
        outs.push(g.matmul(attn, vh)?);
        weights.push(attn);
    }
    let cat = g.concat_cols(&outs)?;
    let out = g.matmul(cat, p.wo)?;
    Ok(AttnOutput { out, weights })
}

/// `x W + b` with `b` broadcast over rows.
pub fn linear(g: &mut Graph, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let xw = g.matmul(x, w)?;
    g.add_row(xw, b)
}

/// Uniform init in `(-1/sqrt(fan_in), 1/sqrt(fan_in))` for projection weights.
pub fn uniform_init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::matrix(fan_in, fan_out, data).expect("sized by construction")
}

/// Normal(0, std) init, used for embedding tables.
pub fn normal_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| std * standard_normal(rng)).collect();
    Tensor::matrix(rows, cols, data).expect("sized by construction")
}

/// Box-Muller draw from the standard normal.
fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
