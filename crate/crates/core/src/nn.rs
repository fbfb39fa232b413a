//! Linear layers, MLPs, multi-head attention, decoder blocks and sinusoidal
//! position codes.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;

/// Affine map `x·Wᵀ + b` with `W` stored `out×in`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Fan-in uniform weights, zero bias.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        group: ParamGroup,
        in_dim: usize,
        out_dim: usize,
        with_bias: bool,
    ) -> Self {
        let weight = store.add_fan_in(format!("{name}.weight"), group, &[out_dim, in_dim], in_dim, rng);
        let bias = with_bias.then(|| store.add_filled(format!("{name}.bias"), group, &[out_dim], 0.0));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        if tape.value(x).cols() != self.in_dim {
            return Err(Error::dim("linear", tape.shape(x), &[self.out_dim, self.in_dim]));
        }
        let w = tape.param(self.weight);
        let y = tape.matmul_nt(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Affine layers with GELU between them; the last layer stays affine.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        group: ParamGroup,
        dims: &[usize],
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidArgument {
                op: "Mlp::new",
                reason: format!("need at least two dims, got {dims:?}"),
            });
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, rng, &format!("{name}.{i}"), group, w[0], w[1], true))
            .collect();
        Ok(Mlp { layers })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        mlp_forward(tape, x, &self.layers)
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }
}

pub fn mlp_forward(tape: &mut Tape, x: Var, layers: &[Linear]) -> Result<Var> {
    for pair in layers.windows(2) {
        if pair[0].out_dim != pair[1].in_dim {
            return Err(Error::dim("mlp_forward", &[pair[0].out_dim], &[pair[1].in_dim]));
        }
    }
    let mut h = x;
    for (i, layer) in layers.iter().enumerate() {
        h = layer.forward(tape, h)?;
        if i + 1 < layers.len() {
            h = tape.gelu(h);
        }
    }
    Ok(h)
}

/// Layer normalization with learnable gain (init 1) and bias (init 0).
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, dim: usize) -> Self {
        LayerNorm {
            gain: store.add_filled(format!("{name}.gain"), group, &[dim], 1.0),
            bias: store.add_filled(format!("{name}.bias"), group, &[dim], 0.0),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = tape.layer_norm(x, LN_EPS);
        let g = tape.param(self.gain);
        let b = tape.param(self.bias);
        let y = tape.mul_row(y, g)?;
        tape.add_row(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub n_head: usize,
    pub dim: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

/// Attention result plus the per-head weight matrices (`n_q × n_kv`).
pub struct Attended {
    pub output: Var,
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        group: ParamGroup,
        dim: usize,
        n_head: usize,
    ) -> Result<Self> {
        if n_head == 0 || !dim.is_multiple_of(n_head) {
            return Err(Error::InvalidArgument {
                op: "MultiHeadAttention::new",
                reason: format!("dim {dim} not divisible by {n_head} heads"),
            });
        }
        let mut lin = |suffix: &str| Linear::new(store, rng, &format!("{name}.{suffix}"), group, dim, dim, true);
        Ok(MultiHeadAttention {
            n_head,
            dim,
            query: lin("q"),
            key: lin("k"),
            value: lin("v"),
            output: lin("o"),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.n_head
    }

    /// Scaled dot-product attention of `q_seq` over `kv_seq`, without residual.
    pub fn attend(&self, tape: &mut Tape, q_seq: Var, kv_seq: Var) -> Result<Attended> {
        let (qd, kd) = (tape.value(q_seq).cols(), tape.value(kv_seq).cols());
        if qd != self.dim || kd != self.dim {
            return Err(Error::dim("attention", tape.shape(q_seq), tape.shape(kv_seq)));
        }
        let q = self.query.forward(tape, q_seq)?;
        let k = self.key.forward(tape, kv_seq)?;
        let v = self.value.forward(tape, kv_seq)?;
        let hd = self.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_head);
        let mut weights = Vec::with_capacity(self.n_head);
        for h in 0..self.n_head {
            let (qh, kh, vh) = if self.n_head == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, h * hd, hd)?,
                    tape.slice_cols(k, h * hd, hd)?,
                    tape.slice_cols(v, h * hd, hd)?,
                )
            };
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax(scores, 1)?;
            heads.push(tape.matmul(attn, vh)?);
            weights.push(attn);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        };
        let output = self.output.forward(tape, merged)?;
        Ok(Attended { output, weights })
    }
}

/// `q_seq + MHA(Q = q_seq, K = V = kv_seq)`.
pub fn cross_attention(mha: &MultiHeadAttention, tape: &mut Tape, q_seq: Var, kv_seq: Var) -> Result<Attended> {
    let att = mha.attend(tape, q_seq, kv_seq)?;
    let output = tape.add(q_seq, att.output)?;
    Ok(Attended {
        output,
        weights: att.weights,
    })
}

/// Post-norm transformer block: self-attention then a GELU feed-forward,
/// each wrapped in a residual connection followed by layer norm.
#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: Mlp,
    pub norm2: LayerNorm,
}

impl DecoderBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        group: ParamGroup,
        dim: usize,
        n_head: usize,
    ) -> Result<Self> {
        Ok(DecoderBlock {
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), group, dim, n_head)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), group, dim),
            ffn: Mlp::new(store, rng, &format!("{name}.ffn"), group, &[dim, 4 * dim, dim])?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), group, dim),
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let att = self.attn.attend(tape, x, x)?;
        let h = tape.add(x, att.output)?;
        let h = self.norm1.forward(tape, h)?;
        let f = self.ffn.forward(tape, h)?;
        let h2 = tape.add(h, f)?;
        self.norm2.forward(tape, h2)
    }
}

/// Sinusoidal code for 1-based position `h`:
/// `PE[2k] = sin(h / 10000^(2k/d))`, `PE[2k+1] = cos(h / 10000^(2k/d))`.
pub fn positional_encoding(h: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| {
            let k2 = (i - i % 2) as f64;
            let angle = h as f64 / 10000f64.powf(k2 / d as f64);
            if i % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Positional codes for positions `1..=n` stacked as an `n×d` matrix.
pub fn positional_table(n: usize, d: usize) -> Tensor {
    let data = (1..=n).flat_map(|h| positional_encoding(h, d)).collect();
    Tensor::new(vec![n, d], data).expect("n*d values")
}
