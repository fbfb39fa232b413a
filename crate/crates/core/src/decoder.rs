//! Horizon decoder: expands a context vector into `H` positions, runs a stack
//! of unmasked transformer blocks and regresses each position to `d_y` values.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{positional_table, DecoderBlock, Linear};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    /// Number of transformer blocks.
    pub layers: usize,
    pub n_head: usize,
    pub d_model: usize,
    /// GELU layers in the regression head before the output map.
    pub reg_depth: usize,
    pub horizon: usize,
    pub d_y: usize,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self;
        if c.layers == 0 || c.reg_depth == 0 || c.horizon == 0 || c.d_y == 0 || c.d_model == 0 {
            return Err(Error::Config(format!(
                "decoder needs layers, reg_depth, horizon, d_y, d_model ≥ 1: {c:?}"
            )));
        }
        if c.n_head == 0 || !c.d_model.is_multiple_of(c.n_head) {
            return Err(Error::Config(format!(
                "decoder d_model {} not divisible by n_head {}",
                c.d_model, c.n_head
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub input: Linear,
    pub blocks: Vec<DecoderBlock>,
    pub head: Vec<Linear>,
    pub output: Linear,
    positions: Tensor,
}

impl Decoder {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, context_dim: usize, config: DecoderConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let input = Linear::new(store, rng, "dec.input", ParamGroup::Decoder, context_dim, d, false);
        let blocks = (0..config.layers)
            .map(|i| {
                DecoderBlock::new(
                    store,
                    rng,
                    &format!("dec.block{i}"),
                    ParamGroup::Decoder,
                    d,
                    config.n_head,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let head = (0..config.reg_depth)
            .map(|i| Linear::new(store, rng, &format!("head.{i}"), ParamGroup::Head, d, d, true))
            .collect();
        let output = Linear::new(store, rng, "head.out", ParamGroup::Head, d, config.d_y, true);
        Ok(Decoder {
            config,
            input,
            blocks,
            head,
            output,
            positions: positional_table(config.horizon, d),
        })
    }

    pub fn context_dim(&self) -> usize {
        self.input.in_dim
    }

    /// `D[h] = W_in·z + PE(h)` for `h = 1..=H`.
    pub fn expand_context(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        if tape.value(z).rows() != 1 {
            return Err(Error::dim("expand_context", tape.shape(z), &[1, self.context_dim()]));
        }
        let wz = self.input.forward(tape, z)?;
        let pe = tape.constant(self.positions.clone());
        tape.add_row(pe, wz)
    }

    pub fn decode(&self, tape: &mut Tape, expanded: Var) -> Result<Var> {
        let mut h = expanded;
        for block in &self.blocks {
            h = block.forward(tape, h)?;
        }
        Ok(h)
    }

    /// Shared per-position head: GELU layers, then the affine output map.
    pub fn regress(&self, tape: &mut Tape, hidden: Var) -> Result<Var> {
        let mut h = hidden;
        for layer in &self.head {
            let a = layer.forward(tape, h)?;
            h = tape.gelu(a);
        }
        self.output.forward(tape, h)
    }

    /// `H × d_y` forecast from a `1 × F` context.
    pub fn forward(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let d = self.expand_context(tape, z)?;
        let h = self.decode(tape, d)?;
        self.regress(tape, h)
    }
}
