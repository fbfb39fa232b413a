//! Feature-wise two-way gating, fused context, Granger utility of the text,
//! responsibility targets and the gate supervision loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::decoder::Decoder;
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::{sigmoid, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateConfig {
    /// Softmax temperature of the two-way gate.
    pub tau_gate: f64,
    /// Sharpness: `τ_gc = s_Δ / γ`.
    pub gamma: f64,
    /// Floor on the batch utility scale `s_Δ`.
    pub eps: f64,
    /// Clip bound on the scaled utility.
    pub clip: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            tau_gate: 1.0,
            gamma: 1.0,
            eps: 1e-6,
            clip: 6.0,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v > 0.0 && v.is_finite();
        if !ok(self.tau_gate) || !ok(self.gamma) || !ok(self.eps) || !ok(self.clip) {
            return Err(Error::Config(format!(
                "gate parameters must be positive: tau_gate={}, gamma={}, eps={}, clip={}",
                self.tau_gate, self.gamma, self.eps, self.clip
            )));
        }
        Ok(())
    }
}

/// `ψ_gate`: `2F → F → 2F`, producing the text and time-series logits.
#[derive(Debug, Clone)]
pub struct Gate {
    pub mlp: Mlp,
    pub dim: usize,
    pub config: GateConfig,
}

#[derive(Debug, Clone, Copy)]
pub struct GateWeights {
    pub text: Var,
    pub ts: Var,
}

impl Gate {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, dim: usize, config: GateConfig) -> Result<Self> {
        config.validate()?;
        Ok(Gate {
            mlp: Mlp::new(store, rng, "gate", ParamGroup::Gate, &[2 * dim, dim, 2 * dim])?,
            dim,
            config,
        })
    }

    /// `α^E = softmax over {a^E/τ, a^X/τ}`, computed as `σ((a^E − a^X)/τ)`;
    /// `α^X = 1 − α^E`.
    pub fn weights(&self, tape: &mut Tape, t: Var, s: Var) -> Result<GateWeights> {
        let v = tape.concat_cols(&[t, s])?;
        let a = self.mlp.forward(tape, v)?;
        let ae = tape.slice_cols(a, 0, self.dim)?;
        let ax = tape.slice_cols(a, self.dim, self.dim)?;
        let diff = tape.sub(ae, ax)?;
        let diff = tape.scale(diff, 1.0 / self.config.tau_gate);
        let text = tape.sigmoid(diff);
        let ts = tape.one_minus(text);
        Ok(GateWeights { text, ts })
    }
}

/// `z = α^E ⊙ t + α^X ⊙ s`.
pub fn fuse(tape: &mut Tape, t: Var, s: Var, w: GateWeights) -> Result<Var> {
    let a = tape.mul(w.text, t)?;
    let b = tape.mul(w.ts, s)?;
    tape.add(a, b)
}

/// Scalar openness: mean of `α^E`.
pub fn openness(tape: &mut Tape, w: GateWeights) -> Var {
    tape.mean(w.text)
}

/// Unrestricted and restricted decodes of one instance.
#[derive(Debug, Clone, Copy)]
pub struct GrangerUtility {
    pub pred_full: Var,
    pub pred_ts: Var,
    pub loss_full: f64,
    pub loss_ts: f64,
    /// `ℓ^ts − ℓ^full`; positive when the text helped.
    pub delta: f64,
}

/// Decodes `z` and `s` with the same decoder and compares their MSE against
/// `target`. The utility is a plain number and carries no gradient.
pub fn granger_utility(tape: &mut Tape, decoder: &Decoder, z: Var, s: Var, target: &Tensor) -> Result<GrangerUtility> {
    let (h, dy) = (decoder.config.horizon, decoder.config.d_y);
    if target.shape() != [h, dy] {
        return Err(Error::dim("granger_utility", target.shape(), &[h, dy]));
    }
    let pred_full = decoder.forward(tape, z)?;
    let pred_ts = decoder.forward(tape, s)?;
    let loss_full = mse_values(tape.value(pred_full).data(), target.data());
    let loss_ts = mse_values(tape.value(pred_ts).data(), target.data());
    Ok(GrangerUtility {
        pred_full,
        pred_ts,
        loss_full,
        loss_ts,
        delta: loss_ts - loss_full,
    })
}

pub(crate) fn mse_values(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// `r_i = σ(clip(Δ_i/τ_gc, −c, c))` with `τ_gc = max(mean|Δ|, ε)/γ`.
pub fn responsibility(deltas: &[f64], config: &GateConfig) -> Result<Vec<f64>> {
    if deltas.is_empty() {
        return Err(Error::InvalidArgument {
            op: "responsibility",
            reason: "empty batch".into(),
        });
    }
    if let Some(i) = deltas.iter().position(|d| !d.is_finite()) {
        return Err(Error::NonFinite {
            context: format!("Granger utility of batch item {i}"),
        });
    }
    let scale = (deltas.iter().map(|d| d.abs()).sum::<f64>() / deltas.len() as f64).max(config.eps);
    let tau_gc = scale / config.gamma;
    Ok(deltas
        .iter()
        .map(|d| sigmoid((d / tau_gc).clamp(-config.clip, config.clip)))
        .collect())
}

/// `mean_i (α_i − r_i)²`; `r` enters as a constant.
pub fn gate_loss(tape: &mut Tape, openness: &[Var], r: &[f64]) -> Result<Var> {
    if openness.len() != r.len() || r.is_empty() {
        return Err(Error::dim("gate_loss", &[openness.len()], &[r.len()]));
    }
    let a = tape.concat_rows(openness)?;
    let target = tape.constant(Tensor::new(vec![r.len(), 1], r.to_vec())?);
    tape.mse(a, target)
}
