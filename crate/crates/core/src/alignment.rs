//! Cross-modal alignment: instance-level InfoNCE over cross-attended pooled
//! embeddings, and salience-weighted token/step InfoNCE.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{cross_attention, Attended, Linear, MultiHeadAttention};
use crate::params::{ParamGroup, ParamId, ParamStore};

pub const DEFAULT_TAU_CTR: f64 = 0.1;
pub const DEFAULT_TAU_ALIGN: f64 = 0.2;
pub const DEFAULT_TAU_NCE: f64 = 0.07;
pub const DEFAULT_K_TOP: usize = 256;

/// Both cross-attention directions use their own weights.
#[derive(Debug, Clone)]
pub struct Interleave {
    /// Text queries over time-series keys.
    pub text_to_ts: MultiHeadAttention,
    /// Time-series queries over text keys.
    pub ts_to_text: MultiHeadAttention,
}

impl Interleave {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, f: usize, n_head: usize) -> Result<Self> {
        Ok(Interleave {
            text_to_ts: MultiHeadAttention::new(store, rng, "ca.text", ParamGroup::CrossAttention, f, n_head)?,
            ts_to_text: MultiHeadAttention::new(store, rng, "ca.ts", ParamGroup::CrossAttention, f, n_head)?,
        })
    }
}

/// Returns `(H̃^E, H̃^X)` with residuals; attention maps are kept for inspection.
pub fn bidirectional_interleave(
    tape: &mut Tape,
    layer: &Interleave,
    text: Var,
    ts: Var,
) -> Result<(Attended, Attended)> {
    let e = cross_attention(&layer.text_to_ts, tape, text, ts)?;
    let x = cross_attention(&layer.ts_to_text, tape, ts, text)?;
    Ok((e, x))
}

/// Arithmetic mean over rows.
pub fn pool(tape: &mut Tape, seq: Var) -> Var {
    tape.mean_rows(seq)
}

/// Mean over `i` of `-log softmax_k(⟨ŝ_i, t̂_k⟩ / τ)[i]`, with in-batch negatives.
pub fn instance_contrastive_loss(tape: &mut Tape, s: &[Var], t: &[Var], tau: f64) -> Result<Var> {
    if s.len() != t.len() {
        return Err(Error::dim("instance_contrastive_loss", &[s.len()], &[t.len()]));
    }
    if s.len() < 2 {
        return Err(Error::Contract(format!(
            "instance contrastive loss needs at least 2 instances, got {}",
            s.len()
        )));
    }
    check_tau("instance_contrastive_loss", tau)?;
    let n = s.len();
    let s_all = tape.concat_rows(s)?;
    let t_all = tape.concat_rows(t)?;
    let s_hat = tape.normalize_rows(s_all)?;
    let t_hat = tape.normalize_rows(t_all)?;
    let sim = tape.matmul_nt(s_hat, t_hat)?;
    let logits = tape.scale(sim, 1.0 / tau);
    let lsm = tape.log_softmax_rows(logits);
    let diag: Vec<usize> = (0..n).map(|i| i * n + i).collect();
    let pos = tape.gather_elems(lsm, &diag)?;
    let mean = tape.mean(pos);
    Ok(tape.scale(mean, -1.0))
}

fn check_tau(op: &'static str, tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument {
            op,
            reason: format!("temperature must be positive, got {tau}"),
        })
    }
}

/// `φ^E`, `φ^X` (affine, then unit rows) and the salience scorer `w`.
#[derive(Debug, Clone)]
pub struct AlignmentHeads {
    pub text: Linear,
    pub ts: Linear,
    pub scorer: ParamId,
}

impl AlignmentHeads {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, f: usize) -> Self {
        let g = ParamGroup::Alignment;
        AlignmentHeads {
            text: Linear::new(store, rng, "align.text", g, f, f, true),
            ts: Linear::new(store, rng, "align.ts", g, f, f, true),
            scorer: store.add_fan_in("align.scorer", g, &[f, 1], f, rng),
        }
    }

    /// `Z = normalize_rows(φ(H))`.
    pub fn project(&self, tape: &mut Tape, head: &Linear, h: Var) -> Result<Var> {
        let z = head.forward(tape, h)?;
        tape.normalize_rows(z)
    }
}

/// Returns `S = Z^E·Z^Xᵀ/τ` and its row softmax `P`.
pub fn token_step_similarity(tape: &mut Tape, ze: Var, zx: Var, tau: f64) -> Result<(Var, Var)> {
    check_tau("token_step_similarity", tau)?;
    let sim = tape.matmul_nt(ze, zx)?;
    let s = tape.scale(sim, 1.0 / tau);
    let p = tape.softmax(s, 1)?;
    Ok((s, p))
}

/// Row `j` is `Σ_ℓ P[j,ℓ]·Z^X[ℓ]`.
pub fn soft_positive(tape: &mut Tape, p: Var, zx: Var) -> Result<Var> {
    tape.matmul(p, zx)
}

#[derive(Debug, Clone)]
pub struct SalienceProfile {
    /// Softmax over tokens, `m × 1`.
    pub scores: Var,
    /// Top-scoring token indices in rank order.
    pub anchors: Vec<usize>,
}

/// Indices of the `k` largest values; equal values rank by lower index.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k.min(values.len()));
    idx
}

pub fn salience_and_anchors(tape: &mut Tape, text: Var, scorer: Var, k_top: usize) -> Result<SalienceProfile> {
    let logits = tape.matmul(text, scorer)?;
    let scores = tape.softmax(logits, 0)?;
    let anchors = top_k_indices(tape.value(scores).data(), k_top.max(1));
    Ok(SalienceProfile { scores, anchors })
}

/// Per-instance inputs to [`token_contrastive_loss`].
#[derive(Debug, Clone)]
pub struct TokenAlignment {
    pub ze: Var,
    pub zx: Var,
    /// Row-softmax of token/step similarities.
    pub p: Var,
    pub salience: SalienceProfile,
}

/// Salience-weighted InfoNCE over anchor tokens. The positive is the soft
/// positive of the token; negatives are every step of every other instance.
pub fn token_contrastive_loss(tape: &mut Tape, batch: &[TokenAlignment], tau: f64) -> Result<Var> {
    if batch.len() < 2 {
        return Err(Error::Contract(format!(
            "token contrastive loss needs cross-sample negatives, got {} instance(s)",
            batch.len()
        )));
    }
    check_tau("token_contrastive_loss", tau)?;
    let mut terms = Vec::with_capacity(batch.len());
    for (i, item) in batch.iter().enumerate() {
        let anchors = &item.salience.anchors;
        let za = tape.gather_rows(item.ze, anchors)?;
        let pa = tape.gather_rows(item.p, anchors)?;
        let plus = soft_positive(tape, pa, item.zx)?;
        let prod = tape.mul(za, plus)?;
        let pos = tape.row_sums(prod);

        let others: Vec<Var> = batch
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != i)
            .map(|(_, o)| o.zx)
            .collect();
        let negs = tape.concat_rows(&others)?;
        let neg = tape.matmul_nt(za, negs)?;

        let logits = tape.concat_cols(&[pos, neg])?;
        let logits = tape.scale(logits, 1.0 / tau);
        let lsm = tape.log_softmax_rows(logits);
        let log_pos = tape.slice_cols(lsm, 0, 1)?;
        let w = tape.gather_rows(item.salience.scores, anchors)?;
        let weighted = tape.mul(w, log_pos)?;
        terms.push(tape.sum(weighted));
    }
    let total = tape.add_n(&terms)?;
    Ok(tape.scale(total, -1.0 / batch.len() as f64))
}

#[derive(Debug, Clone, Copy)]
pub struct AlignmentLosses {
    pub ctr: Var,
    pub tok: Var,
    pub total: Var,
}

pub fn alignment_loss(tape: &mut Tape, ctr: Var, tok: Var) -> Result<AlignmentLosses> {
    let total = tape.add(ctr, tok)?;
    Ok(AlignmentLosses { ctr, tok, total })
}
