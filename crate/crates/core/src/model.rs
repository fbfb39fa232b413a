//! The full forecasting stack: surrogate encoders, projection heads,
//! cross-modal alignment, Granger-supervised gate and horizon decoder.
//!
//! Forecasts are produced as offsets from the last observed value of each
//! target channel; [`Prepared`] stores targets in the same offset space so
//! every loss is identical to its level-space counterpart.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{
    alignment_loss, bidirectional_interleave, instance_contrastive_loss, pool, salience_and_anchors,
    token_contrastive_loss, token_step_similarity, top_k_indices, AlignmentHeads, Interleave, SalienceProfile,
    TokenAlignment,
};
use crate::autograd::{Tape, Var};
use crate::datagen::AlignedInstance;
use crate::decoder::{Decoder, DecoderConfig};
use crate::encoders::{
    Category, EmbeddingBatch, EventScript, MarketWindow, ProjectionHead, TextSurrogate, TsSurrogate,
};
use crate::error::{Error, Result};
use crate::fusion::{fuse, gate_loss, granger_utility, openness, responsibility, Gate, GateConfig};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Tensor;
use crate::trainer::forecast_loss;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Shared text/time-series feature dimension `F`.
    pub fusion_dim: usize,
    pub text_raw_dim: usize,
    pub ts_raw_dim: usize,
    /// Hidden width of the projection heads.
    pub projection_hidden: usize,
    pub cross_attention_heads: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub decoder_dim: usize,
    pub regression_depth: usize,
    pub tau_ctr: f64,
    pub tau_align: f64,
    pub tau_nce: f64,
    pub k_top: usize,
    pub gate: GateConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            fusion_dim: 1024,
            text_raw_dim: 64,
            ts_raw_dim: 32,
            projection_hidden: 1024,
            cross_attention_heads: 8,
            decoder_layers: 3,
            decoder_heads: 16,
            decoder_dim: 1024,
            regression_depth: 2,
            tau_ctr: 0.1,
            tau_align: 0.2,
            tau_nce: 0.07,
            k_top: 256,
            gate: GateConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Desk-scale sizes used by the test suite.
    pub fn small() -> Self {
        ModelConfig {
            fusion_dim: 64,
            projection_hidden: 64,
            cross_attention_heads: 4,
            decoder_layers: 2,
            decoder_heads: 4,
            decoder_dim: 64,
            ..Default::default()
        }
    }

    /// Sizes that train a 1000-event scenario in about a minute on one core.
    pub fn desk() -> Self {
        ModelConfig {
            fusion_dim: 128,
            text_raw_dim: 64,
            ts_raw_dim: 32,
            projection_hidden: 128,
            cross_attention_heads: 4,
            decoder_layers: 1,
            decoder_heads: 4,
            decoder_dim: 64,
            regression_depth: 1,
            ..Default::default()
        }
    }

    /// Tiny sizes for finite-difference checks.
    pub fn micro() -> Self {
        ModelConfig {
            fusion_dim: 16,
            text_raw_dim: 8,
            ts_raw_dim: 8,
            projection_hidden: 16,
            cross_attention_heads: 2,
            decoder_layers: 1,
            decoder_heads: 2,
            decoder_dim: 8,
            regression_depth: 1,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.fusion_dim,
            self.text_raw_dim,
            self.ts_raw_dim,
            self.projection_hidden,
            self.k_top,
        ];
        if dims.contains(&0) {
            return Err(Error::Config(format!("model dimensions must be ≥ 1: {self:?}")));
        }
        if self.cross_attention_heads == 0 || !self.fusion_dim.is_multiple_of(self.cross_attention_heads) {
            return Err(Error::Config(format!(
                "fusion_dim {} not divisible by cross_attention_heads {}",
                self.fusion_dim, self.cross_attention_heads
            )));
        }
        for (name, t) in [
            ("tau_ctr", self.tau_ctr),
            ("tau_align", self.tau_align),
            ("tau_nce", self.tau_nce),
        ] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {t}")));
            }
        }
        self.gate.validate()
    }
}

/// Shapes the model is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataDims {
    pub vocab: usize,
    pub d_x: usize,
    pub horizon: usize,
    pub d_y: usize,
}

/// Training stage; decides which parameter groups receive updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    TsOnly,
    TextOnly,
    Multimodal,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::TsOnly, Stage::TextOnly, Stage::Multimodal];

    pub fn number(self) -> usize {
        self as usize + 1
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::TsOnly => "ts_only",
            Stage::TextOnly => "text_only",
            Stage::Multimodal => "multimodal",
        }
    }

    pub fn updates(self, group: ParamGroup) -> bool {
        use ParamGroup::*;
        match self {
            Stage::TsOnly => matches!(group, TsProjection | Decoder | Head),
            Stage::TextOnly => matches!(group, TextProjection | Decoder | Head),
            Stage::Multimodal => true,
        }
    }
}

/// Surrogate outputs and offset targets of one instance or sliding window.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub id: u64,
    pub category: Option<Category>,
    pub tokens: Vec<usize>,
    pub text_raw: Option<Tensor>,
    pub ts_raw: Tensor,
    /// `y − x_last`, `H × d_y`.
    pub target: Tensor,
    /// Last observed value per target channel.
    pub baseline: Vec<f64>,
    pub text_informative: Option<bool>,
}

impl Prepared {
    pub fn level_target(&self) -> Tensor {
        add_baseline(&self.target, &self.baseline)
    }
}

fn add_baseline(offsets: &Tensor, baseline: &[f64]) -> Tensor {
    let dy = baseline.len();
    let mut t = offsets.clone();
    for (k, v) in t.data_mut().iter_mut().enumerate() {
        *v += baseline[k % dy];
    }
    t
}

/// Values that the objective treats as constants. Fixing them lets a
/// finite-difference check reproduce the tape gradient exactly.
#[derive(Debug, Clone)]
pub struct StopGrad {
    /// Gate inputs `(t, s)` per instance.
    pub gate_inputs: Vec<(Tensor, Tensor)>,
    pub responsibility: Vec<f64>,
    pub anchors: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub align: f64,
    pub gate: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { align: 0.2, gate: 0.1 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub forecast: Var,
    pub ctr: Var,
    pub tok: Var,
    pub gate: Var,
    pub total: Var,
}

/// Per-instance gate diagnostics from a multimodal pass.
#[derive(Debug, Clone, PartialEq)]
pub struct GateOutcome {
    pub alpha_text: Vec<f64>,
    pub openness: f64,
    pub loss_full: f64,
    pub loss_ts: f64,
    pub delta: f64,
    pub responsibility: f64,
}

pub struct MultimodalPass {
    pub losses: LossVars,
    pub outcomes: Vec<GateOutcome>,
    pub stop_grad: StopGrad,
}

/// Level-space forecasts of one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub full: Tensor,
    pub ts_only: Tensor,
    pub alpha_text: Vec<f64>,
    pub openness: f64,
}

/// Salience and best-matching step of one token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenAlignmentRow {
    pub position: usize,
    pub token_id: usize,
    pub salience: f64,
    pub argmax_step: usize,
    pub similarity: f64,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub dims: DataDims,
    pub store: ParamStore,
    text_encoder: TextSurrogate,
    ts_encoder: TsSurrogate,
    pub text_head: ProjectionHead,
    pub ts_head: ProjectionHead,
    pub interleave: Interleave,
    pub align: AlignmentHeads,
    pub gate: Gate,
    pub decoder: Decoder,
}

impl Model {
    pub fn new(config: ModelConfig, dims: DataDims, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let f = config.fusion_dim;
        let text_head = ProjectionHead::new(
            &mut store,
            &mut rng,
            "proj.text",
            ParamGroup::TextProjection,
            config.text_raw_dim,
            config.projection_hidden,
            f,
        )?;
        let ts_head = ProjectionHead::new(
            &mut store,
            &mut rng,
            "proj.ts",
            ParamGroup::TsProjection,
            config.ts_raw_dim,
            config.projection_hidden,
            f,
        )?;
        let interleave = Interleave::new(&mut store, &mut rng, f, config.cross_attention_heads)?;
        let align = AlignmentHeads::new(&mut store, &mut rng, f);
        let gate = Gate::new(&mut store, &mut rng, f, config.gate)?;
        let decoder = Decoder::new(
            &mut store,
            &mut rng,
            f,
            DecoderConfig {
                layers: config.decoder_layers,
                n_head: config.decoder_heads,
                d_model: config.decoder_dim,
                reg_depth: config.regression_depth,
                horizon: dims.horizon,
                d_y: dims.d_y,
            },
        )?;
        Ok(Model {
            text_encoder: TextSurrogate::new(dims.vocab, config.text_raw_dim)?,
            ts_encoder: TsSurrogate::new(dims.d_x, config.ts_raw_dim)?,
            config,
            dims,
            store,
            text_head,
            ts_head,
            interleave,
            align,
            gate,
            decoder,
        })
    }

    fn check_target(&self, rows: usize, cols: usize) -> Result<()> {
        if rows != self.dims.horizon || cols != self.dims.d_y {
            return Err(Error::dim("target", &[rows, cols], &[self.dims.horizon, self.dims.d_y]));
        }
        Ok(())
    }

    fn baseline_of(&self, window: &MarketWindow) -> Vec<f64> {
        let last = window.last();
        (0..self.dims.d_y)
            .map(|c| last.get(c).copied().unwrap_or(0.0))
            .collect()
    }

    fn offsets(target: &Tensor, baseline: &[f64]) -> Tensor {
        let dy = baseline.len();
        let mut t = target.clone();
        for (k, v) in t.data_mut().iter_mut().enumerate() {
            *v -= baseline[k % dy];
        }
        t
    }

    /// Copies of the frozen encoder tables.
    pub fn encoder_snapshot(&self) -> Vec<Tensor> {
        let text = self.text_encoder.tables();
        let ts = self.ts_encoder.tables();
        text.into_iter().chain(ts).cloned().collect()
    }

    pub fn prepare(&self, inst: &AlignedInstance) -> Result<Prepared> {
        let tv = inst.target.values();
        self.check_target(tv.rows(), tv.cols())?;
        let baseline = self.baseline_of(&inst.window);
        Ok(Prepared {
            id: inst.id,
            category: Some(inst.category()),
            tokens: inst.script.token_ids.clone(),
            text_raw: Some(self.text_encoder.encode(&inst.script)?),
            ts_raw: self.ts_encoder.encode(&inst.window)?,
            target: Self::offsets(tv, &baseline),
            baseline,
            text_informative: inst.text_informative,
        })
    }

    pub fn prepare_all(&self, data: &[AlignedInstance]) -> Result<Vec<Prepared>> {
        data.iter().map(|d| self.prepare(d)).collect()
    }

    /// A text-free sample cut from a continuous series.
    pub fn prepare_window(&self, id: u64, window: &[Vec<f64>], target: &[Vec<f64>]) -> Result<Prepared> {
        let window = MarketWindow::from_rows(window)?;
        let target = Tensor::from_rows(target)?;
        self.check_target(target.rows(), target.cols())?;
        let baseline = self.baseline_of(&window);
        Ok(Prepared {
            id,
            category: None,
            tokens: Vec::new(),
            text_raw: None,
            ts_raw: self.ts_encoder.encode(&window)?,
            target: Self::offsets(&target, &baseline),
            baseline,
            text_informative: None,
        })
    }

    pub fn encode_script(&self, script: &EventScript) -> Result<Tensor> {
        self.text_encoder.encode(script)
    }

    fn text_raw(p: &Prepared) -> Result<&Tensor> {
        p.text_raw
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("sample {} has no event script", p.id)))
    }

    pub fn embed(&self, tape: &mut Tape, p: &Prepared) -> Result<EmbeddingBatch> {
        let raw_e = tape.constant(Self::text_raw(p)?.clone());
        let raw_x = tape.constant(p.ts_raw.clone());
        Ok(EmbeddingBatch {
            text: self.text_head.forward(tape, raw_e)?,
            ts: self.ts_head.forward(tape, raw_x)?,
        })
    }

    fn pooled_ts(&self, tape: &mut Tape, p: &Prepared) -> Result<Var> {
        let raw = tape.constant(p.ts_raw.clone());
        let hx = self.ts_head.forward(tape, raw)?;
        Ok(pool(tape, hx))
    }

    fn pooled_text(&self, tape: &mut Tape, p: &Prepared) -> Result<Var> {
        let raw = tape.constant(Self::text_raw(p)?.clone());
        let he = self.text_head.forward(tape, raw)?;
        Ok(pool(tape, he))
    }

    /// Stage 1 objective: decode from the pooled time-series embedding.
    pub fn ts_only_loss(&self, tape: &mut Tape, batch: &[&Prepared]) -> Result<Var> {
        let mut preds = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len());
        for p in batch {
            let s = self.pooled_ts(tape, p)?;
            preds.push(self.decoder.forward(tape, s)?);
            targets.push(tape.constant(p.target.clone()));
        }
        forecast_loss(tape, &preds, &targets)
    }

    /// Stage 2 objective: decode from the pooled text embedding.
    pub fn text_only_loss(&self, tape: &mut Tape, batch: &[&Prepared]) -> Result<Var> {
        let mut preds = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len());
        for p in batch {
            let t = self.pooled_text(tape, p)?;
            preds.push(self.decoder.forward(tape, t)?);
            targets.push(tape.constant(p.target.clone()));
        }
        forecast_loss(tape, &preds, &targets)
    }

    fn k_top(&self, m: usize) -> usize {
        self.config.k_top.min(m)
    }

    /// Stage 3 objective on one batch.
    ///
    /// The restricted branch decodes the pooled time-series embedding taken
    /// before cross-attention, so it never sees the text. The gate reads
    /// `(t, s)` as constants and the responsibility target is a constant, so
    /// the gate loss only trains the gate network. When `frozen` is given its
    /// values replace those constants.
    pub fn multimodal(
        &self,
        tape: &mut Tape,
        batch: &[&Prepared],
        weights: LossWeights,
        frozen: Option<&StopGrad>,
    ) -> Result<MultimodalPass> {
        if batch.len() < 2 {
            return Err(Error::Contract(format!(
                "multimodal step needs a batch of at least 2, got {}",
                batch.len()
            )));
        }
        let cfg = &self.config;
        let n = batch.len();
        let mut s_pool = Vec::with_capacity(n);
        let mut t_pool = Vec::with_capacity(n);
        let mut token_items = Vec::with_capacity(n);
        let mut open = Vec::with_capacity(n);
        let mut preds_full = Vec::with_capacity(n);
        let mut preds_ts = Vec::with_capacity(n);
        let mut targets = Vec::with_capacity(n);
        let mut partial = Vec::with_capacity(n);
        let mut stop = StopGrad {
            gate_inputs: Vec::with_capacity(n),
            responsibility: Vec::new(),
            anchors: Vec::with_capacity(n),
        };
        let scorer = tape.param(self.align.scorer);

        for (i, p) in batch.iter().enumerate() {
            let emb = self.embed(tape, p)?;
            let (e_att, x_att) = bidirectional_interleave(tape, &self.interleave, emb.text, emb.ts)?;
            let t = pool(tape, e_att.output);
            let s = pool(tape, x_att.output);
            let s_restricted = pool(tape, emb.ts);
            s_pool.push(s);
            t_pool.push(t);

            let ze = self.align.project(tape, &self.align.text, emb.text)?;
            let zx = self.align.project(tape, &self.align.ts, emb.ts)?;
            let (_, pmat) = token_step_similarity(tape, ze, zx, cfg.tau_align)?;
            let mut salience = salience_and_anchors(tape, emb.text, scorer, self.k_top(p.tokens.len().max(1)))?;
            if let Some(f) = frozen {
                salience.anchors = f.anchors[i].clone();
            }
            stop.anchors.push(salience.anchors.clone());
            token_items.push(TokenAlignment {
                ze,
                zx,
                p: pmat,
                salience,
            });

            let (gt, gs) = match frozen {
                Some(f) => (f.gate_inputs[i].0.clone(), f.gate_inputs[i].1.clone()),
                None => (tape.value(t).clone(), tape.value(s).clone()),
            };
            stop.gate_inputs.push((gt.clone(), gs.clone()));
            let gt = tape.constant(gt);
            let gs = tape.constant(gs);
            let w = self.gate.weights(tape, gt, gs)?;
            let z = fuse(tape, t, s, w)?;
            let alpha = openness(tape, w);
            open.push(alpha);

            let util = granger_utility(tape, &self.decoder, z, s_restricted, &p.target)?;
            preds_full.push(util.pred_full);
            preds_ts.push(util.pred_ts);
            targets.push(tape.constant(p.target.clone()));
            partial.push(GateOutcome {
                alpha_text: tape.value(w.text).data().to_vec(),
                openness: tape.item(alpha),
                loss_full: util.loss_full,
                loss_ts: util.loss_ts,
                delta: util.delta,
                responsibility: f64::NAN,
            });
        }

        let r = match frozen {
            Some(f) => f.responsibility.clone(),
            None => {
                let deltas: Vec<f64> = partial.iter().map(|o| o.delta).collect();
                responsibility(&deltas, &cfg.gate)?
            }
        };
        for (o, &ri) in partial.iter_mut().zip(&r) {
            o.responsibility = ri;
        }
        stop.responsibility = r.clone();

        let full = forecast_loss(tape, &preds_full, &targets)?;
        let restricted = forecast_loss(tape, &preds_ts, &targets)?;
        let forecast = tape.add(full, restricted)?;
        let ctr = instance_contrastive_loss(tape, &s_pool, &t_pool, cfg.tau_ctr)?;
        let tok = token_contrastive_loss(tape, &token_items, cfg.tau_nce)?;
        let align = alignment_loss(tape, ctr, tok)?;
        let gate = gate_loss(tape, &open, &r)?;
        let a = tape.scale(align.total, weights.align);
        let g = tape.scale(gate, weights.gate);
        let total = tape.add_n(&[forecast, a, g])?;
        Ok(MultimodalPass {
            losses: LossVars {
                forecast,
                ctr,
                tok,
                gate,
                total,
            },
            outcomes: partial,
            stop_grad: stop,
        })
    }

    /// Full and restricted level-space forecasts with the gate weights.
    pub fn predict(&self, p: &Prepared) -> Result<Prediction> {
        let mut tape = Tape::with_trainable(&self.store, |_| false);
        let emb = self.embed(&mut tape, p)?;
        let (e_att, x_att) = bidirectional_interleave(&mut tape, &self.interleave, emb.text, emb.ts)?;
        let t = pool(&mut tape, e_att.output);
        let s = pool(&mut tape, x_att.output);
        let s_restricted = pool(&mut tape, emb.ts);
        let w = self.gate.weights(&mut tape, t, s)?;
        let z = fuse(&mut tape, t, s, w)?;
        let alpha = openness(&mut tape, w);
        let full = self.decoder.forward(&mut tape, z)?;
        let ts_only = self.decoder.forward(&mut tape, s_restricted)?;
        let out = Prediction {
            full: add_baseline(tape.value(full), &p.baseline),
            ts_only: add_baseline(tape.value(ts_only), &p.baseline),
            alpha_text: tape.value(w.text).data().to_vec(),
            openness: tape.item(alpha),
        };
        if !out.full.is_finite() || !out.ts_only.is_finite() {
            return Err(Error::NonFinite {
                context: format!("forecast of instance {}", p.id),
            });
        }
        Ok(out)
    }

    /// Level-space forecast of the restricted branch alone.
    pub fn predict_ts_only(&self, p: &Prepared) -> Result<Tensor> {
        let mut tape = Tape::with_trainable(&self.store, |_| false);
        let s = self.pooled_ts(&mut tape, p)?;
        let y = self.decoder.forward(&mut tape, s)?;
        Ok(add_baseline(tape.value(y), &p.baseline))
    }

    /// Anchor tokens with their salience and most similar step.
    pub fn token_alignment(&self, p: &Prepared) -> Result<Vec<TokenAlignmentRow>> {
        let mut tape = Tape::with_trainable(&self.store, |_| false);
        let emb = self.embed(&mut tape, p)?;
        let ze = self.align.project(&mut tape, &self.align.text, emb.text)?;
        let zx = self.align.project(&mut tape, &self.align.ts, emb.ts)?;
        let scorer = tape.param(self.align.scorer);
        let SalienceProfile { scores, anchors } =
            salience_and_anchors(&mut tape, emb.text, scorer, self.k_top(p.tokens.len()))?;
        let (sim, _) = token_step_similarity(&mut tape, ze, zx, self.config.tau_align)?;
        let sim = tape.value(sim);
        let scores = tape.value(scores);
        Ok(anchors
            .into_iter()
            .map(|j| {
                let row = sim.row(j);
                let best = top_k_indices(row, 1)[0];
                TokenAlignmentRow {
                    position: j,
                    token_id: p.tokens[j],
                    salience: scores.data()[j],
                    argmax_step: best,
                    // undo the temperature to report cosine similarity
                    similarity: row[best] * self.config.tau_align,
                }
            })
            .collect())
    }
}
