//! Three-stage training: time-series pretraining, text warm-up and joint
//! multimodal training, with Adam updates, per-epoch freeze audits and
//! seed-determined batching.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Tape, Var};
use crate::datagen::{continuous_segments, derive_seed, AlignedInstance};
use crate::error::{Error, Result};
use crate::model::{GateOutcome, LossWeights, Model, Prepared, Stage};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Tensor;

/// `mean_i MSE(Ŷ_i, Y_i) + mean_i MAE(Ŷ_i, Y_i)`.
pub fn forecast_loss(tape: &mut Tape, preds: &[Var], targets: &[Var]) -> Result<Var> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::dim("forecast_loss", &[preds.len()], &[targets.len()]));
    }
    let mut mse = Vec::with_capacity(preds.len());
    let mut mae = Vec::with_capacity(preds.len());
    for (&p, &y) in preds.iter().zip(targets) {
        mse.push(tape.mse(p, y)?);
        mae.push(tape.mae(p, y)?);
    }
    let n = preds.len() as f64;
    let mse = tape.add_n(&mse)?;
    let mae = tape.add_n(&mae)?;
    let mse = tape.scale(mse, 1.0 / n);
    let mae = tape.scale(mae, 1.0 / n);
    tape.add(mse, mae)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Epochs for the time-series, text and multimodal stages.
    pub stage_epochs: [usize; 3],
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub lambda_align: f64,
    pub lambda_gate: f64,
    /// Step between consecutive stage-1 sliding windows.
    pub stage1_stride: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage_epochs: [2, 2, 2],
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            lambda_align: 0.2,
            lambda_gate: 0.1,
            stage1_stride: 1,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size < 2 {
            return bad(format!("batch_size must be ≥ 2, got {}", self.batch_size));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!(
                "betas must lie in [0, 1), got {} and {}",
                self.beta1, self.beta2
            ));
        }
        if !(self.adam_eps > 0.0) {
            return bad(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        if !(self.lambda_align >= 0.0 && self.lambda_gate >= 0.0) {
            return bad(format!(
                "loss weights must be ≥ 0, got lambda_align={} lambda_gate={}",
                self.lambda_align, self.lambda_gate
            ));
        }
        if self.stage1_stride == 0 {
            return bad("stage1_stride must be ≥ 1".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            align: self.lambda_align,
            gate: self.lambda_gate,
        }
    }
}

/// Adam moments and step count of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamSlot {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub slots: Vec<AdamSlot>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        Adam {
            slots: store
                .iter()
                .map(|(_, p)| AdamSlot {
                    m: vec![0.0; p.value.len()],
                    v: vec![0.0; p.value.len()],
                    step: 0,
                })
                .collect(),
        }
    }

    /// One update of every parameter that has a gradient and whose group
    /// `allowed` accepts. Other parameters and their moments are untouched.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &Gradients,
        cfg: &TrainConfig,
        allowed: impl Fn(ParamGroup) -> bool,
    ) {
        let ids: Vec<_> = store.ids().collect();
        let scale = match cfg.grad_clip {
            Some(c) => {
                let norm = ids
                    .iter()
                    .filter_map(|&id| grads.param(id))
                    .flat_map(|g| g.iter())
                    .map(|g| g * g)
                    .sum::<f64>()
                    .sqrt();
                if norm > c {
                    c / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        for id in ids {
            if !allowed(store.get(id).group) {
                continue;
            }
            let Some(g) = grads.param(id) else { continue };
            let slot = &mut self.slots[id.0];
            slot.step += 1;
            let bc1 = 1.0 - cfg.beta1.powi(slot.step as i32);
            let bc2 = 1.0 - cfg.beta2.powi(slot.step as i32);
            let value = store.value_mut(id).data_mut();
            for k in 0..value.len() {
                let gk = g[k] * scale;
                slot.m[k] = cfg.beta1 * slot.m[k] + (1.0 - cfg.beta1) * gk;
                slot.v[k] = cfg.beta2 * slot.v[k] + (1.0 - cfg.beta2) * gk * gk;
                let mh = slot.m[k] / bc1;
                let vh = slot.v[k] / bc2;
                value[k] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// Record of a jump between stages, listing stages that were never run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTransition {
    pub from: Stage,
    pub to: Stage,
    pub skipped: Vec<Stage>,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub adam: Adam,
    pub stage: Stage,
    /// Completed epochs per stage.
    pub progress: [usize; 3],
    pub step: u64,
    pub seed: u64,
    pub transitions: Vec<StageTransition>,
}

impl TrainState {
    pub fn new(model: Model, seed: u64) -> Self {
        let adam = Adam::new(&model.store);
        TrainState {
            model,
            adam,
            stage: Stage::TsOnly,
            progress: [0; 3],
            step: 0,
            seed,
            transitions: Vec::new(),
        }
    }

    /// Moves to `to`; earlier stages with no completed epoch are recorded
    /// as skipped.
    pub fn enter_stage(&mut self, to: Stage) -> Option<StageTransition> {
        if to == self.stage {
            return None;
        }
        let skipped = Stage::ALL
            .iter()
            .copied()
            .filter(|&s| s < to && self.progress[s as usize] == 0)
            .collect();
        let t = StageTransition {
            from: self.stage,
            to,
            skipped,
        };
        if !t.skipped.is_empty() {
            log::warn!("entering stage {} with no training in {:?}", to.name(), t.skipped);
        }
        self.stage = to;
        self.transitions.push(t.clone());
        Some(t)
    }
}

/// One row of the per-step training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub stage: usize,
    pub epoch: usize,
    pub step: u64,
    pub l_forecast: f64,
    pub l_ctr: f64,
    pub l_tok: f64,
    pub l_gate: f64,
    pub l_total: f64,
    pub mean_alpha: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ValidationRecord {
    pub stage: usize,
    pub epoch: usize,
    pub l_forecast: f64,
}

/// Audit label of the surrogate encoders, frozen in every stage.
pub const ENCODERS: &str = "frozen_encoders";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FreezeAudit {
    pub stage: usize,
    pub epoch: usize,
    /// A parameter group name, or [`ENCODERS`].
    pub group: &'static str,
    pub unchanged: bool,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub validation: Vec<ValidationRecord>,
    pub audits: Vec<FreezeAudit>,
    /// Gate diagnostics of the last multimodal epoch, in batch order.
    pub last_outcomes: Vec<(u64, GateOutcome)>,
}

impl TrainLog {
    pub fn write_steps(&self, path: &std::path::Path) -> Result<()> {
        write_csv(path, &self.steps)
    }

    pub fn write_validation(&self, path: &std::path::Path) -> Result<()> {
        write_csv(path, &self.validation)
    }
}

fn write_csv<T: Serialize>(path: &std::path::Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Prepared samples for all three stages.
pub struct StageData {
    /// Sliding windows over continuous training series.
    pub windows: Vec<Prepared>,
    pub train: Vec<Prepared>,
    pub val: Vec<Prepared>,
}

impl StageData {
    pub fn build(model: &Model, train: &[AlignedInstance], val: &[AlignedInstance], stride: usize) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Input("training split is empty".into()));
        }
        let (l, h) = (train[0].window.len(), model.dims.horizon);
        let mut windows = Vec::new();
        for seg in continuous_segments(train)? {
            let mut start = 0;
            while start + l + h <= seg.len() {
                let id = windows.len() as u64;
                windows.push(model.prepare_window(id, &seg[start..start + l], &seg[start + l..start + l + h])?);
                start += stride;
            }
        }
        Ok(StageData {
            windows,
            train: model.prepare_all(train)?,
            val: model.prepare_all(val)?,
        })
    }
}

fn batches(n: usize, size: usize, seed: u64, stage: Stage, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 100 + stage as u64, epoch as u64));
    idx.shuffle(&mut rng);
    let mut out: Vec<Vec<usize>> = idx.chunks(size).map(<[usize]>::to_vec).collect();
    // a trailing singleton cannot form in-batch negatives; fold it back
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().expect("nonempty");
        out.last_mut().expect("nonempty").extend(last);
    }
    out
}

fn check_finite(v: f64, what: &str, stage: Stage, step: u64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            context: format!("{what} at stage {} step {step}", stage.number()),
        })
    }
}

/// Validation forecast loss of `stage`'s objective.
pub fn validation_loss(model: &Model, stage: Stage, val: &[Prepared], cfg: &TrainConfig) -> Result<f64> {
    if val.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    let mut count = 0.0;
    for chunk in val.chunks(cfg.batch_size) {
        let refs: Vec<&Prepared> = chunk.iter().collect();
        let mut tape = Tape::with_trainable(&model.store, |_| false);
        let loss = match stage {
            Stage::TsOnly => model.ts_only_loss(&mut tape, &refs)?,
            Stage::TextOnly => model.text_only_loss(&mut tape, &refs)?,
            Stage::Multimodal if refs.len() >= 2 => {
                model.multimodal(&mut tape, &refs, cfg.weights(), None)?.losses.forecast
            }
            Stage::Multimodal => model.ts_only_loss(&mut tape, &refs)?,
        };
        total += tape.item(loss) * refs.len() as f64;
        count += refs.len() as f64;
    }
    Ok(total / count)
}

/// Runs one epoch of `stage`, appending to `log`.
pub fn run_epoch(
    state: &mut TrainState,
    data: &StageData,
    stage: Stage,
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<()> {
    let samples = match stage {
        Stage::TsOnly => &data.windows,
        _ => &data.train,
    };
    if samples.is_empty() {
        return Err(Error::Input(format!("no samples for stage {}", stage.number())));
    }
    if stage == Stage::Multimodal && samples.len() < 2 {
        return Err(Error::Contract("multimodal training needs at least 2 instances".into()));
    }
    state.enter_stage(stage);
    let epoch = state.progress[stage as usize] + 1;
    let frozen: Vec<ParamGroup> = ParamGroup::ALL.into_iter().filter(|&g| !stage.updates(g)).collect();
    let before: Vec<Vec<Tensor>> = frozen.iter().map(|&g| state.model.store.snapshot_group(g)).collect();
    let encoders_before = state.model.encoder_snapshot();
    let weights = cfg.weights();
    if stage == Stage::Multimodal {
        log.last_outcomes.clear();
    }

    for batch in batches(samples.len(), cfg.batch_size, state.seed, stage, epoch) {
        let refs: Vec<&Prepared> = batch.iter().map(|&i| &samples[i]).collect();
        let step = state.step + 1;
        let (grads, record) = {
            let model = &state.model;
            let mut tape = Tape::with_trainable(&model.store, |g| stage.updates(g));
            let (root, record) = match stage {
                Stage::TsOnly | Stage::TextOnly => {
                    let loss = if stage == Stage::TsOnly {
                        model.ts_only_loss(&mut tape, &refs)?
                    } else {
                        model.text_only_loss(&mut tape, &refs)?
                    };
                    let l = tape.item(loss);
                    let rec = StepRecord {
                        stage: stage.number(),
                        epoch,
                        step,
                        l_forecast: l,
                        l_ctr: f64::NAN,
                        l_tok: f64::NAN,
                        l_gate: f64::NAN,
                        l_total: l,
                        mean_alpha: f64::NAN,
                    };
                    (loss, rec)
                }
                Stage::Multimodal => {
                    let pass = model.multimodal(&mut tape, &refs, weights, None)?;
                    let lv = pass.losses;
                    let mean_alpha = pass.outcomes.iter().map(|o| o.openness).sum::<f64>() / refs.len() as f64;
                    log.last_outcomes
                        .extend(refs.iter().map(|p| p.id).zip(pass.outcomes.iter().cloned()));
                    let rec = StepRecord {
                        stage: 3,
                        epoch,
                        step,
                        l_forecast: tape.item(lv.forecast),
                        l_ctr: tape.item(lv.ctr),
                        l_tok: tape.item(lv.tok),
                        l_gate: tape.item(lv.gate),
                        l_total: tape.item(lv.total),
                        mean_alpha,
                    };
                    (lv.total, rec)
                }
            };
            check_finite(record.l_total, "training loss", stage, step)?;
            (tape.backward(root), record)
        };
        state
            .adam
            .step(&mut state.model.store, &grads, cfg, |g| stage.updates(g));
        state.step = step;
        log.steps.push(record);
    }

    let mut checks: Vec<(&'static str, bool)> = frozen
        .iter()
        .zip(&before)
        .map(|(&g, snap)| (g.name(), state.model.store.snapshot_group(g) == *snap))
        .collect();
    checks.push((ENCODERS, state.model.encoder_snapshot() == encoders_before));
    for (group, unchanged) in checks {
        log.audits.push(FreezeAudit {
            stage: stage.number(),
            epoch,
            group,
            unchanged,
        });
        if !unchanged {
            return Err(Error::Contract(format!(
                "frozen group {group} changed during stage {} epoch {epoch}",
                stage.number()
            )));
        }
    }
    state.progress[stage as usize] = epoch;
    let val = validation_loss(&state.model, stage, &data.val, cfg)?;
    log.validation.push(ValidationRecord {
        stage: stage.number(),
        epoch,
        l_forecast: val,
    });
    log::info!(
        "stage {} epoch {epoch}: validation forecast loss {val:.6}",
        stage.number()
    );
    Ok(())
}

/// Runs every pending epoch of the stages in `stages`, in order. At most
/// `max_epochs` epochs run when given, so training can stop at any epoch
/// boundary and resume later with identical results.
pub fn train(
    state: &mut TrainState,
    data: &StageData,
    cfg: &TrainConfig,
    stages: &[Stage],
    log: &mut TrainLog,
    max_epochs: Option<usize>,
) -> Result<()> {
    cfg.validate()?;
    let mut budget = max_epochs.unwrap_or(usize::MAX);
    for &stage in stages {
        let target = cfg.stage_epochs[stage as usize];
        if state.progress[stage as usize] >= target {
            continue;
        }
        if state.progress[stage as usize] == 0 {
            let val = validation_loss(&state.model, stage, &data.val, cfg)?;
            log.validation.push(ValidationRecord {
                stage: stage.number(),
                epoch: 0,
                l_forecast: val,
            });
        }
        while state.progress[stage as usize] < target {
            if budget == 0 {
                return Ok(());
            }
            run_epoch(state, data, stage, cfg, log)?;
            budget -= 1;
        }
    }
    Ok(())
}
