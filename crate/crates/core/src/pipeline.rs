//! End-to-end helpers shared by the command line and the test suites.

use crate::config::Config;
use crate::datagen::{split, AlignedInstance, Splits};
use crate::error::{Error, Result};
use crate::model::{DataDims, Model, Stage};
use crate::trainer::{train, StageData, TrainLog, TrainState};

/// Shapes of a dataset; every instance must agree with the first.
pub fn data_dims(data: &[AlignedInstance], vocab: usize) -> Result<DataDims> {
    let first = data.first().ok_or_else(|| Error::Input("dataset is empty".into()))?;
    let dims = DataDims {
        vocab,
        d_x: first.window.channels(),
        horizon: first.target.horizon(),
        d_y: first.target.values().cols(),
    };
    for inst in data {
        if inst.window.channels() != dims.d_x
            || inst.target.horizon() != dims.horizon
            || inst.target.values().cols() != dims.d_y
            || inst.window.len() != first.window.len()
        {
            return Err(Error::Input(format!(
                "instance {} has a different shape from instance {}",
                inst.id, first.id
            )));
        }
    }
    Ok(dims)
}

/// A fresh training state for `data` under `cfg`.
pub fn fresh_state(cfg: &Config, data: &[AlignedInstance]) -> Result<TrainState> {
    let dims = data_dims(data, cfg.scenario.vocab)?;
    let model = Model::new(cfg.model, dims, cfg.seed)?;
    Ok(TrainState::new(model, cfg.seed))
}

pub struct TrainRun {
    pub state: TrainState,
    pub log: TrainLog,
    pub splits: Splits,
}

/// Splits `data`, then trains `stages` from `state` (a fresh one when
/// `None`). `max_epochs` stops early at an epoch boundary.
pub fn run_training(
    cfg: &Config,
    data: Vec<AlignedInstance>,
    state: Option<TrainState>,
    stages: &[Stage],
    max_epochs: Option<usize>,
) -> Result<TrainRun> {
    cfg.validate()?;
    let mut state = match state {
        Some(s) => s,
        None => fresh_state(cfg, &data)?,
    };
    let splits = split(data, &cfg.split)?;
    let stage_data = StageData::build(&state.model, &splits.train, &splits.val, cfg.train.stage1_stride)?;
    let mut log = TrainLog::default();
    train(&mut state, &stage_data, &cfg.train, stages, &mut log, max_epochs)?;
    Ok(TrainRun { state, log, splits })
}
