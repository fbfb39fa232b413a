//! Registered finite-difference checks, one per loss and building block,
//! run on micro-sized configurations.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::datagen::{generate, ScenarioConfig};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::model::{DataDims, LossWeights, Model, ModelConfig, Prepared, StopGrad};
use crate::nn::{cross_attention, DecoderBlock, Mlp, MultiHeadAttention};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Tensor;

pub const MODULES: [&str; 9] = [
    "forecast",
    "ctr",
    "tok",
    "gate",
    "total",
    "mlp",
    "attention",
    "decoder_block",
    "decoder",
];

/// Horizon of the micro configuration.
pub const MICRO_HORIZON: usize = 3;
/// Batch size of the micro configuration.
pub const MICRO_BATCH: usize = 2;

/// A micro model, a two-instance batch and the constants of its first pass.
pub struct MicroCase {
    pub model: Model,
    pub batch: Vec<Prepared>,
    pub stop: StopGrad,
}

pub fn micro_scenario(seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        num_events: MICRO_BATCH,
        lookback: 6,
        horizon: MICRO_HORIZON,
        vocab: 16,
        script_len_min: 3,
        script_len_max: 5,
        rho_signal: 1.0,
        signal_tokens: 4,
        planted: 2,
        seed,
        ..ScenarioConfig::default()
    }
}

pub fn micro_case(seed: u64) -> Result<MicroCase> {
    let sc = micro_scenario(seed);
    let data = generate(&sc)?;
    let dims = DataDims {
        vocab: sc.vocab,
        d_x: sc.d_x,
        horizon: sc.horizon,
        d_y: sc.d_y,
    };
    let model = Model::new(ModelConfig::micro(), dims, seed)?;
    let batch = model.prepare_all(&data)?;
    let stop = {
        let refs: Vec<&Prepared> = batch.iter().collect();
        let mut tape = Tape::with_params(&model.store);
        model
            .multimodal(&mut tape, &refs, LossWeights::default(), None)?
            .stop_grad
    };
    Ok(MicroCase { model, batch, stop })
}

impl MicroCase {
    /// One named loss of the multimodal objective with the constants held.
    pub fn loss(&self, tape: &mut Tape, which: &str) -> Result<Var> {
        let refs: Vec<&Prepared> = self.batch.iter().collect();
        let pass = self
            .model
            .multimodal(tape, &refs, LossWeights::default(), Some(&self.stop))?;
        let l = pass.losses;
        Ok(match which {
            "forecast" => l.forecast,
            "ctr" => l.ctr,
            "tok" => l.tok,
            "gate" => l.gate,
            "total" => l.total,
            other => return Err(unknown(other)),
        })
    }
}

fn unknown(name: &str) -> Error {
    Error::InvalidArgument {
        op: "grad-check",
        reason: format!("unknown module `{name}`; valid: all, {}", MODULES.join(", ")),
    }
}

fn random_input(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    use rand::Rng;
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape")
}

/// Weighted sum so every output entry carries a distinct gradient.
fn probe(tape: &mut Tape, y: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w = random_input(rng, 1, n).reshaped(shape)?;
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn block_check(name: &str, seed: u64, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let g = ParamGroup::Decoder;
    let weights_seed = seed ^ 0x5eed;
    match name {
        "mlp" => {
            let mlp = Mlp::new(&mut store, &mut rng, "mlp", g, &[4, 6, 3])?;
            let x = random_input(&mut rng, 2, 4);
            grad_check(
                &store,
                |tape| {
                    let xv = tape.constant(x.clone());
                    let y = mlp.forward(tape, xv)?;
                    probe(tape, y, &mut ChaCha8Rng::seed_from_u64(weights_seed))
                },
                opts,
            )
        }
        "attention" => {
            let mha = MultiHeadAttention::new(&mut store, &mut rng, "mha", g, 8, 2)?;
            let (q, kv) = (random_input(&mut rng, 3, 8), random_input(&mut rng, 4, 8));
            grad_check(
                &store,
                |tape| {
                    let (qv, kvv) = (tape.constant(q.clone()), tape.constant(kv.clone()));
                    let y = cross_attention(&mha, tape, qv, kvv)?.output;
                    probe(tape, y, &mut ChaCha8Rng::seed_from_u64(weights_seed))
                },
                opts,
            )
        }
        "decoder_block" => {
            let block = DecoderBlock::new(&mut store, &mut rng, "blk", g, 8, 2)?;
            let x = random_input(&mut rng, MICRO_HORIZON, 8);
            grad_check(
                &store,
                |tape| {
                    let xv = tape.constant(x.clone());
                    let y = block.forward(tape, xv)?;
                    probe(tape, y, &mut ChaCha8Rng::seed_from_u64(weights_seed))
                },
                opts,
            )
        }
        "decoder" => {
            let case = micro_case(seed)?;
            let z = random_input(&mut rng, 1, case.model.config.fusion_dim);
            grad_check(
                &case.model.store,
                |tape| {
                    let zv = tape.constant(z.clone());
                    let y = case.model.decoder.forward(tape, zv)?;
                    probe(tape, y, &mut ChaCha8Rng::seed_from_u64(weights_seed))
                },
                opts,
            )
        }
        other => Err(unknown(other)),
    }
}

/// Runs the check registered under `name` with inputs drawn from `seed`.
pub fn run_module(name: &str, seed: u64, opts: GradCheckOptions) -> Result<GradCheckReport> {
    match name {
        "forecast" | "ctr" | "tok" | "gate" | "total" => {
            let case = micro_case(seed)?;
            grad_check(&case.model.store, |tape| case.loss(tape, name), opts)
        }
        _ => block_check(name, seed, opts),
    }
}

/// Expands `all` into every registered module.
pub fn resolve(name: &str) -> Result<Vec<&'static str>> {
    if name == "all" {
        return Ok(MODULES.to_vec());
    }
    MODULES
        .iter()
        .find(|m| **m == name)
        .map(|m| vec![*m])
        .ok_or_else(|| unknown(name))
}
