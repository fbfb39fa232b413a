//! Synthetic event-market simulator, JSON-lines dataset I/O and temporal
//! splitting.
//!
//! The simulated price path is a mean-reverting AR(1) process. Events sit
//! back to back: each owns a look-back window of `L` steps followed by a
//! target of `H` steps. An informative event carries planted signal tokens
//! whose class (up or down) fixes the sign of a deterministic drift added to
//! its target. After the target the drift decays at the AR rate, so a
//! forecaster that ignores the text still faces a pure AR conditional mean.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::encoders::{Category, EventScript, FutureSegment, MarketWindow};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub num_events: usize,
    pub lookback: usize,
    pub horizon: usize,
    pub d_x: usize,
    pub d_y: usize,
    pub vocab: usize,
    pub script_len_min: usize,
    pub script_len_max: usize,
    /// Fraction of events whose text carries signal.
    pub rho_signal: f64,
    /// Drift magnitude on informative targets.
    pub kappa: f64,
    pub sigma_noise: f64,
    pub ar_coef: f64,
    pub mean_level: f64,
    /// Token ids `[0, signal_tokens)` are signal tokens: the lower half
    /// marks upward drift, the upper half downward drift.
    pub signal_tokens: usize,
    /// Signal tokens planted in each informative script.
    pub planted: usize,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            num_events: 1000,
            lookback: 35,
            horizon: 35,
            d_x: 1,
            d_y: 1,
            vocab: 256,
            script_len_min: 8,
            script_len_max: 16,
            rho_signal: 0.5,
            kappa: 0.15,
            sigma_noise: 0.05,
            ar_coef: 0.9,
            mean_level: 1.0,
            signal_tokens: 8,
            planted: 3,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.lookback == 0 || self.horizon == 0 {
            return bad(format!(
                "lookback and horizon must be ≥ 1, got {} and {}",
                self.lookback, self.horizon
            ));
        }
        if self.vocab == 0 {
            return bad("vocabulary is empty".into());
        }
        if self.d_x == 0 || self.d_y == 0 {
            return bad(format!("d_x and d_y must be ≥ 1, got {} and {}", self.d_x, self.d_y));
        }
        if self.signal_tokens < 2 || !self.signal_tokens.is_multiple_of(2) || self.signal_tokens >= self.vocab {
            return bad(format!(
                "signal_tokens must be even, ≥ 2 and below vocab {}, got {}",
                self.vocab, self.signal_tokens
            ));
        }
        if self.script_len_min == 0 || self.script_len_min > self.script_len_max {
            return bad(format!(
                "script length range [{}, {}] is invalid",
                self.script_len_min, self.script_len_max
            ));
        }
        if self.planted == 0 || self.planted > self.script_len_min {
            return bad(format!(
                "planted must be in [1, script_len_min = {}], got {}",
                self.script_len_min, self.planted
            ));
        }
        if !(0.0..=1.0).contains(&self.rho_signal) {
            return bad(format!("rho_signal must lie in [0, 1], got {}", self.rho_signal));
        }
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return bad(format!("kappa must be ≥ 0, got {}", self.kappa));
        }
        if !(self.sigma_noise >= 0.0 && self.sigma_noise.is_finite()) {
            return bad(format!("sigma_noise must be ≥ 0, got {}", self.sigma_noise));
        }
        if !(self.ar_coef.abs() < 1.0) {
            return bad(format!("ar_coef must satisfy |φ| < 1, got {}", self.ar_coef));
        }
        if !self.mean_level.is_finite() {
            return bad("mean_level must be finite".into());
        }
        Ok(())
    }

    pub fn event_span(&self) -> usize {
        self.lookback + self.horizon
    }

    fn channels(&self) -> usize {
        self.d_x.max(self.d_y)
    }

    /// Drift profile `g(h) = min(h / ramp, 1)` with `ramp = max(1, H/4)`.
    pub fn drift_shape(&self, h: usize) -> f64 {
        let ramp = (self.horizon / 4).max(1) as f64;
        (h as f64 / ramp).min(1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignedInstance {
    pub id: u64,
    pub script: EventScript,
    pub window: MarketWindow,
    pub target: FutureSegment,
    /// Simulator ground truth; never shown to the model.
    pub text_informative: Option<bool>,
}

impl AlignedInstance {
    pub fn release_time(&self) -> i64 {
        self.script.release_time
    }

    pub fn category(&self) -> Category {
        self.script.category
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for stream `tag` of item `index`; independent of generation order.
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag.wrapping_mul(0x1000_0000_01b3) ^ splitmix64(index)))
}

const STREAM_PATH: u64 = 1;
const STREAM_SCRIPT: u64 = 2;
const STREAM_START: u64 = 3;

/// Signal direction read from script tokens: +1 up, −1 down, 0 none or tied.
pub fn signal_direction(tokens: &[usize], signal_tokens: usize) -> f64 {
    let half = signal_tokens / 2;
    let up = tokens.iter().filter(|&&t| t < half).count();
    let down = tokens.iter().filter(|&&t| t >= half && t < signal_tokens).count();
    match up.cmp(&down) {
        std::cmp::Ordering::Greater => 1.0,
        std::cmp::Ordering::Less => -1.0,
        std::cmp::Ordering::Equal => 0.0,
    }
}

struct EventDraw {
    informative: bool,
    direction: f64,
    category: Category,
    tokens: Vec<usize>,
}

fn draw_event(cfg: &ScenarioConfig, index: u64) -> EventDraw {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_SCRIPT, index));
    let informative = rng.random_bool(cfg.rho_signal);
    let up = rng.random_bool(0.5);
    let category = Category::ALL[rng.random_range(0..Category::ALL.len())];
    let len = rng.random_range(cfg.script_len_min..=cfg.script_len_max);
    let half = cfg.signal_tokens / 2;
    let mut tokens: Vec<usize> = (0..len)
        .map(|_| rng.random_range(cfg.signal_tokens..cfg.vocab))
        .collect();
    if informative {
        let class = if up { 0..half } else { half..cfg.signal_tokens };
        for slot in tokens.iter_mut().take(cfg.planted) {
            *slot = rng.random_range(class.clone());
        }
        tokens.shuffle(&mut rng);
    }
    EventDraw {
        informative,
        direction: if informative {
            if up {
                1.0
            } else {
                -1.0
            }
        } else {
            0.0
        },
        category,
        tokens,
    }
}

/// Simulates `num_events` consecutive events. Pure function of `cfg`.
pub fn generate(cfg: &ScenarioConfig) -> Result<Vec<AlignedInstance>> {
    cfg.validate()?;
    let (l, h, ch) = (cfg.lookback, cfg.horizon, cfg.channels());
    let phi = cfg.ar_coef;
    let noise = Normal::new(0.0, cfg.sigma_noise).map_err(|e| Error::Config(e.to_string()))?;
    let stationary =
        Normal::new(0.0, cfg.sigma_noise / (1.0 - phi * phi).sqrt()).map_err(|e| Error::Config(e.to_string()))?;

    let mut start_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_START, 0));
    let mut dev: Vec<f64> = (0..ch).map(|_| stationary.sample(&mut start_rng)).collect();
    // decaying drift left over from earlier events
    let mut carry = 0.0;
    let mut out = Vec::with_capacity(cfg.num_events);

    for i in 0..cfg.num_events {
        let ev = draw_event(cfg, i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_PATH, i as u64));
        let mut rows = Vec::with_capacity(l + h);
        for step in 0..l + h {
            carry *= phi;
            let pulse = if step >= l {
                ev.direction * cfg.kappa * cfg.drift_shape(step - l + 1)
            } else {
                0.0
            };
            let row: Vec<f64> = dev
                .iter_mut()
                .map(|d| {
                    *d = phi * *d + noise.sample(&mut rng);
                    cfg.mean_level + *d + carry + pulse
                })
                .collect();
            rows.push(row);
            if step + 1 == l + h {
                carry += pulse;
            }
        }
        let base = (i * (l + h)) as i64;
        let x: Vec<Vec<f64>> = rows[..l].iter().map(|r| r[..cfg.d_x].to_vec()).collect();
        let y: Vec<Vec<f64>> = rows[l..].iter().map(|r| r[..cfg.d_y].to_vec()).collect();
        out.push(AlignedInstance {
            id: i as u64,
            script: EventScript::new(ev.tokens, base + l as i64 - 1, ev.category)?,
            window: MarketWindow::from_rows(&x)?,
            target: FutureSegment::from_rows(&y)?,
            text_informative: Some(ev.informative),
        });
    }
    Ok(out)
}

/// Best text-blind forecast under the simulator: `μ + φ^h (x_last − μ)`.
pub fn text_blind_forecast(inst: &AlignedInstance, cfg: &ScenarioConfig) -> Tensor {
    let last = inst.window.last();
    let mut data = Vec::with_capacity(cfg.horizon * cfg.d_y);
    for h in 1..=cfg.horizon {
        let decay = cfg.ar_coef.powi(h as i32);
        for c in 0..cfg.d_y {
            // channels beyond d_x are unobserved: fall back to the mean
            let x = last.get(c).copied().unwrap_or(cfg.mean_level);
            data.push(cfg.mean_level + decay * (x - cfg.mean_level));
        }
    }
    Tensor::new(vec![cfg.horizon, cfg.d_y], data).expect("H × d_y")
}

/// Text-blind forecast plus the drift decoded from planted tokens.
pub fn token_oracle_forecast(inst: &AlignedInstance, cfg: &ScenarioConfig) -> Tensor {
    let mut f = text_blind_forecast(inst, cfg);
    let d = signal_direction(&inst.script.token_ids, cfg.signal_tokens);
    let dy = cfg.d_y;
    for (k, v) in f.data_mut().iter_mut().enumerate() {
        *v += d * cfg.kappa * cfg.drift_shape(k / dy + 1);
    }
    f
}

/// Train/validation/test fractions; splits are contiguous in time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let all = [self.train, self.val, self.test];
        if all.iter().any(|f| !(0.0..=1.0).contains(f)) || (all.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions must be in [0, 1] and sum to 1, got {all:?}"
            )));
        }
        Ok(())
    }

    /// `(train, val, test)` counts: floor for val and test, remainder to train.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let val = (n as f64 * self.val).floor() as usize;
        let test = (n as f64 * self.test).floor() as usize;
        (n - val - test, val, test)
    }
}

pub struct Splits {
    pub train: Vec<AlignedInstance>,
    pub val: Vec<AlignedInstance>,
    pub test: Vec<AlignedInstance>,
}

pub fn split(data: Vec<AlignedInstance>, spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    if data.len() < 3 {
        return Err(Error::Config(format!(
            "need at least 3 instances to split, got {}",
            data.len()
        )));
    }
    if data.windows(2).any(|w| w[0].release_time() > w[1].release_time()) {
        return Err(Error::Contract("split input must be sorted by release time".into()));
    }
    let (n_train, n_val, _) = spec.counts(data.len());
    let mut train = data;
    let mut val = train.split_off(n_train);
    let test = val.split_off(n_val);
    Ok(Splits { train, val, test })
}

/// Expected shapes when ingesting a dataset; `None` means "infer from the
/// first record".
#[derive(Debug, Clone, Copy, Default)]
pub struct IngestOptions {
    pub lookback: Option<usize>,
    pub horizon: Option<usize>,
    pub d_x: Option<usize>,
    pub d_y: Option<usize>,
    pub vocab: Option<usize>,
}

impl IngestOptions {
    pub fn from_scenario(cfg: &ScenarioConfig) -> Self {
        IngestOptions {
            lookback: Some(cfg.lookback),
            horizon: Some(cfg.horizon),
            d_x: Some(cfg.d_x),
            d_y: Some(cfg.d_y),
            vocab: Some(cfg.vocab),
        }
    }
}

pub fn instance_to_json(inst: &AlignedInstance, with_flags: bool) -> Value {
    let mut v = json!({
        "id": inst.id,
        "category": inst.script.category,
        "release_time": inst.script.release_time,
        "tokens": inst.script.token_ids,
        "x": inst.window.values().to_rows(),
        "y": inst.target.values().to_rows(),
    });
    if with_flags {
        if let Some(flag) = inst.text_informative {
            v["text_informative"] = Value::Bool(flag);
        }
    }
    v
}

pub fn write_jsonl(path: &Path, data: &[AlignedInstance], with_flags: bool) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for inst in data {
        serde_json::to_writer(&mut w, &instance_to_json(inst, with_flags))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

const FIELDS: [&str; 7] = ["id", "category", "release_time", "tokens", "x", "y", "text_informative"];

fn field_err(line: usize, field: &str, reason: impl Into<String>) -> Error {
    Error::Field {
        line,
        field: field.to_string(),
        reason: reason.into(),
    }
}

fn parse_matrix(
    line: usize,
    field: &str,
    v: &Value,
    rows: &mut Option<usize>,
    cols: &mut Option<usize>,
) -> Result<Tensor> {
    let arr = v
        .as_array()
        .ok_or_else(|| field_err(line, field, "expected an array of rows"))?;
    if arr.is_empty() {
        return Err(field_err(line, field, "no rows"));
    }
    if let Some(r) = *rows {
        if arr.len() != r {
            return Err(field_err(line, field, format!("expected {r} rows, got {}", arr.len())));
        }
    }
    let mut data = Vec::new();
    for (i, row) in arr.iter().enumerate() {
        let row = row
            .as_array()
            .ok_or_else(|| field_err(line, field, format!("row {i} is not an array")))?;
        let want = *cols.get_or_insert(row.len());
        if row.len() != want || want == 0 {
            return Err(field_err(
                line,
                field,
                format!("row {i} has {} values, expected {want}", row.len()),
            ));
        }
        for x in row {
            match x.as_f64() {
                Some(f) if f.is_finite() => data.push(f),
                _ => {
                    return Err(field_err(
                        line,
                        field,
                        format!("row {i} holds a non-finite or non-numeric value"),
                    ))
                }
            }
        }
    }
    *rows = Some(arr.len());
    Ok(Tensor::new(vec![arr.len(), cols.unwrap_or(0)], data).expect("validated matrix"))
}

fn parse_record(line: usize, text: &str, opts: &mut IngestOptions) -> Result<AlignedInstance> {
    let v: Value = serde_json::from_str(text).map_err(|e| Error::Parse {
        path: Default::default(),
        line,
        reason: e.to_string(),
    })?;
    let obj = v
        .as_object()
        .ok_or_else(|| field_err(line, "<record>", "expected a JSON object"))?;
    if let Some(k) = obj.keys().find(|k| !FIELDS.contains(&k.as_str())) {
        return Err(field_err(
            line,
            k,
            format!("unknown field; valid fields are {FIELDS:?}"),
        ));
    }
    let get = |name: &str| obj.get(name).ok_or_else(|| field_err(line, name, "missing"));

    let id = get("id")?
        .as_u64()
        .ok_or_else(|| field_err(line, "id", "expected a non-negative integer"))?;
    let category: Category = serde_json::from_value(get("category")?.clone())
        .map_err(|_| field_err(line, "category", format!("unknown category {}", obj["category"])))?;
    let release_time = get("release_time")?
        .as_i64()
        .ok_or_else(|| field_err(line, "release_time", "expected an integer"))?;
    let tokens_v = get("tokens")?
        .as_array()
        .ok_or_else(|| field_err(line, "tokens", "expected an array of token ids"))?;
    if tokens_v.is_empty() {
        return Err(field_err(line, "tokens", "script has no tokens"));
    }
    let mut tokens = Vec::with_capacity(tokens_v.len());
    for t in tokens_v {
        let id = t
            .as_u64()
            .ok_or_else(|| field_err(line, "tokens", format!("invalid token id {t}")))?;
        if let Some(vocab) = opts.vocab {
            if id as usize >= vocab {
                return Err(field_err(
                    line,
                    "tokens",
                    format!("token id {id} outside vocabulary of {vocab}"),
                ));
            }
        }
        tokens.push(id as usize);
    }
    let x = parse_matrix(line, "x", get("x")?, &mut opts.lookback, &mut opts.d_x)?;
    let y = parse_matrix(line, "y", get("y")?, &mut opts.horizon, &mut opts.d_y)?;
    let text_informative = match obj.get("text_informative") {
        None => None,
        Some(Value::Bool(b)) => Some(*b),
        Some(_) => return Err(field_err(line, "text_informative", "expected a boolean")),
    };
    Ok(AlignedInstance {
        id,
        script: EventScript::new(tokens, release_time, category)?,
        window: MarketWindow::new(x)?,
        target: FutureSegment::new(y)?,
        text_informative,
    })
}

/// Reads, validates and sorts (by release time) a JSON-lines dataset.
pub fn ingest(path: &Path, opts: IngestOptions) -> Result<Vec<AlignedInstance>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut opts = opts;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let text = line.map_err(|e| Error::io(path, e))?;
        if text.trim().is_empty() {
            continue;
        }
        let inst = parse_record(line_no, &text, &mut opts).map_err(|e| match e {
            Error::Parse { line, reason, .. } => Error::Parse {
                path: path.to_path_buf(),
                line,
                reason,
            },
            other => other,
        })?;
        out.push(inst);
    }
    if out.is_empty() {
        log::warn!("dataset {} is empty", path.display());
    }
    out.sort_by_key(|inst| inst.release_time());
    Ok(out)
}

/// Joins time-adjacent instances (`x` then `y`, each event directly after
/// the previous target) into continuous series for sliding-window training.
/// Requires `d_x == d_y`.
pub fn continuous_segments(data: &[AlignedInstance]) -> Result<Vec<Vec<Vec<f64>>>> {
    let mut segments: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut prev_end: Option<i64> = None;
    for inst in data {
        if inst.window.channels() != inst.target.channels() {
            return Err(Error::Config(format!(
                "sliding-window pretraining needs d_x == d_y, got {} and {}",
                inst.window.channels(),
                inst.target.channels()
            )));
        }
        let l = inst.window.len() as i64;
        let start = inst.release_time() - l + 1;
        let joined = prev_end == Some(start - 1);
        let rows = inst
            .window
            .values()
            .to_rows()
            .into_iter()
            .chain(inst.target.values().to_rows());
        match segments.last_mut() {
            Some(seg) if joined => seg.extend(rows),
            _ => segments.push(rows.collect()),
        }
        prev_end = Some(inst.release_time() + inst.target.horizon() as i64);
    }
    Ok(segments)
}

/// Instance counts per category, in category order.
pub fn category_counts(data: &[AlignedInstance]) -> BTreeMap<Category, usize> {
    let mut m = BTreeMap::new();
    for inst in data {
        *m.entry(inst.category()).or_insert(0) += 1;
    }
    m
}
