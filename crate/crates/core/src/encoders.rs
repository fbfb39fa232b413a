//! Frozen surrogate encoders for event scripts and market windows, and the
//! trainable heads that project their output into the shared feature space.
//!
//! The surrogates are fixed seeded featurizers. They never touch a tape, so
//! no gradient can reach them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{positional_encoding, Mlp};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Tensor;

/// Global seed for every surrogate table.
pub const SURROGATE_SEED: u64 = 0x51_6e_a1_e7_c0_de_f0_0d;

const TEXT_TABLE_TAG: u64 = 1;
const CATEGORY_TAG: u64 = 2;
const TS_LIFT_TAG: u64 = 3;

/// Features per channel produced by [`ts_features`].
pub const TS_FEATURES: usize = 5;
const ROLLING: usize = 5;

/// Macro release categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Fomc,
    EmploymentSituation,
    UnemploymentInsurance,
    Cpi,
    Ppi,
    Gdp,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::Fomc,
        Category::EmploymentSituation,
        Category::UnemploymentInsurance,
        Category::Cpi,
        Category::Ppi,
        Category::Gdp,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Fomc => "fomc",
            Category::EmploymentSituation => "employment_situation",
            Category::UnemploymentInsurance => "unemployment_insurance",
            Category::Cpi => "cpi",
            Category::Ppi => "ppi",
            Category::Gdp => "gdp",
        }
    }
}

impl std::fmt::Display for Category {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventScript {
    pub token_ids: Vec<usize>,
    pub release_time: i64,
    pub category: Category,
}

impl EventScript {
    pub fn new(token_ids: Vec<usize>, release_time: i64, category: Category) -> Result<Self> {
        if token_ids.is_empty() {
            return Err(Error::Input("event script has no tokens".into()));
        }
        Ok(EventScript {
            token_ids,
            release_time,
            category,
        })
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Look-back window, `L × d_x`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketWindow {
    values: Tensor,
}

impl MarketWindow {
    pub fn new(values: Tensor) -> Result<Self> {
        check_series("window", &values)?;
        Ok(MarketWindow { values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Tensor::from_rows(rows).map_err(|e| Error::Input(format!("window: {e}")))?)
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn channels(&self) -> usize {
        self.values.cols()
    }

    /// Last observed value of each channel.
    pub fn last(&self) -> &[f64] {
        self.values.row(self.len() - 1)
    }
}

/// Post-event target, `H × d_y`.
#[derive(Debug, Clone, PartialEq)]
pub struct FutureSegment {
    values: Tensor,
}

impl FutureSegment {
    pub fn new(values: Tensor) -> Result<Self> {
        check_series("target", &values)?;
        Ok(FutureSegment { values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Tensor::from_rows(rows).map_err(|e| Error::Input(format!("target: {e}")))?)
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn horizon(&self) -> usize {
        self.values.rows()
    }

    pub fn channels(&self) -> usize {
        self.values.cols()
    }
}

fn check_series(what: &str, values: &Tensor) -> Result<()> {
    if values.shape().len() != 2 {
        return Err(Error::Input(format!(
            "{what} must be a matrix, got shape {:?}",
            values.shape()
        )));
    }
    if !values.is_finite() {
        return Err(Error::Input(format!("{what} contains non-finite values")));
    }
    Ok(())
}

/// Projected token and step embeddings of one instance, both with `F` columns.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingBatch {
    pub text: Var,
    pub ts: Var,
}

fn uniform_table(tag: u64, rows: usize, cols: usize, bound: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(SURROGATE_SEED ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(vec![rows, cols], data).expect("table shape")
}

/// Token lookup plus a sinusoidal position term and a category offset.
#[derive(Debug, Clone)]
pub struct TextSurrogate {
    vocab: usize,
    d_raw: usize,
    table: Tensor,
    categories: Tensor,
    position_mix: f64,
}

impl TextSurrogate {
    pub fn new(vocab: usize, d_raw: usize) -> Result<Self> {
        if vocab == 0 || d_raw == 0 {
            return Err(Error::Config(format!(
                "text surrogate needs vocab > 0 and d_raw > 0, got {vocab} and {d_raw}"
            )));
        }
        // unit variance entries
        let bound = 3f64.sqrt();
        Ok(TextSurrogate {
            vocab,
            d_raw,
            table: uniform_table(TEXT_TABLE_TAG, vocab, d_raw, bound),
            categories: uniform_table(CATEGORY_TAG, Category::ALL.len(), d_raw, 0.5 * bound),
            position_mix: 0.1,
        })
    }

    pub fn with_position_mix(mut self, mix: f64) -> Self {
        self.position_mix = mix;
        self
    }

    /// Every fixed table, for freeze audits.
    pub fn tables(&self) -> [&Tensor; 2] {
        [&self.table, &self.categories]
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn d_raw(&self) -> usize {
        self.d_raw
    }

    pub fn encode(&self, script: &EventScript) -> Result<Tensor> {
        if script.is_empty() {
            return Err(Error::Input("event script has no tokens".into()));
        }
        let cat = self.categories.row(script.category.index());
        let mut data = Vec::with_capacity(script.len() * self.d_raw);
        for (j, &tok) in script.token_ids.iter().enumerate() {
            if tok >= self.vocab {
                return Err(Error::Input(format!(
                    "token id {tok} at position {j} outside vocabulary of {}",
                    self.vocab
                )));
            }
            let emb = self.table.row(tok);
            if self.position_mix != 0.0 {
                let pe = positional_encoding(j + 1, self.d_raw);
                data.extend((0..self.d_raw).map(|k| emb[k] + self.position_mix * pe[k] + cat[k]));
            } else {
                data.extend((0..self.d_raw).map(|k| emb[k] + cat[k]));
            }
        }
        Ok(Tensor::new(vec![script.len(), self.d_raw], data).expect("rows × d_raw"))
    }
}

/// Per-step features of each channel: value, first difference (the first
/// step repeats the second), trailing mean and population std over up to 5
/// steps, and the relative position `(j+1)/L`. Output is `L × 5·d_x`.
pub fn ts_features(window: &MarketWindow) -> Tensor {
    let (l, dx) = (window.len(), window.channels());
    let v = window.values();
    let mut out = vec![0.0; l * dx * TS_FEATURES];
    for c in 0..dx {
        let col: Vec<f64> = (0..l).map(|j| v.get2(j, c)).collect();
        for j in 0..l {
            let diff = match (j, l) {
                (_, 1) => 0.0,
                (0, _) => col[1] - col[0],
                _ => col[j] - col[j - 1],
            };
            let start = (j + 1).saturating_sub(ROLLING);
            let win = &col[start..=j];
            // shift by the first value so constant windows give exact zeros
            let base = win[0];
            let n = win.len() as f64;
            let mean_shift = win.iter().map(|x| x - base).sum::<f64>() / n;
            let var = win.iter().map(|x| (x - base - mean_shift).powi(2)).sum::<f64>() / n;
            let f = &mut out[(j * dx + c) * TS_FEATURES..(j * dx + c + 1) * TS_FEATURES];
            f[0] = col[j];
            f[1] = diff;
            f[2] = base + mean_shift;
            f[3] = var.sqrt();
            f[4] = (j + 1) as f64 / l as f64;
        }
    }
    Tensor::new(vec![l, dx * TS_FEATURES], out).expect("features shape")
}

/// Fixed random affine lift of [`ts_features`].
#[derive(Debug, Clone)]
pub struct TsSurrogate {
    d_x: usize,
    d_raw: usize,
    lift: Tensor,
    bias: Tensor,
}

impl TsSurrogate {
    pub fn new(d_x: usize, d_raw: usize) -> Result<Self> {
        if d_x == 0 || d_raw == 0 {
            return Err(Error::Config(format!(
                "ts surrogate needs d_x > 0 and d_raw > 0, got {d_x} and {d_raw}"
            )));
        }
        let fan_in = d_x * TS_FEATURES;
        Ok(TsSurrogate {
            d_x,
            d_raw,
            lift: uniform_table(TS_LIFT_TAG, d_raw, fan_in, (3.0 / fan_in as f64).sqrt()),
            bias: uniform_table(TS_LIFT_TAG + 1, 1, d_raw, 0.1),
        })
    }

    pub fn d_raw(&self) -> usize {
        self.d_raw
    }

    pub fn tables(&self) -> [&Tensor; 2] {
        [&self.lift, &self.bias]
    }

    pub fn encode(&self, window: &MarketWindow) -> Result<Tensor> {
        if window.channels() != self.d_x {
            return Err(Error::dim("surrogate_ts_encode", &[window.channels()], &[self.d_x]));
        }
        let feats = ts_features(window);
        let (l, k) = (feats.rows(), feats.cols());
        let mut out = Vec::with_capacity(l * self.d_raw);
        for j in 0..l {
            let f = feats.row(j);
            for r in 0..self.d_raw {
                let w = self.lift.row(r);
                let acc: f64 = (0..k).map(|i| w[i] * f[i]).sum();
                out.push(acc + self.bias.data()[r]);
            }
        }
        Ok(Tensor::new(vec![l, self.d_raw], out).expect("L × d_raw"))
    }
}

/// Trainable `Linear → GELU → Linear` head into the shared dimension.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    pub mlp: Mlp,
}

impl ProjectionHead {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        group: ParamGroup,
        d_raw: usize,
        hidden: usize,
        f: usize,
    ) -> Result<Self> {
        Ok(ProjectionHead {
            mlp: Mlp::new(store, rng, name, group, &[d_raw, hidden, f])?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, raw: Var) -> Result<Var> {
        self.mlp.forward(tape, raw)
    }

    pub fn out_dim(&self) -> usize {
        self.mlp.out_dim()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn script(tokens: Vec<usize>) -> EventScript {
        EventScript::new(tokens, 10, Category::Cpi).unwrap()
    }

    #[test]
    fn text_encoding_is_deterministic_and_shaped() {
        let enc = TextSurrogate::new(64, 32).unwrap();
        let s = script(vec![1, 5, 9, 63, 0]);
        let a = enc.encode(&s).unwrap();
        let b = TextSurrogate::new(64, 32).unwrap().encode(&s).unwrap();
        assert_eq!(a.shape(), &[5, 32]);
        assert_eq!(a, b);
    }

    #[test]
    fn one_token_change_touches_one_row() {
        let enc = TextSurrogate::new(64, 32).unwrap().with_position_mix(0.0);
        let a = enc.encode(&script(vec![1, 2, 3])).unwrap();
        let b = enc.encode(&script(vec![1, 7, 3])).unwrap();
        assert_eq!(a.row(0), b.row(0));
        assert_ne!(a.row(1), b.row(1));
        assert_eq!(a.row(2), b.row(2));
    }

    #[test]
    fn out_of_vocab_is_input_error() {
        let enc = TextSurrogate::new(8, 4).unwrap();
        assert!(matches!(enc.encode(&script(vec![8])), Err(Error::Input(_))));
        assert!(EventScript::new(vec![], 0, Category::Gdp).is_err());
    }

    #[test]
    fn constant_window_features() {
        let w = MarketWindow::from_rows(&vec![vec![0.1]; 9]).unwrap();
        let f = ts_features(&w);
        for j in 0..9 {
            assert_eq!(f.get2(j, 1), 0.0);
            assert_eq!(f.get2(j, 3), 0.0);
            assert_eq!(f.get2(j, 2), 0.1);
        }
    }

    #[test]
    fn ramp_window_has_constant_difference() {
        let w = MarketWindow::from_rows(&(0..7).map(|j| vec![2.0 * j as f64]).collect::<Vec<_>>()).unwrap();
        let f = ts_features(&w);
        for j in 0..7 {
            assert_eq!(f.get2(j, 1), 2.0);
        }
        assert_eq!(f.get2(6, 4), 1.0);
    }

    #[test]
    fn ts_shape_any_length() {
        let enc = TsSurrogate::new(1, 32).unwrap();
        for l in [1, 2, 35, 70] {
            let w = MarketWindow::from_rows(&vec![vec![1.0]; l]).unwrap();
            assert_eq!(enc.encode(&w).unwrap().shape(), &[l, 32]);
        }
        let two = MarketWindow::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert!(enc.encode(&two).is_err());
    }

    #[test]
    fn zero_projection_gives_zero() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let head = ProjectionHead::new(&mut store, &mut rng, "p", ParamGroup::TextProjection, 6, 8, 4).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            store.value_mut(id).data_mut().fill(0.0);
        }
        let mut tape = Tape::with_params(&store);
        let x = tape.constant(Tensor::filled(&[3, 6], 0.7));
        let y = head.forward(&mut tape, x).unwrap();
        assert_eq!(tape.shape(y), &[3, 4]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }
}
