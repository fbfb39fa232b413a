//! Forecast metrics, reporting scales and the restricted-vs-full comparison.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::datagen::AlignedInstance;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

pub const MSE_SCALE: f64 = 1e4;
pub const MAE_SCALE: f64 = 1e3;
pub const DHR_SCALE: f64 = 1e2;

/// Mean squared and mean absolute error over every element of every pair.
pub fn mse_mae(preds: &[Tensor], targets: &[Tensor]) -> Result<(f64, f64)> {
    if preds.len() != targets.len() {
        return Err(Error::dim("mse_mae", &[preds.len()], &[targets.len()]));
    }
    let (mut se, mut ae, mut n) = (0.0, 0.0, 0usize);
    for (p, y) in preds.iter().zip(targets) {
        if p.shape() != y.shape() {
            return Err(Error::dim("mse_mae", p.shape(), y.shape()));
        }
        for (a, b) in p.data().iter().zip(y.data()) {
            se += (a - b) * (a - b);
            ae += (a - b).abs();
        }
        n += p.len();
    }
    if n == 0 {
        return Err(Error::Input("no forecast values to score".into()));
    }
    Ok((se / n as f64, ae / n as f64))
}

/// Step-over-step directional hit rate of one scalar path, in `[0, 1]`.
/// Step 0 is compared against `x_last`; two zero moves count as a hit.
pub fn dhr(pred: &[f64], target: &[f64], x_last: f64) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::InvalidArgument {
            op: "dhr",
            reason: "horizon is zero".into(),
        });
    }
    if pred.len() != target.len() {
        return Err(Error::dim("dhr", &[pred.len()], &[target.len()]));
    }
    let mut hits = 0usize;
    let (mut prev_p, mut prev_y) = (x_last, x_last);
    for (&p, &y) in pred.iter().zip(target) {
        let (dp, dy) = (p - prev_p, y - prev_y);
        let hit = if dp == 0.0 || dy == 0.0 {
            dp == 0.0 && dy == 0.0
        } else {
            (dp > 0.0) == (dy > 0.0)
        };
        hits += usize::from(hit);
        prev_p = p;
        prev_y = y;
    }
    Ok(hits as f64 / pred.len() as f64)
}

/// Return of a one-event sign strategy: hold `sign(ŷ_H − x_last)` and earn
/// the relative move to `y_H`.
pub fn strategy_return(pred_last: f64, target_last: f64, x_last: f64) -> f64 {
    let position = if pred_last > x_last {
        1.0
    } else if pred_last < x_last {
        -1.0
    } else {
        0.0
    };
    position * (target_last - x_last) / x_last.abs()
}

/// Mean over sample standard deviation; `None` when the deviation is zero.
pub fn sharpe(returns: &[f64]) -> Result<Option<f64>> {
    if returns.len() < 2 {
        return Err(Error::InvalidArgument {
            op: "sharpe",
            reason: format!("needs at least 2 returns, got {}", returns.len()),
        });
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    Ok(if sd == 0.0 || !sd.is_finite() {
        None
    } else {
        Some(mean / sd)
    })
}

/// Written in place of an undefined Sharpe ratio.
pub const UNDEFINED: &str = "nan";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Scaling {
    Scaled,
    Raw,
}

impl Scaling {
    pub fn name(self) -> &'static str {
        match self {
            Scaling::Scaled => "scaled",
            Scaling::Raw => "raw",
        }
    }
}

pub fn scale_mse(raw: f64) -> f64 {
    raw * MSE_SCALE
}

pub fn scale_mae(raw: f64) -> f64 {
    raw * MAE_SCALE
}

pub fn scale_dhr(raw: f64) -> f64 {
    raw * DHR_SCALE
}

/// Two-decimal report formatting, e.g. `3.38e-4` under ×10⁴ prints `3.38`.
pub fn format_scaled(v: f64) -> String {
    format!("{v:.2}")
}

/// Relative improvement of `full` over `restricted`, in percent.
pub fn improvement_pct(restricted: f64, full: f64) -> f64 {
    (restricted - full) / restricted * 100.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchMetrics {
    pub mse: f64,
    pub mae: f64,
    /// `NaN` when the target has more than one channel.
    pub dhr: f64,
    pub sharpe: Option<f64>,
}

/// Raw metrics of both branches on one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub dataset: String,
    pub horizon: usize,
    pub n_events: usize,
    pub ts: BranchMetrics,
    pub full: BranchMetrics,
    pub mean_text_gate: f64,
}

pub const METRIC_COLUMNS: [&str; 15] = [
    "dataset",
    "horizon",
    "n_events",
    "scaling",
    "ts_mse",
    "full_mse",
    "mse_improv_pct",
    "ts_mae",
    "full_mae",
    "mae_improv_pct",
    "ts_dhr",
    "full_dhr",
    "ts_sharpe",
    "full_sharpe",
    "mean_text_gate",
];

impl MetricReport {
    pub fn mse_improvement_pct(&self) -> f64 {
        improvement_pct(self.ts.mse, self.full.mse)
    }

    pub fn mae_improvement_pct(&self) -> f64 {
        improvement_pct(self.ts.mae, self.full.mae)
    }

    /// Report cells in [`METRIC_COLUMNS`] order.
    pub fn cells(&self, scaling: Scaling) -> Vec<String> {
        let num = |v: f64, factor: f64| match scaling {
            Scaling::Scaled => format_scaled(v * factor),
            Scaling::Raw => format!("{v:e}"),
        };
        let sharpe = |s: Option<f64>| match s {
            None => UNDEFINED.to_string(),
            Some(v) if scaling == Scaling::Scaled => format!("{v:.2}"),
            Some(v) => format!("{v:e}"),
        };
        vec![
            self.dataset.clone(),
            self.horizon.to_string(),
            self.n_events.to_string(),
            scaling.name().to_string(),
            num(self.ts.mse, MSE_SCALE),
            num(self.full.mse, MSE_SCALE),
            format!("{:.2}", self.mse_improvement_pct()),
            num(self.ts.mae, MAE_SCALE),
            num(self.full.mae, MAE_SCALE),
            format!("{:.2}", self.mae_improvement_pct()),
            num(self.ts.dhr, DHR_SCALE),
            num(self.full.dhr, DHR_SCALE),
            sharpe(self.ts.sharpe),
            sharpe(self.full.sharpe),
            format!("{:.4}", self.mean_text_gate),
        ]
    }
}

pub fn write_metrics_csv(path: &Path, reports: &[MetricReport], scaling: Scaling) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METRIC_COLUMNS)?;
    for r in reports {
        w.write_record(r.cells(scaling))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Aligned table for terminals.
pub fn render_table(reports: &[MetricReport], scaling: Scaling) -> String {
    let rows: Vec<Vec<String>> = reports.iter().map(|r| r.cells(scaling)).collect();
    let widths: Vec<usize> = METRIC_COLUMNS
        .iter()
        .enumerate()
        .map(|(i, h)| rows.iter().map(|r| r[i].len()).chain([h.len()]).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    let line = |cells: Vec<&str>, out: &mut String| {
        let parts: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
        let _ = writeln!(out, "{}", parts.join("  "));
    };
    line(METRIC_COLUMNS.to_vec(), &mut out);
    for r in &rows {
        line(r.iter().map(String::as_str).collect(), &mut out);
    }
    out
}

fn branch(preds: &[Tensor], targets: &[Tensor], lasts: &[f64]) -> Result<BranchMetrics> {
    let (mse, mae) = mse_mae(preds, targets)?;
    let scalar = preds.iter().all(|p| p.cols() == 1);
    let (dhr_mean, sharpe_v) = if scalar {
        let mut hit = 0.0;
        let mut rets = Vec::with_capacity(preds.len());
        for ((p, y), &x) in preds.iter().zip(targets).zip(lasts) {
            hit += dhr(p.data(), y.data(), x)?;
            rets.push(strategy_return(
                *p.data().last().expect("H ≥ 1"),
                *y.data().last().expect("H ≥ 1"),
                x,
            ));
        }
        let s = if rets.len() >= 2 { sharpe(&rets)? } else { None };
        (hit / preds.len() as f64, s)
    } else {
        (f64::NAN, None)
    };
    Ok(BranchMetrics {
        mse,
        mae,
        dhr: dhr_mean,
        sharpe: sharpe_v,
    })
}

/// Scores the restricted and the full forecast on the same instances.
pub fn compare_branches(model: &Model, dataset: &str, data: &[AlignedInstance]) -> Result<MetricReport> {
    if data.is_empty() {
        return Err(Error::Input(format!("dataset {dataset} is empty")));
    }
    let mut full = Vec::with_capacity(data.len());
    let mut ts = Vec::with_capacity(data.len());
    let mut targets = Vec::with_capacity(data.len());
    let mut lasts = Vec::with_capacity(data.len());
    let mut gate = 0.0;
    for inst in data {
        let p = model.prepare(inst)?;
        let pred = model.predict(&p)?;
        gate += pred.openness;
        full.push(pred.full);
        ts.push(pred.ts_only);
        targets.push(p.level_target());
        lasts.push(p.baseline[0]);
    }
    Ok(MetricReport {
        dataset: dataset.to_string(),
        horizon: model.dims.horizon,
        n_events: data.len(),
        ts: branch(&ts, &targets, &lasts)?,
        full: branch(&full, &targets, &lasts)?,
        mean_text_gate: gate / data.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_forecast_scores_zero() {
        let y = vec![Tensor::row_vector(vec![1.0, 2.0])];
        assert_eq!(mse_mae(&y, &y).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn table_scalings() {
        assert_eq!(format_scaled(scale_mse(3.38e-4)), "3.38");
        assert_eq!(format_scaled(scale_mae(1.144e-2)), "11.44");
        assert_eq!(scale_dhr(0.5), 50.0);
    }

    #[test]
    fn dhr_cases() {
        let y = [1.1, 1.3, 1.2, 1.5];
        assert_eq!(dhr(&y, &y, 1.0).unwrap(), 1.0);
        let mirrored: Vec<f64> = y.iter().map(|v| 2.0 - v).collect();
        assert_eq!(dhr(&mirrored, &y, 1.0).unwrap(), 0.0);
        assert_eq!(dhr(&[1.0; 4], &[1.1, 1.2, 1.3, 1.4], 1.0).unwrap(), 0.0);
        assert_eq!(dhr(&[1.0, 1.0], &[1.0, 1.0], 1.0).unwrap(), 1.0);
        assert!(dhr(&[], &[], 1.0).is_err());
    }

    #[test]
    fn sharpe_cases() {
        assert_eq!(sharpe(&[1.0, -1.0, 1.0, -1.0]).unwrap(), Some(0.0));
        assert_eq!(sharpe(&[1.0, 1.0]).unwrap(), None);
        let s = sharpe(&[2.0, 0.0]).unwrap().unwrap();
        assert!((s - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(sharpe(&[1.0]).is_err());
    }

    #[test]
    fn improvement_arithmetic() {
        assert!((improvement_pct(18.53, 18.16) - 1.9967).abs() < 1e-3);
    }
}
