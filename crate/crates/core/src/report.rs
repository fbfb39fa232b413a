//! Gate-openness and token-alignment reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::datagen::AlignedInstance;
use crate::error::{Error, Result};
use crate::fusion::responsibility;
use crate::model::Model;

pub const HISTOGRAM_BINS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GateRow {
    pub id: u64,
    pub category: String,
    pub alpha: f64,
    pub delta: f64,
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryMean {
    pub category: String,
    pub n: usize,
    pub mean_openness: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateReport {
    pub rows: Vec<GateRow>,
    /// Per category in name order, then an `all` row.
    pub means: Vec<CategoryMean>,
    pub histogram: Vec<HistogramBin>,
}

/// Equal-width bins over `[0, 1]`; the last bin is closed.
pub fn histogram(values: &[f64], bins: usize) -> Vec<HistogramBin> {
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|b| HistogramBin {
            lo: b as f64 / bins as f64,
            hi: (b + 1) as f64 / bins as f64,
            count: 0,
        })
        .collect();
    for &v in values {
        let b = ((v * bins as f64).floor().max(0.0) as usize).min(bins - 1);
        out[b].count += 1;
    }
    out
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Openness, Granger utility and responsibility of every instance. The
/// whole dataset forms one batch for the responsibility normalisation.
pub fn gate_report(model: &Model, data: &[AlignedInstance]) -> Result<GateReport> {
    if data.is_empty() {
        return Err(Error::Input("gate report needs at least one instance".into()));
    }
    let mut rows = Vec::with_capacity(data.len());
    let mut deltas = Vec::with_capacity(data.len());
    for inst in data {
        let p = model.prepare(inst)?;
        let pred = model.predict(&p)?;
        let y = p.level_target();
        let mse = |f: &crate::tensor::Tensor| {
            f.data()
                .iter()
                .zip(y.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / y.len() as f64
        };
        let delta = mse(&pred.ts_only) - mse(&pred.full);
        deltas.push(delta);
        rows.push(GateRow {
            id: inst.id,
            category: inst.category().name().to_string(),
            alpha: pred.openness,
            delta,
            r: f64::NAN,
        });
    }
    for (row, r) in rows.iter_mut().zip(responsibility(&deltas, &model.config.gate)?) {
        row.r = r;
    }
    let mut groups: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for row in &rows {
        groups.entry(row.category.as_str()).or_default().push(row.alpha);
    }
    let alphas: Vec<f64> = rows.iter().map(|r| r.alpha).collect();
    let mut means: Vec<CategoryMean> = groups
        .iter()
        .map(|(c, v)| CategoryMean {
            category: (*c).to_string(),
            n: v.len(),
            mean_openness: mean(v),
        })
        .collect();
    means.push(CategoryMean {
        category: "all".into(),
        n: alphas.len(),
        mean_openness: mean(&alphas),
    });
    Ok(GateReport {
        histogram: histogram(&alphas, HISTOGRAM_BINS),
        rows,
        means,
    })
}

impl GateReport {
    pub fn overall_mean(&self) -> f64 {
        self.means.last().map_or(f64::NAN, |m| m.mean_openness)
    }

    /// Writes `<prefix>_instances.csv`, `<prefix>_categories.csv` and
    /// `<prefix>_histogram.csv` into `dir`.
    pub fn write_csvs(&self, dir: &Path, prefix: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_rows(&dir.join(format!("{prefix}_instances.csv")), &self.rows)?;
        write_rows(&dir.join(format!("{prefix}_categories.csv")), &self.means)?;
        write_rows(&dir.join(format!("{prefix}_histogram.csv")), &self.histogram)
    }

    /// Bar chart of the openness histogram.
    pub fn svg(&self) -> String {
        let (w, h, pad) = (600.0, 300.0, 30.0);
        let max = self.histogram.iter().map(|b| b.count).max().unwrap_or(0).max(1) as f64;
        let bw = (w - 2.0 * pad) / self.histogram.len() as f64;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
        );
        let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        for (i, b) in self.histogram.iter().enumerate() {
            let bh = (h - 2.0 * pad) * b.count as f64 / max;
            let x = pad + i as f64 * bw;
            let y = h - pad - bh;
            let _ = writeln!(
                s,
                r##"<rect x="{x:.2}" y="{y:.2}" width="{:.2}" height="{bh:.2}" fill="#4a7ab5"><title>[{:.2}, {:.2}): {}</title></rect>"##,
                bw - 1.0,
                b.lo,
                b.hi,
                b.count
            );
        }
        let base = h - pad;
        let _ = writeln!(
            s,
            r#"<line x1="{pad}" y1="{base}" x2="{}" y2="{base}" stroke="black"/>"#,
            w - pad
        );
        for t in [0.0, 0.5, 1.0] {
            let x = pad + t * (w - 2.0 * pad);
            let _ = writeln!(
                s,
                r#"<text x="{x:.2}" y="{}" font-size="12" text-anchor="middle">{t}</text>"#,
                h - pad / 3.0
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="13" text-anchor="middle">text gate openness (mean {:.4})</text>"#,
            w / 2.0,
            pad / 1.5,
            self.overall_mean()
        );
        s.push_str("</svg>\n");
        s
    }
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignRecord {
    pub instance_id: u64,
    pub position: usize,
    pub token_id: usize,
    pub salience: f64,
    pub argmax_step: usize,
    pub similarity: f64,
}

/// Anchor tokens of every instance, in instance then salience order.
pub fn align_report(model: &Model, data: &[AlignedInstance]) -> Result<Vec<AlignRecord>> {
    let mut out = Vec::new();
    for inst in data {
        let p = model.prepare(inst)?;
        out.extend(model.token_alignment(&p)?.into_iter().map(|a| AlignRecord {
            instance_id: inst.id,
            position: a.position,
            token_id: a.token_id,
            salience: a.salience,
            argmax_step: a.argmax_step,
            similarity: a.similarity,
        }));
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
