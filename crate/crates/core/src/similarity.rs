//! Layer-wise interference between delta sets.
//!
//! The cosine is taken on reconstructed deltas, where the α/r factor cancels.
//! The per-pair scalar is the RMS of the layer cosines,
//! `sqrt((1/N) Σ cos²θᵢ)`.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::LayerKey;
use crate::delta::DeltaSet;
use crate::error::{Error, Result};
use crate::tensor::{frobenius_inner, frobenius_norm, Matrix};

/// Slack allowed beyond [-1, 1] before a cosine is clamped.
const COSINE_SLACK: f64 = 1e-12;

pub fn cosine_layer(a: &Matrix, b: &Matrix) -> Result<f64> {
    let inner = frobenius_inner(a, b)?;
    let (na, nb) = (frobenius_norm(a), frobenius_norm(b));
    match (na == 0.0, nb == 0.0) {
        (true, true) => return Err(Error::Degenerate("cosine of two zero matrices".into())),
        (true, false) => return Err(Error::Degenerate("cosine with zero left operand".into())),
        (false, true) => return Err(Error::Degenerate("cosine with zero right operand".into())),
        _ => {}
    }
    let cos = inner / (na * nb);
    if !cos.is_finite() {
        return Err(Error::Numeric(format!("cosine evaluated to {cos}")));
    }
    debug_assert!(cos.abs() <= 1.0 + COSINE_SLACK, "cosine {cos} out of range");
    Ok(cos.clamp(-1.0, 1.0))
}

pub fn rms_score(cosines: &[f64]) -> Result<f64> {
    if cosines.is_empty() {
        return Err(Error::Degenerate("RMS of an empty cosine list".into()));
    }
    if let Some(c) = cosines.iter().find(|c| c.is_nan() || c.abs() > 1.0 + COSINE_SLACK) {
        return Err(Error::Input(format!("cosine {c} is outside [-1, 1]")));
    }
    let mean_sq = cosines.iter().map(|c| c * c).sum::<f64>() / cosines.len() as f64;
    Ok(mean_sq.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCosine {
    pub key: LayerKey,
    pub cosine: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub pair: (String, String),
    pub rows: Vec<LayerCosine>,
    pub rms: f64,
}

fn label(set: &DeltaSet) -> String {
    set.source_names.join(" ")
}

/// One row per shared layer in canonical order, plus the RMS over all rows.
pub fn cosine_report(a: &DeltaSet, b: &DeltaSet) -> Result<SimilarityReport> {
    let (ka, kb) = (a.keys(), b.keys());
    if ka != kb {
        let diff: Vec<String> = ka.symmetric_difference(&kb).map(ToString::to_string).collect();
        return Err(Error::Composition(format!(
            "cannot compare {} and {}: layer sets differ in {}",
            label(a),
            label(b),
            diff.join(", ")
        )));
    }
    let rows: Vec<LayerCosine> = a
        .layers
        .par_iter()
        .map(|(key, ma)| {
            let cosine = cosine_layer(ma, &b.layers[key])
                .map_err(|e| Error::Degenerate(format!("layer {key}: {e}")))?;
            Ok(LayerCosine { key: *key, cosine })
        })
        .collect::<Result<_>>()?;
    let cosines: Vec<f64> = rows.iter().map(|r| r.cosine).collect();
    let rms = rms_score(&cosines)?;
    Ok(SimilarityReport {
        pair: (label(a), label(b)),
        rows,
        rms,
    })
}

impl SimilarityReport {
    /// `layer,module,cosine` rows in canonical order and a trailing
    /// `# rms,<value>` line. Values use shortest round-trip formatting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,module,cosine\n");
        for row in &self.rows {
            writeln!(out, "{},{},{}", row.key.block, row.key.kind, row.cosine).expect("string write");
        }
        writeln!(out, "# rms,{}", self.rms).expect("string write");
        out
    }

    /// Parses [`Self::to_csv`] output back; the pair labels are not stored in CSV.
    pub fn from_csv(text: &str, pair: (String, String)) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("layer,module,cosine") {
            return Err(Error::Input("missing `layer,module,cosine` header".into()));
        }
        let mut rows = Vec::new();
        let mut rms = None;
        for line in lines.filter(|l| !l.trim().is_empty()) {
            if let Some(v) = line.strip_prefix("# rms,") {
                rms = Some(v.trim().parse().map_err(|_| Error::Input(format!("bad rms line `{line}`")))?);
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            let [block, module, cosine] = fields[..] else {
                return Err(Error::Input(format!("bad report row `{line}`")));
            };
            let bad = || Error::Input(format!("bad report row `{line}`"));
            rows.push(LayerCosine {
                key: LayerKey::new(block.parse().map_err(|_| bad())?, module.parse().map_err(|_| bad())?),
                cosine: cosine.parse().map_err(|_| bad())?,
            });
        }
        let rms = rms.ok_or_else(|| Error::Input("missing `# rms,` line".into()))?;
        Ok(Self { pair, rows, rms })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub slope: f64,
    pub intercept: f64,
    pub points: Vec<(f64, f64)>,
}

impl FitResult {
    pub fn predict(&self, x: f64) -> f64 {
        self.slope * x + self.intercept
    }

    pub fn residuals(&self) -> Vec<f64> {
        self.points.iter().map(|&(x, y)| y - self.predict(x)).collect()
    }
}

/// Ordinary least squares line through `points`, using centered sums.
pub fn linear_fit(points: &[(f64, f64)]) -> Result<FitResult> {
    if points.len() < 2 {
        return Err(Error::Degenerate(format!("linear fit needs at least 2 points, got {}", points.len())));
    }
    if points.iter().any(|(x, y)| !(x.is_finite() && y.is_finite())) {
        return Err(Error::Input("linear fit points must be finite".into()));
    }
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mean_x).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Degenerate("all x values are identical".into()));
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mean_x) * (p.1 - mean_y)).sum();
    let slope = sxy / sxx;
    Ok(FitResult {
        slope,
        intercept: mean_y - slope * mean_x,
        points: points.to_vec(),
    })
}

/// `100 · (candidate − baseline) / baseline`.
pub fn percent_change(baseline: f64, candidate: f64) -> Result<f64> {
    if baseline.is_nan() || baseline <= 0.0 {
        return Err(Error::Degenerate(format!("baseline must be positive, got {baseline}")));
    }
    Ok(100.0 * (candidate - baseline) / baseline)
}

/// Two decimals, ties to even, with an explicit sign (`-9.10%`, `+4.54%`).
pub fn format_percent(value: f64) -> String {
    let s = format!("{value:.2}");
    if s.starts_with('-') {
        format!("{s}%")
    } else {
        format!("+{s}%")
    }
}
