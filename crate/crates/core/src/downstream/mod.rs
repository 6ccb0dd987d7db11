//! Downstream regression evaluation of cell embeddings.
//!
//! Point labels are aggregated to patch-level cells (median), split randomly
//! or by geographic holdout, min-max scaled on the training side, and fitted
//! with a two-layer MLP probe over one or more fused embedding sources.

mod eval;
mod probe;
mod split;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::read_jsonl;
use crate::mae::EmbeddingTable;
use crate::s2geom::{CellId, LatLng};

pub use eval::{build_inputs, sweep_and_evaluate, EvalReport, EvalRequest, Aggregate, SeedResult};
pub use probe::{
    location_encode, train_probe, FusionMode, FusionSpec, HyperParams, LocEncoding, Probe, ProbeConfig, ProbeInputs,
    TrainedProbe,
};
pub use split::{split_geographic, split_random, Region, Split, SplitKind, SplitSpec};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledCell {
    pub cell: CellId,
    pub target: f64,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn aggregate(groups: BTreeMap<CellId, Vec<f64>>) -> Vec<LabeledCell> {
    groups.into_iter().map(|(cell, mut v)| LabeledCell { cell, target: median(&mut v) }).collect()
}

/// Groups points by containing level-`level` cell; each cell keeps the median
/// target (mean of the middle two for even counts). Output sorted by cell.
pub fn aggregate_labels(points: &[(LatLng, f64)], level: u8) -> Result<Vec<LabeledCell>> {
    if points.is_empty() {
        return Err(Error::Empty("label points"));
    }
    let mut groups: BTreeMap<CellId, Vec<f64>> = BTreeMap::new();
    for &(p, t) in points {
        if !t.is_finite() {
            return Err(Error::NonFinite(format!("target at ({}, {})", p.lat, p.lng)));
        }
        groups.entry(CellId::from_latlng(p, level)?).or_default().push(t);
    }
    Ok(aggregate(groups))
}

#[derive(Deserialize)]
struct LabelRecord {
    token: Option<String>,
    lat: Option<f64>,
    lng: Option<f64>,
    target: f64,
}

/// Reads `{"lat", "lng", "target"}` or `{"token", "target"}` lines and
/// aggregates them to level-`level` cells. Token records must already be at
/// `level`.
pub fn load_labels(path: &Path, level: u8) -> Result<Vec<LabeledCell>> {
    let shown = path.display().to_string();
    let mut groups: BTreeMap<CellId, Vec<f64>> = BTreeMap::new();
    read_jsonl(path, |line, rec: LabelRecord| {
        let err = |msg: String| Error::Parse { path: shown.clone(), line, msg };
        if !rec.target.is_finite() {
            return Err(err("target is not finite".into()));
        }
        let cell = match (rec.token, rec.lat, rec.lng) {
            (Some(tok), None, None) => {
                let c = CellId::from_token(&tok).map_err(|e| err(e.to_string()))?;
                if c.level() != level {
                    return Err(err(format!("token {tok} is at level {}, expected {level}", c.level())));
                }
                c
            }
            (None, Some(lat), Some(lng)) => {
                CellId::from_latlng(LatLng::new(lat, lng).map_err(|e| err(e.to_string()))?, level)?
            }
            _ => return Err(err("need either token or lat and lng".into())),
        };
        groups.entry(cell).or_default().push(rec.target);
        Ok(())
    })?;
    if groups.is_empty() {
        return Err(Error::Empty("label file"));
    }
    Ok(aggregate(groups))
}

#[derive(Deserialize)]
struct PointEmbedding {
    lat: f64,
    lng: f64,
    vector: Vec<f64>,
}

/// Loads external embeddings: a native embedding table, or JSONL points
/// `{"lat", "lng", "vector"}` averaged per level-`level` cell.
pub fn load_external_embeddings(path: &Path, level: u8) -> Result<EmbeddingTable> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(crate::mae::EMBEDDING_MAGIC) {
        let t = EmbeddingTable::decode(&bytes, path)?;
        if t.level().is_some_and(|l| l != level) {
            return Err(Error::invalid(format!("{}: table level differs from {level}", path.display())));
        }
        return Ok(t);
    }
    let shown = path.display().to_string();
    let mut sums: BTreeMap<CellId, (Vec<f64>, usize)> = BTreeMap::new();
    let mut dim = None;
    read_jsonl(path, |line, rec: PointEmbedding| {
        let expected = *dim.get_or_insert(rec.vector.len());
        if rec.vector.len() != expected || expected == 0 {
            return Err(Error::RaggedCounts { path: shown.clone(), line, expected, found: rec.vector.len() });
        }
        if rec.vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::Parse { path: shown.clone(), line, msg: "non-finite vector entry".into() });
        }
        let p = LatLng::new(rec.lat, rec.lng).map_err(|e| Error::Parse { path: shown.clone(), line, msg: e.to_string() })?;
        let entry = sums.entry(CellId::from_latlng(p, level)?).or_insert_with(|| (vec![0.0; expected], 0));
        entry.0.iter_mut().zip(&rec.vector).for_each(|(s, x)| *s += x);
        entry.1 += 1;
        Ok(())
    })?;
    let dim = dim.ok_or(Error::Empty("external embedding file"))?;
    let mut table = EmbeddingTable::new(dim);
    for (cell, (sum, n)) in sums {
        table.insert(cell, sum.iter().map(|s| (s / n as f64) as f32).collect())?;
    }
    Ok(table)
}

/// Min-max target scaling fitted on one subset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    pub min: f64,
    pub max: f64,
}

impl MinMaxScaler {
    pub fn fit(targets: &[f64]) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::Empty("scaler input"));
        }
        let min = targets.iter().copied().fold(f64::INFINITY, f64::min);
        let max = targets.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(max > min) || !min.is_finite() || !max.is_finite() {
            return Err(Error::invalid(format!("degenerate training targets: min {min}, max {max}")));
        }
        Ok(MinMaxScaler { min, max })
    }

    pub fn transform(&self, x: f64) -> f64 {
        (x - self.min) / (self.max - self.min)
    }

    pub fn inverse(&self, y: f64) -> f64 {
        y * (self.max - self.min) + self.min
    }
}

/// Fits the scaler on the `fit_on` subset and scales every target.
pub fn scale_targets(targets: &[f64], fit_on: &[usize]) -> Result<(Vec<f64>, MinMaxScaler)> {
    let train: Vec<f64> = fit_on.iter().map(|&i| targets[i]).collect();
    let s = MinMaxScaler::fit(&train)?;
    Ok((targets.iter().map(|&t| s.transform(t)).collect(), s))
}

/// `1 - SS_res / SS_tot`.
pub fn metric_r2(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() || truth.len() < 2 {
        return Err(Error::invalid(format!("r2 needs equal lengths >= 2, got {} and {}", pred.len(), truth.len())));
    }
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_tot: f64 = truth.iter().map(|t| (t - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::invalid("r2 undefined for constant truth"));
    }
    let ss_res: f64 = pred.iter().zip(truth).map(|(p, t)| (t - p).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

pub fn metric_mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() || truth.is_empty() {
        return Err(Error::invalid(format!("mae needs equal nonzero lengths, got {} and {}", pred.len(), truth.len())));
    }
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / truth.len() as f64)
}

/// Sample mean and standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
