//! Per-cell feature loading and global feature-wise normalization.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_jsonl, write_atomic};
use crate::par;
use crate::s2geom::CellId;

/// Default histogram size: 115 place-category counts plus one road count.
pub const DEFAULT_FEATURE_DIM: usize = 116;
/// Variance floor for constant features.
pub const DEFAULT_NORM_EPS: f64 = 1e-6;

const STATS_CHUNK: usize = 4096;

/// Raw feature histogram of one patch-level cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CellFeatures {
    pub cell: CellId,
    pub counts: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct FeatureRecord {
    token: String,
    counts: Vec<f64>,
}

/// Loads a JSONL feature file: one `{"token": .., "counts": [..]}` per line.
///
/// Every record must decode to a valid cell, all cells must share one level,
/// tokens must be unique, and every counts vector must have the same length
/// (`expected_dim` when given, otherwise that of the first record) with
/// finite, non-negative entries.
pub fn load_features(path: &Path, expected_dim: Option<usize>) -> Result<Vec<CellFeatures>> {
    let shown = path.display().to_string();
    let mut out: Vec<CellFeatures> = Vec::new();
    let mut seen = HashSet::new();
    let mut dim = expected_dim;
    read_jsonl(path, |line, rec: FeatureRecord| {
        let parse_err = |msg: String| Error::Parse { path: shown.clone(), line, msg };
        let cell = CellId::from_token(&rec.token).map_err(|e| parse_err(e.to_string()))?;
        let expected = *dim.get_or_insert(rec.counts.len());
        if rec.counts.len() != expected {
            return Err(Error::RaggedCounts { path: shown.clone(), line, expected, found: rec.counts.len() });
        }
        if let Some(bad) = rec.counts.iter().find(|c| !c.is_finite() || **c < 0.0) {
            return Err(parse_err(format!("count {bad} is not a finite non-negative number")));
        }
        if let Some(first) = out.first() {
            if first.cell.level() != cell.level() {
                return Err(Error::MixedLevels(first.cell.level(), cell.level()));
            }
        }
        if !seen.insert(cell) {
            return Err(Error::DuplicateToken(rec.token));
        }
        out.push(CellFeatures { cell, counts: rec.counts });
        Ok(())
    })?;
    Ok(out)
}

/// Writes records in the format read by [`load_features`].
pub fn write_features(path: &Path, records: &[CellFeatures]) -> Result<()> {
    let mut buf = String::new();
    for r in records {
        let rec = FeatureRecord { token: r.cell.to_token(), counts: r.counts.clone() };
        buf.push_str(&serde_json::to_string(&rec)?);
        buf.push('\n');
    }
    write_atomic(path, buf.as_bytes())
}

/// Feature-wise population mean and variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub count: u64,
}

impl NormStats {
    fn from_single(counts: &[f64]) -> Self {
        NormStats { mean: counts.to_vec(), variance: vec![0.0; counts.len()], count: 1 }
    }

    /// Adds one observation (Welford update).
    pub fn push(&mut self, counts: &[f64]) -> Result<()> {
        if counts.len() != self.mean.len() {
            return Err(Error::DimensionMismatch { expected: self.mean.len(), found: counts.len() });
        }
        let n = self.count as f64 + 1.0;
        for ((m, v), &x) in self.mean.iter_mut().zip(self.variance.iter_mut()).zip(counts) {
            let delta = x - *m;
            *m += delta / n;
            // variance holds M2 / count; rescale around the update
            let m2 = *v * (n - 1.0) + delta * (x - *m);
            *v = m2 / n;
        }
        self.count += 1;
        Ok(())
    }

    /// Statistics of the union of both datasets.
    pub fn merge(&self, other: &NormStats) -> Result<NormStats> {
        if self.mean.len() != other.mean.len() {
            return Err(Error::DimensionMismatch { expected: self.mean.len(), found: other.mean.len() });
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let mut mean = Vec::with_capacity(self.mean.len());
        let mut variance = Vec::with_capacity(self.mean.len());
        for f in 0..self.mean.len() {
            let delta = other.mean[f] - self.mean[f];
            mean.push(self.mean[f] + delta * nb / n);
            let m2 = self.variance[f] * na + other.variance[f] * nb + delta * delta * na * nb / n;
            variance.push((m2 / n).max(0.0));
        }
        Ok(NormStats { mean, variance, count: self.count + other.count })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &serde_json::to_vec_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let stats: NormStats = serde_json::from_slice(&std::fs::read(path)?)?;
        if stats.count == 0 || stats.mean.len() != stats.variance.len() || stats.variance.iter().any(|v| *v < 0.0) {
            return Err(Error::Format { path: path.to_path_buf(), msg: "inconsistent normalization stats".into() });
        }
        Ok(stats)
    }
}

fn fit_sequential(rows: &[&[f64]]) -> Result<NormStats> {
    let mut stats = NormStats::from_single(rows[0]);
    for r in &rows[1..] {
        stats.push(r)?;
    }
    Ok(stats)
}

/// Fits population statistics over count vectors. Rows are processed in
/// fixed-size chunks merged left to right, so the result does not depend on
/// the number of threads.
pub fn fit_rows(rows: &[&[f64]]) -> Result<NormStats> {
    if rows.is_empty() {
        return Err(Error::Empty("normalization input"));
    }
    let chunks: Vec<&[&[f64]]> = rows.chunks(STATS_CHUNK).collect();
    let parts = par::try_map(&chunks, |c| fit_sequential(c))?;
    let mut iter = parts.into_iter();
    let first = iter.next().expect("at least one chunk");
    iter.try_fold(first, |acc, s| acc.merge(&s))
}

pub fn fit_norm_stats(records: &[CellFeatures]) -> Result<NormStats> {
    let rows: Vec<&[f64]> = records.iter().map(|r| r.counts.as_slice()).collect();
    fit_rows(&rows)
}

/// `(x - mean) / sqrt(max(variance, eps))` per feature.
pub fn apply_norm(counts: &[f64], stats: &NormStats, eps: f64) -> Result<Vec<f64>> {
    if counts.len() != stats.dim() {
        return Err(Error::DimensionMismatch { expected: stats.dim(), found: counts.len() });
    }
    Ok(counts
        .iter()
        .zip(&stats.mean)
        .zip(&stats.variance)
        .map(|((&x, &m), &v)| (x - m) / v.max(eps).sqrt())
        .collect())
}

/// Inverse of [`apply_norm`].
pub fn invert_norm(normalized: &[f64], stats: &NormStats, eps: f64) -> Result<Vec<f64>> {
    if normalized.len() != stats.dim() {
        return Err(Error::DimensionMismatch { expected: stats.dim(), found: normalized.len() });
    }
    Ok(normalized
        .iter()
        .zip(&stats.mean)
        .zip(&stats.variance)
        .map(|((&z, &m), &v)| z * v.max(eps).sqrt() + m)
        .collect())
}

#[cfg(test)]
mod tests {
    use std::io::Write;

    use super::*;
    use crate::s2geom::LatLng;

    fn token(lat: f64, lng: f64, level: u8) -> String {
        CellId::from_latlng(LatLng::new(lat, lng).unwrap(), level).unwrap().to_token()
    }

    fn file_with(lines: &[String]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn empty_file_gives_no_records() {
        let f = file_with(&[]);
        assert!(load_features(f.path(), None).unwrap().is_empty());
    }

    #[test]
    fn records_in_file_order() {
        let a = token(10.0, 10.0, 12);
        let b = token(-10.0, 50.0, 12);
        let f = file_with(&[
            format!(r#"{{"token":"{a}","counts":[1,2]}}"#),
            format!(r#"{{"token":"{b}","counts":[3,4]}}"#),
        ]);
        let recs = load_features(f.path(), None).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].cell.to_token(), a);
        assert_eq!(recs[1].counts, vec![3.0, 4.0]);
    }

    #[test]
    fn ragged_counts_name_the_line() {
        let a = token(10.0, 10.0, 12);
        let counts = vec!["1"; 115].join(",");
        let f = file_with(&[format!(r#"{{"token":"{a}","counts":[{counts}]}}"#)]);
        match load_features(f.path(), Some(116)) {
            Err(Error::RaggedCounts { line: 1, expected: 116, found: 115, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn validation_errors() {
        let a = token(10.0, 10.0, 12);
        let coarse = token(10.0, 10.0, 8);
        let dup = file_with(&[
            format!(r#"{{"token":"{a}","counts":[1]}}"#),
            format!(r#"{{"token":"{a}","counts":[1]}}"#),
        ]);
        assert!(matches!(load_features(dup.path(), None), Err(Error::DuplicateToken(_))));
        let mixed = file_with(&[
            format!(r#"{{"token":"{a}","counts":[1]}}"#),
            format!(r#"{{"token":"{coarse}","counts":[1]}}"#),
        ]);
        assert!(matches!(load_features(mixed.path(), None), Err(Error::MixedLevels(12, 8))));
        let malformed = file_with(&[format!(r#"{{"token":"{a}","counts":[1]}}"#), "{not json".into()]);
        assert!(matches!(load_features(malformed.path(), None), Err(Error::Parse { line: 2, .. })));
        let negative = file_with(&[format!(r#"{{"token":"{a}","counts":[-1]}}"#)]);
        assert!(matches!(load_features(negative.path(), None), Err(Error::Parse { line: 1, .. })));
        let bad_token = file_with(&[r#"{"token":"g1","counts":[1]}"#.into()]);
        assert!(matches!(load_features(bad_token.path(), None), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn stats_small_cases() {
        let one = fit_rows(&[&[1.0, 5.0]]).unwrap();
        assert_eq!(one.mean, vec![1.0, 5.0]);
        assert_eq!(one.variance, vec![0.0, 0.0]);
        let two = fit_rows(&[&[0.0, 0.0, 0.0], &[2.0, 2.0, 2.0]]).unwrap();
        assert_eq!(two.mean, vec![1.0; 3]);
        assert_eq!(two.variance, vec![1.0; 3]);
        assert!(matches!(fit_rows(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn norm_edge_cases() {
        let stats = NormStats { mean: vec![2.0, 3.0], variance: vec![4.0, 0.0], count: 10 };
        assert_eq!(apply_norm(&[2.0, 3.0], &stats, DEFAULT_NORM_EPS).unwrap(), vec![0.0, 0.0]);
        let z = apply_norm(&[4.0, 4.0], &stats, DEFAULT_NORM_EPS).unwrap();
        assert_eq!(z[0], 1.0);
        assert!((z[1] - 1.0 / 1e-3).abs() < 1e-9 && z[1].is_finite());
        assert!(matches!(apply_norm(&[1.0], &stats, 1e-6), Err(Error::DimensionMismatch { .. })));
    }
}
