use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::model::encode_visible;
use super::{MaeParams, MaskPlan};
use crate::error::{Error, Result};
use crate::ingest::{apply_norm, CellFeatures, NormStats, DEFAULT_NORM_EPS};
use crate::io::{write_atomic, ByteReader};
use crate::par;
use crate::raster::{group_by_parent, rasterize_image, slot_cells, RasterDataset};
use crate::s2geom::CellId;

pub const MAGIC: &[u8; 4] = b"S2VE";
pub const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedMode {
    /// Linear patch projection only.
    #[default]
    Patch,
    /// Full encoder over the unmasked image, per-patch outputs.
    Contextual,
}

impl fmt::Display for EmbedMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EmbedMode::Patch => "patch",
            EmbedMode::Contextual => "contextual",
        })
    }
}

impl FromStr for EmbedMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "patch" => Ok(EmbedMode::Patch),
            "contextual" => Ok(EmbedMode::Contextual),
            other => Err(Error::invalid(format!("unknown embed mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub checkpoint_hash: String,
}

/// Cell id to vector map, all vectors of length `dim`, ordered by raw id.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    entries: BTreeMap<CellId, Vec<f32>>,
    pub provenance: Provenance,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        EmbeddingTable { dim, entries: BTreeMap::new(), provenance: Provenance::default() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, cell: CellId, v: Vec<f32>) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, found: v.len() });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("embedding of {cell}")));
        }
        if let Some(first) = self.entries.keys().next() {
            if first.level() != cell.level() {
                return Err(Error::MixedLevels(first.level(), cell.level()));
            }
        }
        self.entries.insert(cell, v);
        Ok(())
    }

    pub fn get(&self, cell: CellId) -> Option<&[f32]> {
        self.entries.get(&cell).map(Vec::as_slice)
    }

    pub fn contains(&self, cell: CellId) -> bool {
        self.entries.contains_key(&cell)
    }

    pub fn iter(&self) -> impl Iterator<Item = (CellId, &[f32])> {
        self.entries.iter().map(|(c, v)| (*c, v.as_slice()))
    }

    pub fn cells(&self) -> impl Iterator<Item = CellId> + '_ {
        self.entries.keys().copied()
    }

    /// Level shared by all keys.
    pub fn level(&self) -> Option<u8> {
        self.entries.keys().next().map(|c| c.level())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(18 + self.entries.len() * (8 + 4 * self.dim));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (cell, v) in &self.entries {
            out.extend_from_slice(&cell.raw().to_le_bytes());
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = ByteReader::new(bytes, origin);
        r.expect_magic(MAGIC)?;
        let version = r.u16()?;
        if version != VERSION {
            return Err(r.error(format!("unsupported version {version}")));
        }
        let dim = r.u32()? as usize;
        let count = r.u64()?;
        let mut table = EmbeddingTable::new(dim);
        let mut prev = 0u64;
        for _ in 0..count {
            let raw = r.u64()?;
            if raw <= prev {
                return Err(r.error(format!("entries not strictly sorted at id {raw:#x}")));
            }
            prev = raw;
            let cell = CellId::from_raw(raw).map_err(|e| r.error(e.to_string()))?;
            let v = (0..dim).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
            table.insert(cell, v).map_err(|e| r.error(e.to_string()))?;
        }
        r.finish()?;
        Ok(table)
    }

    /// Writes the table and its provenance sidecar (`<path>.json`).
    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())?;
        write_atomic(&provenance_path(path), serde_json::to_string_pretty(&self.provenance)?.as_bytes())
    }

    /// Reads a table; the provenance sidecar is optional.
    pub fn read(path: &Path) -> Result<Self> {
        let mut table = Self::decode(&std::fs::read(path)?, path)?;
        let side = provenance_path(path);
        if side.exists() {
            table.provenance = serde_json::from_slice(&std::fs::read(side)?)?;
        }
        Ok(table)
    }
}

fn provenance_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// One embedding per cell: the patch projection `W_p^T z + b_p` of the
/// cell's normalized features `z`. No positional term, no encoder blocks.
pub fn extract_embeddings(records: &[CellFeatures], stats: &NormStats, params: &MaeParams<f32>) -> Result<EmbeddingTable> {
    let (w, b) = params.patch_projection();
    let (f, d) = (w.shape()[0], w.shape()[1]);
    if stats.dim() != f {
        return Err(Error::DimensionMismatch { expected: f, found: stats.dim() });
    }
    let rows = par::try_map(records, |rec| -> Result<Vec<f32>> {
        if rec.counts.len() != f {
            return Err(Error::DimensionMismatch { expected: f, found: rec.counts.len() });
        }
        let z = apply_norm(&rec.counts, stats, DEFAULT_NORM_EPS)?;
        let mut out: Vec<f64> = b.data().iter().map(|&x| x as f64).collect();
        for (k, &zk) in z.iter().enumerate() {
            for (o, &wk) in out.iter_mut().zip(w.row(k)) {
                *o += zk * wk as f64;
            }
        }
        Ok(out.into_iter().map(|x| x as f32).collect())
    })?;
    let mut table = EmbeddingTable::new(d);
    for (rec, v) in records.iter().zip(rows) {
        table.insert(rec.cell, v)?;
    }
    Ok(table)
}

/// Contextual embeddings: each parent image is rasterized and encoded with
/// no masking and no dropout; present cells take their slot's output.
pub fn extract_contextual(
    records: &[CellFeatures],
    stats: &NormStats,
    params: &MaeParams<f32>,
    image_level: u8,
) -> Result<EmbeddingTable> {
    let cfg = &params.config;
    let groups: Vec<_> = group_by_parent(records, image_level)?.into_iter().collect();
    let Some(patch_level) = records.first().map(|r| r.cell.level()) else {
        return Ok(EmbeddingTable::new(cfg.encoder_dim));
    };
    if 1usize << (patch_level - image_level) != cfg.grid {
        return Err(Error::invalid(format!("levels {image_level}/{patch_level} do not give grid {}", cfg.grid)));
    }
    let per_parent = par::try_map(&groups, |(parent, kids)| -> Result<Vec<(CellId, Vec<f32>)>> {
        let img = rasterize_image(*parent, kids, stats, patch_level)?;
        let out = encode_visible(params, &img.patches(cfg.feature_dim), &MaskPlan::all_visible(cfg.patches()), None)?;
        let cells = slot_cells(*parent, patch_level)?;
        Ok((0..cfg.patches()).filter(|&s| img.presence[s]).map(|s| (cells[s], out.row(s).to_vec())).collect())
    })?;
    let mut table = EmbeddingTable::new(cfg.encoder_dim);
    for (cell, v) in per_parent.into_iter().flatten() {
        table.insert(cell, v)?;
    }
    Ok(table)
}

/// Image-level embeddings keyed by parent: mean of unmasked encoder outputs.
pub fn image_embeddings(dataset: &RasterDataset, params: &MaeParams<f32>) -> Result<EmbeddingTable> {
    let cfg = &params.config;
    let rows = par::try_map(&dataset.images, |img| -> Result<Vec<f32>> {
        let out = encode_visible(params, &img.patches(cfg.feature_dim), &MaskPlan::all_visible(cfg.patches()), None)?;
        let mut mean = vec![0.0f64; cfg.encoder_dim];
        for r in 0..out.rows() {
            for (m, &x) in mean.iter_mut().zip(out.row(r)) {
                *m += x as f64;
            }
        }
        Ok(mean.into_iter().map(|m| (m / out.rows() as f64) as f32).collect())
    })?;
    let mut table = EmbeddingTable::new(cfg.encoder_dim);
    for (img, v) in dataset.images.iter().zip(rows) {
        table.insert(img.parent, v)?;
    }
    Ok(table)
}
