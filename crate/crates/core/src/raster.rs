//! Rasterization of patch-level cells into image-level grids.
//!
//! Every image-level (parent) cell becomes a G x G grid, G = 2^(l - l'), of
//! normalized feature vectors placed at each child's [`CellId::grid_position`].
//! Slots without an input cell hold the normalized zero-count vector and are
//! flagged absent in the presence mask.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::ingest::{apply_norm, invert_norm, load_features, CellFeatures, NormStats, DEFAULT_NORM_EPS};
use crate::io::{write_atomic, ByteReader};
use crate::numerics::{Scalar, Tensor};
use crate::par;
use crate::s2geom::{CellId, MAX_LEVEL};

pub const MAGIC: &[u8; 4] = b"S2VR";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct RasterImage {
    pub parent: CellId,
    /// Row-major (row, col, feature) values, G * G * F long.
    pub grid: Vec<f32>,
    /// Row-major slot presence, G * G long.
    pub presence: Vec<bool>,
}

impl RasterImage {
    /// The grid as a `[G*G, F]` tensor, one row per slot.
    pub fn patches<T: Scalar>(&self, feature_dim: usize) -> Tensor<T> {
        let slots = self.presence.len();
        let data = self.grid.iter().map(|&x| T::of(x as f64)).collect();
        Tensor::new(&[slots, feature_dim], data).expect("grid length matches slots * F")
    }

    pub fn slot(&self, index: usize, feature_dim: usize) -> &[f32] {
        &self.grid[index * feature_dim..(index + 1) * feature_dim]
    }

    pub fn present_count(&self) -> usize {
        self.presence.iter().filter(|p| **p).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RasterDataset {
    pub image_level: u8,
    pub patch_level: u8,
    pub feature_dim: usize,
    pub images: Vec<RasterImage>,
}

impl RasterDataset {
    pub fn grid_side(&self) -> usize {
        1 << (self.patch_level - self.image_level)
    }

    pub fn slots(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Patch-level cell ids in slot order for one parent.
    pub fn slot_cells(&self, parent: CellId) -> Result<Vec<CellId>> {
        slot_cells(parent, self.patch_level)
    }
}

/// Descendants of `parent` at `level`, indexed by `row * G + col`.
pub fn slot_cells(parent: CellId, level: u8) -> Result<Vec<CellId>> {
    let kids = parent.descendants(level)?;
    let g = 1u32 << (level - parent.level());
    let mut out = vec![parent; kids.len()];
    for c in kids {
        let pos = c.grid_position(parent)?;
        out[(pos.row * g + pos.col) as usize] = c;
    }
    Ok(out)
}

fn check_levels(image_level: u8, patch_level: u8) -> Result<()> {
    if patch_level > MAX_LEVEL {
        return Err(Error::LevelOutOfRange(patch_level as i64));
    }
    if image_level >= patch_level {
        return Err(Error::invalid(format!("image level {image_level} must be coarser than patch level {patch_level}")));
    }
    Ok(())
}

/// Groups cells under their level-`image_level` ancestors, keyed and ordered
/// by parent id.
pub fn group_by_parent(cells: &[CellFeatures], image_level: u8) -> Result<BTreeMap<CellId, Vec<&CellFeatures>>> {
    let Some(first) = cells.first() else { return Ok(BTreeMap::new()) };
    let level = first.cell.level();
    check_levels(image_level, level)?;
    let mut groups: BTreeMap<CellId, Vec<&CellFeatures>> = BTreeMap::new();
    for c in cells {
        if c.cell.level() != level {
            return Err(Error::MixedLevels(level, c.cell.level()));
        }
        groups.entry(c.cell.parent(image_level)?).or_default().push(c);
    }
    Ok(groups)
}

/// Places each child's normalized features at its grid slot.
pub fn rasterize_image(
    parent: CellId,
    children: &[&CellFeatures],
    stats: &NormStats,
    patch_level: u8,
) -> Result<RasterImage> {
    check_levels(parent.level(), patch_level)?;
    let f = stats.dim();
    let g = 1usize << (patch_level - parent.level());
    let fill: Vec<f32> = apply_norm(&vec![0.0; f], stats, DEFAULT_NORM_EPS)?.into_iter().map(|x| x as f32).collect();
    let mut grid = Vec::with_capacity(g * g * f);
    for _ in 0..g * g {
        grid.extend_from_slice(&fill);
    }
    let mut presence = vec![false; g * g];
    for child in children {
        if child.cell.level() != patch_level {
            return Err(Error::MixedLevels(patch_level, child.cell.level()));
        }
        let pos = child.cell.grid_position(parent)?;
        let slot = pos.row as usize * g + pos.col as usize;
        if presence[slot] {
            return Err(Error::DuplicateToken(child.cell.to_token()));
        }
        presence[slot] = true;
        let z = apply_norm(&child.counts, stats, DEFAULT_NORM_EPS)?;
        for (dst, v) in grid[slot * f..(slot + 1) * f].iter_mut().zip(z) {
            *dst = v as f32;
        }
    }
    Ok(RasterImage { parent, grid, presence })
}

/// Builds the image dataset from in-memory records. Parents with fewer than
/// `min_present * G^2` children are dropped; images are ordered by parent id.
pub fn build_from_records(
    records: &[CellFeatures],
    stats: &NormStats,
    image_level: u8,
    patch_level: u8,
    min_present: f64,
) -> Result<RasterDataset> {
    if !(0.0..=1.0).contains(&min_present) {
        return Err(Error::invalid(format!("min_present {min_present} outside [0, 1]")));
    }
    check_levels(image_level, patch_level)?;
    if let Some(first) = records.first() {
        if first.cell.level() != patch_level {
            return Err(Error::MixedLevels(patch_level, first.cell.level()));
        }
    }
    let groups: Vec<(CellId, Vec<&CellFeatures>)> = group_by_parent(records, image_level)?.into_iter().collect();
    let g = 1usize << (patch_level - image_level);
    let needed = (min_present * (g * g) as f64).ceil() as usize;
    let kept: Vec<&(CellId, Vec<&CellFeatures>)> = groups.iter().filter(|(_, kids)| kids.len() >= needed).collect();
    let images = par::try_map(&kept, |(parent, kids)| rasterize_image(*parent, kids, stats, patch_level))?;
    Ok(RasterDataset { image_level, patch_level, feature_dim: stats.dim(), images })
}

pub fn build_dataset(
    feature_path: &Path,
    stats: &NormStats,
    image_level: u8,
    patch_level: u8,
    min_present: f64,
) -> Result<RasterDataset> {
    let records = load_features(feature_path, Some(stats.dim()))?;
    build_from_records(&records, stats, image_level, patch_level, min_present)
}

/// Recovers raw counts from a present slot.
pub fn read_slot_counts(image: &RasterImage, slot: usize, stats: &NormStats) -> Result<Vec<f64>> {
    let z: Vec<f64> = image.slot(slot, stats.dim()).iter().map(|&x| x as f64).collect();
    invert_norm(&z, stats, DEFAULT_NORM_EPS)
}

pub fn encode(ds: &RasterDataset) -> Vec<u8> {
    let slots = ds.slots();
    let mut out = Vec::with_capacity(14 + ds.images.len() * (8 + slots * ds.feature_dim * 4 + slots.div_ceil(8)));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(ds.image_level);
    out.push(ds.patch_level);
    out.extend_from_slice(&(ds.feature_dim as u16).to_le_bytes());
    out.extend_from_slice(&(ds.images.len() as u32).to_le_bytes());
    for img in &ds.images {
        out.extend_from_slice(&img.parent.raw().to_le_bytes());
        for &x in &img.grid {
            out.extend_from_slice(&x.to_le_bytes());
        }
        let mut bits = vec![0u8; slots.div_ceil(8)];
        for (i, &p) in img.presence.iter().enumerate() {
            if p {
                bits[i / 8] |= 1 << (i % 8);
            }
        }
        out.extend_from_slice(&bits);
    }
    out
}

pub fn decode(bytes: &[u8], origin: &Path) -> Result<RasterDataset> {
    let mut r = ByteReader::new(bytes, origin);
    r.expect_magic(MAGIC)?;
    let version = r.u16()?;
    if version != VERSION {
        return Err(r.error(format!("unsupported version {version}")));
    }
    let image_level = r.u8()?;
    let patch_level = r.u8()?;
    check_levels(image_level, patch_level).map_err(|e| r.error(e.to_string()))?;
    let feature_dim = r.u16()? as usize;
    let count = r.u32()? as usize;
    let g = 1usize << (patch_level - image_level);
    let slots = g * g;
    let mut images = Vec::with_capacity(count);
    for _ in 0..count {
        let parent = CellId::from_raw(r.u64()?).map_err(|e| r.error(e.to_string()))?;
        if parent.level() != image_level {
            return Err(r.error(format!("parent {parent} is not at level {image_level}")));
        }
        let grid = (0..slots * feature_dim).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        let bits = r.bytes(slots.div_ceil(8))?;
        let presence = (0..slots).map(|i| bits[i / 8] & (1 << (i % 8)) != 0).collect();
        images.push(RasterImage { parent, grid, presence });
    }
    r.finish()?;
    Ok(RasterDataset { image_level, patch_level, feature_dim, images })
}

pub fn write(path: &Path, ds: &RasterDataset) -> Result<()> {
    write_atomic(path, &encode(ds))
}

pub fn read(path: &Path) -> Result<RasterDataset> {
    decode(&std::fs::read(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::fit_norm_stats;
    use crate::s2geom::LatLng;

    fn parent() -> CellId {
        CellId::from_latlng(LatLng::new(45.0, 7.0).unwrap(), 8).unwrap()
    }

    fn full_records(p: CellId) -> Vec<CellFeatures> {
        p.descendants(12)
            .unwrap()
            .into_iter()
            .enumerate()
            .map(|(k, cell)| CellFeatures { cell, counts: vec![k as f64, (k % 7) as f64, 3.0] })
            .collect()
    }

    #[test]
    fn zero_children_all_absent() {
        let stats = NormStats { mean: vec![1.0, 2.0], variance: vec![4.0, 1.0], count: 5 };
        let img = rasterize_image(parent(), &[], &stats, 12).unwrap();
        assert_eq!(img.present_count(), 0);
        for slot in 0..256 {
            assert_eq!(img.slot(slot, 2), &[-0.5f32, -2.0]);
        }
    }

    #[test]
    fn full_parent_is_dense_16x16() {
        let recs = full_records(parent());
        let stats = fit_norm_stats(&recs).unwrap();
        let ds = build_from_records(&recs, &stats, 8, 12, 0.0).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.grid_side(), 16);
        assert!(ds.images[0].presence.iter().all(|&p| p));
        let cells = ds.slot_cells(parent()).unwrap();
        for (slot, cell) in cells.iter().enumerate() {
            let rec = recs.iter().find(|r| r.cell == *cell).unwrap();
            let back = read_slot_counts(&ds.images[0], slot, &stats).unwrap();
            for (a, b) in back.iter().zip(&rec.counts) {
                assert!((a - b).abs() <= 1e-4 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn corner_child_lands_top_left() {
        let p = parent();
        let corner = slot_cells(p, 12).unwrap()[0];
        let rec = CellFeatures { cell: corner, counts: vec![1.0] };
        let stats = NormStats { mean: vec![0.0], variance: vec![1.0], count: 1 };
        let img = rasterize_image(p, &[&rec], &stats, 12).unwrap();
        assert!(img.presence[0]);
        assert_eq!(img.present_count(), 1);
        let (ci, cj) = corner.ij_min();
        let (pi, pj) = p.ij_min();
        assert_eq!(ci, pi);
        assert_eq!(cj - pj, 15 * corner.size_ij());
    }

    #[test]
    fn min_present_threshold() {
        let p = parent();
        let mut recs = full_records(p);
        let other = CellId::from_latlng(LatLng::new(-20.0, 120.0).unwrap(), 8).unwrap();
        recs.extend(other.descendants(12).unwrap().into_iter().take(10).map(|cell| CellFeatures { cell, counts: vec![1.0; 3] }));
        let stats = fit_norm_stats(&recs).unwrap();
        assert_eq!(build_from_records(&recs, &stats, 8, 12, 0.0).unwrap().len(), 2);
        let strict = build_from_records(&recs, &stats, 8, 12, 1.0).unwrap();
        assert_eq!(strict.len(), 1);
        assert_eq!(strict.images[0].parent, p);
    }

    #[test]
    fn level_errors() {
        let recs = full_records(parent());
        let stats = fit_norm_stats(&recs).unwrap();
        assert!(build_from_records(&recs, &stats, 12, 12, 0.0).is_err());
        assert!(build_from_records(&recs, &stats, 8, 12, 1.5).is_err());
        assert!(group_by_parent(&recs, 13).is_err());
        let stray = CellFeatures { cell: CellId::from_latlng(LatLng::new(0.0, 0.0).unwrap(), 12).unwrap(), counts: vec![0.0; 3] };
        assert!(rasterize_image(parent(), &[&stray], &stats, 12).is_err());
        let twice = [&recs[0], &recs[0]];
        assert!(matches!(rasterize_image(parent(), &twice, &stats, 12), Err(Error::DuplicateToken(_))));
    }

    #[test]
    fn binary_round_trip() {
        let mut recs = full_records(parent());
        recs.truncate(77);
        let stats = fit_norm_stats(&recs).unwrap();
        let ds = build_from_records(&recs, &stats, 8, 12, 0.0).unwrap();
        let bytes = encode(&ds);
        assert_eq!(&bytes[..4], b"S2VR");
        assert_eq!(bytes.len(), 14 + 8 + 256 * 3 * 4 + 32);
        assert_eq!(decode(&bytes, Path::new("mem")).unwrap(), ds);
        assert!(decode(&bytes[..bytes.len() - 3], Path::new("mem")).is_err());
    }
}
