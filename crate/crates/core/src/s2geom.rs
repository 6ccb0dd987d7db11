//! S2-compatible hierarchical cell identifiers.
//!
//! Ids use the reference S2 layout: 3 face bits, 2 bits of Hilbert-curve
//! child position per level, then a single trailing 1 bit. Points are
//! projected onto the cube with the quadratic ST/UV transform, so ids and
//! tokens interoperate with datasets keyed by the reference library.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub const MAX_LEVEL: u8 = 30;
const POS_BITS: u32 = 61;
const MAX_SIZE: u32 = 1 << MAX_LEVEL;
const SWAP_MASK: u8 = 0x01;
const INVERT_MASK: u8 = 0x02;

/// Mean Earth radius in kilometres, used for cell areas.
pub const EARTH_RADIUS_KM: f64 = 6371.01;

// Hilbert curve tables, indexed by [orientation][ij] or [orientation][pos],
// where ij = (i_bit << 1) | j_bit.
const IJ_TO_POS: [[u8; 4]; 4] = [[0, 1, 3, 2], [0, 3, 1, 2], [2, 3, 1, 0], [2, 1, 3, 0]];
const POS_TO_IJ: [[u8; 4]; 4] = [[0, 1, 3, 2], [0, 2, 3, 1], [3, 2, 0, 1], [3, 1, 0, 2]];
const POS_TO_ORIENTATION: [u8; 4] = [SWAP_MASK, 0, 0, INVERT_MASK | SWAP_MASK];

/// A point on the sphere in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatLng {
    pub lat: f64,
    pub lng: f64,
}

impl LatLng {
    /// Validates the coordinates; a longitude of exactly 180 maps to -180.
    pub fn new(lat: f64, lng: f64) -> Result<Self> {
        if !lat.is_finite() || !lng.is_finite() || !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lng)
        {
            return Err(Error::InvalidLatLng { lat, lng });
        }
        let lng = if lng == 180.0 { -180.0 } else { lng };
        Ok(LatLng { lat, lng })
    }

    fn to_xyz(self) -> [f64; 3] {
        let phi = self.lat.to_radians();
        let theta = self.lng.to_radians();
        let cos_phi = phi.cos();
        [theta.cos() * cos_phi, theta.sin() * cos_phi, phi.sin()]
    }

    fn from_xyz(p: [f64; 3]) -> Self {
        let lat = p[2].atan2((p[0] * p[0] + p[1] * p[1]).sqrt()).to_degrees();
        let mut lng = p[1].atan2(p[0]).to_degrees();
        if lng >= 180.0 {
            lng -= 360.0;
        }
        LatLng { lat, lng }
    }
}

/// Row/column of a child cell inside its ancestor's G x G grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GridPos {
    pub row: u32,
    pub col: u32,
}

/// 64-bit S2 cell identifier.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellId(u64);

#[inline]
fn lsb_for_level(level: u8) -> u64 {
    1u64 << (2 * (MAX_LEVEL - level) as u32)
}

fn check_level(level: u8) -> Result<()> {
    if level > MAX_LEVEL {
        Err(Error::LevelOutOfRange(level as i64))
    } else {
        Ok(())
    }
}

fn st_to_uv(s: f64) -> f64 {
    if s >= 0.5 {
        (1.0 / 3.0) * (4.0 * s * s - 1.0)
    } else {
        (1.0 / 3.0) * (1.0 - 4.0 * (1.0 - s) * (1.0 - s))
    }
}

fn uv_to_st(u: f64) -> f64 {
    if u >= 0.0 {
        0.5 * (1.0 + 3.0 * u).sqrt()
    } else {
        1.0 - 0.5 * (1.0 - 3.0 * u).sqrt()
    }
}

fn st_to_ij(s: f64) -> u32 {
    ((MAX_SIZE as f64 * s).floor() as i64).clamp(0, MAX_SIZE as i64 - 1) as u32
}

fn face_of(p: [f64; 3]) -> u8 {
    let mut face = 0u8;
    let mut value = p[0];
    if p[1].abs() > p[0].abs() {
        face = 1;
        value = p[1];
    }
    if p[2].abs() > value.abs() {
        face = 2;
        value = p[2];
    }
    if value < 0.0 {
        face += 3;
    }
    face
}

fn xyz_to_face_uv(p: [f64; 3]) -> (u8, f64, f64) {
    let [x, y, z] = p;
    let face = face_of(p);
    let (u, v) = match face {
        0 => (y / x, z / x),
        1 => (-x / y, z / y),
        2 => (-x / z, -y / z),
        3 => (z / x, y / x),
        4 => (z / y, -x / y),
        _ => (-y / z, -x / z),
    };
    (face, u, v)
}

fn face_uv_to_xyz(face: u8, u: f64, v: f64) -> [f64; 3] {
    match face {
        0 => [1.0, u, v],
        1 => [-u, 1.0, v],
        2 => [-u, -v, 1.0],
        3 => [-1.0, -v, -u],
        4 => [v, -1.0, -u],
        _ => [v, u, -1.0],
    }
}

fn normalize(p: [f64; 3]) -> [f64; 3] {
    let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
    [p[0] / n, p[1] / n, p[2] / n]
}

impl CellId {
    /// Wraps a raw id after checking the face and trailing-bit invariants.
    pub fn from_raw(raw: u64) -> Result<Self> {
        let id = CellId(raw);
        if id.is_valid() {
            Ok(id)
        } else {
            Err(Error::InvalidCell(raw))
        }
    }

    pub fn raw(self) -> u64 {
        self.0
    }

    fn is_valid(self) -> bool {
        let lsb = self.0 & self.0.wrapping_neg();
        self.face() < 6 && (lsb & 0x1555_5555_5555_5555) != 0
    }

    pub fn from_face(face: u8) -> Result<Self> {
        if face > 5 {
            return Err(Error::invalid(format!("face {face} out of range 0..=5")));
        }
        Ok(CellId(((face as u64) << POS_BITS) | lsb_for_level(0)))
    }

    /// Leaf cell at leaf coordinates (i, j) on `face`.
    fn from_face_ij(face: u8, i: u32, j: u32) -> Self {
        let mut orientation = face & SWAP_MASK;
        let mut pos = 0u64;
        for k in (0..MAX_LEVEL as u32).rev() {
            let ij = ((((i >> k) & 1) << 1) | ((j >> k) & 1)) as usize;
            let p = IJ_TO_POS[orientation as usize][ij];
            pos = (pos << 2) | p as u64;
            orientation ^= POS_TO_ORIENTATION[p as usize];
        }
        CellId(((face as u64) << POS_BITS) | (pos << 1) | 1)
    }

    /// The level-`level` cell containing `p`.
    pub fn from_latlng(p: LatLng, level: u8) -> Result<Self> {
        check_level(level)?;
        let (face, u, v) = xyz_to_face_uv(p.to_xyz());
        let leaf = CellId::from_face_ij(face, st_to_ij(uv_to_st(u)), st_to_ij(uv_to_st(v)));
        leaf.parent(level)
    }

    pub fn face(self) -> u8 {
        (self.0 >> POS_BITS) as u8
    }

    pub fn level(self) -> u8 {
        MAX_LEVEL - (self.0.trailing_zeros() / 2) as u8
    }

    pub fn is_leaf(self) -> bool {
        self.0 & 1 == 1
    }

    pub fn parent(self, level: u8) -> Result<Self> {
        check_level(level)?;
        let own = self.level();
        if level > own {
            return Err(Error::LevelTooFine { requested: level, level: own });
        }
        let lsb = lsb_for_level(level);
        Ok(CellId((self.0 & !(lsb - 1)) | lsb))
    }

    /// The four children in Hilbert-curve order.
    pub fn children(self) -> Result<[CellId; 4]> {
        if self.is_leaf() {
            return Err(Error::LeafCell);
        }
        let lsb = self.0 & self.0.wrapping_neg();
        let c0 = self.0 - lsb + (lsb >> 2);
        let step = lsb >> 1;
        Ok([CellId(c0), CellId(c0 + step), CellId(c0 + 2 * step), CellId(c0 + 3 * step)])
    }

    /// All descendants at `level`, in Hilbert-curve order.
    pub fn descendants(self, level: u8) -> Result<Vec<CellId>> {
        check_level(level)?;
        let own = self.level();
        if level < own {
            return Err(Error::invalid(format!("descendant level {level} is coarser than cell level {own}")));
        }
        let lsb = self.0 & self.0.wrapping_neg();
        let child_lsb = lsb_for_level(level);
        let first = self.0 - lsb + child_lsb;
        let count = 1u64 << (2 * (level - own) as u32);
        Ok((0..count).map(|k| CellId(first + 2 * child_lsb * k)).collect())
    }

    pub fn contains(self, other: CellId) -> bool {
        other.level() >= self.level() && other.parent(self.level()).map(|p| p == self).unwrap_or(false)
    }

    /// Face and leaf (i, j) of the cell's lower-left corner, plus the Hilbert
    /// orientation at the cell's own level.
    fn face_ij_min(self) -> (u8, u32, u32, u8) {
        let face = self.face();
        let level = self.level();
        let mut orientation = face & SWAP_MASK;
        let (mut i, mut j) = (0u32, 0u32);
        for k in 1..=level {
            let p = ((self.0 >> (POS_BITS - 2 * k as u32)) & 3) as usize;
            let ij = POS_TO_IJ[orientation as usize][p];
            i = (i << 1) | (ij >> 1) as u32;
            j = (j << 1) | (ij & 1) as u32;
            orientation ^= POS_TO_ORIENTATION[p];
        }
        let shift = (MAX_LEVEL - level) as u32;
        // shifting by 30 leaves 0 for face cells, matching the loop above
        (face, i << shift, j << shift, orientation)
    }

    /// Leaf (i, j) of the cell's lower-left corner on its face.
    pub fn ij_min(self) -> (u32, u32) {
        let (_, i, j, _) = self.face_ij_min();
        (i, j)
    }

    /// Edge length of the cell in leaf-cell units.
    pub fn size_ij(self) -> u32 {
        1u32 << (MAX_LEVEL - self.level()) as u32
    }

    fn center_xyz(self) -> [f64; 3] {
        let (face, i, j, _) = self.face_ij_min();
        let size = self.size_ij() as u64;
        let si = 2 * i as u64 + size;
        let ti = 2 * j as u64 + size;
        let max_siti = (1u64 << 31) as f64;
        let u = st_to_uv(si as f64 / max_siti);
        let v = st_to_uv(ti as f64 / max_siti);
        normalize(face_uv_to_xyz(face, u, v))
    }

    /// Center of the cell (the point where it splits into its children).
    pub fn center(self) -> LatLng {
        LatLng::from_xyz(self.center_xyz())
    }

    /// Unit vectors of the four corners, counter-clockwise from (u_lo, v_lo).
    pub fn vertices(self) -> [[f64; 3]; 4] {
        let (face, i, j, _) = self.face_ij_min();
        let size = self.size_ij() as u64;
        let to_uv = |k: u64| st_to_uv(k as f64 / MAX_SIZE as f64);
        let (u0, u1) = (to_uv(i as u64), to_uv(i as u64 + size));
        let (v0, v1) = (to_uv(j as u64), to_uv(j as u64 + size));
        [
            normalize(face_uv_to_xyz(face, u0, v0)),
            normalize(face_uv_to_xyz(face, u1, v0)),
            normalize(face_uv_to_xyz(face, u1, v1)),
            normalize(face_uv_to_xyz(face, u0, v1)),
        ]
    }

    /// Exact spherical area of the cell in km².
    pub fn area_km2(self) -> f64 {
        let [a, b, c, d] = self.vertices();
        (triangle_area(a, b, c) + triangle_area(a, c, d)) * EARTH_RADIUS_KM * EARTH_RADIUS_KM
    }

    /// Reference-format token: lowercase hex with trailing zero nibbles removed.
    pub fn to_token(self) -> String {
        let s = format!("{:016x}", self.0);
        s.trim_end_matches('0').to_string()
    }

    pub fn from_token(token: &str) -> Result<Self> {
        let bad = || Error::InvalidToken(token.to_string());
        if token.is_empty() || token.len() > 16 || !token.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(bad());
        }
        let value = u64::from_str_radix(token, 16).map_err(|_| bad())?;
        let raw = value << (4 * (16 - token.len()) as u32);
        CellId::from_raw(raw).map_err(|_| bad())
    }

    /// Position of this cell inside the G x G grid of `ancestor`, where
    /// G = 2^(level - ancestor level). Row 0 is the ancestor's largest-j edge,
    /// column 0 its smallest-i edge.
    pub fn grid_position(self, ancestor: CellId) -> Result<GridPos> {
        if !ancestor.contains(self) {
            return Err(Error::NotDescendant { child: self.to_token(), parent: ancestor.to_token() });
        }
        let delta = (self.level() - ancestor.level()) as u32;
        let g = 1u32 << delta;
        let (ci, cj) = self.ij_min();
        let (pi, pj) = ancestor.ij_min();
        let size = self.size_ij();
        let i_rel = (ci - pi) / size;
        let j_rel = (cj - pj) / size;
        Ok(GridPos { row: g - 1 - j_rel, col: i_rel })
    }
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

// Van Oosterom-Strackee solid angle of a spherical triangle.
fn triangle_area(a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> f64 {
    let num = dot(a, cross(b, c)).abs();
    let den = 1.0 + dot(a, b) + dot(b, c) + dot(c, a);
    2.0 * num.atan2(den)
}

impl fmt::Display for CellId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_token())
    }
}

impl fmt::Debug for CellId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CellId({})", self.to_token())
    }
}

impl FromStr for CellId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CellId::from_token(s)
    }
}

impl Serialize for CellId {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_token())
    }
}

impl<'de> Deserialize<'de> for CellId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        CellId::from_token(&s).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ll(lat: f64, lng: f64) -> LatLng {
        LatLng::new(lat, lng).unwrap()
    }

    #[test]
    fn origin_face_cell() {
        let c = CellId::from_latlng(ll(0.0, 0.0), 0).unwrap();
        assert_eq!(c.face(), 0);
        assert_eq!(c.raw(), 1u64 << 60);
        let center = c.center();
        assert_eq!((center.lat, center.lng), (0.0, 0.0));
    }

    #[test]
    fn face_cell_levels_and_tokens() {
        for face in 0..6u8 {
            let c = CellId::from_face(face).unwrap();
            assert_eq!(c.raw(), ((face as u64) << 61) | (1 << 60));
            assert_eq!(c.level(), 0);
        }
        assert_eq!(CellId::from_face(1).unwrap().to_token(), "3");
        assert!(CellId::from_face(6).is_err());
    }

    #[test]
    fn invalid_raw_ids() {
        assert!(CellId::from_raw(0).is_err());
        // lowest set bit at an odd position
        assert!(CellId::from_raw(2).is_err());
        assert!(CellId::from_raw((6u64 << 61) | (1 << 60)).is_err());
    }

    #[test]
    fn token_errors() {
        for bad in ["", "g1", "X", "00000000000000000", "0"] {
            assert!(CellId::from_token(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn level_range_checked() {
        assert!(matches!(CellId::from_latlng(ll(1.0, 1.0), 31), Err(Error::LevelOutOfRange(31))));
        let c = CellId::from_latlng(ll(1.0, 1.0), 8).unwrap();
        assert!(matches!(c.parent(9), Err(Error::LevelTooFine { .. })));
        assert_eq!(c.parent(8).unwrap(), c);
    }

    #[test]
    fn leaf_has_no_children() {
        let leaf = CellId::from_latlng(ll(10.0, 20.0), 30).unwrap();
        assert!(leaf.is_leaf());
        assert!(matches!(leaf.children(), Err(Error::LeafCell)));
    }

    #[test]
    fn children_round_trip() {
        let c = CellId::from_latlng(ll(37.0, -122.0), 8).unwrap();
        let kids = c.children().unwrap();
        for (n, k) in kids.iter().enumerate() {
            assert_eq!(k.level(), 9);
            assert_eq!(k.parent(8).unwrap(), c);
            for other in &kids[n + 1..] {
                assert_ne!(k, other);
            }
        }
        assert_eq!(c.descendants(12).unwrap().len(), 256);
    }

    #[test]
    fn longitude_180_wraps() {
        let p = ll(0.0, 180.0);
        assert_eq!(p.lng, -180.0);
        assert!(LatLng::new(91.0, 0.0).is_err());
        assert!(LatLng::new(0.0, f64::NAN).is_err());
    }

    #[test]
    fn grid_corner_convention() {
        let parent = CellId::from_latlng(ll(40.0, -100.0), 8).unwrap();
        let (pi, pj) = parent.ij_min();
        let g = 16u32;
        let child_size = 1u32 << 18;
        let corner = CellId::from_face_ij(parent.face(), pi, pj + (g - 1) * child_size).parent(12).unwrap();
        assert_eq!(corner.grid_position(parent).unwrap(), GridPos { row: 0, col: 0 });
        let other = CellId::from_latlng(ll(-40.0, 100.0), 12).unwrap();
        assert!(other.grid_position(parent).is_err());
    }

    #[test]
    fn grid_bijection() {
        let parent = CellId::from_latlng(ll(51.5, -0.1), 8).unwrap();
        let mut seen = vec![false; 256];
        for c in parent.descendants(12).unwrap() {
            let pos = c.grid_position(parent).unwrap();
            let slot = (pos.row * 16 + pos.col) as usize;
            assert!(!seen[slot]);
            seen[slot] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }
}
