use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::s2geom::{CellId, LatLng};
use crate::synth::GeoBox;

/// Index sets into a cell list.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    #[default]
    Random,
    Geographic,
}

impl std::fmt::Display for SplitKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SplitKind::Random => "random",
            SplitKind::Geographic => "geographic",
        })
    }
}

impl std::str::FromStr for SplitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(SplitKind::Random),
            "geographic" => Ok(SplitKind::Geographic),
            other => Err(Error::invalid(format!("unknown split kind {other:?}"))),
        }
    }
}

/// Lat/lng polygon; `ring` holds `[lat, lng]` vertices, implicitly closed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub ring: Vec<[f64; 2]>,
}

impl Region {
    pub fn from_box(b: &GeoBox) -> Self {
        Region {
            ring: vec![[b.lat_min, b.lng_min], [b.lat_min, b.lng_max], [b.lat_max, b.lng_max], [b.lat_max, b.lng_min]],
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r: Region = serde_json::from_slice(&std::fs::read(path)?)?;
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ring.len() < 3 {
            return Err(Error::invalid(format!("region ring has {} vertices, need at least 3", self.ring.len())));
        }
        if self.ring.iter().any(|v| !v[0].is_finite() || !v[1].is_finite() || v[0].abs() > 90.0 || v[1].abs() > 180.0) {
            return Err(Error::invalid("region vertex out of range"));
        }
        let area2: f64 = (0..self.ring.len())
            .map(|i| {
                let (a, b) = (self.ring[i], self.ring[(i + 1) % self.ring.len()]);
                a[1] * b[0] - b[1] * a[0]
            })
            .sum();
        if area2 == 0.0 {
            return Err(Error::invalid("region ring encloses no area"));
        }
        Ok(())
    }

    /// Even-odd ray casting in the (lng, lat) plane.
    pub fn contains(&self, p: LatLng) -> bool {
        let (x, y) = (p.lng, p.lat);
        let n = self.ring.len();
        let mut inside = false;
        let mut j = n - 1;
        for i in 0..n {
            let (yi, xi) = (self.ring[i][0], self.ring[i][1]);
            let (yj, xj) = (self.ring[j][0], self.ring[j][1]);
            if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                inside = !inside;
            }
            j = i;
        }
        inside
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub kind: SplitKind,
    pub fractions: [f64; 3],
    pub region: Option<Region>,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { kind: SplitKind::Random, fractions: [0.6, 0.2, 0.2], region: None, seed: 0 }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        check_fractions(&self.fractions)?;
        match (&self.kind, &self.region) {
            (SplitKind::Geographic, None) => Err(Error::invalid("geographic split needs a holdout region")),
            (_, Some(r)) => r.validate(),
            _ => Ok(()),
        }
    }
}

fn check_fractions(f: &[f64; 3]) -> Result<()> {
    if f.iter().any(|x| !(*x > 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split fractions {f:?} must be positive and sum to 1")));
    }
    Ok(())
}

/// Shuffles `0..n` and cuts it at `round(f0 n)` and `round((f0 + f1) n)`.
/// Each side is sorted ascending.
pub fn split_random(n: usize, fractions: [f64; 3], seed: u64) -> Result<Split> {
    check_fractions(&fractions)?;
    if n < 3 {
        return Err(Error::invalid(format!("random split needs at least 3 cells, got {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let a = ((fractions[0] * n as f64).round() as usize).clamp(1, n - 2);
    let b = (((fractions[0] + fractions[1]) * n as f64).round() as usize).clamp(a + 1, n - 1);
    let part = |r: std::ops::Range<usize>| {
        let mut v = idx[r].to_vec();
        v.sort_unstable();
        v
    };
    Ok(Split { train: part(0..a), val: part(a..b), test: part(b..n) })
}

/// Holds out every cell whose center lies in `region`; the rest is shuffled
/// and split 75/25 into train and validation.
pub fn split_geographic(cells: &[CellId], region: &Region, seed: u64) -> Result<Split> {
    region.validate()?;
    let (test, mut rest): (Vec<usize>, Vec<usize>) = (0..cells.len()).partition(|&i| region.contains(cells[i].center()));
    if test.is_empty() {
        return Err(Error::invalid("holdout region contains no cell center"));
    }
    if rest.len() < 2 {
        return Err(Error::invalid("holdout region leaves fewer than 2 cells for training and validation"));
    }
    rest.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = ((0.75 * rest.len() as f64).round() as usize).clamp(1, rest.len() - 1);
    let mut train = rest[..cut].to_vec();
    let mut val = rest[cut..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    Ok(Split { train, val, test })
}
