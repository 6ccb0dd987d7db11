//! Synthetic built-environment data with known latent structure.
//!
//! Each of K latent fields is a sum of low-frequency plane waves over
//! (lat, lng). Feature counts are `round(intensity * softplus(M z + c))`,
//! optionally followed by nuisance counts drawn independently per cell;
//! targets are a linear function of the latents plus Gaussian noise, and
//! external embeddings are noisy linear images of a subset of the latents.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{write_features, CellFeatures};
use crate::io::write_atomic;
use crate::s2geom::{CellId, LatLng, MAX_LEVEL};

/// Latitude/longitude rectangle in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoBox {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lng_min: f64,
    pub lng_max: f64,
}

impl GeoBox {
    pub fn contains(&self, p: LatLng) -> bool {
        p.lat >= self.lat_min && p.lat < self.lat_max && p.lng >= self.lng_min && p.lng < self.lng_max
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lat_min < self.lat_max
            && self.lng_min < self.lng_max
            && self.lat_min >= -90.0
            && self.lat_max <= 90.0
            && self.lng_min >= -180.0
            && self.lng_max <= 180.0;
        if !ok {
            return Err(Error::invalid(format!("empty or out-of-range box {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub seed: u64,
    pub bbox: GeoBox,
    pub image_level: u8,
    pub level: u8,
    /// Latent field count K.
    pub latents: usize,
    /// Mean wavelength of the latent waves, degrees.
    pub smoothness: f64,
    pub waves: usize,
    pub feature_dim: usize,
    /// Extra features drawn independently per cell, unrelated to the latents.
    pub noise_features: usize,
    pub intensity: f64,
    pub target_noise: f64,
    /// Fraction of present cells that receive a label.
    pub label_fraction: f64,
    /// Fraction of cells omitted from the feature file.
    pub missing_fraction: f64,
    /// The first `hidden_latents` fields do not influence the features.
    pub hidden_latents: usize,
    /// External embeddings see only the first `external_latents` fields.
    pub external_latents: usize,
    pub external_dim: usize,
    pub external_noise: f64,
    /// Keep at most this many image-level parents (lowest ids first).
    pub max_images: Option<usize>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 0,
            bbox: GeoBox { lat_min: 40.0, lat_max: 43.0, lng_min: -80.0, lng_max: -76.0 },
            image_level: 8,
            level: 12,
            latents: 4,
            smoothness: 3.0,
            waves: 3,
            feature_dim: 16,
            noise_features: 0,
            intensity: 8.0,
            target_noise: 0.1,
            label_fraction: 1.0,
            missing_fraction: 0.0,
            hidden_latents: 0,
            external_latents: 4,
            external_dim: 32,
            external_noise: 0.1,
            max_images: None,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        self.bbox.validate()?;
        let bad = |m: &str| Err(Error::invalid(format!("synth spec: {m}")));
        if self.latents == 0 || self.waves == 0 || self.feature_dim == 0 || self.external_dim == 0 {
            return bad("latents, waves, feature_dim, external_dim must be positive");
        }
        if self.image_level >= self.level || self.level > MAX_LEVEL {
            return bad("need image_level < level <= 30");
        }
        if self.hidden_latents >= self.latents || self.external_latents == 0 || self.external_latents > self.latents {
            return bad("hidden_latents must leave a visible latent; external_latents in 1..=latents");
        }
        if !(self.smoothness > 0.0 && self.intensity > 0.0 && self.target_noise >= 0.0 && self.external_noise >= 0.0) {
            return bad("smoothness and intensity must be positive, noise non-negative");
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) || !(0.0..1.0).contains(&self.missing_fraction) {
            return bad("label_fraction in (0, 1], missing_fraction in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SynthData {
    pub features: Vec<CellFeatures>,
    /// True latent values, aligned with `features`.
    pub latent_values: Vec<Vec<f64>>,
    pub labels: Vec<(CellId, f64)>,
    pub external: Vec<(LatLng, Vec<f64>)>,
    pub parents: Vec<CellId>,
    /// R^2 of the least-squares fit of labels on the true latents.
    pub oracle_r2: f64,
}

struct Wave {
    dir: (f64, f64),
    wavelength: f64,
    phase: f64,
}

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Image-level cells whose centers fall inside the box, sorted by id.
pub fn parents_in_box(bbox: &GeoBox, image_level: u8) -> Result<Vec<CellId>> {
    bbox.validate()?;
    // finer than half the narrowest cell edge at this level
    let step = 27.0 / f64::from(1u32 << image_level.min(20));
    let mut found = BTreeSet::new();
    let mut lat = bbox.lat_min;
    while lat < bbox.lat_max {
        let mut lng = bbox.lng_min;
        while lng < bbox.lng_max {
            let c = CellId::from_latlng(LatLng::new(lat, lng)?, image_level)?;
            if bbox.contains(c.center()) {
                found.insert(c);
            }
            lng += step;
        }
        lat += step;
    }
    Ok(found.into_iter().collect())
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

/// In-sample R^2 of ordinary least squares of `y` on `[1, x]`.
pub fn ols_r2(x: &[Vec<f64>], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || y.len() < 2 {
        return Err(Error::invalid("ols needs matching inputs with at least two rows"));
    }
    let k = x[0].len() + 1;
    let mut xtx = vec![vec![0.0; k]; k];
    let mut xty = vec![0.0; k];
    for (row, &t) in x.iter().zip(y) {
        let full: Vec<f64> = std::iter::once(1.0).chain(row.iter().copied()).collect();
        for i in 0..k {
            xty[i] += full[i] * t;
            for j in 0..k {
                xtx[i][j] += full[i] * full[j];
            }
        }
    }
    let beta = solve(xtx, xty).ok_or_else(|| Error::invalid("singular design in ols"))?;
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let (mut ss_res, mut ss_tot) = (0.0, 0.0);
    for (row, &t) in x.iter().zip(y) {
        let pred = beta[0] + row.iter().zip(&beta[1..]).map(|(a, b)| a * b).sum::<f64>();
        ss_res += (t - pred).powi(2);
        ss_tot += (t - mean).powi(2);
    }
    Ok(1.0 - ss_res / ss_tot)
}

pub fn synth_generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k = spec.latents;

    let fields: Vec<Vec<Wave>> = (0..k)
        .map(|_| {
            (0..spec.waves)
                .map(|_| {
                    let theta = rng.random_range(0.0..2.0 * PI);
                    Wave {
                        dir: (theta.cos(), theta.sin()),
                        wavelength: spec.smoothness * rng.random_range(0.7..1.3),
                        phase: rng.random_range(0.0..2.0 * PI),
                    }
                })
                .collect()
        })
        .collect();
    let amp = (2.0 / spec.waves as f64).sqrt();
    let latent_at = |p: LatLng| -> Vec<f64> {
        fields
            .iter()
            .map(|waves| {
                amp * waves.iter().map(|w| (2.0 * PI * (p.lat * w.dir.0 + p.lng * w.dir.1) / w.wavelength + w.phase).sin()).sum::<f64>()
            })
            .collect()
    };

    let mixing: Vec<Vec<f64>> = (0..spec.feature_dim)
        .map(|_| (0..k).map(|j| if j < spec.hidden_latents { 0.0 } else { normal(&mut rng) }).collect())
        .collect();
    let offsets: Vec<f64> = (0..spec.feature_dim).map(|_| 0.5 * normal(&mut rng)).collect();
    let mut beta: Vec<f64> = (0..k).map(|_| normal(&mut rng)).collect();
    let norm = beta.iter().map(|b| b * b).sum::<f64>().sqrt();
    beta.iter_mut().for_each(|b| *b /= norm);
    let ext_map: Vec<Vec<f64>> = (0..spec.external_dim)
        .map(|_| (0..spec.external_latents).map(|_| normal(&mut rng) / (spec.external_latents as f64).sqrt()).collect())
        .collect();

    let mut parents = parents_in_box(&spec.bbox, spec.image_level)?;
    if let Some(max) = spec.max_images {
        parents.truncate(max);
    }
    if parents.is_empty() {
        return Err(Error::invalid("box contains no image-level cell center"));
    }

    let mut features = Vec::new();
    let mut latent_values = Vec::new();
    for parent in &parents {
        for cell in parent.descendants(spec.level)? {
            if rng.random::<f64>() < spec.missing_fraction {
                continue;
            }
            let z = latent_at(cell.center());
            let mut counts: Vec<f64> = mixing
                .iter()
                .zip(&offsets)
                .map(|(row, c)| {
                    let logit = row.iter().zip(&z).map(|(m, v)| m * v).sum::<f64>() + c;
                    (spec.intensity * softplus(logit)).round()
                })
                .collect();
            for _ in 0..spec.noise_features {
                counts.push((spec.intensity * softplus(normal(&mut rng))).round());
            }
            features.push(CellFeatures { cell, counts });
            latent_values.push(z);
        }
    }

    let mut order: Vec<usize> = (0..features.len()).collect();
    order.shuffle(&mut rng);
    let n_labels = ((spec.label_fraction * features.len() as f64).round() as usize).clamp(1, features.len());
    let mut chosen = order[..n_labels].to_vec();
    chosen.sort_unstable();

    let mut labels = Vec::with_capacity(n_labels);
    let mut external = Vec::with_capacity(n_labels);
    for &i in &chosen {
        let z = &latent_values[i];
        let y = 5.0 + beta.iter().zip(z).map(|(b, v)| b * v).sum::<f64>() + spec.target_noise * normal(&mut rng);
        labels.push((features[i].cell, y));
        let v = ext_map
            .iter()
            .map(|row| row.iter().zip(z).map(|(a, v)| a * v).sum::<f64>() + spec.external_noise * normal(&mut rng))
            .collect();
        external.push((features[i].cell.center(), v));
    }

    let xs: Vec<Vec<f64>> = chosen.iter().map(|&i| latent_values[i].clone()).collect();
    let ys: Vec<f64> = labels.iter().map(|l| l.1).collect();
    let oracle_r2 = if ys.len() > k + 1 { ols_r2(&xs, &ys)? } else { f64::NAN };
    Ok(SynthData { features, latent_values, labels, external, parents, oracle_r2 })
}

#[derive(Serialize)]
struct LabelRecord<'a> {
    token: &'a str,
    target: f64,
}

#[derive(Serialize)]
struct PointRecord<'a> {
    lat: f64,
    lng: f64,
    vector: &'a [f64],
}

#[derive(Serialize)]
struct SynthReport<'a> {
    spec: &'a SynthSpec,
    cells: usize,
    images: usize,
    labels: usize,
    oracle_r2: f64,
}

pub const FEATURES_FILE: &str = "features.jsonl";
pub const LABELS_FILE: &str = "labels.jsonl";
pub const EXTERNAL_FILE: &str = "external.jsonl";
pub const REPORT_FILE: &str = "synth.json";

/// Writes features, labels, external embeddings, and a summary into `dir`.
pub fn write_synth(dir: &Path, spec: &SynthSpec, data: &SynthData) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_features(&dir.join(FEATURES_FILE), &data.features)?;
    let mut buf = String::new();
    for (cell, target) in &data.labels {
        buf.push_str(&serde_json::to_string(&LabelRecord { token: &cell.to_token(), target: *target })?);
        buf.push('\n');
    }
    write_atomic(&dir.join(LABELS_FILE), buf.as_bytes())?;
    let mut buf = String::new();
    for (p, v) in &data.external {
        buf.push_str(&serde_json::to_string(&PointRecord { lat: p.lat, lng: p.lng, vector: v })?);
        buf.push('\n');
    }
    write_atomic(&dir.join(EXTERNAL_FILE), buf.as_bytes())?;
    let report = SynthReport {
        spec,
        cells: data.features.len(),
        images: data.parents.len(),
        labels: data.labels.len(),
        oracle_r2: data.oracle_r2,
    };
    write_atomic(&dir.join(REPORT_FILE), serde_json::to_string_pretty(&report)?.as_bytes())
}
