use std::path::Path;

use serde::{Deserialize, Serialize};

use super::probe::{location_encode, train_probe, FusionMode, FusionSpec, HyperParams, LocEncoding, ProbeConfig, ProbeInputs};
use super::split::{split_geographic, split_random, Split, SplitKind, SplitSpec};
use super::{mean_std, metric_mae, metric_r2, scale_targets, LabeledCell, MinMaxScaler};
use crate::error::{Error, Result};
use crate::io::{content_hash, write_atomic};
use crate::mae::EmbeddingTable;
use crate::numerics::Tensor;
use crate::par;
use crate::s2geom::CellId;

/// One evaluation: a labeled cell set, its embedding sources, and the
/// split, fusion, and probe settings.
#[derive(Clone, Debug)]
pub struct EvalRequest<'a> {
    pub name: String,
    pub labels: &'a [LabeledCell],
    pub sources: &'a [EmbeddingTable],
    pub split: SplitSpec,
    pub fusion: FusionSpec,
    pub probe: ProbeConfig,
    /// Location encoding of each cell center, when enabled.
    pub location: Option<LocEncoding>,
    /// Append the location encoding to every source before fusion instead
    /// of once after it.
    pub loc_per_source: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub r2: f64,
    pub mae: f64,
    pub best_val_mse: f64,
    pub epochs: usize,
    pub scaler: MinMaxScaler,
    pub sizes: [usize; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub name: String,
    pub split: SplitKind,
    pub fusion: FusionMode,
    pub location: bool,
    pub config_hash: String,
    pub cells: usize,
    /// Labeled cells without an embedding in every source.
    pub dropped: usize,
    pub seed_count: usize,
    pub sweep: Vec<(HyperParams, f64)>,
    pub chosen: HyperParams,
    pub per_seed: Vec<SeedResult>,
    pub r2: Aggregate,
    pub mae: Aggregate,
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn tsv(&self) -> String {
        let mut s = String::from("name\tsplit\tfusion\tlocation\tseed\tr2\tmae\n");
        let head = format!("{}\t{}\t{}\t{}", self.name, self.split, self.fusion, self.location);
        for r in &self.per_seed {
            s.push_str(&format!("{head}\t{}\t{}\t{}\n", r.seed, r.r2, r.mae));
        }
        s.push_str(&format!("{head}\tmean\t{}\t{}\n", self.r2.mean, self.mae.mean));
        s.push_str(&format!("{head}\tstd\t{}\t{}\n", self.r2.std, self.mae.std));
        s
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.tsv().as_bytes())
    }
}

fn table_rows(table: &EmbeddingTable, cells: &[CellId]) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(cells.len() * table.dim());
    for &c in cells {
        data.extend_from_slice(table.get(c).ok_or_else(|| Error::invalid(format!("cell {c} missing from a source")))?);
    }
    Tensor::new(&[cells.len(), table.dim()], data)
}

fn loc_rows(cells: &[CellId], enc: &LocEncoding) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(cells.len() * enc.dim());
    for &c in cells {
        data.extend(location_encode(c.center(), enc)?.into_iter().map(|x| x as f32));
    }
    Tensor::new(&[cells.len(), enc.dim()], data)
}

fn hcat(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(a.len() + b.len());
    for r in 0..a.rows() {
        data.extend_from_slice(a.row(r));
        data.extend_from_slice(b.row(r));
    }
    Tensor::new(&[a.rows(), a.cols() + b.cols()], data)
}

/// Keeps labeled cells covered by every source and assembles probe inputs
/// in label order. With no sources the location encoding is the only input.
pub fn build_inputs(
    labels: &[LabeledCell],
    sources: &[EmbeddingTable],
    location: Option<&LocEncoding>,
    loc_per_source: bool,
) -> Result<(Vec<LabeledCell>, ProbeInputs)> {
    if sources.is_empty() && location.is_none() {
        return Err(Error::invalid("evaluation needs an embedding source or a location encoding"));
    }
    let kept: Vec<LabeledCell> = labels.iter().copied().filter(|l| sources.iter().all(|s| s.contains(l.cell))).collect();
    if kept.is_empty() {
        return Err(Error::Empty("labeled cells covered by every source"));
    }
    let cells: Vec<CellId> = kept.iter().map(|l| l.cell).collect();
    let loc = location.map(|e| loc_rows(&cells, e)).transpose()?;
    let mut tensors = sources.iter().map(|s| table_rows(s, &cells)).collect::<Result<Vec<_>>>()?;
    let inputs = match loc {
        None => ProbeInputs { sources: tensors, post: None },
        Some(l) if tensors.is_empty() => ProbeInputs { sources: vec![l], post: None },
        Some(l) if loc_per_source => {
            tensors = tensors.iter().map(|t| hcat(t, &l)).collect::<Result<_>>()?;
            ProbeInputs { sources: tensors, post: None }
        }
        Some(l) => ProbeInputs { sources: tensors, post: Some(l) },
    };
    Ok((kept, inputs))
}

#[derive(Serialize)]
struct HashInput<'a> {
    split: &'a SplitSpec,
    fusion: &'a FusionSpec,
    probe: &'a ProbeConfig,
    location: &'a Option<LocEncoding>,
    loc_per_source: bool,
    sources: Vec<(usize, usize, &'a crate::mae::Provenance)>,
    labels: usize,
}

fn splits_for(req: &EvalRequest<'_>, cells: &[CellId]) -> Result<Vec<Split>> {
    let n = req.probe.seeds;
    match req.split.kind {
        SplitKind::Random => (0..n as u64).map(|i| split_random(cells.len(), req.split.fractions, req.split.seed + i)).collect(),
        SplitKind::Geographic => {
            let region = req.split.region.as_ref().ok_or_else(|| Error::invalid("geographic split needs a region"))?;
            let s = split_geographic(cells, region, req.split.seed)?;
            Ok(vec![s; n])
        }
    }
}

/// Selects hyperparameters by validation loss on the first split, retrains
/// with them on every seed's split, and aggregates test R^2 and MAE
/// (scaled-target units).
pub fn sweep_and_evaluate(req: &EvalRequest<'_>) -> Result<EvalReport> {
    req.split.validate()?;
    req.probe.validate()?;
    let (kept, inputs) = build_inputs(req.labels, req.sources, req.location.as_ref(), req.loc_per_source)?;
    inputs.validate()?;
    req.fusion.output_dim(&inputs.source_dims())?;
    let cells: Vec<CellId> = kept.iter().map(|l| l.cell).collect();
    let raw: Vec<f64> = kept.iter().map(|l| l.target).collect();
    let splits = splits_for(req, &cells)?;
    let scaled = splits
        .iter()
        .map(|s| scale_targets(&raw, &s.train))
        .collect::<Result<Vec<(Vec<f64>, MinMaxScaler)>>>()?;

    let grid = req.probe.grid();
    let base = req.split.seed;
    let sweep_losses = par::try_map(&grid, |hp| {
        train_probe(&inputs, &scaled[0].0, &splits[0].train, &splits[0].val, &req.fusion, &req.probe, *hp, base).map(|t| t.best_val)
    })?;
    let best = (0..grid.len())
        .min_by(|&a, &b| sweep_losses[a].total_cmp(&sweep_losses[b]))
        .expect("grid is nonempty");
    let chosen = grid[best];

    let per_seed = par::try_map_range(splits.len(), |i| -> Result<SeedResult> {
        let (s, (targets, scaler)) = (&splits[i], &scaled[i]);
        let seed = base + i as u64;
        let t = train_probe(&inputs, targets, &s.train, &s.val, &req.fusion, &req.probe, chosen, seed)?;
        let pred = t.probe.predict(&inputs, &s.test)?;
        let truth: Vec<f64> = s.test.iter().map(|&r| targets[r]).collect();
        Ok(SeedResult {
            seed,
            r2: metric_r2(&pred, &truth)?,
            mae: metric_mae(&pred, &truth)?,
            best_val_mse: t.best_val,
            epochs: t.val_history.len(),
            scaler: *scaler,
            sizes: [s.train.len(), s.val.len(), s.test.len()],
        })
    })?;

    let r2s: Vec<f64> = per_seed.iter().map(|r| r.r2).collect();
    let maes: Vec<f64> = per_seed.iter().map(|r| r.mae).collect();
    let (r2_mean, r2_std) = mean_std(&r2s);
    let (mae_mean, mae_std) = mean_std(&maes);
    let hash_input = HashInput {
        split: &req.split,
        fusion: &req.fusion,
        probe: &req.probe,
        location: &req.location,
        loc_per_source: req.loc_per_source,
        sources: req.sources.iter().map(|s| (s.dim(), s.len(), &s.provenance)).collect(),
        labels: req.labels.len(),
    };
    Ok(EvalReport {
        name: req.name.clone(),
        split: req.split.kind,
        fusion: req.fusion.mode,
        location: req.location.is_some(),
        config_hash: content_hash(&serde_json::to_vec(&hash_input)?),
        cells: kept.len(),
        dropped: req.labels.len() - kept.len(),
        seed_count: per_seed.len(),
        sweep: grid.into_iter().zip(sweep_losses).collect(),
        chosen,
        per_seed,
        r2: Aggregate { mean: r2_mean, std: r2_std },
        mae: Aggregate { mean: mae_mean, std: mae_std },
    })
}
