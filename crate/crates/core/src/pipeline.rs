//! End-to-end orchestration: ingest, stats, rasterize, pretrain, embed, and
//! an optional evaluation, each writing its artifacts under one output
//! directory.
//!
//! Every stage has a hash chained from the previous stage's hash and the
//! configuration fields it reads. A stage is skipped when its manifest in
//! `stages/` records the same hash and all of its artifacts are present with
//! the recorded content hashes.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::downstream::{
    load_external_embeddings, load_labels, sweep_and_evaluate, EvalReport, EvalRequest, FusionSpec, LocEncoding,
    ProbeConfig, Region, SplitKind, SplitSpec,
};
use crate::error::{Error, Result};
use crate::ingest::{fit_norm_stats, load_features, write_features, NormStats, DEFAULT_FEATURE_DIM};
use crate::io::{content_hash, write_atomic};
use crate::mae::{
    extract_contextual, extract_embeddings, load_params, pretrain, save_params, EmbedMode, EmbeddingTable, MaeConfig,
    Provenance,
};
use crate::raster::{self, build_from_records};
use crate::s2geom::MAX_LEVEL;

pub const FEATURES: &str = "features.jsonl";
pub const STATS: &str = "norm_stats.json";
pub const IMAGES: &str = "images.s2vr";
pub const MODEL: &str = "model.s2vp";
pub const MODEL_CONFIG: &str = "model.s2vp.json";
pub const HISTORY: &str = "history.json";
pub const EMBEDDINGS: &str = "embeddings.s2ve";
pub const EMBEDDINGS_PROVENANCE: &str = "embeddings.s2ve.json";
pub const REPORT: &str = "report.json";
pub const REPORT_TSV: &str = "report.tsv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Ingest,
    Stats,
    Rasterize,
    Pretrain,
    Embed,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 6] = [Stage::Ingest, Stage::Stats, Stage::Rasterize, Stage::Pretrain, Stage::Embed, Stage::Eval];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Stats => "stats",
            Stage::Rasterize => "rasterize",
            Stage::Pretrain => "pretrain",
            Stage::Embed => "embed",
            Stage::Eval => "eval",
        }
    }

    fn artifacts(self) -> &'static [&'static str] {
        match self {
            Stage::Ingest => &[FEATURES],
            Stage::Stats => &[STATS],
            Stage::Rasterize => &[IMAGES],
            Stage::Pretrain => &[MODEL, MODEL_CONFIG, HISTORY],
            Stage::Embed => &[EMBEDDINGS, EMBEDDINGS_PROVENANCE],
            Stage::Eval => &[REPORT, REPORT_TSV],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Feature JSONL at the patch level.
    pub features: PathBuf,
    /// Label JSONL; evaluation runs only when set.
    pub labels: Option<PathBuf>,
    /// External embedding files fused with the S2Vec embeddings.
    pub external: Vec<PathBuf>,
    /// Holdout polygon for geographic splits, used when `split.region` is unset.
    pub region: Option<PathBuf>,
    pub out: PathBuf,
    /// Image level l'.
    pub image_level: u8,
    /// Patch level l.
    pub patch_level: u8,
    pub feature_dim: usize,
    /// Minimum fraction of present children for a parent to become an image.
    pub min_present: f64,
    pub mae: MaeConfig,
    pub embed_mode: EmbedMode,
    pub probe: ProbeConfig,
    pub fusion: FusionSpec,
    pub split: SplitSpec,
    pub location: Option<LocEncoding>,
    pub loc_per_source: bool,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            features: PathBuf::from("features.jsonl"),
            labels: None,
            external: Vec::new(),
            region: None,
            out: PathBuf::from("out"),
            image_level: 8,
            patch_level: 12,
            feature_dim: DEFAULT_FEATURE_DIM,
            min_present: 0.0,
            mae: MaeConfig::default(),
            embed_mode: EmbedMode::Patch,
            probe: ProbeConfig::default(),
            fusion: FusionSpec::default(),
            split: SplitSpec::default(),
            location: None,
            loc_per_source: false,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    /// Checks field consistency; file existence is checked per stage.
    pub fn validate(&self) -> Result<()> {
        if self.image_level >= self.patch_level || self.patch_level > MAX_LEVEL {
            return Err(Error::invalid(format!(
                "need image level < patch level <= 30, got {} and {}",
                self.image_level, self.patch_level
            )));
        }
        let diff = u32::from(self.patch_level - self.image_level);
        if diff > 12 || 1usize << diff != self.mae.grid {
            return Err(Error::invalid(format!(
                "levels {} and {} give grid 2^{diff}, config grid is {}",
                self.image_level, self.patch_level, self.mae.grid
            )));
        }
        if self.feature_dim != self.mae.feature_dim {
            return Err(Error::invalid(format!(
                "feature_dim {} differs from mae.feature_dim {}",
                self.feature_dim, self.mae.feature_dim
            )));
        }
        if !(0.0..=1.0).contains(&self.min_present) {
            return Err(Error::invalid(format!("min_present {} outside [0, 1]", self.min_present)));
        }
        self.mae.validate()?;
        self.probe.validate()?;
        if let Some(l) = &self.location {
            l.validate()?;
        }
        if self.split.kind == SplitKind::Geographic && self.split.region.is_none() && self.region.is_none() {
            return Err(Error::invalid("geographic split needs a region"));
        }
        if let Some(r) = &self.split.region {
            r.validate()?;
        }
        Ok(())
    }

    /// Hash of every setting; paths are blanked since stage hashes bind
    /// inputs by content.
    pub fn config_hash(&self) -> Result<String> {
        let settings = PipelineConfig {
            features: PathBuf::new(),
            labels: None,
            external: Vec::new(),
            region: None,
            out: PathBuf::new(),
            ..self.clone()
        };
        hash_of(&settings)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub hash: String,
    pub config_hash: String,
    /// `(file name, content hash)` per artifact.
    pub artifacts: Vec<(String, String)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    Skipped,
}

/// What one pipeline invocation did.
#[derive(Clone, Debug, Default)]
pub struct RunSummary {
    pub stages: Vec<(Stage, StageStatus)>,
    pub report: Option<EvalReport>,
}

impl RunSummary {
    pub fn ran(&self, stage: Stage) -> bool {
        self.stages.contains(&(stage, StageStatus::Ran))
    }
}

fn hash_of<T: Serialize>(value: &T) -> Result<String> {
    Ok(content_hash(&serde_json::to_vec(value)?))
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(content_hash(&std::fs::read(path)?))
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(Error::invalid(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

fn manifest_path(out: &Path, stage: Stage) -> PathBuf {
    out.join("stages").join(format!("{}.json", stage.name()))
}

/// True when the manifest matches `hash` and every artifact is intact.
fn is_fresh(out: &Path, stage: Stage, hash: &str) -> bool {
    let Ok(bytes) = std::fs::read(manifest_path(out, stage)) else {
        return false;
    };
    let Ok(m) = serde_json::from_slice::<StageManifest>(&bytes) else {
        log::warn!("{stage}: unreadable manifest, rerunning");
        return false;
    };
    if m.hash != hash {
        log::warn!("{stage}: stale artifacts (hash {} != {}), rerunning", &m.hash[..12.min(m.hash.len())], &hash[..12]);
        return false;
    }
    m.artifacts.iter().all(|(name, h)| file_hash(&out.join(name)).is_ok_and(|actual| &actual == h))
}

fn write_manifest(out: &Path, stage: Stage, hash: &str, config_hash: &str) -> Result<()> {
    let artifacts = stage
        .artifacts()
        .iter()
        .map(|name| Ok((name.to_string(), file_hash(&out.join(name))?)))
        .collect::<Result<Vec<_>>>()?;
    let m = StageManifest { stage: stage.name().into(), hash: hash.into(), config_hash: config_hash.into(), artifacts };
    std::fs::create_dir_all(out.join("stages"))?;
    write_atomic(&manifest_path(out, stage), serde_json::to_string_pretty(&m)?.as_bytes())
}

struct Runner<'a> {
    cfg: &'a PipelineConfig,
    config_hash: String,
    /// Hash of the stage being run.
    current: String,
    summary: RunSummary,
}

impl Runner<'_> {
    fn out(&self, name: &str) -> PathBuf {
        self.cfg.out.join(name)
    }

    /// Runs `body` unless the stage is fresh; returns the stage hash.
    fn stage(&mut self, stage: Stage, key: impl Serialize, body: impl FnOnce(&Self) -> Result<()>) -> Result<String> {
        let wrap = |e: Error| Error::Stage { stage: stage.name(), source: Box::new(e) };
        let hash = hash_of(&(stage.name(), key)).map_err(wrap)?;
        if is_fresh(&self.cfg.out, stage, &hash) {
            log::info!("{stage}: up to date");
            self.summary.stages.push((stage, StageStatus::Skipped));
            return Ok(hash);
        }
        log::info!("{stage}: running");
        self.current = hash.clone();
        body(self).and_then(|()| write_manifest(&self.cfg.out, stage, &hash, &self.config_hash)).map_err(wrap)?;
        self.summary.stages.push((stage, StageStatus::Ran));
        Ok(hash)
    }
}

/// Runs every stage up to and including `last`, reusing fresh artifacts.
pub fn run_until(cfg: &PipelineConfig, last: Stage) -> Result<RunSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out)?;
    let mut r = Runner { cfg, config_hash: cfg.config_hash()?, current: String::new(), summary: RunSummary::default() };
    write_atomic(&cfg.out.join("config.json"), serde_json::to_string_pretty(cfg)?.as_bytes())?;

    let input_hash = {
        let wrap = |e: Error| Error::Stage { stage: Stage::Ingest.name(), source: Box::new(e) };
        require_file(&cfg.features, "feature file").map_err(wrap)?;
        file_hash(&cfg.features).map_err(wrap)?
    };
    let h = r.stage(Stage::Ingest, (&input_hash, cfg.patch_level, cfg.feature_dim), |r| {
        let mut records = load_features(&cfg.features, Some(cfg.feature_dim))?;
        if let Some(first) = records.first() {
            if first.cell.level() != cfg.patch_level {
                return Err(Error::MixedLevels(cfg.patch_level, first.cell.level()));
            }
        }
        records.sort_by_key(|rec| rec.cell);
        write_features(&r.out(FEATURES), &records)
    })?;
    if last == Stage::Ingest {
        return Ok(r.summary);
    }

    let h = r.stage(Stage::Stats, &h, |r| {
        let records = load_features(&r.out(FEATURES), Some(cfg.feature_dim))?;
        fit_norm_stats(&records)?.save(&r.out(STATS))
    })?;
    if last == Stage::Stats {
        return Ok(r.summary);
    }

    let h = r.stage(Stage::Rasterize, (&h, cfg.image_level, cfg.min_present), |r| {
        let records = load_features(&r.out(FEATURES), Some(cfg.feature_dim))?;
        let stats = NormStats::load(&r.out(STATS))?;
        let ds = build_from_records(&records, &stats, cfg.image_level, cfg.patch_level, cfg.min_present)?;
        log::info!("rasterize: {} images from {} cells", ds.len(), records.len());
        raster::write(&r.out(IMAGES), &ds)
    })?;
    if last == Stage::Rasterize {
        return Ok(r.summary);
    }

    let h = r.stage(Stage::Pretrain, (&h, &cfg.mae, cfg.seed), |r| {
        let ds = raster::read(&r.out(IMAGES))?;
        let outcome = pretrain(&ds, &cfg.mae, cfg.seed)?;
        save_params(&r.out(MODEL), &outcome.params)?;
        write_atomic(&r.out(HISTORY), serde_json::to_string_pretty(&outcome.history)?.as_bytes())
    })?;
    if last == Stage::Pretrain {
        return Ok(r.summary);
    }

    let h = r.stage(Stage::Embed, (&h, cfg.embed_mode), |r| {
        let records = load_features(&r.out(FEATURES), Some(cfg.feature_dim))?;
        let stats = NormStats::load(&r.out(STATS))?;
        let params = load_params(&r.out(MODEL))?;
        let mut table = match cfg.embed_mode {
            EmbedMode::Patch => extract_embeddings(&records, &stats, &params)?,
            EmbedMode::Contextual => extract_contextual(&records, &stats, &params, cfg.image_level)?,
        };
        table.provenance = Provenance { config_hash: r.current.clone(), checkpoint_hash: file_hash(&r.out(MODEL))? };
        table.write(&r.out(EMBEDDINGS))
    })?;
    if last == Stage::Embed {
        return Ok(r.summary);
    }

    let wrap = |e: Error| Error::Stage { stage: Stage::Eval.name(), source: Box::new(e) };
    let labels_path = cfg.labels.as_ref().ok_or_else(|| wrap(Error::invalid("evaluation needs a label file")))?;
    let mut inputs = vec![labels_path];
    inputs.extend(&cfg.external);
    inputs.extend(&cfg.region);
    let input_hashes = inputs
        .iter()
        .map(|p| require_file(p, "input").and_then(|()| file_hash(p)))
        .collect::<Result<Vec<_>>>()
        .map_err(wrap)?;
    let key = (&h, &input_hashes, &cfg.probe, &cfg.fusion, &cfg.split, &cfg.location, cfg.loc_per_source);
    r.stage(Stage::Eval, key, |r| {
        let labels = load_labels(labels_path, cfg.patch_level)?;
        let mut sources = vec![EmbeddingTable::read(&r.out(EMBEDDINGS))?];
        for p in &cfg.external {
            sources.push(load_external_embeddings(p, cfg.patch_level)?);
        }
        let mut split = cfg.split.clone();
        if split.kind == SplitKind::Geographic && split.region.is_none() {
            let path = cfg.region.as_ref().ok_or_else(|| Error::invalid("geographic split needs a region"))?;
            split.region = Some(Region::load(path)?);
        }
        let name = if cfg.external.is_empty() { "s2vec".to_string() } else { format!("s2vec+{}", cfg.external.len()) };
        let req = EvalRequest {
            name,
            labels: &labels,
            sources: &sources,
            split,
            fusion: cfg.fusion,
            probe: cfg.probe.clone(),
            location: cfg.location,
            loc_per_source: cfg.loc_per_source,
        };
        let report = sweep_and_evaluate(&req)?;
        log::info!("eval: r2 {:.4} +/- {:.4} over {} seeds", report.r2.mean, report.r2.std, report.seed_count);
        report.write_json(&r.out(REPORT))?;
        report.write_tsv(&r.out(REPORT_TSV))
    })?;
    let report: EvalReport =
        serde_json::from_slice(&std::fs::read(r.out(REPORT)).map_err(|e| wrap(e.into()))?).map_err(|e| wrap(e.into()))?;
    r.summary.report = Some(report);
    Ok(r.summary)
}

/// Runs every stage; evaluation only when labels are configured.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunSummary> {
    run_until(cfg, if cfg.labels.is_some() { Stage::Eval } else { Stage::Embed })
}
