use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use s2vec::downstream::{FusionMode, LocEncoding, SplitKind};
use s2vec::mae::EmbedMode;
use s2vec::pipeline::{run_until, PipelineConfig, RunSummary, Stage};
use s2vec::synth::{synth_generate, write_synth, SynthSpec};
use s2vec::{par, Error};

#[derive(Parser, Debug)]
#[command(name = "s2vec", version, about = "Self-supervised S2 cell embeddings of the built environment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic feature, label, and external-embedding set.
    Synth(SynthArgs),
    /// Validate and canonicalize the feature file.
    Ingest(PipelineArgs),
    /// Fit feature normalization statistics.
    Stats(PipelineArgs),
    /// Build image-level rasters.
    Rasterize(PipelineArgs),
    /// Pretrain the masked autoencoder.
    Pretrain(PipelineArgs),
    /// Extract per-cell embeddings.
    Embed(PipelineArgs),
    /// Evaluate embeddings on a labeled regression task.
    Eval(PipelineArgs),
    /// Run every stage; evaluation only when labels are given.
    Run(PipelineArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// JSON configuration file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; 1 gives the bit-reproducible sequential mode.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    /// Keep at most this many image-level parents.
    #[arg(long)]
    images: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    latents: Option<usize>,
    #[arg(long)]
    label_fraction: Option<f64>,
    #[arg(long)]
    target_noise: Option<f64>,
}

#[derive(Args, Debug)]
struct PipelineArgs {
    #[command(flatten)]
    common: Common,
    /// Feature JSONL input.
    #[arg(long)]
    features: Option<PathBuf>,
    /// Label JSONL input.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// External embedding file; repeatable.
    #[arg(long)]
    external: Vec<PathBuf>,
    /// Holdout polygon JSON for geographic splits.
    #[arg(long)]
    region: Option<PathBuf>,
    #[arg(long)]
    image_level: Option<u8>,
    #[arg(long)]
    patch_level: Option<u8>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    min_present: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    encoder_dim: Option<usize>,
    #[arg(long)]
    decoder_dim: Option<usize>,
    #[arg(long, value_parser = parse_embed_mode)]
    embed_mode: Option<EmbedMode>,
    #[arg(long, value_parser = parse_fusion)]
    fusion: Option<FusionMode>,
    /// Projection width for project-add fusion.
    #[arg(long)]
    proj_dim: Option<usize>,
    #[arg(long, value_parser = parse_split)]
    split: Option<SplitKind>,
    /// Add the multi-scale location encoding to the probe input.
    #[arg(long)]
    loc: bool,
    /// Append the location encoding to every source before fusion.
    #[arg(long, requires = "loc")]
    loc_per_source: bool,
    /// Probe evaluation seeds.
    #[arg(long)]
    probe_seeds: Option<usize>,
}

fn parse_embed_mode(s: &str) -> Result<EmbedMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_fusion(s: &str) -> Result<FusionMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_split(s: &str) -> Result<SplitKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn pipeline_config(a: &PipelineArgs) -> s2vec::Result<PipelineConfig> {
    let mut cfg = match &a.common.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = a.common.seed {
        cfg.seed = seed;
        cfg.split.seed = seed;
    }
    if let Some(v) = &a.common.out {
        cfg.out = v.clone();
    }
    if let Some(v) = &a.features {
        cfg.features = v.clone();
    }
    if let Some(v) = &a.labels {
        cfg.labels = Some(v.clone());
    }
    if !a.external.is_empty() {
        cfg.external = a.external.clone();
    }
    if let Some(v) = &a.region {
        cfg.region = Some(v.clone());
    }
    if let Some(v) = a.image_level {
        cfg.image_level = v;
    }
    if let Some(v) = a.patch_level {
        cfg.patch_level = v;
    }
    if (a.image_level.is_some() || a.patch_level.is_some()) && cfg.patch_level > cfg.image_level {
        let diff = cfg.patch_level - cfg.image_level;
        if diff <= 12 {
            cfg.mae.grid = 1 << diff;
        }
    }
    if let Some(v) = a.feature_dim {
        cfg.feature_dim = v;
        cfg.mae.feature_dim = v;
    }
    if let Some(v) = a.min_present {
        cfg.min_present = v;
    }
    if let Some(v) = a.epochs {
        cfg.mae.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.mae.batch_size = v;
    }
    if let Some(v) = a.encoder_dim {
        cfg.mae.encoder_dim = v;
    }
    if let Some(v) = a.decoder_dim {
        cfg.mae.decoder_dim = v;
    }
    if let Some(v) = a.embed_mode {
        cfg.embed_mode = v;
    }
    if let Some(v) = a.fusion {
        cfg.fusion.mode = v;
    }
    if let Some(v) = a.proj_dim {
        cfg.fusion.proj_dim = v;
    }
    if let Some(v) = a.split {
        cfg.split.kind = v;
    }
    if a.loc && cfg.location.is_none() {
        cfg.location = Some(LocEncoding::default());
    }
    if a.loc_per_source {
        cfg.loc_per_source = true;
    }
    if let Some(v) = a.probe_seeds {
        cfg.probe.seeds = v;
    }
    Ok(cfg)
}

fn synth_spec(a: &SynthArgs) -> s2vec::Result<SynthSpec> {
    let mut spec: SynthSpec = match &a.common.config {
        Some(p) => serde_json::from_slice(&std::fs::read(p)?)?,
        None => SynthSpec::default(),
    };
    if let Some(v) = a.common.seed {
        spec.seed = v;
    }
    if let Some(v) = a.images {
        spec.max_images = Some(v);
    }
    if let Some(v) = a.feature_dim {
        spec.feature_dim = v;
    }
    if let Some(v) = a.latents {
        spec.latents = v;
    }
    if let Some(v) = a.label_fraction {
        spec.label_fraction = v;
    }
    if let Some(v) = a.target_noise {
        spec.target_noise = v;
    }
    Ok(spec)
}

fn set_threads(common: &Common) -> s2vec::Result<()> {
    match common.threads {
        Some(n) => par::set_threads(n).map_err(|e| Error::Invalid(format!("--threads: {e}"))),
        None => Ok(()),
    }
}

fn print_summary(summary: &RunSummary) {
    for (stage, status) in &summary.stages {
        println!("{stage}\t{status:?}");
    }
    if let Some(r) = &summary.report {
        println!("r2\t{:.6}\t{:.6}", r.r2.mean, r.r2.std);
        println!("mae\t{:.6}\t{:.6}", r.mae.mean, r.mae.std);
    }
}

fn run(cli: Cli) -> s2vec::Result<()> {
    let (args, last) = match cli.command {
        Command::Synth(a) => {
            set_threads(&a.common)?;
            let spec = synth_spec(&a)?;
            let out = a.common.out.clone().unwrap_or_else(|| PathBuf::from("synth"));
            let data = synth_generate(&spec)?;
            write_synth(&out, &spec, &data)?;
            println!(
                "wrote {} cells, {} images, {} labels to {} (oracle r2 {:.4})",
                data.features.len(),
                data.parents.len(),
                data.labels.len(),
                out.display(),
                data.oracle_r2
            );
            return Ok(());
        }
        Command::Ingest(a) => (a, Some(Stage::Ingest)),
        Command::Stats(a) => (a, Some(Stage::Stats)),
        Command::Rasterize(a) => (a, Some(Stage::Rasterize)),
        Command::Pretrain(a) => (a, Some(Stage::Pretrain)),
        Command::Embed(a) => (a, Some(Stage::Embed)),
        Command::Eval(a) => (a, Some(Stage::Eval)),
        Command::Run(a) => (a, None),
    };
    set_threads(&args.common)?;
    let cfg = pipeline_config(&args)?;
    let last = last.unwrap_or(if cfg.labels.is_some() { Stage::Eval } else { Stage::Embed });
    print_summary(&run_until(&cfg, last)?);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
