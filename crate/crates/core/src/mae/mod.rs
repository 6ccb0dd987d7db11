//! Masked autoencoder over rasterized cell images.
//!
//! Visible patches are projected, position-embedded, and passed through a
//! pre-norm transformer encoder. A narrower decoder receives the encoded
//! visible patches interleaved with a learned mask token and reconstructs
//! every patch; the loss covers masked patches only. After training, the
//! patch projection alone maps a cell's normalized features to its
//! embedding.

mod embed;
mod model;
mod train;

use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::numerics::{checkpoint, AdamWConfig, ParamSet, Scalar, Tensor};

pub use embed::{
    extract_contextual, extract_embeddings, image_embeddings, EmbedMode, EmbeddingTable, Provenance,
    MAGIC as EMBEDDING_MAGIC,
};
pub use model::{decode_reconstruct, encode_visible, loss_on_tape, masked_mse_loss, Dropout};
pub use train::{pretrain, pretrain_with, shuffle_order, TrainOutcome};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaeConfig {
    pub feature_dim: usize,
    /// Grid side G; images hold G * G patches.
    pub grid: usize,
    pub encoder_dim: usize,
    pub decoder_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub mask_ratio: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub shuffle_buffer: usize,
    pub initial_lr: f64,
    pub lr_alpha: f64,
    pub clip_norm: f64,
    pub adamw: AdamWConfig,
    /// Drop absent slots from the masked-loss average.
    pub exclude_absent: bool,
}

impl Default for MaeConfig {
    fn default() -> Self {
        MaeConfig {
            feature_dim: crate::ingest::DEFAULT_FEATURE_DIM,
            grid: 16,
            encoder_dim: 256,
            decoder_dim: 128,
            encoder_layers: 6,
            decoder_layers: 2,
            heads: 8,
            mask_ratio: 0.75,
            dropout: 0.2,
            batch_size: 64,
            epochs: 50,
            shuffle_buffer: 1000,
            initial_lr: 5e-4,
            lr_alpha: 0.1,
            clip_norm: 1.0,
            adamw: AdamWConfig::default(),
            exclude_absent: false,
        }
    }
}

impl MaeConfig {
    pub fn patches(&self) -> usize {
        self.grid * self.grid
    }

    pub fn masked_count(&self) -> usize {
        (self.mask_ratio * self.patches() as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Invalid(format!("mae config: {msg}")));
        if self.feature_dim == 0 || self.grid == 0 {
            return bad("feature_dim and grid must be positive".into());
        }
        if self.encoder_dim == 0 || self.decoder_dim == 0 || self.heads == 0 {
            return bad("dimensions and heads must be positive".into());
        }
        if self.encoder_dim % self.heads != 0 || self.decoder_dim % self.heads != 0 {
            return bad(format!("heads {} must divide {} and {}", self.heads, self.encoder_dim, self.decoder_dim));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return bad(format!("mask_ratio {} outside (0, 1)", self.mask_ratio));
        }
        let m = self.masked_count();
        if m == 0 || m == self.patches() {
            return bad(format!("mask_ratio {} leaves no visible or no masked patch", self.mask_ratio));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.shuffle_buffer == 0 {
            return bad("batch_size, epochs, shuffle_buffer must be positive".into());
        }
        if !(self.initial_lr > 0.0) || !(0.0..=1.0).contains(&self.lr_alpha) || !(self.clip_norm > 0.0) {
            return bad("learning rate, alpha, or clip norm out of range".into());
        }
        Ok(())
    }
}

/// Parameter indices of one transformer block, in storage order.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BlockLayout {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub qkv_w: usize,
    pub qkv_b: usize,
    pub proj_w: usize,
    pub proj_b: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub fc1_w: usize,
    pub fc1_b: usize,
    pub fc2_w: usize,
    pub fc2_b: usize,
}

const BLOCK_LEN: usize = 12;

impl BlockLayout {
    fn at(s: usize) -> Self {
        BlockLayout {
            ln1_g: s,
            ln1_b: s + 1,
            qkv_w: s + 2,
            qkv_b: s + 3,
            proj_w: s + 4,
            proj_b: s + 5,
            ln2_g: s + 6,
            ln2_b: s + 7,
            fc1_w: s + 8,
            fc1_b: s + 9,
            fc2_w: s + 10,
            fc2_b: s + 11,
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub patch_w: usize,
    pub patch_b: usize,
    pub enc_pos: usize,
    pub enc_blocks: Vec<BlockLayout>,
    pub dec_w: usize,
    pub dec_b: usize,
    pub mask_token: usize,
    pub dec_pos: usize,
    pub dec_blocks: Vec<BlockLayout>,
    pub head_w: usize,
    pub head_b: usize,
    pub len: usize,
}

impl Layout {
    pub fn new(cfg: &MaeConfig) -> Self {
        let enc_blocks = (0..cfg.encoder_layers).map(|i| BlockLayout::at(3 + i * BLOCK_LEN)).collect();
        let d = 3 + cfg.encoder_layers * BLOCK_LEN;
        let dec_blocks = (0..cfg.decoder_layers).map(|i| BlockLayout::at(d + 4 + i * BLOCK_LEN)).collect();
        let h = d + 4 + cfg.decoder_layers * BLOCK_LEN;
        Layout {
            patch_w: 0,
            patch_b: 1,
            enc_pos: 2,
            enc_blocks,
            dec_w: d,
            dec_b: d + 1,
            mask_token: d + 2,
            dec_pos: d + 3,
            dec_blocks,
            head_w: h,
            head_b: h + 1,
            len: h + 2,
        }
    }
}

enum Init {
    Normal,
    Zeros,
    Ones,
}

fn block_specs(prefix: &str, d: usize) -> Vec<(String, Vec<usize>, Init)> {
    let n = |s: &str| format!("{prefix}.{s}");
    vec![
        (n("ln1.gamma"), vec![d], Init::Ones),
        (n("ln1.beta"), vec![d], Init::Zeros),
        (n("attn.qkv.w"), vec![d, 3 * d], Init::Normal),
        (n("attn.qkv.b"), vec![3 * d], Init::Zeros),
        (n("attn.proj.w"), vec![d, d], Init::Normal),
        (n("attn.proj.b"), vec![d], Init::Zeros),
        (n("ln2.gamma"), vec![d], Init::Ones),
        (n("ln2.beta"), vec![d], Init::Zeros),
        (n("mlp.fc1.w"), vec![d, 4 * d], Init::Normal),
        (n("mlp.fc1.b"), vec![4 * d], Init::Zeros),
        (n("mlp.fc2.w"), vec![4 * d, d], Init::Normal),
        (n("mlp.fc2.b"), vec![d], Init::Zeros),
    ]
}

fn param_specs(cfg: &MaeConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (f, p, d, dd) = (cfg.feature_dim, cfg.patches(), cfg.encoder_dim, cfg.decoder_dim);
    let mut specs = vec![
        ("patch.w".to_string(), vec![f, d], Init::Normal),
        ("patch.b".to_string(), vec![d], Init::Zeros),
        ("encoder.pos".to_string(), vec![p, d], Init::Normal),
    ];
    for i in 0..cfg.encoder_layers {
        specs.extend(block_specs(&format!("encoder.{i}"), d));
    }
    specs.push(("decoder.embed.w".into(), vec![d, dd], Init::Normal));
    specs.push(("decoder.embed.b".into(), vec![dd], Init::Zeros));
    specs.push(("decoder.mask_token".into(), vec![dd], Init::Normal));
    specs.push(("decoder.pos".into(), vec![p, dd], Init::Normal));
    for i in 0..cfg.decoder_layers {
        specs.extend(block_specs(&format!("decoder.{i}"), dd));
    }
    specs.push(("head.w".into(), vec![dd, f], Init::Normal));
    specs.push(("head.b".into(), vec![f], Init::Zeros));
    specs
}

pub const INIT_STD: f64 = 0.02;

/// Standard normal truncated to [-2, 2] by resampling, times `std`.
pub fn truncated_normal(rng: &mut impl Rng, std: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// All learnable tensors of the model plus the config that fixes their shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct MaeParams<T: Scalar> {
    pub config: MaeConfig,
    pub set: ParamSet<T>,
}

impl<T: Scalar> MaeParams<T> {
    pub fn count(&self) -> usize {
        self.set.count()
    }

    pub fn cast<U: Scalar>(&self) -> MaeParams<U> {
        MaeParams { config: self.config.clone(), set: self.set.cast() }
    }

    pub fn patch_projection(&self) -> (&Tensor<T>, &Tensor<T>) {
        (self.set.get(0), self.set.get(1))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.set.index_of(name).map(|i| self.set.get(i))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.set.index_of(name).map(|i| self.set.get_mut(i))
    }

    /// Checks names, shapes, and finiteness against the config.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let specs = param_specs(&self.config);
        if specs.len() != self.set.len() {
            return Err(Error::shape("mae params", format!("{} tensors, expected {}", self.set.len(), specs.len())));
        }
        for (i, (name, shape, _)) in specs.iter().enumerate() {
            if self.set.name(i) != name || self.set.get(i).shape() != shape.as_slice() {
                return Err(Error::shape("mae params", format!("slot {i}: {} {:?}, expected {name} {shape:?}", self.set.name(i), self.set.get(i).shape())));
            }
            if !self.set.get(i).is_finite() {
                return Err(Error::NonFinite(format!("parameter {name}")));
            }
        }
        Ok(())
    }
}

/// Fresh parameters: truncated-normal projections, positional tables, and
/// mask token; zero biases; unit layer-norm gains.
pub fn init_params<T: Scalar>(cfg: &MaeConfig, seed: u64) -> Result<MaeParams<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = ParamSet::new();
    for (name, shape, init) in param_specs(cfg) {
        let t = match init {
            Init::Zeros => Tensor::zeros(&shape),
            Init::Ones => Tensor::full(&shape, T::one()),
            Init::Normal => {
                let n = shape.iter().product();
                Tensor::new(&shape, (0..n).map(|_| T::of(truncated_normal(&mut rng, INIT_STD))).collect())?
            }
        };
        set.push(name, t);
    }
    Ok(MaeParams { config: cfg.clone(), set })
}

/// Visible and masked patch indices, each sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
}

impl MaskPlan {
    /// Every patch visible; used at inference.
    pub fn all_visible(patches: usize) -> Self {
        MaskPlan { visible: (0..patches).collect(), masked: Vec::new() }
    }

    pub fn patches(&self) -> usize {
        self.visible.len() + self.masked.len()
    }

    pub fn validate(&self, patches: usize) -> Result<()> {
        let mut seen = vec![false; patches];
        for &i in self.visible.iter().chain(&self.masked) {
            if i >= patches || seen[i] {
                return Err(Error::invalid(format!("mask plan index {i} out of range or repeated for {patches} patches")));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::invalid("mask plan does not cover every patch"));
        }
        if self.visible.is_empty() {
            return Err(Error::invalid("mask plan has no visible patch"));
        }
        Ok(())
    }
}

/// Masks `round(ratio * patches)` indices drawn uniformly without replacement.
pub fn random_mask(patches: usize, ratio: f64, rng: &mut impl Rng) -> Result<MaskPlan> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("mask ratio {ratio} outside (0, 1)")));
    }
    let m = (ratio * patches as f64).round() as usize;
    if m == 0 || m >= patches {
        return Err(Error::invalid(format!("mask ratio {ratio} over {patches} patches leaves an empty side")));
    }
    let mut is_masked = vec![false; patches];
    for i in index::sample(rng, patches, m) {
        is_masked[i] = true;
    }
    let (masked, visible): (Vec<usize>, Vec<usize>) = (0..patches).partition(|&i| is_masked[i]);
    Ok(MaskPlan { visible, masked })
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes the parameter checkpoint and its config sidecar (`<path>.json`).
pub fn save_params(path: &Path, params: &MaeParams<f32>) -> Result<()> {
    checkpoint::write(path, &params.set)?;
    write_atomic(&sidecar(path), serde_json::to_string_pretty(&params.config)?.as_bytes())
}

pub fn load_params(path: &Path) -> Result<MaeParams<f32>> {
    let config: MaeConfig = serde_json::from_slice(&std::fs::read(sidecar(path))?)?;
    let params = MaeParams { config, set: checkpoint::read(path)? };
    params.validate()?;
    Ok(params)
}
