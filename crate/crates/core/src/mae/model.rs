use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BlockLayout, Layout, MaeConfig, MaeParams, MaskPlan};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var};

/// Inverted dropout with its own random stream; inactive when built with
/// [`Dropout::off`] or a zero rate.
pub struct Dropout {
    p: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn off() -> Self {
        Dropout { p: 0.0, rng: None }
    }

    pub fn train(p: f64, seed: u64) -> Self {
        Dropout { p, rng: Some(ChaCha8Rng::seed_from_u64(seed)) }
    }

    fn apply<T: Scalar>(&mut self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let Some(rng) = self.rng.as_mut().filter(|_| self.p > 0.0) else { return Ok(x) };
        let keep = T::of(1.0 / (1.0 - self.p));
        let mask = (0..g.value(x).len()).map(|_| if rng.random::<f64>() < self.p { T::zero() } else { keep }).collect();
        g.dropout_mask(x, mask)
    }
}

fn block<T: Scalar>(
    g: &mut Graph<'_, T>,
    vars: &[Var],
    b: &BlockLayout,
    heads: usize,
    x: Var,
    drop: &mut Dropout,
) -> Result<Var> {
    let d = g.value(x).cols();
    let dh = d / heads;
    let h = g.layer_norm(x, vars[b.ln1_g], vars[b.ln1_b])?;
    let qkv = g.linear(h, vars[b.qkv_w], vars[b.qkv_b])?;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for i in 0..heads {
        let q = g.slice_cols(qkv, i * dh, dh)?;
        let k = g.slice_cols(qkv, d + i * dh, dh)?;
        let v = g.slice_cols(qkv, 2 * d + i * dh, dh)?;
        let s = g.matmul_nt(q, k)?;
        let s = g.scale(s, scale);
        let a = g.softmax(s);
        let a = drop.apply(g, a)?;
        outs.push(g.matmul(a, v)?);
    }
    let cat = g.concat_cols(&outs)?;
    let attn = g.linear(cat, vars[b.proj_w], vars[b.proj_b])?;
    let x = g.add(x, attn)?;
    let h = g.layer_norm(x, vars[b.ln2_g], vars[b.ln2_b])?;
    let h = g.linear(h, vars[b.fc1_w], vars[b.fc1_b])?;
    let h = g.gelu(h);
    let h = drop.apply(g, h)?;
    let h = g.linear(h, vars[b.fc2_w], vars[b.fc2_b])?;
    g.add(x, h)
}

fn check_image<T: Scalar>(cfg: &MaeConfig, image: &Tensor<T>, plan: &MaskPlan) -> Result<()> {
    let p = cfg.patches();
    if image.shape() != [p, cfg.feature_dim] {
        return Err(Error::DimensionMismatch { expected: p * cfg.feature_dim, found: image.len() });
    }
    plan.validate(p)
}

pub(crate) fn encode_on_tape<T: Scalar>(
    g: &mut Graph<'_, T>,
    cfg: &MaeConfig,
    vars: &[Var],
    image: Var,
    visible: &[usize],
    drop: &mut Dropout,
) -> Result<Var> {
    let lay = Layout::new(cfg);
    let x = g.gather_rows(image, visible)?;
    let e = g.linear(x, vars[lay.patch_w], vars[lay.patch_b])?;
    let pos = g.gather_rows(vars[lay.enc_pos], visible)?;
    let mut h = g.add(e, pos)?;
    for b in &lay.enc_blocks {
        h = block(g, vars, b, cfg.heads, h, drop)?;
    }
    Ok(h)
}

pub(crate) fn decode_on_tape<T: Scalar>(
    g: &mut Graph<'_, T>,
    cfg: &MaeConfig,
    vars: &[Var],
    latents: Var,
    visible: &[usize],
    drop: &mut Dropout,
) -> Result<Var> {
    let lay = Layout::new(cfg);
    let y = g.linear(latents, vars[lay.dec_w], vars[lay.dec_b])?;
    let full = g.interleave(y, vars[lay.mask_token], visible, cfg.patches())?;
    let mut h = g.add(full, vars[lay.dec_pos])?;
    for b in &lay.dec_blocks {
        h = block(g, vars, b, cfg.heads, h, drop)?;
    }
    g.linear(h, vars[lay.head_w], vars[lay.head_b])
}

/// Rows entering the loss: masked patches, optionally only the present ones.
pub(crate) fn loss_rows(plan: &MaskPlan, presence: Option<&[bool]>) -> Vec<usize> {
    match presence {
        Some(p) => plan.masked.iter().copied().filter(|&i| p[i]).collect(),
        None => plan.masked.clone(),
    }
}

/// Builds the full masked-reconstruction loss on `g` from one leaf per
/// parameter (in storage order). `presence`, when given, restricts the loss
/// to present slots.
pub fn loss_on_tape<T: Scalar>(
    g: &mut Graph<'_, T>,
    cfg: &MaeConfig,
    vars: &[Var],
    image: Tensor<T>,
    plan: &MaskPlan,
    presence: Option<&[bool]>,
    drop: &mut Dropout,
) -> Result<Var> {
    check_image(cfg, &image, plan)?;
    if vars.len() != Layout::new(cfg).len {
        return Err(Error::shape("mae loss", format!("{} parameter leaves", vars.len())));
    }
    let rows = loss_rows(plan, presence);
    let x = g.input(image.clone());
    let latents = encode_on_tape(g, cfg, vars, x, &plan.visible, drop)?;
    let recon = decode_on_tape(g, cfg, vars, latents, &plan.visible, drop)?;
    g.row_mse(recon, image, &rows)
}

fn dropout_for(cfg: &MaeConfig, train_seed: Option<u64>) -> Dropout {
    match train_seed {
        Some(seed) => Dropout::train(cfg.dropout, seed),
        None => Dropout::off(),
    }
}

/// Encoder outputs `[V, encoder_dim]` for the visible patches, in
/// `plan.visible` order. `train_seed` enables dropout with that stream.
pub fn encode_visible<T: Scalar>(
    params: &MaeParams<T>,
    image: &Tensor<T>,
    plan: &MaskPlan,
    train_seed: Option<u64>,
) -> Result<Tensor<T>> {
    let cfg = &params.config;
    check_image(cfg, image, plan)?;
    let mut g = Graph::new();
    let vars: Vec<Var> = params.set.tensors().iter().map(|t| g.input_ref(t)).collect();
    let x = g.input_ref(image);
    let out = encode_on_tape(&mut g, cfg, &vars, x, &plan.visible, &mut dropout_for(cfg, train_seed))?;
    Ok(g.value(out).clone())
}

/// Reconstruction `[G*G, feature_dim]` from encoded visible patches.
pub fn decode_reconstruct<T: Scalar>(
    params: &MaeParams<T>,
    latents: &Tensor<T>,
    plan: &MaskPlan,
    train_seed: Option<u64>,
) -> Result<Tensor<T>> {
    let cfg = &params.config;
    plan.validate(cfg.patches())?;
    if latents.shape() != [plan.visible.len(), cfg.encoder_dim] {
        return Err(Error::shape("decode", format!("latents {:?} for {} visible patches", latents.shape(), plan.visible.len())));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = params.set.tensors().iter().map(|t| g.input_ref(t)).collect();
    let x = g.input_ref(latents);
    let out = decode_on_tape(&mut g, cfg, &vars, x, &plan.visible, &mut dropout_for(cfg, train_seed))?;
    Ok(g.value(out).clone())
}

/// Mean squared error over the masked rows, averaged over (rows x features).
pub fn masked_mse_loss<T: Scalar>(recon: &Tensor<T>, target: &Tensor<T>, plan: &MaskPlan) -> Result<f64> {
    if recon.shape() != target.shape() {
        return Err(Error::shape("masked mse", format!("{:?} vs {:?}", recon.shape(), target.shape())));
    }
    if plan.masked.is_empty() {
        return Err(Error::Empty("masked set"));
    }
    let f = recon.cols();
    let mut acc = 0.0;
    for &r in &plan.masked {
        if r >= recon.rows() {
            return Err(Error::invalid(format!("masked index {r} out of range")));
        }
        for (a, b) in recon.row(r).iter().zip(target.row(r)) {
            let d = a.f64() - b.f64();
            acc += d * d;
        }
    }
    Ok(acc / (plan.masked.len() * f) as f64)
}

/// Per-image loss and parameter gradients; `None` when no row enters the loss.
pub(crate) fn image_grads(
    params: &MaeParams<f32>,
    image: &Tensor<f32>,
    presence: Option<&[bool]>,
    plan: &MaskPlan,
    dropout_seed: u64,
) -> Result<Option<(f64, Vec<Tensor<f32>>)>> {
    let cfg = &params.config;
    if loss_rows(plan, presence).is_empty() {
        return Ok(None);
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = params.set.tensors().iter().map(|t| g.param(t)).collect();
    let mut drop = Dropout::train(cfg.dropout, dropout_seed);
    let loss = loss_on_tape(&mut g, cfg, &vars, image.clone(), plan, presence, &mut drop)?;
    let value = g.value(loss).data()[0].f64();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("image loss {value}")));
    }
    let mut grads = g.backward(loss)?;
    let out = vars
        .iter()
        .zip(params.set.tensors())
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok(Some((value, out)))
}
