use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{adamw_step, AdamWConfig, Graph, OptimizerState, ParamSet, Tensor, Var};
use crate::s2geom::LatLng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    #[default]
    Concat,
    WeightedAdd,
    ProjectAdd,
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FusionMode::Concat => "concat",
            FusionMode::WeightedAdd => "weighted-add",
            FusionMode::ProjectAdd => "project-add",
        })
    }
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(FusionMode::Concat),
            "weighted-add" => Ok(FusionMode::WeightedAdd),
            "project-add" => Ok(FusionMode::ProjectAdd),
            other => Err(Error::invalid(format!("unknown fusion mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionSpec {
    pub mode: FusionMode,
    /// Common width of the project-add branches.
    pub proj_dim: usize,
}

impl Default for FusionSpec {
    fn default() -> Self {
        FusionSpec { mode: FusionMode::Concat, proj_dim: 256 }
    }
}

impl FusionSpec {
    /// Width of the fused vector for the given source widths.
    pub fn output_dim(&self, source_dims: &[usize]) -> Result<usize> {
        if source_dims.is_empty() || source_dims.contains(&0) {
            return Err(Error::invalid("fusion needs at least one nonempty source"));
        }
        match self.mode {
            FusionMode::Concat => Ok(source_dims.iter().sum()),
            FusionMode::WeightedAdd => {
                if source_dims.iter().any(|&d| d != source_dims[0]) {
                    return Err(Error::invalid(format!("weighted-add needs equal source dims, got {source_dims:?}")));
                }
                Ok(source_dims[0])
            }
            FusionMode::ProjectAdd => {
                if self.proj_dim == 0 {
                    return Err(Error::invalid("project-add needs a positive projection dim"));
                }
                Ok(self.proj_dim)
            }
        }
    }
}

/// Multi-scale sinusoidal encoding of equirectangular degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocEncoding {
    pub scales: usize,
    pub lambda_min: f64,
    pub lambda_max: f64,
}

impl Default for LocEncoding {
    fn default() -> Self {
        LocEncoding { scales: 16, lambda_min: 0.01, lambda_max: 360.0 }
    }
}

impl LocEncoding {
    pub fn dim(&self) -> usize {
        4 * self.scales
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales == 0 || !(self.lambda_min > 0.0) || !(self.lambda_max >= self.lambda_min) || !self.lambda_max.is_finite() {
            return Err(Error::invalid(format!("invalid location scales {self:?}")));
        }
        Ok(())
    }

    /// Geometric sequence from `lambda_min` to `lambda_max`.
    pub fn lambdas(&self) -> Vec<f64> {
        if self.scales == 1 {
            return vec![self.lambda_min];
        }
        let ratio = self.lambda_max / self.lambda_min;
        (0..self.scales).map(|s| self.lambda_min * ratio.powf(s as f64 / (self.scales - 1) as f64)).collect()
    }
}

/// `[sin(x/l), cos(x/l), sin(y/l), cos(y/l)]` for each scale `l`, with
/// x = longitude and y = latitude in degrees.
pub fn location_encode(p: LatLng, enc: &LocEncoding) -> Result<Vec<f64>> {
    enc.validate()?;
    let mut out = Vec::with_capacity(enc.dim());
    for l in enc.lambdas() {
        let (x, y) = (p.lng / l, p.lat / l);
        out.extend_from_slice(&[x.sin(), x.cos(), y.sin(), y.cos()]);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub hidden: usize,
    pub lr: f64,
    pub dropout: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub hidden_grid: Vec<usize>,
    pub lr_grid: Vec<f64>,
    pub dropout_grid: Vec<f64>,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seeds: usize,
    pub adamw: AdamWConfig,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden_grid: vec![64, 256, 1024],
            lr_grid: vec![1e-4, 5e-4, 1e-3],
            dropout_grid: vec![0.0, 0.2, 0.5],
            max_epochs: 200,
            patience: 10,
            batch_size: 64,
            seeds: 20,
            adamw: AdamWConfig::default(),
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("probe config: {m}")));
        if self.hidden_grid.is_empty() || self.lr_grid.is_empty() || self.dropout_grid.is_empty() {
            return bad("every sweep grid needs at least one value");
        }
        if self.hidden_grid.contains(&0) {
            return bad("hidden units must be positive");
        }
        if self.lr_grid.iter().any(|l| !(*l > 0.0)) || self.dropout_grid.iter().any(|d| !(0.0..1.0).contains(d)) {
            return bad("learning rates must be positive and dropout in [0, 1)");
        }
        if self.patience == 0 || self.max_epochs == 0 || self.batch_size == 0 || self.seeds == 0 {
            return bad("patience, max_epochs, batch_size, seeds must be positive");
        }
        Ok(())
    }

    /// Every grid combination, hidden-major.
    pub fn grid(&self) -> Vec<HyperParams> {
        let mut out = Vec::new();
        for &hidden in &self.hidden_grid {
            for &lr in &self.lr_grid {
                for &dropout in &self.dropout_grid {
                    out.push(HyperParams { hidden, lr, dropout });
                }
            }
        }
        out
    }
}

/// Per-cell probe inputs: one matrix per embedding source plus an optional
/// block concatenated after fusion. All share the row order.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeInputs {
    pub sources: Vec<Tensor<f32>>,
    pub post: Option<Tensor<f32>>,
}

impl ProbeInputs {
    pub fn rows(&self) -> usize {
        self.sources.first().map(Tensor::rows).unwrap_or(0)
    }

    pub fn source_dims(&self) -> Vec<usize> {
        self.sources.iter().map(Tensor::cols).collect()
    }

    pub fn post_dim(&self) -> usize {
        self.post.as_ref().map(Tensor::cols).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.rows();
        if self.sources.is_empty() || n == 0 {
            return Err(Error::Empty("probe inputs"));
        }
        if self.sources.iter().chain(&self.post).any(|t| t.shape().len() != 2 || t.rows() != n) {
            return Err(Error::shape("probe inputs", "sources disagree on row count"));
        }
        if self.sources.iter().chain(&self.post).any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("probe input".into()));
        }
        Ok(())
    }
}

fn gather(t: &Tensor<f32>, rows: &[usize]) -> Tensor<f32> {
    let c = t.cols();
    let mut data = Vec::with_capacity(rows.len() * c);
    for &r in rows {
        data.extend_from_slice(t.row(r));
    }
    Tensor::new(&[rows.len(), c], data).expect("nonempty gather")
}

fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor<f32> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a) as f32).collect();
    Tensor::new(&[fan_in, fan_out], data).expect("positive dims")
}

/// Fusion layer followed by `Linear -> GELU -> Dropout -> Linear(1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub fusion: FusionSpec,
    pub hyper: HyperParams,
    pub source_dims: Vec<usize>,
    pub post_dim: usize,
    pub params: ParamSet<f32>,
}

impl Probe {
    pub fn new(fusion: FusionSpec, source_dims: &[usize], post_dim: usize, hyper: HyperParams, rng: &mut impl Rng) -> Result<Self> {
        let fused = fusion.output_dim(source_dims)?;
        if hyper.hidden == 0 || !(0.0..1.0).contains(&hyper.dropout) {
            return Err(Error::invalid(format!("invalid probe hyperparameters {hyper:?}")));
        }
        let mut params = ParamSet::new();
        match fusion.mode {
            FusionMode::Concat => {}
            FusionMode::WeightedAdd => {
                for s in 0..source_dims.len() {
                    params.push(format!("fuse.{s}.weight"), Tensor::scalar(1.0));
                }
            }
            FusionMode::ProjectAdd => {
                for (s, &d) in source_dims.iter().enumerate() {
                    params.push(format!("fuse.{s}.w"), glorot(rng, d, fusion.proj_dim));
                    params.push(format!("fuse.{s}.b"), Tensor::zeros(&[fusion.proj_dim]));
                }
            }
        }
        let input = fused + post_dim;
        params.push("mlp.w1", glorot(rng, input, hyper.hidden));
        params.push("mlp.b1", Tensor::zeros(&[hyper.hidden]));
        params.push("mlp.w2", glorot(rng, hyper.hidden, 1));
        params.push("mlp.b2", Tensor::zeros(&[1]));
        Ok(Probe { fusion, hyper, source_dims: source_dims.to_vec(), post_dim, params })
    }

    fn check(&self, inputs: &ProbeInputs) -> Result<()> {
        inputs.validate()?;
        if inputs.source_dims() != self.source_dims || inputs.post_dim() != self.post_dim {
            return Err(Error::shape("probe", format!("inputs {:?}+{} vs probe {:?}+{}", inputs.source_dims(), inputs.post_dim(), self.source_dims, self.post_dim)));
        }
        Ok(())
    }

    fn fuse_on_tape(&self, g: &mut Graph<'_, f32>, vars: &[Var], sources: &[Var]) -> Result<Var> {
        match self.fusion.mode {
            FusionMode::Concat if sources.len() == 1 => Ok(sources[0]),
            FusionMode::Concat => g.concat_cols(sources),
            FusionMode::WeightedAdd => {
                let mut acc = g.scale_by(sources[0], vars[0])?;
                for s in 1..sources.len() {
                    let t = g.scale_by(sources[s], vars[s])?;
                    acc = g.add(acc, t)?;
                }
                Ok(acc)
            }
            FusionMode::ProjectAdd => {
                let mut acc = None;
                for (s, &src) in sources.iter().enumerate() {
                    let h = g.linear(src, vars[2 * s], vars[2 * s + 1])?;
                    let h = g.gelu(h);
                    acc = Some(match acc {
                        None => h,
                        Some(a) => g.add(a, h)?,
                    });
                }
                Ok(acc.expect("at least one source"))
            }
        }
    }

    fn forward(
        &self,
        g: &mut Graph<'_, f32>,
        vars: &[Var],
        inputs: &ProbeInputs,
        rows: &[usize],
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let sources: Vec<Var> = inputs.sources.iter().map(|t| g.input(gather(t, rows))).collect();
        let mut x = self.fuse_on_tape(g, vars, &sources)?;
        if let Some(post) = &inputs.post {
            let p = g.input(gather(post, rows));
            x = g.concat_cols(&[x, p])?;
        }
        let k = vars.len() - 4;
        let h = g.linear(x, vars[k], vars[k + 1])?;
        let mut h = g.gelu(h);
        if let Some(rng) = dropout.filter(|_| self.hyper.dropout > 0.0) {
            let p = self.hyper.dropout;
            let keep = (1.0 / (1.0 - p)) as f32;
            let mask = (0..g.value(h).len()).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
            h = g.dropout_mask(h, mask)?;
        }
        g.linear(h, vars[k + 2], vars[k + 3])
    }

    /// Fused representation of the given rows (before the post block).
    pub fn fuse(&self, inputs: &ProbeInputs, rows: &[usize]) -> Result<Tensor<f32>> {
        self.check(inputs)?;
        let mut g = Graph::new();
        let vars: Vec<Var> = self.params.tensors().iter().map(|t| g.input_ref(t)).collect();
        let sources: Vec<Var> = inputs.sources.iter().map(|t| g.input(gather(t, rows))).collect();
        let out = self.fuse_on_tape(&mut g, &vars, &sources)?;
        Ok(g.value(out).clone())
    }

    /// Predictions in scaled-target units, dropout off.
    pub fn predict(&self, inputs: &ProbeInputs, rows: &[usize]) -> Result<Vec<f64>> {
        self.check(inputs)?;
        let mut out = Vec::with_capacity(rows.len());
        for chunk in rows.chunks(4096) {
            let mut g = Graph::new();
            let vars: Vec<Var> = self.params.tensors().iter().map(|t| g.input_ref(t)).collect();
            let y = self.forward(&mut g, &vars, inputs, chunk, None)?;
            out.extend(g.value(y).data().iter().map(|&v| v as f64));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct TrainedProbe {
    pub probe: Probe,
    /// Validation MSE after every epoch.
    pub val_history: Vec<f64>,
    pub best_epoch: usize,
    pub best_val: f64,
}

fn mse(pred: &[f64], targets: &[f64], rows: &[usize]) -> f64 {
    pred.iter().zip(rows).map(|(p, &r)| (p - targets[r]).powi(2)).sum::<f64>() / rows.len() as f64
}

/// Fits a probe on `train` with AdamW and MSE, evaluating validation MSE
/// after every epoch. Stops once `patience` epochs pass without a new
/// minimum and restores the best parameters.
#[allow(clippy::too_many_arguments)]
pub fn train_probe(
    inputs: &ProbeInputs,
    targets: &[f64],
    train: &[usize],
    val: &[usize],
    fusion: &FusionSpec,
    cfg: &ProbeConfig,
    hyper: HyperParams,
    seed: u64,
) -> Result<TrainedProbe> {
    inputs.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Empty("probe train or validation set"));
    }
    if targets.len() != inputs.rows() {
        return Err(Error::DimensionMismatch { expected: inputs.rows(), found: targets.len() });
    }
    if cfg.patience == 0 || cfg.batch_size == 0 {
        return Err(Error::invalid("patience and batch size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = Probe::new(*fusion, &inputs.source_dims(), inputs.post_dim(), hyper, &mut rng)?;
    let mut state = OptimizerState::new(&probe.params, cfg.adamw);
    let mut best = (f64::INFINITY, probe.params.clone(), 0usize);
    let mut history = Vec::new();
    let mut order = train.to_vec();

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let target = Tensor::new(&[batch.len(), 1], batch.iter().map(|&r| targets[r] as f32).collect())?;
            let grads = {
                let mut g = Graph::new();
                let vars: Vec<Var> = probe.params.tensors().iter().map(|t| g.param(t)).collect();
                let y = probe.forward(&mut g, &vars, inputs, batch, Some(&mut rng))?;
                let loss = g.mse(y, target)?;
                let l = g.value(loss).data()[0];
                if !l.is_finite() {
                    return Err(Error::NonFinite(format!("probe loss {l} at epoch {epoch}")));
                }
                let mut grads = g.backward(loss)?;
                vars.iter().zip(probe.params.tensors()).map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape()))).collect::<Vec<_>>()
            };
            adamw_step(&mut probe.params, &grads, &mut state, hyper.lr)?;
        }
        let v = mse(&probe.predict(inputs, val)?, targets, val);
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("validation loss at epoch {epoch}")));
        }
        history.push(v);
        if v < best.0 {
            best = (v, probe.params.clone(), epoch);
        } else if epoch - best.2 >= cfg.patience {
            break;
        }
    }
    probe.params = best.1;
    Ok(TrainedProbe { probe, val_history: history, best_epoch: best.2, best_val: best.0 })
}
