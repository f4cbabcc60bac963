//! Convolutional encoder/decoder/discriminator and the latent U-Net vector field.
//!
//! Models are built through a [`ParamSource`], so random initialisation,
//! checkpoint loading and deep copies share one construction path. Every model can
//! run in `F32` (training) or `F64` (gradient checks).

mod layers;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use layers::{conv_out_len, Init, NamedVar, ParamSource, RandomInit, StoredParams};
use layers::{Conv1d, Linear, UpConv1d};

use crate::data::SeriesWindow;
use crate::error::{ensure, Result};

pub const LOGVAR_MIN: f64 = -30.0;
pub const LOGVAR_MAX: f64 = 20.0;

/// Shared by encoder and decoder: two strided convolutions and one affine layer,
/// mirrored in the decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AutoencoderConfig {
    pub d: usize,
    pub m: usize,
    pub hidden: usize,
    pub latent_dim: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Zero the encoder's final affine layer so every input maps to `mu = logvar = 0`.
    pub zero_head: bool,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            d: 1,
            m: 256,
            hidden: 64,
            latent_dim: 128,
            kernel: 5,
            stride: 2,
            zero_head: false,
        }
    }
}

impl AutoencoderConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.d >= 1, InvalidArgument, "d must be at least 1");
        ensure!(self.m >= 2, InvalidArgument, "m must be at least 2");
        ensure!(self.hidden >= 1, InvalidArgument, "hidden width must be positive");
        ensure!(self.latent_dim >= 1, InvalidArgument, "latent_dim must be positive");
        ensure!(self.kernel % 2 == 1, InvalidArgument, "kernel size must be odd");
        ensure!(self.stride >= 1, InvalidArgument, "stride must be positive");
        Ok(())
    }

    /// Sequence lengths after the first and second encoder convolution.
    pub fn inner_lengths(&self) -> (usize, usize) {
        let l1 = conv_out_len(self.m, self.stride);
        (l1, conv_out_len(l1, self.stride))
    }

    fn flat_dim(&self) -> usize {
        self.hidden * self.inner_lengths().1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub d: usize,
    pub hidden: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            d: 1,
            hidden: 128,
            kernel: 5,
            stride: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VectorFieldConfig {
    pub latent_dim: usize,
    pub depth: usize,
    pub hidden: usize,
    pub time_dim: usize,
    /// Number of sinusoid frequencies fed to the time embedding.
    pub time_freqs: usize,
    pub max_freq: f64,
    pub zero_head: bool,
}

impl Default for VectorFieldConfig {
    fn default() -> Self {
        Self {
            latent_dim: 128,
            depth: 2,
            hidden: 512,
            time_dim: 128,
            time_freqs: 16,
            max_freq: 64.0,
            zero_head: true,
        }
    }
}

impl VectorFieldConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.latent_dim >= 1, InvalidArgument, "latent_dim must be positive");
        ensure!(self.hidden >= 1, InvalidArgument, "hidden width must be positive");
        ensure!(self.time_dim >= 1, InvalidArgument, "time_dim must be positive");
        ensure!(self.time_freqs >= 1, InvalidArgument, "time_freqs must be positive");
        ensure!(self.max_freq >= 1.0, InvalidArgument, "max_freq must be at least 1");
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        (self.hidden >> level).max(4)
    }
}

/// Diagonal Gaussian posterior for a batch: both tensors are `(batch, latent_dim)`.
#[derive(Debug, Clone)]
pub struct PosteriorParams {
    pub mu: Tensor,
    pub logvar: Tensor,
}

impl PosteriorParams {
    pub fn batch(&self) -> usize {
        self.mu.dims()[0]
    }

    pub fn row(&self, i: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let get = |t: &Tensor| -> Result<Vec<f64>> {
            Ok(t.get(i)?.to_dtype(DType::F64)?.to_vec1()?)
        };
        Ok((get(&self.mu)?, get(&self.logvar)?))
    }

    pub fn detach(&self) -> Self {
        Self {
            mu: self.mu.detach(),
            logvar: self.logvar.detach(),
        }
    }
}

/// `z = mu + exp(logvar / 2) * eps` with `eps ~ N(0, I)` drawn from `rng`.
pub fn reparameterize(p: &PosteriorParams, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let eps = standard_normal(p.mu.dims(), p.mu.dtype(), rng)?;
    reparameterize_with(p, &eps)
}

pub fn reparameterize_with(p: &PosteriorParams, eps: &Tensor) -> Result<Tensor> {
    let sigma = (&p.logvar * 0.5)?.exp()?;
    Ok((&p.mu + (sigma * eps)?)?)
}

pub fn standard_normal(shape: &[usize], dtype: DType, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn uniform01(n: usize, dtype: DType, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    use rand::Rng;
    let v: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    Ok(Tensor::from_vec(v, n, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Stacks windows into a `(batch, d, m)` tensor.
pub fn windows_to_tensor(ws: &[SeriesWindow], dtype: DType) -> Result<Tensor> {
    ensure!(!ws.is_empty(), InvalidArgument, "empty batch");
    let (d, m) = ws[0].shape();
    let mut flat = Vec::with_capacity(ws.len() * d * m);
    for w in ws {
        w.check_shape(d, m)?;
        flat.extend_from_slice(&w.values);
    }
    Ok(Tensor::from_vec(flat, (ws.len(), d, m), &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn tensor_to_windows(t: &Tensor) -> Result<Vec<SeriesWindow>> {
    let (b, d, m) = t.dims3()?;
    let flat: Vec<f64> = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    (0..b)
        .map(|i| SeriesWindow::new(d, m, flat[i * d * m..(i + 1) * d * m].to_vec()))
        .collect()
}

pub fn rows_to_tensor(rows: &[Vec<f64>], dtype: DType) -> Result<Tensor> {
    ensure!(!rows.is_empty(), InvalidArgument, "empty batch");
    let l = rows[0].len();
    ensure!(rows.iter().all(|r| r.len() == l), Shape, "ragged latent rows");
    let flat: Vec<f64> = rows.concat();
    Ok(Tensor::from_vec(flat, (rows.len(), l), &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn tensor_to_rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_dtype(DType::F64)?.to_vec2()?)
}

fn check_input(x: &Tensor, d: usize, m: Option<usize>) -> Result<()> {
    let dims = x.dims();
    let ok = dims.len() == 3 && dims[1] == d && m.is_none_or(|m| dims[2] == m);
    ensure!(
        ok,
        Shape,
        "input of shape {dims:?} does not match (batch, {d}, {})",
        m.map_or("_".to_string(), |m| m.to_string())
    );
    Ok(())
}

fn vars_only(named: Vec<NamedVar>) -> Vec<Var> {
    named.into_iter().map(|(_, v)| v).collect()
}

/// Copies parameters into fresh storage so the copy trains independently.
pub(crate) fn stored_copy(named: &[NamedVar], dtype: DType) -> Result<StoredParams> {
    let tensors = named
        .iter()
        .map(|(n, v)| Ok((n.clone(), v.as_tensor().copy()?)))
        .collect::<Result<_>>()?;
    Ok(StoredParams { tensors, dtype })
}

#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: AutoencoderConfig,
    conv1: Conv1d,
    conv2: Conv1d,
    head: Linear,
    dtype: DType,
}

impl Encoder {
    pub fn new(cfg: &AutoencoderConfig, dtype: DType, rng: &mut ChaCha8Rng) -> Result<Self> {
        Self::build(cfg, &mut RandomInit { rng, dtype }, dtype)
    }

    pub fn build(cfg: &AutoencoderConfig, src: &mut dyn ParamSource, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.hidden;
        Ok(Self {
            cfg: cfg.clone(),
            conv1: Conv1d::build(src, "encoder.conv1", cfg.d, h, cfg.kernel, cfg.stride)?,
            conv2: Conv1d::build(src, "encoder.conv2", h, h, cfg.kernel, cfg.stride)?,
            head: Linear::build(src, "encoder.head", cfg.flat_dim(), 2 * cfg.latent_dim, cfg.zero_head)?,
            dtype,
        })
    }

    pub fn config(&self) -> &AutoencoderConfig {
        &self.cfg
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Maps `(batch, d, m)` windows to posterior parameters.
    pub fn forward(&self, x: &Tensor) -> Result<PosteriorParams> {
        check_input(x, self.cfg.d, Some(self.cfg.m))?;
        let b = x.dims()[0];
        let h = self.conv1.forward(x)?.silu()?;
        let h = self.conv2.forward(&h)?.silu()?;
        let out = self.head.forward(&h.reshape((b, self.cfg.flat_dim()))?)?;
        let l = self.cfg.latent_dim;
        let mu = out.narrow(1, 0, l)?;
        let logvar = out.narrow(1, l, l)?.clamp(LOGVAR_MIN, LOGVAR_MAX)?;
        Ok(PosteriorParams { mu, logvar })
    }

    pub fn encode_windows(&self, ws: &[SeriesWindow]) -> Result<PosteriorParams> {
        self.forward(&windows_to_tensor(ws, self.dtype)?)
    }

    pub fn named_vars(&self) -> Vec<NamedVar> {
        let mut out = Vec::new();
        self.conv1.collect(&mut out);
        self.conv2.collect(&mut out);
        self.head.collect(&mut out);
        out
    }

    pub fn vars(&self) -> Vec<Var> {
        vars_only(self.named_vars())
    }

    pub fn deep_clone(&self) -> Result<Self> {
        Self::build(&self.cfg, &mut stored_copy(&self.named_vars(), self.dtype)?, self.dtype)
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    cfg: AutoencoderConfig,
    head: Linear,
    up1: UpConv1d,
    up2: UpConv1d,
    dtype: DType,
}

impl Decoder {
    pub fn new(cfg: &AutoencoderConfig, dtype: DType, rng: &mut ChaCha8Rng) -> Result<Self> {
        Self::build(cfg, &mut RandomInit { rng, dtype }, dtype)
    }

    pub fn build(cfg: &AutoencoderConfig, src: &mut dyn ParamSource, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.hidden;
        Ok(Self {
            cfg: cfg.clone(),
            head: Linear::build(src, "decoder.head", cfg.latent_dim, cfg.flat_dim(), false)?,
            up1: UpConv1d::build(src, "decoder.up1", h, h, cfg.kernel, cfg.stride)?,
            up2: UpConv1d::build(src, "decoder.up2", h, cfg.d, cfg.kernel, cfg.stride)?,
            dtype,
        })
    }

    pub fn config(&self) -> &AutoencoderConfig {
        &self.cfg
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Maps `(batch, latent_dim)` codes to `(batch, d, m)` windows.
    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let (b, l) = z.dims2()?;
        ensure!(
            l == self.cfg.latent_dim,
            Shape,
            "latent width {l} does not match {}",
            self.cfg.latent_dim
        );
        let (l1, l2) = self.cfg.inner_lengths();
        let h = self.head.forward(z)?.silu()?.reshape((b, self.cfg.hidden, l2))?;
        let h = self.up1.forward(&h, l1)?.silu()?;
        self.up2.forward(&h, self.cfg.m)
    }

    pub fn decode_rows(&self, rows: &[Vec<f64>]) -> Result<Vec<SeriesWindow>> {
        tensor_to_windows(&self.forward(&rows_to_tensor(rows, self.dtype)?)?)
    }

    pub fn named_vars(&self) -> Vec<NamedVar> {
        let mut out = Vec::new();
        self.head.collect(&mut out);
        self.up1.collect(&mut out);
        self.up2.collect(&mut out);
        out
    }

    pub fn vars(&self) -> Vec<Var> {
        vars_only(self.named_vars())
    }

    pub fn deep_clone(&self) -> Result<Self> {
        Self::build(&self.cfg, &mut stored_copy(&self.named_vars(), self.dtype)?, self.dtype)
    }
}

/// Three strided convolutions, mean pooling over time, one logit per window.
#[derive(Debug, Clone)]
pub struct Discriminator {
    cfg: DiscriminatorConfig,
    convs: [Conv1d; 3],
    head: Linear,
    dtype: DType,
}

impl Discriminator {
    pub fn new(cfg: &DiscriminatorConfig, dtype: DType, rng: &mut ChaCha8Rng) -> Result<Self> {
        Self::build(cfg, &mut RandomInit { rng, dtype }, dtype)
    }

    pub fn build(cfg: &DiscriminatorConfig, src: &mut dyn ParamSource, dtype: DType) -> Result<Self> {
        ensure!(cfg.kernel % 2 == 1, InvalidArgument, "kernel size must be odd");
        ensure!(cfg.hidden >= 1 && cfg.d >= 1, InvalidArgument, "empty discriminator");
        let (h, k, s) = (cfg.hidden, cfg.kernel, cfg.stride);
        Ok(Self {
            cfg: cfg.clone(),
            convs: [
                Conv1d::build(src, "disc.conv1", cfg.d, h, k, s)?,
                Conv1d::build(src, "disc.conv2", h, h, k, s)?,
                Conv1d::build(src, "disc.conv3", h, h, k, s)?,
            ],
            head: Linear::build(src, "disc.head", h, 1, false)?,
            dtype,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    /// `(batch, d, m)` windows to `(batch,)` logits.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        check_input(x, self.cfg.d, None)?;
        let mut h = x.clone();
        for conv in &self.convs {
            h = conv.forward(&h)?.silu()?;
        }
        let pooled = h.mean(2)?;
        Ok(self.head.forward(&pooled)?.squeeze(1)?)
    }

    pub fn discriminate(&self, w: &SeriesWindow) -> Result<f64> {
        let logits = self.forward(&windows_to_tensor(std::slice::from_ref(w), self.dtype)?)?;
        Ok(logits.to_dtype(DType::F64)?.to_vec1::<f64>()?[0])
    }

    pub fn named_vars(&self) -> Vec<NamedVar> {
        let mut out = Vec::new();
        for c in &self.convs {
            c.collect(&mut out);
        }
        self.head.collect(&mut out);
        out
    }

    pub fn vars(&self) -> Vec<Var> {
        vars_only(self.named_vars())
    }

    pub fn deep_clone(&self) -> Result<Self> {
        Self::build(&self.cfg, &mut stored_copy(&self.named_vars(), self.dtype)?, self.dtype)
    }
}

#[derive(Debug, Clone)]
struct MlpBlock {
    fc1: Linear,
    fc2: Linear,
}

impl MlpBlock {
    fn build(src: &mut dyn ParamSource, name: &str, input: usize, output: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::build(src, &format!("{name}.fc1"), input, output, false)?,
            fc2: Linear::build(src, &format!("{name}.fc2"), output, output, false)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.fc1.forward(x)?.silu()?;
        Ok(self.fc2.forward(&h)?.silu()?)
    }

    fn collect(&self, out: &mut Vec<NamedVar>) {
        self.fc1.collect(out);
        self.fc2.collect(out);
    }
}

/// Sinusoidal features of `t` followed by a learnable affine map.
#[derive(Debug, Clone)]
pub struct TimeEmbedding {
    freqs: Vec<f64>,
    proj: Linear,
    dtype: DType,
}

impl TimeEmbedding {
    fn build(cfg: &VectorFieldConfig, src: &mut dyn ParamSource, dtype: DType) -> Result<Self> {
        let n = cfg.time_freqs;
        let freqs = (0..n)
            .map(|k| {
                let frac = if n > 1 { k as f64 / (n - 1) as f64 } else { 0.0 };
                cfg.max_freq.powf(frac)
            })
            .collect();
        Ok(Self {
            freqs,
            proj: Linear::build(src, "vf.time_proj", 2 * n, cfg.time_dim, false)?,
            dtype,
        })
    }

    /// `(batch,)` times to `(batch, time_dim)` embeddings.
    pub fn forward(&self, t: &Tensor) -> Result<Tensor> {
        let b = t.dims1()?;
        let n = self.freqs.len();
        let w = Tensor::from_vec(self.freqs.clone(), (1, n), &Device::Cpu)?.to_dtype(self.dtype)?;
        let angle = t.to_dtype(self.dtype)?.reshape((b, 1))?.broadcast_mul(&w)?;
        let feats = Tensor::cat(&[angle.sin()?, angle.cos()?], 1)?;
        self.proj.forward(&feats)
    }
}

fn check_time(t: f64) -> Result<()> {
    ensure!(
        (0.0..=1.0).contains(&t),
        InvalidArgument,
        "time {t} outside [0, 1]"
    );
    Ok(())
}

/// MLP U-Net `u(z, t)` on latent vectors. Level `i` has width `hidden >> i`;
/// each down block's output is concatenated into the matching up block.
#[derive(Debug, Clone)]
pub struct VectorField {
    cfg: VectorFieldConfig,
    time: TimeEmbedding,
    input: Linear,
    down: Vec<MlpBlock>,
    mid: MlpBlock,
    up: Vec<MlpBlock>,
    t_down: Vec<Linear>,
    t_mid: Linear,
    t_up: Vec<Linear>,
    output: Linear,
    dtype: DType,
}

impl VectorField {
    pub fn new(cfg: &VectorFieldConfig, dtype: DType, rng: &mut ChaCha8Rng) -> Result<Self> {
        Self::build(cfg, &mut RandomInit { rng, dtype }, dtype)
    }

    pub fn build(cfg: &VectorFieldConfig, src: &mut dyn ParamSource, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let td = cfg.time_dim;
        let time = TimeEmbedding::build(cfg, src, dtype)?;
        let input = Linear::build(src, "vf.input", cfg.latent_dim, cfg.width(0), false)?;
        let mut down = Vec::new();
        let mut t_down = Vec::new();
        for i in 0..cfg.depth {
            t_down.push(Linear::build(src, &format!("vf.t_down{i}"), td, cfg.width(i), false)?);
            down.push(MlpBlock::build(src, &format!("vf.down{i}"), cfg.width(i), cfg.width(i + 1))?);
        }
        let wd = cfg.width(cfg.depth);
        let t_mid = Linear::build(src, "vf.t_mid", td, wd, false)?;
        let mid = MlpBlock::build(src, "vf.mid", wd, wd)?;
        let mut up = Vec::new();
        let mut t_up = Vec::new();
        for i in 0..cfg.depth {
            let input_w = 2 * cfg.width(i + 1);
            t_up.push(Linear::build(src, &format!("vf.t_up{i}"), td, input_w, false)?);
            up.push(MlpBlock::build(src, &format!("vf.up{i}"), input_w, cfg.width(i))?);
        }
        let output = Linear::build(src, "vf.output", cfg.width(0), cfg.latent_dim, cfg.zero_head)?;
        Ok(Self {
            cfg: cfg.clone(),
            time,
            input,
            down,
            mid,
            up,
            t_down,
            t_mid,
            t_up,
            output,
            dtype,
        })
    }

    pub fn config(&self) -> &VectorFieldConfig {
        &self.cfg
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn time_embed(&self, t: f64) -> Result<Vec<f64>> {
        check_time(t)?;
        let tt = Tensor::from_vec(vec![t], 1, &Device::Cpu)?;
        let e = self.time.forward(&tt)?;
        Ok(e.squeeze(0)?.to_dtype(DType::F64)?.to_vec1()?)
    }

    /// `z: (batch, l)`, `t: (batch,)` with values in `[0, 1]`.
    pub fn forward(&self, z: &Tensor, t: &Tensor) -> Result<Tensor> {
        let (b, l) = z.dims2()?;
        ensure!(
            l == self.cfg.latent_dim,
            Shape,
            "latent width {l} does not match {}",
            self.cfg.latent_dim
        );
        ensure!(t.dims1()? == b, Shape, "time batch does not match latent batch");
        let tv: Vec<f64> = t.to_dtype(DType::F64)?.to_vec1()?;
        for &tt in &tv {
            check_time(tt)?;
        }
        let e = self.time.forward(t)?.silu()?;
        let mut h = self.input.forward(z)?.silu()?;
        let mut skips = Vec::with_capacity(self.cfg.depth);
        for (block, tp) in self.down.iter().zip(&self.t_down) {
            h = block.forward(&(h + tp.forward(&e)?)?)?;
            skips.push(h.clone());
        }
        h = self.mid.forward(&(h + self.t_mid.forward(&e)?)?)?;
        for i in (0..self.cfg.depth).rev() {
            let cat = Tensor::cat(&[&h, &skips[i]], 1)?;
            h = self.up[i].forward(&(cat + self.t_up[i].forward(&e)?)?)?;
        }
        self.output.forward(&h)
    }

    /// Velocity for a single latent at a single time.
    pub fn velocity(&self, z: &[f64], t: f64) -> Result<Vec<f64>> {
        check_time(t)?;
        let zt = rows_to_tensor(&[z.to_vec()], self.dtype)?;
        let tt = Tensor::from_vec(vec![t], 1, &Device::Cpu)?.to_dtype(self.dtype)?;
        Ok(self.forward(&zt, &tt)?.squeeze(0)?.to_dtype(DType::F64)?.to_vec1()?)
    }

    pub fn named_vars(&self) -> Vec<NamedVar> {
        let mut out = Vec::new();
        self.time.proj.collect(&mut out);
        self.input.collect(&mut out);
        for (b, t) in self.down.iter().zip(&self.t_down) {
            t.collect(&mut out);
            b.collect(&mut out);
        }
        self.t_mid.collect(&mut out);
        self.mid.collect(&mut out);
        for (b, t) in self.up.iter().zip(&self.t_up) {
            t.collect(&mut out);
            b.collect(&mut out);
        }
        self.output.collect(&mut out);
        out
    }

    pub fn vars(&self) -> Vec<Var> {
        vars_only(self.named_vars())
    }

    pub fn deep_clone(&self) -> Result<Self> {
        Self::build(&self.cfg, &mut stored_copy(&self.named_vars(), self.dtype)?, self.dtype)
    }
}

/// Deterministic RNG from a seed.
pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests;
