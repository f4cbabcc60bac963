//! Flow-matching targets, latent standardisation and the vector-field training loop.

use std::io::Write;
use std::path::Path;

use candle_core::{DType, Tensor};
use candle_nn::Optimizer;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SeriesWindow;
use crate::error::{ensure, Error, Result};
use crate::nets::{
    reparameterize, rows_to_tensor, standard_normal, tensor_to_rows, uniform01,
    windows_to_tensor, VectorField, VectorFieldConfig,
};
use crate::vae::{plain_adam, scalar, AutoencoderState};

pub const STD_FLOOR: f64 = 1e-6;

/// Per-dimension affine map applied to encoded latents before flow training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentNormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LatentNormStats {
    pub fn identity(l: usize) -> Self {
        Self {
            mean: vec![0.0; l],
            std: vec![1.0; l],
        }
    }

    /// Population mean and std per dimension, std floored at [`STD_FLOOR`].
    pub fn fit(latents: &[Vec<f64>]) -> Result<Self> {
        ensure!(!latents.is_empty(), InvalidArgument, "no latents to fit");
        let l = latents[0].len();
        ensure!(latents.iter().all(|z| z.len() == l), Shape, "ragged latent rows");
        let n = latents.len() as f64;
        let mut mean = vec![0.0; l];
        for z in latents {
            for (m, v) in mean.iter_mut().zip(z) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; l];
        for z in latents {
            for ((s, v), m) in var.iter_mut().zip(z).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let std = var.into_iter().map(|v| v.sqrt().max(STD_FLOOR)).collect();
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, z: &[f64]) -> Result<()> {
        ensure!(
            z.len() == self.dim(),
            Shape,
            "latent has {} dimensions, stats have {}",
            z.len(),
            self.dim()
        );
        Ok(())
    }

    pub fn standardise(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check(z)?;
        Ok(z.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect())
    }

    pub fn destandardise(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check(z)?;
        Ok(z.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| v * s + m)
            .collect())
    }
}

/// `z_t = t z1 + (1 - t) z0` and the constant velocity `u = z1 - z0`.
pub fn fm_target(z0: &[f64], z1: &[f64], t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    ensure!(z0.len() == z1.len(), Shape, "z0 has {} dims, z1 has {}", z0.len(), z1.len());
    ensure!((0.0..=1.0).contains(&t), InvalidArgument, "time {t} outside [0, 1]");
    let zt = z0.iter().zip(z1).map(|(a, b)| t * b + (1.0 - t) * a).collect();
    let u = z0.iter().zip(z1).map(|(a, b)| b - a).collect();
    Ok((zt, u))
}

/// Anything that maps a `(batch, l)` latent and `(batch,)` times to velocities.
pub trait FlowModel {
    fn predict(&self, z: &Tensor, t: &Tensor) -> Result<Tensor>;
}

impl FlowModel for VectorField {
    fn predict(&self, z: &Tensor, t: &Tensor) -> Result<Tensor> {
        self.forward(z, t)
    }
}

/// Mean over batch and dimensions of `(u(z_t, t) - (z1 - z0))^2`.
pub fn fm_loss<F: FlowModel + ?Sized>(field: &F, z0: &Tensor, z1: &Tensor, t: &Tensor) -> Result<Tensor> {
    ensure!(z0.dims() == z1.dims(), Shape, "z0 {:?} vs z1 {:?}", z0.dims(), z1.dims());
    let (b, _) = z0.dims2()?;
    ensure!(t.dims1()? == b, Shape, "time batch does not match latent batch");
    let tc = t.reshape((b, 1))?;
    let zt = (z1.broadcast_mul(&tc)? + z0.broadcast_mul(&(1.0 - &tc)?)?)?;
    let target = (z1 - z0)?;
    let pred = field.predict(&zt, t)?;
    ensure!(pred.dims() == target.dims(), Shape, "field output {:?}", pred.dims());
    Ok((pred - target)?.sqr()?.mean_all()?)
}

/// How the flow's training targets are drawn from the posterior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentSource {
    #[default]
    Sample,
    Mean,
}

/// Encodes normalised windows and returns standardised latents with the fitted stats.
pub fn encode_dataset(
    ae: &AutoencoderState,
    windows: &[SeriesWindow],
    source: LatentSource,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Vec<f64>>, LatentNormStats)> {
    ensure!(!windows.is_empty(), InvalidArgument, "no windows to encode");
    let mut raw = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(256) {
        let x = windows_to_tensor(chunk, ae.dtype())?;
        let post = ae.encoder.forward(&x)?;
        let z = match source {
            LatentSource::Sample => reparameterize(&post, rng)?,
            LatentSource::Mean => post.mu,
        };
        raw.extend(tensor_to_rows(&z)?);
    }
    let stats = LatentNormStats::fit(&raw)?;
    let latents = raw.iter().map(|z| stats.standardise(z)).collect::<Result<_>>()?;
    Ok((latents, stats))
}

/// Trained vector field together with the latent standardisation it expects.
#[derive(Debug, Clone)]
pub struct VectorFieldState {
    pub field: VectorField,
    pub stats: LatentNormStats,
    pub steps: u64,
}

impl VectorFieldState {
    pub fn new(cfg: &VectorFieldConfig, stats: LatentNormStats, dtype: DType, rng: &mut ChaCha8Rng) -> Result<Self> {
        ensure!(
            stats.dim() == cfg.latent_dim,
            Shape,
            "stats have {} dimensions, field expects {}",
            stats.dim(),
            cfg.latent_dim
        );
        Ok(Self {
            field: VectorField::new(cfg, dtype, rng)?,
            stats,
            steps: 0,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.field.config().latent_dim
    }

    pub fn deep_clone(&self) -> Result<Self> {
        Ok(Self {
            field: self.field.deep_clone()?,
            stats: self.stats.clone(),
            steps: self.steps,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowTrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for FlowTrainOptions {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch_size: 32,
            lr: 1e-3,
        }
    }
}

impl FlowTrainOptions {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_size >= 1, InvalidArgument, "batch_size must be at least 1");
        ensure!(
            self.lr > 0.0 && self.lr.is_finite(),
            InvalidArgument,
            "learning rate must be positive, got {}",
            self.lr
        );
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowEpochLog {
    pub epoch: usize,
    pub loss: f64,
}

/// Regresses the field onto `z1 - z0` with `z1` from `latents` (already
/// standardised), `z0 ~ N(0, I)` and `t ~ U[0, 1]`.
pub fn train_flow(
    state: &mut VectorFieldState,
    latents: &[Vec<f64>],
    opts: &FlowTrainOptions,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<FlowEpochLog>> {
    opts.validate()?;
    ensure!(!latents.is_empty(), InvalidArgument, "latent set is empty");
    let l = state.latent_dim();
    ensure!(
        latents.iter().all(|z| z.len() == l),
        Shape,
        "latents must have {l} dimensions"
    );
    let dtype = state.field.dtype();
    let mut optim = plain_adam(state.field.vars(), opts.lr)?;
    let mut order: Vec<usize> = (0..latents.len()).collect();
    let mut log = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        order.shuffle(rng);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for idx in order.chunks(opts.batch_size) {
            let rows: Vec<Vec<f64>> = idx.iter().map(|&i| latents[i].clone()).collect();
            let z1 = rows_to_tensor(&rows, dtype)?;
            let z0 = standard_normal(&[idx.len(), l], dtype, rng)?;
            let t = uniform01(idx.len(), dtype, rng)?;
            let loss = fm_loss(&state.field, &z0, &z1, &t)?;
            let v = scalar(&loss)?;
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("flow loss at step {}", state.steps)));
            }
            optim.backward_step(&loss)?;
            state.steps += 1;
            sum += v;
            batches += 1;
        }
        let entry = FlowEpochLog {
            epoch: epoch + 1,
            loss: sum / batches as f64,
        };
        log::debug!("flow epoch {}: {}", entry.epoch, entry.loss);
        log.push(entry);
    }
    Ok(log)
}

/// Writes `epoch,fm_loss`.
pub fn write_flow_log(path: impl AsRef<Path>, log: &[FlowEpochLog]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("epoch,fm_loss\n");
    for e in log {
        out.push_str(&format!("{},{}\n", e.epoch, e.loss));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}
