//! VAE loss terms and the autoencoder training loop shared by pre-training and
//! equivariance fine-tuning.

use std::io::Write;
use std::path::Path;

use candle_core::{DType, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{NormStats, SeriesWindow};
use crate::equivariance;
use crate::error::{ensure, Error, Result};
use crate::nets::{
    reparameterize, windows_to_tensor, AutoencoderConfig, Decoder, Discriminator,
    DiscriminatorConfig, Encoder, PosteriorParams,
};
use crate::transforms::GroupAction;

/// Weights of the KL and adversarial terms in `recon + beta * kl + lambda * adv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VaeLossWeights {
    pub beta: f64,
    pub lambda: f64,
}

impl Default for VaeLossWeights {
    fn default() -> Self {
        Self {
            beta: 1e-2,
            lambda: 1e-1,
        }
    }
}

impl VaeLossWeights {
    /// Both weights must lie in `[0, 1)`; zero switches a term off.
    pub fn new(beta: f64, lambda: f64) -> Result<Self> {
        ensure!(
            (0.0..1.0).contains(&beta) && (0.0..1.0).contains(&lambda),
            InvalidArgument,
            "loss weights must lie in [0, 1): beta={beta}, lambda={lambda}"
        );
        Ok(Self { beta, lambda })
    }
}

/// Encoder, decoder and discriminator with the normalisation they were trained on.
#[derive(Debug, Clone)]
pub struct AutoencoderState {
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub discriminator: Discriminator,
    pub norm: NormStats,
    pub steps: u64,
}

impl AutoencoderState {
    pub fn new(
        ae: &AutoencoderConfig,
        disc: &DiscriminatorConfig,
        norm: NormStats,
        dtype: DType,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        ensure!(
            norm.channels() == ae.d && disc.d == ae.d,
            Shape,
            "channel counts disagree: autoencoder {}, discriminator {}, stats {}",
            ae.d,
            disc.d,
            norm.channels()
        );
        Ok(Self {
            encoder: Encoder::new(ae, dtype, rng)?,
            decoder: Decoder::new(ae, dtype, rng)?,
            discriminator: Discriminator::new(disc, dtype, rng)?,
            norm,
            steps: 0,
        })
    }

    pub fn config(&self) -> &AutoencoderConfig {
        self.encoder.config()
    }

    pub fn dtype(&self) -> DType {
        self.encoder.dtype()
    }

    pub fn deep_clone(&self) -> Result<Self> {
        Ok(Self {
            encoder: self.encoder.deep_clone()?,
            decoder: self.decoder.deep_clone()?,
            discriminator: self.discriminator.deep_clone()?,
            norm: self.norm.clone(),
            steps: self.steps,
        })
    }

    fn ae_vars(&self) -> Vec<Var> {
        let mut v = self.encoder.vars();
        v.extend(self.decoder.vars());
        v
    }

    /// Deterministic reconstruction through the posterior mean.
    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        let post = self.encoder.forward(x)?;
        self.decoder.forward(&post.mu)
    }

    /// Mean reconstruction MSE over `windows` (normalised units), evaluated in chunks.
    pub fn reconstruction_error(&self, windows: &[SeriesWindow]) -> Result<f64> {
        ensure!(!windows.is_empty(), InvalidArgument, "no windows to reconstruct");
        let mut total = 0.0;
        for chunk in windows.chunks(256) {
            let x = windows_to_tensor(chunk, self.dtype())?;
            let err = scalar(&recon_loss(&x, &self.reconstruct(&x)?)?)?;
            total += err * chunk.len() as f64;
        }
        Ok(total / windows.len() as f64)
    }
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Mean squared error over every entry.
pub fn recon_loss(x: &Tensor, x_hat: &Tensor) -> Result<Tensor> {
    ensure!(
        x.dims() == x_hat.dims(),
        Shape,
        "reconstruction {:?} does not match input {:?}",
        x_hat.dims(),
        x.dims()
    );
    Ok((x - x_hat)?.sqr()?.mean_all()?)
}

pub fn recon_loss_windows(x: &SeriesWindow, x_hat: &SeriesWindow) -> Result<f64> {
    x_hat.check_shape(x.d, x.m)?;
    let n = x.values.len() as f64;
    Ok(x.values
        .iter()
        .zip(&x_hat.values)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// `0.5 * sum(mu^2 + exp(logvar) - 1 - logvar)` per row, averaged over the batch.
pub fn kl_loss(p: &PosteriorParams) -> Result<Tensor> {
    let per_entry = ((p.mu.sqr()? + p.logvar.exp()?)? - 1.0)?.sub(&p.logvar)?;
    Ok((per_entry.sum(1)?.mean_all()? * 0.5)?)
}

/// Hinge losses from discriminator logits: `(generator, discriminator)`.
pub fn hinge_losses(real_logits: &Tensor, fake_logits: &Tensor) -> Result<(Tensor, Tensor)> {
    let d_real = (1.0 - real_logits)?.relu()?.mean_all()?;
    let d_fake = (fake_logits + 1.0)?.relu()?.mean_all()?;
    let gen = fake_logits.mean_all()?.neg()?;
    Ok((gen, (d_real + d_fake)?))
}

pub fn adversarial_losses(
    disc: &Discriminator,
    x_real: &Tensor,
    x_fake: &Tensor,
) -> Result<(Tensor, Tensor)> {
    ensure!(
        x_real.dims() == x_fake.dims(),
        Shape,
        "real {:?} and fake {:?} batches differ",
        x_real.dims(),
        x_fake.dims()
    );
    hinge_losses(&disc.forward(x_real)?, &disc.forward(x_fake)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub disc_lr: f64,
    /// Steps (counted on the state) before the adversarial term switches on.
    pub adv_start_step: u64,
    pub weights: VaeLossWeights,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            lr: 1e-3,
            disc_lr: 1e-3,
            adv_start_step: 0,
            weights: VaeLossWeights::default(),
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_size >= 1, InvalidArgument, "batch_size must be positive");
        ensure!(self.lr > 0.0 && self.disc_lr > 0.0, InvalidArgument, "learning rates must be positive");
        VaeLossWeights::new(self.weights.beta, self.weights.lambda)?;
        Ok(())
    }
}

/// Equivariance term added to the VAE objective during fine-tuning.
#[derive(Debug, Clone, Copy)]
pub struct EqPenalty<'a> {
    pub action: &'a GroupAction,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub recon: f64,
    pub kl: f64,
    pub adv: f64,
    pub disc: f64,
    pub eq: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub recon: f64,
    pub kl: f64,
    pub adv: f64,
    pub disc: f64,
    pub eq: f64,
    pub total: f64,
}

/// Optimiser state for one training run.
pub struct AeOptimisers {
    ae: AdamW,
    disc: AdamW,
}

fn adam(vars: Vec<Var>, lr: f64) -> Result<AdamW> {
    Ok(AdamW::new(
        vars,
        ParamsAdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        },
    )?)
}

pub(crate) fn plain_adam(vars: Vec<Var>, lr: f64) -> Result<AdamW> {
    adam(vars, lr)
}

impl AeOptimisers {
    pub fn new(state: &AutoencoderState, opts: &TrainOptions) -> Result<Self> {
        Ok(Self {
            ae: adam(state.ae_vars(), opts.lr)?,
            disc: adam(state.discriminator.vars(), opts.disc_lr)?,
        })
    }
}

fn finite(v: f64, what: &str, step: u64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{what} loss at step {step}")))
    }
}

/// One discriminator update followed by one autoencoder update on a normalised
/// `(batch, d, m)` tensor. Reported terms are evaluated before the autoencoder update.
pub fn vae_step(
    state: &mut AutoencoderState,
    x: &Tensor,
    opts: &TrainOptions,
    optim: &mut AeOptimisers,
    penalty: Option<EqPenalty<'_>>,
    rng: &mut ChaCha8Rng,
) -> Result<StepLosses> {
    let step = state.steps;
    let w = opts.weights;
    let post = state.encoder.forward(x)?;
    let z = reparameterize(&post, rng)?;
    let x_hat = state.decoder.forward(&z)?;

    let adv_on = w.lambda > 0.0 && step >= opts.adv_start_step;
    let mut disc_loss = 0.0;
    if adv_on {
        let (_, d_loss) = adversarial_losses(&state.discriminator, x, &x_hat.detach())?;
        disc_loss = finite(scalar(&d_loss)?, "discriminator", step)?;
        optim.disc.backward_step(&d_loss)?;
    }

    let recon = recon_loss(x, &x_hat)?;
    let kl = kl_loss(&post)?;
    let mut total = (&recon + (&kl * w.beta)?)?;
    let mut adv_v = 0.0;
    if adv_on {
        let gen = state.discriminator.forward(&x_hat)?.mean_all()?.neg()?;
        adv_v = finite(scalar(&gen)?, "adversarial", step)?;
        total = (total + (gen * w.lambda)?)?;
    }
    let mut eq_v = 0.0;
    if let Some(p) = penalty.filter(|p| p.weight != 0.0) {
        let (b, d, _) = x.dims3()?;
        let params = equivariance::sample_param_tensor(p.action, b, d, x.dtype(), rng)?;
        let eq = equivariance::equivariance_loss_tensor(state, x, p.action, &params)?;
        eq_v = finite(scalar(&eq)?, "equivariance", step)?;
        total = (total + (eq * p.weight)?)?;
    }
    let losses = StepLosses {
        recon: finite(scalar(&recon)?, "reconstruction", step)?,
        kl: finite(scalar(&kl)?, "KL", step)?,
        adv: adv_v,
        disc: disc_loss,
        eq: eq_v,
        total: finite(scalar(&total)?, "total", step)?,
    };
    optim.ae.backward_step(&total)?;
    state.steps += 1;
    Ok(losses)
}

/// Runs `opts.epochs` shuffled passes over normalised `train` windows.
pub fn run_epochs(
    state: &mut AutoencoderState,
    train: &[SeriesWindow],
    opts: &TrainOptions,
    penalty: Option<EqPenalty<'_>>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<EpochLog>> {
    opts.validate()?;
    ensure!(!train.is_empty(), InvalidArgument, "training set is empty");
    let (d, m) = (state.config().d, state.config().m);
    for w in train {
        w.check_shape(d, m)?;
    }
    let mut optim = AeOptimisers::new(state, opts)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        order.shuffle(rng);
        let mut sums = StepLosses::default();
        let mut batches = 0usize;
        for idx in order.chunks(opts.batch_size) {
            let batch: Vec<SeriesWindow> = idx.iter().map(|&i| train[i].clone()).collect();
            let x = windows_to_tensor(&batch, state.dtype())?;
            let s = vae_step(state, &x, opts, &mut optim, penalty, rng)?;
            sums.recon += s.recon;
            sums.kl += s.kl;
            sums.adv += s.adv;
            sums.disc += s.disc;
            sums.eq += s.eq;
            sums.total += s.total;
            batches += 1;
        }
        let n = batches as f64;
        let entry = EpochLog {
            epoch: epoch + 1,
            recon: sums.recon / n,
            kl: sums.kl / n,
            adv: sums.adv / n,
            disc: sums.disc / n,
            eq: sums.eq / n,
            total: sums.total / n,
        };
        log::debug!("ae epoch {}: {entry:?}", entry.epoch);
        log.push(entry);
    }
    Ok(log)
}

/// Pre-trains the autoencoder (no equivariance term).
pub fn train_vae(
    state: &mut AutoencoderState,
    train: &[SeriesWindow],
    opts: &TrainOptions,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<EpochLog>> {
    run_epochs(state, train, opts, None, rng)
}

/// Writes `epoch,recon,kl,adv,total` (plus `eq` when requested).
pub fn write_loss_log(path: impl AsRef<Path>, log: &[EpochLog], with_eq: bool) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("epoch,recon,kl,adv,total");
    if with_eq {
        out.push_str(",eq");
    }
    out.push('\n');
    for e in log {
        out.push_str(&format!("{},{},{},{},{}", e.epoch, e.recon, e.kl, e.adv, e.total));
        if with_eq {
            out.push_str(&format!(",{}", e.eq));
        }
        out.push('\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}
