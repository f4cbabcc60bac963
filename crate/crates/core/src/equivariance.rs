//! Equivariance penalty `||D(E(g x)) - g D(E(x))||^2`, fine-tuning with it, and a
//! Monte-Carlo diagnostic of the equivariance error.

use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SeriesWindow;
use crate::error::{ensure, Result};
use crate::nets::windows_to_tensor;
use crate::transforms::{ActionKind, ActionParams, GroupAction};
use crate::vae::{self, AutoencoderState, EpochLog, EqPenalty, TrainOptions};

/// Deterministic reconstruction `D(E(x))` of a `(batch, d, m)` tensor.
pub trait Reconstructor {
    fn reconstruct_batch(&self, x: &Tensor) -> Result<Tensor>;
}

impl Reconstructor for AutoencoderState {
    fn reconstruct_batch(&self, x: &Tensor) -> Result<Tensor> {
        self.reconstruct(x)
    }
}

/// One parameter draw per batch element: `(batch, 1)` or `(batch, d)`.
pub fn sample_param_tensor(
    action: &GroupAction,
    batch: usize,
    d: usize,
    dtype: DType,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let per = action.param_len(d);
    if per == 0 {
        return Ok(Tensor::zeros((batch, 1), dtype, &Device::Cpu)?);
    }
    let flat: Vec<f64> = (0..batch)
        .flat_map(|_| action.sample_params(d, rng).values)
        .collect();
    Ok(Tensor::from_vec(flat, (batch, per), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Per-window mean squared equivariance error, shape `(batch,)`.
pub fn equivariance_errors<R: Reconstructor + ?Sized>(
    model: &R,
    x: &Tensor,
    action: &GroupAction,
    params: &Tensor,
) -> Result<Tensor> {
    let transformed_first = model.reconstruct_batch(&action.apply_tensor(params, x)?)?;
    let transformed_after = action.apply_tensor(params, &model.reconstruct_batch(x)?)?;
    ensure!(
        transformed_first.dims() == x.dims(),
        Shape,
        "reconstruction shape {:?} differs from input {:?}",
        transformed_first.dims(),
        x.dims()
    );
    Ok((transformed_first - transformed_after)?.sqr()?.flatten_from(1)?.mean(1)?)
}

/// Batch equivariance loss, averaged over every entry.
pub fn equivariance_loss_tensor<R: Reconstructor + ?Sized>(
    model: &R,
    x: &Tensor,
    action: &GroupAction,
    params: &Tensor,
) -> Result<Tensor> {
    Ok(equivariance_errors(model, x, action, params)?.mean_all()?)
}

pub fn equivariance_loss<R: Reconstructor + ?Sized>(
    model: &R,
    x: &SeriesWindow,
    action: &GroupAction,
    params: &ActionParams,
    dtype: DType,
) -> Result<f64> {
    let xt = windows_to_tensor(std::slice::from_ref(x), dtype)?;
    let p = if params.values.is_empty() {
        vec![action.neutral()]
    } else {
        params.values.clone()
    };
    let pt = Tensor::from_vec(p.clone(), (1, p.len()), &Device::Cpu)?.to_dtype(dtype)?;
    vae::scalar(&equivariance_loss_tensor(model, &xt, action, &pt)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneOptions {
    pub train: TrainOptions,
    /// Weight on the equivariance term; the fine-tuning objective is
    /// `L_VAE + weight * L_eq`.
    pub weight: f64,
}

impl Default for FinetuneOptions {
    fn default() -> Self {
        Self {
            train: TrainOptions {
                epochs: 25,
                ..TrainOptions::default()
            },
            weight: 1.0,
        }
    }
}

/// Fine-tunes a pre-trained autoencoder on normalised windows with one action
/// parameter drawn per training sample.
pub fn finetune(
    state: &mut AutoencoderState,
    train: &[SeriesWindow],
    action: &GroupAction,
    opts: &FinetuneOptions,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<EpochLog>> {
    ensure!(
        opts.weight >= 0.0 && opts.weight.is_finite(),
        InvalidArgument,
        "equivariance weight must be non-negative"
    );
    let penalty = EqPenalty {
        action,
        weight: opts.weight,
    };
    vae::run_epochs(state, train, &opts.train, Some(penalty), rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivarianceReport {
    pub action: ActionKind,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl EquivarianceReport {
    pub fn std_error(&self) -> f64 {
        self.std / (self.n as f64).sqrt()
    }
}

/// Mean and standard deviation of the equivariance error over `windows` with
/// `n_params_per_window` parameter draws each.
pub fn measure_equivariance<R: Reconstructor + ?Sized>(
    model: &R,
    windows: &[SeriesWindow],
    action: &GroupAction,
    n_params_per_window: usize,
    dtype: DType,
    rng: &mut ChaCha8Rng,
) -> Result<EquivarianceReport> {
    ensure!(!windows.is_empty(), InvalidArgument, "no windows to measure");
    ensure!(n_params_per_window >= 1, InvalidArgument, "need at least one draw per window");
    let mut errors = Vec::with_capacity(windows.len() * n_params_per_window);
    for _ in 0..n_params_per_window {
        for chunk in windows.chunks(256) {
            let x = windows_to_tensor(chunk, dtype)?;
            let params = sample_param_tensor(action, chunk.len(), chunk[0].d, dtype, rng)?;
            let e: Vec<f64> = equivariance_errors(model, &x, action, &params)?
                .to_dtype(DType::F64)?
                .to_vec1()?;
            errors.extend(e);
        }
    }
    let n = errors.len();
    let mean = errors.iter().sum::<f64>() / n as f64;
    let var = errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n as f64;
    Ok(EquivarianceReport {
        action: action.kind(),
        mean,
        std: var.sqrt(),
        n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{normalize_all, normalize_fit};
    use crate::nets::{seeded, AutoencoderConfig, DiscriminatorConfig};
    use crate::synthetic::{sinusoids, SinusoidSpec};
    use crate::vae::{train_vae, VaeLossWeights};

    struct Affine(f64);

    impl Reconstructor for Affine {
        fn reconstruct_batch(&self, x: &Tensor) -> Result<Tensor> {
            Ok((x * self.0)?)
        }
    }

    fn windows(n: usize, seed: u64) -> Vec<SeriesWindow> {
        let spec = SinusoidSpec { d: 2, m: 16, ..SinusoidSpec::default() };
        sinusoids(&spec, n, &mut seeded(seed))
    }

    #[test]
    fn identity_stub_is_perfectly_equivariant() {
        let mut rng = seeded(1);
        for action in [
            GroupAction::translation(-0.5, 0.5, true).unwrap(),
            GroupAction::scaling(0.3, 1.7, false).unwrap(),
        ] {
            for w in windows(5, 2) {
                let p = action.sample_params(2, &mut rng);
                let l = equivariance_loss(&Affine(1.0), &w, &action, &p, DType::F64).unwrap();
                assert_eq!(l, 0.0);
            }
            let r = measure_equivariance(&Affine(1.0), &windows(8, 3), &action, 3, DType::F64, &mut rng).unwrap();
            assert_eq!(r.mean, 0.0);
        }
    }

    #[test]
    fn doubling_stub_under_translation_gives_delta_squared() {
        let action = GroupAction::translation(-1.0, 1.0, false).unwrap();
        for delta in [0.3, -0.7, 0.05] {
            let w = SeriesWindow::constant(2, 16, 0.25);
            let l = equivariance_loss(&Affine(2.0), &w, &action, &ActionParams::shared(delta), DType::F64).unwrap();
            assert!((l - delta * delta).abs() < 1e-12, "delta={delta} loss={l}");
        }
    }

    fn toy_state(seed: u64) -> (AutoencoderState, Vec<SeriesWindow>) {
        let raw = windows(40, seed);
        let norm = normalize_fit(&raw).unwrap();
        let train = normalize_all(&raw, &norm).unwrap();
        let ae = AutoencoderConfig { d: 2, m: 16, hidden: 6, latent_dim: 4, ..Default::default() };
        let disc = DiscriminatorConfig { d: 2, hidden: 6, ..Default::default() };
        let state = AutoencoderState::new(&ae, &disc, norm, DType::F32, &mut seeded(seed)).unwrap();
        (state, train)
    }

    #[test]
    fn identity_action_gives_exact_zero_for_random_models() {
        for seed in 0..3 {
            let (state, train) = toy_state(seed);
            let id = GroupAction::identity();
            for w in &train[..5] {
                let l = equivariance_loss(&state, w, &id, &ActionParams { values: vec![] }, DType::F32).unwrap();
                assert_eq!(l, 0.0);
            }
            let r = measure_equivariance(&state, &train, &id, 2, DType::F32, &mut seeded(1)).unwrap();
            assert_eq!((r.mean, r.std), (0.0, 0.0));
        }
    }

    #[test]
    fn zero_weight_finetune_reproduces_plain_training() {
        let (base, train) = toy_state(7);
        let opts = TrainOptions {
            epochs: 3,
            batch_size: 8,
            weights: VaeLossWeights::default(),
            ..TrainOptions::default()
        };
        let mut a = base.deep_clone().unwrap();
        let log_a = train_vae(&mut a, &train, &opts, &mut seeded(9)).unwrap();
        let mut b = base.deep_clone().unwrap();
        let action = GroupAction::scaling(0.3, 1.7, true).unwrap();
        let ft = FinetuneOptions { train: opts.clone(), weight: 0.0 };
        let log_b = finetune(&mut b, &train, &action, &ft, &mut seeded(9)).unwrap();
        assert_eq!(log_a, log_b);
        for ((_, va), (_, vb)) in a.decoder.named_vars().iter().zip(b.decoder.named_vars().iter()) {
            let va: Vec<f32> = va.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
            let vb: Vec<f32> = vb.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(va, vb);
        }
    }

    #[test]
    fn finetune_zero_epochs_is_a_no_op_and_logs_eq() {
        let (mut state, train) = toy_state(4);
        let action = GroupAction::translation(-0.5, 0.5, true).unwrap();
        let mut opts = FinetuneOptions::default();
        opts.train.epochs = 0;
        assert!(finetune(&mut state, &train, &action, &opts, &mut seeded(0)).unwrap().is_empty());
        assert_eq!(state.steps, 0);
        opts.train.epochs = 1;
        opts.train.batch_size = 20;
        let log = finetune(&mut state, &train, &action, &opts, &mut seeded(0)).unwrap();
        assert!(log[0].eq > 0.0);
        assert!((log[0].total - (log[0].recon + 0.01 * log[0].kl + 0.1 * log[0].adv + log[0].eq)).abs() < 1e-5);
    }

    #[test]
    fn measurement_estimate_is_stable() {
        let (state, train) = toy_state(11);
        let action = GroupAction::scaling(0.3, 1.7, true).unwrap();
        let a = measure_equivariance(&state, &train, &action, 4, DType::F32, &mut seeded(1)).unwrap();
        let b = measure_equivariance(&state, &train, &action, 8, DType::F32, &mut seeded(2)).unwrap();
        assert_eq!(a.n, 160);
        let se = (a.std_error().powi(2) + b.std_error().powi(2)).sqrt();
        assert!((a.mean - b.mean).abs() < 2.0 * se, "{a:?} vs {b:?}");
    }

    #[test]
    fn finetuning_reduces_equivariance_error_on_toy_data() {
        let spec = SinusoidSpec { d: 1, m: 32, ..SinusoidSpec::default() };
        let raw = sinusoids(&spec, 160, &mut seeded(21));
        let norm = normalize_fit(&raw[..120]).unwrap();
        let all = normalize_all(&raw, &norm).unwrap();
        let (train, held) = all.split_at(120);
        let ae = AutoencoderConfig { d: 1, m: 32, hidden: 8, latent_dim: 8, ..Default::default() };
        let disc = DiscriminatorConfig { d: 1, hidden: 8, ..Default::default() };
        let mut state = AutoencoderState::new(&ae, &disc, norm, DType::F32, &mut seeded(22)).unwrap();
        let weights = crate::vae::VaeLossWeights { beta: 1e-3, ..Default::default() };
        let opts = TrainOptions { epochs: 60, batch_size: 16, weights, ..TrainOptions::default() };
        train_vae(&mut state, train, &opts, &mut seeded(23)).unwrap();
        let action = GroupAction::default_for(ActionKind::Scaling, 1);
        let before = measure_equivariance(&state, held, &action, 4, DType::F32, &mut seeded(24)).unwrap();
        let ft = FinetuneOptions { train: TrainOptions { epochs: 25, ..opts }, weight: 1.0 };
        finetune(&mut state, train, &action, &ft, &mut seeded(25)).unwrap();
        let after = measure_equivariance(&state, held, &action, 4, DType::F32, &mut seeded(24)).unwrap();
        assert!(after.mean < before.mean, "before {before:?} after {after:?}");
    }
}
