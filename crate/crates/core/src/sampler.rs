//! ODE integration of the latent field from noise to data, decoding, and timing.

use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{denormalize_all, SeriesWindow};
use crate::error::{ensure, Error, Result};
use crate::flow::VectorFieldState;
use crate::nets::{tensor_to_windows, VectorField};
use crate::vae::AutoencoderState;

pub const MIN_STEP: f64 = 1e-10;
const MAX_STEPS: usize = 100_000;
const CHUNK: usize = 500;

/// A velocity field evaluated on `batch` latents stored row-major in one slice.
pub trait VelocityField {
    fn dim(&self) -> usize;
    fn eval(&self, z: &[f64], t: f64) -> Result<Vec<f64>>;
}

impl VelocityField for VectorField {
    fn dim(&self) -> usize {
        self.config().latent_dim
    }

    fn eval(&self, z: &[f64], t: f64) -> Result<Vec<f64>> {
        let l = self.dim();
        let b = z.len() / l;
        let zt = Tensor::from_slice(z, (b, l), &Device::Cpu)?.to_dtype(self.dtype())?;
        let tt = Tensor::from_vec(vec![t; b], b, &Device::Cpu)?.to_dtype(self.dtype())?;
        Ok(self.forward(&zt, &tt)?.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?)
    }
}

/// Wraps a closure `f(z_row, t) -> velocity_row` applied independently to each row.
pub struct FnField<F> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(&[f64], f64) -> Vec<f64>> VelocityField for FnField<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, z: &[f64], t: f64) -> Result<Vec<f64>> {
        Ok(z.chunks(self.dim).flat_map(|row| (self.f)(row, t)).collect())
    }
}

fn check_state(z: &[f64], what: &str, step: usize) -> Result<()> {
    if z.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} state at step {step}")))
    }
}

fn check_batch<F: VelocityField + ?Sized>(field: &F, z0: &[f64]) -> Result<()> {
    let l = field.dim();
    ensure!(l > 0 && z0.len() % l == 0, Shape, "state length {} is not a multiple of {l}", z0.len());
    Ok(())
}

fn eval_checked<F: VelocityField + ?Sized>(field: &F, z: &[f64], t: f64) -> Result<Vec<f64>> {
    let v = field.eval(z, t.min(1.0))?;
    ensure!(v.len() == z.len(), Shape, "field returned {} values for {}", v.len(), z.len());
    Ok(v)
}

/// Fixed-step explicit Euler from `t = 0` to `t = 1`.
pub fn euler_integrate<F: VelocityField + ?Sized>(field: &F, z0: &[f64], steps: usize) -> Result<Vec<f64>> {
    ensure!(steps >= 1, InvalidArgument, "Euler needs at least one step");
    check_batch(field, z0)?;
    let h = 1.0 / steps as f64;
    let mut z = z0.to_vec();
    for k in 0..steps {
        let v = eval_checked(field, &z, k as f64 * h)?;
        for (zi, vi) in z.iter_mut().zip(&v) {
            *zi += h * vi;
        }
        check_state(&z, "Euler", k + 1)?;
    }
    Ok(z)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveResult {
    pub z: Vec<f64>,
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
}

const C: [f64; 6] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0];
const A: [&[f64]; 6] = [
    &[],
    &[1.0 / 5.0],
    &[3.0 / 40.0, 9.0 / 40.0],
    &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
    &[19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
    &[9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0],
];
const B: [f64; 6] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0];
/// Fifth-order minus embedded fourth-order weights (the last entry multiplies `k7`).
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// Max over rows of the per-row RMS of `v / (atol + rtol * scale)`.
fn scaled_norm(v: &[f64], y: &[f64], y2: Option<&[f64]>, l: usize, rtol: f64, atol: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for r in 0..v.len() / l {
        let mut s = 0.0;
        for j in r * l..(r + 1) * l {
            let scale = y2.map_or(y[j].abs(), |y2| y[j].abs().max(y2[j].abs()));
            let e = v[j] / (atol + rtol * scale);
            s += e * e;
        }
        worst = worst.max((s / l as f64).sqrt());
    }
    worst
}

fn initial_step<F: VelocityField + ?Sized>(
    field: &F,
    z: &[f64],
    f0: &[f64],
    rtol: f64,
    atol: f64,
    evals: &mut usize,
) -> Result<f64> {
    let l = field.dim();
    let d0 = scaled_norm(z, z, None, l, rtol, atol);
    let d1 = scaled_norm(f0, z, None, l, rtol, atol);
    if d1 == 0.0 {
        return Ok(1.0);
    }
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let z1: Vec<f64> = z.iter().zip(f0).map(|(a, b)| a + h0 * b).collect();
    let f1 = eval_checked(field, &z1, h0)?;
    *evals += 1;
    let diff: Vec<f64> = f1.iter().zip(f0).map(|(a, b)| a - b).collect();
    let d2 = scaled_norm(&diff, z, None, l, rtol, atol) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    Ok((100.0 * h0).min(h1).min(1.0))
}

/// Dormand-Prince 5(4) with PI step-size control from `t = 0` to `t = 1`.
/// Every row of a batched state shares the step size, set by the worst row.
pub fn adaptive_integrate<F: VelocityField + ?Sized>(
    field: &F,
    z0: &[f64],
    rtol: f64,
    atol: f64,
) -> Result<AdaptiveResult> {
    ensure!(rtol > 0.0 && atol > 0.0, InvalidArgument, "tolerances must be positive");
    check_batch(field, z0)?;
    let l = field.dim();
    let n = z0.len();
    let mut z = z0.to_vec();
    let mut t = 0.0f64;
    let mut evals = 0usize;
    let mut k1 = eval_checked(field, &z, 0.0)?;
    evals += 1;
    let mut h = initial_step(field, &z, &k1, rtol, atol, &mut evals)?;
    let (mut accepted, mut rejected) = (0usize, 0usize);
    let mut err_old: f64 = 1e-4;
    let mut last_rejected = false;
    let mut stage = vec![0.0; n];
    while t < 1.0 {
        if h < MIN_STEP {
            return Err(Error::Solver(format!("step size {h:e} underflow at t = {t}")));
        }
        if accepted + rejected >= MAX_STEPS {
            return Err(Error::Solver(format!("exceeded {MAX_STEPS} steps at t = {t}")));
        }
        if t + h > 1.0 {
            h = 1.0 - t;
        }
        let mut ks: Vec<Vec<f64>> = vec![k1.clone()];
        for s in 1..6 {
            for (j, st) in stage.iter_mut().enumerate() {
                *st = z[j] + h * A[s].iter().zip(&ks).map(|(a, k)| a * k[j]).sum::<f64>();
            }
            ks.push(eval_checked(field, &stage, t + C[s] * h)?);
        }
        let z_new: Vec<f64> = (0..n)
            .map(|j| z[j] + h * B.iter().zip(&ks).map(|(b, k)| b * k[j]).sum::<f64>())
            .collect();
        let k7 = eval_checked(field, &z_new, t + h)?;
        evals += 6;
        let err_vec: Vec<f64> = (0..n)
            .map(|j| h * (E.iter().zip(ks.iter().chain(std::iter::once(&k7))).map(|(e, k)| e * k[j]).sum::<f64>()))
            .collect();
        let err = scaled_norm(&err_vec, &z, Some(&z_new), l, rtol, atol);
        if !err.is_finite() {
            return Err(Error::NonFinite(format!("adaptive error estimate at step {}", accepted + 1)));
        }
        if err <= 1.0 {
            t = if 1.0 - (t + h) < 1e-14 { 1.0 } else { t + h };
            z = z_new;
            check_state(&z, "adaptive", accepted + 1)?;
            k1 = k7;
            accepted += 1;
            let mut fac = if err == 0.0 {
                10.0
            } else {
                0.9 * err.powf(-0.17) * err_old.powf(0.04)
            };
            fac = fac.clamp(0.2, 10.0);
            if last_rejected {
                fac = fac.min(1.0);
            }
            err_old = err.max(1e-4);
            h *= fac;
            last_rejected = false;
        } else {
            rejected += 1;
            h *= (0.9 * err.powf(-0.2)).max(0.2);
            last_rejected = true;
        }
    }
    Ok(AdaptiveResult {
        z,
        accepted,
        rejected,
        evaluations: evals,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SolverSpec {
    Euler { steps: usize },
    Adaptive { rtol: f64, atol: f64 },
}

impl SolverSpec {
    pub const DEFAULT_TOL: f64 = 1e-5;

    pub fn euler(steps: usize) -> Self {
        Self::Euler { steps }
    }

    pub fn adaptive() -> Self {
        Self::Adaptive {
            rtol: Self::DEFAULT_TOL,
            atol: Self::DEFAULT_TOL,
        }
    }

    /// Adaptive for univariate data, Euler-10 otherwise.
    pub fn default_for(d: usize) -> Self {
        if d == 1 {
            Self::adaptive()
        } else {
            Self::euler(10)
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Euler { steps } => ensure!(steps >= 1, InvalidArgument, "Euler steps must be at least 1"),
            Self::Adaptive { rtol, atol } => ensure!(
                rtol > 0.0 && atol > 0.0,
                InvalidArgument,
                "solver tolerances must be positive"
            ),
        }
        Ok(())
    }

    pub fn integrate<F: VelocityField + ?Sized>(&self, field: &F, z0: &[f64]) -> Result<Vec<f64>> {
        match *self {
            Self::Euler { steps } => euler_integrate(field, z0, steps),
            Self::Adaptive { rtol, atol } => Ok(adaptive_integrate(field, z0, rtol, atol)?.z),
        }
    }
}

/// Draws `n` standard-normal starting points, one ChaCha stream per sample so a
/// sample's noise does not depend on how many others are drawn.
pub fn initial_noise(n: usize, l: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let base = rng.next_u64();
    (0..n)
        .map(|i| {
            let mut sub = ChaCha8Rng::seed_from_u64(base);
            sub.set_stream(i as u64);
            (0..l).map(|_| StandardNormal.sample(&mut sub)).collect()
        })
        .collect()
}

/// Integrates standardised noise to `t = 1` and maps back to the autoencoder's latent scale.
pub fn integrate_latents(
    flow: &VectorFieldState,
    z0: &[Vec<f64>],
    solver: &SolverSpec,
) -> Result<Vec<Vec<f64>>> {
    solver.validate()?;
    let l = flow.latent_dim();
    let mut out = Vec::with_capacity(z0.len());
    for (c, chunk) in z0.chunks(CHUNK).enumerate() {
        let flat: Vec<f64> = chunk.concat();
        let z1 = solver.integrate(&flow.field, &flat).map_err(|e| match e {
            Error::Solver(m) => Error::Solver(format!("samples {}..{}: {m}", c * CHUNK, c * CHUNK + chunk.len())),
            Error::NonFinite(m) => {
                Error::NonFinite(format!("samples {}..{}: {m}", c * CHUNK, c * CHUNK + chunk.len()))
            }
            other => other,
        })?;
        for row in z1.chunks(l) {
            out.push(flow.stats.destandardise(row)?);
        }
    }
    Ok(out)
}

/// Decodes latents to normalised windows.
pub fn decode_latents(ae: &AutoencoderState, latents: &[Vec<f64>]) -> Result<Vec<SeriesWindow>> {
    let l = ae.config().latent_dim;
    let mut out = Vec::with_capacity(latents.len());
    for chunk in latents.chunks(CHUNK) {
        ensure!(chunk.iter().all(|z| z.len() == l), Shape, "latents must have {l} dimensions");
        let flat: Vec<f64> = chunk.concat();
        let z = Tensor::from_vec(flat, (chunk.len(), l), &Device::Cpu)?.to_dtype(ae.dtype())?;
        out.extend(tensor_to_windows(&ae.decoder.forward(&z)?)?);
    }
    Ok(out)
}

fn check_pair(ae: &AutoencoderState, flow: &VectorFieldState) -> Result<()> {
    ensure!(
        ae.config().latent_dim == flow.latent_dim(),
        Shape,
        "autoencoder latent {} does not match flow latent {}",
        ae.config().latent_dim,
        flow.latent_dim()
    );
    Ok(())
}

/// Generates `n` windows in normalised units (before denormalisation).
pub fn generate_normalised(
    n: usize,
    ae: &AutoencoderState,
    flow: &VectorFieldState,
    solver: &SolverSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<SeriesWindow>> {
    check_pair(ae, flow)?;
    let z0 = initial_noise(n, flow.latent_dim(), rng);
    let z1 = integrate_latents(flow, &z0, solver)?;
    decode_latents(ae, &z1)
}

/// Generates `n` windows in data units.
pub fn generate(
    n: usize,
    ae: &AutoencoderState,
    flow: &VectorFieldState,
    solver: &SolverSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<SeriesWindow>> {
    denormalize_all(&generate_normalised(n, ae, flow, solver, rng)?, &ae.norm)
}

/// Median wall-clock seconds per phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub n: usize,
    pub m: usize,
    pub repeats: usize,
    pub integration: f64,
    pub decode: f64,
    pub total: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

pub fn timing_report(
    ae: &AutoencoderState,
    flow: &VectorFieldState,
    solver: &SolverSpec,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TimingReport> {
    check_pair(ae, flow)?;
    const REPEATS: usize = 5;
    let (mut int, mut dec, mut tot) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..REPEATS {
        let start = Instant::now();
        let z0 = initial_noise(n, flow.latent_dim(), rng);
        let t0 = Instant::now();
        let z1 = integrate_latents(flow, &z0, solver)?;
        let t1 = Instant::now();
        let ws = decode_latents(ae, &z1)?;
        let t2 = Instant::now();
        denormalize_all(&ws, &ae.norm)?;
        let end = Instant::now();
        int.push((t1 - t0).as_secs_f64());
        dec.push((t2 - t1).as_secs_f64());
        tot.push((end - start).as_secs_f64());
    }
    Ok(TimingReport {
        n,
        m: ae.config().m,
        repeats: REPEATS,
        integration: median(int),
        decode: median(dec),
        total: median(tot),
    })
}
