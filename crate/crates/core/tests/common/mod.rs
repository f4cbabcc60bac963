#![allow(dead_code)]

use candle_core::{DType, Tensor, Var};
use lfts::nets::{seeded, standard_normal, NamedVar};
use lfts::Result;
use rand::seq::index::sample;

const H: f64 = 1e-6;
const MAX_PROBES: usize = 48;

fn to_vec(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Contracts a model output with a fixed random tensor so every output entry
/// contributes to a scalar.
pub fn projector(shape: &[usize], seed: u64) -> Tensor {
    standard_normal(shape, DType::F64, &mut seeded(seed)).unwrap()
}

pub fn project(out: &Tensor, r: &Tensor) -> Result<Tensor> {
    Ok((out * r)?.sum_all()?)
}

/// Relative error (L2 over the probed entries) between backprop and central
/// finite differences, one entry per variable.
pub fn fd_check(vars: &[NamedVar], f: &dyn Fn() -> Result<Tensor>, seed: u64) -> Vec<(String, f64)> {
    let loss = f().unwrap();
    let grads = loss.backward().unwrap();
    let mut rng = seeded(seed);
    vars.iter()
        .map(|(name, var)| {
            let analytic = grads
                .get(var.as_tensor())
                .map(to_vec)
                .unwrap_or_else(|| vec![0.0; var.elem_count()]);
            let base = to_vec(var.as_tensor());
            let shape = var.as_tensor().dims().to_vec();
            let n = base.len();
            let idx: Vec<usize> = if n <= MAX_PROBES {
                (0..n).collect()
            } else {
                sample(&mut rng, n, MAX_PROBES).into_vec()
            };
            let eval_at = |i: usize, v: f64| {
                let mut p = base.clone();
                p[i] = v;
                var.set(&Tensor::from_vec(p, shape.as_slice(), var.device()).unwrap()).unwrap();
                f().unwrap().to_scalar::<f64>().unwrap()
            };
            let mut a = Vec::with_capacity(idx.len());
            let mut fd = Vec::with_capacity(idx.len());
            for &i in &idx {
                let up = eval_at(i, base[i] + H);
                let down = eval_at(i, base[i] - H);
                fd.push((up - down) / (2.0 * H));
                a.push(analytic[i]);
            }
            var.set(&Tensor::from_vec(base, shape.as_slice(), var.device()).unwrap()).unwrap();
            (name.clone(), rel_err(&a, &fd))
        })
        .collect()
}

pub fn input_var(t: Tensor) -> NamedVar {
    ("input".to_owned(), Var::from_tensor(&t).unwrap())
}

pub mod tiny {
    use super::*;
    use lfts::nets::{AutoencoderConfig, Decoder, Discriminator, DiscriminatorConfig, Encoder, VectorField, VectorFieldConfig};

    pub const B: usize = 3;

    pub fn ae() -> AutoencoderConfig {
        AutoencoderConfig {
            d: 1,
            m: 16,
            hidden: 4,
            latent_dim: 4,
            ..AutoencoderConfig::default()
        }
    }

    pub fn vf() -> VectorFieldConfig {
        VectorFieldConfig {
            latent_dim: 4,
            hidden: 16,
            time_dim: 8,
            zero_head: false,
            ..VectorFieldConfig::default()
        }
    }

    pub fn windows(seed: u64) -> Tensor {
        (standard_normal(&[B, 1, 16], DType::F64, &mut seeded(seed)).unwrap() * 0.5).unwrap()
    }

    pub fn latents(seed: u64) -> Tensor {
        standard_normal(&[B, 4], DType::F64, &mut seeded(seed)).unwrap()
    }

    /// Relative finite-difference error per variable of each model, tagged by model.
    pub fn all_models() -> Vec<(&'static str, String, f64)> {
        let mut out = Vec::new();
        let mut push = |model, errs: Vec<(String, f64)>| {
            out.extend(errs.into_iter().map(|(n, e)| (model, n, e)));
        };

        let enc = Encoder::new(&ae(), DType::F64, &mut seeded(1)).unwrap();
        let x = input_var(windows(2));
        let (rm, rv) = (projector(&[B, 4], 3), projector(&[B, 4], 4));
        let mut vars = enc.named_vars();
        vars.push(x.clone());
        let f = || {
            let p = enc.forward(x.1.as_tensor())?;
            Ok((project(&p.mu, &rm)? + project(&p.logvar, &rv)?)?)
        };
        push("encoder", fd_check(&vars, &f, 5));

        let dec = Decoder::new(&ae(), DType::F64, &mut seeded(6)).unwrap();
        let z = input_var(latents(7));
        let r = projector(&[B, 1, 16], 8);
        let mut vars = dec.named_vars();
        vars.push(z.clone());
        let f = || project(&dec.forward(z.1.as_tensor())?, &r);
        push("decoder", fd_check(&vars, &f, 9));

        let disc_cfg = DiscriminatorConfig {
            d: 1,
            hidden: 4,
            ..DiscriminatorConfig::default()
        };
        let disc = Discriminator::new(&disc_cfg, DType::F64, &mut seeded(10)).unwrap();
        let x = input_var(windows(11));
        let r = projector(&[B, 1], 12);
        let mut vars = disc.named_vars();
        vars.push(x.clone());
        let f = || {
            let logits = disc.forward(x.1.as_tensor())?;
            project(&logits.reshape((B, 1))?, &r)
        };
        push("discriminator", fd_check(&vars, &f, 13));

        let field = VectorField::new(&vf(), DType::F64, &mut seeded(14)).unwrap();
        let z = input_var(latents(15));
        let t = Tensor::new(&[0.1f64, 0.5, 0.93], &candle_core::Device::Cpu).unwrap();
        let r = projector(&[B, 4], 16);
        let mut vars = field.named_vars();
        vars.push(z.clone());
        let f = || project(&field.forward(z.1.as_tensor(), &t)?, &r);
        push("vector field", fd_check(&vars, &f, 17));
        out
    }
}
