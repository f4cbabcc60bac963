//! Built-in sinusoid dataset: `A sin(2 pi f t + phi) + noise` per channel with
//! `A ~ U(0.5, 1)`, `f ~ U(1, 4) / m`, `phi ~ U(0, 2 pi)`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::SeriesWindow;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SinusoidSpec {
    pub d: usize,
    pub m: usize,
    pub amplitude: (f64, f64),
    /// Cycles per window.
    pub cycles: (f64, f64),
    pub noise: f64,
}

impl Default for SinusoidSpec {
    fn default() -> Self {
        Self {
            d: 1,
            m: 256,
            amplitude: (0.5, 1.0),
            cycles: (1.0, 4.0),
            noise: 0.02,
        }
    }
}

pub fn sinusoid(spec: &SinusoidSpec, rng: &mut ChaCha8Rng) -> SeriesWindow {
    let noise = Normal::new(0.0, spec.noise.max(0.0)).expect("noise std is non-negative");
    let mut values = Vec::with_capacity(spec.d * spec.m);
    for _ in 0..spec.d {
        let a = rng.random_range(spec.amplitude.0..=spec.amplitude.1);
        let f = rng.random_range(spec.cycles.0..=spec.cycles.1) / spec.m as f64;
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        for t in 0..spec.m {
            let clean = a * (std::f64::consts::TAU * f * t as f64 + phi).sin();
            values.push(clean + noise.sample(rng));
        }
    }
    SeriesWindow {
        d: spec.d,
        m: spec.m,
        values,
    }
}

pub fn sinusoids(spec: &SinusoidSpec, n: usize, rng: &mut ChaCha8Rng) -> Vec<SeriesWindow> {
    (0..n).map(|_| sinusoid(spec, rng)).collect()
}
