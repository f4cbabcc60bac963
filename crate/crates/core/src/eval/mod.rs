//! Discriminative score, predictive score and the per-timestep KS suite.

mod gru;
mod ks;

use std::io::Write;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use gru::{Adam, CellType, Gru, Head, RnnConfig};
pub use ks::{default_probes, ks_cells, ks_statistic, ks_suite, ks_threshold, KsOutcome, KsProbe, KsResult, KS_C_005};

use crate::data::SeriesWindow;
use crate::error::{ensure, Error, Result};

pub const MIN_DISCRIMINATIVE: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl MeanStd {
    pub fn of(v: &[f64]) -> Self {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

/// Which set the next-step predictor is fitted on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictiveDirection {
    /// Fit on real data, score on generated data.
    #[default]
    TrainRealTestSynth,
    TrainSynthTestReal,
}

/// Per-channel affine map onto `[0, 1]` fitted on the real set.
#[derive(Debug, Clone)]
struct Scaler {
    min: Vec<f64>,
    span: Vec<f64>,
}

impl Scaler {
    fn fit(ws: &[SeriesWindow]) -> Self {
        let d = ws[0].d;
        let mut min = vec![f64::INFINITY; d];
        let mut max = vec![f64::NEG_INFINITY; d];
        for w in ws {
            for c in 0..d {
                for &v in w.channel(c) {
                    min[c] = min[c].min(v);
                    max[c] = max[c].max(v);
                }
            }
        }
        let span = min.iter().zip(&max).map(|(a, b)| if b > a { b - a } else { 1.0 }).collect();
        Self { min, span }
    }

    /// Time-major `(len, B, d)` slice of steps `start..start + len` of the chosen windows.
    fn batch(&self, ws: &[&SeriesWindow], start: usize, len: usize) -> Vec<f64> {
        let d = self.min.len();
        let b = ws.len();
        let mut out = vec![0.0; len * b * d];
        for (bi, w) in ws.iter().enumerate() {
            for c in 0..d {
                let ch = w.channel(c);
                for s in 0..len {
                    out[(s * b + bi) * d + c] = (ch[start + s] - self.min[c]) / self.span[c];
                }
            }
        }
        out
    }
}

fn check_sets(a: &[SeriesWindow], b: &[SeriesWindow]) -> Result<(usize, usize)> {
    ensure!(!a.is_empty() && !b.is_empty(), InvalidArgument, "evaluation sets must be non-empty");
    let (d, m) = a[0].shape();
    for w in a.iter().chain(b) {
        w.check_shape(d, m)?;
    }
    Ok((d, m))
}

fn finite(v: f64, what: &str, it: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{what} loss at iteration {it}")))
    }
}

fn sample<'a>(set: &[&'a SeriesWindow], k: usize, rng: &mut ChaCha8Rng) -> Vec<&'a SeriesWindow> {
    (0..k).map(|_| set[rng.random_range(0..set.len())]).collect()
}

fn split_80_20<'a>(ws: &'a [SeriesWindow], rng: &mut ChaCha8Rng) -> (Vec<&'a SeriesWindow>, Vec<&'a SeriesWindow>) {
    let mut refs: Vec<&SeriesWindow> = ws.iter().collect();
    refs.shuffle(rng);
    let n_train = ((ws.len() as f64) * 0.8).round() as usize;
    let test = refs.split_off(n_train);
    (refs, test)
}

/// One classifier run: `|test accuracy - 0.5|`.
fn discriminative_once(real: &[SeriesWindow], synth: &[SeriesWindow], cfg: &RnnConfig, rng: &mut ChaCha8Rng) -> Result<f64> {
    let (d, m) = real[0].shape();
    let scaler = Scaler::fit(real);
    let (real_tr, real_te) = split_80_20(real, rng);
    let (synth_tr, synth_te) = split_80_20(synth, rng);
    let mut net = Gru::new(d, cfg.hidden, cfg.layers, 1, rng);
    let mut opt = Adam::new(net.num_params(), cfg.lr);
    let half = (cfg.batch_size / 2).max(1);
    for it in 0..cfg.iterations {
        let mut batch = sample(&real_tr, half, rng);
        batch.extend(sample(&synth_tr, half, rng));
        let labels: Vec<f64> = (0..2 * half).map(|i| if i < half { 1.0 } else { 0.0 }).collect();
        let x = scaler.batch(&batch, 0, m);
        let (loss, g) = net.loss_and_grad(Head::Classify, &x, batch.len(), m, &labels)?;
        finite(loss, "classifier", it)?;
        opt.update(&mut net.params, &g);
    }
    let mut correct = 0usize;
    let mut total = 0usize;
    for (set, label) in [(&real_te, true), (&synth_te, false)] {
        for chunk in set.chunks(256) {
            let logits = net.logits(&scaler.batch(chunk, 0, m), chunk.len(), m)?;
            correct += logits.iter().filter(|&&l| (l > 0.0) == label).count();
            total += chunk.len();
        }
    }
    Ok((correct as f64 / total as f64 - 0.5).abs())
}

/// Real windows are labelled 1 and synthetic 0; each of the `seeds` runs uses an
/// 80/20 split per set and a freshly initialised GRU classifier.
pub fn discriminative_score(
    real: &[SeriesWindow],
    synth: &[SeriesWindow],
    cfg: &RnnConfig,
    seeds: usize,
    rng: &mut ChaCha8Rng,
) -> Result<MeanStd> {
    cfg.validate()?;
    check_sets(real, synth)?;
    ensure!(seeds >= 1, InvalidArgument, "need at least one seed");
    ensure!(
        real.len() == synth.len(),
        InvalidArgument,
        "real ({}) and synthetic ({}) sets must be the same size",
        real.len(),
        synth.len()
    );
    ensure!(
        real.len() >= MIN_DISCRIMINATIVE,
        InvalidArgument,
        "need at least {MIN_DISCRIMINATIVE} windows per set, got {}",
        real.len()
    );
    let runs = (0..seeds)
        .map(|_| discriminative_once(real, synth, cfg, &mut ChaCha8Rng::seed_from_u64(rng.next_u64())))
        .collect::<Result<Vec<_>>>()?;
    Ok(MeanStd::of(&runs))
}

fn next_step_mae(net: &Gru, scaler: &Scaler, set: &[&SeriesWindow], d: usize, m: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in set.chunks(256) {
        let b = chunk.len();
        let y = net.outputs(&scaler.batch(chunk, 0, m - 1), b, m - 1)?;
        let target = scaler.batch(chunk, 1, m - 1);
        total += y.iter().zip(&target).map(|(a, t)| (a - t).abs()).sum::<f64>();
        count += (m - 1) * b * d;
    }
    Ok(total / count as f64)
}

/// Predictive score and the fitted predictor's own training-set MAE.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictiveOutcome {
    pub score: MeanStd,
    pub self_score: MeanStd,
}

/// Fits a next-step GRU predictor (MAE loss, all channels, values scaled to
/// `[0, 1]` with the real set's range) and reports its MAE on the other set,
/// alongside the MAE on the set it was fitted on.
pub fn predictive_scores(
    real: &[SeriesWindow],
    synth: &[SeriesWindow],
    cfg: &RnnConfig,
    seeds: usize,
    direction: PredictiveDirection,
    rng: &mut ChaCha8Rng,
) -> Result<PredictiveOutcome> {
    cfg.validate()?;
    let (d, m) = check_sets(real, synth)?;
    ensure!(m >= 2, InvalidArgument, "predictive score needs m >= 2");
    ensure!(seeds >= 1, InvalidArgument, "need at least one seed");
    let scaler = Scaler::fit(real);
    let real_refs: Vec<&SeriesWindow> = real.iter().collect();
    let synth_refs: Vec<&SeriesWindow> = synth.iter().collect();
    let (fit_set, score_set) = match direction {
        PredictiveDirection::TrainRealTestSynth => (&real_refs, &synth_refs),
        PredictiveDirection::TrainSynthTestReal => (&synth_refs, &real_refs),
    };
    let mut scores = Vec::with_capacity(seeds);
    let mut selfs = Vec::with_capacity(seeds);
    for _ in 0..seeds {
        let mut r = ChaCha8Rng::seed_from_u64(rng.next_u64());
        let mut net = Gru::new(d, cfg.hidden, cfg.layers, d, &mut r);
        let mut opt = Adam::new(net.num_params(), cfg.lr);
        for it in 0..cfg.iterations {
            let batch = sample(fit_set, cfg.batch_size, &mut r);
            let x = scaler.batch(&batch, 0, m - 1);
            let target = scaler.batch(&batch, 1, m - 1);
            let (loss, g) = net.loss_and_grad(Head::Regress, &x, batch.len(), m - 1, &target)?;
            finite(loss, "predictor", it)?;
            opt.update(&mut net.params, &g);
        }
        scores.push(next_step_mae(&net, &scaler, score_set, d, m)?);
        selfs.push(next_step_mae(&net, &scaler, fit_set, d, m)?);
    }
    Ok(PredictiveOutcome {
        score: MeanStd::of(&scores),
        self_score: MeanStd::of(&selfs),
    })
}

pub fn predictive_score(
    real_train: &[SeriesWindow],
    synth: &[SeriesWindow],
    cfg: &RnnConfig,
    seeds: usize,
    rng: &mut ChaCha8Rng,
) -> Result<MeanStd> {
    Ok(predictive_scores(real_train, synth, cfg, seeds, PredictiveDirection::default(), rng)?.score)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub rnn: RnnConfig,
    pub seeds: usize,
    /// Probe timesteps; `None` uses `[0.3, 0.5, 0.7, 0.9] * m`.
    pub probes: Option<Vec<usize>>,
    pub block: usize,
    pub predictive_direction: PredictiveDirection,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            rnn: RnnConfig::default(),
            seeds: 5,
            probes: None,
            block: 50,
            predictive_direction: PredictiveDirection::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        self.rnn.validate()?;
        if self.seeds == 0 {
            return Err(Error::config("eval.seeds", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_real: usize,
    pub n_synth: usize,
    pub discriminative: MeanStd,
    pub predictive: MeanStd,
    pub predictive_self: MeanStd,
    pub ks_block: usize,
    pub ks_table: Vec<KsProbe>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn ks_csv(&self) -> String {
        let mut out = String::from("probe,mean_statistic,rejection_pct\n");
        for p in &self.ks_table {
            out.push_str(&format!("{},{},{}\n", p.probe, p.mean_statistic, p.rejection_pct));
        }
        out
    }

    pub fn write(&self, json_path: impl AsRef<Path>, csv_path: impl AsRef<Path>) -> Result<()> {
        for (path, body) in [(json_path.as_ref(), self.to_json()?), (csv_path.as_ref(), self.ks_csv())] {
            std::fs::File::create(path)
                .and_then(|mut f| f.write_all(body.as_bytes()))
                .map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

/// All three metrics on data-unit windows. The discriminative score uses the
/// first `min(|real|, |synth|)` windows of each set.
pub fn full_report(
    real: &[SeriesWindow],
    synth: &[SeriesWindow],
    cfg: &EvalConfig,
    rng: &mut ChaCha8Rng,
) -> Result<EvalReport> {
    cfg.validate()?;
    let (_, m) = check_sets(real, synth)?;
    let probes = cfg.probes.clone().unwrap_or_else(|| default_probes(m));
    let ks_table = ks_suite(real, synth, &probes, cfg.block)?;
    let n = real.len().min(synth.len());
    let discriminative = discriminative_score(&real[..n], &synth[..n], &cfg.rnn, cfg.seeds, rng)?;
    let pred = predictive_scores(real, synth, &cfg.rnn, cfg.seeds, cfg.predictive_direction, rng)?;
    Ok(EvalReport {
        n_real: real.len(),
        n_synth: synth.len(),
        discriminative,
        predictive: pred.score,
        predictive_self: pred.self_score,
        ks_block: cfg.block,
        ks_table,
    })
}
