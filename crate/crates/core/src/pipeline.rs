//! Pipeline stages over a run directory. Each stage reads the artifacts of the
//! stages it depends on and writes its own.
//!
//! ```text
//! <out>/data/{train,test}.bin, norm.json, split.json   prepare
//! <out>/ae.ckpt, ae_loss.csv                            train-ae
//! <out>/ae_eq.ckpt, ae_eq_loss.csv                      finetune-eq
//! <out>/flow.ckpt, flow_loss.csv                        train-flow
//! <out>/samples.bin, samples.csv, timing.json           sample
//! <out>/eval_report.json, ks_table.csv, plots/*.svg     eval
//! ```

use std::path::{Path, PathBuf};

use candle_core::DType;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, ModelInfo};
use crate::config::ExperimentConfig;
use crate::data::{
    impute, load_csv, normalize_all, normalize_fit, read_windows, split, window, write_windows,
    write_windows_csv, NormStats, SeriesWindow,
};
use crate::equivariance::finetune;
use crate::error::{Error, Result};
use crate::eval::{full_report, EvalReport};
use crate::flow::{encode_dataset, train_flow as fit_flow, write_flow_log, FlowEpochLog, VectorFieldState};
use crate::plot::write_line_chart;
use crate::sampler::{generate, timing_report, SolverSpec, TimingReport};
use crate::synthetic::sinusoids;
use crate::vae::{train_vae, write_loss_log, AutoencoderState, EpochLog};

/// Parameters are trained and stored in single precision.
pub const TRAIN_DTYPE: DType = DType::F32;

pub const AE_CKPT: &str = "ae.ckpt";
pub const AE_EQ_CKPT: &str = "ae_eq.ckpt";
pub const FLOW_CKPT: &str = "flow.ckpt";
pub const SAMPLES: &str = "samples.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Prepare = 1,
    TrainAe,
    Finetune,
    TrainFlow,
    Sample,
    Eval,
}

/// Where a stage reads and writes, plus the resolved configuration.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub config: ExperimentConfig,
    pub out: PathBuf,
}

impl RunContext {
    /// Validates the configuration (with `seed` overriding the file) before any work starts.
    pub fn new(mut config: ExperimentConfig, seed: Option<u64>, out: impl Into<PathBuf>) -> Result<Self> {
        if let Some(s) = seed {
            config.seed = s;
        }
        config.validate()?;
        Ok(Self { config, out: out.into() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }

    fn rng(&self, stage: Stage) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.config.seed);
        r.set_stream(stage as u64);
        r
    }

    fn snapshot(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(&self.config)?)
    }

    fn ensure_out(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
    }
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn require(path: &Path, stage: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Dependency(format!(
            "{} not found; run `{stage}` first",
            path.display()
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub source: String,
    pub seed: u64,
    pub d: usize,
    pub m: usize,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

/// Windows in data units with the normalisation fitted on the training part.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Vec<SeriesWindow>,
    pub test: Vec<SeriesWindow>,
    pub norm: NormStats,
    pub split: SplitManifest,
}

impl PreparedData {
    pub fn d(&self) -> usize {
        self.split.d
    }

    pub fn train_normalised(&self) -> Result<Vec<SeriesWindow>> {
        normalize_all(&self.train, &self.norm)
    }

    pub fn test_normalised(&self) -> Result<Vec<SeriesWindow>> {
        normalize_all(&self.test, &self.norm)
    }
}

/// Windows the dataset (CSV or the sinusoid generator), splits it, fits the
/// normalisation on the training part and writes everything under `data/`.
pub fn prepare(ctx: &RunContext, synthetic: bool) -> Result<PreparedData> {
    let cfg = &ctx.config;
    let ds = &cfg.dataset;
    let (windows, source) = if synthetic {
        let mut rng = ctx.rng(Stage::Prepare);
        (sinusoids(&ds.sinusoid_spec(), ds.synthetic.n, &mut rng), "sinusoid".to_string())
    } else {
        let path = ds.path.as_ref().ok_or_else(|| {
            Error::config("dataset.path", "no dataset file given (use --synthetic sinusoid for the built-in set)")
        })?;
        let raw = impute(&load_csv(path, &ds.schema)?)?;
        (window(&raw, ds.m, ds.stride())?, path.display().to_string())
    };
    let parts = split(&windows, ds.test_fraction, cfg.seed)?;
    let norm = normalize_fit(&parts.train)?;
    let (d, m) = parts.train[0].shape();
    let manifest = SplitManifest {
        source,
        seed: cfg.seed,
        d,
        m,
        train_idx: parts.train_idx,
        test_idx: parts.test_idx,
    };
    let dir = ctx.data_dir();
    ctx.ensure_out(&dir)?;
    write_windows(dir.join("train.bin"), &parts.train)?;
    write_windows(dir.join("test.bin"), &parts.test)?;
    write_json(&dir.join("norm.json"), &norm)?;
    write_json(&dir.join("split.json"), &manifest)?;
    log::info!("prepared {} train / {} test windows (d={d}, m={m})", parts.train.len(), parts.test.len());
    Ok(PreparedData {
        train: parts.train,
        test: parts.test,
        norm,
        split: manifest,
    })
}

pub fn load_prepared(ctx: &RunContext) -> Result<PreparedData> {
    let dir = ctx.data_dir();
    require(&dir.join("split.json"), "prepare")?;
    let split: SplitManifest = read_json(&dir.join("split.json"))?;
    if split.m != ctx.config.dataset.m {
        return Err(Error::config(
            "dataset.m",
            format!("prepared windows have m = {}, config says {}", split.m, ctx.config.dataset.m),
        ));
    }
    Ok(PreparedData {
        train: read_windows(dir.join("train.bin"))?,
        test: read_windows(dir.join("test.bin"))?,
        norm: read_json(&dir.join("norm.json"))?,
        split,
    })
}

pub struct AeOutcome {
    pub state: AutoencoderState,
    pub log: Vec<EpochLog>,
    pub checkpoint: PathBuf,
}

/// Pre-trains the autoencoder on the prepared training windows.
pub fn train_ae(ctx: &RunContext) -> Result<AeOutcome> {
    let data = load_prepared(ctx)?;
    let cfg = &ctx.config;
    let d = data.d();
    let mut rng = ctx.rng(Stage::TrainAe);
    let mut state = AutoencoderState::new(
        &cfg.autoencoder_config(d),
        &cfg.discriminator_config(d),
        data.norm.clone(),
        TRAIN_DTYPE,
        &mut rng,
    )?;
    let log = train_vae(&mut state, &data.train_normalised()?, &cfg.train_options(), &mut rng)?;
    let path = ctx.path(AE_CKPT);
    Checkpoint::from_autoencoder(&state, None, cfg.seed, ctx.snapshot()?)?.save(&path)?;
    write_loss_log(ctx.path("ae_loss.csv"), &log, false)?;
    Ok(AeOutcome {
        state,
        log,
        checkpoint: path,
    })
}

fn load_ae(path: &Path, stage: &str) -> Result<(AutoencoderState, Checkpoint)> {
    require(path, stage)?;
    let ck = Checkpoint::load(path)?;
    let (state, _) = ck.to_autoencoder(TRAIN_DTYPE)?;
    Ok((state, ck))
}

/// Fine-tunes a trained autoencoder with the configured action.
pub fn finetune_eq(ctx: &RunContext, ae_checkpoint: Option<&Path>) -> Result<AeOutcome> {
    let data = load_prepared(ctx)?;
    let cfg = &ctx.config;
    let src = ae_checkpoint.map(Path::to_path_buf).unwrap_or_else(|| ctx.path(AE_CKPT));
    let (mut state, _) = load_ae(&src, "train-ae")?;
    let action = cfg.action(data.d())?;
    let mut rng = ctx.rng(Stage::Finetune);
    let log = finetune(&mut state, &data.train_normalised()?, &action, &cfg.finetune_options(), &mut rng)?;
    let path = ctx.path(AE_EQ_CKPT);
    Checkpoint::from_autoencoder(&state, Some(action), cfg.seed, ctx.snapshot()?)?.save(&path)?;
    write_loss_log(ctx.path("ae_eq_loss.csv"), &log, true)?;
    Ok(AeOutcome {
        state,
        log,
        checkpoint: path,
    })
}

pub struct FlowOutcome {
    pub state: VectorFieldState,
    pub log: Vec<FlowEpochLog>,
    pub checkpoint: PathBuf,
}

/// Trains the latent flow on the given (base or fine-tuned) autoencoder's latents.
pub fn train_flow(ctx: &RunContext, ae_checkpoint: Option<&Path>) -> Result<FlowOutcome> {
    let data = load_prepared(ctx)?;
    let cfg = &ctx.config;
    let src = ae_checkpoint.map(Path::to_path_buf).unwrap_or_else(|| ctx.path(AE_CKPT));
    let (ae, ae_ck) = load_ae(&src, "train-ae")?;
    let mut rng = ctx.rng(Stage::TrainFlow);
    let (latents, stats) = encode_dataset(&ae, &data.train_normalised()?, cfg.flow.latent_source, &mut rng)?;
    let mut state = VectorFieldState::new(&cfg.vector_field_config(), stats, TRAIN_DTYPE, &mut rng)?;
    let log = fit_flow(&mut state, &latents, &cfg.flow_options(), &mut rng)?;
    let path = ctx.path(FLOW_CKPT);
    Checkpoint::from_flow(&state, Some(ae_ck.digest()?), cfg.seed, ctx.snapshot()?)?.save(&path)?;
    write_flow_log(ctx.path("flow_loss.csv"), &log)?;
    Ok(FlowOutcome {
        state,
        log,
        checkpoint: path,
    })
}

/// Finds the autoencoder a flow was trained on: the explicit path if given
/// (which must match), otherwise whichever stage checkpoint matches.
fn paired_autoencoder(ctx: &RunContext, flow: &Checkpoint, explicit: Option<&Path>) -> Result<AutoencoderState> {
    let want = match &flow.manifest.model {
        ModelInfo::Flow { autoencoder_digest, .. } => autoencoder_digest.clone(),
        _ => return Err(Error::Dependency("flow checkpoint expected".into())),
    };
    let candidates: Vec<PathBuf> = match explicit {
        Some(p) => vec![p.to_path_buf()],
        None => vec![ctx.path(AE_CKPT), ctx.path(AE_EQ_CKPT)],
    };
    for p in &candidates {
        if !p.exists() {
            continue;
        }
        let ck = Checkpoint::load(p)?;
        if want.is_none() || want.as_deref() == Some(ck.digest()?.as_str()) {
            return Ok(ck.to_autoencoder(TRAIN_DTYPE)?.0);
        }
        if explicit.is_some() {
            return Err(Error::Dependency(format!(
                "{} is not the autoencoder this flow was trained on",
                p.display()
            )));
        }
    }
    Err(Error::Dependency(
        "no autoencoder checkpoint matching the flow was found; run `train-ae` (and `train-flow`) first".into(),
    ))
}

pub struct SampleOutcome {
    pub samples: Vec<SeriesWindow>,
    pub timing: TimingReport,
}

/// Generates `n` windows (config `n_samples` when `None`) and a timing report.
pub fn sample(ctx: &RunContext, ae_checkpoint: Option<&Path>, solver: Option<SolverSpec>, n: Option<usize>) -> Result<SampleOutcome> {
    let cfg = &ctx.config;
    let flow_path = ctx.path(FLOW_CKPT);
    require(&flow_path, "train-flow")?;
    let flow_ck = Checkpoint::load(&flow_path)?;
    let flow = flow_ck.to_flow(TRAIN_DTYPE)?;
    let ae = paired_autoencoder(ctx, &flow_ck, ae_checkpoint)?;
    let solver = solver.unwrap_or_else(|| cfg.solver(ae.config().d));
    solver.validate()?;
    let n = n.unwrap_or(cfg.sampler.n_samples);
    let mut rng = ctx.rng(Stage::Sample);
    let samples = generate(n, &ae, &flow, &solver, &mut rng)?;
    let timing = timing_report(&ae, &flow, &solver, n, &mut rng)?;
    ctx.ensure_out(&ctx.out)?;
    write_windows(ctx.path(SAMPLES), &samples)?;
    write_windows_csv(ctx.path("samples.csv"), &samples)?;
    write_json(&ctx.path("timing.json"), &timing)?;
    Ok(SampleOutcome { samples, timing })
}

/// Scores `synth` against `real` (defaults: prepared test windows and `samples.bin`).
pub fn evaluate(ctx: &RunContext, real: Option<&Path>, synth: Option<&Path>) -> Result<EvalReport> {
    let real = match real {
        Some(p) => read_windows(p)?,
        None => load_prepared(ctx)?.test,
    };
    let synth_path = synth.map(Path::to_path_buf).unwrap_or_else(|| ctx.path(SAMPLES));
    require(&synth_path, "sample")?;
    let synth = read_windows(&synth_path)?;
    if let (Some(r), Some(s)) = (real.first(), synth.first()) {
        if r.shape() != s.shape() {
            return Err(Error::Shape(format!(
                "real windows are {:?}, synthetic windows are {:?}",
                r.shape(),
                s.shape()
            )));
        }
    }
    let mut rng = ctx.rng(Stage::Eval);
    let report = full_report(&real, &synth, &ctx.config.eval_config(), &mut rng)?;
    ctx.ensure_out(&ctx.out)?;
    report.write(ctx.path("eval_report.json"), ctx.path("ks_table.csv"))?;
    let plots = ctx.path("plots");
    ctx.ensure_out(&plots)?;
    for (tag, set) in [("real", &real), ("synth", &synth)] {
        for (i, w) in set.iter().take(ctx.config.eval.plots).enumerate() {
            write_line_chart(plots.join(format!("{tag}_{i}.svg")), w, &format!("{tag} #{i}"))?;
        }
    }
    Ok(report)
}
