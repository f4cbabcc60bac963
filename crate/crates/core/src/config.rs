//! Experiment configuration file (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::CsvSchema;
use crate::equivariance::FinetuneOptions;
use crate::error::{Error, Result};
use crate::eval::{EvalConfig, RnnConfig};
use crate::flow::{FlowTrainOptions, LatentSource};
use crate::nets::{AutoencoderConfig, DiscriminatorConfig, VectorFieldConfig};
use crate::sampler::SolverSpec;
use crate::synthetic::SinusoidSpec;
use crate::transforms::{ActionKind, GroupAction};
use crate::vae::{TrainOptions, VaeLossWeights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSection {
    pub d: usize,
    /// Number of windows generated before the train/test split.
    pub n: usize,
    pub amplitude: (f64, f64),
    pub cycles: (f64, f64),
    pub noise: f64,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        let s = SinusoidSpec::default();
        Self {
            d: 1,
            n: 1000,
            amplitude: s.amplitude,
            cycles: s.cycles,
            noise: s.noise,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// CSV file; ignored when the sinusoid generator is selected.
    pub path: Option<PathBuf>,
    pub schema: CsvSchema,
    pub m: usize,
    /// Window offset step; `m / 2` when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    pub test_fraction: f64,
    pub synthetic: SyntheticSection,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            path: None,
            schema: CsvSchema::default(),
            m: 256,
            stride: None,
            test_fraction: 0.2,
            synthetic: SyntheticSection::default(),
        }
    }
}

impl DatasetSection {
    pub fn stride(&self) -> usize {
        self.stride.unwrap_or((self.m / 2).max(1))
    }

    pub fn sinusoid_spec(&self) -> SinusoidSpec {
        SinusoidSpec {
            d: self.synthetic.d,
            m: self.m,
            amplitude: self.synthetic.amplitude,
            cycles: self.synthetic.cycles,
            noise: self.synthetic.noise,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeSection {
    pub hidden: usize,
    pub latent_dim: usize,
    pub kernel: usize,
    pub stride: usize,
    pub disc_hidden: usize,
    pub beta: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub lr: f64,
    pub disc_lr: f64,
    pub batch_size: usize,
    pub adv_start_step: u64,
}

impl Default for VaeSection {
    fn default() -> Self {
        let ae = AutoencoderConfig::default();
        let opts = TrainOptions::default();
        Self {
            hidden: ae.hidden,
            latent_dim: ae.latent_dim,
            kernel: ae.kernel,
            stride: ae.stride,
            disc_hidden: DiscriminatorConfig::default().hidden,
            beta: opts.weights.beta,
            lambda: opts.weights.lambda,
            epochs: opts.epochs,
            lr: opts.lr,
            disc_lr: opts.disc_lr,
            batch_size: opts.batch_size,
            adv_start_step: opts.adv_start_step,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EquivarianceSection {
    pub action: ActionKind,
    /// Parameter interval; the channel-count default is used when absent.
    pub interval: Option<(f64, f64)>,
    pub per_channel: Option<bool>,
    pub weight: f64,
    pub epochs: usize,
}

impl Default for EquivarianceSection {
    fn default() -> Self {
        Self {
            action: ActionKind::Scaling,
            interval: None,
            per_channel: None,
            weight: 1.0,
            epochs: 25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowSection {
    pub depth: usize,
    pub hidden: usize,
    pub time_dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub latent_source: LatentSource,
}

impl Default for FlowSection {
    fn default() -> Self {
        let vf = VectorFieldConfig::default();
        let opts = FlowTrainOptions::default();
        Self {
            depth: vf.depth,
            hidden: vf.hidden,
            time_dim: vf.time_dim,
            epochs: opts.epochs,
            lr: opts.lr,
            batch_size: opts.batch_size,
            latent_source: LatentSource::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    /// Adaptive for one channel, Euler otherwise.
    #[default]
    Auto,
    Euler,
    Adaptive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub solver: SolverKind,
    pub steps: usize,
    pub rtol: f64,
    pub atol: f64,
    pub n_samples: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            solver: SolverKind::Auto,
            steps: 10,
            rtol: SolverSpec::DEFAULT_TOL,
            atol: SolverSpec::DEFAULT_TOL,
            n_samples: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub rnn: RnnConfig,
    pub seeds: usize,
    pub probes: Option<Vec<usize>>,
    pub block: usize,
    pub predictive_direction: crate::eval::PredictiveDirection,
    /// Example series drawn per set when plotting.
    pub plots: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalConfig::default();
        Self {
            rnn: e.rnn,
            seeds: e.seeds,
            probes: e.probes,
            block: e.block,
            predictive_direction: e.predictive_direction,
            plots: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetSection,
    pub vae: VaeSection,
    pub equivariance: EquivarianceSection,
    pub flow: FlowSection,
    pub sampler: SamplerSection,
    pub eval: EvalSection,
}

fn at<T>(field: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::InvalidArgument(msg) | Error::Shape(msg) => Error::config(field, msg),
        other => other,
    })
}

fn check(cond: bool, field: &str, msg: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::config(field, msg))
    }
}

fn positive(v: f64, field: &str) -> Result<()> {
    check(v > 0.0 && v.is_finite(), field, "must be a positive finite number")
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| {
            let field = e.span().map(|sp| format!("bytes {}..{}", sp.start, sp.end)).unwrap_or_default();
            Error::config(field, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("<root>", e.to_string()))
    }

    /// Channel count implied by the dataset section (CSV column selection or generator).
    pub fn channels_hint(&self) -> Option<usize> {
        if self.dataset.path.is_some() {
            self.dataset.schema.columns.as_ref().map(Vec::len)
        } else {
            Some(self.dataset.synthetic.d)
        }
    }

    /// Small widths and budgets that keep the sinusoid pipeline within minutes on a CPU.
    pub fn toy() -> Self {
        Self {
            seed: 0,
            dataset: DatasetSection {
                m: 256,
                test_fraction: 0.5,
                synthetic: SyntheticSection {
                    n: 1000,
                    ..SyntheticSection::default()
                },
                ..DatasetSection::default()
            },
            vae: VaeSection {
                hidden: 32,
                latent_dim: 16,
                disc_hidden: 8,
                beta: 1e-3,
                ..VaeSection::default()
            },
            equivariance: EquivarianceSection::default(),
            flow: FlowSection {
                hidden: 128,
                time_dim: 32,
                ..FlowSection::default()
            },
            sampler: SamplerSection {
                n_samples: 500,
                ..SamplerSection::default()
            },
            eval: EvalSection {
                rnn: RnnConfig {
                    hidden: 16,
                    layers: 1,
                    iterations: 300,
                    batch_size: 32,
                    lr: 1e-2,
                    ..RnnConfig::default()
                },
                ..EvalSection::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ds = &self.dataset;
        check(ds.m >= 2, "dataset.m", "must be at least 2")?;
        check(ds.stride() >= 1, "dataset.stride", "must be at least 1")?;
        check(
            ds.test_fraction > 0.0 && ds.test_fraction < 1.0,
            "dataset.test_fraction",
            "must lie in (0, 1)",
        )?;
        if ds.path.is_none() {
            check(ds.synthetic.d >= 1, "dataset.synthetic.d", "must be at least 1")?;
            check(ds.synthetic.n >= 2, "dataset.synthetic.n", "must be at least 2")?;
            let (a0, a1) = ds.synthetic.amplitude;
            check(a0.is_finite() && a1.is_finite() && a0 <= a1, "dataset.synthetic.amplitude", "needs lo <= hi")?;
            let (c0, c1) = ds.synthetic.cycles;
            check(c0.is_finite() && c1.is_finite() && c0 <= c1, "dataset.synthetic.cycles", "needs lo <= hi")?;
            check(
                ds.synthetic.noise >= 0.0 && ds.synthetic.noise.is_finite(),
                "dataset.synthetic.noise",
                "must be non-negative",
            )?;
        }
        if let Some(cols) = &ds.schema.columns {
            check(!cols.is_empty(), "dataset.schema.columns", "must not be empty")?;
        }

        let v = &self.vae;
        let d = self.channels_hint().unwrap_or(1);
        at("vae", self.autoencoder_config(d).validate())?;
        check(v.disc_hidden >= 1, "vae.disc_hidden", "must be at least 1")?;
        at("vae.beta", VaeLossWeights::new(v.beta, 0.0).map(|_| ()))?;
        at("vae.lambda", VaeLossWeights::new(0.0, v.lambda).map(|_| ()))?;
        positive(v.lr, "vae.lr")?;
        positive(v.disc_lr, "vae.disc_lr")?;
        check(v.batch_size >= 1, "vae.batch_size", "must be at least 1")?;

        let e = &self.equivariance;
        at("equivariance", self.action(d).map(|_| ()))?;
        check(e.weight >= 0.0 && e.weight.is_finite(), "equivariance.weight", "must be non-negative")?;

        let f = &self.flow;
        at("flow", self.vector_field_config().validate())?;
        check(f.depth >= 1, "flow.depth", "must be at least 1")?;
        positive(f.lr, "flow.lr")?;
        check(f.batch_size >= 1, "flow.batch_size", "must be at least 1")?;

        let s = &self.sampler;
        check(s.steps >= 1, "sampler.steps", "must be at least 1")?;
        positive(s.rtol, "sampler.rtol")?;
        positive(s.atol, "sampler.atol")?;

        let ev = &self.eval;
        self.eval_config().validate()?;
        if let Some(p) = &ev.probes {
            check(p.iter().all(|&t| t < ds.m), "eval.probes", "every probe must be below dataset.m")?;
        }
        Ok(())
    }

    pub fn autoencoder_config(&self, d: usize) -> AutoencoderConfig {
        AutoencoderConfig {
            d,
            m: self.dataset.m,
            hidden: self.vae.hidden,
            latent_dim: self.vae.latent_dim,
            kernel: self.vae.kernel,
            stride: self.vae.stride,
            zero_head: false,
        }
    }

    pub fn discriminator_config(&self, d: usize) -> DiscriminatorConfig {
        DiscriminatorConfig {
            d,
            hidden: self.vae.disc_hidden,
            kernel: self.vae.kernel,
            stride: self.vae.stride,
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.vae.epochs,
            batch_size: self.vae.batch_size,
            lr: self.vae.lr,
            disc_lr: self.vae.disc_lr,
            adv_start_step: self.vae.adv_start_step,
            weights: VaeLossWeights {
                beta: self.vae.beta,
                lambda: self.vae.lambda,
            },
        }
    }

    pub fn action(&self, d: usize) -> Result<GroupAction> {
        let e = &self.equivariance;
        let base = GroupAction::default_for(e.action, d);
        let (a, b) = e.interval.unwrap_or(base.interval());
        GroupAction::new(e.action, a, b, e.per_channel.unwrap_or(base.per_channel()))
    }

    pub fn finetune_options(&self) -> FinetuneOptions {
        FinetuneOptions {
            train: TrainOptions {
                epochs: self.equivariance.epochs,
                ..self.train_options()
            },
            weight: self.equivariance.weight,
        }
    }

    pub fn vector_field_config(&self) -> VectorFieldConfig {
        VectorFieldConfig {
            latent_dim: self.vae.latent_dim,
            depth: self.flow.depth,
            hidden: self.flow.hidden,
            time_dim: self.flow.time_dim,
            ..VectorFieldConfig::default()
        }
    }

    pub fn flow_options(&self) -> FlowTrainOptions {
        FlowTrainOptions {
            epochs: self.flow.epochs,
            batch_size: self.flow.batch_size,
            lr: self.flow.lr,
        }
    }

    pub fn solver(&self, d: usize) -> SolverSpec {
        let s = &self.sampler;
        match s.solver {
            SolverKind::Auto => match SolverSpec::default_for(d) {
                SolverSpec::Euler { .. } => SolverSpec::euler(s.steps),
                SolverSpec::Adaptive { .. } => SolverSpec::Adaptive { rtol: s.rtol, atol: s.atol },
            },
            SolverKind::Euler => SolverSpec::euler(s.steps),
            SolverKind::Adaptive => SolverSpec::Adaptive { rtol: s.rtol, atol: s.atol },
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            rnn: self.eval.rnn.clone(),
            seeds: self.eval.seeds,
            probes: self.eval.probes.clone(),
            block: self.eval.block,
            predictive_direction: self.eval.predictive_direction,
        }
    }
}
