use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lfts::config::ExperimentConfig;
use lfts::pipeline::{self, RunContext};
use lfts::sampler::SolverSpec;

#[derive(Parser)]
#[command(name = "lfts", version, about = "Latent flow matching for time-series generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Window, normalise and split the dataset.
    Prepare {
        #[command(flatten)]
        common: Common,
        /// Use a built-in generated dataset instead of `dataset.path`.
        #[arg(long, value_enum)]
        synthetic: Option<Synthetic>,
    },
    /// Pre-train the autoencoder.
    TrainAe {
        #[command(flatten)]
        common: Common,
    },
    /// Fine-tune a trained autoencoder with the equivariance loss.
    FinetuneEq {
        #[command(flatten)]
        common: Common,
        /// Autoencoder to start from (default `<out>/ae.ckpt`).
        #[arg(long, value_name = "PATH")]
        ae_checkpoint: Option<PathBuf>,
    },
    /// Train the latent vector field.
    TrainFlow {
        #[command(flatten)]
        common: Common,
        /// Autoencoder whose latents are modelled (default `<out>/ae.ckpt`).
        #[arg(long, value_name = "PATH")]
        ae_checkpoint: Option<PathBuf>,
    },
    /// Generate windows and a timing report.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Autoencoder used for decoding; must be the one the flow was trained on.
        #[arg(long, value_name = "PATH")]
        ae_checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        solver: Option<Solver>,
        /// Euler step count.
        #[arg(long)]
        steps: Option<usize>,
        /// Number of windows (default `sampler.n_samples`).
        #[arg(long)]
        n: Option<usize>,
    },
    /// Score generated windows against real ones.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Real windows blob (default: the prepared test split).
        #[arg(long, value_name = "PATH")]
        real: Option<PathBuf>,
        /// Generated windows blob (default `<out>/samples.bin`).
        #[arg(long, value_name = "PATH")]
        synth: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML experiment file; built-in defaults when omitted.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, value_name = "DIR", default_value = "runs/default")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Synthetic {
    Sinusoid,
}

#[derive(Clone, Copy, ValueEnum)]
enum Solver {
    Euler,
    Adaptive,
}

impl Common {
    fn context(&self) -> lfts::Result<RunContext> {
        let config = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        RunContext::new(config, self.seed, &self.out)
    }
}

fn solver_spec(ctx: &RunContext, solver: Option<Solver>, steps: Option<usize>) -> Option<SolverSpec> {
    let s = &ctx.config.sampler;
    match (solver, steps) {
        (Some(Solver::Adaptive), _) => Some(SolverSpec::Adaptive {
            rtol: s.rtol,
            atol: s.atol,
        }),
        (Some(Solver::Euler), steps) => Some(SolverSpec::euler(steps.unwrap_or(s.steps))),
        (None, Some(steps)) => Some(SolverSpec::euler(steps)),
        (None, None) => None,
    }
}

fn run(cmd: Command) -> lfts::Result<()> {
    match cmd {
        Command::Prepare { common, synthetic } => {
            let ctx = common.context()?;
            let data = pipeline::prepare(&ctx, synthetic.is_some())?;
            println!(
                "prepared {} train / {} test windows in {}",
                data.train.len(),
                data.test.len(),
                ctx.out.display()
            );
        }
        Command::TrainAe { common } => {
            let ctx = common.context()?;
            let out = pipeline::train_ae(&ctx)?;
            if let Some(last) = out.log.last() {
                println!("train-ae: final recon {:.5}, total {:.5}", last.recon, last.total);
            }
            println!("wrote {}", out.checkpoint.display());
        }
        Command::FinetuneEq { common, ae_checkpoint } => {
            let ctx = common.context()?;
            let out = pipeline::finetune_eq(&ctx, ae_checkpoint.as_deref())?;
            if let Some(last) = out.log.last() {
                println!("finetune-eq: final recon {:.5}, eq {:.5}", last.recon, last.eq);
            }
            println!("wrote {}", out.checkpoint.display());
        }
        Command::TrainFlow { common, ae_checkpoint } => {
            let ctx = common.context()?;
            let out = pipeline::train_flow(&ctx, ae_checkpoint.as_deref())?;
            if let Some(last) = out.log.last() {
                println!("train-flow: final fm loss {:.5}", last.loss);
            }
            println!("wrote {}", out.checkpoint.display());
        }
        Command::Sample {
            common,
            ae_checkpoint,
            solver,
            steps,
            n,
        } => {
            let ctx = common.context()?;
            let spec = solver_spec(&ctx, solver, steps);
            let out = pipeline::sample(&ctx, ae_checkpoint.as_deref(), spec, n)?;
            let t = &out.timing;
            println!(
                "sampled {} windows; integration {:.3}s, decode {:.3}s, total {:.3}s",
                out.samples.len(),
                t.integration,
                t.decode,
                t.total
            );
        }
        Command::Eval { common, real, synth } => {
            let ctx = common.context()?;
            let r = pipeline::evaluate(&ctx, real.as_deref(), synth.as_deref())?;
            println!(
                "discriminative {:.4} ± {:.4}",
                r.discriminative.mean, r.discriminative.std
            );
            println!(
                "predictive {:.4} ± {:.4} (real-data baseline {:.4})",
                r.predictive.mean, r.predictive.std, r.predictive_self.mean
            );
            for p in &r.ks_table {
                println!("KS t={}: {:.4} ({:.1}%)", p.probe, p.mean_statistic, p.rejection_pct);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    if let Ok(n) = std::env::var("LFTS_THREADS") {
        std::env::set_var("RAYON_NUM_THREADS", n);
    }
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
