use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use geoflow::flowmatch::Parameterization;
use geoflow::rollout::Commit;
use geoflow_cli::commands::{
    self, EvalArgs, GenArgs, GradcheckArgs, RolloutArgs, SnrArgs, Suite, TrainArgs, SNR_CURVE,
};
use geoflow_cli::{CliError, RunConfig};

#[derive(Parser)]
#[command(name = "geoflow", version, about = "Latent geometry world model: data, training, rollout and evaluation")]
struct Cli {
    /// Overrides every seed the command uses (training, rollout noise, episode numbering, probes).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset, one directory per episode.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        episodes: usize,
        #[arg(long, default_value_t = 10)]
        frames: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train stage 1 from scratch or stage 2 from a stage-1 checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the step count of the selected stage.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        ckpt_every: Option<usize>,
    },
    /// Forecast an episode from a checkpoint and decode the result.
    Rollout {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Episode position in the dataset manifest.
        #[arg(long, default_value_t = 0)]
        episode: usize,
        /// First observed frame.
        #[arg(long, default_value_t = 0)]
        start: usize,
        #[arg(long)]
        context: Option<usize>,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long, value_enum)]
        commit: Option<CommitArg>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a predicted trajectory directory with ground truth.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_enum, default_value_t = Suite::All)]
        suite: Suite,
        /// Defaults to `<pred>/metrics.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Latent SNR curves for clean-target and velocity-target training.
    Snr {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "param", value_enum, value_delimiter = ',', default_values_t = [ParamArg::Z, ParamArg::V])]
        params: Vec<ParamArg>,
        #[arg(long, value_delimiter = ',', default_values_t = [64, 256])]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 300)]
        iters: usize,
        #[arg(long, default_value_t = 30)]
        log_every: usize,
        #[arg(long, default_value_t = 32)]
        episodes: usize,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long, default_value_t = 8)]
        heldout: usize,
        /// Output directory for snr_curve.csv.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Finite-difference check of the full stage-1 loss gradient.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Check a trained checkpoint instead of a random dense model.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        probes: usize,
        #[arg(long, default_value_t = 1e-3)]
        step: f64,
        #[arg(long, default_value_t = 2)]
        batch: usize,
        #[arg(long, default_value_t = 1.0)]
        gain: f64,
        /// Fails when the maximum relative error exceeds this.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum CommitArg {
    First,
    All,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ParamArg {
    Z,
    V,
}

impl From<ParamArg> for Parameterization {
    fn from(p: ParamArg) -> Self {
        match p {
            ParamArg::Z => Parameterization::Clean,
            ParamArg::V => Parameterization::Velocity,
        }
    }
}

fn load(path: Option<PathBuf>) -> Result<RunConfig, CliError> {
    RunConfig::load_or_default(path.as_deref())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let seed = cli.seed;
    match cli.command {
        Command::Gen {
            config,
            episodes,
            frames,
            out,
        } => {
            let m = commands::cmd_gen(&GenArgs {
                config: load(config)?,
                episodes,
                frames,
                first_seed: seed.unwrap_or(0),
                out: out.clone(),
            })?;
            println!("wrote {} episodes of {} frames to {}", m.seeds.len(), m.frames, out.display());
        }
        Command::Train {
            config,
            dataset,
            stage,
            resume,
            out,
            steps,
            ckpt_every,
        } => {
            let config = config.map(|p| RunConfig::load(&p)).transpose()?;
            let r = commands::cmd_train(&TrainArgs {
                config,
                dataset,
                stage,
                resume,
                out,
                steps,
                ckpt_every,
                seed,
            })?;
            if let Some(last) = r.log.last() {
                println!("step {} loss {:.6} grad_norm {:.4}", last.step, last.loss, last.grad_norm);
            }
            println!("checkpoint {}", r.checkpoint.display());
        }
        Command::Rollout {
            ckpt,
            dataset,
            episode,
            start,
            context,
            horizon,
            commit,
            out,
        } => {
            let meta = commands::cmd_rollout(&RolloutArgs {
                ckpt,
                dataset,
                episode,
                start,
                context,
                horizon,
                commit: commit.map(|c| match c {
                    CommitArg::First => Commit::First,
                    CommitArg::All => Commit::All,
                }),
                seed,
                out: out.clone(),
            })?;
            println!(
                "context {:?} forecast {:?} -> {}",
                meta.context_frames,
                meta.predicted_frames,
                out.display()
            );
        }
        Command::Eval {
            config,
            pred,
            gt,
            suite,
            out,
        } => {
            let report = commands::cmd_eval(&EvalArgs {
                config: load(config)?,
                pred,
                gt,
                suite,
                out,
            })?;
            println!("{}", serde_json::to_string_pretty(&report.by_horizon).expect("report serializes"));
            if let Some(t) = report.trajectory {
                println!("ate {:.6} rte {:.6} rre {:.4} deg", t.ate, t.rte, t.rre_deg);
            }
        }
        Command::Snr {
            config,
            params,
            dims,
            iters,
            log_every,
            episodes,
            frames,
            heldout,
            out,
        } => {
            let mut config = load(config)?;
            if let Some(s) = seed {
                config.train.seed = s;
            }
            std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
            commands::cmd_snr(
                &SnrArgs {
                    config,
                    params: params.into_iter().map(Into::into).collect(),
                    dims,
                    iters,
                    log_every,
                    train_episodes: episodes,
                    train_frames: frames,
                    heldout_episodes: heldout,
                    out: Some(out.join(SNR_CURVE)),
                },
                |r| println!("d={} {} iter {} snr {:.3} dB", r.dim, r.parameterization, r.iteration, r.snr_db),
            )?;
        }
        Command::Gradcheck {
            config,
            ckpt,
            probes,
            step,
            batch,
            gain,
            tolerance,
        } => {
            let report = commands::cmd_gradcheck(&GradcheckArgs {
                config: load(config)?,
                ckpt,
                probes,
                step,
                batch,
                gain,
                seed: seed.unwrap_or(0),
            })?;
            for e in &report.entries {
                println!(
                    "{:<40} probes {:>4} max rel {:.3e} (analytic {:.6e} numeric {:.6e})",
                    e.name, e.probes, e.max_rel_error, e.worst_analytic, e.worst_numeric
                );
            }
            let worst = report.max_rel_error();
            println!("probes {} max relative error {:.3e}", report.total_probes(), worst);
            if worst > tolerance {
                return Err(CliError::Numeric(format!("max relative error {worst:.3e} exceeds {tolerance:.1e}")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    if let Some(n) = std::env::var("VGW_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // Only fails if a pool already exists, which cannot happen this early.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
