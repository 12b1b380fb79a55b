//! `v2w`: ingest NVD feeds, build a vocabulary, pretrain, train, evaluate
//! and predict hierarchical CVE → CWE links.
//!
//! Exit codes:
//!
//! | code | meaning                                                    |
//! |------|------------------------------------------------------------|
//! | 0    | success                                                    |
//! | 1    | any other failure (parse errors, invalid flags, training)  |
//! | 2    | a required checkpoint, run config or input file is missing |
//! | 3    | flags disagree with a checkpoint or the run being evaluated |

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{ArgAction, Args, Parser, Subcommand};
use v2w_core::KTriple;

use crate::config::{set, ModelArgs, ModelKind, RunConfig, SplitArgs, TrainArgs, RUN_CONFIG};

#[derive(Debug)]
pub enum Exit {
    Missing(String),
    Mismatch(String),
}

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Exit::Missing(what) => write!(f, "missing {what}"),
            Exit::Mismatch(what) => write!(f, "configuration mismatch: {what}"),
        }
    }
}

impl std::error::Error for Exit {}

#[derive(Parser)]
#[command(
    name = "v2w",
    version,
    about = "Hierarchical CVE to CWE link prediction"
)]
struct Cli {
    /// Worker threads; defaults to every core.
    #[arg(long, global = true, env = "V2W_THREADS")]
    threads: Option<usize>,
    /// Start from a saved run_config.json; explicit flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// -v info, -vv debug.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse NVD JSON feeds into a corpus CSV plus a validated hierarchy.
    Ingest {
        #[arg(long)]
        nvd_dir: PathBuf,
        #[arg(long)]
        cwe_defs: PathBuf,
        #[arg(long)]
        cwe_edges: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Fail on the first malformed item instead of skipping it.
        #[arg(long)]
        strict: bool,
    },
    /// Write a synthetic corpus with planted keywords.
    Synth {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        cves: Option<usize>,
        /// Nodes per level, e.g. 3,6,3.
        #[arg(long, value_delimiter = ',')]
        levels: Option<Vec<usize>>,
    },
    /// Build a subword vocabulary from corpus and CWE descriptions.
    BuildVocab {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Masked-LM pretraining on the training window's descriptions.
    Pretrain(TrainCmd),
    /// Link training (or a baseline) on the protocol's training split.
    Train(TrainCmd),
    /// Evaluate a training run on its protocol's test sets.
    Evaluate {
        /// Directory written by `train`.
        #[arg(long)]
        run: PathBuf,
        /// Output directory; defaults to <run>/eval.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        split: SplitArgs,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        monte_carlo_seed: Option<u64>,
    },
    /// Print ranked CWE paths for one description (argument or stdin).
    Predict {
        #[arg(long)]
        model: PathBuf,
        /// Directory holding the CWE definition and edge tables.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Per-level budget k1,k2,k3.
        #[arg(long)]
        k: Option<KTriple>,
        #[arg(long)]
        beta: Option<f64>,
        /// Also write prediction.json and the run config here.
        #[arg(long)]
        out: Option<PathBuf>,
        text: Option<String>,
    },
}

#[derive(Args)]
struct TrainCmd {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Checkpoint to start from (e.g. a pretrained model).
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    model_kind: Option<ModelKind>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    split: SplitArgs,
}

impl TrainCmd {
    fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.data, self.data.clone().map(Some));
        set(&mut cfg.vocab, self.vocab.clone().map(Some));
        set(&mut cfg.init, self.init.clone().map(Some));
        set(&mut cfg.out, self.out.clone().map(Some));
        set(&mut cfg.model_kind, self.model_kind);
        self.model.apply(&mut cfg.model);
        self.train.apply(&mut cfg.train);
        self.split.apply(cfg);
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        builder = builder.num_threads(n);
    }
    builder.build_global().context("starting the worker pool")?;

    let replayed = cli.config.is_some();
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.threads = rayon::current_num_threads();

    match cli.command {
        Command::Ingest {
            nvd_dir,
            cwe_defs,
            cwe_edges,
            out,
            strict,
        } => {
            cfg.command = "ingest".into();
            set(&mut cfg.out, out.map(Some));
            commands::ingest(&cfg, &nvd_dir, &cwe_defs, &cwe_edges, strict)
        }
        Command::Synth {
            out,
            seed,
            cves,
            levels,
        } => {
            cfg.command = "synth".into();
            set(&mut cfg.out, out.map(Some));
            set(&mut cfg.synth.seed, seed);
            set(&mut cfg.synth.cves, cves);
            set(&mut cfg.synth.level_sizes, levels);
            commands::synth(&cfg)
        }
        Command::BuildVocab { data, size, out } => {
            cfg.command = "build-vocab".into();
            set(&mut cfg.data, data.map(Some));
            set(&mut cfg.vocab_size, size);
            set(&mut cfg.out, out.map(Some));
            commands::build_vocab(&cfg)
        }
        Command::Pretrain(args) => {
            cfg.command = "pretrain".into();
            args.apply(&mut cfg);
            commands::pretrain_cmd(&mut cfg)
        }
        Command::Train(args) => {
            cfg.command = "train".into();
            args.apply(&mut cfg);
            commands::train_cmd(&mut cfg, &args.model, replayed)
        }
        Command::Evaluate {
            run,
            out,
            split,
            beta,
            monte_carlo_seed,
        } => {
            let trained = RunConfig::load(&run.join(RUN_CONFIG))?;
            let conflicts = split.conflicts(&trained);
            if !conflicts.is_empty() {
                return Err(
                    Exit::Mismatch(format!("{}: {}", run.display(), conflicts.join(", "))).into(),
                );
            }
            if !replayed {
                let threads = cfg.threads;
                cfg = trained.clone();
                cfg.threads = threads;
            }
            cfg.command = "evaluate".into();
            cfg.out = Some(out.unwrap_or_else(|| run.join("eval")));
            set(&mut cfg.beta, beta);
            set(&mut cfg.monte_carlo_seed, monte_carlo_seed);
            commands::evaluate_cmd(&trained, &cfg, &run)
        }
        Command::Predict {
            model,
            data,
            k,
            beta,
            out,
            text,
        } => {
            cfg.command = "predict".into();
            set(&mut cfg.data, data.map(Some));
            set(&mut cfg.k, k);
            set(&mut cfg.beta, beta);
            set(&mut cfg.out, out.map(Some));
            commands::predict_cmd(&cfg, &model, text)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // clap's own code for usage errors is 2, which is taken.
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<Exit>() {
                Some(Exit::Missing(_)) => ExitCode::from(2),
                Some(Exit::Mismatch(_)) => ExitCode::from(3),
                None => ExitCode::from(1),
            }
        }
    }
}
