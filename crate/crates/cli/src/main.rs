//! `moe`: generate synthetic data, train, evaluate and audit the routed MoE acoustic model.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use moe_core::checkpoint::Checkpoint;
use moe_core::data::{generate, load_corpus, save_corpus, split};
use moe_core::eval::evaluate;
use moe_core::flops::count_flops;
use moe_core::gradcheck::check_params;
use moe_core::layers::Parameters;
use moe_core::model::build_model;
use moe_core::train::Trainer;
use moe_core::{Model, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "moe", version, about = "Top-1 routed MoE acoustic model with embedding-augmented routers")]
struct Cli {
    /// key=value configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the model seed (and the data seed for gen-data)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of simulated expert-parallel workers
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus and write train/test splits
    GenData {
        #[arg(long, default_value_t = 2000)]
        count: usize,
        /// Percentage of utterances (by id hash) held out for test
        #[arg(long, default_value_t = 10)]
        test_percent: u64,
    },
    /// Train and write metrics.csv and model.ckpt into the output directory
    Train {
        /// Training corpus (default: <out>/train.corpus)
        #[arg(long)]
        data: Option<PathBuf>,
        /// Overrides the configured step count
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Evaluate a checkpoint on a corpus
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Analytic FLOPs for a one-second input
    Flops,
    /// Finite-difference check of the full training-step gradients
    GradCheck {
        #[arg(long, default_value_t = 3)]
        utterances: usize,
        /// Coordinates probed per parameter tensor
        #[arg(long, default_value_t = 4)]
        probes: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::parse("")?,
    };
    if let Some(seed) = cli.seed {
        cfg.model.seed = seed;
        cfg.synth.seed = seed;
    }
    if let Some(w) = cli.workers {
        cfg.model.n_workers = w;
    }
    cfg.model.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::GenData { count, test_percent } => {
            let corpus = generate(&cfg.synth, *count)?;
            let (train, test) = split(&corpus, *test_percent);
            create_dir(&cli.out)?;
            save_corpus(&cli.out.join("train.corpus"), &train)?;
            save_corpus(&cli.out.join("test.corpus"), &test)?;
            println!("wrote {} train and {} test utterances to {}", train.len(), test.len(), cli.out.display());
        }
        Command::Train { data, steps } => {
            let path = data.clone().unwrap_or_else(|| cli.out.join("train.corpus"));
            let corpus = load_corpus(&path).with_context(|| format!("reading {}", path.display()))?;
            let mut trainer: Trainer = Trainer::from_config(&cfg.model)?;
            log::info!("parameters: {}", trainer.model.param_count());
            create_dir(&cli.out)?;
            let mut metrics = BufWriter::new(File::create(cli.out.join("metrics.csv"))?);
            let steps = steps.unwrap_or(cfg.model.steps);
            let history = trainer.run(&corpus, steps, Some(&mut metrics))?;
            metrics.flush()?;
            Checkpoint::from_trainer(&trainer).save(&cli.out.join("model.ckpt"))?;
            if let Some(last) = history.last() {
                println!("step {} total {:.6} l_c {:.6}", last.step, last.loss.total, last.loss.l_c);
            }
        }
        Command::Eval { checkpoint, data } => {
            let ck: Checkpoint = Checkpoint::load(checkpoint)?;
            let corpus = load_corpus(data)?;
            print!("{}", evaluate(&ck.model, &corpus)?.to_text());
        }
        Command::Flops => {
            let f = count_flops(&cfg.model);
            let m: Model = build_model(&cfg.model)?;
            println!("expert {}", f.expert);
            println!("router {}", f.router);
            println!("other {}", f.other);
            println!("total {}", f.total());
            println!("parameters {}", m.param_count());
        }
        Command::GradCheck {
            utterances,
            probes,
            tolerance,
        } => {
            let model: Model = build_model(&cfg.model)?;
            let mut synth = cfg.synth.clone();
            synth.t_max = synth.t_min.max(8).min(synth.t_max);
            let corpus = generate(&synth, (*utterances).max(1))?;
            let batch: Vec<_> = corpus.iter().collect();
            let (_, grads) = model.loss_and_grads(&batch)?;
            let reports = check_params(&model, &grads, 1e-5, *probes, |m| {
                m.loss_and_grads(&batch).map(|(l, _)| l.total).unwrap_or(f64::NAN)
            });
            let mut worst = 0.0f64;
            for r in &reports {
                println!("{:<40} {:>4} {:.3e}", r.name, r.checked, r.max_rel_err);
                worst = worst.max(r.max_rel_err);
            }
            println!("max relative error {worst:.3e}");
            if !(worst <= *tolerance) {
                return Err(moe_core::Error::Numeric {
                    term: "gradient check".into(),
                    value: worst,
                }
                .into());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("MOE_LOG_LEVEL", "error")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let category = e
                .chain()
                .find_map(|c| c.downcast_ref::<moe_core::Error>())
                .map_or("io", moe_core::Error::category);
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error[{category}]: {msg}");
            ExitCode::FAILURE
        }
    }
}
