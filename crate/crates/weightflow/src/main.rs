use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use weightflow::config::ConfigFile;
use weightflow::pipeline::{self, CompareOptions, EvolveOptions, TerminalOptions, TrainOptions};
use weightflow::{Error, Result};
use weightflow_core::autoencoder::Activation;
use weightflow_core::drift::AdamHyper;

#[derive(Parser, Debug)]
#[command(name = "weightflow", version, about = "Weight-row density flow of a two-unit autoencoder bottleneck")]
struct Cli {
    /// `key = value` file supplying defaults for any flag.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the autoencoder and record weight snapshots.
    Train(TrainArgs),
    /// Evolve the weight-row densities through the trained epochs.
    Evolve(EvolveArgs),
    /// Compare theoretical and empirical bottleneck outputs.
    Compare(CompareArgs),
    /// Terminal-time detection, scale-flow residuals and characteristics.
    Terminal(TerminalArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    mnist_dir: Option<PathBuf>,
    #[arg(long)]
    run: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    /// Hidden activation: relu, tanh, sigmoid or identity.
    #[arg(long)]
    activation: Option<String>,
    /// Train on the first N images only.
    #[arg(long)]
    train_samples: Option<usize>,
    #[arg(long)]
    compare_samples: Option<usize>,
}

#[derive(Args, Debug)]
struct EvolveArgs {
    #[arg(long)]
    run: Option<PathBuf>,
    /// Cells per axis.
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    substeps: Option<u32>,
    #[arg(long)]
    sigma_scale: Option<f64>,
    /// Factor on Scott's rule for the drift kernel.
    #[arg(long)]
    bandwidth: Option<f64>,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[arg(long)]
    run: Option<PathBuf>,
    /// Compare a single epoch instead of all of them.
    #[arg(long)]
    epoch: Option<u32>,
    #[arg(long)]
    ensemble: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    bandwidth: Option<f64>,
    #[arg(long)]
    grid: Option<usize>,
}

#[derive(Args, Debug)]
struct TerminalArgs {
    #[arg(long)]
    run: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    arc_steps: Option<usize>,
    /// Semicolon-separated start points, e.g. "0.1,0.2;-0.3,0.4".
    #[arg(long)]
    curve_seeds: Option<String>,
}

const KNOWN_KEYS: &[&str] = &[
    "run",
    "mnist-dir",
    "seed",
    "epochs",
    "batch-size",
    "eta",
    "beta1",
    "beta2",
    "eps",
    "activation",
    "train-samples",
    "compare-samples",
    "grid",
    "substeps",
    "sigma-scale",
    "bandwidth",
    "epoch",
    "ensemble",
    "threshold",
    "arc-steps",
    "curve-seeds",
];

fn run_dir(cfg: &ConfigFile, flag: Option<PathBuf>) -> Result<PathBuf> {
    cfg.pick(flag, "run", PathBuf::from("runs/default"))
}

fn parse_seeds(text: &str) -> Result<Vec<[f64; 2]>> {
    text.split(';')
        .filter(|s| !s.trim().is_empty())
        .map(|pair| {
            let v: Vec<f64> = pair
                .split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::config(format!("bad curve seed {pair:?}")))?;
            match v.as_slice() {
                [a, b] if a.is_finite() && b.is_finite() => Ok([*a, *b]),
                _ => Err(Error::config(format!("curve seed {pair:?} needs two finite numbers"))),
            }
        })
        .collect()
}

fn check_threads() -> Result<()> {
    match std::env::var("WEIGHTFLOW_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(()),
            _ => Err(Error::config(format!("WEIGHTFLOW_THREADS must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(()),
    }
}

fn execute(cli: Cli) -> Result<()> {
    check_threads()?;
    let cfg = match &cli.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    cfg.check_keys(KNOWN_KEYS)?;
    match cli.command {
        Command::Train(a) => {
            let d = AdamHyper::default();
            let activation: String = cfg.pick(a.activation, "activation", "relu".into())?;
            let opts = TrainOptions {
                mnist_dir: cfg.pick(a.mnist_dir, "mnist-dir", PathBuf::from("data"))?,
                run: run_dir(&cfg, a.run)?,
                seed: cfg.pick(a.seed, "seed", 0)?,
                epochs: cfg.pick(a.epochs, "epochs", 5)?,
                batch_size: cfg.pick(a.batch_size, "batch-size", 64)?,
                adam: AdamHyper {
                    eta: cfg.pick(a.eta, "eta", d.eta)?,
                    beta1: cfg.pick(a.beta1, "beta1", d.beta1)?,
                    beta2: cfg.pick(a.beta2, "beta2", d.beta2)?,
                    eps: cfg.pick(a.eps, "eps", d.eps)?,
                },
                activation: Activation::parse(&activation).map_err(|e| Error::config(e.to_string()))?,
                train_samples: match a.train_samples {
                    Some(n) => Some(n),
                    None => cfg.get("train-samples")?,
                },
                compare_samples: cfg.pick(a.compare_samples, "compare-samples", 1000)?,
            };
            let run = pipeline::train(&opts)?;
            println!("trained {} epochs into {}", opts.epochs, run.root().display());
        }
        Command::Evolve(a) => {
            let d = EvolveOptions::new("");
            let opts = EvolveOptions {
                run: run_dir(&cfg, a.run)?,
                grid: cfg.pick(a.grid, "grid", d.grid)?,
                substeps: cfg.pick(a.substeps, "substeps", d.substeps)?,
                sigma_scale: cfg.pick(a.sigma_scale, "sigma-scale", d.sigma_scale)?,
                bandwidth: cfg.pick(a.bandwidth, "bandwidth", d.bandwidth)?,
                cfl_safety: d.cfl_safety,
            };
            let run = pipeline::evolve(&opts)?;
            println!("evolved densities written to {}", run.root().display());
        }
        Command::Compare(a) => {
            let d = CompareOptions::new("");
            let epoch: Option<u32> = match a.epoch {
                Some(e) => Some(e),
                None => cfg.get("epoch")?,
            };
            let opts = CompareOptions {
                run: run_dir(&cfg, a.run)?,
                epochs: epoch.map(|e| vec![e]),
                ensemble: cfg.pick(a.ensemble, "ensemble", d.ensemble)?,
                seed: match a.seed {
                    Some(s) => Some(s),
                    None => cfg.get("seed")?,
                },
                bandwidth: cfg.pick(a.bandwidth, "bandwidth", d.bandwidth)?,
                grid: cfg.pick(a.grid, "grid", d.grid)?,
            };
            let (_, results) = pipeline::compare(&opts)?;
            for r in results {
                println!("epoch {} layer {}: mse {:e} pearson {:e}", r.epoch, r.layer, r.mse, r.pearson);
            }
        }
        Command::Terminal(a) => {
            let d = TerminalOptions::new("");
            let seeds: Option<String> = match a.curve_seeds {
                Some(s) => Some(s),
                None => cfg.get("curve-seeds")?,
            };
            let opts = TerminalOptions {
                run: run_dir(&cfg, a.run)?,
                threshold: cfg.pick(a.threshold, "threshold", d.threshold)?,
                arc_steps: cfg.pick(a.arc_steps, "arc-steps", d.arc_steps)?,
                curve_seeds: seeds.as_deref().map(parse_seeds).transpose()?,
            };
            let (_, report) = pipeline::terminal(&opts)?;
            for l in report["layers"].as_array().into_iter().flatten() {
                println!("layer {}: terminal epoch {} ({})", l["layer"], l["terminal"], l["triggered_by"]);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
