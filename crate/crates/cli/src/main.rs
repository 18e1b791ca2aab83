//! Command-line front end for the forecasting engine.
//!
//! Every subcommand resolves one `RunConfig` from an optional JSON file
//! plus flag overrides, then delegates to the corresponding workflow.
//! Exit codes: 0 success, 2 configuration error, 3 data or I/O error,
//! 4 numeric failure.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use premixer_core::config::RunConfig;
use premixer_core::error::{CoreError, Result};
use premixer_core::gradcheck::run_suite;
use premixer_core::workflows::{
    run_eval, run_pretrain, run_synth, run_train, run_transfer, EvalReport,
};

#[derive(Parser)]
#[command(name = "premixer", version, about = "Spatiotemporal forecasting with a pre-trained patch encoder and MLP mixers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic traffic-like dataset.
    Synth(Overrides),
    /// Pre-train the patch encoder on the training split.
    Pretrain(Overrides),
    /// Train the downstream forecaster and report on the test split.
    Train(Overrides),
    /// Evaluate a stored forecaster checkpoint on the test split.
    Eval(Overrides),
    /// Train on a target dataset around an encoder pre-trained elsewhere.
    Transfer(Overrides),
    /// Audit every hand-derived gradient against central finite differences.
    Gradcheck,
}

/// Flag overrides applied on top of the JSON config. Unset flags leave the
/// loaded or default values untouched.
#[derive(Args, Default)]
struct Overrides {
    /// JSON configuration file read before applying the other flags.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Output directory for checkpoints, logs and reports.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Dataset file, .pmxt or .csv.
    #[arg(long, value_name = "FILE")]
    data: Option<PathBuf>,
    /// Pre-trained encoder checkpoint directory.
    #[arg(long, value_name = "DIR")]
    encoder: Option<PathBuf>,
    /// Forecaster checkpoint directory to evaluate.
    #[arg(long, value_name = "DIR")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Synthetic dataset node count.
    #[arg(long)]
    nodes: Option<usize>,
    /// Synthetic dataset length in days.
    #[arg(long)]
    days: Option<usize>,
    /// Forecaster training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Encoder pre-training epochs.
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Training window stride.
    #[arg(long)]
    stride: Option<usize>,
    /// Validation window stride.
    #[arg(long)]
    val_stride: Option<usize>,
    /// Spatial mixing flavor: structured or basic.
    #[arg(long)]
    spatial_mode: Option<String>,
    /// Neighborhood aggregation: mean or sum.
    #[arg(long)]
    aggregation: Option<String>,
    /// Continue pre-training from the checkpoint already in the output
    /// directory.
    #[arg(long)]
    resume: bool,
    /// Train the forecaster from scratch without any encoder.
    #[arg(long)]
    no_pretrain: bool,
    /// Drop the contrastive objective during pre-training.
    #[arg(long)]
    no_cl: bool,
    /// Disable node-context gating in the spatial mixer.
    #[arg(long)]
    no_context: bool,
    /// Replace the spatio-temporal encoding with a temporal-only one.
    #[arg(long)]
    no_stpe: bool,
}

impl Overrides {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.out {
            cfg.out_dir = v.clone();
        }
        if let Some(v) = &self.data {
            cfg.data = Some(v.clone());
        }
        if let Some(v) = &self.encoder {
            cfg.encoder_dir = Some(v.clone());
        }
        if let Some(v) = &self.checkpoint {
            cfg.checkpoint_dir = Some(v.clone());
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.nodes {
            cfg.nodes = v;
        }
        if let Some(v) = self.days {
            cfg.days = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.pretrain_epochs {
            cfg.pretrain_epochs = v;
        }
        if let Some(v) = self.batch {
            cfg.batch = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.stride {
            cfg.stride = v;
        }
        if let Some(v) = self.val_stride {
            cfg.val_stride = v;
        }
        if let Some(v) = &self.spatial_mode {
            cfg.spatial_mode = v.clone();
        }
        if let Some(v) = &self.aggregation {
            cfg.aggregation = v.clone();
        }
        if self.resume {
            cfg.resume = true;
        }
        if self.no_pretrain {
            cfg.no_pretrain = true;
        }
        if self.no_cl {
            cfg.no_cl = true;
        }
        if self.no_context {
            cfg.no_context = true;
        }
        if self.no_stpe {
            cfg.no_stpe = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_report(report: &EvalReport) {
    match report {
        EvalReport::Horizon(r) => {
            println!("horizon  mae        rmse       mape");
            for (label, m) in [("3", r.h3), ("6", r.h6), ("12", r.h12), ("average", r.average)] {
                println!(
                    "{label:<8} {:<10.4} {:<10.4} {:.3}%",
                    m.mae, m.rmse, m.mape_percent
                );
            }
        }
        EvalReport::Pooled { mae, rmse, mape } => {
            println!("pooled   mae {mae:.4}  rmse {rmse:.4}  mape {mape:.3}%");
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(o) => {
            let cfg = o.resolve()?;
            let path = run_synth(&cfg)?;
            println!("wrote {}", path.display());
        }
        Command::Pretrain(o) => {
            let cfg = o.resolve()?;
            let run = run_pretrain(&cfg)?;
            if let Some(last) = run.log.last() {
                println!(
                    "pre-training finished after {} epochs: recon {:.6}, cl {:.6}",
                    run.log.len(),
                    last.recon,
                    last.contrastive
                );
            }
        }
        Command::Train(o) => {
            let cfg = o.resolve()?;
            let outcome = run_train(&cfg)?;
            println!(
                "trained {} epochs, best validation MAE {:.6} at epoch {}",
                outcome.run.log.len(),
                outcome.run.best_val_mae,
                outcome.run.best_epoch
            );
            print_report(&outcome.report);
        }
        Command::Eval(o) => {
            let cfg = o.resolve()?;
            let report = run_eval(&cfg)?;
            print_report(&report);
        }
        Command::Transfer(o) => {
            let cfg = o.resolve()?;
            let outcome = run_transfer(&cfg)?;
            println!(
                "transfer training finished, best validation MAE {:.6}",
                outcome.run.best_val_mae
            );
            print_report(&outcome.report);
        }
        Command::Gradcheck => {
            let rows = run_suite()?;
            println!("{:<22} {:>5} {:>12} {:>10}  status", "check", "seeds", "max_rel_err", "tolerance");
            let mut failures = 0usize;
            for r in &rows {
                println!(
                    "{:<22} {:>5} {:>12.3e} {:>10.0e}  {}",
                    r.name,
                    r.seeds,
                    r.max_err,
                    r.tolerance,
                    if r.passed() { "pass" } else { "FAIL" }
                );
                if !r.passed() {
                    failures += 1;
                }
            }
            if failures > 0 {
                return Err(CoreError::Numeric(format!(
                    "{failures} gradient check(s) exceeded tolerance"
                )));
            }
        }
    }
    Ok(())
}

/// Honor PREMIXER_THREADS before any parallel kernel spins up the global
/// pool with the machine default.
fn configure_threads() {
    let Ok(raw) = std::env::var("PREMIXER_THREADS") else {
        return;
    };
    match raw.parse::<usize>() {
        Ok(n) if n >= 1 => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                log::warn!("could not size the thread pool: {e}");
            }
        }
        _ => log::warn!("ignoring PREMIXER_THREADS value '{raw}'; expected a positive integer"),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    configure_threads();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
