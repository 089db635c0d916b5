use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use dbp_core::data::{generate_synthetic, save_dataset, SyntheticSpec};
use dbp_core::harness::{
    best_cell, fuse_checkpoint, prepare_data, run_paired_comparison, run_training_on, sweep, CompareOptions,
    MetricsRecord, Mode, RunOptions, SweepOptions, TrainConfig, TrainObserver,
};
use dbp_core::mae::MaeModel;
use dbp_core::DbpError;

/// Decorrelated backpropagation experiments on masked autoencoders.
#[derive(Parser)]
#[command(name = "dbp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a single model.
    Train(TrainArgs),
    /// Paired BP vs DBP runs over several seeds.
    Compare(CompareArgs),
    /// Short runs over a grid of weight and decorrelation learning rates.
    Sweep(SweepArgs),
    /// Fold the decorrelation matrices of a checkpoint into its weights.
    Fuse(FuseArgs),
    /// Write a synthetic dataset file.
    GenData(GenDataArgs),
    /// Print the resolved configuration.
    ShowConfig(ConfigArgs),
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Start from the full-scale ViT-Base recipe instead of the desk defaults.
    #[arg(long)]
    full_scale: bool,
    /// Config file of `key = value` lines.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set decorr.eta=1e-3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Weight learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Decorrelation learning rate.
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Dataset file; `synthetic` selects the generated dataset.
    #[arg(long)]
    data: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> anyhow::Result<TrainConfig> {
        let mut c = if self.full_scale { TrainConfig::full_scale() } else { TrainConfig::default() };
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            c.apply_text(&text)?;
        }
        for kv in &self.overrides {
            let Some((k, v)) = kv.split_once('=') else {
                return Err(DbpError::Config(format!("expected KEY=VALUE, got `{kv}`")).into());
            };
            c.set(k.trim(), v.trim())?;
        }
        if let Some(m) = self.mode {
            c.mode = m;
        }
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.lr {
            c.lr = v;
        }
        if let Some(v) = self.eta {
            c.decorr.eta = v;
        }
        if let Some(v) = &self.output_dir {
            c.output_dir = v.clone();
        }
        if let Some(v) = &self.data {
            c.set("data.source", v)?;
        }
        Ok(c)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Stop early after this many epochs; the schedule still spans `--epochs`.
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_values_t = [0, 1, 2, 3, 4])]
    seeds: Vec<u64>,
    #[arg(long)]
    bp_lr: Option<f64>,
    #[arg(long)]
    dbp_lr: Option<f64>,
    /// Concurrent runs; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Comma-separated weight learning rates.
    #[arg(long, value_delimiter = ',', required = true)]
    lr_w: Vec<f64>,
    /// Comma-separated decorrelation rates; 0 runs BP.
    #[arg(long, value_delimiter = ',', required = true)]
    lr_r: Vec<f64>,
    /// Epochs per cell.
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

#[derive(Args)]
struct FuseArgs {
    input: PathBuf,
    output: PathBuf,
}

#[derive(Args)]
struct GenDataArgs {
    output: PathBuf,
    #[arg(long, default_value_t = 4480)]
    count: usize,
    #[arg(long, default_value_t = 3)]
    channels: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 2.0)]
    correlation_length: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

struct Progress {
    quiet: bool,
}

impl TrainObserver for Progress {
    fn on_epoch_end(&mut self, r: &MetricsRecord, _model: &MaeModel) {
        if !self.quiet {
            eprintln!(
                "epoch {:>4}  train {:.5}  val {:.5}  decorr {:.3e}  lr {:.2e}  {:.1}s",
                r.epoch, r.train_loss, r.val_loss, r.mean_decorr_loss, r.lr_w, r.wall_seconds
            );
        }
    }
}

fn train(args: TrainArgs) -> anyhow::Result<()> {
    let config = args.config.resolve()?;
    config.validate()?;
    let data = prepare_data(&config)?;
    let outcome = run_training_on(
        &config,
        &data,
        &mut Progress { quiet: args.quiet },
        RunOptions { max_epochs: args.max_epochs },
    )?;
    match (outcome.final_record(), outcome.best_val_loss()) {
        (Some(last), Some(best)) => println!(
            "finished {} epochs, final val {:.6}, best val {:.6} (epoch {})",
            last.epoch,
            last.val_loss,
            best,
            outcome.best_epoch.unwrap_or(0)
        ),
        _ => println!("no epochs run"),
    }
    println!("outputs in {}", outcome.output_dir.display());
    Ok(())
}

fn compare(args: CompareArgs) -> anyhow::Result<()> {
    let config = args.config.resolve()?;
    config.validate()?;
    let data = prepare_data(&config)?;
    let options = CompareOptions {
        bp_lr: args.bp_lr,
        dbp_lr: args.dbp_lr,
        jobs: args.jobs,
    };
    let summary = run_paired_comparison(&config, &args.seeds, &data, &options)?;
    print!("{}", summary.report());
    Ok(())
}

fn run_sweep(args: SweepArgs) -> anyhow::Result<()> {
    let config = args.config.resolve()?;
    config.validate()?;
    let data = prepare_data(&config)?;
    let options = SweepOptions {
        budget: args.budget,
        jobs: args.jobs,
    };
    let cells = sweep(&config, &args.lr_w, &args.lr_r, options, &data)?;
    for c in &cells {
        match &c.result {
            Ok(r) => println!("lr_W={:.1e} lr_R={:.1e}  final val {:.6}", c.lr_w, c.lr_r, r.final_val_loss),
            Err(e) => println!("lr_W={:.1e} lr_R={:.1e}  failed: {e}", c.lr_w, c.lr_r),
        }
    }
    for mode in [Mode::Bp, Mode::Dbp] {
        if let Some(c) = best_cell(&cells, mode) {
            println!("best {mode}: lr_W={:.1e} lr_R={:.1e}", c.lr_w, c.lr_r);
        }
    }
    if cells.iter().all(|c| c.result.is_err()) {
        bail!("every sweep cell failed");
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Compare(a) => compare(a),
        Command::Sweep(a) => run_sweep(a),
        Command::Fuse(a) => {
            fuse_checkpoint(&a.input, &a.output).with_context(|| format!("fusing {}", a.input.display()))?;
            println!("fused checkpoint written to {}", a.output.display());
            Ok(())
        }
        Command::GenData(a) => {
            let spec = SyntheticSpec {
                count: a.count,
                channels: a.channels,
                size: a.size,
                correlation_length: a.correlation_length,
                seed: a.seed,
            };
            let data = generate_synthetic(&spec)?;
            save_dataset(&a.output, &data)?;
            println!("{} images written to {}", data.len(), a.output.display());
            Ok(())
        }
        Command::ShowConfig(a) => {
            let c = a.resolve()?;
            c.validate()?;
            print!("{}", c.to_text());
            Ok(())
        }
    }
}

/// 2 for configuration problems, 3 for numerical failures, 1 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<DbpError>().map(DbpError::root) {
        Some(DbpError::Config(_)) => 2,
        Some(
            DbpError::NumericalDivergence { .. } | DbpError::NonFiniteLoss { .. } | DbpError::NonFiniteGradient(_),
        ) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
