use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::save_checkpoint;
use super::config::{Clock, DataSource, Mode, TrainConfig};
use super::metrics::{write_metrics, MetricsRecord};
use crate::data::{augment, generate_synthetic, load_dataset, Dataset, Normalization};
use crate::error::{DbpError, Result};
use crate::mae::{mae_loss, mae_loss_grad, normalize_patch_targets, MaeModel, MaskPlan};
use crate::nn::Parameters;
use crate::optim::{dbp_step, AdamWState};

pub const METRICS_FILE: &str = "metrics.csv";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const CONFIG_FILE: &str = "config.txt";

/// Independent random streams of a run.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
enum Stream {
    Init = 1,
    Shuffle = 2,
    Augment = 3,
    Mask = 4,
    Decorr = 5,
    ValidationMask = 6,
}

/// Generator keyed by `(seed, stream, epoch, batch)`.
fn stream_rng(seed: u64, stream: Stream, epoch: usize, batch: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for (i, v) in [seed, stream as u64, epoch as u64, batch as u64].into_iter().enumerate() {
        key[8 * i..8 * (i + 1)].copy_from_slice(&v.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Hooks into a running training loop.
pub trait TrainObserver {
    /// Called before every validation batch.
    fn on_validation_batch(&mut self, _epoch: usize) {}

    /// Called once the record of an epoch is final.
    fn on_epoch_end(&mut self, _record: &MetricsRecord, _model: &MaeModel) {}
}

pub struct NoObserver;

impl TrainObserver for NoObserver {}

/// Limits that do not change the run's schedule.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Stop after this many epochs while keeping the schedule of `config.epochs`.
    pub max_epochs: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<MetricsRecord>,
    /// Epoch of the best validation loss, ties resolved to the earlier epoch.
    pub best_epoch: Option<usize>,
    pub model: MaeModel,
    pub optimizer: AdamWState,
    /// Seconds spent in decorrelation updates, per epoch.
    pub decorr_seconds: Vec<f64>,
    pub output_dir: PathBuf,
}

impl TrainOutcome {
    pub fn best_val_loss(&self) -> Option<f64> {
        self.best_epoch.map(|e| self.records[e - 1].val_loss)
    }

    pub fn final_record(&self) -> Option<&MetricsRecord> {
        self.records.last()
    }
}

/// Loads or generates the dataset a config points at.
pub fn prepare_data(config: &TrainConfig) -> Result<Dataset> {
    match &config.data {
        DataSource::Synthetic(spec) => generate_synthetic(spec),
        DataSource::File(path) => load_dataset(path).map_err(|e| e.annotate(path.display().to_string())),
    }
}

pub fn run_training(config: &TrainConfig) -> Result<TrainOutcome> {
    let data = prepare_data(config)?;
    run_training_on(config, &data, &mut NoObserver, RunOptions::default())
}

/// Fixed per-image mask plans for the validation images.
fn validation_plans(config: &TrainConfig, count: usize) -> Result<Vec<MaskPlan>> {
    let mut rng = stream_rng(config.seed, Stream::ValidationMask, 0, 0);
    (0..count)
        .map(|_| MaskPlan::generate(config.mae.num_patches(), config.mae.mask_ratio, rng.random()))
        .collect()
}

struct Batch {
    patches: Array3<f64>,
    targets: Array3<f64>,
}

fn make_batch(
    model: &MaeModel,
    config: &TrainConfig,
    images: Vec<Array3<f64>>,
) -> Result<Batch> {
    let patches = model.patchify_batch(&images)?;
    let mut targets = patches.clone();
    if config.mae.norm_pix_loss {
        normalize_patch_targets(&mut targets);
    }
    Ok(Batch { patches, targets })
}

/// Validation loss and mean decorrelation loss over the held-out images.
pub fn evaluate(
    model: &mut MaeModel,
    config: &TrainConfig,
    data: &Dataset,
    indices: &[usize],
    plans: &[MaskPlan],
    norm: &Normalization,
    observer: &mut dyn TrainObserver,
    epoch: usize,
) -> Result<(f64, f64)> {
    let sites = config.measured_sites();
    let (mut loss_sum, mut decorr_sum, mut decorr_n, mut n) = (0.0, 0.0, 0.0, 0usize);
    for (chunk, chunk_plans) in indices.chunks(config.batch_size).zip(plans.chunks(config.batch_size)) {
        observer.on_validation_batch(epoch);
        let images = chunk
            .iter()
            .map(|&i| {
                let mut img = data.image_f64(i);
                norm.apply(&mut img);
                img
            })
            .collect();
        let batch = make_batch(model, config, images)?;
        let recon = model.forward(batch.patches.view(), chunk_plans)?;
        let loss = mae_loss(recon.view(), batch.targets.view(), chunk_plans, config.mae.loss_on_masked_only)?;
        loss_sum += loss * chunk.len() as f64;
        n += chunk.len();
        if let Some(d) = model.mean_site_decorrelation_loss(&sites)? {
            decorr_sum += d * chunk.len() as f64;
            decorr_n += chunk.len() as f64;
        }
    }
    model.clear_caches();
    let decorr = if decorr_n > 0.0 { decorr_sum / decorr_n } else { f64::NAN };
    Ok((loss_sum / n as f64, decorr))
}

/// Builds the model of a run: seeded initialisation, then decorrelation
/// matrices at every site in DBP mode.
pub fn init_model(config: &TrainConfig) -> Result<MaeModel> {
    let mut model = MaeModel::new(config.mae.clone(), &mut stream_rng(config.seed, Stream::Init, 0, 0))?;
    model.enable_decorrelation(&config.decorr_sites())?;
    Ok(model)
}

/// Trains on `data`, writing metrics and checkpoints to `config.output_dir`.
pub fn run_training_on(
    config: &TrainConfig,
    data: &Dataset,
    observer: &mut dyn TrainObserver,
    options: RunOptions,
) -> Result<TrainOutcome> {
    config.validate()?;
    let mae = &config.mae;
    if data.channels() != mae.channels || data.height() != mae.image_size || data.width() != mae.image_size {
        return Err(DbpError::Config(format!(
            "dataset images are {}x{}x{} but the model expects {}x{}x{}",
            data.channels(),
            data.height(),
            data.width(),
            mae.channels,
            mae.image_size,
            mae.image_size
        )));
    }
    let (train_idx, val_idx) = data.split_tail(config.val_fraction)?;
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(DbpError::Config(format!(
            "{} images cannot be split into non-empty train and validation sets",
            data.len()
        )));
    }
    let out_dir = config.output_dir.clone();
    fs::create_dir_all(&out_dir)?;
    fs::write(out_dir.join(CONFIG_FILE), config.to_text())?;

    let (mean, std) = data.channel_stats(&train_idx);
    let norm = Normalization { mean, std };
    let val_plans = validation_plans(config, val_idx.len())?;
    let mut model = init_model(config)?;
    let mut optimizer = AdamWState::new(config.adamw);

    let metrics_path = out_dir.join(METRICS_FILE);
    let mut records = Vec::new();
    let mut decorr_seconds = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    let mut wall = 0.0;

    write_metrics(&records, &[], &metrics_path)?;
    if config.epochs == 0 {
        save_checkpoint(out_dir.join(LAST_CHECKPOINT), config, 0, &model, Some(&optimizer), false)?;
    }

    let epochs = options.max_epochs.map_or(config.epochs, |m| m.min(config.epochs));
    let batches_per_epoch = train_idx.len().div_ceil(config.batch_size);
    for epoch in 0..epochs {
        let started = Instant::now();
        let trained = train_epoch(
            &mut model,
            &mut optimizer,
            config,
            data,
            &train_idx,
            &norm,
            epoch,
            batches_per_epoch,
        );
        let (train_loss, dbp_secs, lr_w) = match trained {
            Ok(v) => v,
            Err(e) => {
                let note = format!("diverged in epoch {}: {e}", epoch + 1);
                write_metrics(&records, &[note], &metrics_path)?;
                return Err(e.annotate(format!("epoch {}", epoch + 1)));
            }
        };
        if config.clock == Clock::Wall {
            wall += started.elapsed().as_secs_f64();
        }
        decorr_seconds.push(dbp_secs);

        let (val_loss, mean_decorr_loss) =
            evaluate(&mut model, config, data, &val_idx, &val_plans, &norm, observer, epoch)?;
        let dbp_active = config.mode == Mode::Dbp && config.decorr.active_at(epoch);
        let record = MetricsRecord {
            epoch: epoch + 1,
            train_loss,
            val_loss,
            mean_decorr_loss,
            wall_seconds: wall,
            lr_w,
            lr_r: if dbp_active { config.decorr.eta } else { 0.0 },
        };
        records.push(record.clone());
        write_metrics(&records, &[], &metrics_path)?;

        if best.is_none_or(|(_, b)| val_loss < b) {
            best = Some((epoch + 1, val_loss));
            save_checkpoint(out_dir.join(BEST_CHECKPOINT), config, epoch + 1, &model, Some(&optimizer), false)?;
        }
        save_checkpoint(out_dir.join(LAST_CHECKPOINT), config, epoch + 1, &model, Some(&optimizer), false)?;
        observer.on_epoch_end(&record, &model);
    }

    Ok(TrainOutcome {
        records,
        best_epoch: best.map(|(e, _)| e),
        model,
        optimizer,
        decorr_seconds,
        output_dir: out_dir,
    })
}

/// One pass over the training images. Returns the mean training loss, the
/// seconds spent in decorrelation updates and the last learning rate used.
#[allow(clippy::too_many_arguments)]
fn train_epoch(
    model: &mut MaeModel,
    optimizer: &mut AdamWState,
    config: &TrainConfig,
    data: &Dataset,
    train_idx: &[usize],
    norm: &Normalization,
    epoch: usize,
    batches_per_epoch: usize,
) -> Result<(f64, f64, f64)> {
    let mae = &config.mae;
    let schedule = config.schedule();
    let mut order = train_idx.to_vec();
    order.shuffle(&mut stream_rng(config.seed, Stream::Shuffle, epoch, 0));
    let mut dbp_rng = stream_rng(config.seed, Stream::Decorr, epoch, 0);
    let (mut loss_sum, mut n, mut dbp_secs, mut lr) = (0.0, 0usize, 0.0, 0.0);

    for (b, chunk) in order.chunks(config.batch_size).enumerate() {
        lr = schedule.lr_at(epoch as f64 + b as f64 / batches_per_epoch as f64);
        let mut aug_rng = stream_rng(config.seed, Stream::Augment, epoch, b);
        let images = chunk
            .iter()
            .map(|&i| {
                let img = data.image_f64(i);
                if config.augment_enabled {
                    augment(img.view(), &mut aug_rng, &config.augment, norm)
                } else {
                    let mut img = img;
                    norm.apply(&mut img);
                    img
                }
            })
            .collect();
        let batch = make_batch(model, config, images)?;
        let mut mask_rng = stream_rng(config.seed, Stream::Mask, epoch, b);
        let plans = (0..chunk.len())
            .map(|_| MaskPlan::generate(mae.num_patches(), mae.mask_ratio, mask_rng.random()))
            .collect::<Result<Vec<_>>>()?;

        let recon = model.forward(batch.patches.view(), &plans)?;
        let loss = mae_loss(recon.view(), batch.targets.view(), &plans, mae.loss_on_masked_only)?;
        if !loss.is_finite() {
            return Err(DbpError::NonFiniteLoss { epoch: epoch + 1 });
        }
        let grad = mae_loss_grad(recon.view(), batch.targets.view(), &plans, mae.loss_on_masked_only)?;
        model.zero_grad();
        model.backward(grad.view())?;
        optimizer.step(&mut model.params(), lr)?;

        if config.mode == Mode::Dbp {
            let t = Instant::now();
            let layers = model.linears_mut().into_iter().map(|(_, l)| l);
            dbp_step(layers, &config.decorr, epoch, &mut dbp_rng)?;
            dbp_secs += t.elapsed().as_secs_f64();
        }
        loss_sum += loss * chunk.len() as f64;
        n += chunk.len();
    }
    model.clear_caches();
    Ok((loss_sum / n as f64, dbp_secs, lr))
}

/// Metrics file of a finished or aborted run.
pub fn metrics_path(dir: impl AsRef<Path>) -> PathBuf {
    dir.as_ref().join(METRICS_FILE)
}
