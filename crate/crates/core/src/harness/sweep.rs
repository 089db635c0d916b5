use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::config::{Mode, TrainConfig};
use super::metrics::{format_float, MetricsRecord};
use super::parallel_map;
use super::train::{run_training_on, NoObserver, RunOptions};
use crate::data::Dataset;
use crate::error::{DbpError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub final_train_loss: f64,
    pub final_val_loss: f64,
    pub best_val_loss: f64,
    pub records: Vec<MetricsRecord>,
}

/// One grid point. A failed run keeps its error message.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub lr_w: f64,
    pub lr_r: f64,
    pub result: std::result::Result<CellResult, String>,
}

impl SweepCell {
    pub fn mode(&self) -> Mode {
        if self.lr_r > 0.0 {
            Mode::Dbp
        } else {
            Mode::Bp
        }
    }
}

/// Config of the cell `(lr_w, lr_r)`; a zero decorrelation rate runs plain BP.
pub fn cell_config(base: &TrainConfig, lr_w: f64, lr_r: f64, index: usize) -> TrainConfig {
    let mut c = base.clone();
    c.lr = lr_w;
    if lr_r > 0.0 {
        c.mode = Mode::Dbp;
        c.decorr.eta = lr_r;
    } else {
        c.mode = Mode::Bp;
    }
    c.output_dir = base.output_dir.join(format!("cell_{index}"));
    c
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SweepOptions {
    /// Epoch cap per cell; the schedule still spans `train.epochs`.
    pub budget: Option<usize>,
    /// Concurrent runs; 0 uses every available core.
    pub jobs: usize,
}

/// Trains one short run per `(lr_w, lr_r)` pair. Failing cells do not stop the sweep.
pub fn sweep(
    base: &TrainConfig,
    lr_w: &[f64],
    lr_r: &[f64],
    options: SweepOptions,
    data: &Dataset,
) -> Result<Vec<SweepCell>> {
    if lr_w.is_empty() || lr_r.is_empty() {
        return Err(DbpError::Config("sweep grid must not be empty".into()));
    }
    let grid: Vec<(f64, f64)> = lr_w.iter().flat_map(|&w| lr_r.iter().map(move |&r| (w, r))).collect();
    let indexed: Vec<(usize, (f64, f64))> = grid.into_iter().enumerate().collect();
    let cells = parallel_map(&indexed, options.jobs, |&(i, (w, r))| {
        let cfg = cell_config(base, w, r, i);
        let result = run_training_on(&cfg, data, &mut NoObserver, RunOptions { max_epochs: options.budget })
            .map_err(|e| e.to_string())
            .and_then(|o| {
                let last = o.final_record().cloned().ok_or("no epochs were run")?;
                Ok(CellResult {
                    final_train_loss: last.train_loss,
                    final_val_loss: last.val_loss,
                    best_val_loss: o.best_val_loss().unwrap_or(f64::NAN),
                    records: o.records,
                })
            });
        SweepCell { lr_w: w, lr_r: r, result }
    })?;
    write_sweep_table(&cells, base.output_dir.join("sweep.csv"))?;
    Ok(cells)
}

pub fn sweep_table(cells: &[SweepCell]) -> String {
    let mut out = String::from("lr_W,lr_R,mode,final_train_loss,final_val_loss,best_val_loss,status\n");
    for c in cells {
        let _ = match &c.result {
            Ok(r) => writeln!(
                out,
                "{},{},{},{},{},{},ok",
                format_float(c.lr_w),
                format_float(c.lr_r),
                c.mode(),
                format_float(r.final_train_loss),
                format_float(r.final_val_loss),
                format_float(r.best_val_loss)
            ),
            Err(e) => writeln!(
                out,
                "{},{},{},,,,\"failed: {}\"",
                format_float(c.lr_w),
                format_float(c.lr_r),
                c.mode(),
                e.replace('"', "'")
            ),
        };
    }
    out
}

pub fn write_sweep_table(cells: &[SweepCell], path: impl AsRef<Path>) -> Result<()> {
    if let Some(dir) = path.as_ref().parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, sweep_table(cells))?;
    Ok(())
}

/// Cell of the given mode with the lowest final validation loss.
pub fn best_cell(cells: &[SweepCell], mode: Mode) -> Option<&SweepCell> {
    cells
        .iter()
        .filter(|c| c.mode() == mode)
        .filter_map(|c| c.result.as_ref().ok().map(|r| (c, r.final_val_loss)))
        .filter(|(_, v)| v.is_finite())
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(c, _)| c)
}
