use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{DbpError, Result};

pub const METRICS_HEADER: &str = "epoch,train_loss,val_loss,mean_decorr_loss,wall_seconds,lr_W,lr_R";

/// One row of the metrics file, written after every epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    /// Number of completed training epochs.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Decorrelation loss of the measured sites, averaged over sites and
    /// validation batches.
    pub mean_decorr_loss: f64,
    /// Cumulative training time, validation excluded.
    pub wall_seconds: f64,
    /// Weight learning rate at the last iteration of the epoch.
    pub lr_w: f64,
    /// Decorrelation learning rate in effect during the epoch.
    pub lr_r: f64,
}

/// Formats with 9 significant digits.
pub fn format_float(v: f64) -> String {
    if v == 0.0 && v.is_sign_positive() {
        return "0".into();
    }
    if v.is_finite() {
        format!("{v:.8e}")
    } else {
        format!("{v}")
    }
}

impl MetricsRecord {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            format_float(self.train_loss),
            format_float(self.val_loss),
            format_float(self.mean_decorr_loss),
            format_float(self.wall_seconds),
            format_float(self.lr_w),
            format_float(self.lr_r),
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != 7 {
            return Err(DbpError::Shape(format!(
                "metrics row needs 7 fields, got {}: `{line}`",
                fields.len()
            )));
        }
        let float = |i: usize| -> Result<f64> {
            fields[i]
                .parse()
                .map_err(|_| DbpError::Shape(format!("bad number `{}` in metrics row", fields[i])))
        };
        Ok(Self {
            epoch: fields[0]
                .parse()
                .map_err(|_| DbpError::Shape(format!("bad epoch `{}` in metrics row", fields[0])))?,
            train_loss: float(1)?,
            val_loss: float(2)?,
            mean_decorr_loss: float(3)?,
            wall_seconds: float(4)?,
            lr_w: float(5)?,
            lr_r: float(6)?,
        })
    }
}

/// Full CSV text: header, one row per record, then optional `#` comment lines.
pub fn metrics_csv(records: &[MetricsRecord], notes: &[String]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.to_csv_row());
        out.push('\n');
    }
    for note in notes {
        let _ = writeln!(out, "# {note}");
    }
    out
}

pub fn export_metrics(records: &[MetricsRecord], path: impl AsRef<Path>) -> Result<()> {
    write_metrics(records, &[], path)
}

pub fn write_metrics(records: &[MetricsRecord], notes: &[String], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, metrics_csv(records, notes))?;
    Ok(())
}

/// Parses metrics text, skipping `#` comments.
pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
    match lines.next() {
        Some(h) if h.trim() == METRICS_HEADER => {}
        other => {
            return Err(DbpError::Shape(format!(
                "metrics header mismatch: `{}`",
                other.unwrap_or_default()
            )))
        }
    }
    lines.map(MetricsRecord::parse_csv_row).collect()
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    parse_metrics(&fs::read_to_string(path)?)
}
