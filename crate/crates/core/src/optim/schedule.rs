use std::f64::consts::PI;

use crate::error::{DbpError, Result};

/// Linear warmup followed by cosine decay, evaluated at fractional epochs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub min_lr: f64,
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs > self.total_epochs {
            return Err(DbpError::Config(format!(
                "warmup_epochs {} exceeds total epochs {}",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if !(self.base_lr >= 0.0 && self.min_lr >= 0.0 && self.min_lr <= self.base_lr) {
            return Err(DbpError::Config(format!(
                "learning rates must satisfy 0 <= min_lr ({}) <= base_lr ({})",
                self.min_lr, self.base_lr
            )));
        }
        Ok(())
    }

    /// Learning rate at (fractional) `epoch`, clamped to `[0, total_epochs]`.
    pub fn lr_at(&self, epoch: f64) -> f64 {
        let epoch = epoch.clamp(0.0, self.total_epochs as f64);
        let warmup = self.warmup_epochs as f64;
        if epoch < warmup {
            return self.base_lr * epoch / warmup;
        }
        let span = (self.total_epochs - self.warmup_epochs) as f64;
        if span == 0.0 {
            return self.base_lr;
        }
        let progress = (epoch - warmup) / span;
        self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (PI * progress).cos())
    }
}
