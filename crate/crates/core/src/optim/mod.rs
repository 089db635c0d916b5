//! Optimizers: AdamW with a warmup-cosine schedule for weights and biases, and
//! the plain constant-rate decorrelation update for `R`.

mod adamw;
mod dbp;
mod schedule;

pub use adamw::{AdamWConfig, AdamWState, Moments};
pub use dbp::dbp_step;
pub use schedule::ScheduleConfig;
