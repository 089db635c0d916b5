use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::config::{Mode, TrainConfig};
use super::metrics::{format_float, MetricsRecord};
use super::stats::{summarize, welch_t_test, Summary, WelchTest};
use super::parallel_map;
use super::train::{run_training_on, NoObserver, RunOptions};
use crate::data::Dataset;
use crate::error::{DbpError, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CompareOptions {
    /// Per-mode weight learning rates; `None` keeps the base config's rate.
    pub bp_lr: Option<f64>,
    pub dbp_lr: Option<f64>,
    /// Concurrent runs; 0 uses every available core.
    pub jobs: usize,
}

/// Config of one arm of the comparison. A zero decorrelation rate turns the
/// DBP arm into plain BP.
pub fn arm_config(base: &TrainConfig, mode: Mode, seed: u64, options: &CompareOptions) -> TrainConfig {
    let mut c = base.clone();
    c.seed = seed;
    c.mode = if mode == Mode::Dbp && c.decorr.eta > 0.0 { Mode::Dbp } else { Mode::Bp };
    let lr = match mode {
        Mode::Bp => options.bp_lr,
        Mode::Dbp => options.dbp_lr,
    };
    if let Some(lr) = lr {
        c.lr = lr;
    }
    c.output_dir = base.output_dir.join(mode.to_string()).join(format!("seed_{seed}"));
    c
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedRun {
    pub seed: u64,
    pub records: Vec<MetricsRecord>,
    /// Seconds spent in decorrelation updates, per epoch.
    pub decorr_seconds: Vec<f64>,
}

/// First epoch whose validation loss is at or below `target`, with its wall time.
pub fn first_reaching(records: &[MetricsRecord], target: f64) -> Option<(usize, f64)> {
    records
        .iter()
        .find(|r| r.val_loss <= target)
        .map(|r| (r.epoch, r.wall_seconds))
}

/// How quickly each mode reaches the best BP validation loss of a seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedComparison {
    pub seed: u64,
    pub target_val_loss: f64,
    pub bp_epochs: Option<usize>,
    pub dbp_epochs: Option<usize>,
    pub bp_seconds: Option<f64>,
    pub dbp_seconds: Option<f64>,
    pub bp_final_val: f64,
    pub dbp_final_val: f64,
    pub bp_final_decorr: f64,
    pub dbp_final_decorr: f64,
}

impl SeedComparison {
    /// DBP reached the target in strictly fewer epochs than BP.
    pub fn dbp_faster(&self) -> bool {
        matches!((self.dbp_epochs, self.bp_epochs), (Some(d), Some(b)) if d < b)
    }
}

/// Statistics over seeds of every metric at one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub train_loss: Summary,
    pub val_loss: Summary,
    pub mean_decorr_loss: Summary,
    pub wall_seconds: Summary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonSummary {
    pub bp_runs: Vec<SeedRun>,
    pub dbp_runs: Vec<SeedRun>,
    pub bp_epochs: Vec<EpochSummary>,
    pub dbp_epochs: Vec<EpochSummary>,
    pub per_seed: Vec<SeedComparison>,
    pub final_val_bp: Summary,
    pub final_val_dbp: Summary,
    pub t_test: WelchTest,
}

fn epoch_summaries(runs: &[SeedRun]) -> Vec<EpochSummary> {
    let epochs = runs.iter().map(|r| r.records.len()).min().unwrap_or(0);
    (0..epochs)
        .map(|e| {
            let col = |f: fn(&MetricsRecord) -> f64| {
                summarize(&runs.iter().map(|r| f(&r.records[e])).collect::<Vec<_>>())
            };
            EpochSummary {
                epoch: e + 1,
                train_loss: col(|r| r.train_loss),
                val_loss: col(|r| r.val_loss),
                mean_decorr_loss: col(|r| r.mean_decorr_loss),
                wall_seconds: col(|r| r.wall_seconds),
            }
        })
        .collect()
}

impl ComparisonSummary {
    /// Aggregates paired runs; `bp_runs[i]` and `dbp_runs[i]` share a seed.
    pub fn from_runs(bp_runs: Vec<SeedRun>, dbp_runs: Vec<SeedRun>) -> Result<Self> {
        if bp_runs.len() != dbp_runs.len() || bp_runs.is_empty() {
            return Err(DbpError::State("paired comparison needs matching, non-empty run lists".into()));
        }
        let mut per_seed = Vec::new();
        for (bp, dbp) in bp_runs.iter().zip(&dbp_runs) {
            let (Some(bp_last), Some(dbp_last)) = (bp.records.last(), dbp.records.last()) else {
                return Err(DbpError::State(format!("seed {} produced no epochs", bp.seed)));
            };
            let target = bp.records.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
            let b = first_reaching(&bp.records, target);
            let d = first_reaching(&dbp.records, target);
            per_seed.push(SeedComparison {
                seed: bp.seed,
                target_val_loss: target,
                bp_epochs: b.map(|x| x.0),
                dbp_epochs: d.map(|x| x.0),
                bp_seconds: b.map(|x| x.1),
                dbp_seconds: d.map(|x| x.1),
                bp_final_val: bp_last.val_loss,
                dbp_final_val: dbp_last.val_loss,
                bp_final_decorr: bp_last.mean_decorr_loss,
                dbp_final_decorr: dbp_last.mean_decorr_loss,
            });
        }
        let bp_final: Vec<f64> = per_seed.iter().map(|s| s.bp_final_val).collect();
        let dbp_final: Vec<f64> = per_seed.iter().map(|s| s.dbp_final_val).collect();
        Ok(Self {
            bp_epochs: epoch_summaries(&bp_runs),
            dbp_epochs: epoch_summaries(&dbp_runs),
            final_val_bp: summarize(&bp_final),
            final_val_dbp: summarize(&dbp_final),
            t_test: welch_t_test(&dbp_final, &bp_final),
            bp_runs,
            dbp_runs,
            per_seed,
        })
    }

    /// Seeds in which DBP reached the BP target in strictly fewer epochs.
    pub fn dbp_faster_count(&self) -> usize {
        self.per_seed.iter().filter(|s| s.dbp_faster()).count()
    }

    /// Long-format table `mode,epoch,metric,mean,std,stderr`.
    pub fn epoch_table(&self) -> String {
        let mut out = String::from("mode,epoch,metric,mean,std,stderr\n");
        for (mode, rows) in [("bp", &self.bp_epochs), ("dbp", &self.dbp_epochs)] {
            for row in rows {
                for (name, s) in [
                    ("train_loss", row.train_loss),
                    ("val_loss", row.val_loss),
                    ("mean_decorr_loss", row.mean_decorr_loss),
                    ("wall_seconds", row.wall_seconds),
                ] {
                    let _ = writeln!(
                        out,
                        "{mode},{},{name},{},{},{}",
                        row.epoch,
                        format_float(s.mean),
                        format_float(s.std),
                        format_float(s.stderr)
                    );
                }
            }
        }
        out
    }

    /// Human-readable per-seed table and headline statistics.
    pub fn report(&self) -> String {
        let opt_e = |v: Option<usize>| v.map_or_else(|| "never".to_string(), |e| e.to_string());
        let opt_s = |v: Option<f64>| v.map_or_else(|| "never".to_string(), |s| format!("{s:.1}"));
        let mut out = String::new();
        let _ = writeln!(
            out,
            "seed  target_val  bp_epochs  dbp_epochs  bp_seconds  dbp_seconds  bp_final_val  dbp_final_val  bp_decorr  dbp_decorr"
        );
        for s in &self.per_seed {
            let _ = writeln!(
                out,
                "{:<5} {:<11.6} {:<10} {:<11} {:<11} {:<12} {:<13.6} {:<14.6} {:<10.3e} {:.3e}",
                s.seed,
                s.target_val_loss,
                opt_e(s.bp_epochs),
                opt_e(s.dbp_epochs),
                opt_s(s.bp_seconds),
                opt_s(s.dbp_seconds),
                s.bp_final_val,
                s.dbp_final_val,
                s.bp_final_decorr,
                s.dbp_final_decorr
            );
        }
        let _ = writeln!(
            out,
            "final val loss  bp {:.6} +- {:.6} (std) / {:.6} (stderr)  dbp {:.6} +- {:.6} (std) / {:.6} (stderr)",
            self.final_val_bp.mean,
            self.final_val_bp.std,
            self.final_val_bp.stderr,
            self.final_val_dbp.mean,
            self.final_val_dbp.std,
            self.final_val_dbp.stderr
        );
        let _ = writeln!(
            out,
            "dbp faster in {}/{} seeds; welch t = {:.4}, p = {:.4}",
            self.dbp_faster_count(),
            self.per_seed.len(),
            self.t_test.t,
            self.t_test.p_value
        );
        out
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join("summary_epochs.csv"), self.epoch_table())?;
        fs::write(dir.join("summary.txt"), self.report())?;
        Ok(())
    }
}

/// Runs BP and DBP for every seed on the same data, then aggregates.
/// Both arms of a seed share initialisation, data order, augmentation and masks.
pub fn run_paired_comparison(
    base: &TrainConfig,
    seeds: &[u64],
    data: &Dataset,
    options: &CompareOptions,
) -> Result<ComparisonSummary> {
    if seeds.len() < 2 {
        return Err(DbpError::Config(format!(
            "a paired comparison needs at least 2 seeds, got {}",
            seeds.len()
        )));
    }
    let tasks: Vec<(u64, Mode)> = seeds
        .iter()
        .flat_map(|&s| [(s, Mode::Bp), (s, Mode::Dbp)])
        .collect();
    let results = parallel_map(&tasks, options.jobs, |&(seed, mode)| {
        let cfg = arm_config(base, mode, seed, options);
        run_training_on(&cfg, data, &mut NoObserver, RunOptions::default())
            .map(|o| SeedRun {
                seed,
                records: o.records,
                decorr_seconds: o.decorr_seconds,
            })
            .map_err(|e| e.annotate(format!("mode={mode} seed={seed}")))
    })?;
    let mut bp_runs = Vec::new();
    let mut dbp_runs = Vec::new();
    for ((_, mode), run) in tasks.iter().zip(results) {
        match mode {
            Mode::Bp => bp_runs.push(run?),
            Mode::Dbp => dbp_runs.push(run?),
        }
    }
    let summary = ComparisonSummary::from_runs(bp_runs, dbp_runs)?;
    summary.write(&base.output_dir)?;
    Ok(summary)
}
