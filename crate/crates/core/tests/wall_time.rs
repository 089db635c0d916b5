//! Kept in its own binary so no other test competes for the CPU while it times epochs.
//! Epoch times on a shared host jitter by tens of percent, hence the per-epoch minima.

mod common;

use std::time::{Duration, Instant};

use common::tiny_config;
use dbp_core::harness::{prepare_data, run_training_on, Clock, MetricsRecord, NoObserver, RunOptions, TrainObserver};

/// Interleaved repeats; each epoch keeps its fastest training time across them.
const REPEATS: usize = 5;

fn fold_epoch_minima(minima: &mut [f64], records: &[MetricsRecord]) {
    let mut prev = 0.0;
    for (m, r) in minima.iter_mut().zip(records) {
        *m = m.min(r.wall_seconds - prev);
        prev = r.wall_seconds;
    }
}

struct SlowValidation;

impl TrainObserver for SlowValidation {
    fn on_validation_batch(&mut self, _epoch: usize) {
        // busy, like real validation work; sleeping would hand the VM idle credit
        let started = Instant::now();
        while started.elapsed() < Duration::from_millis(500) {
            std::hint::spin_loop();
        }
    }
}

#[test]
fn wall_time_excludes_validation() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny_config(dir.path());
    c.clock = Clock::Wall;
    c.data = dbp_core::harness::DataSource::Synthetic(dbp_core::data::SyntheticSpec {
        count: 480,
        ..Default::default()
    });
    c.val_fraction = 0.1;
    c.batch_size = 16;
    let data = prepare_data(&c).unwrap();
    let mut fast = vec![f64::INFINITY; c.epochs];
    let mut slow = vec![f64::INFINITY; c.epochs];
    let mut last = None;
    for i in 0..2 * REPEATS {
        // F S S F F S ...
        if (i + i / 2) % 2 == 0 {
            let run = run_training_on(&c, &data, &mut NoObserver, RunOptions::default()).unwrap();
            fold_epoch_minima(&mut fast, &run.records);
        } else {
            let run = run_training_on(&c, &data, &mut SlowValidation, RunOptions::default()).unwrap();
            fold_epoch_minima(&mut slow, &run.records);
            last = Some(run);
        }
    }
    let (f, s): (f64, f64) = (fast.iter().sum(), slow.iter().sum());
    let validation_delay = 4.5;
    assert!(validation_delay > 0.5 * f, "slowdown {validation_delay}s is small next to training time {f}s");
    assert!((s - f).abs() <= 0.05 * f, "fast {f}s slow {s}s");
    for w in last.unwrap().records.windows(2) {
        assert!(w[1].wall_seconds >= w[0].wall_seconds);
    }
}
