mod common;

use std::fs;

use common::tiny_config;
use dbp_core::decorr::DecorrConfig;
use dbp_core::harness::{
    best_cell, evaluate, load_checkpoint, prepare_data, read_metrics, run_paired_comparison, run_training,
    run_training_on, save_checkpoint, sweep, CompareOptions, MetricsRecord, Mode, NoObserver, RunOptions,
    SweepOptions, TrainObserver, BEST_CHECKPOINT, LAST_CHECKPOINT, METRICS_FILE, METRICS_HEADER,
};
use dbp_core::mae::{MaeModel, MaskPlan};
use dbp_core::data::Normalization;
use dbp_core::DbpError;
use ndarray::Array2;

fn dbp(config: &mut dbp_core::harness::TrainConfig, eta: f64) {
    config.mode = Mode::Dbp;
    config.decorr = DecorrConfig {
        eta,
        ..DecorrConfig::default()
    };
}

#[test]
fn identical_runs_write_identical_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for name in ["a", "b"] {
        let mut c = tiny_config(&dir.path().join(name));
        dbp(&mut c, 1e-3);
        run_training(&c).unwrap();
        bytes.push(fs::read(dir.path().join(name).join(METRICS_FILE)).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
    assert_eq!(String::from_utf8_lossy(&bytes[0]).lines().count(), 4);
}

#[test]
fn zero_epochs_writes_header_and_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny_config(dir.path());
    c.epochs = 0;
    c.warmup_epochs = 0;
    let out = run_training(&c).unwrap();
    assert!(out.records.is_empty());
    assert_eq!(fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap().trim(), METRICS_HEADER);
    let ckpt = load_checkpoint(dir.path().join(LAST_CHECKPOINT)).unwrap();
    assert_eq!(ckpt.epoch, 0);
    assert!(!dir.path().join(BEST_CHECKPOINT).exists());
}

#[test]
fn bp_run_measures_but_never_learns_decorrelation() {
    let dir = tempfile::tempdir().unwrap();
    let c = tiny_config(dir.path());
    let out = run_training(&c).unwrap();
    for r in &out.records {
        assert!(r.mean_decorr_loss.is_finite() && r.mean_decorr_loss > 0.0);
        assert_eq!(r.lr_r, 0.0);
    }
    for file in [LAST_CHECKPOINT, BEST_CHECKPOINT] {
        let ckpt = load_checkpoint(dir.path().join(file)).unwrap();
        assert!(ckpt
            .model
            .linears()
            .iter()
            .all(|(_, l)| l.decorr().is_none_or(|d| d.is_identity())));
    }
}

struct Snapshots(Vec<Vec<Array2<f64>>>);

impl TrainObserver for Snapshots {
    fn on_epoch_end(&mut self, _record: &MetricsRecord, model: &MaeModel) {
        self.0.push(
            model
                .linears()
                .into_iter()
                .filter_map(|(_, l)| l.decorr().map(|d| d.values().clone()))
                .collect(),
        );
    }
}

#[test]
fn decorrelation_freezes_at_stop_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny_config(dir.path());
    c.epochs = 5;
    dbp(&mut c, 1e-2);
    c.decorr.stop_epoch = Some(2);
    let data = prepare_data(&c).unwrap();
    let mut snaps = Snapshots(Vec::new());
    let out = run_training_on(&c, &data, &mut snaps, RunOptions::default()).unwrap();
    let s = &snaps.0;
    assert_eq!(s.len(), 5);
    assert!(s[0].iter().all(|r| r != Array2::eye(r.nrows())));
    assert_ne!(s[0], s[1]);
    for later in &s[2..] {
        assert_eq!(later, &s[1]);
    }
    let lr_r: Vec<f64> = out.records.iter().map(|r| r.lr_r).collect();
    assert_eq!(lr_r, vec![1e-2, 1e-2, 0.0, 0.0, 0.0]);
}

#[test]
fn zero_rate_sweep_cell_matches_bp_run() {
    let dir = tempfile::tempdir().unwrap();
    let base = tiny_config(&dir.path().join("sweep"));
    let data = prepare_data(&base).unwrap();
    let cells = sweep(&base, &[1e-3, 2e-3], &[0.0, 1e-3], SweepOptions { budget: None, jobs: 1 }, &data).unwrap();
    assert_eq!(cells.len(), 4);
    let tags: Vec<(f64, f64)> = cells.iter().map(|c| (c.lr_w, c.lr_r)).collect();
    assert_eq!(tags, vec![(1e-3, 0.0), (1e-3, 1e-3), (2e-3, 0.0), (2e-3, 1e-3)]);
    let table = fs::read_to_string(dir.path().join("sweep/sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 5);

    let mut bp = tiny_config(&dir.path().join("bp"));
    bp.lr = 2e-3;
    let reference = run_training(&bp).unwrap();
    assert_eq!(cells[2].mode(), Mode::Bp);
    assert_eq!(cells[2].result.as_ref().unwrap().records, reference.records);
    assert!(best_cell(&cells, Mode::Dbp).is_some());
}

#[test]
fn single_cell_sweep_equals_training() {
    let dir = tempfile::tempdir().unwrap();
    let mut base = tiny_config(&dir.path().join("sweep"));
    dbp(&mut base, 1e-3);
    let data = prepare_data(&base).unwrap();
    let cells = sweep(&base, &[base.lr], &[1e-3], SweepOptions::default(), &data).unwrap();
    let mut single = base.clone();
    single.output_dir = dir.path().join("single");
    let run = run_training(&single).unwrap();
    assert_eq!(cells[0].result.as_ref().unwrap().records, run.records);
}

#[test]
fn sweep_budget_caps_epochs() {
    let dir = tempfile::tempdir().unwrap();
    let base = tiny_config(dir.path());
    let data = prepare_data(&base).unwrap();
    let cells = sweep(&base, &[1e-3], &[0.0], SweepOptions { budget: Some(2), jobs: 1 }, &data).unwrap();
    assert_eq!(cells[0].result.as_ref().unwrap().records.len(), 2);
}

#[test]
fn zero_rate_comparison_has_no_difference() {
    let dir = tempfile::tempdir().unwrap();
    let mut base = tiny_config(dir.path());
    base.epochs = 2;
    base.decorr.eta = 0.0;
    let data = prepare_data(&base).unwrap();
    let summary = run_paired_comparison(&base, &[0, 1], &data, &CompareOptions::default()).unwrap();
    assert_eq!(summary.t_test.p_value, 1.0);
    for s in &summary.per_seed {
        assert_eq!(s.bp_epochs, s.dbp_epochs);
        assert_eq!(s.bp_seconds, s.dbp_seconds);
    }
    for (b, d) in summary.bp_runs.iter().zip(&summary.dbp_runs) {
        assert_eq!(b.records, d.records);
    }
    assert!(dir.path().join("summary.txt").exists());
    assert!(dir.path().join("summary_epochs.csv").exists());
}

#[test]
fn comparison_needs_two_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let base = tiny_config(dir.path());
    let data = prepare_data(&base).unwrap();
    let err = run_paired_comparison(&base, &[3], &data, &CompareOptions::default()).unwrap_err();
    assert!(matches!(err, DbpError::Config(_)));
}

#[test]
fn divergence_is_recorded_with_its_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny_config(dir.path());
    dbp(&mut c, 1e4);
    c.decorr.subsample_fraction = 1.0;
    let err = run_training(&c).unwrap_err();
    assert!(matches!(err.root(), DbpError::NumericalDivergence { epoch: 1, .. }), "{err}");
    let text = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    assert!(text.contains("# diverged in epoch 1"), "{text}");
    assert!(read_metrics(dir.path().join(METRICS_FILE)).unwrap().is_empty());
}

#[test]
fn best_checkpoint_tracks_lowest_validation_loss() {
    let dir = tempfile::tempdir().unwrap();
    let c = tiny_config(dir.path());
    let out = run_training(&c).unwrap();
    let best = out
        .records
        .iter()
        .min_by(|a, b| a.val_loss.total_cmp(&b.val_loss))
        .unwrap()
        .epoch;
    assert_eq!(out.best_epoch, Some(best));
    assert_eq!(load_checkpoint(dir.path().join(BEST_CHECKPOINT)).unwrap().epoch, best);
}

#[test]
fn fused_checkpoint_keeps_validation_loss() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny_config(dir.path());
    dbp(&mut c, 1e-2);
    let data = prepare_data(&c).unwrap();
    let out = run_training_on(&c, &data, &mut NoObserver, RunOptions::default()).unwrap();
    let fused_path = dir.path().join("fused.ckpt");
    save_checkpoint(&fused_path, &c, 3, &out.model, None, true).unwrap();
    let fused = load_checkpoint(&fused_path).unwrap();
    assert!(fused.is_fused());

    let (train_idx, val_idx) = data.split_tail(c.val_fraction).unwrap();
    let (mean, std) = data.channel_stats(&train_idx);
    let norm = Normalization { mean, std };
    let plans: Vec<MaskPlan> = (0..val_idx.len() as u64)
        .map(|i| MaskPlan::generate(c.mae.num_patches(), c.mae.mask_ratio, i).unwrap())
        .collect();
    let mut unfused = out.model.clone();
    let mut fused_model = fused.model;
    let (a, _) = evaluate(&mut unfused, &c, &data, &val_idx, &plans, &norm, &mut NoObserver, 0).unwrap();
    let (b, _) = evaluate(&mut fused_model, &c, &data, &val_idx, &plans, &norm, &mut NoObserver, 0).unwrap();
    assert!((a - b).abs() <= 1e-5 * a.abs(), "{a} vs {b}");
}
