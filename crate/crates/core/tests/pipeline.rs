use std::path::Path;

use triseg::config::{DatasetSource, RunConfig, StagePlan};
use triseg::trainer::{run_pipeline, LogEvent, StopReason, TrainLog};
use triseg::views::{ModelConfig, ViewId};

fn small_config(root: &Path, name: &str) -> RunConfig {
    RunConfig {
        seed: 11,
        labelled_fraction: 0.2,
        image_size: [32, 32],
        output_root: root.to_path_buf(),
        run_name: name.into(),
        dataset: DatasetSource::Synthetic {
            count: 40,
            noise_sigma: 0.3,
            min_extent: 0.2,
            max_extent: 0.35,
        },
        model: ModelConfig {
            stem_width: 4,
            view_width: 8,
            ..ModelConfig::default()
        },
        plan: StagePlan {
            stage1_epochs: 12,
            stage2_epochs: 2,
            stage2_iterations: 2,
            stage3_epochs_max: 2,
            stage3_tolerance: 0.0,
            learning_rate: 3e-3,
            batch_size: 4,
        },
        ..RunConfig::default()
    }
}

#[test]
fn same_seed_gives_identical_logs_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let a = run_pipeline(&small_config(dir.path(), "a")).unwrap();
    let b = run_pipeline(&small_config(dir.path(), "b")).unwrap();
    for f in ["log.jsonl", "report.json", "report.csv"] {
        assert_eq!(
            std::fs::read(a.run_dir.join(f)).unwrap(),
            std::fs::read(b.run_dir.join(f)).unwrap(),
            "{f} differs"
        );
    }

    let mut other = small_config(dir.path(), "c");
    other.seed = 12;
    let c = run_pipeline(&other).unwrap();
    assert_ne!(
        std::fs::read(a.run_dir.join("log.jsonl")).unwrap(),
        std::fs::read(c.run_dir.join("log.jsonl")).unwrap()
    );
}

#[test]
fn log_invariants_hold() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "run");
    let out = run_pipeline(&cfg).unwrap();
    let events = TrainLog::read(&out.run_dir.join("log.jsonl")).unwrap();
    assert!(events == out.log.events(), "log.jsonl does not read back as the in-memory log");

    let mut saw_stop = false;
    let mut last_stage = 0;
    for e in &events {
        match e {
            LogEvent::Epoch { stage, loss, .. } => {
                assert!(*stage >= last_stage, "stage {stage} after {last_stage}");
                last_stage = *stage;
                assert!(loss.is_finite());
            }
            LogEvent::Confidence { normalized, .. } => {
                assert!((normalized.iter().sum::<f64>() - 1.0).abs() <= 1e-9, "{normalized:?}");
            }
            LogEvent::Stage3Stop {
                target,
                epochs_run,
                reason,
                raw,
                ..
            } => {
                saw_stop = true;
                let others = ViewId::ALL
                    .iter()
                    .filter(|v| *v != target)
                    .map(|v| raw[v.index()])
                    .fold(f64::INFINITY, f64::min);
                match reason {
                    StopReason::Cap => assert_eq!(*epochs_run, cfg.plan.stage3_epochs_max),
                    StopReason::Alpha => assert!(raw[target.index()] >= others - cfg.plan.stage3_tolerance),
                }
            }
            LogEvent::Pool { zeta, active, .. } => {
                assert!((0.0..1.0).contains(zeta));
                assert!(*active > 0);
            }
            _ => {}
        }
    }
    assert!(saw_stop);
    assert_eq!(out.report.aggregate.count, 4);
    assert_eq!(out.report.images.len(), 4);
}

#[test]
fn stage1_loss_decreases() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path(), "warmup");
    cfg.plan.stage2_epochs = 0;
    cfg.plan.stage3_epochs_max = 0;
    let out = run_pipeline(&cfg).unwrap();
    for view in ViewId::ALL {
        let l = out.log.losses(1, view);
        assert_eq!(l.len(), 12);
        let head = (l[0] + l[1]) / 2.0;
        let tail = (l[10] + l[11]) / 2.0;
        assert!(tail < head, "view {view}: {head} -> {tail}");
    }
}

#[test]
fn existing_run_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "taken");
    std::fs::create_dir_all(dir.path().join("taken")).unwrap();
    std::fs::write(dir.path().join("taken/keep.txt"), "x").unwrap();
    assert!(run_pipeline(&cfg).is_err());
    assert_eq!(std::fs::read_to_string(dir.path().join("taken/keep.txt")).unwrap(), "x");
}
