use std::path::Path;

use boxadapt_core::data::{generate_dataset, Dataset, DatasetLayout, DomainSpec, Manifest};
use boxadapt_core::eval::{run_budget, score};
use boxadapt_core::segnet::{Head, NetConfig, SegModel};
use boxadapt_core::train::{
    run_baseline, train_stage1, train_stage2, BaselineKind, Splits, TrainConfig,
};
use boxadapt_core::Grid;

fn small_manifest(dir: &Path, annotated: usize) -> Manifest {
    let layout = DatasetLayout {
        source_patients: 3,
        target_patients: 4,
        eval_patients: 1,
        slices_per_patient: 3,
        annotated_per_patient: annotated,
        ..DatasetLayout::default()
    };
    generate_dataset(
        &DomainSpec::source_default(),
        &DomainSpec::target_default(),
        &layout,
        8,
        dir,
    )
    .unwrap()
}

fn small_config(iters: u64) -> TrainConfig {
    TrainConfig {
        iters_stage1: iters,
        iters_stage2: iters,
        batch: 2,
        net: NetConfig {
            base_channels: 4,
            ..NetConfig::default()
        },
        seed: 21,
        ..TrainConfig::default()
    }
}

fn stage1(ds: &Dataset, cfg: &TrainConfig) -> SegModel<f32> {
    let mut model = SegModel::build(cfg.net.clone(), cfg.seed).unwrap();
    train_stage1(&mut model, &ds.source, &ds.target_weak, cfg).unwrap();
    model
}

#[test]
fn same_seed_same_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let ds = Dataset::load(&small_manifest(dir.path(), 1)).unwrap();
    let cfg = small_config(8);
    let a = stage1(&ds, &cfg);
    let b = stage1(&ds, &cfg);
    assert_eq!(a.checksum_all(), b.checksum_all());
    let c = stage1(&ds, &TrainConfig { seed: 22, ..cfg });
    assert_ne!(a.checksum_all(), c.checksum_all());
}

#[test]
fn first_stage_loss_decreases() {
    let dir = tempfile::tempdir().unwrap();
    let ds = Dataset::load(&small_manifest(dir.path(), 1)).unwrap();
    let cfg = small_config(150);
    let mut model = SegModel::<f32>::build(cfg.net.clone(), cfg.seed).unwrap();
    let log = train_stage1(&mut model, &ds.source, &ds.target_weak, &cfg).unwrap();
    let n = log.rows().len();
    assert_eq!(n, 150);
    assert!(log.mean_loss(n - n / 10, n) < log.mean_loss(0, n / 10));
    assert!(log
        .rows()
        .iter()
        .all(|r| r.loss_pu.is_some() && r.stage == 1));
}

#[test]
fn second_stage_never_touches_source_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let ds = Dataset::load(&small_manifest(dir.path(), 1)).unwrap();
    let cfg = small_config(6);
    let mut model = stage1(&ds, &cfg);
    let source = model.params_of(Head::Source);
    let before = model.checksum(&source);
    let log = train_stage2(&mut model, &ds.target_unlabeled, &ds.target_weak, &cfg).unwrap();
    assert_eq!(model.checksum(&source), before);
    assert_eq!(model.params_of(Head::Source), source);
    assert!(log
        .rows()
        .iter()
        .all(|r| r.loss_self_da.is_some() && r.loss_self_box.is_some()));
    assert!(train_stage2(&mut model, &ds.target_unlabeled, &ds.target_weak, &cfg).is_err());
}

#[test]
fn without_boxes_the_second_stage_is_pure_self_training() {
    let dir = tempfile::tempdir().unwrap();
    let ds = Dataset::load(&small_manifest(dir.path(), 1)).unwrap();
    let cfg = small_config(5);
    let mut model = stage1(&ds, &cfg);
    let log = train_stage2(&mut model, &ds.target_unlabeled, &[], &cfg).unwrap();
    for row in log.rows() {
        assert_eq!(row.loss_self_box, None);
        assert_eq!(Some(row.loss_total), row.loss_self_da);
    }
}

#[test]
fn source_only_never_reads_target_images() {
    let dir = tempfile::tempdir().unwrap();
    let ds = Dataset::load(&small_manifest(dir.path(), 1)).unwrap();
    let cfg = small_config(5);
    let poison = |samples: &[boxadapt_core::data::Sample]| {
        samples
            .iter()
            .map(|s| boxadapt_core::data::Sample {
                image: Grid::full(&[1, 1], f32::NAN),
                ..s.clone()
            })
            .collect::<Vec<_>>()
    };
    let (unlabeled, weak) = (poison(&ds.target_unlabeled), poison(&ds.target_weak));
    let poisoned = Splits {
        source: &ds.source,
        target_unlabeled: &unlabeled,
        target_weak: &weak,
    };
    let clean = Splits {
        source: &ds.source,
        target_unlabeled: &ds.target_unlabeled,
        target_weak: &ds.target_weak,
    };
    let (a, log_a) = run_baseline(BaselineKind::SourceOnly, poisoned, &cfg).unwrap();
    let (b, log_b) = run_baseline(BaselineKind::SourceOnly, clean, &cfg).unwrap();
    assert_eq!(a.checksum_all(), b.checksum_all());
    assert!(log_a.rows().iter().all(|r| r.loss_pu.is_none()));
    assert_eq!(
        log_a.to_csv().unwrap().lines().next(),
        log_b.to_csv().unwrap().lines().next()
    );
}

#[test]
fn zero_budget_first_stage_is_the_source_only_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let ds = Dataset::load(&small_manifest(dir.path(), 0)).unwrap();
    assert!(ds.target_weak.is_empty());
    let cfg = small_config(6);
    let (stage1, stage2, scores) = run_budget(&ds, &cfg).unwrap();
    let (baseline, _) = run_baseline(
        BaselineKind::SourceOnly,
        Splits {
            source: &ds.source,
            target_unlabeled: &ds.target_unlabeled,
            target_weak: &[],
        },
        &cfg,
    )
    .unwrap();
    assert_eq!(stage1.checksum_all(), baseline.checksum_all());
    assert_ne!(stage2.checksum_all(), baseline.checksum_all());
    assert!((0.0..=1.0).contains(&scores.stage1) && (0.0..=1.0).contains(&scores.stage2));
}

#[test]
fn self_train_baseline_uses_only_the_self_training_loss() {
    let dir = tempfile::tempdir().unwrap();
    let ds = Dataset::load(&small_manifest(dir.path(), 1)).unwrap();
    let cfg = small_config(4);
    let splits = Splits {
        source: &ds.source,
        target_unlabeled: &ds.target_unlabeled,
        target_weak: &ds.target_weak,
    };
    let (_, log) = run_baseline(BaselineKind::SelfTrainNoBox, splits, &cfg).unwrap();
    let second: Vec<_> = log.rows().iter().filter(|r| r.stage == 2).collect();
    assert_eq!(second.len(), 4);
    assert!(second
        .iter()
        .all(|r| r.loss_self_box.is_none() && r.loss_self_da == Some(r.loss_total)));
}

#[test]
fn ground_truth_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let ds = Dataset::load(&small_manifest(dir.path(), 1)).unwrap();
    let truth: Vec<Grid<f32>> = ds.eval.iter().map(|s| s.mask.clone().unwrap()).collect();
    let (mean, accuracy, per_sample) = score(&truth, &ds.eval).unwrap();
    assert_eq!(mean, 1.0);
    assert_eq!(accuracy, 1.0);
    assert_eq!(per_sample.len(), ds.eval.len());
}
