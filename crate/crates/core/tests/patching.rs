mod common;

use common::{one_hot_model, t, toy_task, unit};
use fvlab::battery::{EvalMode, ExamplePair};
use fvlab::model::{InterventionPlan, PositionMode};
use fvlab::patching::{layer_sweep_patch, run_patch, self_patch_sweep, PatchConfig};

// Dimension 0 votes for "A" (correct), dimension 1 for "B" (wrong).
fn setup() -> (fvlab::model::ModelHandle, fvlab::battery::TaskSpec) {
    let model = one_hot_model(4, 8, &["A", "B"]);
    let examples = (0..6).map(|i| ExamplePair::new(&format!("w{i}"), "A")).collect();
    (model, toy_task("pt", examples, 2, EvalMode::CaseSensitive))
}

#[test]
fn patch_above_steering_layer_recovers_clean() {
    let (model, task) = setup();
    let clean = InterventionPlan::new(1, unit(8, 0, 5.0), 1.0);
    let corrupted = InterventionPlan::new(1, unit(8, 1, 5.0), 1.0);
    let sweep = layer_sweep_patch(&model, &task, t(1), t(2), &clean, &corrupted, &task.examples, PositionMode::AllPositions, true).unwrap();
    assert_eq!(sweep.results.len(), 4);
    assert_eq!(sweep.results[0].clean_acc, 1.0);
    assert_eq!(sweep.results[0].corrupted_acc, 0.0);
    // Below the steering layer the corrupted intervention still lands afterwards.
    assert_eq!(sweep.results[0].recovery, 0.0);
    for r in &sweep.results[1..] {
        assert_eq!(r.recovery, r.clean_acc);
        assert_eq!(r.normalized, Some(1.0));
    }
}

#[test]
fn signal_only_at_top_layer() {
    let (model, task) = setup();
    let clean = InterventionPlan::new(3, unit(8, 0, 5.0), 1.0);
    let corrupted = InterventionPlan::new(0, unit(8, 1, 5.0), 1.0);
    let sweep = layer_sweep_patch(&model, &task, t(1), t(2), &clean, &corrupted, &task.examples, PositionMode::AllPositions, true).unwrap();
    let rec: Vec<f64> = sweep.results.iter().map(|r| r.recovery).collect();
    assert_eq!(rec, vec![0.0, 0.0, 0.0, 1.0]);
    assert_eq!(sweep.best_layer, Some(3));
    assert_eq!(sweep.max_recovery, 1.0);
}

#[test]
fn null_fixture_has_zero_max_recovery() {
    let (model, task) = setup();
    let wrong = InterventionPlan::new(0, unit(8, 1, 5.0), 1.0);
    let sweep = layer_sweep_patch(&model, &task, t(1), t(2), &wrong, &wrong, &task.examples, PositionMode::AllPositions, true).unwrap();
    assert_eq!(sweep.max_recovery, 0.0);
    assert_eq!(sweep.best_layer, Some(0));
}

#[test]
fn skipped_plus_analyzed_is_total() {
    let (model, task) = setup();
    let p = InterventionPlan::new(1, unit(8, 0, 5.0), 1.0);
    let mut results = Vec::new();
    for (i, gated) in [true, false, true].into_iter().enumerate() {
        let cfg = PatchConfig {
            task: task.name.clone(),
            clean: t(1),
            corrupted: t(2 + i as u8),
            layer: 2,
            positions: PositionMode::AllPositions,
        };
        results.push(run_patch(&model, &task, &cfg, &p, &p, &task.examples, gated).unwrap());
    }
    let skipped = results.iter().filter(|r| r.skipped).count();
    let analyzed = results.iter().filter(|r| !r.skipped).count();
    assert_eq!((skipped, analyzed), (1, 2));
    assert_eq!(skipped + analyzed, results.len());
}

#[test]
fn final_position_patch_mode() {
    let (model, task) = setup();
    let clean = InterventionPlan::new(1, unit(8, 0, 5.0), 1.0);
    let corrupted = InterventionPlan::new(1, unit(8, 1, 5.0), 1.0);
    // Identity blocks: logits depend only on the final position, so a
    // final-position patch above the steering layer is enough.
    let sweep = layer_sweep_patch(&model, &task, t(1), t(2), &clean, &corrupted, &task.examples, PositionMode::FinalPositionOnly, true).unwrap();
    assert_eq!(sweep.results[3].recovery, 1.0);
}

#[test]
fn self_patch_recovers_clean_accuracy_everywhere() {
    let (model, task) = setup();
    for plan in [InterventionPlan::new(1, unit(8, 0, 5.0), 1.0), InterventionPlan::new(2, unit(8, 1, 5.0), 1.0)] {
        let sweep = self_patch_sweep(&model, &task, t(3), &plan, &task.examples, PositionMode::AllPositions).unwrap();
        assert_eq!(sweep.results.len(), 4);
        for r in &sweep.results {
            assert_eq!(r.recovery, r.clean_acc);
            assert_eq!(r.clean_acc, r.corrupted_acc);
            assert_eq!(r.normalized, None);
        }
    }
    let same = InterventionPlan::new(1, unit(8, 0, 5.0), 1.0);
    assert!(layer_sweep_patch(&model, &task, t(3), t(3), &same, &same, &task.examples, PositionMode::AllPositions, true).is_err());
}
