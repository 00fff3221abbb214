use std::path::Path;

use fvlab::fixture::{write_micro_run, FixtureSpec, MICRO_TASKS};
use fvlab::pipeline::{
    compare_runs, run, RunLedger, RunManifest, Stage, StageStatus, REPORT_FILES,
};
use fvlab::table::read_csv;
use fvlab::Error;

fn micro(dir: &Path) -> RunManifest {
    write_micro_run(dir, &FixtureSpec::default()).unwrap()
}

fn report_bytes(m: &RunManifest) -> Vec<(String, Vec<u8>)> {
    REPORT_FILES
        .iter()
        .map(|f| (f.to_string(), std::fs::read(m.report_dir().join(f)).unwrap()))
        .collect()
}

#[test]
fn full_run_writes_every_report_with_a_schema() {
    let dir = tempfile::tempdir().unwrap();
    let m = micro(dir.path());
    let ledger = run(&m).unwrap();
    for s in Stage::ALL {
        assert_eq!(ledger.stages[&s].status, StageStatus::Done, "{s}");
    }
    for f in REPORT_FILES {
        let path = m.report_dir().join(f);
        if f.ends_with(".csv") {
            let (header, _) = read_csv(&path).unwrap();
            assert!(!header.is_empty(), "{f}");
        } else {
            let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
            assert_eq!(v["schema"], 1, "{f}");
        }
    }
    let saved = RunLedger::load(&m.ledger_path()).unwrap();
    assert_eq!(saved, ledger);
}

#[test]
fn coverage_and_quadrants() {
    let dir = tempfile::tempdir().unwrap();
    let m = micro(dir.path());
    let ledger = run(&m).unwrap();
    let layers = FixtureSpec::default().n_layers as u64;
    let want = MICRO_TASKS.len() as u64 * 8 * layers * m.grid.alphas.len() as u64;
    assert_eq!(ledger.coarse_configs, want);
    assert!(ledger.evaluated_configs >= want);

    let (header, rows) = read_csv(&m.report_dir().join("quadrant.csv")).unwrap();
    let qi = header.iter().position(|h| h == "quadrant").unwrap();
    assert_eq!(rows.len(), MICRO_TASKS.len());
    for r in &rows {
        assert!(["both", "readable_only", "steerable_only", "neither"].contains(&r[qi].as_str()));
    }

    let (_, iid) = read_csv(&m.report_dir().join("iid_table.csv")).unwrap();
    assert_eq!(iid.len(), MICRO_TASKS.len() * 8);
    let (_, transfer) = read_csv(&m.report_dir().join("transfer_table.csv")).unwrap();
    assert_eq!(transfer.len(), MICRO_TASKS.len() * 56);
}

#[test]
fn second_run_is_fully_cached() {
    let dir = tempfile::tempdir().unwrap();
    let m = micro(dir.path());
    let first = run(&m).unwrap();
    let before = report_bytes(&m);
    let second = run(&m).unwrap();
    assert!(second.recomputed().is_empty(), "{:?}", second.recomputed());
    for s in Stage::ALL {
        assert_eq!(first.stages[&s].outputs, second.stages[&s].outputs, "{s}");
        assert_eq!(first.stages[&s].input_hash, second.stages[&s].input_hash, "{s}");
    }
    assert_eq!(report_bytes(&m), before);
}

#[test]
fn tampered_artifact_reruns_only_its_stage() {
    let dir = tempfile::tempdir().unwrap();
    let m = micro(dir.path());
    let first = run(&m).unwrap();
    let gate_out = &first.stages[&Stage::Gate].outputs[0].path;
    let text = std::fs::read_to_string(gate_out).unwrap();
    std::fs::write(gate_out, format!("{text}\n")).unwrap();
    let second = run(&m).unwrap();
    assert_eq!(second.recomputed(), vec![Stage::Gate]);
}

#[test]
fn seed_change_invalidates_the_cache() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = micro(dir.path());
    let first = run(&m).unwrap();
    m.seed = 1;
    let second = run(&m).unwrap();
    assert_ne!(first.cache_key, second.cache_key);
    assert_eq!(second.recomputed().len(), Stage::ALL.len());
}

#[test]
fn missing_upstream_is_a_dependency_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = micro(dir.path());
    m.stages = vec![Stage::Stats];
    let err = run(&m).unwrap_err();
    assert!(matches!(err, Error::Dependency(_)), "{err}");
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn cached_upstream_satisfies_a_later_subset() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = micro(dir.path());
    m.stages = vec![Stage::Baseline, Stage::Extract, Stage::Steer, Stage::Gate];
    run(&m).unwrap();
    m.stages = vec![Stage::Transfer];
    let l = run(&m).unwrap();
    assert_eq!(l.recomputed(), vec![Stage::Transfer]);
    assert_eq!(l.stages[&Stage::Steer].status, StageStatus::Done);
}

#[test]
fn failure_blocks_downstream_and_still_writes_the_ledger() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = micro(dir.path());
    m.n_prompts = 10_000;
    let err = run(&m).unwrap_err();
    assert!(matches!(err, Error::Stage { .. }), "{err}");
    assert_eq!(err.exit_code(), 4);
    let l = RunLedger::load(&m.ledger_path()).unwrap();
    assert_eq!(l.stages[&Stage::Baseline].status, StageStatus::Done);
    assert_eq!(l.stages[&Stage::Extract].status, StageStatus::Failed);
    assert!(l.stages[&Stage::Extract].error.is_some());
    for s in [Stage::Steer, Stage::Gate, Stage::Transfer, Stage::Stats, Stage::Report] {
        assert_eq!(l.stages[&s].status, StageStatus::Blocked, "{s}");
    }
}

#[test]
fn thread_count_does_not_change_reports() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = micro(a.path());
    let mut mb = micro(b.path());
    mb.threads = 4;
    run(&ma).unwrap();
    run(&mb).unwrap();
    assert_eq!(report_bytes(&ma), report_bytes(&mb));
}

#[test]
fn comparing_a_run_with_itself_gives_zero_deltas() {
    let dir = tempfile::tempdir().unwrap();
    let m = micro(dir.path());
    let l = run(&m).unwrap();
    let d = compare_runs(&l, &l).unwrap();
    assert_eq!(d.per_task.len(), MICRO_TASKS.len());
    assert!(d.per_task.iter().all(|t| t.delta == 0.0));
    assert_eq!(d.mean_delta, 0.0);
}

#[test]
fn invalid_manifests_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let base = micro(dir.path());
    let mut m = base.clone();
    m.thresholds.tau = -0.1;
    assert!(matches!(run(&m), Err(Error::Parameter(_))));
    let mut m = base.clone();
    m.stages = vec![Stage::Gate, Stage::Steer];
    assert!(matches!(run(&m), Err(Error::Parameter(_))));
    let mut m = base.clone();
    m.tasks = Some(vec!["no_such_task".into()]);
    assert!(matches!(run(&m), Err(Error::Parameter(_))));
    let mut m = base;
    m.n_queries = 0;
    assert!(matches!(run(&m), Err(Error::Parameter(_))));
}

#[test]
fn manifest_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let m = micro(dir.path());
    let back = RunManifest::load(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(back, m);
}
