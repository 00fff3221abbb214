mod common;

use std::collections::BTreeMap;

use common::{one_hot_model, t, toy_task, unit};
use fvlab::battery::{EvalMode, ExamplePair, TaskSplit, TemplateId, TemplateStyle};
use fvlab::fv::{steer_eval, sweep, FunctionVector, FvStore, SweepGrid};
use fvlab::stats::{bonferroni, hierarchical_regression, pc1_fraction, pearson, permutation_test, welch, RegressionRow};
use fvlab::transfer::{
    cosine_correlations, dissociation_permutation, dissociation_rate, dissociation_scan, is_dissociation,
    norm_correlation, ood_matrix, style_compare, utv_pca, OodChoice, TransferPair,
};
use fvlab::Error;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;
use statrs::distribution::{ContinuousCDF, StudentsT};

fn t_two_sided(t: f64, df: f64) -> f64 {
    2.0 * (1.0 - StudentsT::new(0.0, 1.0, df).unwrap().cdf(t.abs()))
}

fn textbook_pearson(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|a| a * a).sum();
    let r = (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt());
    let tstat = r * ((n - 2.0) / (1.0 - r * r)).sqrt();
    (r, t_two_sided(tstat, n - 2.0))
}

fn spread(n: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-10.0f64..10.0, n)
}

proptest! {
    #[test]
    fn pearson_matches_textbook(x in spread(12), y in spread(12)) {
        let c = pearson(&x, &y).unwrap();
        let (r, p) = textbook_pearson(&x, &y);
        prop_assert!((c.r - r).abs() < 1e-9);
        prop_assert!((c.p - p).abs() < 1e-7, "p {} vs {}", c.p, p);
    }

    #[test]
    fn welch_matches_textbook(a in spread(7), b in spread(11)) {
        let w = welch(&a, &b).unwrap();
        let m = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let s2 = |v: &[f64]| { let mu = m(v); v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (v.len() - 1) as f64 };
        let (qa, qb) = (s2(&a) / 7.0, s2(&b) / 11.0);
        let tt = (m(&a) - m(&b)) / (qa + qb).sqrt();
        let df = (qa + qb).powi(2) / (qa * qa / 6.0 + qb * qb / 10.0);
        prop_assert!((w.t - tt).abs() < 1e-9);
        prop_assert!((w.df.unwrap() - df).abs() < 1e-7);
        prop_assert!((w.p - t_two_sided(tt, df)).abs() < 1e-7);
    }

    #[test]
    fn regression_matches_normal_equations(
        acc in spread(24),
        cos in spread(24),
    ) {
        let names = ["a", "b", "c"];
        let rows: Vec<RegressionRow> = (0..24)
            .map(|i| RegressionRow { task: names[i % 3], cosine: cos[i], accuracy: acc[i] })
            .collect();
        let rep = hierarchical_regression(&rows).unwrap();
        let r2 = |with_cos: bool| {
            let p = if with_cos { 4 } else { 3 };
            let x = DMatrix::from_fn(24, p, |i, j| match j {
                0 => 1.0,
                1 => (i % 3 == 1) as u8 as f64,
                2 => (i % 3 == 2) as u8 as f64,
                _ => cos[i],
            });
            let y = DVector::from_column_slice(&acc);
            let beta = (x.transpose() * &x).try_inverse().unwrap() * x.transpose() * &y;
            let resid = &y - &x * &beta;
            let mean = y.mean();
            let tss: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
            (1.0 - resid.norm_squared() / tss, beta)
        };
        let (r2a, _) = r2(false);
        let (r2b, beta) = r2(true);
        prop_assert!((rep.r2_task - r2a).abs() < 1e-8);
        prop_assert!((rep.r2_task_plus_cos - r2b).abs() < 1e-8);
        prop_assert!(rep.delta_r2 >= -1e-12);
        prop_assert!((rep.cos_coef.unwrap() - beta[3]).abs() < 1e-6);
    }

    #[test]
    fn pc1_matches_covariance_eigen(v in proptest::collection::vec(proptest::collection::vec(-3.0f32..3.0, 6), 8)) {
        let rep = pc1_fraction(&v).unwrap();
        let k = v.len();
        let m = DMatrix::from_fn(k, 6, |i, j| v[i][j] as f64);
        let mean = m.row_mean();
        let c = DMatrix::from_fn(k, 6, |i, j| m[(i, j)] - mean[j]);
        let cov = c.transpose() * &c / (k as f64 - 1.0);
        let eig = SymmetricEigen::new(cov.clone()).eigenvalues;
        let top = eig.iter().cloned().fold(f64::MIN, f64::max);
        prop_assert!((rep.pc1_fraction - top / cov.trace()).abs() < 1e-9);
    }
}

fn heap_permutations(v: &mut Vec<f64>, k: usize, out: &mut Vec<Vec<f64>>) {
    if k == 1 {
        out.push(v.clone());
        return;
    }
    for i in 0..k {
        heap_permutations(v, k - 1, out);
        if k.is_multiple_of(2) {
            v.swap(i, k - 1);
        } else {
            v.swap(0, k - 1);
        }
    }
}

#[test]
fn exhaustive_permutation_p_value() {
    let xs = [0.1, 0.5, 0.2, 0.9, 0.4, 0.7];
    let ys = [1.0, 3.0, 2.0, 6.0, 4.0, 5.0];
    let stat = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
    let observed = stat(&xs, &ys);
    let mut all = Vec::new();
    heap_permutations(&mut ys.to_vec(), 6, &mut all);
    assert_eq!(all.len(), 720);
    let ge = all
        .iter()
        .filter(|p| p.as_slice() != ys)
        .filter(|p| stat(&xs, p) >= observed)
        .count();
    let want = (1 + ge) as f64 / 720.0;
    let got = permutation_test(&xs, &ys, &[0; 6], 1000, 0, stat).unwrap();
    assert!(got.exact);
    assert_eq!(got.n_null, 719);
    assert!((got.p - want).abs() < 1e-15);
}

#[test]
fn sampled_permutation_is_seeded() {
    let xs: Vec<f64> = (0..30).map(|i| (i as f64).sin()).collect();
    let ys: Vec<f64> = (0..30).map(|i| (i as f64 * 0.7).cos()).collect();
    let stat = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
    let a = permutation_test(&xs, &ys, &[0; 30], 200, 7, stat).unwrap();
    let b = permutation_test(&xs, &ys, &[0; 30], 200, 7, stat).unwrap();
    assert_eq!(a, b);
    assert!(!a.exact);
    assert_eq!(a.n_null, 200);
    assert!(a.p >= 1.0 / 201.0 && a.p <= 1.0);
}

#[test]
fn within_group_shuffles_keep_groups() {
    // Each group is constant in y, so every within-group shuffle is the identity.
    let xs = [1.0, 2.0, 3.0, 4.0];
    let ys = [5.0, 5.0, 9.0, 9.0];
    let stat = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
    let r = permutation_test(&xs, &ys, &[0, 0, 1, 1], 100, 0, stat).unwrap();
    assert!(r.exact);
    assert_eq!(r.n_null, 3);
    assert_eq!(r.p, 1.0);
}

fn pair(task: &str, s: u8, d: u8, cos: f64, acc: f64, norm: f64) -> TransferPair {
    TransferPair {
        task: task.into(),
        source: t(s),
        target: t(d),
        layer: 0,
        alpha: 1.0,
        cosine: cos,
        ood_accuracy: acc,
        source_iid: 0.5,
        source_norm: norm,
        n_queries: 10,
    }
}

fn all_pairs(task: &str, f: impl Fn(u8, u8) -> (f64, f64)) -> Vec<TransferPair> {
    let mut out = Vec::new();
    for s in 1..=8 {
        for d in 1..=8 {
            if s != d {
                let (c, a) = f(s, d);
                out.push(pair(task, s, d, c, a, s as f64));
            }
        }
    }
    out
}

#[test]
fn dissociation_boundaries() {
    assert!(is_dissociation(0.81, 0.39));
    assert!(!is_dissociation(0.80, 0.10));
    assert!(!is_dissociation(0.95, 0.40));
    assert_eq!(dissociation_rate(&[0.9, 0.9, 0.1, 0.85], &[0.1, 0.5, 0.1, 0.0]), 0.5);
    assert_eq!(dissociation_rate(&[], &[]), 0.0);
    assert!((bonferroni(0.05, 12) - 0.05 / 12.0).abs() < 1e-15);
}

#[test]
fn scan_counts_and_viability() {
    let mut pairs = all_pairs("a", |s, _| (0.9, if s <= 2 { 0.1 } else { 0.8 }));
    for p in &mut pairs {
        p.source_iid = if p.source == t(1) { 0.05 } else { 0.6 };
    }
    let (records, summaries) = dissociation_scan(&pairs, 0.1);
    assert_eq!(records.len(), 56);
    assert_eq!(records.iter().filter(|r| r.is_dissociation).count(), 14);
    assert_eq!(records.iter().filter(|r| r.is_dissociation && r.iid_viable).count(), 7);
    let pooled = summaries.iter().find(|s| s.scope == "pooled").unwrap();
    assert_eq!((pooled.n_pairs, pooled.n_dissociations), (56, 14));
    assert!((pooled.rate - 0.25).abs() < 1e-12);
}

#[test]
fn style_partition_sizes() {
    let pairs = all_pairs("a", |s, d| {
        let same = TemplateStyle::for_id(t(s)) == TemplateStyle::for_id(t(d));
        (0.5, if same { 0.9 } else { 0.1 + 0.01 * s as f64 })
    });
    let w = style_compare(&pairs).unwrap();
    assert_eq!((w.n_a, w.n_b), (8, 48));
    assert!((w.mean_a - 0.9).abs() < 1e-12);
    assert!(w.t > 0.0 && w.p < 1e-6);
}

#[test]
fn correlations_pooled_and_per_task() {
    let mut pairs = all_pairs("a", |s, d| (s as f64 * 0.1, (s + d) as f64 * 0.01));
    pairs.extend(all_pairs("b", |_, _| (0.3, 0.3)));
    let reps = cosine_correlations(&pairs).unwrap();
    assert_eq!(reps.len(), 3);
    assert_eq!(reps[0].scope, "pooled");
    assert!(reps[0].result.is_some());
    assert_eq!(reps[0].note.as_deref(), Some(fvlab::transfer::POOLED_P_NOTE));
    let b = reps.iter().find(|r| r.scope == "b").unwrap();
    assert!(b.result.is_none() && b.note.is_some());

    let n = norm_correlation(&pairs[..56]).unwrap();
    let xs: Vec<f64> = pairs[..56].iter().map(|p| p.source_norm).collect();
    let ys: Vec<f64> = pairs[..56].iter().map(|p| p.ood_accuracy).collect();
    assert!((n.r - textbook_pearson(&xs, &ys).0).abs() < 1e-12);
    assert!(matches!(norm_correlation(&pairs[56..]), Err(Error::Degenerate(_))));
}

#[test]
fn permutation_on_pairs_is_deterministic() {
    let mut pairs = all_pairs("a", |s, d| (((s * d) % 7) as f64 / 7.0, ((s + 2 * d) % 5) as f64 / 5.0));
    pairs.extend(all_pairs("b", |s, d| (((s + d) % 3) as f64 / 2.0, (s % 4) as f64 / 4.0)));
    let a = dissociation_permutation(&pairs, 300, 1).unwrap();
    let b = dissociation_permutation(&pairs, 300, 1).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.observed, dissociation_rate(
        &pairs.iter().map(|p| p.cosine).collect::<Vec<_>>(),
        &pairs.iter().map(|p| p.ood_accuracy).collect::<Vec<_>>(),
    ));
}

/// Dim 0 votes "A" (gold). Template `n` gets the FV `n * e_0` at every layer.
fn ood_setup(same_direction: bool) -> (fvlab::model::ModelHandle, fvlab::battery::TaskSpec, FvStore) {
    let m = one_hot_model(2, 8, &["A", "B"]);
    let ex = (0..10).map(|i| ExamplePair::new(&format!("w{i}"), "A")).collect();
    let task = toy_task("oo", ex, 2, EvalMode::CaseSensitive);
    let mut store = FvStore::new(8);
    for id in TemplateId::all() {
        for l in 0..2 {
            let v = if same_direction || id.number() % 2 == 0 {
                unit(8, 0, id.number() as f32)
            } else {
                unit(8, 1, 1.0)
            };
            store.insert(FunctionVector::new("oo", id, l, v, 1, 1, 0)).unwrap();
        }
    }
    (m, task, store)
}

#[test]
fn ood_cells_equal_direct_steering() {
    let (m, task, store) = ood_setup(false);
    let grid = SweepGrid {
        layers: Some(vec![0, 1]),
        ..SweepGrid::default()
    };
    let queries = TaskSplit::of(&task).eval_queries(4).to_vec();
    let mut best = BTreeMap::new();
    for id in TemplateId::all() {
        let res = sweep(&m, &task, id, &store.layers_of("oo", id), &grid, &queries).unwrap();
        best.insert(id, res.best);
    }
    let q = queries.clone();
    let pairs = ood_matrix(&m, &task, &store, &best, &grid, OodChoice::SourceBest, &|_| q.clone()).unwrap();
    assert_eq!(pairs.len(), 56);
    for p in &pairs {
        let b = &best[&p.source];
        assert_eq!((p.layer, p.alpha), (b.layer, b.alpha));
        let fv = store.get("oo", p.source, p.layer).unwrap();
        let direct = steer_eval(&m, fv, &task, p.target, p.layer, p.alpha, grid.positions, &queries).unwrap();
        assert_eq!(p.ood_accuracy, direct.accuracy());
        let want_acc = if p.source.number() % 2 == 0 { 1.0 } else { 0.0 };
        assert_eq!(p.ood_accuracy, want_acc, "{} -> {}", p.source, p.target);
        let same = (p.source.number() % 2 == 0) == (p.target.number() % 2 == 0);
        assert!((p.cosine - if same { 1.0 } else { 0.0 }).abs() < 1e-9);
    }
}

#[test]
fn identical_directions_give_unit_cosine_and_rank_one_utv() {
    let (m, task, store) = ood_setup(true);
    let grid = SweepGrid {
        layers: Some(vec![0, 1]),
        ..SweepGrid::default()
    };
    let queries = TaskSplit::of(&task).eval_queries(3).to_vec();
    let best: BTreeMap<TemplateId, _> = TemplateId::all()
        .map(|id| (id, sweep(&m, &task, id, &store.layers_of("oo", id), &grid, &queries).unwrap().best))
        .collect();
    let q = queries.clone();
    let pairs = ood_matrix(&m, &task, &store, &best, &grid, OodChoice::PairBest, &|_| q.clone()).unwrap();
    assert!(pairs.iter().all(|p| (p.cosine - 1.0).abs() < 1e-12));
    let utv = utv_pca(&store, &task, 0).unwrap();
    assert!(!utv.pca.degenerate);
    assert!((utv.pca.pc1_fraction - 1.0).abs() < 1e-9);
}

#[test]
fn equal_vectors_are_a_degenerate_pca() {
    let v = vec![vec![1.0f32, 2.0, 3.0]; 4];
    let rep = pc1_fraction(&v).unwrap();
    assert!(rep.degenerate);
    assert!(matches!(pc1_fraction(&v[..1]), Err(Error::Parameter(_))));
}
