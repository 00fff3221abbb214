//! Statistics kernels: Pearson correlation with a t-test p-value, OLS by
//! Householder QR, Welch's t-test, permutation tests and a Jacobi
//! eigensolver for small PCA problems.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::SeedMix;

// ---------------------------------------------------------------------------
// Special functions

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// ln Γ(x) for x > 0 (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // Reflection.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = LANCZOS[0];
    let t = x + LANCZOS_G + 0.5;
    for (i, &c) in LANCZOS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta I_x(a, b).
pub fn inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Two-sided p-value of a Student t statistic.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    if t.is_nan() || df <= 0.0 {
        return f64::NAN;
    }
    if t.is_infinite() {
        return 0.0;
    }
    inc_beta(df / 2.0, 0.5, df / (df + t * t)).clamp(0.0, 1.0)
}

// ---------------------------------------------------------------------------
// Correlation

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: f64,
    pub p: f64,
    pub n: usize,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Exact test; a centered sum of squares can round to a tiny nonzero value.
fn is_constant(xs: &[f64]) -> bool {
    xs.iter().all(|&x| x == xs[0])
}

/// Pearson r with the two-sided t-test p-value.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<Correlation> {
    let n = xs.len();
    if n != ys.len() {
        return Err(Error::Parameter(format!("pearson: {n} xs vs {} ys", ys.len())));
    }
    if n < 3 {
        return Err(Error::Degenerate(format!("pearson needs n >= 3, got {n}")));
    }
    let (mx, my) = (mean(xs), mean(ys));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if is_constant(xs) || is_constant(ys) || sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("pearson: zero variance".into()));
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    let df = (n - 2) as f64;
    let p = if r.abs() == 1.0 {
        0.0
    } else {
        student_t_two_sided(r * (df / (1.0 - r * r)).sqrt(), df)
    };
    Ok(Correlation { r, p, n })
}

// ---------------------------------------------------------------------------
// Least squares

/// Householder QR of a column-major design, applied to `y` as it goes.
struct Qr {
    n: usize,
    cols: Vec<Vec<f64>>,
    r_diag: Vec<f64>,
    y: Vec<f64>,
    /// `y` after each reflector; `snapshots[k]` follows column `k`.
    snapshots: Vec<Vec<f64>>,
    /// Column at which the design lost rank, if any.
    deficient_at: Option<usize>,
}

impl Qr {
    fn factor(design: &[Vec<f64>], y: &[f64]) -> Self {
        let n = y.len();
        let p = design.len();
        let mut cols: Vec<Vec<f64>> = design.to_vec();
        let mut z = y.to_vec();
        let mut r_diag = vec![0.0; p];
        let mut snapshots = Vec::with_capacity(p);
        let mut deficient_at = None;
        for k in 0..p {
            let col_norm_full = cols[k].iter().map(|v| v * v).sum::<f64>().sqrt();
            let sub_norm = cols[k][k..].iter().map(|v| v * v).sum::<f64>().sqrt();
            if k >= n || sub_norm <= 1e-10 * col_norm_full.max(1e-300) {
                deficient_at = Some(k);
                break;
            }
            let alpha = if cols[k][k] > 0.0 { -sub_norm } else { sub_norm };
            let mut v: Vec<f64> = cols[k][k..].to_vec();
            v[0] -= alpha;
            let vnorm2: f64 = v.iter().map(|x| x * x).sum();
            let reflect = |target: &mut [f64]| {
                let dot: f64 = v.iter().zip(&target[k..]).map(|(a, b)| a * b).sum();
                let s = 2.0 * dot / vnorm2;
                for (t, vi) in target[k..].iter_mut().zip(&v) {
                    *t -= s * vi;
                }
            };
            for col in &mut cols[k..p] {
                reflect(col);
            }
            reflect(&mut z);
            r_diag[k] = cols[k][k];
            snapshots.push(z.clone());
        }
        Self {
            n,
            cols,
            r_diag,
            y: y.to_vec(),
            snapshots,
            deficient_at,
        }
    }

    /// Residual sum of squares using the first `k` columns.
    fn rss(&self, k: usize) -> f64 {
        let z = if k == 0 { &self.y } else { &self.snapshots[k - 1] };
        z[k..].iter().map(|v| v * v).sum()
    }

    fn coefficients(&self, k: usize) -> Vec<f64> {
        let z = &self.snapshots[k - 1];
        let mut beta = vec![0.0; k];
        for i in (0..k).rev() {
            let mut s = z[i];
            for (j, &b) in beta.iter().enumerate().skip(i + 1) {
                s -= self.cols[j][i] * b;
            }
            beta[i] = s / self.r_diag[i];
        }
        beta
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OlsFit {
    pub coef: Vec<f64>,
    pub rss: f64,
    pub r2: f64,
    pub n: usize,
}

fn total_ss(y: &[f64]) -> f64 {
    if is_constant(y) {
        return 0.0;
    }
    let m = mean(y);
    y.iter().map(|v| (v - m) * (v - m)).sum()
}

/// OLS of `y` on the given columns (include an intercept column yourself).
pub fn ols(design: &[Vec<f64>], y: &[f64]) -> Result<OlsFit> {
    let n = y.len();
    if design.iter().any(|c| c.len() != n) {
        return Err(Error::Parameter("design columns must match y length".into()));
    }
    if n <= design.len() {
        return Err(Error::Degenerate(format!("{n} observations for {} predictors", design.len())));
    }
    let tss = total_ss(y);
    if tss == 0.0 {
        return Err(Error::Degenerate("response has zero variance".into()));
    }
    let qr = Qr::factor(design, y);
    if let Some(k) = qr.deficient_at {
        return Err(Error::Degenerate(format!("rank-deficient design at column {k}")));
    }
    let p = design.len();
    let rss = qr.rss(p);
    Ok(OlsFit {
        coef: qr.coefficients(p),
        rss,
        r2: 1.0 - rss / tss,
        n: qr.n,
    })
}

/// Task-dummy model, then the same plus cosine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionReport {
    pub r2_task: f64,
    pub r2_task_plus_cos: f64,
    pub delta_r2: f64,
    /// `None` when cosine lies in the span of the task dummies.
    pub cos_coef: Option<f64>,
    pub cos_degenerate: bool,
    pub n: usize,
    pub n_tasks: usize,
}

/// Observation for the hierarchical regression.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionRow<'a> {
    pub task: &'a str,
    pub cosine: f64,
    pub accuracy: f64,
}

/// Intercept + (tasks - 1) dummies, then + cosine. The second model shares
/// the first model's reflectors, so its R² can never fall below the first's.
pub fn hierarchical_regression(rows: &[RegressionRow<'_>]) -> Result<RegressionReport> {
    let mut tasks: Vec<&str> = rows.iter().map(|r| r.task).collect();
    tasks.sort_unstable();
    tasks.dedup();
    if tasks.is_empty() {
        return Err(Error::Degenerate("no observations".into()));
    }
    let n = rows.len();
    let mut design = vec![vec![1.0; n]];
    for t in &tasks[1..] {
        design.push(rows.iter().map(|r| if r.task == *t { 1.0 } else { 0.0 }).collect());
    }
    let p = design.len();
    if n <= p + 1 {
        return Err(Error::Degenerate(format!("{n} observations for {} predictors", p + 1)));
    }
    design.push(rows.iter().map(|r| r.cosine).collect());
    let y: Vec<f64> = rows.iter().map(|r| r.accuracy).collect();
    let tss = total_ss(&y);
    if tss == 0.0 {
        return Err(Error::Degenerate("accuracy has zero variance".into()));
    }
    let qr = Qr::factor(&design, &y);
    match qr.deficient_at {
        Some(k) if k < p => return Err(Error::Degenerate(format!("rank-deficient task design at column {k}"))),
        _ => {}
    }
    let rss1 = qr.rss(p);
    let r2_task = 1.0 - rss1 / tss;
    let (r2_task_plus_cos, cos_coef) = if qr.deficient_at == Some(p) {
        (r2_task, None)
    } else {
        let gain = qr.snapshots[p][p] * qr.snapshots[p][p];
        (r2_task + gain / tss, qr.coefficients(p + 1).last().copied())
    };
    Ok(RegressionReport {
        r2_task,
        r2_task_plus_cos,
        delta_r2: r2_task_plus_cos - r2_task,
        cos_degenerate: cos_coef.is_none(),
        cos_coef,
        n,
        n_tasks: tasks.len(),
    })
}

// ---------------------------------------------------------------------------
// Welch's t-test

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchReport {
    pub mean_a: f64,
    pub mean_b: f64,
    pub n_a: usize,
    pub n_b: usize,
    pub t: f64,
    /// Welch-Satterthwaite degrees of freedom; undefined when both groups
    /// are constant.
    pub df: Option<f64>,
    pub p: f64,
}

fn sample_var(xs: &[f64]) -> f64 {
    if xs.len() < 2 || is_constant(xs) {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Unequal-variance two-sample t-test, two-sided.
pub fn welch(a: &[f64], b: &[f64]) -> Result<WelchReport> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Parameter("welch: empty group".into()));
    }
    let (ma, mb) = (mean(a), mean(b));
    let (va, vb) = (sample_var(a) / a.len() as f64, sample_var(b) / b.len() as f64);
    let se2 = va + vb;
    let (t, df, p) = if se2 == 0.0 {
        if ma == mb {
            (0.0, None, 1.0)
        } else {
            return Err(Error::Degenerate("welch: both groups constant with different means".into()));
        }
    } else {
        let t = (ma - mb) / se2.sqrt();
        let mut den = 0.0;
        if a.len() > 1 {
            den += va * va / (a.len() - 1) as f64;
        }
        if b.len() > 1 {
            den += vb * vb / (b.len() - 1) as f64;
        }
        let df = se2 * se2 / den;
        (t, Some(df), if t == 0.0 { 1.0 } else { student_t_two_sided(t, df) })
    };
    Ok(WelchReport {
        mean_a: ma,
        mean_b: mb,
        n_a: a.len(),
        n_b: b.len(),
        t,
        df,
        p,
    })
}

// ---------------------------------------------------------------------------
// Permutation tests

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PermutationResult {
    pub observed: f64,
    pub p: f64,
    /// Number of null arrangements compared against.
    pub n_null: usize,
    pub exact: bool,
}

fn factorial_capped(n: usize, cap: u128) -> u128 {
    let mut f: u128 = 1;
    for k in 2..=n as u128 {
        f = f.saturating_mul(k);
        if f > cap {
            return cap + 1;
        }
    }
    f
}

/// All permutations of `0..n` in lexicographic order.
fn all_permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut p: Vec<usize> = (0..n).collect();
    loop {
        out.push(p.clone());
        let Some(i) = (1..n).rev().find(|&i| p[i - 1] < p[i]) else {
            break;
        };
        let j = (i..n).rev().find(|&j| p[j] > p[i - 1]).expect("successor exists");
        p.swap(i - 1, j);
        p[i..].reverse();
    }
    out
}

/// Shuffles `ys` against `xs` within `groups` and compares `statistic`.
///
/// p = (1 + #{null >= observed}) / (1 + N). When the number of distinct
/// non-identity arrangements is at most `n_shuffles`, all of them are
/// enumerated (N = arrangements - 1) and the p-value is exact.
pub fn permutation_test<F>(
    xs: &[f64],
    ys: &[f64],
    groups: &[usize],
    n_shuffles: usize,
    seed: u64,
    statistic: F,
) -> Result<PermutationResult>
where
    F: Fn(&[f64], &[f64]) -> f64,
{
    let n = xs.len();
    if ys.len() != n || groups.len() != n {
        return Err(Error::Parameter("permutation_test: length mismatch".into()));
    }
    if n < 2 {
        return Err(Error::Parameter("permutation_test needs at least 2 observations".into()));
    }
    let mut members: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, &g) in groups.iter().enumerate() {
        members.entry(g).or_default().push(i);
    }
    let members: Vec<Vec<usize>> = members.into_values().collect();
    let observed = statistic(xs, ys);
    let mut shuffled = ys.to_vec();

    let cap = n_shuffles as u128 + 1;
    let mut total: u128 = 1;
    for m in &members {
        total = total.saturating_mul(factorial_capped(m.len(), cap));
        if total > cap {
            break;
        }
    }
    if total - 1 <= n_shuffles as u128 {
        let perms: Vec<Vec<Vec<usize>>> = members.iter().map(|m| all_permutations(m.len())).collect();
        let mut idx = vec![0usize; members.len()];
        let mut count = 0usize;
        let mut n_null = 0usize;
        loop {
            if idx.iter().any(|&i| i != 0) {
                for ((m, ps), &i) in members.iter().zip(&perms).zip(&idx) {
                    for (slot, &src) in m.iter().zip(&ps[i]) {
                        shuffled[*slot] = ys[m[src]];
                    }
                }
                if statistic(xs, &shuffled) >= observed {
                    count += 1;
                }
                n_null += 1;
            }
            // Mixed-radix increment.
            let mut g = 0;
            loop {
                if g == idx.len() {
                    let p = (1 + count) as f64 / (1 + n_null) as f64;
                    return Ok(PermutationResult {
                        observed,
                        p,
                        n_null,
                        exact: true,
                    });
                }
                idx[g] += 1;
                if idx[g] < perms[g].len() {
                    break;
                }
                idx[g] = 0;
                g += 1;
            }
        }
    }

    let mut rng = SeedMix::new(seed).with_str("permutation").rng();
    let mut count = 0usize;
    let mut buf: Vec<f64> = Vec::new();
    for _ in 0..n_shuffles {
        for m in &members {
            buf.clear();
            buf.extend(m.iter().map(|&i| ys[i]));
            buf.shuffle(&mut rng);
            for (&slot, &v) in m.iter().zip(&buf) {
                shuffled[slot] = v;
            }
        }
        if statistic(xs, &shuffled) >= observed {
            count += 1;
        }
    }
    Ok(PermutationResult {
        observed,
        p: (1 + count) as f64 / (1 + n_shuffles) as f64,
        n_null: n_shuffles,
        exact: false,
    })
}

// ---------------------------------------------------------------------------
// Eigen / PCA

/// Eigenvalues of a symmetric matrix (row-major, `n x n`) by cyclic Jacobi,
/// sorted descending.
pub fn symmetric_eigenvalues(a: &[f64], n: usize) -> Vec<f64> {
    let mut m = a.to_vec();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum();
        let scale: f64 = (0..n).map(|i| m[i * n + i] * m[i * n + i]).sum::<f64>() + off;
        if off <= 1e-30 * scale.max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m[k * n + p];
                    let akq = m[k * n + q];
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[p * n + k];
                    let aqk = m[q * n + k];
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaReport {
    pub pc1_fraction: f64,
    pub eigenvalues: Vec<f64>,
    pub degenerate: bool,
}

/// Share of variance on the first principal component of `vectors`, from
/// the Gram matrix of the centered rows.
pub fn pc1_fraction(vectors: &[Vec<f32>]) -> Result<PcaReport> {
    let k = vectors.len();
    if k < 2 {
        return Err(Error::Parameter("PCA needs at least 2 vectors".into()));
    }
    let d = vectors[0].len();
    if vectors.iter().any(|v| v.len() != d) {
        return Err(Error::Parameter("PCA vectors differ in length".into()));
    }
    let mut centered: Vec<Vec<f64>> = vectors.iter().map(|v| v.iter().map(|&x| x as f64).collect()).collect();
    for j in 0..d {
        let m = centered.iter().map(|v| v[j]).sum::<f64>() / k as f64;
        centered.iter_mut().for_each(|v| v[j] -= m);
    }
    let mut gram = vec![0.0; k * k];
    for i in 0..k {
        for j in i..k {
            let g: f64 = centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum();
            gram[i * k + j] = g;
            gram[j * k + i] = g;
        }
    }
    let trace: f64 = (0..k).map(|i| gram[i * k + i]).sum();
    if trace == 0.0 {
        return Ok(PcaReport {
            pc1_fraction: 1.0,
            eigenvalues: vec![0.0; k],
            degenerate: true,
        });
    }
    let eigenvalues: Vec<f64> = symmetric_eigenvalues(&gram, k)
        .into_iter()
        .map(|l| l.max(0.0) / (k - 1) as f64)
        .collect();
    let total: f64 = eigenvalues.iter().sum();
    Ok(PcaReport {
        pc1_fraction: (eigenvalues[0] / total).min(1.0),
        eigenvalues,
        degenerate: false,
    })
}

/// Per-test threshold for a family of `m` tests.
pub fn bonferroni(alpha: f64, m: usize) -> f64 {
    alpha / m.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ln_gamma_known_values() {
        assert!((ln_gamma(1.0)).abs() < 1e-14);
        assert!((ln_gamma(5.0) - 24f64.ln()).abs() < 1e-13);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-13);
    }

    #[test]
    fn t_p_values_match_statrs() {
        use statrs::distribution::{ContinuousCDF, StudentsT};
        for &df in &[1.0, 2.5, 7.0, 30.0, 300.0, 6700.0] {
            let dist = StudentsT::new(0.0, 1.0, df).unwrap();
            for &t in &[0.01, 0.5, 1.0, 2.0, 3.5, 8.0] {
                let ours = student_t_two_sided(t, df);
                let theirs = 2.0 * (1.0 - dist.cdf(t));
                assert!((ours - theirs).abs() < 1e-10, "df {df} t {t}: {ours} vs {theirs}");
            }
        }
    }

    #[test]
    fn pearson_perfect() {
        let c = pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(c.r, 1.0);
        let c = pearson(&[1.0, 2.0, 3.0], &[-1.0, -2.0, -3.0]).unwrap();
        assert_eq!(c.r, -1.0);
        assert!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn constant_cosine_is_flagged() {
        let rows: Vec<RegressionRow> = (0..20)
            .map(|i| RegressionRow {
                task: if i % 2 == 0 { "a" } else { "b" },
                cosine: 0.5,
                accuracy: (i as f64 * 0.37).sin(),
            })
            .collect();
        let r = hierarchical_regression(&rows).unwrap();
        assert_eq!(r.delta_r2, 0.0);
        assert!(r.cos_degenerate);
        assert!(r.cos_coef.is_none());
    }

    #[test]
    fn duplicate_dummy_is_rank_deficient() {
        let design = vec![vec![1.0; 5], vec![1.0; 5]];
        assert!(matches!(ols(&design, &[1.0, 2.0, 3.0, 4.0, 6.0]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn welch_identical_groups() {
        let w = welch(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(w.t, 0.0);
        assert_eq!(w.p, 1.0);
        assert!(welch(&[], &[1.0]).is_err());
    }

    #[test]
    fn permutation_degenerate_cases() {
        let xs = [0.9, 0.95, 0.85, 0.1, 0.2, 0.3];
        let same = [0.2; 6];
        let rate = |x: &[f64], y: &[f64]| x.iter().zip(y).filter(|(c, a)| **c > 0.8 && **a < 0.4).count() as f64;
        let r = permutation_test(&xs, &same, &[0; 6], 1000, 1, rate).unwrap();
        assert_eq!(r.p, 1.0);
        let none = [0.9; 6];
        let r = permutation_test(&xs, &none, &[0; 6], 1000, 1, rate).unwrap();
        assert_eq!(r.observed, 0.0);
        assert_eq!(r.p, 1.0);
    }

    #[test]
    fn permutation_enumeration_is_complete() {
        assert_eq!(all_permutations(4).len(), 24);
        let xs: Vec<f64> = (0..6).map(|i| i as f64).collect();
        let r = permutation_test(&xs, &xs, &[0; 6], 1000, 0, |_, _| 0.0).unwrap();
        assert!(r.exact);
        assert_eq!(r.n_null, 719);
    }

    #[test]
    fn jacobi_diagonalizes() {
        let a = [2.0, 1.0, 0.0, 1.0, 2.0, 0.0, 0.0, 0.0, 5.0];
        let ev = symmetric_eigenvalues(&a, 3);
        for (got, want) in ev.iter().zip([5.0, 3.0, 1.0]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_vectors_are_degenerate() {
        let r = pc1_fraction(&vec![vec![1.0, 2.0]; 8]).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.pc1_fraction, 1.0);
    }

    #[test]
    fn rank_one_jitter_goes_to_one() {
        let base = [0.3f32, -1.0, 2.0, 0.5];
        let dir = [1.0f32, 0.0, 0.0, 0.0];
        let vs: Vec<Vec<f32>> = (0..8)
            .map(|i| base.iter().zip(dir).map(|(b, d)| b + 1e-3 * i as f32 * d).collect())
            .collect();
        assert!((pc1_fraction(&vs).unwrap().pc1_fraction - 1.0).abs() < 1e-9);
    }

    #[test]
    fn bonferroni_divides() {
        assert_eq!(bonferroni(0.05, 12), 0.05 / 12.0);
    }

    proptest! {
        #[test]
        fn pc1_bounds(seed in any::<u64>()) {
            use rand::Rng;
            let mut rng = SeedMix::new(seed).rng();
            let vs: Vec<Vec<f32>> = (0..8).map(|_| (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let f = pc1_fraction(&vs).unwrap().pc1_fraction;
            prop_assert!((1.0 / 7.0 - 1e-12..=1.0).contains(&f));
        }

        #[test]
        fn pearson_bounded(xs in prop::collection::vec(-1e3f64..1e3, 3..30), shift in -5.0f64..5.0) {
            let ys: Vec<f64> = xs.iter().enumerate().map(|(i, x)| x * shift + (i as f64).sin()).collect();
            if let Ok(c) = pearson(&xs, &ys) {
                prop_assert!(c.r.abs() <= 1.0);
                prop_assert!((0.0..=1.0).contains(&c.p));
            }
        }
    }
}
