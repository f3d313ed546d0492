//! Evaluation metrics: k-means clustering accuracy under optimal label
//! matching, adjusted Rand index, relevant-group similarity, TPR and FDR.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::par::Exec;

pub const KMEANS_MAX_ITER: usize = 300;

#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub labels: Vec<usize>,
    pub centroids: DMatrix<f64>,
    pub inertia: f64,
}

impl KMeansFit {
    pub fn has_empty_cluster(&self) -> bool {
        let k = self.centroids.nrows();
        let mut seen = vec![false; k];
        self.labels.iter().for_each(|&l| seen[l] = true);
        seen.iter().any(|s| !s)
    }
}

fn sq_dist(x: &DMatrix<f64>, i: usize, c: &DMatrix<f64>, j: usize) -> f64 {
    x.row(i).iter().zip(c.row(j).iter()).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// k-means++ seeding followed by Lloyd iterations over the rows of `x`.
pub fn kmeans(x: &DMatrix<f64>, k: usize, seed: u64) -> Result<KMeansFit> {
    let (n, m) = x.shape();
    if k == 0 || k > n {
        return Err(invalid(format!("k-means needs 1 <= k <= {n}, got k = {k}")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(invalid("k-means input contains non-finite values"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = DMatrix::zeros(k, m);
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from(&x.row(first));
    chosen[first] = true;
    let mut closest: Vec<f64> = (0..n).map(|i| sq_dist(x, i, &centroids, 0)).collect();
    for c in 1..k {
        let total: f64 = closest.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, &d) in closest.iter().enumerate() {
                if r < d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            pick
        } else {
            // every point sits on a centroid; take any unused point
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[pick] = true;
        centroids.row_mut(c).copy_from(&x.row(pick));
        for (i, d) in closest.iter_mut().enumerate() {
            *d = d.min(sq_dist(x, i, &centroids, c));
        }
    }

    let mut labels = vec![usize::MAX; n];
    for _ in 0..KMEANS_MAX_ITER {
        let mut changed = false;
        for i in 0..n {
            let best = nearest(x, i, &centroids).0;
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = DMatrix::zeros(k, m);
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            let mut row = sums.row_mut(l);
            row += x.row(i);
        }
        for c in 0..k {
            if counts[c] > 0 {
                let row = sums.row(c) / counts[c] as f64;
                centroids.row_mut(c).copy_from(&row);
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // reseed from the point farthest from its own centroid
                let far = (0..n)
                    .filter(|&i| counts[labels[i]] > 1)
                    .max_by(|&a, &b| {
                        sq_dist(x, a, &centroids, labels[a])
                            .total_cmp(&sq_dist(x, b, &centroids, labels[b]))
                            .then(b.cmp(&a))
                    });
                if let Some(far) = far {
                    counts[labels[far]] -= 1;
                    counts[c] = 1;
                    labels[far] = c;
                    centroids.row_mut(c).copy_from(&x.row(far));
                }
            }
        }
    }
    let inertia = (0..n).map(|i| sq_dist(x, i, &centroids, labels[i])).sum();
    Ok(KMeansFit { labels, centroids, inertia })
}

fn nearest(x: &DMatrix<f64>, i: usize, c: &DMatrix<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for j in 0..c.nrows() {
        let d = sq_dist(x, i, c, j);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Best-inertia k-means over `restarts` seeds derived from `seed`.
pub fn kmeans_restarts(x: &DMatrix<f64>, k: usize, restarts: usize, seed: u64) -> Result<KMeansFit> {
    let restarts = restarts.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..restarts).map(|_| rng.random()).collect();
    let fits = Exec::default().map(restarts, |r| kmeans(x, k, seeds[r]));
    let mut best: Option<KMeansFit> = None;
    for fit in fits {
        let fit = fit?;
        if best.as_ref().is_none_or(|b| fit.inertia < b.inertia) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Minimum-cost assignment of rows to columns (rows <= columns), returning the
/// column assigned to each row.
pub fn hungarian(cost: &DMatrix<f64>) -> Vec<usize> {
    let (n, m) = cost.shape();
    assert!(n <= m, "hungarian expects rows <= columns");
    // potentials formulation, 1-based with a sentinel column 0
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

fn encode(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut map = HashMap::new();
    let out = labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect();
    (out, map.len())
}

fn contingency(pred: &[usize], truth: &[usize]) -> Result<(Vec<Vec<i128>>, usize, usize)> {
    if pred.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            context: "label vectors",
            expected: format!("{}", truth.len()),
            got: format!("{}", pred.len()),
        });
    }
    let (p, kp) = encode(pred);
    let (t, kt) = encode(truth);
    let mut table = vec![vec![0i128; kt]; kp];
    for (a, b) in p.iter().zip(&t) {
        table[*a][*b] += 1;
    }
    Ok((table, kp, kt))
}

/// Fraction of samples correctly labelled under the best one-to-one matching
/// of predicted clusters to classes.
pub fn clustering_accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.is_empty() {
        return Err(invalid("empty label vectors"));
    }
    let (table, kp, kt) = contingency(pred, truth)?;
    let size = kp.max(kt);
    let max = table.iter().flatten().copied().max().unwrap_or(0) as f64;
    let cost = DMatrix::from_fn(size, size, |i, j| {
        let c = if i < kp && j < kt { table[i][j] as f64 } else { 0.0 };
        max - c
    });
    let assign = hungarian(&cost);
    let hits: i128 = assign
        .iter()
        .enumerate()
        .filter(|&(i, &j)| i < kp && j < kt)
        .map(|(i, &j)| table[i][j])
        .sum();
    Ok(hits as f64 / pred.len() as f64)
}

fn pairs(n: i128) -> i128 {
    n * (n - 1) / 2
}

/// Adjusted Rand index (pair-counting, chance-corrected).
pub fn ari(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let (table, _, _) = contingency(pred, truth)?;
    let n = pred.len() as i128;
    let index: i128 = table.iter().flatten().map(|&c| pairs(c)).sum();
    let a: i128 = table.iter().map(|r| pairs(r.iter().sum())).sum();
    let kt = table.first().map_or(0, |r| r.len());
    let b: i128 = (0..kt).map(|j| pairs(table.iter().map(|r| r[j]).sum())).sum();
    let total = pairs(n);
    // (index - ab/total) / ((a+b)/2 - ab/total), cleared of fractions
    let num = 2 * (total * index - a * b);
    let den = total * (a + b) - 2 * a * b;
    if den == 0 {
        return Ok(1.0);
    }
    Ok(num as f64 / den as f64)
}

fn jaccard(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.union(b).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Relevant-group similarity between informative ground-truth groups and the
/// predicted groups that overlap any of them.
pub fn rg_sim(truth_groups: &[Vec<usize>], predicted_groups: &[Vec<usize>]) -> Result<f64> {
    if truth_groups.is_empty() || truth_groups.iter().any(|g| g.is_empty()) {
        return Err(invalid("truth groups must be nonempty sets"));
    }
    let truth: Vec<BTreeSet<usize>> = truth_groups.iter().map(|g| g.iter().copied().collect()).collect();
    let informative: BTreeSet<usize> = truth.iter().flatten().copied().collect();
    let relevant: Vec<BTreeSet<usize>> = predicted_groups
        .iter()
        .map(|g| g.iter().copied().collect::<BTreeSet<_>>())
        .filter(|g| !g.is_disjoint(&informative))
        .collect();
    if relevant.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = truth
        .iter()
        .map(|t| relevant.iter().map(|g| jaccard(t, g)).fold(0.0, f64::max))
        .sum();
    Ok(total / truth.len().max(relevant.len()) as f64)
}

/// `(tpr, fdr)` of a selection against the informative feature set.
pub fn tpr_fdr(selected: &[usize], informative: &[usize], d: usize) -> Result<(f64, f64)> {
    if let Some(&bad) = selected.iter().find(|&&i| i >= d) {
        return Err(invalid(format!("selected index {bad} out of range for d = {d}")));
    }
    let sel: BTreeSet<usize> = selected.iter().copied().collect();
    let inf: BTreeSet<usize> = informative.iter().copied().collect();
    let hits = sel.intersection(&inf).count();
    let tpr = if inf.is_empty() { 0.0 } else { hits as f64 / inf.len() as f64 };
    let fdr = if sel.is_empty() {
        0.0
    } else {
        (sel.len() - hits) as f64 / sel.len() as f64
    };
    Ok((tpr, fdr))
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Default k-means seeds for reported accuracies.
pub const EVAL_SEEDS: std::ops::Range<u64> = 0..10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusteringScores {
    /// Percent.
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub ari_mean: f64,
    pub ari_std: f64,
}

/// k-means with `k` clusters on the given columns, one run per seed.
pub fn clustering_scores(
    x: &DMatrix<f64>,
    columns: &[usize],
    truth: &[usize],
    k: usize,
    seeds: &[u64],
) -> Result<ClusteringScores> {
    if columns.is_empty() {
        return Err(invalid("no features selected"));
    }
    if x.nrows() != truth.len() {
        return Err(Error::DimensionMismatch {
            context: "clustering_scores labels",
            expected: format!("{}", x.nrows()),
            got: format!("{}", truth.len()),
        });
    }
    let sub = x.select_columns(columns);
    let runs = Exec::default().map(seeds.len(), |s| -> Result<(f64, f64)> {
        let fit = kmeans(&sub, k, seeds[s])?;
        Ok((clustering_accuracy(&fit.labels, truth)?, ari(&fit.labels, truth)?))
    });
    let mut acc = Vec::new();
    let mut ar = Vec::new();
    for r in runs {
        let (a, b) = r?;
        acc.push(100.0 * a);
        ar.push(100.0 * b);
    }
    let (accuracy_mean, accuracy_std) = mean_std(&acc);
    let (ari_mean, ari_std) = mean_std(&ar);
    Ok(ClusteringScores { accuracy_mean, accuracy_std, ari_mean, ari_std })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub accuracy_mean: Option<f64>,
    pub accuracy_std: Option<f64>,
    pub ari_mean: Option<f64>,
    pub ari_std: Option<f64>,
    pub rg_sim: Option<f64>,
    pub tpr: Option<f64>,
    pub fdr: Option<f64>,
    pub n_selected: usize,
}

impl MetricReport {
    pub fn with_clustering(mut self, s: ClusteringScores) -> Self {
        self.accuracy_mean = Some(s.accuracy_mean);
        self.accuracy_std = Some(s.accuracy_std);
        self.ari_mean = Some(s.ari_mean);
        self.ari_std = Some(s.ari_std);
        self
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pm = |m: Option<f64>, s: Option<f64>| match (m, s) {
            (Some(m), Some(s)) => format!("{m:.1} ± {s:.1}"),
            _ => "-".to_string(),
        };
        let one = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.3}"));
        let rows = [
            ("accuracy (%)", pm(self.accuracy_mean, self.accuracy_std)),
            ("ARI (%)", pm(self.ari_mean, self.ari_std)),
            ("RG_sim", one(self.rg_sim)),
            ("TPR", one(self.tpr)),
            ("FDR", one(self.fdr)),
            ("selected", self.n_selected.to_string()),
        ];
        for (name, value) in rows {
            writeln!(f, "{name:<14}{value:>16}")?;
        }
        Ok(())
    }
}
