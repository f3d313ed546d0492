//! Dense spectral-graph primitives.
//!
//! The same self-tuning kernel backs the per-batch sample graph, the feature
//! graph built once at initialization, and the Laplacian Score baseline.
//!
//! ```text
//! W_ij  = exp(-|x_i - x_j|^2 / (g_i g_j)),  g_i = distance to the K-th neighbour
//! L_sym = I - D^{-1/2} W D^{-1/2}
//! P     = D^{-1} W
//! ```

use nalgebra::{DMatrix, DVector};

use crate::error::{check_shape, invalid, Error, Result};
use crate::eval;
use crate::par::{self, Exec};

/// Relative bandwidth floor: `g_i >= 1e-12 * median(g)`.
pub const BANDWIDTH_REL_FLOOR: f64 = 1e-12;
/// Absolute bandwidth floor, used when the median itself is zero.
pub const BANDWIDTH_ABS_FLOOR: f64 = 1e-100;
/// Degrees are clamped to at least this value.
pub const DEGREE_FLOOR: f64 = f64::MIN_POSITIVE;

/// Symmetric affinity matrix with zero diagonal and its degree vector.
#[derive(Debug, Clone)]
pub struct AffinityGraph {
    pub w: DMatrix<f64>,
    pub degrees: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct GraphOperators {
    /// Symmetric normalized Laplacian.
    pub l_sym: DMatrix<f64>,
    /// Row-stochastic random-walk matrix.
    pub p: DMatrix<f64>,
}

/// Exact pairwise squared Euclidean distances between the rows of `x`.
pub fn pairwise_sq_dists(x: &DMatrix<f64>) -> DMatrix<f64> {
    pairwise_sq_dists_with(par::for_rows(x.nrows()), x)
}

pub fn pairwise_sq_dists_with(exec: Exec, x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    // samples as contiguous columns
    let xt = x.transpose();
    let mut out = vec![0.0; n * n];
    exec.for_each_chunk(&mut out, n.max(1), |j, col| {
        let xj = xt.column(j);
        for (i, slot) in col.iter_mut().enumerate() {
            if i != j {
                let xi = xt.column(i);
                *slot = xi.iter().zip(xj.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            }
        }
    });
    DMatrix::from_vec(n, n, out)
}

/// Per-row K-th nearest-neighbour selection (self excluded).
#[derive(Debug, Clone)]
pub struct Bandwidths {
    /// Floored bandwidths.
    pub gamma: Vec<f64>,
    /// Column index of the K-th neighbour of each row.
    pub neighbor: Vec<usize>,
    /// True where the floor replaced the raw distance.
    pub floored: Vec<bool>,
}

/// Self-tuning bandwidths from a squared-distance matrix. Ties in distance are
/// broken by the lower column index.
pub fn kth_neighbor_bandwidths(d2: &DMatrix<f64>, k: usize) -> Result<Bandwidths> {
    let n = d2.nrows();
    check_shape("kth_neighbor_bandwidths", (n, n), d2.shape())?;
    if k == 0 {
        return Err(invalid("neighbour count K must be at least 1"));
    }
    if k >= n {
        return Err(invalid(format!("K = {k} requires at least {} rows, got {n}", k + 1)));
    }
    let mut raw = Vec::with_capacity(n);
    let mut neighbor = Vec::with_capacity(n);
    let mut idx: Vec<usize> = Vec::with_capacity(n - 1);
    for i in 0..n {
        idx.clear();
        idx.extend((0..n).filter(|&j| j != i));
        let cmp = |a: &usize, b: &usize| d2[(i, *a)].total_cmp(&d2[(i, *b)]).then(a.cmp(b));
        let (_, kth, _) = idx.select_nth_unstable_by(k - 1, cmp);
        neighbor.push(*kth);
        raw.push(d2[(i, *kth)].max(0.0).sqrt());
    }
    let floor = bandwidth_floor(&raw);
    let floored: Vec<bool> = raw.iter().map(|&g| g < floor).collect();
    let gamma = raw.iter().map(|&g| g.max(floor)).collect();
    Ok(Bandwidths { gamma, neighbor, floored })
}

fn bandwidth_floor(raw: &[f64]) -> f64 {
    let mut sorted = raw.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len();
    let median = if m % 2 == 1 {
        sorted[m / 2]
    } else {
        0.5 * (sorted[m / 2 - 1] + sorted[m / 2])
    };
    (BANDWIDTH_REL_FLOOR * median).max(BANDWIDTH_ABS_FLOOR)
}

/// Self-tuning Gaussian affinity over the rows of `x`, dense, zero diagonal.
pub fn self_tuning_affinity(x: &DMatrix<f64>, k: usize) -> Result<AffinityGraph> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(invalid("affinity input contains non-finite values"));
    }
    let d2 = pairwise_sq_dists(x);
    affinity_from_sq_dists(&d2, k)
}

pub fn affinity_from_sq_dists(d2: &DMatrix<f64>, k: usize) -> Result<AffinityGraph> {
    let bw = kth_neighbor_bandwidths(d2, k)?;
    affinity_with_bandwidths(d2, &bw.gamma)
}

/// Gaussian affinity with caller-supplied bandwidths.
pub fn affinity_with_bandwidths(d2: &DMatrix<f64>, g: &[f64]) -> Result<AffinityGraph> {
    let n = d2.nrows();
    check_shape("affinity_with_bandwidths", (n, n), d2.shape())?;
    if g.len() != n || g.iter().any(|v| !(*v > 0.0)) {
        return Err(invalid(format!("need {n} positive bandwidths")));
    }
    let w = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            0.0
        } else {
            (-d2[(i, j)] / (g[i] * g[j])).exp()
        }
    });
    let degrees = DVector::from_iterator(n, w.row_iter().map(|r| r.sum().max(DEGREE_FLOOR)));
    Ok(AffinityGraph { w, degrees })
}

/// Build the wrapper from an explicit affinity matrix; the diagonal is zeroed.
pub fn affinity_from_weights(mut w: DMatrix<f64>) -> Result<AffinityGraph> {
    let n = w.nrows();
    check_shape("affinity_from_weights", (n, n), w.shape())?;
    if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(invalid("affinities must be finite and nonnegative"));
    }
    w.fill_diagonal(0.0);
    let degrees = DVector::from_iterator(n, w.row_iter().map(|r| r.sum().max(DEGREE_FLOOR)));
    Ok(AffinityGraph { w, degrees })
}

pub fn graph_operators(g: &AffinityGraph) -> Result<GraphOperators> {
    let n = g.w.nrows();
    if let Some(i) = g.degrees.iter().position(|d| !(*d > 0.0)) {
        return Err(Error::Numerical(format!("zero degree at node {i} after floor")));
    }
    let inv_sqrt: Vec<f64> = g.degrees.iter().map(|d| 1.0 / d.sqrt()).collect();
    let l_sym = DMatrix::from_fn(n, n, |i, j| {
        let delta = if i == j { 1.0 } else { 0.0 };
        delta - inv_sqrt[i] * g.w[(i, j)] * inv_sqrt[j]
    });
    let p = DMatrix::from_fn(n, n, |i, j| g.w[(i, j)] / g.degrees[i]);
    Ok(GraphOperators { l_sym, p })
}

/// `P^t` by repeated multiplication.
pub fn diffuse(p: &DMatrix<f64>, t: usize) -> Result<DMatrix<f64>> {
    if t == 0 {
        return Err(invalid("diffusion step count must be at least 1"));
    }
    let mut out = p.clone();
    for _ in 1..t {
        out = &out * p;
    }
    Ok(out)
}

/// Per-feature Laplacian Score `x_k^T L_sym x_k`; lower is smoother.
pub fn laplacian_score(x: &DMatrix<f64>, ops: &GraphOperators) -> Result<DVector<f64>> {
    let n = ops.l_sym.nrows();
    if x.nrows() != n {
        return Err(Error::DimensionMismatch {
            context: "laplacian_score",
            expected: format!("{n} rows"),
            got: format!("{} rows", x.nrows()),
        });
    }
    let lx = &ops.l_sym * x;
    Ok(DVector::from_iterator(
        x.ncols(),
        x.column_iter().zip(lx.column_iter()).map(|(a, b)| a.dot(&b)),
    ))
}

/// Eigenpairs of a symmetric matrix sorted by ascending eigenvalue.
pub fn sorted_symmetric_eigen(a: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = a.nrows();
    check_shape("sorted_symmetric_eigen", (n, n), a.shape())?;
    let sym = (a + a.transpose()) * 0.5;
    let eig = sym.clone().try_symmetric_eigen(1e-14, 10_000).ok_or_else(|| {
        let asym = (a - a.transpose()).abs().max();
        Error::Numerical(format!(
            "symmetric eigensolver did not converge (n = {n}, max |A - A^T| = {asym:e}, max |A| = {:e})",
            a.abs().max()
        ))
    })?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]).then(i.cmp(&j)));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let vectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    Ok((values, vectors))
}

/// Row-normalized embedding from the `c` smallest eigenvectors of `l_sym`.
/// Zero rows stay zero.
pub fn spectral_embedding(l_sym: &DMatrix<f64>, c: usize) -> Result<DMatrix<f64>> {
    let n = l_sym.nrows();
    if c == 0 || c > n {
        return Err(invalid(format!("embedding dimension {c} must be in 1..={n}")));
    }
    let (_, vecs) = sorted_symmetric_eigen(l_sym)?;
    let mut u = vecs.columns(0, c).into_owned();
    normalize_rows(&mut u);
    Ok(u)
}

pub(crate) fn normalize_rows(u: &mut DMatrix<f64>) {
    for mut row in u.row_iter_mut() {
        let norm = row.norm();
        if norm > 0.0 {
            row /= norm;
        }
    }
}

/// Restarts used for the k-means stage of spectral clustering.
pub const SPECTRAL_KMEANS_RESTARTS: usize = 10;

/// Spectral clustering: k-means on the row-normalized embedding.
pub fn spectral_cluster(l_sym: &DMatrix<f64>, c: usize, seed: u64) -> Result<Vec<usize>> {
    if c < 2 {
        return Err(invalid("spectral clustering needs at least 2 clusters"));
    }
    let u = spectral_embedding(l_sym, c)?;
    let fit = eval::kmeans_restarts(&u, c, SPECTRAL_KMEANS_RESTARTS, seed)?;
    Ok(fit.labels)
}
