//! Loss terms of the grouping objective.
//!
//! ```text
//! L     = L_s + lambda1 * L_f + lambda2 * L_reg
//! L_s   = -tr(Xg^T P^t Xg) / (B d)                 (P rebuilt on the gated batch Xg)
//! L_f   = (tr(F^T L_feat F) + beta |F^T F - I|^2) / (d C)
//! L_reg = (1/C) sum_j Phi(mu_j / sigma) * (1/d) sum_i M_ij
//! ```
//!
//! These are plain forward evaluations. Training differentiates the same
//! expressions on the tape in [`crate::optim::objective`]; the two routes are
//! cross-checked in tests.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::gates::{self, GateState};
use crate::graph;
use crate::grouping;
use crate::optim::ParamSet;

pub const DEFAULT_KERNEL_NEIGHBORS: usize = 7;
pub const DEFAULT_DIFFUSION_STEPS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Orthogonality weight inside `L_f`.
    pub beta: f64,
    /// Diffusion steps.
    pub t: usize,
    /// Neighbour rank for the self-tuning bandwidths.
    pub k: usize,
    /// Differentiate through the self-tuning bandwidths. Off by default:
    /// the bandwidths are then constants of each step.
    #[serde(default)]
    pub propagate_bandwidth_grad: bool,
}

impl LossConfig {
    /// Weights with `beta = 1 / lambda1` (or 1 when `lambda1` is zero) and
    /// the default kernel settings.
    pub fn new(lambda1: f64, lambda2: f64) -> Self {
        Self {
            lambda1,
            lambda2,
            beta: default_beta(lambda1),
            t: DEFAULT_DIFFUSION_STEPS,
            k: DEFAULT_KERNEL_NEIGHBORS,
            propagate_bandwidth_grad: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("beta", self.beta)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        if self.t == 0 {
            return Err(invalid("diffusion steps must be at least 1"));
        }
        if self.k == 0 {
            return Err(invalid("kernel neighbour count must be at least 1"));
        }
        Ok(())
    }
}

pub fn default_beta(lambda1: f64) -> f64 {
    if lambda1 > 0.0 {
        1.0 / lambda1
    } else {
        1.0
    }
}

/// Normalized Laplacian of the feature-similarity graph, built once from the
/// columns of the full standardized data.
#[derive(Debug, Clone)]
pub struct FeatureGraph {
    pub l_feat: DMatrix<f64>,
}

impl FeatureGraph {
    pub fn from_data(x: &DMatrix<f64>, k: usize) -> Result<Self> {
        let d = x.ncols();
        if d < 2 {
            return Err(invalid("the feature graph needs at least 2 features"));
        }
        // K is capped so that small feature counts still produce a graph
        let k = k.min(d - 1);
        let g = graph::self_tuning_affinity(&x.transpose(), k)?;
        let ops = graph::graph_operators(&g)?;
        Ok(Self { l_feat: ops.l_sym })
    }

    pub fn n_features(&self) -> usize {
        self.l_feat.nrows()
    }
}

/// Negated, normalized diffusion trace over a gated batch.
pub fn sample_smoothness(x_tilde: &DMatrix<f64>, cfg: &LossConfig) -> Result<f64> {
    check_batch(x_tilde, cfg)?;
    let g = graph::self_tuning_affinity(x_tilde, cfg.k)?;
    diffusion_trace(x_tilde, &g, cfg)
}

/// [`sample_smoothness`] with the bandwidths held at the given values.
pub fn sample_smoothness_with_bandwidths(x_tilde: &DMatrix<f64>, gamma: &[f64], cfg: &LossConfig) -> Result<f64> {
    check_batch(x_tilde, cfg)?;
    let g = graph::affinity_with_bandwidths(&graph::pairwise_sq_dists(x_tilde), gamma)?;
    diffusion_trace(x_tilde, &g, cfg)
}

fn check_batch(x_tilde: &DMatrix<f64>, cfg: &LossConfig) -> Result<()> {
    let b = x_tilde.nrows();
    if b < cfg.k + 1 {
        return Err(invalid(format!("batch of {b} rows is too small for K = {}", cfg.k)));
    }
    Ok(())
}

fn diffusion_trace(x_tilde: &DMatrix<f64>, g: &graph::AffinityGraph, cfg: &LossConfig) -> Result<f64> {
    let (b, d) = x_tilde.shape();
    let ops = graph::graph_operators(g)?;
    let pt = graph::diffuse(&ops.p, cfg.t)?;
    let tr = x_tilde.dot(&(pt * x_tilde));
    Ok(-tr / (b * d) as f64)
}

/// `F = M Q` with each column centered and scaled to unit norm; zero-norm
/// columns stay zero.
pub fn feature_embedding(m: &DMatrix<f64>, q: &DMatrix<f64>) -> DMatrix<f64> {
    let mut f = m * q;
    for mut col in f.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
        let norm = col.norm();
        if norm > 0.0 {
            col /= norm;
        } else {
            col.fill(0.0);
        }
    }
    f
}

pub fn feature_smoothness(f: &DMatrix<f64>, l_feat: &DMatrix<f64>, beta: f64) -> Result<f64> {
    let (d, c) = f.shape();
    if l_feat.shape() != (d, d) {
        return Err(Error::DimensionMismatch {
            context: "feature_smoothness",
            expected: format!("{d}x{d} Laplacian"),
            got: format!("{}x{}", l_feat.nrows(), l_feat.ncols()),
        });
    }
    let smooth = f.dot(&(l_feat * f));
    let gram = f.transpose() * f - DMatrix::identity(c, c);
    Ok((smooth + beta * gram.norm_squared()) / (d * c) as f64)
}

pub fn group_sparsity(m: &DMatrix<f64>, gate: &GateState) -> Result<f64> {
    let (d, c) = m.shape();
    if gate.mu.len() != c {
        return Err(Error::DimensionMismatch {
            context: "group_sparsity",
            expected: format!("{c} gates"),
            got: format!("{} gates", gate.mu.len()),
        });
    }
    let p = gates::open_probability(gate);
    let mass = m.row_sum();
    Ok(mass.iter().zip(p.iter()).map(|(s, p)| p * s).sum::<f64>() / (c * d) as f64)
}

/// Unweighted loss terms and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub smooth: f64,
    pub feature: f64,
    pub reg: f64,
}

impl LossBreakdown {
    pub fn combine(smooth: f64, feature: f64, reg: f64, cfg: &LossConfig) -> Self {
        Self {
            total: smooth + cfg.lambda1 * feature + cfg.lambda2 * reg,
            smooth,
            feature,
            reg,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.smooth.is_finite() && self.feature.is_finite() && self.reg.is_finite()
    }
}

/// Gumbel and gate noise for one step, captured so a loss can be re-evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenNoise {
    pub gumbel: DMatrix<f64>,
    pub gate: DVector<f64>,
}

impl FrozenNoise {
    pub fn zeros(d: usize, c: usize) -> Self {
        Self { gumbel: DMatrix::zeros(d, c), gate: DVector::zeros(c) }
    }
}

/// Everything needed to evaluate the objective on one batch.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub x: &'a DMatrix<f64>,
    pub noise: &'a FrozenNoise,
    pub temperature: f64,
    pub sigma: f64,
}

/// Gated batch `X_B * (M z)` under the batch noise.
pub fn gated_batch(batch: Batch<'_>, params: &ParamSet) -> Result<DMatrix<f64>> {
    params.check_shapes(batch.x.ncols())?;
    let m = grouping::relaxed_assignment(&params.logits, &batch.noise.gumbel, batch.temperature);
    let z = gates::gates_from_noise(&params.mu, &batch.noise.gate);
    gates::apply_gates(batch.x, &gates::feature_weights(&m, &z)?)
}

/// Forward evaluation of the full objective.
pub fn total_loss(
    batch: Batch<'_>,
    params: &ParamSet,
    feature_graph: &FeatureGraph,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    evaluate(batch, params, feature_graph, cfg, None)
}

/// [`total_loss`] with the sample-graph bandwidths held fixed.
pub fn total_loss_with_bandwidths(
    batch: Batch<'_>,
    params: &ParamSet,
    feature_graph: &FeatureGraph,
    cfg: &LossConfig,
    gamma: &[f64],
) -> Result<LossBreakdown> {
    evaluate(batch, params, feature_graph, cfg, Some(gamma))
}

fn evaluate(
    batch: Batch<'_>,
    params: &ParamSet,
    feature_graph: &FeatureGraph,
    cfg: &LossConfig,
    gamma: Option<&[f64]>,
) -> Result<LossBreakdown> {
    let x_tilde = gated_batch(batch, params)?;
    let smooth = match gamma {
        Some(g) => sample_smoothness_with_bandwidths(&x_tilde, g, cfg)?,
        None => sample_smoothness(&x_tilde, cfg)?,
    };
    let m = grouping::relaxed_assignment(&params.logits, &batch.noise.gumbel, batch.temperature);
    let f = feature_embedding(&m, &params.q);
    let feature = feature_smoothness(&f, &feature_graph.l_feat, cfg.beta)?;
    let gate = GateState::new(params.mu.clone(), batch.sigma)?;
    let reg = group_sparsity(&m, &gate)?;
    Ok(LossBreakdown::combine(smooth, feature, reg, cfg))
}
