//! Central finite-difference verification of the tape gradient.
//!
//! The numeric side differentiates [`crate::losses::total_loss`], which is
//! computed without the tape, under frozen noise. When the bandwidth gradient
//! is stopped, the numeric side holds the bandwidths at their base values so
//! both sides differentiate the same function.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::objective::loss_and_grad;
use super::ParamSet;
use crate::error::Result;
use crate::gates;
use crate::graph;
use crate::grouping;
use crate::losses::{self, Batch, FeatureGraph, FrozenNoise, LossConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub n: usize,
    pub d: usize,
    pub groups: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error, above the round-off of the
    /// central differences (about eps * |L| / step).
    pub rel_floor: f64,
    pub temperature: f64,
    pub sigma: f64,
    /// Gate coordinates with `mu + eps` this close to 0 or 1 are skipped.
    pub clip_margin: f64,
    pub loss: LossConfig,
    /// Corrupts the analytic gradient; used to check that failures are caught.
    pub inject_fault: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            n: 30,
            d: 12,
            groups: 4,
            seed: 0,
            step: 1e-5,
            tolerance: 1e-4,
            rel_floor: 1e-6,
            temperature: 1.0,
            sigma: gates::DEFAULT_SIGMA,
            clip_margin: 1e-3,
            loss: LossConfig::new(1.0, 1.0),
            inject_fault: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockCheck {
    pub name: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub blocks: Vec<BlockCheck>,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }
}

impl std::fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{:<8} {:>7} {:>7} {:>12} {:>14} {:>14}", "param", "checked", "skipped", "max_rel_err", "analytic", "numeric")?;
        for b in &self.blocks {
            writeln!(
                f,
                "{:<8} {:>7} {:>7} {:>12.3e} {:>14.6e} {:>14.6e}",
                b.name, b.checked, b.skipped, b.max_rel_error, b.analytic, b.numeric
            )?;
        }
        write!(f, "{} (tolerance {:.1e})", if self.passed { "PASS" } else { "FAIL" }, self.tolerance)
    }
}

/// A random problem instance with frozen noise.
pub struct Instance {
    pub x: DMatrix<f64>,
    pub params: ParamSet,
    pub noise: FrozenNoise,
    pub feature_graph: FeatureGraph,
}

pub fn random_instance(cfg: &GradcheckConfig) -> Result<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (n, d, c) = (cfg.n, cfg.d, cfg.groups);
    let mut gauss = |r: usize, k: usize| {
        DMatrix::from_fn(r, k, |_, _| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v
        })
    };
    let x = gauss(n, d);
    let q = gauss(c, c);
    let logits = DMatrix::from_fn(d, c, |_, _| rng.random_range(-1.0..1.0));
    let mu = DVector::from_fn(c, |_, _| rng.random_range(0.0..1.0));
    let noise = FrozenNoise {
        gumbel: grouping::gumbel_noise(d, c, &mut rng),
        gate: gates::gate_noise(c, cfg.sigma, &mut rng),
    };
    let feature_graph = FeatureGraph::from_data(&x, cfg.loss.k)?;
    Ok(Instance { x, params: ParamSet { logits, mu, q }, noise, feature_graph })
}

pub fn gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let inst = random_instance(cfg)?;
    check_instance(&inst, cfg)
}

pub fn check_instance(inst: &Instance, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let batch = Batch { x: &inst.x, noise: &inst.noise, temperature: cfg.temperature, sigma: cfg.sigma };
    let (_, mut grads) = loss_and_grad(batch, &inst.params, &inst.feature_graph, &cfg.loss)?;
    if cfg.inject_fault {
        grads.logits *= 1.05;
        grads.q *= 1.05;
        grads.mu *= 1.05;
    }
    let frozen = if cfg.loss.propagate_bandwidth_grad {
        None
    } else {
        let xt = losses::gated_batch(batch, &inst.params)?;
        Some(graph::kth_neighbor_bandwidths(&graph::pairwise_sq_dists(&xt), cfg.loss.k)?.gamma)
    };
    let pre_clip = &inst.params.mu + &inst.noise.gate;
    let near_clip = |j: usize| {
        let v = pre_clip[j];
        v.abs() <= cfg.clip_margin || (v - 1.0).abs() <= cfg.clip_margin
    };

    let mut blocks = Vec::with_capacity(3);
    for b in 0..3 {
        let (name, analytic) = grads.blocks()[b];
        let mut check = BlockCheck {
            name: name.to_string(),
            checked: 0,
            skipped: 0,
            max_rel_error: 0.0,
            worst_index: None,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..analytic.len() {
            if name == "mu" && near_clip(i) {
                check.skipped += 1;
                continue;
            }
            let eval = |delta: f64| -> Result<f64> {
                let mut p = inst.params.clone();
                p.blocks_mut()[b].1[i] += delta;
                let loss = match &frozen {
                    Some(g) => losses::total_loss_with_bandwidths(batch, &p, &inst.feature_graph, &cfg.loss, g)?,
                    None => losses::total_loss(batch, &p, &inst.feature_graph, &cfg.loss)?,
                };
                Ok(loss.total)
            };
            let numeric = (eval(cfg.step)? - eval(-cfg.step)?) / (2.0 * cfg.step);
            let a = analytic[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.rel_floor);
            check.checked += 1;
            if err > check.max_rel_error || check.worst_index.is_none() {
                check.max_rel_error = err;
                check.worst_index = Some(i);
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        blocks.push(check);
    }
    let passed = blocks.iter().all(|b| b.max_rel_error <= cfg.tolerance);
    Ok(GradcheckReport { blocks, tolerance: cfg.tolerance, passed })
}
