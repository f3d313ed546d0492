//! The training objective on the autodiff tape.

use nalgebra::DMatrix;

use super::tape::{Tape, Var};
use super::ParamSet;
use crate::error::Result;
use crate::graph;
use crate::losses::{Batch, FeatureGraph, LossBreakdown, LossConfig};

struct Terms {
    total: Var,
    smooth: Var,
    feature: Var,
    reg: Var,
}

struct Leaves {
    logits: Var,
    mu: Var,
    q: Var,
}

fn column(v: &nalgebra::DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v.as_slice())
}

fn build(
    tape: &mut Tape,
    batch: Batch<'_>,
    params: &ParamSet,
    feature_graph: &FeatureGraph,
    cfg: &LossConfig,
) -> Result<(Leaves, Terms)> {
    let d = batch.x.ncols();
    params.check_shapes(d)?;
    let c = params.n_groups();
    let b = batch.x.nrows();

    let logits = tape.param(params.logits.clone());
    let mu = tape.param(column(&params.mu));
    let q = tape.param(params.q.clone());

    // relaxed assignment
    let gumbel = tape.constant(batch.noise.gumbel.clone());
    let shifted = tape.add(logits, gumbel)?;
    let tempered = tape.scale(shifted, 1.0 / batch.temperature);
    let m = tape.softmax_rows(tempered);

    // gates and gated batch
    let eps = tape.constant(column(&batch.noise.gate));
    let pre = tape.add(mu, eps)?;
    let z = tape.clamp(pre, 0.0, 1.0);
    let zhat = tape.matmul(m, z)?;
    let xb = tape.constant(batch.x.clone());
    let xt = tape.scale_columns(xb, zhat)?;

    // diffusion smoothness on the graph rebuilt from the gated batch
    let d2 = tape.pairwise_sq_dist(xt);
    let gamma = if cfg.propagate_bandwidth_grad {
        tape.kth_neighbor(d2, cfg.k)?
    } else {
        let bw = graph::kth_neighbor_bandwidths(tape.value(d2), cfg.k)?;
        tape.constant(DMatrix::from_vec(b, 1, bw.gamma))
    };
    let gamma_t = tape.transpose(gamma);
    let scale = tape.matmul(gamma, gamma_t)?;
    let ratio = tape.div(d2, scale)?;
    let neg = tape.scale(ratio, -1.0);
    let kernel = tape.exp(neg);
    let w = tape.zero_diag(kernel);
    let p = tape.row_normalize(w);
    let mut diffused = xt;
    for _ in 0..cfg.t {
        diffused = tape.matmul(p, diffused)?;
    }
    let tr = tape.dot(xt, diffused)?;
    let smooth = tape.scale(tr, -1.0 / (b * d) as f64);

    // feature-graph smoothness and orthogonality
    let mq = tape.matmul(m, q)?;
    let centered = tape.center_columns(mq);
    let f = tape.normalize_columns(centered);
    let l_feat = tape.constant(feature_graph.l_feat.clone());
    let lf = tape.matmul(l_feat, f)?;
    let quad = tape.dot(f, lf)?;
    let f_t = tape.transpose(f);
    let gram = tape.matmul(f_t, f)?;
    let eye = tape.constant(DMatrix::identity(c, c));
    let off = tape.sub(gram, eye)?;
    let orth = tape.sum_squares(off);
    let orth = tape.scale(orth, cfg.beta);
    let feat_raw = tape.add(quad, orth)?;
    let feature = tape.scale(feat_raw, 1.0 / (d * c) as f64);

    // expected open mass
    let mu_scaled = tape.scale(mu, 1.0 / batch.sigma);
    let open = tape.normal_cdf(mu_scaled);
    let m_t = tape.transpose(m);
    let ones = tape.constant(DMatrix::from_element(d, 1, 1.0));
    let mass = tape.matmul(m_t, ones)?;
    let weighted = tape.dot(open, mass)?;
    let reg = tape.scale(weighted, 1.0 / (c * d) as f64);

    let f_term = tape.scale(feature, cfg.lambda1);
    let r_term = tape.scale(reg, cfg.lambda2);
    let partial = tape.add(smooth, f_term)?;
    let total = tape.add(partial, r_term)?;

    Ok((Leaves { logits, mu, q }, Terms { total, smooth, feature, reg }))
}

fn breakdown(tape: &Tape, terms: &Terms, cfg: &LossConfig) -> LossBreakdown {
    let b = LossBreakdown {
        total: tape.scalar(terms.total),
        smooth: tape.scalar(terms.smooth),
        feature: tape.scalar(terms.feature),
        reg: tape.scalar(terms.reg),
    };
    debug_assert!(!b.is_finite() || {
        let again = LossBreakdown::combine(b.smooth, b.feature, b.reg, cfg);
        (again.total - b.total).abs() <= 1e-12 * b.total.abs().max(1.0)
    });
    b
}

/// Forward pass only.
pub fn forward(
    batch: Batch<'_>,
    params: &ParamSet,
    feature_graph: &FeatureGraph,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let (_, terms) = build(&mut tape, batch, params, feature_graph, cfg)?;
    Ok(breakdown(&tape, &terms, cfg))
}

/// Loss terms and the gradient of the total with respect to every parameter.
pub fn loss_and_grad(
    batch: Batch<'_>,
    params: &ParamSet,
    feature_graph: &FeatureGraph,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, ParamSet)> {
    let mut tape = Tape::new();
    let (leaves, terms) = build(&mut tape, batch, params, feature_graph, cfg)?;
    let loss = breakdown(&tape, &terms, cfg);
    let grads = tape.backward(terms.total)?;
    let g_mu = grads.wrt(leaves.mu);
    Ok((
        loss,
        ParamSet {
            logits: grads.wrt(leaves.logits),
            mu: nalgebra::DVector::from_column_slice(g_mu.as_slice()),
            q: grads.wrt(leaves.q),
        },
    ))
}
