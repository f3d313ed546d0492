//! Choosing the number of groups, ranking groups by gate mean and turning a
//! feature budget into a selection.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::eval;
use crate::graph;
use crate::grouping;
use crate::par::Exec;

pub const DISTORTION_KMEANS_RESTARTS: usize = 10;
pub const DISTORTION_MAX_RESEEDS: usize = 10;

/// Procrustes distortion between the `c`-dimensional spectral embedding of
/// the feature graph and the indicator matrix of its k-means partition.
pub fn distortion_score(l_feat: &DMatrix<f64>, c: usize, seed: u64) -> Result<f64> {
    let (_, vecs) = graph::sorted_symmetric_eigen(l_feat)?;
    distortion_from_eigenvectors(&vecs, c, seed)
}

fn distortion_from_eigenvectors(vecs: &DMatrix<f64>, c: usize, seed: u64) -> Result<f64> {
    let d = vecs.nrows();
    if c < 2 || c > d {
        return Err(invalid(format!("group count must lie in [2, {d}], got {c}")));
    }
    let mut u = vecs.columns(0, c).into_owned();
    graph::normalize_rows(&mut u);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = None;
    for _ in 0..DISTORTION_MAX_RESEEDS {
        let fit = eval::kmeans_restarts(&u, c, DISTORTION_KMEANS_RESTARTS, rng.random())?;
        if !fit.has_empty_cluster() {
            labels = Some(fit.labels);
            break;
        }
    }
    let labels = labels.ok_or_else(|| {
        Error::KMeans(format!("empty cluster persisted after {DISTORTION_MAX_RESEEDS} reseeds (C = {c})"))
    })?;

    let y = DMatrix::from_fn(d, c, |i, j| if labels[i] == j { 1.0 } else { 0.0 });
    let svd = (u.transpose() * &y).svd(true, true);
    let (Some(left), Some(right_t)) = (svd.u, svd.v_t) else {
        return Err(Error::Numerical("SVD of the Procrustes cross product failed".into()));
    };
    let r = left * right_t;
    Ok((u * r - y).norm_squared())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub c: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCountChoice {
    /// Global minimizer of the curve.
    pub chosen: usize,
    pub curve: Vec<CurvePoint>,
    /// Interior strict local minima, for manual override.
    pub local_minima: Vec<usize>,
}

/// Distortion curve for `C = 2..=c_max`.
pub fn choose_c(l_feat: &DMatrix<f64>, c_max: usize, seed: u64) -> Result<GroupCountChoice> {
    choose_c_with(Exec::default(), l_feat, c_max, seed)
}

pub fn choose_c_with(exec: Exec, l_feat: &DMatrix<f64>, c_max: usize, seed: u64) -> Result<GroupCountChoice> {
    let d = l_feat.nrows();
    if c_max < 3 || c_max > d {
        return Err(invalid(format!("C_max must lie in [3, {d}], got {c_max}")));
    }
    let (_, vecs) = graph::sorted_symmetric_eigen(l_feat)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (2..=c_max).map(|_| rng.random()).collect();
    let scores = exec.map(seeds.len(), |i| distortion_from_eigenvectors(&vecs, i + 2, seeds[i]));
    let curve = scores
        .into_iter()
        .enumerate()
        .map(|(i, s)| s.map(|score| CurvePoint { c: i + 2, score }))
        .collect::<Result<Vec<_>>>()?;
    let chosen = curve
        .iter()
        .min_by(|a, b| a.score.total_cmp(&b.score).then(a.c.cmp(&b.c)))
        .map(|p| p.c)
        .unwrap_or(2);
    let local_minima = curve
        .windows(3)
        .filter(|w| w[1].score < w[0].score && w[1].score < w[2].score)
        .map(|w| w[1].c)
        .collect();
    Ok(GroupCountChoice { chosen, curve, local_minima })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BudgetRule {
    /// The first `k` ranked groups.
    Groups(usize),
    /// Ranked groups until at least this many features are covered.
    MinFeatures(usize),
    /// The longest prefix with at most this many features.
    MaxFeatures(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Nonempty groups by descending gate mean, ties by index.
    pub group_order: Vec<usize>,
    /// Features of each group under the arg-max assignment.
    pub groups: Vec<Vec<usize>>,
    /// Sorted union of the selected prefix.
    pub selected: Vec<usize>,
    pub gate_means: Vec<f64>,
    /// Number of groups taken.
    pub budget: usize,
    /// Set when the rule could not be met exactly.
    #[serde(default)]
    pub budget_unreachable: bool,
}

impl SelectionResult {
    pub fn selected_groups(&self) -> &[usize] {
        &self.group_order[..self.budget]
    }
}

/// Nonempty groups ordered by descending gate mean.
pub fn rank_groups(groups: &[Vec<usize>], gate_means: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..groups.len()).filter(|&j| !groups[j].is_empty()).collect();
    order.sort_by(|&a, &b| gate_means[b].total_cmp(&gate_means[a]).then(a.cmp(&b)));
    order
}

pub fn rank_and_select(logits: &DMatrix<f64>, gate_means: &[f64], rule: BudgetRule) -> Result<SelectionResult> {
    let c = logits.ncols();
    if gate_means.len() != c {
        return Err(Error::DimensionMismatch {
            context: "rank_and_select",
            expected: format!("{c} gate means"),
            got: format!("{}", gate_means.len()),
        });
    }
    let mut groups = vec![Vec::new(); c];
    for (i, g) in grouping::hard_assignment(logits).into_iter().enumerate() {
        groups[g].push(i);
    }
    let order = rank_groups(&groups, gate_means);
    let sizes: Vec<usize> = order.iter().map(|&j| groups[j].len()).collect();
    let cumulative: Vec<usize> = sizes
        .iter()
        .scan(0, |acc, s| {
            *acc += s;
            Some(*acc)
        })
        .collect();
    let all = order.len();

    let (budget, unreachable) = match rule {
        BudgetRule::Groups(k) => (k.min(all), k > all),
        BudgetRule::MinFeatures(m) => match cumulative.iter().position(|&n| n >= m) {
            Some(p) => (p + 1, false),
            None => (all, true),
        },
        BudgetRule::MaxFeatures(cap) => {
            let k = cumulative.iter().take_while(|&&n| n <= cap).count();
            (k, k == 0 && all > 0)
        }
    };
    if unreachable {
        log::warn!("budget {rule:?} cannot be met; taking {budget} of {all} nonempty groups");
    }

    let selected: BTreeSet<usize> = order[..budget].iter().flat_map(|&j| groups[j].iter().copied()).collect();
    Ok(SelectionResult {
        group_order: order,
        groups,
        selected: selected.into_iter().collect(),
        gate_means: gate_means.to_vec(),
        budget,
        budget_unreachable: unreachable,
    })
}

/// Index of the first local maximum of a prefix-score sequence (the last
/// index if the sequence never turns down).
pub fn first_local_maximum(scores: &[f64]) -> Option<usize> {
    if scores.is_empty() {
        return None;
    }
    (0..scores.len())
        .find(|&i| i + 1 == scores.len() || scores[i] > scores[i + 1])
}

/// Label-guided budget: clustering accuracy of every ranked prefix and the
/// prefix length at its first local maximum.
pub fn accuracy_guided_budget(
    x: &DMatrix<f64>,
    selection: &SelectionResult,
    truth: &[usize],
    n_clusters: usize,
    seeds: &[u64],
) -> Result<(usize, Vec<f64>)> {
    let mut scores = Vec::with_capacity(selection.group_order.len());
    let mut columns = Vec::new();
    for &g in &selection.group_order {
        columns.extend(selection.groups[g].iter().copied());
        columns.sort_unstable();
        let s = eval::clustering_scores(x, &columns, truth, n_clusters, seeds)?;
        scores.push(s.accuracy_mean);
    }
    let k = first_local_maximum(&scores).map_or(0, |i| i + 1);
    Ok((k, scores))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::FeatureGraph;
    use proptest::prelude::*;

    /// Normalized Laplacian of a graph with `blocks` cliques of `size` nodes
    /// and weak links between consecutive cliques.
    fn planted(blocks: usize, size: usize, cross: f64) -> DMatrix<f64> {
        let d = blocks * size;
        let w = DMatrix::from_fn(d, d, |i, j| {
            if i == j {
                0.0
            } else if i / size == j / size {
                1.0
            } else {
                cross
            }
        });
        let g = graph::affinity_from_weights(w).unwrap();
        graph::graph_operators(&g).unwrap().l_sym
    }

    #[test]
    fn disconnected_blocks_have_zero_distortion() {
        let l = planted(4, 5, 0.0);
        assert!(distortion_score(&l, 4, 0).unwrap() < 1e-6);
        for wrong in [2, 3, 5, 6] {
            assert!(distortion_score(&l, wrong, 0).unwrap() > distortion_score(&l, 4, 0).unwrap());
        }
    }

    #[test]
    fn full_dimension_is_exact() {
        // C = d: the embedding is orthogonal, so the Procrustes fit is perfect
        let w = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.2, 1.0, 0.0, 0.5, 0.2, 0.5, 0.0]);
        let l = graph::graph_operators(&graph::affinity_from_weights(w).unwrap()).unwrap().l_sym;
        assert!(distortion_score(&l, 3, 1).unwrap() < 1e-20);
        assert!(distortion_score(&l, 4, 1).is_err());
        assert!(distortion_score(&l, 1, 1).is_err());
    }

    #[test]
    fn choose_c_finds_planted_blocks() {
        let l = planted(4, 5, 1e-3);
        let choice = choose_c(&l, 8, 0).unwrap();
        assert_eq!(choice.chosen, 4);
        assert_eq!(choice.curve.len(), 7);
        assert!(choice.curve.iter().all(|p| p.score >= 0.0));
        assert_eq!(choose_c(&l, 3, 0).unwrap().curve.len(), 2);
        assert!(choose_c(&l, 2, 0).is_err());
        let seq = choose_c_with(Exec::Sequential, &l, 8, 0).unwrap();
        assert_eq!(seq, choice);
    }

    #[test]
    fn uniform_graph_does_not_crash() {
        let d = 8;
        let w = DMatrix::from_fn(d, d, |i, j| if i == j { 0.0 } else { 1.0 });
        let l = graph::graph_operators(&graph::affinity_from_weights(w).unwrap()).unwrap().l_sym;
        let choice = choose_c(&l, 6, 0).unwrap();
        assert_eq!(choice.curve.len(), 5);
    }

    #[test]
    fn distortion_on_data_graph_is_nonnegative() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = DMatrix::from_fn(40, 10, |_, _| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v
        });
        let fg = FeatureGraph::from_data(&x, 7).unwrap();
        for c in 2..=6 {
            assert!(distortion_score(&fg.l_feat, c, 3).unwrap() >= 0.0);
        }
    }

    fn logits_for(labels: &[usize], c: usize) -> DMatrix<f64> {
        grouping::init_logits(labels, c, 0.7).unwrap()
    }

    #[test]
    fn budget_rules() {
        // groups: 0 -> {0,1,2}, 1 -> {3,4}, 2 -> {5}, 3 -> {} ; means favour 1, 0, 2
        let labels = [0, 0, 0, 1, 1, 2];
        let logits = logits_for(&labels, 4);
        let means = [0.5, 0.9, 0.1, 1.0];
        let r = rank_and_select(&logits, &means, BudgetRule::Groups(1)).unwrap();
        assert_eq!(r.group_order, vec![1, 0, 2]);
        assert_eq!(r.selected, vec![3, 4]);

        let r = rank_and_select(&logits, &means, BudgetRule::MinFeatures(3)).unwrap();
        assert_eq!(r.selected, vec![0, 1, 2, 3, 4]);
        assert_eq!(r.budget, 2);

        let r = rank_and_select(&logits, &means, BudgetRule::MaxFeatures(4)).unwrap();
        assert_eq!(r.selected, vec![3, 4]);
        let r = rank_and_select(&logits, &means, BudgetRule::MaxFeatures(1)).unwrap();
        assert!(r.selected.is_empty() && r.budget_unreachable);

        let r = rank_and_select(&logits, &means, BudgetRule::MinFeatures(50)).unwrap();
        assert!(r.budget_unreachable);
        assert_eq!(r.selected, (0..6).collect::<Vec<_>>());

        let r = rank_and_select(&logits, &means, BudgetRule::Groups(4)).unwrap();
        assert_eq!(r.selected.len(), 6);
        assert!(r.budget_unreachable);
        let r = rank_and_select(&logits, &means, BudgetRule::Groups(3)).unwrap();
        assert!(!r.budget_unreachable && r.selected.len() == 6);
        assert!(rank_and_select(&logits, &means[..3], BudgetRule::Groups(1)).is_err());
    }

    #[test]
    fn ties_keep_index_order() {
        let logits = logits_for(&[0, 1, 2, 0, 1, 2], 3);
        let r = rank_and_select(&logits, &[0.4, 0.4, 0.4], BudgetRule::Groups(2)).unwrap();
        assert_eq!(r.group_order, vec![0, 1, 2]);
        assert_eq!(r.selected, vec![0, 1, 3, 4]);
    }

    #[test]
    fn selection_json_has_contract_fields() {
        let logits = logits_for(&[0, 1, 1], 2);
        let r = rank_and_select(&logits, &[0.2, 0.3], BudgetRule::Groups(1)).unwrap();
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        for key in ["group_order", "groups", "selected", "gate_means", "budget"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        let back: SelectionResult = serde_json::from_value(v).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn first_local_maximum_cases() {
        assert_eq!(first_local_maximum(&[]), None);
        assert_eq!(first_local_maximum(&[1.0, 3.0, 2.0, 5.0]), Some(1));
        assert_eq!(first_local_maximum(&[1.0, 2.0, 3.0]), Some(2));
        assert_eq!(first_local_maximum(&[4.0, 2.0]), Some(0));
    }

    proptest! {
        #[test]
        fn prefixes_are_nested(labels in proptest::collection::vec(0usize..5, 6..30),
                               means in proptest::collection::vec(-1.0f64..1.5, 5)) {
            let logits = logits_for(&labels, 5);
            let mut prev: BTreeSet<usize> = BTreeSet::new();
            for k in 0..=5 {
                let r = rank_and_select(&logits, &means, BudgetRule::Groups(k)).unwrap();
                let cur: BTreeSet<usize> = r.selected.iter().copied().collect();
                prop_assert!(prev.is_subset(&cur));
                let union: BTreeSet<usize> = r.selected_groups().iter().flat_map(|&g| r.groups[g].clone()).collect();
                prop_assert_eq!(&union, &cur);
                prop_assert!(r.selected.windows(2).all(|w| w[0] < w[1]));
                prop_assert!(r.selected.iter().all(|&i| i < labels.len()));
                prev = cur;
            }
        }
    }
}
