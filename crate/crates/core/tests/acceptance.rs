//! Acceptance criteria. Each test prints one line:
//!
//! ```text
//! ACCEPTANCE <id> PASS|FAIL|SKIP <name>: <details>
//! ```
//!
//! Criteria listed in `KNOWN_FAILURES` print FAIL without failing the run;
//! any other failure, or a panic inside a criterion, exits nonzero. Pass
//! criterion numbers as arguments to run a subset.

use std::collections::BTreeSet;
use std::sync::{Mutex, OnceLock};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use groupfs::data::{self, synthetic, zscore, Dataset, SyntheticSpec};
use groupfs::eval::{self, EVAL_SEEDS};
use groupfs::gates::{self, GateState};
use groupfs::graph;
use groupfs::grouping;
use groupfs::losses::{self, FeatureGraph};
use groupfs::optim::gradcheck::{gradcheck, GradcheckConfig};
use groupfs::optim::train::train_many;
use groupfs::select::{self, rank_and_select, BudgetRule};
use groupfs::{Exec, LossConfig, TrainConfig, TrainOutcome};

/// Criteria expected to fail, with a one-line reason.
const KNOWN_FAILURES: &[(u32, &str)] =
    &[(1, "at lambda2 6.2 every gate closes on all seeds; the sparse regime sits near lambda2 5.1-5.15 here")];

const SEEDS: u64 = 10;
const INFORMATIVE: [usize; 10] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9];

fn report(id: u32, name: &str, passed: bool, details: String) {
    let known = KNOWN_FAILURES.iter().find(|(k, _)| *k == id);
    let status = if passed { "PASS" } else { "FAIL" };
    let note = match (passed, known) {
        (false, Some((_, why))) => format!(" [known failure: {why}]"),
        (true, Some(_)) => " [listed as a known failure but passing]".to_string(),
        _ => String::new(),
    };
    println!("ACCEPTANCE {id} {status} {name}: {details}{note}");
    if !passed && known.is_none() {
        UNEXPECTED.lock().unwrap().push(id);
    }
}

static UNEXPECTED: Mutex<Vec<u32>> = Mutex::new(Vec::new());

fn skip(id: u32, name: &str, why: &str) {
    println!("ACCEPTANCE {id} SKIP {name}: {why}");
}

/// Two-moons benchmark at d = 20, data seed `seed`, z-scored.
fn moons(seed: u64, rho: f64, noise_std: f64) -> (DMatrix<f64>, Dataset) {
    let ds = synthetic(&SyntheticSpec { n: 1000, d: 20, rho, noise_std, seed }).unwrap();
    (zscore(&ds.x).0, ds)
}

fn moons_config(groups: usize, lambda2: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        groups,
        epochs: 500,
        batch_size: 100,
        loss: LossConfig::new(1.0, lambda2),
        seed,
        ..TrainConfig::default()
    }
}

/// One training run per seed; data and training share the seed.
fn seed_runs(rho: f64, noise_std: f64, groups: usize, lambda2: f64) -> Vec<(Dataset, TrainOutcome)> {
    let data: Vec<(DMatrix<f64>, Dataset)> = (0..SEEDS).map(|s| moons(s, rho, noise_std)).collect();
    Exec::default()
        .map(SEEDS as usize, |s| {
            let (x, ds) = &data[s];
            let cfg = moons_config(groups, lambda2, s as u64);
            let out = train_many(x, &[cfg], Exec::Sequential).remove(0).unwrap();
            (ds.clone(), out)
        })
}

fn mean_best_loss(runs: &[(Dataset, TrainOutcome)]) -> f64 {
    runs.iter().map(|(_, o)| o.model.best_loss).sum::<f64>() / runs.len() as f64
}

fn open_gates(out: &TrainOutcome) -> usize {
    out.model.gate_state().mean_gates().iter().filter(|z| **z > 0.0).count()
}

/// Mean best loss and mean number of open gates over seeds.
fn summarize(runs: &[(Dataset, TrainOutcome)]) -> (f64, f64) {
    let open = runs.iter().map(|(_, o)| open_gates(o) as f64).sum::<f64>() / runs.len() as f64;
    (mean_best_loss(runs), open)
}

struct Recovery {
    tpr: f64,
    fdr: f64,
    rg: f64,
    open: usize,
}

fn recovery(ds: &Dataset, out: &TrainOutcome) -> Recovery {
    let m = &out.model;
    let means: Vec<f64> = m.params.mu.iter().copied().collect();
    let sel = rank_and_select(&m.params.logits, &means, BudgetRule::MinFeatures(10)).unwrap();
    let (tpr, fdr) = eval::tpr_fdr(&sel.selected, &INFORMATIVE, ds.x.ncols()).unwrap();
    let rg = eval::rg_sim(ds.true_groups.as_ref().unwrap(), &m.hard_groups()).unwrap();
    Recovery { tpr, fdr, rg, open: open_gates(out) }
}

fn c01_two_moons_recovery() {
    let runs = seed_runs(0.95, 0.05, 12, 6.2);
    let rec: Vec<Recovery> = runs.iter().map(|(ds, o)| recovery(ds, o)).collect();
    let best = (0..runs.len())
        .min_by(|&a, &b| runs[a].1.model.best_loss.total_cmp(&runs[b].1.model.best_loss))
        .unwrap();
    let b = &rec[best];
    let perfect = rec.iter().filter(|r| r.tpr == 1.0 && r.fdr == 0.0).count();
    let passed = b.rg == 1.0 && b.tpr == 1.0 && b.fdr == 0.0 && perfect >= 8;
    let per_seed: Vec<String> =
        rec.iter().map(|r| format!("{:.2}/{:.2}/{:.2}/{}", r.rg, r.tpr, r.fdr, r.open)).collect();
    report(
        1,
        "two-moons recovery (rho 0.95, C 12, lambda2 6.2)",
        passed,
        format!(
            "best-loss seed {best}: RG_sim {:.3} TPR {:.3} FDR {:.3}; seeds with TPR 1 and FDR 0: {perfect}/10 \
             (need 8); per seed RG/TPR/FDR/open gates {per_seed:?}",
            b.rg, b.tpr, b.fdr
        ),
    );
}

/// (loss, open gates) at rho = 0.6 and rho = 1.0, shared by criteria 2 and 3.
fn correlation_losses() -> &'static ((f64, f64), (f64, f64)) {
    static CELL: OnceLock<((f64, f64), (f64, f64))> = OnceLock::new();
    CELL.get_or_init(|| (summarize(&seed_runs(0.6, 0.05, 3, 0.6)), summarize(&seed_runs(1.0, 0.05, 12, 7.0))))
}

fn c02_correlation_trend() {
    let ((low, low_open), (high, high_open)) = *correlation_losses();
    report(
        2,
        "correlation trend",
        high < low,
        format!(
            "mean best loss rho 1.0 = {high:.6} ({high_open:.1} open gates), rho 0.6 = {low:.6} \
             ({low_open:.1} open gates); need rho 1.0 strictly lower"
        ),
    );
}

fn c03_noise_robustness() {
    let settings = [(0.0, 6.3), (0.15, 5.8), (0.30, 5.2), (0.45, 4.7)];
    let summaries: Vec<(f64, f64)> = settings.iter().map(|&(noise, l2)| summarize(&seed_runs(0.95, noise, 12, l2))).collect();
    let means: Vec<f64> = summaries.iter().map(|s| s.0).collect();
    let open: Vec<f64> = summaries.iter().map(|s| s.1).collect();
    let spread = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - means.iter().cloned().fold(f64::INFINITY, f64::min);
    let ((low, _), (high, _)) = *correlation_losses();
    let gap = low - high;
    report(
        3,
        "noise robustness",
        spread < gap,
        format!(
            "mean best loss per noise std {{0, .15, .30, .45}} = {means:.6?} \
             (mean open gates {open:.1?}); spread {spread:.6} vs correlation gap {gap:.6}"
        ),
    );
}

fn c04_under_grouping() {
    let runs = seed_runs(0.95, 0.05, 2, 1.0);
    let rec: Vec<Recovery> = runs.iter().map(|(ds, o)| recovery(ds, o)).collect();
    let hits = rec.iter().filter(|r| r.fdr > 0.0 && r.tpr >= 0.8).count();
    let per_seed: Vec<String> = rec.iter().map(|r| format!("{:.2}/{:.2}", r.tpr, r.fdr)).collect();
    report(
        4,
        "under-grouping failure mode (C 2)",
        hits * 2 > runs.len(),
        format!("seeds with FDR > 0 and TPR >= 0.8: {hits}/10 (need a majority); TPR/FDR per seed {per_seed:?}"),
    );
}

fn c05_gradient_correctness() {
    let stopped = gradcheck(&GradcheckConfig::default()).unwrap();
    let mut cfg = GradcheckConfig::default();
    cfg.loss.propagate_bandwidth_grad = true;
    let propagated = gradcheck(&cfg).unwrap();
    let skipped: usize = stopped.blocks.iter().map(|b| b.skipped).sum();
    report(
        5,
        "gradient correctness (30x12, C 4)",
        stopped.passed && propagated.passed,
        format!(
            "max relative error {:.2e} (bandwidths held), {:.2e} (bandwidths differentiated); tolerance 1e-4; \
             {skipped} clip-boundary coordinates skipped",
            stopped.max_rel_error(),
            propagated.max_rel_error()
        ),
    );
}

fn c06_structural_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = [0.0f64; 5];
    let mut gate_ok = true;
    let mut reg_ok = true;
    for _ in 0..100 {
        let n = rng.random_range(10..40);
        let d = rng.random_range(4..16);
        let c = rng.random_range(2..=d.min(8));
        let k = rng.random_range(1..n.min(9));
        let temperature = [10.0, 1.0, 0.1, 0.01][rng.random_range(0..4)];
        let x = DMatrix::from_fn(n, d, |_, _| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v
        });
        let logits = DMatrix::from_fn(d, c, |_, _| rng.random_range(-3.0..3.0));
        let mu = DVector::from_fn(c, |_, _| rng.random_range(-1.5..2.0));
        let q = DMatrix::from_fn(c, c, |_, _| rng.random_range(-1.0..1.0));
        let state = GateState::new(mu, 0.5).unwrap();

        let m = grouping::relaxed_assignment(&logits, &grouping::gumbel_noise(d, c, &mut rng), temperature);
        let row_err = m.row_iter().map(|r| (r.sum() - 1.0).abs()).fold(0.0, f64::max);
        worst[0] = worst[0].max(row_err);
        gate_ok &= m.iter().all(|v| *v >= 0.0);

        let z = gates::sample_gates(&state, &mut rng);
        let zhat = gates::feature_weights(&m, &z).unwrap();
        // zhat is a convex combination of z; allow rounding in the row sums of M
        gate_ok &= z.iter().all(|v| (0.0..=1.0).contains(v));
        gate_ok &= zhat.iter().all(|v| (0.0..=1.0 + 1e-12).contains(v));

        let xt = gates::apply_gates(&x, &zhat).unwrap();
        let ops = graph::graph_operators(&graph::self_tuning_affinity(&xt, k).unwrap()).unwrap();
        let p_err = ops.p.row_iter().map(|r| (r.sum() - 1.0).abs()).fold(0.0, f64::max);
        worst[1] = worst[1].max(p_err);

        let reg = losses::group_sparsity(&m, &state).unwrap();
        reg_ok &= (0.0..=1.0).contains(&reg);

        let f = losses::feature_embedding(&m, &q);
        for col in f.column_iter() {
            if col.norm() > 0.0 {
                worst[2] = worst[2].max(col.mean().abs());
                worst[3] = worst[3].max((col.norm() - 1.0).abs());
            }
        }
    }
    let passed = worst[0] <= 1e-10 && worst[1] <= 1e-8 && worst[2] <= 1e-10 && worst[3] <= 1e-10 && gate_ok && reg_ok;
    report(
        6,
        "structural invariants (100 random configurations)",
        passed,
        format!(
            "max |rowsum(M) - 1| {:.1e}, max |rowsum(P) - 1| {:.1e}, max |mean F col| {:.1e}, \
             max ||F col| - 1| {:.1e}, gates in [0,1] (weights within 1e-12): {gate_ok}, L_reg in [0,1]: {reg_ok}",
            worst[0], worst[1], worst[2], worst[3]
        ),
    );
}

fn c07_group_count_heuristic() {
    // weight-level plant: four 5-node cliques joined by weak links
    let d = 20;
    let w = DMatrix::from_fn(d, d, |i, j| if i == j { 0.0 } else if i / 5 == j / 5 { 1.0 } else { 1e-3 });
    let l_w = graph::graph_operators(&graph::affinity_from_weights(w).unwrap()).unwrap().l_sym;
    // data-level plant: four latent factors, five noisy copies each
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let factors = DMatrix::from_fn(500, 4, |_, _| {
        let v: f64 = StandardNormal.sample(&mut rng);
        v
    });
    let x = DMatrix::from_fn(500, d, |i, j| {
        let e: f64 = StandardNormal.sample(&mut rng);
        factors[(i, j / 5)] + 0.3 * e
    });
    let l_x = FeatureGraph::from_data(&zscore(&x).0, 7).unwrap().l_feat;

    let mut details = Vec::new();
    let mut passed = true;
    for (label, l) in [("weights", &l_w), ("data", &l_x)] {
        let choice = select::choose_c(l, 8, 0).unwrap();
        let e4 = choice.curve.iter().find(|p| p.c == 4).unwrap().score;
        let strict = choice.curve.iter().all(|p| p.c == 4 || e4 < p.score);
        passed &= choice.chosen == 4 && strict;
        let curve: Vec<String> = choice.curve.iter().map(|p| format!("{}:{:.3e}", p.c, p.score)).collect();
        details.push(format!("{label}: chosen {} curve [{}]", choice.chosen, curve.join(" ")));
    }
    report(7, "group-count heuristic (planted 4 blocks, C_max 8)", passed, details.join("; "));
}

fn random_partition(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let k = rng.random_range(1..=n);
    (0..n).map(|_| rng.random_range(0..k)).collect()
}

/// Adjusted Rand index from explicit pair enumeration.
fn ari_pair_oracle(a: &[usize], b: &[usize]) -> f64 {
    let (mut n11, mut n10, mut n01, mut n00) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            match (a[i] == a[j], b[i] == b[j]) {
                (true, true) => n11 += 1,
                (true, false) => n10 += 1,
                (false, true) => n01 += 1,
                (false, false) => n00 += 1,
            }
        }
    }
    let num = 2 * (n11 * n00 - n10 * n01);
    let den = (n11 + n10) * (n10 + n00) + (n11 + n01) * (n01 + n00);
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

fn c08_metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut ari_mismatch = 0;
    for _ in 0..200 {
        let a = random_partition(&mut rng, 8);
        let b = random_partition(&mut rng, 8);
        if eval::ari(&a, &b).unwrap() != ari_pair_oracle(&a, &b) {
            ari_mismatch += 1;
        }
    }
    let mut perm_mismatch = 0;
    let truth = random_partition(&mut rng, 40);
    let pred = random_partition(&mut rng, 40);
    let base = eval::clustering_accuracy(&pred, &truth).unwrap();
    for _ in 0..50 {
        let k = pred.iter().max().unwrap() + 1;
        let mut sigma: Vec<usize> = (0..k).collect();
        sigma.shuffle(&mut rng);
        let relabeled: Vec<usize> = pred.iter().map(|&l| sigma[l]).collect();
        if eval::clustering_accuracy(&relabeled, &truth).unwrap() != base {
            perm_mismatch += 1;
        }
    }
    let truth5 = vec![(0..5).collect::<Vec<_>>(), (5..10).collect()];
    let exact = eval::rg_sim(&truth5, &truth5).unwrap();
    let merged = eval::rg_sim(&truth5, &[(0..10).collect()]).unwrap();
    let truth6 = vec![(0..6).collect::<Vec<_>>(), (6..12).collect()];
    let halves = eval::rg_sim(&truth6, &[vec![0, 1, 2], vec![3, 4, 5], vec![6, 7, 8], vec![9, 10, 11]]).unwrap();
    let rg_ok = exact == 1.0 && merged == 0.5 && halves == 0.25;
    report(
        8,
        "metric oracles",
        ari_mismatch == 0 && perm_mismatch == 0 && rg_ok,
        format!(
            "ARI mismatches {ari_mismatch}/200, accuracy changes under relabeling {perm_mismatch}/50, \
             rg_sim hand cases {exact}/{merged}/{halves}"
        ),
    );
}

fn c09_laplacian_score_sanity() {
    let (x, _) = moons(0, 0.95, 0.05);
    let ops = graph::graph_operators(&graph::self_tuning_affinity(&x, 7).unwrap()).unwrap();
    let scores = graph::laplacian_score(&x, &ops).unwrap();
    let mut order: Vec<usize> = (0..x.ncols()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let top: BTreeSet<usize> = order[..10].iter().copied().collect();
    let expected: BTreeSet<usize> = INFORMATIVE.iter().copied().collect();
    let worst_informative = INFORMATIVE.iter().map(|&i| scores[i]).fold(f64::NEG_INFINITY, f64::max);
    let best_noise = (10..20).map(|i| scores[i]).fold(f64::INFINITY, f64::min);
    report(
        9,
        "Laplacian Score baseline",
        top == expected,
        format!("top-10 by LS {:?}; worst informative {worst_informative:.4} vs best noise {best_noise:.4}", order[..10].to_vec()),
    );
}

fn c10_heart_disease() {
    const NAME: &str = "HeartDisease fixed budget (stretch)";
    let Ok(path) = std::env::var("GROUPFS_HEART_CSV") else {
        skip(10, NAME, "set GROUPFS_HEART_CSV to a 297x13 CSV with a label column to run");
        return;
    };
    let label = std::env::var("GROUPFS_HEART_LABEL").unwrap_or_else(|_| "target".into());
    let ds = data::load_csv(std::path::Path::new(&path), Some(&label)).unwrap();
    let truth = ds.labels.clone().unwrap();
    let k = ds.n_classes().unwrap();
    let x = zscore(&ds.x).0;
    let steps = 45;
    let configs: Vec<TrainConfig> = (0..steps)
        .map(|i| TrainConfig {
            groups: 6,
            epochs: 1000,
            batch_size: 100,
            loss: LossConfig::new(1.0, 1.5 + 0.45 * i as f64 / (steps - 1) as f64),
            ..TrainConfig::default()
        })
        .collect();
    let outcomes: Vec<TrainOutcome> = train_many(&x, &configs, Exec::default()).into_iter().map(Result::unwrap).collect();
    let best = outcomes.iter().min_by(|a, b| a.model.best_loss.total_cmp(&b.model.best_loss)).unwrap();
    let means: Vec<f64> = best.model.params.mu.iter().copied().collect();
    let sel = rank_and_select(&best.model.params.logits, &means, BudgetRule::MinFeatures(10)).unwrap();
    let seeds: Vec<u64> = EVAL_SEEDS.collect();
    let scores = eval::clustering_scores(&x, &sel.selected, &truth, k, &seeds).unwrap();
    report(
        10,
        NAME,
        (scores.accuracy_mean - 83.1).abs() <= 2.0,
        format!(
            "accuracy {:.1} +- {:.1} on {} features (target 83.1 +- 2.0)",
            scores.accuracy_mean,
            scores.accuracy_std,
            sel.selected.len()
        ),
    );
}

type Criterion = (u32, &'static str, fn());

const CRITERIA: &[Criterion] = &[
    (1, "two-moons recovery", c01_two_moons_recovery),
    (2, "correlation trend", c02_correlation_trend),
    (3, "noise robustness", c03_noise_robustness),
    (4, "under-grouping failure mode", c04_under_grouping),
    (5, "gradient correctness", c05_gradient_correctness),
    (6, "structural invariants", c06_structural_invariants),
    (7, "group-count heuristic", c07_group_count_heuristic),
    (8, "metric oracles", c08_metric_oracles),
    (9, "Laplacian Score baseline", c09_laplacian_score_sanity),
    (10, "HeartDisease fixed budget", c10_heart_disease),
];

fn main() -> std::process::ExitCode {
    // cargo forwards harness flags such as --nocapture; numeric arguments select criteria
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    for &(id, name, run) in CRITERIA {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        if let Err(panic) = std::panic::catch_unwind(run) {
            let msg = panic
                .downcast_ref::<String>()
                .map(String::as_str)
                .or_else(|| panic.downcast_ref::<&str>().copied())
                .unwrap_or("panic");
            report(id, name, false, format!("panicked: {msg}"));
        }
    }
    let unexpected = UNEXPECTED.lock().unwrap();
    if unexpected.is_empty() {
        println!("acceptance: no unexpected failures");
        std::process::ExitCode::SUCCESS
    } else {
        println!("acceptance: unexpected failures in criteria {unexpected:?}");
        std::process::ExitCode::FAILURE
    }
}
