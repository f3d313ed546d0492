//! Sequential vs rayon execution for the kernels that fan out.
//!
//! `cargo bench -p groupfs-core --bench parallel`

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use groupfs::data::{synthetic, zscore, SyntheticSpec};
use groupfs::losses::FeatureGraph;
use groupfs::optim::train::train_many;
use groupfs::{graph, select, Exec, LossConfig, TrainConfig};

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn gaussian(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(n, d, |_, _| StandardNormal.sample(&mut rng))
}

fn pairwise(c: &mut Criterion) {
    let mut group = c.benchmark_group("pairwise_sq_dists");
    for n in [250, 1000] {
        let x = gaussian(n, 20, 0);
        for (name, exec) in MODES {
            group.bench_with_input(BenchmarkId::new(name, n), &x, |b, x| b.iter(|| graph::pairwise_sq_dists_with(exec, x)));
        }
    }
    group.finish();
}

fn seeds(c: &mut Criterion) {
    let ds = synthetic(&SyntheticSpec { n: 300, d: 20, rho: 0.95, noise_std: 0.05, seed: 0 }).unwrap();
    let x = zscore(&ds.x).0;
    let configs: Vec<TrainConfig> = (0..4)
        .map(|seed| TrainConfig { groups: 6, epochs: 20, loss: LossConfig::new(1.0, 5.0), seed, ..TrainConfig::default() })
        .collect();
    let mut group = c.benchmark_group("train_many_4_seeds");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(name, |b| b.iter(|| train_many(&x, &configs, exec)));
    }
    group.finish();
}

fn group_count(c: &mut Criterion) {
    let x = gaussian(400, 40, 1);
    let l_feat = FeatureGraph::from_data(&x, 7).unwrap().l_feat;
    let mut group = c.benchmark_group("choose_c_40_features");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(name, |b| b.iter(|| select::choose_c_with(exec, &l_feat, 10, 0).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, pairwise, seeds, group_count);
criterion_main!(benches);
