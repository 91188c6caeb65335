//! Sequential vs rayon throughput for the two hot loops: one training step's
//! objective (forward + backward over a batch) and k-means over embeddings.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array2;
use pici::augment::Image;
use pici::crosslevel::kmeans_exec;
use pici::masking::{patchify, sample_mask};
use pici::network::{ModelParams, NetworkConfig};
use pici::par::Exec;
use pici::seed;
use pici::trainer::{batch_objective, BatchInput, ObjectiveSettings, Stage, ViewInput};
use rand::Rng;
use rand_distr::StandardNormal;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn view(rng: &mut impl Rng, cfg: &NetworkConfig) -> ViewInput {
    let size = cfg.image_size;
    let px = (0..size * size * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
    let image = Image::new(size, size, 3, px).unwrap();
    ViewInput {
        seq: patchify(&image, cfg.patch_size).unwrap(),
        plan: sample_mask(cfg.n_patches(), 0.5, rng.gen()).unwrap(),
    }
}

fn objective(c: &mut Criterion) {
    let cfg = NetworkConfig::tiny();
    let params = ModelParams::init(&cfg, 1).unwrap();
    let mut rng = seed::rng(2);
    let batch_size = 16;
    let batch = BatchInput {
        a: (0..batch_size).map(|_| view(&mut rng, &cfg)).collect(),
        b: (0..batch_size).map(|_| view(&mut rng, &cfg)).collect(),
        targets: None,
    };
    let settings = ObjectiveSettings::default();
    let mut group = c.benchmark_group("train_step_objective");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::new(name, batch_size), |b| {
            b.iter(|| batch_objective(&params, &batch, Stage::Train, &settings, exec, true).unwrap().total)
        });
    }
    group.finish();
}

fn kmeans(c: &mut Criterion) {
    let mut rng = seed::rng(3);
    let z = Array2::from_shape_fn((4000, 128), |_| rng.sample::<f64, _>(StandardNormal));
    let mut group = c.benchmark_group("kmeans");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::new(name, z.nrows()), |b| {
            b.iter(|| kmeans_exec(&z, 10, 0, 20, 0.0, exec).unwrap().objective)
        });
    }
    group.finish();
}

criterion_group!(benches, objective, kmeans);
criterion_main!(benches);
