use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use kcan::kagcn::build_attention_cache;
use kcan::model::{make_samples, target_loss_batch, BatchContext, KcanModel};
use kcan::synth::{generate, SynthConfig};
use kcan::trainer::{eval_options, init_store};
use kcan::{evaluate, Dataset, ExecPolicy, TrainConfig};

const POLICIES: [(&str, ExecPolicy); 2] = [
    ("sequential", ExecPolicy::Sequential),
    ("parallel", ExecPolicy::Parallel),
];

fn setup() -> (Dataset, TrainConfig) {
    let data = generate(&SynthConfig::default())
        .and_then(|d| d.dataset(0))
        .expect("synthetic dataset");
    (data, TrainConfig::default())
}

fn policies(c: &mut Criterion) {
    let (data, cfg) = setup();
    let g = &data.graph;
    let store = init_store(&cfg, g).expect("store");
    let cache = build_attention_cache(g, &store, 0, ExecPolicy::Sequential);
    let samples = make_samples(g, &g.interactions()[..cfg.target_batch], cfg.seed, 0).expect("samples");
    let ctx = BatchContext::from_config(&cfg, 0);

    let mut group = c.benchmark_group("attention_cache");
    for (name, exec) in POLICIES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| build_attention_cache(g, &store, 0, exec))
        });
    }
    group.finish();

    let mut group = c.benchmark_group("target_batch");
    group.sample_size(10);
    for (name, exec) in POLICIES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| target_loss_batch(&store, g, &cache, &samples, &ctx, exec).expect("batch"))
        });
    }
    group.finish();

    let mut group = c.benchmark_group("evaluate");
    group.sample_size(10);
    let opts = eval_options(&cfg);
    for (name, exec) in POLICIES {
        let model = KcanModel::new(g, store.clone(), cfg.clone(), exec).expect("model");
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| evaluate(&model, g, &data.test_edges, &data.seen, &opts, exec).expect("report"))
        });
    }
    group.finish();
}

criterion_group!(benches, policies);
criterion_main!(benches);
