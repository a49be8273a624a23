use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use eflow_bench::{LayerInstance, Recipe, SweepSpec, SweepVariant, ThroughputSpec};

fn bench_layers(c: &mut Criterion) {
    let spec = SweepSpec::default();
    let mut group = c.benchmark_group("attention_forward");
    group.sample_size(10);
    for &n in &[256usize, 1024] {
        for variant in SweepVariant::ALL {
            let layer = LayerInstance::new(variant, n, &spec).unwrap();
            group.bench_with_input(BenchmarkId::new(variant.name(), n), &layer, |b, layer| {
                b.iter(|| std::hint::black_box(layer.run().unwrap()))
            });
        }
    }
    group.finish();
}

fn bench_steps(c: &mut Criterion) {
    let spec = ThroughputSpec { iters: 1, repeats: 3, warmup: 0, ..ThroughputSpec::default() };
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    for recipe in [Recipe::Fm, Recipe::SfmMvaGlga, Recipe::SfmMvaGlgaPdgDrop75] {
        group.bench_function(recipe.name(), |b| b.iter(|| eflow_bench::measure_recipe(recipe, &spec).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, bench_layers, bench_steps);
criterion_main!(benches);
