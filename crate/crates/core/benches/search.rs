use compexp::search::{explain_all, explain_neuron, SearchConfig};
use compexp::synth::{generate, SynthSpec};
use compexp::with_jobs;
use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

fn dataset() -> compexp::synth::SynthDataset {
    generate(&SynthSpec {
        units: 200_000,
        primitives: 50,
        neurons: 8,
        noise: 0.02,
        seed: 3,
        ..SynthSpec::default()
    })
    .unwrap()
}

fn single_neuron(c: &mut Criterion) {
    let data = dataset();
    let neurons = data.neuron_masks();
    let cfg = SearchConfig {
        max_length: 5,
        ..SearchConfig::default()
    };
    let mut group = c.benchmark_group("explain_neuron");
    group.sample_size(10);
    for (name, jobs) in [("sequential", Some(1)), ("parallel", None)] {
        group.bench_function(name, |b| {
            b.iter(|| with_jobs(jobs, || black_box(explain_neuron(&neurons[0], &data.store, &cfg).unwrap())).unwrap())
        });
    }
    group.finish();
}

fn sweep(c: &mut Criterion) {
    let data = dataset();
    let neurons = data.neuron_masks();
    let cfg = SearchConfig {
        max_length: 3,
        ..SearchConfig::default()
    };
    let mut group = c.benchmark_group("explain_all");
    group.sample_size(10);
    for (name, jobs) in [("sequential", Some(1)), ("parallel", None)] {
        group.bench_function(name, |b| {
            b.iter(|| with_jobs(jobs, || black_box(explain_all(&neurons, &data.store, &cfg).unwrap())).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, single_neuron, sweep);
criterion_main!(benches);
