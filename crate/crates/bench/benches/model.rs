use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use flare_bench::visit;
use flare_core::cohort::VisitFeatures;
use flare_core::model::{Model, ModelConfig, ModelKind};
use flare_core::Stage;

fn forward_backward(c: &mut Criterion) {
    let cfg = ModelConfig::default();
    let visits: Vec<VisitFeatures> = (0..4).map(|k| visit(&cfg, k)).collect();
    let full: Vec<Option<&VisitFeatures>> = visits.iter().map(Some).collect();
    let gappy = vec![Some(&visits[0]), None, Some(&visits[2]), None];

    for kind in [ModelKind::Flare, ModelKind::Concat] {
        let mut model = Model::new(kind, &cfg, 0).unwrap();
        let name = format!("{kind:?}").to_lowercase();
        c.bench_function(&format!("{name}/train_sample T=4 tau=1"), |b| {
            b.iter(|| model.accumulate_sample(black_box(&full), 1, Stage::Mci).unwrap())
        });
        c.bench_function(&format!("{name}/predict T=2 tau=3"), |b| {
            b.iter(|| model.predict(black_box(&full[..2]), 3).unwrap())
        });
    }
    let mut model = Model::new(ModelKind::Flare, &cfg, 0).unwrap();
    c.bench_function("flare/train_sample T=4 tau=1 two imputed", |b| {
        b.iter(|| model.accumulate_sample(black_box(&gappy), 1, Stage::Ad).unwrap())
    });
}

criterion_group!(benches, forward_backward);
criterion_main!(benches);
