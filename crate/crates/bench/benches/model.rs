use criterion::{criterion_group, criterion_main, Criterion};
use great_bench::{cloud, heatmaps, pixels, record};
use great_core::loss::LossConfig;
use great_core::model::{GreatModel, ModelConfig, ModelInput};
use std::hint::black_box;

fn model(c: &mut Criterion) {
    let mut group = c.benchmark_group("model");
    group.sample_size(10);
    for channels in [32, 128] {
        let cfg = ModelConfig::with_channels(channels);
        let (model, store) = GreatModel::new(&cfg, 0).unwrap();
        let geometry = model.prepare_points(&cloud(1, 2048)).unwrap();
        let px = pixels(2, cfg.image_size);
        let tokens = model.prepare_knowledge(&record()).unwrap();
        let input = ModelInput {
            pixels: &px,
            geometry: &geometry,
            knowledge: &tokens,
        };
        let (_, label) = heatmaps(3, 2048);
        group.bench_function(format!("predict C={channels}"), |b| {
            b.iter(|| model.predict(&store, black_box(input)).unwrap())
        });
        group.bench_function(format!("loss+grads C={channels}"), |b| {
            b.iter(|| model.loss_and_grads(&store, black_box(input), &label, &LossConfig::default()).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, model);
criterion_main!(benches);
