use criterion::{criterion_group, criterion_main, Criterion};
use diffad::pipeline::{make_windows, LabeledSeries, WindowSet};
use diffad::train::{Detector, ModelConfig, ModelKind};

const DIMS: usize = 5;
const WINDOW: usize = 100;

fn windows(count: usize) -> WindowSet {
    let len = count * WINDOW;
    let values = (0..DIMS * len).map(|i| ((i % 37) as f64 / 37.0).sin()).collect();
    let s = LabeledSeries::new(DIMS, values, vec![false; len]).unwrap();
    make_windows(&s, WINDOW).unwrap()
}

fn models(c: &mut Criterion) {
    let ws = windows(8);
    let mut g = c.benchmark_group("score 8 windows");
    g.sample_size(10);
    for (kind, m) in [(ModelKind::Ae, 0), (ModelKind::Diffusion, 10), (ModelKind::DiffusionAe, 10)] {
        let mut cfg = ModelConfig::new(kind);
        cfg.diffusion.unet.base_channels = 16;
        let det = Detector::build(&cfg, DIMS, WINDOW).unwrap();
        let params = det.init_params(0);
        g.bench_function(kind.name(), |b| b.iter(|| det.score_windows(&params, &ws, m, 0, 8).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, models);
criterion_main!(benches);
