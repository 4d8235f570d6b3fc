use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use zoomnet_bench::{rng, scored_boxes};
use zoomnet_core::boxes::iou;
use zoomnet_core::graph::{Graph, NormMode};
use zoomnet_core::inference::nms;
use zoomnet_core::kernels::conv2d_forward;
use zoomnet_core::layers::Ctx;
use zoomnet_core::network::{ZipConfig, ZipNet};
use zoomnet_core::{ParamStore, Tensor};

fn conv(c: &mut Criterion) {
    let mut r = rng(0);
    let x = Tensor::<f32>::randn([1, 32, 64, 64], 1.0, &mut r);
    let k = Tensor::<f32>::randn([32, 32, 3, 3], 0.1, &mut r);
    let b = Tensor::<f32>::zeros([1, 32, 1, 1]);
    c.bench_function("conv3x3 32->32 64x64", |bn| bn.iter(|| conv2d_forward(black_box(&x), &k, &b, 1, 1).unwrap()));
}

fn boxes(c: &mut Criterion) {
    let bx = scored_boxes(2000, 1);
    c.bench_function("nms 2000 boxes", |bn| bn.iter(|| nms(black_box(&bx), 0.7, 1000)));
    c.bench_function("iou 2000 pairs", |bn| {
        bn.iter(|| bx.windows(2).map(|w| iou(&w[0], &w[1])).sum::<f64>())
    });
}

fn forward(c: &mut Criterion) {
    let cfg = ZipConfig { stem_channels: 8, level_channels: [16, 32, 64], ..ZipConfig::default() };
    let mut store = ParamStore::<f32>::new();
    let net = ZipNet::new(cfg, &mut store, &mut rng(2)).unwrap();
    let img = Tensor::<f32>::randn([1, 3, 256, 256], 1.0, &mut rng(3));
    c.bench_function("zipnet forward 256x256", |bn| {
        bn.iter(|| {
            let mut g = Graph::new();
            let mut ctx = Ctx::new(&mut g, &store, NormMode::Eval);
            let x = ctx.graph.input(img.clone());
            net.forward_backbone(&mut ctx, x).unwrap();
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = conv, boxes, forward
}
criterion_main!(benches);
