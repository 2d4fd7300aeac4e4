use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dmsconv::autodiff::{Graph, Segments};
use dmsconv::dynamic::DkConv;
use dmsconv::model::{ModelConfig, Variant};
use dmsconv::nn::{Ctx, Init, Mode, ParamStore};
use dmsconv::training::{train_step, AamHead, Batch, Sgd};
use dmsconv::Model;
use dmsconv_bench::signal;

const FRAMES: usize = 400;

fn conv1d(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv1d");
    let x = signal(64, FRAMES, 1);
    let w = signal(64, 64 * 3, 2).reshaped(vec![64, 64, 3]).unwrap();
    for dilation in [1, 2] {
        group.bench_with_input(BenchmarkId::new("forward", dilation), &dilation, |b, &d| {
            b.iter(|| {
                let mut g = Graph::new();
                let xv = g.constant(x.clone());
                let wv = g.constant(w.clone());
                g.conv1d(xv, wv, d).unwrap()
            })
        });
        group.bench_with_input(
            BenchmarkId::new("backward", dilation),
            &dilation,
            |b, &d| {
                b.iter(|| {
                    let mut g = Graph::new();
                    let xv = g.param(x.clone());
                    let wv = g.param(w.clone());
                    let y = g.conv1d(xv, wv, d).unwrap();
                    let loss = g.sum(y).unwrap();
                    g.backward(loss).unwrap();
                    g.len()
                })
            },
        );
    }
    group.finish();
}

fn dk_conv(c: &mut Criterion) {
    let mut store = ParamStore::new();
    let mut rng = dmsconv::rng::stream(0, "bench", 0);
    let dk = DkConv::new(&mut Init::new(&mut store, &mut rng), "dk", "", 64, 64, 3, 4).unwrap();
    let x = signal(64, FRAMES, 3);
    let segs = Segments::new(&[FRAMES / 2, FRAMES / 2]).unwrap();
    let run = |backward: bool| {
        let mut g = Graph::new();
        let vars = store.bind(&mut g);
        let mut cx = Ctx::new(&mut g, vars, Mode::Train);
        let xv = cx.graph.constant(x.clone());
        let y = dk.forward(&mut cx, xv, &segs).unwrap();
        if backward {
            let loss = g.sum(y).unwrap();
            g.backward(loss).unwrap();
        }
        g.len()
    };
    let mut group = c.benchmark_group("dk_conv");
    group.bench_function("forward", |b| b.iter(|| run(false)));
    group.bench_function("forward_backward", |b| b.iter(|| run(true)));
    group.finish();
}

fn model(c: &mut Criterion) {
    let mut group = c.benchmark_group("model");
    group.sample_size(10);
    for variant in Variant::ALL {
        let cfg = ModelConfig::desk(variant, 24, 6);
        let mut model = Model::build(&cfg, 0).unwrap();
        let utterance = signal(24, FRAMES, 4);
        group.bench_function(BenchmarkId::new("score_utterance", variant), |b| {
            b.iter(|| model.score_utterance(&utterance).unwrap())
        });
        let batch = Batch {
            features: signal(24, 6 * 200, 5),
            segments: Segments::new(&[200; 6]).unwrap(),
            labels: (0..6).collect(),
        };
        let head = AamHead {
            margin: 0.2,
            scale: 30.0,
        };
        let sgd = Sgd { lr: 1e-6, l2: 0.0 };
        group.bench_function(BenchmarkId::new("train_step", variant), |b| {
            b.iter(|| train_step(&mut model, &batch, &head, &sgd).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, conv1d, dk_conv, model);
criterion_main!(benches);
