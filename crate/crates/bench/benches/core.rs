use std::hint::black_box;

use cpad_core::autodiff::{Tape, Tensor};
use cpad_core::image::batch_tensor;
use cpad_core::metrics::{psnr, ssim};
use cpad_core::net::{Cond, Mode};
use cpad_core::noise::procedural_scene;
use cpad_core::{encode, CameraParams, CpadNet, ModelConfig, ParamRanges};
use criterion::{criterion_group, criterion_main, Criterion};

fn bench_encode(c: &mut Criterion) {
    let ranges = ParamRanges::default();
    let p = CameraParams::with_f_number(800.0, 60.0, 2.8);
    c.bench_function("encode", |b| b.iter(|| encode(black_box(&p), &ranges, None).unwrap()));
}

fn bench_metrics(c: &mut Criterion) {
    let a = procedural_scene(128, 1);
    let b = procedural_scene(128, 2);
    c.bench_function("ssim 128x128", |bn| {
        bn.iter(|| ssim(black_box(&a), black_box(&b)).unwrap())
    });
    c.bench_function("psnr 128x128", |bn| {
        bn.iter(|| psnr(black_box(&a), black_box(&b)).unwrap())
    });
}

fn bench_net(c: &mut Criterion) {
    let mut net = CpadNet::<f32>::new(ModelConfig::desk(), 0).unwrap();
    net.perturb(0.05, 1);
    let imgs: Vec<_> = (0..8).map(|i| procedural_scene(32, i)).collect();
    let x: Tensor<f32> = batch_tensor(&imgs.iter().collect::<Vec<_>>()).unwrap();
    let cams = vec![CameraParams::with_f_number(1600.0, 60.0, 2.0); 8];

    let mut g = c.benchmark_group("desk net, batch 8 at 32x32");
    g.sample_size(20);
    g.bench_function("forward", |b| {
        b.iter(|| net.denoise(black_box(&x), Some(&cams)).unwrap())
    });
    g.bench_function("forward+backward", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let pv = net.register(&mut tape, true);
            let xv = tape.constant(x.clone());
            let (v, devices) = net.condition_batch(&cams).unwrap();
            let vector = tape.constant(v);
            let cond = Cond {
                vector,
                devices: &devices,
            };
            let out = net.forward(&mut tape, &pv, xv, Some(cond), Mode::train(7)).unwrap();
            let loss = tape.l1_loss(out, xv).unwrap();
            tape.backward(loss).unwrap()
        })
    });
    g.finish();
}

criterion_group!(benches, bench_encode, bench_metrics, bench_net);
criterion_main!(benches);
