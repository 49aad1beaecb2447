use std::hint::black_box;

use crashseq_bench::{sequences, texture};
use crashseq_core::featx::{normalize, ConvExtractor, PreprocConfig};
use crashseq_core::model::{backward, predict_logits, ModelConfig, ModelParams};
use crashseq_core::optflow::{grayscale, horn_schunck, FlowParams};
use crashseq_core::train::pad_batch;
use criterion::{criterion_group, criterion_main, Criterion};

fn flow(c: &mut Criterion) {
    let a = grayscale(&texture(224, 0.0));
    let b = grayscale(&texture(224, 3.0));
    let params = FlowParams::default();
    let mut g = c.benchmark_group("horn_schunck");
    g.sample_size(10);
    g.bench_function("224x224 default", |bench| {
        bench.iter(|| horn_schunck(black_box(&a), black_box(&b), &params).unwrap())
    });
    g.finish();
}

fn extractor(c: &mut Criterion) {
    let ex = ConvExtractor::new(7);
    let frame = normalize(&texture(224, 0.0), &PreprocConfig::default());
    let mut g = c.benchmark_group("extractor");
    g.sample_size(20);
    g.bench_function("one 224x224 frame", |bench| bench.iter(|| ex.extract_frame(black_box(&frame)).unwrap()));
    g.finish();
}

fn model(c: &mut Criterion) {
    let cfg = ModelConfig { dropout_rate: 0.0, ..ModelConfig::new(64, 64, 2, 4) };
    let params = ModelParams::<f32>::init(&cfg, 3).unwrap();
    let seqs = sequences(16, 64, 5, 12, 1);
    let refs: Vec<_> = seqs.iter().collect();
    let batch = pad_batch(&refs).unwrap();
    let labels: Vec<u8> = (0..16).map(|i| (i % 2) as u8).collect();
    let mut g = c.benchmark_group("model");
    g.bench_function("forward batch 16", |bench| {
        bench.iter(|| predict_logits(black_box(&batch), &params, &cfg).unwrap())
    });
    g.bench_function("forward+backward batch 16", |bench| {
        bench.iter(|| backward(black_box(&batch), &labels, &params, &cfg).unwrap())
    });
    g.finish();
}

criterion_group!(benches, flow, extractor, model);
criterion_main!(benches);
