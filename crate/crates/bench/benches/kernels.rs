use aiq_bench::{fixture_model, input_batch};
use aiq_core::engine::{dot, forward_with, ForwardOptions};
use aiq_core::quant::{pack_scheme, quantize};
use aiq_core::zoo::{self, StackConfig};
use aiq_core::{BitWidth, QuantScheme, Tensor};
use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

fn conv_network(c: &mut Criterion) {
    let g = fixture_model("mini_resnet");
    let l = g.num_quantizable();
    let x = input_batch(&g, 16);
    let mut group = c.benchmark_group("mini_resnet_forward_b16");
    group.throughput(Throughput::Elements(16));
    for bits in BitWidth::ALL {
        let model = pack_scheme(&g, &QuantScheme::uniform(l, bits)).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(bits.bits()), &model, |b, m| {
            b.iter(|| forward_with(m, black_box(&x), ForwardOptions::default()).unwrap())
        });
    }
    group.finish();
}

fn weight_bound_stack(c: &mut Criterion) {
    let cfg = StackConfig::for_weight_bytes(64 << 20, 0);
    let g = zoo::memory_bound_stack(&cfg).unwrap();
    let x = input_batch(&g, 1);
    let mut group = c.benchmark_group("stack_forward_b1");
    group.sample_size(20);
    for bits in BitWidth::ALL {
        let model = pack_scheme(&g, &QuantScheme::uniform(8, bits)).unwrap();
        group.throughput(Throughput::Bytes(model.weights.iter().map(|w| w.stored_bytes()).sum()));
        group.bench_with_input(BenchmarkId::from_parameter(bits.bits()), &model, |b, m| {
            b.iter(|| forward_with(m, black_box(&x), ForwardOptions::default()).unwrap())
        });
    }
    group.finish();
}

fn primitives(c: &mut Criterion) {
    let n = 4096;
    let a: Vec<f32> = (0..n).map(|i| (i as f32).sin()).collect();
    let w: Vec<f32> = (0..n).map(|i| (i as f32).cos()).collect();
    c.bench_function("dot_4096", |b| b.iter(|| dot(black_box(&w), black_box(&a))));
    let t = Tensor::new(vec![256, 256], (0..65536).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
    for bits in [BitWidth::Int8, BitWidth::Int4] {
        c.bench_function(&format!("quantize_64k_int{}", bits.bits()), |b| b.iter(|| quantize(black_box(&t), bits).unwrap()));
    }
}

criterion_group!(benches, conv_network, weight_bound_stack, primitives);
criterion_main!(benches);
