//! Machine calibration and throughput measurement on the host.

use aiq_core::harness::{
    calibrate_machine, copy_bandwidth, detect_caches, last_level_cache_bytes, measure_throughput, median, paired_trials, BenchConfig,
    CalibrationConfig,
};
use aiq_core::quant::PackCache;
use aiq_core::zoo::{self, StackConfig};
use aiq_core::{BitWidth, QuantScheme};
use std::sync::{Mutex, MutexGuard};

/// Timing tests in this file must not compete with each other for memory
/// bandwidth.
static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn llc() -> u64 {
    last_level_cache_bytes().unwrap_or(32 << 20)
}

fn cv(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt() / mean
}

/// Second-level cache size, or 256 KiB when it cannot be read.
fn l2() -> u64 {
    detect_caches().iter().find(|c| c.level == 2).map_or(256 << 10, |c| c.bytes)
}

#[test]
fn calibration_buffer_excludes_cache_inflation() {
    let _guard = serial();
    let resident = copy_bandwidth(l2() / 4, 9);
    let calibration = copy_bandwidth(8 * llc(), 9);
    assert!(calibration <= resident, "in-cache {resident:.3e} B/s, 8x LLC {calibration:.3e} B/s");
}

/// Both buffers sit outside the cache on most hosts, so the ordering can
/// flip on machines whose DRAM bandwidth depends on allocation size.
#[test]
#[ignore = "hardware dependent; run with --ignored on a quiet machine"]
fn larger_out_of_cache_buffer_reports_no_more_bandwidth() {
    let _guard = serial();
    let small = copy_bandwidth(2 * llc(), 9);
    let large = copy_bandwidth(8 * llc(), 9);
    assert!(large <= small, "2x LLC {small:.3e} B/s, 8x LLC {large:.3e} B/s");
}

#[test]
fn repeated_calibration_is_stable() {
    let _guard = serial();
    // The shipped run count and kernel length; only the copy buffer shrinks.
    let cfg = CalibrationConfig {
        copy_bytes: vec![2 * llc()],
        ..CalibrationConfig::for_host(1)
    };
    let runs: Vec<_> = (0..5).map(|_| calibrate_machine(&cfg).unwrap()).collect();
    let bw: Vec<f64> = runs.iter().map(|c| c.machine.mem_bandwidth).collect();
    let peak: Vec<f64> = runs.iter().map(|c| c.machine.peak_flops).collect();
    assert!(cv(&bw) < 0.15, "bandwidth CV {:.3} over {bw:?}", cv(&bw));
    assert!(cv(&peak) < 0.15, "peak CV {:.3} over {peak:?}", cv(&peak));
    assert!(runs.iter().all(|c| c.machine.ridge_point() > 0.0));
}

#[test]
fn int8_weights_speed_up_a_weight_bound_stack() {
    let _guard = serial();
    // FP32 weights well beyond any cache this suite is likely to meet, but
    // small enough to keep the test quick.
    let cfg = StackConfig::for_weight_bytes(256 << 20, 0);
    let g = zoo::memory_bound_stack(&cfg).unwrap();
    let data = zoo::teacher_dataset(&g, 8, 8, 1, 1).unwrap();
    let packs = PackCache::new(&g);
    let bench = BenchConfig {
        runs: 5,
        threads: 2,
        measure_accuracy: false,
        ..Default::default()
    };
    let l = g.num_quantizable();
    let fp = measure_throughput(&packs.model(&QuantScheme::fp32(l)).unwrap(), &data, &bench).unwrap();
    let i8 = measure_throughput(&packs.model(&QuantScheme::uniform(l, BitWidth::Int8)).unwrap(), &data, &bench).unwrap();
    assert!(i8.images_per_s > fp.images_per_s, "int8 {} vs fp32 {}", i8.images_per_s, fp.images_per_s);
    assert_eq!(fp.run_seconds.len(), 5);
    assert!(3 * i8.weight_bytes < fp.weight_bytes, "stored bytes {} vs {}", i8.weight_bytes, fp.weight_bytes);
}

#[test]
fn paired_trials_match_the_quantized_layer_count() {
    let _guard = serial();
    let g = zoo::memory_bound_stack(&StackConfig {
        input: 16,
        wide: 64,
        narrow: 8,
        classes: 4,
        outliers: 0,
        outlier_gain: 1.0,
        seed: 1,
    })
    .unwrap();
    let data = zoo::teacher_dataset(&g, 4, 4, 1, 1).unwrap();
    let packs = PackCache::new(&g);
    let aiq = QuantScheme::fp32(8).with(1, BitWidth::Int8).with(2, BitWidth::Int8);
    let bench = BenchConfig {
        runs: 5,
        ..Default::default()
    };
    let trials = paired_trials(&packs, &aiq, BitWidth::Int8, 3, 9, &data, &bench).unwrap();
    assert_eq!(trials.len(), 3);
    for t in &trials {
        assert_eq!(t.random.scheme.quantized_count(), 2);
        assert_eq!(t.aiq.scheme, aiq);
        assert!(t.random.scheme.bits().iter().all(|&b| b == BitWidth::Fp32 || b == BitWidth::Int8));
        assert!(median(&t.aiq.run_seconds) > 0.0);
    }
}
