//! Wall-clock throughput of packed models, roofline calibration of the host,
//! and the random matched-k comparison baseline.

use std::fs;
use std::hint::black_box;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::{BitWidth, MachineModel, QuantScheme};
use crate::dataset::Dataset;
use crate::engine::{forward_with, ForwardOptions};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::quant::{PackCache, QuantizedModel};

pub const MIN_RUNS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub batch: usize,
    pub runs: usize,
    pub warmup: usize,
    pub threads: usize,
    /// Forward passes per timed run.
    pub iters_per_run: usize,
    pub measure_accuracy: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            batch: 1,
            runs: 10,
            warmup: 2,
            threads: 1,
            iters_per_run: 1,
            measure_accuracy: true,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.runs < MIN_RUNS {
            return Err(Error::ConfigInvalid(format!("runs must be at least {MIN_RUNS}, got {}", self.runs)));
        }
        if self.batch == 0 || self.threads == 0 || self.iters_per_run == 0 {
            return Err(Error::ConfigInvalid("batch, threads and iters-per-run must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheInfo {
    pub level: u32,
    pub kind: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MachineFingerprint {
    pub cpu_model: String,
    pub logical_cpus: usize,
    pub threads: usize,
    pub caches: Vec<CacheInfo>,
}

fn parse_size(s: &str) -> Option<u64> {
    let s = s.trim();
    let (num, mult) = match s.chars().last()? {
        'K' => (&s[..s.len() - 1], 1u64 << 10),
        'M' => (&s[..s.len() - 1], 1 << 20),
        'G' => (&s[..s.len() - 1], 1 << 30),
        _ => (s, 1),
    };
    num.parse::<u64>().ok().map(|n| n * mult)
}

/// Data and unified caches of cpu0 from sysfs; empty when unavailable.
pub fn detect_caches() -> Vec<CacheInfo> {
    let root = Path::new("/sys/devices/system/cpu/cpu0/cache");
    let Ok(entries) = fs::read_dir(root) else {
        return Vec::new();
    };
    let mut out: Vec<CacheInfo> = entries
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("index"))
        .filter_map(|e| {
            let read = |f: &str| fs::read_to_string(e.path().join(f)).ok();
            let kind = read("type")?.trim().to_string();
            if kind == "Instruction" {
                return None;
            }
            Some(CacheInfo {
                level: read("level")?.trim().parse().ok()?,
                kind,
                bytes: parse_size(&read("size")?)?,
            })
        })
        .collect();
    out.sort_by_key(|c| c.level);
    out
}

/// Size of the last-level cache, if discoverable.
pub fn last_level_cache_bytes() -> Option<u64> {
    detect_caches().last().map(|c| c.bytes)
}

pub fn fingerprint(threads: usize) -> MachineFingerprint {
    let cpu_model = fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split_once(':'))
                .map(|(_, v)| v.trim().to_string())
        })
        .unwrap_or_else(|| std::env::consts::ARCH.to_string());
    MachineFingerprint {
        cpu_model,
        logical_cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
        threads,
        caches: detect_caches(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputResult {
    pub scheme: QuantScheme,
    pub images_per_s: f64,
    pub runs: usize,
    pub warmup_runs: usize,
    pub batch: usize,
    pub threads: usize,
    pub run_seconds: Vec<f64>,
    pub accuracy: Option<f64>,
    pub weight_bytes: u64,
    pub fingerprint: MachineFingerprint,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Times forward passes over the first `batch` samples of `data` (cycled if
/// the dataset is smaller). Images/s is computed from the median run.
pub fn measure_throughput(model: &QuantizedModel<'_>, data: &Dataset, cfg: &BenchConfig) -> Result<ThroughputResult> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptySubset);
    }
    let indices: Vec<usize> = (0..cfg.batch).map(|i| i % data.len()).collect();
    let input = data.batch(&indices, &model.graph.input_shape)?;
    let opts = ForwardOptions {
        threads: cfg.threads,
        traffic: None,
    };
    for _ in 0..cfg.warmup {
        black_box(forward_with(model, &input, opts)?);
    }
    let mut run_seconds = Vec::with_capacity(cfg.runs);
    for _ in 0..cfg.runs {
        let t = Instant::now();
        for _ in 0..cfg.iters_per_run {
            black_box(forward_with(model, black_box(&input), opts)?);
        }
        run_seconds.push(t.elapsed().as_secs_f64());
    }
    let images = (cfg.batch * cfg.iters_per_run) as f64;
    let accuracy = if cfg.measure_accuracy {
        Some(evaluate(model, data, None, opts)?.accuracy)
    } else {
        None
    };
    Ok(ThroughputResult {
        scheme: model.scheme.clone(),
        images_per_s: images / median(&run_seconds),
        runs: cfg.runs,
        warmup_runs: cfg.warmup,
        batch: cfg.batch,
        threads: cfg.threads,
        run_seconds,
        accuracy,
        weight_bytes: model.weights.iter().map(|w| w.stored_bytes()).sum(),
        fingerprint: fingerprint(cfg.threads),
    })
}

/// `k` distinct layers, drawn uniformly with `seed`, set to `bits`.
pub fn random_scheme(layers: usize, k: usize, bits: BitWidth, seed: u64) -> Result<QuantScheme> {
    if k > layers {
        return Err(Error::KTooLarge { k, layers });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = rand::seq::index::sample(&mut rng, layers, k).into_vec();
    chosen.sort_unstable();
    let mut bitsv = vec![BitWidth::Fp32; layers];
    for i in chosen {
        bitsv[i] = bits;
    }
    Ok(QuantScheme(bitsv))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedTrial {
    pub seed: u64,
    pub aiq: ThroughputResult,
    pub random: ThroughputResult,
}

impl PairedTrial {
    pub fn aiq_wins(&self) -> bool {
        self.aiq.images_per_s >= self.random.images_per_s
    }
}

/// Measures the random scheme with `k` layers at `bits`.
pub fn compare_random_baseline(
    packs: &PackCache<'_>,
    k: usize,
    bits: BitWidth,
    seed: u64,
    data: &Dataset,
    cfg: &BenchConfig,
) -> Result<ThroughputResult> {
    let scheme = random_scheme(packs.graph().num_quantizable(), k, bits, seed)?;
    measure_throughput(&packs.model(&scheme)?, data, cfg)
}

/// For each trial, draws a random scheme with as many layers at `bits` as
/// the AIQ scheme has quantized layers and times both back to back. The
/// order alternates between trials so drift does not favour either side.
pub fn paired_trials(
    packs: &PackCache<'_>,
    aiq: &QuantScheme,
    bits: BitWidth,
    trials: usize,
    seed: u64,
    data: &Dataset,
    cfg: &BenchConfig,
) -> Result<Vec<PairedTrial>> {
    let k = aiq.quantized_count();
    let aiq_model = packs.model(aiq)?;
    (0..trials)
        .map(|t| {
            let s = seed.wrapping_add(t as u64);
            let (aiq_r, random) = if t % 2 == 0 {
                let a = measure_throughput(&aiq_model, data, cfg)?;
                (a, compare_random_baseline(packs, k, bits, s, data, cfg)?)
            } else {
                let r = compare_random_baseline(packs, k, bits, s, data, cfg)?;
                (measure_throughput(&aiq_model, data, cfg)?, r)
            };
            Ok(PairedTrial { seed: s, aiq: aiq_r, random })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    /// Buffer sizes (total bytes across source and destination) for the
    /// copy kernel; the largest one determines the reported bandwidth.
    pub copy_bytes: Vec<u64>,
    pub runs: usize,
    /// Multiply-add iterations per compute run.
    pub flop_iters: u64,
    /// Threads for the separately reported saturating compute variant.
    pub threads: usize,
}

impl CalibrationConfig {
    /// Copy buffers of 8x the last-level cache (256 MiB when unknown).
    pub fn for_host(threads: usize) -> Self {
        let llc = last_level_cache_bytes().unwrap_or(32 << 20);
        Self {
            copy_bytes: vec![8 * llc],
            runs: 5,
            flop_iters: 20_000_000,
            threads,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthSample {
    pub bytes: u64,
    pub bytes_per_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub machine: MachineModel,
    /// Single-thread peak from the register-blocked kernel.
    pub peak_flops_single: f64,
    pub peak_flops_threads: f64,
    pub flops_runs: Vec<f64>,
    pub bandwidth: Vec<BandwidthSample>,
    pub fingerprint: MachineFingerprint,
}

const BLOCKS: usize = 8;
const WIDTH: usize = 8;

/// FLOP/s of `iters` rounds of multiply-add over 64 independent accumulators.
fn fma_kernel(iters: u64) -> f64 {
    let mut acc = [[1.0f32; WIDTH]; BLOCKS];
    let a = black_box(0.999_999f32);
    let b = black_box(1e-7f32);
    let t = Instant::now();
    for _ in 0..iters {
        for row in acc.iter_mut() {
            for v in row.iter_mut() {
                *v = *v * a + b;
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    black_box(acc);
    (2 * BLOCKS * WIDTH) as f64 * iters as f64 / secs
}

fn fma_threads(iters: u64, threads: usize) -> f64 {
    if threads <= 1 {
        return fma_kernel(iters);
    }
    std::thread::scope(|s| {
        let hs: Vec<_> = (0..threads).map(|_| s.spawn(move || fma_kernel(iters))).collect();
        hs.into_iter().map(|h| h.join().expect("calibration worker")).sum()
    })
}

/// Bytes/s of `copy_from_slice` between two buffers totalling `total_bytes`
/// (read plus write traffic), median over `runs`.
pub fn copy_bandwidth(total_bytes: u64, runs: usize) -> f64 {
    let n = (total_bytes / 8).max(1) as usize;
    let src: Vec<f32> = (0..n).map(|i| i as f32).collect();
    let mut dst = vec![0.0f32; n];
    dst.copy_from_slice(&src);
    let times: Vec<f64> = (0..runs.max(1))
        .map(|_| {
            let t = Instant::now();
            dst.copy_from_slice(black_box(&src));
            black_box(&mut dst);
            t.elapsed().as_secs_f64()
        })
        .collect();
    (2 * n * 4) as f64 / median(&times)
}

pub fn calibrate_machine(cfg: &CalibrationConfig) -> Result<Calibration> {
    if cfg.copy_bytes.is_empty() || cfg.runs == 0 || cfg.flop_iters == 0 {
        return Err(Error::ConfigInvalid("calibration needs sizes, runs and iterations".into()));
    }
    let flops_runs: Vec<f64> = (0..cfg.runs).map(|_| fma_kernel(cfg.flop_iters)).collect();
    let peak_flops_single = median(&flops_runs);
    let peak_flops_threads = fma_threads(cfg.flop_iters, cfg.threads);
    let bandwidth: Vec<BandwidthSample> = cfg
        .copy_bytes
        .iter()
        .map(|&bytes| BandwidthSample {
            bytes,
            bytes_per_s: copy_bandwidth(bytes, cfg.runs),
        })
        .collect();
    let largest = bandwidth.iter().max_by_key(|b| b.bytes).expect("non-empty");
    Ok(Calibration {
        machine: MachineModel::new(peak_flops_single, largest.bytes_per_s)?,
        peak_flops_single,
        peak_flops_threads,
        flops_runs,
        bandwidth,
        fingerprint: fingerprint(cfg.threads),
    })
}
