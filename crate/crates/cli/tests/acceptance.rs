//! Acceptance suite. Runs every criterion in order and prints one
//! `criterion N: PASS|FAIL` line each, then a tally.
//!
//! The target reports rather than gates: it exits 0 so that the remaining
//! workspace suites still run under `cargo test`. Set `AIQ_ACCEPTANCE_STRICT=1`
//! to exit 1 when any criterion fails.
//!
//! `cargo test --test acceptance -- 3 4` runs a subset.

use std::collections::BTreeMap;
use std::error::Error;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use aiq_core::dataset::{load_dataset, DatasetFormat, LoadOptions};
use aiq_core::engine::{forward_with, ForwardOptions, WeightTraffic};
use aiq_core::eval::acc_loss_pp;
use aiq_core::harness::{last_level_cache_bytes, measure_throughput, paired_trials, BenchConfig};
use aiq_core::quant::{apply_scheme, dequantize, pack_int4, pack_scheme, quantize, unpack_int4};
use aiq_core::search::{
    combined_score, coordinate_descent, exhaustive_search, greedy_search, pareto_sweep, Algorithm, EvalRecord,
    EvaluatorConfig, ModelEvaluator, SchemeEvaluator, SearchConfig, SearchTrace,
};
use aiq_core::zoo::{self, StackConfig};
use aiq_core::{io, BitWidth, CostTable, Dataset, ModelGraph, QuantScheme, Tensor, TrafficModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, Box<dyn Error>>;
type Criterion = (u32, &'static str, fn() -> Outcome);

macro_rules! check {
    ($cond:expr, $($msg:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($msg)+).into());
        }
    };
}

const LAMBDA: f64 = 0.9;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

fn load_model(stem: &str) -> Result<ModelGraph, Box<dyn Error>> {
    Ok(io::load_model(&fixture(&format!("{stem}.json")), &fixture(&format!("{stem}.aiqw")))?)
}

fn eval_set(g: &ModelGraph) -> Result<Dataset, Box<dyn Error>> {
    let opts = LoadOptions {
        normalization: g.normalization.clone(),
        num_classes: Some(10),
        labels_path: None,
    };
    Ok(load_dataset(&fixture("mini_resnet_eval.aiqd"), DatasetFormat::Aiqd, &opts)?)
}

fn toy(seed: u64) -> Result<(ModelGraph, Dataset), Box<dyn Error>> {
    let g = zoo::toy4(seed)?;
    // Unfiltered teacher labels keep low-margin samples that quantization flips.
    let d = zoo::teacher_dataset(&g, 256, 256, 1000 + seed, 1)?;
    Ok((g, d))
}

fn exact(data: &Dataset) -> EvaluatorConfig {
    EvaluatorConfig {
        subset_size: data.len(),
        ..Default::default()
    }
}

/// Largest loss decrease available from a single-coordinate change; zero or
/// negative means `trace.result` is a local minimum.
fn best_neighbour_gain(ev: &ModelEvaluator<'_>, trace: &SearchTrace) -> Result<f64, Box<dyn Error>> {
    let r = &trace.result;
    let mut gain = f64::NEG_INFINITY;
    for i in 0..r.scheme.len() {
        for b in BitWidth::ALL.into_iter().filter(|&b| b != r.scheme.bits()[i]) {
            let s = r.scheme.with(i, b);
            let acc = ev.accuracy(&s)?;
            let loss = trace.objective.loss(ev.ai(&s)?, acc_loss_pp(trace.objective.baseline_acc, acc));
            gain = gain.max(r.loss - loss);
        }
    }
    Ok(gain)
}

fn c1_analytic_ai() -> Outcome {
    let t = Instant::now();
    let g = load_model("resnet20")?;
    check!(g.num_quantizable() == 20, "{} quantizable layers", g.num_quantizable());
    let costs = CostTable::new(&g, 1, TrafficModel::Fused)?;
    let ai = |b| costs.ai(&QuantScheme::uniform(20, b));
    let fp = ai(BitWidth::Fp32)?;
    let (r8, r4) = (ai(BitWidth::Int8)? / fp, ai(BitWidth::Int4)? / fp);
    let secs = t.elapsed().as_secs_f64();
    check!((1.30..=1.60).contains(&r8), "INT8/FP32 AI ratio {r8:.4} outside [1.30, 1.60]");
    check!(r4 > r8, "INT4 ratio {r4:.4} not above INT8 ratio {r8:.4}");
    check!(secs < 1.0, "took {secs:.3}s");
    Ok(format!("AI FP32 {fp:.4}, INT8/FP32 {r8:.4}, INT4/FP32 {r4:.4}"))
}

fn c2_search_vs_exhaustive() -> Outcome {
    let t = Instant::now();
    let cfg = SearchConfig::default();
    let (mut worst_g, mut worst_cd) = (0.0f64, 0.0f64);
    let (mut ok_g, mut ok_cd, mut ok_cd_vs_g, mut local_min, mut mixed) = (0, 0, 0, 0, 0);
    let mut misses = Vec::new();
    const SEEDS: u64 = 20;
    for seed in 0..SEEDS {
        let (g, d) = toy(seed)?;
        let ev = ModelEvaluator::new(&g, &d, &exact(&d))?;
        let opt = exhaustive_search(&ev, &cfg)?;
        let greedy = greedy_search(&ev, &cfg)?;
        let cd = coordinate_descent(&ev, &cfg)?;
        let rel = |l: f64, reference: f64| (l - reference) / reference.abs();
        let (rg, rc) = (rel(greedy.result.loss, opt.loss), rel(cd.result.loss, opt.loss));
        ok_g += usize::from(rg <= 0.05);
        ok_cd += usize::from(rc <= 0.05);
        ok_cd_vs_g += usize::from(rel(cd.result.loss, greedy.result.loss) <= 0.05);
        local_min += usize::from(best_neighbour_gain(&ev, &cd)? <= 0.0);
        mixed += usize::from(opt.scheme.bits().iter().any(|&b| b != opt.scheme.bits()[0]));
        if rg > 0.05 || rc > 0.05 {
            misses.push(format!(
                "seed {seed}: optimum {} {:.4}, greedy {} {:+.1}%, descent {} {:+.1}%",
                opt.scheme,
                opt.loss,
                greedy.result.scheme,
                100.0 * rg,
                cd.result.scheme,
                100.0 * rc
            ));
        }
        worst_g = worst_g.max(rg);
        worst_cd = worst_cd.max(rc);
    }
    let secs = t.elapsed().as_secs_f64();
    let n = SEEDS as usize;
    let summary = format!(
        "within 5% of the optimum: greedy {ok_g}/{n} (worst {:+.1}%), descent {ok_cd}/{n} (worst {:+.1}%); \
         descent within 5% of greedy {ok_cd_vs_g}/{n}; descent local minimum {local_min}/{n}; {mixed} mixed-precision optima",
        100.0 * worst_g,
        100.0 * worst_cd
    );
    check!(
        ok_g == n && ok_cd == n && ok_cd_vs_g == n && local_min == n && secs < 300.0,
        "{summary}; {}",
        misses.join("; ")
    );
    Ok(summary)
}

/// Searches on the trained fixture, re-scored on the full eval set.
struct MiniRuns {
    greedy: EvalRecord,
    descent: EvalRecord,
    int8: EvalRecord,
    int4: EvalRecord,
    secs: f64,
}

static MINI: OnceLock<MiniRuns> = OnceLock::new();

fn mini_runs() -> Result<&'static MiniRuns, Box<dyn Error>> {
    if let Some(r) = MINI.get() {
        return Ok(r);
    }
    let t = Instant::now();
    let g = load_model("mini_resnet")?;
    let d = eval_set(&g)?;
    let ev = ModelEvaluator::new(
        &g,
        &d,
        &EvaluatorConfig {
            subset_size: 1000,
            seed: 0,
            ..Default::default()
        },
    )?;
    let cfg = SearchConfig {
        lambda: LAMBDA,
        ..Default::default()
    };
    let greedy = ev.final_record(&greedy_search(&ev, &cfg)?.result, cfg.normalization)?;
    let descent = ev.final_record(&coordinate_descent(&ev, &cfg)?.result, cfg.normalization)?;
    let l = g.num_quantizable();
    let uniform = |bits| -> Result<EvalRecord, Box<dyn Error>> {
        let scheme = QuantScheme::uniform(l, bits);
        let r = EvalRecord {
            ai: ev.ai(&scheme)?,
            scheme,
            accuracy: 0.0,
            acc_loss_pp: 0.0,
            loss: 0.0,
            evals_used: 0,
            lambda: LAMBDA,
            algorithm: "uniform".into(),
            seed: 0,
        };
        Ok(ev.final_record(&r, cfg.normalization)?)
    };
    let runs = MiniRuns {
        greedy,
        descent,
        int8: uniform(BitWidth::Int8)?,
        int4: uniform(BitWidth::Int4)?,
        secs: t.elapsed().as_secs_f64(),
    };
    Ok(MINI.get_or_init(|| runs))
}

fn c3_accuracy_preservation() -> Outcome {
    let m = mini_runs()?;
    for (name, r) in [("greedy", &m.greedy), ("descent", &m.descent)] {
        check!(r.acc_loss_pp <= 1.5, "{name} loses {:.2} pp", r.acc_loss_pp);
        check!(r.ai >= m.int8.ai, "{name} AI {:.4} below uniform INT8 {:.4}", r.ai, m.int8.ai);
    }
    check!(m.secs < 600.0, "took {:.0}s", m.secs);
    Ok(format!(
        "greedy {:.2} pp at AI {:.3}, descent {:.2} pp at AI {:.3}, uniform INT8 AI {:.3}",
        m.greedy.acc_loss_pp, m.greedy.ai, m.descent.acc_loss_pp, m.descent.ai, m.int8.ai
    ))
}

fn c4_combined_score() -> Outcome {
    let m = mini_runs()?;
    let (s8, s4) = (combined_score(&m.int8), combined_score(&m.int4));
    for (name, r) in [("greedy", &m.greedy), ("descent", &m.descent)] {
        let s = combined_score(r);
        check!(s > s8 && s > s4, "{name} score {s:.3} vs INT8 {s8:.3}, INT4 {s4:.3}");
    }
    Ok(format!(
        "greedy {:.3}, descent {:.3}, uniform INT8 {s8:.3}, uniform INT4 {s4:.3}",
        combined_score(&m.greedy),
        combined_score(&m.descent)
    ))
}

fn c5_throughput() -> Outcome {
    let t = Instant::now();
    let llc = last_level_cache_bytes().unwrap_or(32 << 20);
    let cfg = StackConfig::for_weight_bytes(8 * llc, 0);
    let g = zoo::memory_bound_stack(&cfg)?;
    let l = g.num_quantizable();
    check!(cfg.weight_bytes() >= 8 * llc, "stack holds {} bytes", cfg.weight_bytes());
    let data = zoo::teacher_dataset(&g, 32, 32, 1, 2)?;
    let ev = ModelEvaluator::new(
        &g,
        &data,
        &EvaluatorConfig {
            subset_size: data.len(),
            threads: 2,
            ..Default::default()
        },
    )?;
    let bench = BenchConfig {
        batch: 1,
        runs: 10,
        warmup: 2,
        threads: 2,
        iters_per_run: 1,
        measure_accuracy: false,
    };
    let packs = ev.packs();
    let fp = measure_throughput(&packs.model(&QuantScheme::fp32(l))?, &data, &bench)?;
    let i8 = measure_throughput(&packs.model(&QuantScheme::uniform(l, BitWidth::Int8))?, &data, &bench)?;
    let speedup = i8.images_per_s / fp.images_per_s;
    check!(speedup >= 1.10, "uniform INT8 {:.3} img/s vs FP32 {:.3} img/s ({speedup:.3}x)", i8.images_per_s, fp.images_per_s);
    // Like-for-like with the random INT8 baseline: the search may only pick INT8.
    let search = SearchConfig {
        bits: vec![BitWidth::Fp32, BitWidth::Int8],
        ..Default::default()
    };
    let aiq = greedy_search(&ev, &search)?.result.scheme;
    let trials = paired_trials(packs, &aiq, BitWidth::Int8, 5, 100, &data, &bench)?;
    let wins = trials.iter().filter(|t| t.aiq_wins()).count();
    let secs = t.elapsed().as_secs_f64();
    check!(wins >= 3, "scheme {aiq} beat random matched-k in {wins}/5 trials");
    check!(secs < 900.0, "took {secs:.0}s");
    Ok(format!(
        "{} MiB FP32 weights, FP32 {:.3} img/s, INT8 {:.3} img/s ({speedup:.2}x), scheme {aiq} won {wins}/5",
        cfg.weight_bytes() >> 20,
        fp.images_per_s,
        i8.images_per_s
    ))
}

fn input_for(g: &ModelGraph, n: usize, rng: &mut ChaCha8Rng) -> Result<Tensor, Box<dyn Error>> {
    let mut shape = vec![n];
    shape.extend_from_slice(&g.input_shape);
    let len = shape.iter().product();
    Ok(Tensor::new(shape, (0..len).map(|_| rng.gen_range(-2.0f32..2.0)).collect())?)
}

fn bit_patterns(t: &Tensor) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn c6_numerical_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mini = load_model("mini_resnet")?;
    let eval = eval_set(&mini)?;
    let real: Vec<usize> = (0..32).collect();
    let models: Vec<(ModelGraph, Option<Tensor>)> = vec![
        (load_model("resnet20")?, None),
        (load_model("heavy_early")?, Some(eval.batch(&real, &mini.input_shape)?)),
        (mini.clone(), Some(eval.batch(&real, &mini.input_shape)?)),
        (zoo::toy4(0)?, None),
        // same layout as the throughput fixture, scaled down
        (zoo::memory_bound_stack(&StackConfig::for_weight_bytes(8 << 20, 0))?, None),
    ];
    let (mut forwards, mut layers) = (0, 0);
    for (g, x) in &models {
        let l = g.num_quantizable();
        let x = match x {
            Some(x) => x.clone(),
            None => input_for(g, 3, &mut rng)?,
        };
        let mut schemes: Vec<QuantScheme> = BitWidth::ALL.iter().map(|&b| QuantScheme::uniform(l, b)).collect();
        schemes.extend((0..5).map(|_| QuantScheme((0..l).map(|_| BitWidth::ALL[rng.gen_range(0..3)]).collect())));
        let costs = CostTable::new(g, 1, TrafficModel::Fused)?;
        for s in &schemes {
            let fake = forward_with(&apply_scheme(g, s)?, &x, ForwardOptions::default())?;
            let traffic = WeightTraffic::new(l);
            let opts = ForwardOptions {
                threads: 2,
                traffic: Some(&traffic),
            };
            let packed = forward_with(&pack_scheme(g, s)?, &x, opts)?;
            check!(bit_patterns(&fake) == bit_patterns(&packed), "{}: logits differ under {s}", g.name);
            for (i, &b) in s.bits().iter().enumerate() {
                let (read, predicted) = (traffic.bytes(i, b), costs.quantizable(i).weight_bytes(b));
                check!(read == predicted, "{} layer {i} at {b:?}: read {read} bytes, cost model {predicted}", g.name);
            }
            forwards += 1;
            layers += l;
        }
    }
    Ok(format!(
        "{} models, {forwards} scheme pairs bit-identical, {layers} per-layer byte counts exact",
        models.len()
    ))
}

fn random_graph(rng: &mut ChaCha8Rng) -> Result<ModelGraph, Box<dyn Error>> {
    Ok(match rng.gen_range(0..3) {
        0 => {
            let dims: Vec<usize> = (0..rng.gen_range(2..6)).map(|_| rng.gen_range(1..40)).collect();
            zoo::mlp("m", &dims, rng.gen())?
        }
        1 => {
            let w = [rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(1..8), rng.gen_range(1..8)];
            zoo::resnet20("r", w, [rng.gen_range(1..4), 8, 8], rng.gen_range(2..12), rng.gen())?
        }
        _ => zoo::plain_convnet20(rng.gen_range(1..6), [2, 6, 6], rng.gen())?,
    })
}

fn c7_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    let mut tables = vec![CostTable::new(&load_model("resnet20")?, 1, TrafficModel::Fused)?];
    for _ in 0..20 {
        let g = random_graph(&mut rng)?;
        let traffic = if rng.gen() { TrafficModel::Fused } else { TrafficModel::Unfused };
        tables.push(CostTable::new(&g, rng.gen_range(1..4), traffic)?);
    }
    let mut mono = 0;
    while mono < 2000 {
        let t = &tables[rng.gen_range(0..tables.len())];
        let l = t.num_quantizable();
        let s = QuantScheme((0..l).map(|_| BitWidth::ALL[rng.gen_range(0..3)]).collect());
        let i = rng.gen_range(0..l);
        for b in BitWidth::ALL.into_iter().filter(|&b| b < s.bits()[i]) {
            let (before, after) = (t.ai(&s)?, t.ai(&s.with(i, b))?);
            check!(after >= before, "AI fell from {before} to {after} lowering layer {i} of {s}");
            mono += 1;
        }
    }

    let mut roundtrips = 0;
    for _ in 0..2000 {
        let n = rng.gen_range(1..200);
        let mag = 10f32.powi(rng.gen_range(-6..6));
        let w: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0f32..1.0) * mag).collect();
        let tensor = Tensor::new(vec![n], w.clone())?;
        for bits in [BitWidth::Int8, BitWidth::Int4] {
            let p = quantize(&tensor, bits)?;
            let s = p.params.scale;
            for (a, b) in w.iter().zip(dequantize(&p).data()) {
                let ulp = f32::EPSILON * a.abs().max(b.abs());
                check!((a - b).abs() <= s / 2.0 + ulp, "{a} came back as {b} with scale {s}");
            }
            roundtrips += 1;
        }
    }

    for byte in 0..=255u8 {
        let codes = unpack_int4(&[byte], 2);
        check!(pack_int4(&codes) == [byte], "byte {byte:#04x} does not survive unpack/pack");
    }
    for lo in -8i8..=7 {
        for hi in -8i8..=7 {
            check!(unpack_int4(&pack_int4(&[lo, hi]), 2) == [lo, hi], "codes ({lo}, {hi}) do not survive pack/unpack");
        }
    }

    let mut accepted = 0;
    for seed in 0..10 {
        let (g, d) = toy(seed)?;
        let ev = ModelEvaluator::new(&g, &d, &exact(&d))?;
        for lambda in [0.5, 0.9] {
            let cfg = SearchConfig { lambda, ..Default::default() };
            for trace in [greedy_search(&ev, &cfg)?, coordinate_descent(&ev, &cfg)?] {
                let mut prev = trace.baseline.loss;
                for step in trace.accepted() {
                    check!(step.record.loss < prev, "seed {seed}: accepted step raised loss to {}", step.record.loss);
                    prev = step.record.loss;
                    accepted += 1;
                }
            }
        }
        for alg in [Algorithm::Greedy, Algorithm::CoordinateDescent] {
            let sweep = pareto_sweep(&ev, &[0.0, 0.9, 1.0], alg, &SearchConfig::default())?;
            let end = &sweep[2].record.scheme;
            check!(*end == QuantScheme::uniform(4, BitWidth::Int4), "seed {seed}: {alg:?} ends the sweep at {end}");
        }
    }

    Ok(format!(
        "{mono} monotonicity trials, {roundtrips} round-trips, 256 bytes and 256 code pairs, {accepted} accepted moves, 20 sweep endpoints"
    ))
}

/// Every file in `dir` except timing output.
fn snapshot(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, Box<dyn Error>> {
    const TIMING: [&str; 4] = ["throughput.json", "random_trials.json", "calibration.json", "machine.json"];
    let mut out = BTreeMap::new();
    for e in std::fs::read_dir(dir)? {
        let e = e?;
        let name = e.file_name().to_string_lossy().into_owned();
        if !TIMING.contains(&name.as_str()) {
            out.insert(name, std::fs::read(e.path())?);
        }
    }
    Ok(out)
}

fn c8_determinism() -> Outcome {
    let tmp = tempfile::tempdir()?;
    let w = tmp.path();
    let p = |s: &str| w.join(s).to_string_lossy().into_owned();
    let fx = |s: &str| fixture(s).to_string_lossy().into_owned();
    let runs: Vec<(&str, Vec<String>)> = vec![
        ("zoo", vec!["zoo", "--arch", "toy4", "--seed", "3", "--out", &p("zoo")].into_iter().map(String::from).collect()),
        ("gen-data", ["gen-data", "--n", "64", "--seed", "5", "--out", &p("blobs")].map(String::from).to_vec()),
        (
            "gen-data teacher",
            ["gen-data", "--teacher", &p("zoo/toy4.json"), "--n", "128", "--seed", "4", "--name", "toy", "--out", &p("data")]
                .map(String::from)
                .to_vec(),
        ),
        (
            "search greedy",
            ["search", "--model", &fx("mini_resnet.json"), "--data", &fx("mini_resnet_eval.aiqd"), "--subset-size", "100", "--out", &p("greedy")]
                .map(String::from)
                .to_vec(),
        ),
        (
            "search coord",
            ["search", "--model", &p("zoo/toy4.json"), "--data", &p("data/toy.aiqd"), "--algo", "coord", "--out", &p("coord")]
                .map(String::from)
                .to_vec(),
        ),
        (
            "search exhaustive",
            ["search", "--model", &p("zoo/toy4.json"), "--data", &p("data/toy.aiqd"), "--algo", "exhaustive", "--out", &p("exh")]
                .map(String::from)
                .to_vec(),
        ),
        (
            "profile",
            [
                "profile", "--model", &fx("mini_resnet.json"), "--data", &fx("mini_resnet_eval.aiqd"), "--subset-size", "100",
                "--scheme", &p("greedy/scheme.json"), "--out", &p("profile"),
            ]
            .map(String::from)
            .to_vec(),
        ),
        (
            "sweep",
            ["sweep", "--model", &p("zoo/toy4.json"), "--data", &p("data/toy.aiqd"), "--out", &p("sweep")].map(String::from).to_vec(),
        ),
        (
            "cost",
            ["cost", "--model", &fx("resnet20.json"), "--scheme", "uniform:int8", "--batch", "8", "--out", &p("cost")]
                .map(String::from)
                .to_vec(),
        ),
        (
            "quantize",
            ["quantize", "--model", &fx("mini_resnet.json"), "--scheme", &p("greedy/scheme.json"), "--name", "packed", "--out", &p("q")]
                .map(String::from)
                .to_vec(),
        ),
        (
            "bench",
            ["bench", "--model", &p("q/packed.json"), "--scheme", "stored", "--runs", "5", "--compare-random", "2", "--out", &p("bench")]
                .map(String::from)
                .to_vec(),
        ),
        (
            "calibrate",
            ["calibrate", "--copy-mib", "8", "--runs", "5", "--flop-iters", "100000", "--out", &p("cal")].map(String::from).to_vec(),
        ),
    ];
    let exe = env!("CARGO_BIN_EXE_aiq");
    let mut files = 0;
    for (name, args) in &runs {
        let out = PathBuf::from(&args[args.iter().position(|a| a == "--out").expect("--out") + 1]);
        let mut first = None;
        for _ in 0..2 {
            if out.exists() {
                std::fs::remove_dir_all(&out)?;
            }
            let r = Command::new(exe).args(args).env_remove("AIQ_THREADS").output()?;
            check!(r.status.success(), "{name} failed: {}", String::from_utf8_lossy(&r.stderr));
            let snap = snapshot(&out)?;
            match &first {
                None => first = Some(snap),
                Some(prev) => {
                    for (file, bytes) in prev {
                        check!(snap.get(file) == Some(bytes), "{name}: {file} differs between runs");
                    }
                    check!(snap.len() == prev.len(), "{name}: different file sets");
                    files += prev.len();
                }
            }
        }
    }
    Ok(format!("{} subcommand runs, {files} files byte-identical", runs.len()))
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "panicked".into())
}

fn main() {
    let criteria: [Criterion; 8] = [
        (1, "analytic AI gains", c1_analytic_ai),
        (2, "search quality vs exhaustive", c2_search_vs_exhaustive),
        (3, "accuracy preservation", c3_accuracy_preservation),
        (4, "combined-score ordering", c4_combined_score),
        (5, "throughput direction", c5_throughput),
        (6, "numerical equivalence", c6_numerical_equivalence),
        (7, "invariant suites", c7_invariants),
        (8, "determinism", c8_determinism),
    ];
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        for (n, name, _) in criteria {
            println!("criterion {n}: {name}: test");
        }
        return;
    }
    let only: Vec<u32> = args.iter().filter_map(|a| a.parse().ok()).collect();
    std::panic::set_hook(Box::new(|_| {}));
    let (mut ran, mut failed) = (0, Vec::new());
    for (n, name, run) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        ran += 1;
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| Err(panic_message(p).into()));
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n}: PASS {name}: {detail} [{secs:.1}s]"),
            Err(e) => {
                failed.push(n.to_string());
                println!("criterion {n}: FAIL {name}: {e} [{secs:.1}s]");
            }
        }
    }
    if failed.is_empty() {
        println!("acceptance: {ran} of {ran} criteria passed");
    } else {
        println!("acceptance: {} of {ran} criteria passed; failing: {}", ran - failed.len(), failed.join(", "));
        if std::env::var_os("AIQ_ACCEPTANCE_STRICT").is_some_and(|v| v == "1") {
            std::process::exit(1);
        }
    }
}
