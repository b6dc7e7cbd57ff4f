use serde_json::json;

use aiq_core::cost::roofline_classify;
use aiq_core::search::{combined_score, run_search, ParetoPoint};

use super::*;

/// Parses `args` (including the program name) and runs the subcommand,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: &Command) -> CliResult<()> {
    match cmd {
        Command::Search(a) => search(a),
        Command::Profile(a) => profile(a),
        Command::Sweep(a) => sweep(a),
        Command::Bench(a) => bench(a),
        Command::Cost(a) => cost(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Quantize(a) => quantize(a),
        Command::GenData(a) => gen_data(a),
        Command::Zoo(a) => zoo_cmd(a),
    }
}

fn check_lambda(lambda: f64) -> CliResult<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(CliError::Usage(format!("lambda {lambda} outside [0, 1]")));
    }
    Ok(())
}

fn search(a: &SearchArgs) -> CliResult<()> {
    check_lambda(a.objective.lambda)?;
    let out = prepare_out(&a.common, "search", a)?;
    let graph = a.model.load()?;
    let data = a.data.load(&graph)?;
    let ev = ModelEvaluator::new(&graph, &data, &a.objective.evaluator_config(&a.common))?;
    let cfg = a.objective.search_config(a.common.seed);
    let (record, trace) = match a.objective.algo {
        Algorithm::Greedy => {
            let t = greedy_search(&ev, &cfg)?;
            (t.result.clone(), Some(t))
        }
        Algorithm::CoordinateDescent => {
            let t = coordinate_descent(&ev, &cfg)?;
            (t.result.clone(), Some(t))
        }
        Algorithm::Exhaustive => (exhaustive_search(&ev, &cfg)?, None),
    };
    let final_record = ev.final_record(&record, cfg.normalization)?;
    write(&out.join("scheme.json"), json(&scheme_file(&graph, &record.scheme)))?;
    if let Some(t) = &trace {
        write(&out.join("trace.jsonl"), t.to_jsonl())?;
    }
    write(&out.join("result.csv"), records_csv(std::slice::from_ref(&final_record)))?;
    write(
        &out.join("result.json"),
        json(&json!({
            "search_subset": record,
            "full_set": final_record,
            "combined_score": combined_score(&final_record),
        })),
    )?;
    println!(
        "{} lambda={} scheme={} ai={:.4} accuracy={:.4} acc_loss_pp={:.3} evals={}",
        a.objective.algo,
        a.objective.lambda,
        final_record.scheme,
        final_record.ai,
        final_record.accuracy,
        final_record.acc_loss_pp,
        final_record.evals_used
    );
    Ok(())
}

fn profile(a: &ProfileArgs) -> CliResult<()> {
    let out = prepare_out(&a.common, "profile", a)?;
    let graph = a.model.load()?;
    let data = a.data.load(&graph)?;
    let ev = ModelEvaluator::new(
        &graph,
        &data,
        &EvaluatorConfig {
            batch: a.ai_batch,
            traffic: a.traffic,
            subset_size: a.subset_size,
            seed: a.common.seed,
            threads: a.common.threads,
            cache: true,
            prefix_reuse: true,
        },
    )?;
    let final_scheme = a.scheme.as_deref().map(|s| resolve_scheme(s, &graph)).transpose()?;
    let mut bits = a.bits.clone();
    bits.sort_by(|x, y| y.cmp(x));
    bits.dedup();
    let mut profiles = Vec::new();
    for &b in &bits {
        let p = layerwise_profile(&ev, b)?;
        write(&out.join(format!("profile_{}.csv", b.bits())), p.to_csv())?;
        write(&out.join(format!("profile_{}.svg", b.bits())), profile_svg(&p))?;
        println!("profiled {} layers at {} bits", p.rows.len(), b.bits());
        profiles.push(p);
    }
    let find = |b: BitWidth| profiles.iter().find(|p| p.bits == b);
    if let (Some(p8), Some(p4)) = (find(BitWidth::Int8), find(BitWidth::Int4)) {
        let table = sensitivity_table(p8, p4, final_scheme.as_ref());
        write(&out.join("sensitivity.csv"), sensitivity_csv(&table))?;
    }
    if let Some(s) = &final_scheme {
        write(&out.join("scheme_stats.json"), json(&scheme_statistics(&graph, s)?))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct ParetoRow {
    label: String,
    scheme: String,
    ai: f64,
    accuracy: f64,
    acc_loss_pp: f64,
    lambda: Option<f64>,
    combined_score: f64,
    dominated: bool,
}

fn sweep(a: &SweepArgs) -> CliResult<()> {
    for &l in &a.lambdas {
        check_lambda(l)?;
    }
    let out = prepare_out(&a.common, "sweep", a)?;
    let graph = a.model.load()?;
    let data = a.data.load(&graph)?;
    let ev = ModelEvaluator::new(&graph, &data, &a.objective.evaluator_config(&a.common))?;
    let base = a.objective.search_config(a.common.seed);
    let mut records = Vec::new();
    for &lambda in &a.lambdas {
        let cfg = SearchConfig { lambda, ..base.clone() };
        let r = run_search(&ev, &cfg, a.objective.algo)?;
        let f = ev.final_record(&r, cfg.normalization)?;
        println!("lambda={lambda} scheme={} ai={:.4} accuracy={:.4}", f.scheme, f.ai, f.accuracy);
        records.push(f);
    }
    let l = graph.num_quantizable();
    let fp = QuantScheme::fp32(l);
    let base_acc = ev.evaluate_on(&fp, None)?.accuracy;
    let mut refs = Vec::new();
    for (label, b) in [("uniform-fp32", BitWidth::Fp32), ("uniform-int8", BitWidth::Int8), ("uniform-int4", BitWidth::Int4)] {
        let s = QuantScheme::uniform(l, b);
        let acc = if b == BitWidth::Fp32 { base_acc } else { ev.evaluate_on(&s, None)?.accuracy };
        refs.push((label, s.clone(), ev.ai(&s)?, acc));
    }
    let points: Vec<ParetoPoint> = mark_dominated(records);
    let mut rows: Vec<ParetoRow> = points
        .iter()
        .map(|p| ParetoRow {
            label: format!("lambda={}", p.record.lambda),
            scheme: p.record.scheme.to_string(),
            ai: p.record.ai,
            accuracy: p.record.accuracy,
            acc_loss_pp: p.record.acc_loss_pp,
            lambda: Some(p.record.lambda),
            combined_score: combined_score(&p.record),
            dominated: p.dominated,
        })
        .collect();
    for (label, s, ai, acc) in &refs {
        let dominated = points.iter().any(|p| {
            p.record.ai >= *ai && p.record.accuracy >= *acc && (p.record.ai > *ai || p.record.accuracy > *acc)
        });
        rows.push(ParetoRow {
            label: label.to_string(),
            scheme: s.to_string(),
            ai: *ai,
            accuracy: *acc,
            acc_loss_pp: 100.0 * (base_acc - acc),
            lambda: None,
            combined_score: ai * acc * 100.0,
            dominated,
        });
    }
    let mut csv = String::from("label,scheme,ai,accuracy,acc_loss_pp,lambda,combined_score,dominated\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},\"{}\",{:.6},{:.6},{:.4},{},{:.4},{}\n",
            r.label,
            r.scheme,
            r.ai,
            r.accuracy,
            r.acc_loss_pp,
            r.lambda.map_or(String::new(), |l| l.to_string()),
            r.combined_score,
            r.dominated
        ));
    }
    write(&out.join("pareto.csv"), csv)?;
    let references: Vec<Reference> = refs
        .iter()
        .map(|(label, _, ai, acc)| Reference {
            label: label.to_string(),
            ai: *ai,
            accuracy: *acc,
        })
        .collect();
    write(&out.join("pareto.svg"), pareto_svg(&points, &references))?;
    Ok(())
}

fn bench(a: &BenchArgs) -> CliResult<()> {
    let out = prepare_out(&a.common, "bench", a)?;
    let cfg = BenchConfig {
        batch: a.batch,
        runs: a.runs,
        warmup: a.warmup,
        threads: a.common.threads,
        iters_per_run: a.iters_per_run,
        measure_accuracy: a.data.is_some(),
    };
    cfg.validate()?;
    let stored;
    let graph_owned;
    let (graph, stored_view) = if a.scheme == "stored" {
        stored = io::load_packed_model(&a.model.model, &a.model.weights.clone().unwrap_or_else(|| a.model.model.with_extension("aiqw")))?;
        (&stored.graph, Some(stored.view()))
    } else {
        graph_owned = a.model.load()?;
        (&graph_owned, None)
    };
    let data = match &a.data {
        Some(p) => crate::DataArgs {
            data: p.clone(),
            format: aiq_core::dataset::DatasetFormat::Aiqd,
            labels: None,
        }
        .load(graph)?,
        None => zoo::teacher_dataset(graph, a.batch, a.batch, a.common.seed, a.common.threads)?,
    };
    let packs = PackCache::new(graph);
    let model = match stored_view {
        Some(v) => v,
        None => packs.model(&resolve_scheme(&a.scheme, graph)?)?,
    };
    let result = harness::measure_throughput(&model, &data, &cfg)?;
    println!("scheme={} images_per_s={:.3}", result.scheme, result.images_per_s);
    write(&out.join("throughput.json"), json(&result))?;
    if a.compare_random > 0 {
        let trials = harness::paired_trials(&packs, &model.scheme, a.random_bits, a.compare_random, a.common.seed, &data, &cfg)?;
        let wins = trials.iter().filter(|t| t.aiq_wins()).count();
        println!("scheme beat random matched-k in {wins}/{} trials", trials.len());
        write(&out.join("random_trials.json"), json(&trials))?;
    }
    Ok(())
}

fn cost(a: &CostArgs) -> CliResult<()> {
    let out = prepare_out(&a.common, "cost", a)?;
    let graph = a.model.load()?;
    let scheme = resolve_scheme(&a.scheme, &graph)?;
    let machine: Option<MachineModel> = match &a.machine {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| aiq_core::Error::Io {
                path: p.clone(),
                source: e,
            })?;
            let m: MachineModel =
                serde_json::from_str(&text).map_err(|e| aiq_core::Error::MalformedFile(format!("{}: {e}", p.display())))?;
            m.validate()?;
            Some(m)
        }
        None => None,
    };
    let report = CostTable::new(&graph, a.batch, a.traffic)?.report(&scheme)?;
    write(&out.join("cost.csv"), report.to_csv(machine.as_ref()))?;
    let roofline = machine.as_ref().map(|m| roofline_classify(&report, m));
    write(
        &out.join("cost.json"),
        json(&json!({
            "scheme": scheme,
            "batch": a.batch,
            "ai": report.ai,
            "flops": report.global_flops,
            "bytes": report.global_bytes,
            "weight_bytes": report.weight_bytes(),
            "roofline": roofline,
        })),
    )?;
    println!("ai={:.6} flops={} bytes={}", report.ai, report.global_flops, report.global_bytes);
    Ok(())
}

fn calibrate(a: &CalibrateArgs) -> CliResult<()> {
    let out = prepare_out(&a.common, "calibrate", a)?;
    let mut cfg = CalibrationConfig::for_host(a.common.threads);
    if !a.copy_mib.is_empty() {
        cfg.copy_bytes = a.copy_mib.iter().map(|m| m << 20).collect();
    }
    cfg.runs = a.runs;
    cfg.flop_iters = a.flop_iters;
    let c = harness::calibrate_machine(&cfg)?;
    write(&out.join("machine.json"), json(&c.machine))?;
    write(&out.join("calibration.json"), json(&c))?;
    println!(
        "peak_flops={:.3e} bandwidth={:.3e} B/s ridge={:.3} FLOPs/byte",
        c.machine.peak_flops,
        c.machine.mem_bandwidth,
        c.machine.ridge_point()
    );
    Ok(())
}

fn quantize(a: &QuantizeArgs) -> CliResult<()> {
    let out = prepare_out(&a.common, "quantize", a)?;
    let graph = a.model.load()?;
    let scheme = resolve_scheme(&a.scheme, &graph)?;
    let packs = PackCache::new(&graph);
    let model = packs.model(&scheme)?;
    io::save_packed_model(&model, &out.join(format!("{}.json", a.name)), &out.join(format!("{}.aiqw", a.name)))?;
    write(&out.join("scheme.json"), json(&scheme_file(&graph, &scheme)))?;
    println!("wrote {} with scheme {}", out.join(format!("{}.aiqw", a.name)).display(), scheme);
    Ok(())
}

fn gen_data(a: &GenDataArgs) -> CliResult<()> {
    let out = prepare_out(&a.common, "gen-data", a)?;
    let data: Dataset = match &a.teacher {
        Some(m) => {
            let graph = io::load_model(m, &m.with_extension("aiqw"))?;
            let candidates = a.candidates.max(a.n);
            zoo::teacher_dataset(&graph, candidates, a.n, a.common.seed, a.common.threads)?
        }
        None => synthetic_blobs(&SyntheticConfig {
            n: a.n,
            classes: a.classes,
            channels: a.channels,
            height: a.height,
            width: a.width,
            seed: a.common.seed,
            jitter: a.jitter,
            pixel_noise: a.pixel_noise,
            distractors: a.distractors,
            ..Default::default()
        }),
    };
    let path = out.join(format!("{}.aiqd", a.name));
    data.save_aiqd(&path)?;
    println!("wrote {} samples to {}", data.len(), path.display());
    Ok(())
}

fn zoo_cmd(a: &ZooArgs) -> CliResult<()> {
    let out = prepare_out(&a.common, "zoo", a)?;
    let seed = a.common.seed;
    let (default_name, graph): (&str, ModelGraph) = match a.arch {
        Arch::Resnet20 => ("resnet20", zoo::resnet20_cifar(seed)?),
        Arch::MiniResnet => ("mini_resnet", zoo::resnet20("mini-resnet", [8, 8, 16, 32], [3, 16, 16], 10, seed)?),
        Arch::HeavyEarly => ("heavy_early", zoo::heavy_early_resnet20(2, [3, 16, 16], seed)?),
        Arch::Plain => ("plain", zoo::plain_convnet20(16, [3, 16, 16], seed)?),
        Arch::MemoryStack => (
            "memory_stack",
            zoo::memory_bound_stack(&zoo::StackConfig::for_weight_bytes(a.weight_mib << 20, seed))?,
        ),
        Arch::Toy4 => ("toy4", zoo::toy4(seed)?),
    };
    let name = a.name.as_deref().unwrap_or(default_name);
    io::save_model(&graph, &out.join(format!("{name}.json")), &out.join(format!("{name}.aiqw")))?;
    println!("wrote {name} ({} quantizable layers)", graph.num_quantizable());
    Ok(())
}
