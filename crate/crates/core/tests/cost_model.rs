//! Cost model against closed-form oracles that work from the manifest text
//! rather than the parsed graph.

mod common;

use aiq_core::io::to_manifest;
use aiq_core::{zoo, BitWidth, CostTable, ModelGraph, QuantScheme, TrafficModel};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

fn prod(v: &Value) -> u64 {
    v.as_array().unwrap().iter().map(|x| x.as_u64().unwrap()).product()
}

/// (flops, bytes) summed over the manifest's layers.
fn oracle(graph: &ModelGraph, scheme: &QuantScheme, batch: u64, fused: bool) -> (u64, u64) {
    let (manifest, _) = to_manifest(graph, None);
    let m = serde_json::to_value(&manifest).unwrap();
    let (mut flops, mut bytes, mut coord) = (0u64, 0u64, 0usize);
    for l in m["layers"].as_array().unwrap() {
        let p = &l["params"];
        let get = |k: &str| p[k].as_u64().unwrap();
        let (ins, outs) = (prod(&l["input_shape"]), prod(&l["output_shape"]));
        let kind = l["kind"].as_str().unwrap();
        let (f, w, b) = match kind {
            "conv2d" => {
                let per = get("kernel_h") * get("kernel_w") * get("in_channels") / get("groups");
                let bias = if l["bias"].is_null() { 0 } else { get("out_channels") };
                (2 * per * outs, get("out_channels") * per, bias)
            }
            "linear" => {
                let w = get("in_features") * get("out_features");
                (2 * w, w, if l["bias"].is_null() { 0 } else { get("out_features") })
            }
            "batchnorm2d" => (2 * outs, 0, 0),
            "relu" | "add" => (outs, 0, 0),
            "global_avg_pool" => (ins, 0, 0),
            "avgpool2d" => (outs * get("kernel") * get("kernel"), 0, 0),
            "flatten" => (0, 0, 0),
            other => panic!("unexpected kind {other}"),
        };
        flops += f * batch;
        let quantizable = kind == "conv2d" || kind == "linear";
        if quantizable {
            let bits = scheme.bits()[coord].bits() as u64;
            bytes += (w * bits).div_ceil(8) + 4 * b;
            coord += 1;
        }
        if quantizable || !fused {
            let reads = if kind == "add" { 2 * ins } else { ins };
            bytes += 4 * batch * (reads + outs);
        }
    }
    (flops, bytes)
}

#[test]
fn resnet20_matches_independent_script() {
    let g = common::load_fixture_model("resnet20");
    assert_eq!(g.num_quantizable(), 20);
    let golden = common::read_json("resnet20_cost_golden.json");
    for e in golden["entries"].as_array().unwrap() {
        let traffic = if e["traffic"] == "fused" { TrafficModel::Fused } else { TrafficModel::Unfused };
        let batch = e["batch"].as_u64().unwrap() as usize;
        let bits = BitWidth::from_bits(e["bits"].as_u64().unwrap() as u32).unwrap();
        let report = CostTable::new(&g, batch, traffic).unwrap().report(&QuantScheme::uniform(20, bits)).unwrap();
        assert_eq!(report.global_flops, e["flops"].as_u64().unwrap(), "{e}");
        assert_eq!(report.global_bytes, e["bytes"].as_u64().unwrap(), "{e}");
        let ai = e["ai"].as_f64().unwrap();
        assert!((report.ai - ai).abs() <= 1e-12 * ai, "{} vs {ai}", report.ai);
    }
}

#[test]
fn baseline_ai_of_resnet20_fixture() {
    let g = common::load_fixture_model("resnet20");
    let costs = CostTable::new(&g, 1, TrafficModel::Fused).unwrap();
    let a0 = costs.ai(&QuantScheme::fp32(20)).unwrap();
    let golden = common::read_json("resnet20_cost_golden.json");
    let expected = golden["entries"][0]["ai"].as_f64().unwrap();
    assert_eq!(golden["entries"][0]["bits"], 32);
    assert!((a0 - expected).abs() <= 1e-12 * expected);
    let gain = costs.ai(&QuantScheme::uniform(20, BitWidth::Int8)).unwrap() / a0;
    assert!((1.30..=1.60).contains(&gain), "INT8 AI gain {gain}");
}

fn random_graph(rng: &mut ChaCha8Rng) -> ModelGraph {
    match rng.gen_range(0..3) {
        0 => {
            let dims: Vec<usize> = (0..rng.gen_range(2..6)).map(|_| rng.gen_range(1..40)).collect();
            zoo::mlp("m", &dims, rng.gen()).unwrap()
        }
        1 => {
            let w = [rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(1..8), rng.gen_range(1..8)];
            zoo::resnet20("r", w, [rng.gen_range(1..4), 8, 8], rng.gen_range(2..12), rng.gen()).unwrap()
        }
        _ => zoo::plain_convnet20(rng.gen_range(1..6), [2, 6, 6], rng.gen()).unwrap(),
    }
}

fn random_scheme(rng: &mut ChaCha8Rng, l: usize) -> QuantScheme {
    QuantScheme((0..l).map(|_| BitWidth::ALL[rng.gen_range(0..3)]).collect())
}

#[test]
fn randomized_graphs_match_oracle_and_are_additive() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..60 {
        let g = random_graph(&mut rng);
        let l = g.num_quantizable();
        for traffic in [TrafficModel::Fused, TrafficModel::Unfused] {
            let batch = rng.gen_range(1..5);
            let costs = CostTable::new(&g, batch, traffic).unwrap();
            let s = random_scheme(&mut rng, l);
            let report = costs.report(&s).unwrap();
            let (f, b) = oracle(&g, &s, batch as u64, traffic == TrafficModel::Fused);
            assert_eq!((report.global_flops, report.global_bytes), (f, b));
            let row_bytes: u64 = report.layers.iter().map(|r| r.total_bytes).sum();
            let row_flops: u64 = report.layers.iter().map(|r| r.cost.flops).sum();
            assert_eq!((row_flops, row_bytes), (f, b));
        }
    }
}

#[test]
fn ai_is_monotone_under_single_coordinate_reduction() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let graphs: Vec<ModelGraph> = (0..10).map(|_| random_graph(&mut rng)).collect();
    let tables: Vec<CostTable> = graphs.iter().map(|g| CostTable::new(g, 1, TrafficModel::Fused).unwrap()).collect();
    for _ in 0..1000 {
        let t = &tables[rng.gen_range(0..tables.len())];
        let l = t.num_quantizable();
        let s = random_scheme(&mut rng, l);
        let i = rng.gen_range(0..l);
        let lower: Vec<BitWidth> = BitWidth::ALL.into_iter().filter(|b| *b < s.bits()[i]).collect();
        if let Some(&b) = lower.first() {
            assert!(t.ai(&s.with(i, b)).unwrap() >= t.ai(&s).unwrap());
        }
    }
}

proptest! {
    #[test]
    fn int4_never_below_int8_never_below_fp32(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(&mut rng);
        let l = g.num_quantizable();
        let t = CostTable::new(&g, 1, TrafficModel::Fused).unwrap();
        let ai = |b| t.ai(&QuantScheme::uniform(l, b)).unwrap();
        prop_assert!(ai(BitWidth::Int4) >= ai(BitWidth::Int8));
        prop_assert!(ai(BitWidth::Int8) > ai(BitWidth::Fp32));
    }
}
