//! Layerwise sensitivity: quantize one layer at a time and record the
//! resulting AI and accuracy, plus structural statistics of a scheme.
//!
//! Accuracy deltas are `acc_fp32 - acc_quantized` in percentage points, so a
//! positive delta is an accuracy loss.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cost::{BitWidth, CostTable, QuantScheme, TrafficModel};
use crate::error::Result;
use crate::eval::acc_loss_pp;
use crate::graph::ModelGraph;
use crate::search::{ModelEvaluator, SchemeEvaluator};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub layer_id: String,
    pub coord: usize,
    pub ai: f64,
    pub accuracy: f64,
    pub delta_pp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerProfile {
    pub bits: BitWidth,
    pub baseline_ai: f64,
    pub baseline_accuracy: f64,
    pub rows: Vec<ProfileRow>,
}

impl LayerProfile {
    pub const CSV_HEADER: &'static str = "layer,index,ai,accuracy,delta_pp";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            writeln!(out, "{},{},{:.6},{:.6},{:.4}", r.layer_id, r.coord, r.ai, r.accuracy, r.delta_pp).unwrap();
        }
        out
    }
}

/// Evaluates `(FP32, .., bits at i, .., FP32)` for every quantizable layer
/// `i`: one baseline evaluation plus one per layer.
pub fn layerwise_profile(ev: &ModelEvaluator<'_>, bits: BitWidth) -> Result<LayerProfile> {
    let l = ev.num_layers();
    let fp = QuantScheme::fp32(l);
    ev.set_anchor(&fp)?;
    let baseline_ai = ev.ai(&fp)?;
    let baseline_accuracy = ev.accuracy(&fp)?;
    let ids = ev.graph().quantizable_layers();
    let rows = (0..l)
        .map(|i| {
            let s = fp.with(i, bits);
            let accuracy = ev.accuracy(&s)?;
            Ok(ProfileRow {
                layer_id: ids[i].to_string(),
                coord: i,
                ai: ev.ai(&s)?,
                accuracy,
                delta_pp: acc_loss_pp(baseline_accuracy, accuracy),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LayerProfile {
        bits,
        baseline_ai,
        baseline_accuracy,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub layer_id: String,
    pub delta_acc_int8: f64,
    pub delta_acc_int4: f64,
    pub ai_int8: f64,
    pub ai_int4: f64,
    pub final_bits: Option<BitWidth>,
}

/// Joins INT8 and INT4 profiles (same baseline) with an optional searched
/// scheme.
pub fn sensitivity_table(int8: &LayerProfile, int4: &LayerProfile, final_scheme: Option<&QuantScheme>) -> Vec<SensitivityRow> {
    int8.rows
        .iter()
        .zip(&int4.rows)
        .map(|(a, b)| SensitivityRow {
            layer_id: a.layer_id.clone(),
            delta_acc_int8: a.delta_pp,
            delta_acc_int4: b.delta_pp,
            ai_int8: a.ai,
            ai_int4: b.ai,
            final_bits: final_scheme.map(|s| s.bits()[a.coord]),
        })
        .collect()
}

pub fn sensitivity_csv(rows: &[SensitivityRow]) -> String {
    let mut out = String::from("layer,delta_8b,delta_4b,final_bits\n");
    for r in rows {
        let bits = r.final_bits.map_or(String::new(), |b| b.bits().to_string());
        writeln!(out, "{},{:.4},{:.4},{}", r.layer_id, r.delta_acc_int8, r.delta_acc_int4, bits).unwrap();
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStat {
    pub layer_id: String,
    pub depth: usize,
    pub channels: usize,
    pub weight_bytes_fp32: u64,
    pub bits: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeStatistics {
    pub layers: Vec<LayerStat>,
    /// Spearman correlation between FP32 weight bytes and assigned bits;
    /// `None` when either is constant.
    pub size_bits_correlation: Option<f64>,
    pub depth_bits_correlation: Option<f64>,
}

pub fn scheme_statistics(graph: &ModelGraph, scheme: &QuantScheme) -> Result<SchemeStatistics> {
    scheme.check_len(graph.num_quantizable())?;
    let costs = CostTable::new(graph, 1, TrafficModel::Fused)?;
    let layers: Vec<LayerStat> = graph
        .quantizable_indices()
        .into_iter()
        .enumerate()
        .map(|(i, idx)| LayerStat {
            layer_id: graph.layers[idx].id.clone(),
            depth: i,
            channels: graph.layers[idx].width(),
            weight_bytes_fp32: costs.quantizable(i).weight_bytes(BitWidth::Fp32),
            bits: scheme.bits()[i].bits(),
        })
        .collect();
    let bits: Vec<f64> = layers.iter().map(|l| l.bits as f64).collect();
    let size: Vec<f64> = layers.iter().map(|l| l.weight_bytes_fp32 as f64).collect();
    let depth: Vec<f64> = layers.iter().map(|l| l.depth as f64).collect();
    Ok(SchemeStatistics {
        size_bits_correlation: spearman(&size, &bits),
        depth_bits_correlation: spearman(&depth, &bits),
        layers,
    })
}

/// Ranks starting at 1; ties share their average rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|a, b| v[*a].total_cmp(&v[*b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            out[order[k]] = avg;
        }
        i = j + 1;
    }
    out
}

pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synthetic_blobs, SyntheticConfig};
    use crate::search::EvaluatorConfig;
    use crate::zoo;

    #[test]
    fn spearman_basics() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]), None);
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn constant_scheme_has_no_correlation() {
        let g = zoo::resnet20("t", [4, 4, 8, 8], [3, 8, 8], 10, 0).unwrap();
        let s = scheme_statistics(&g, &QuantScheme::fp32(20)).unwrap();
        assert_eq!(s.size_bits_correlation, None);
        assert_eq!(s.depth_bits_correlation, None);
        assert_eq!(s.layers.len(), 20);
    }

    #[test]
    fn quantizing_largest_half_gives_negative_size_correlation() {
        let g = zoo::resnet20("t", [4, 4, 8, 16], [3, 8, 8], 10, 0).unwrap();
        let base = scheme_statistics(&g, &QuantScheme::fp32(20)).unwrap();
        let mut sizes: Vec<(u64, usize)> = base.layers.iter().map(|l| (l.weight_bytes_fp32, l.depth)).collect();
        sizes.sort_by(|a, b| b.cmp(a));
        let mut scheme = QuantScheme::fp32(20);
        for (_, d) in sizes.iter().take(10) {
            scheme = scheme.with(*d, BitWidth::Int4);
        }
        let s = scheme_statistics(&g, &scheme).unwrap();
        assert!(s.size_bits_correlation.unwrap() < 0.0);
    }

    #[test]
    fn fp32_profile_is_flat_and_matches_cost_model() {
        let g = zoo::resnet20("t", [4, 4, 8, 8], [3, 8, 8], 10, 3).unwrap();
        let data = synthetic_blobs(&SyntheticConfig {
            n: 40,
            height: 8,
            width: 8,
            ..Default::default()
        });
        let ev = ModelEvaluator::new(
            &g,
            &data,
            &EvaluatorConfig {
                subset_size: 40,
                ..Default::default()
            },
        )
        .unwrap();
        let p = layerwise_profile(&ev, BitWidth::Fp32).unwrap();
        assert_eq!(p.rows.len(), 20);
        assert!(p.rows.iter().all(|r| r.delta_pp == 0.0 && r.ai == p.baseline_ai));
        let p4 = layerwise_profile(&ev, BitWidth::Int4).unwrap();
        for r in &p4.rows {
            assert_eq!(r.ai, ev.costs().ai(&QuantScheme::fp32(20).with(r.coord, BitWidth::Int4)).unwrap());
        }
        let table = sensitivity_table(&p, &p4, None);
        let csv = sensitivity_csv(&table);
        assert_eq!(csv.lines().count(), 21);
        assert!(csv.starts_with("layer,delta_8b,delta_4b,final_bits\n"));
    }
}
