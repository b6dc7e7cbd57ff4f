//! Analytic FLOP and memory-traffic model, global arithmetic intensity and
//! roofline classification.
//!
//! Counting conventions:
//! - a multiply-accumulate is 2 FLOPs;
//! - activations are always 4 bytes per element (weight-only quantization);
//! - weights are read once per batch, packed at `bits / 8` bytes per element
//!   and rounded up to whole bytes per tensor; biases stay FP32;
//! - under [`TrafficModel::Fused`] (the default) only weight-bearing layers
//!   move activations through memory, elementwise/normalization/pool layers
//!   are assumed to run in the producer's epilogue and contribute FLOPs only.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Layer, LayerKind, ModelGraph};

/// Per-layer weight precision. Ordered by bit count, so `Int4 < Int8 < Fp32`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u32", try_from = "u32")]
pub enum BitWidth {
    Int4,
    Int8,
    Fp32,
}

impl BitWidth {
    pub const ALL: [BitWidth; 3] = [BitWidth::Fp32, BitWidth::Int8, BitWidth::Int4];

    pub fn bits(self) -> u32 {
        match self {
            BitWidth::Fp32 => 32,
            BitWidth::Int8 => 8,
            BitWidth::Int4 => 4,
        }
    }

    pub fn from_bits(bits: u32) -> Option<Self> {
        match bits {
            32 => Some(BitWidth::Fp32),
            8 => Some(BitWidth::Int8),
            4 => Some(BitWidth::Int4),
            _ => None,
        }
    }

    /// Packed storage for `elements` weights, rounded up to whole bytes.
    pub fn storage_bytes(self, elements: u64) -> u64 {
        (elements * self.bits() as u64).div_ceil(8)
    }
}

impl From<BitWidth> for u32 {
    fn from(b: BitWidth) -> u32 {
        b.bits()
    }
}

impl TryFrom<u32> for BitWidth {
    type Error = String;
    fn try_from(v: u32) -> std::result::Result<Self, String> {
        BitWidth::from_bits(v).ok_or_else(|| format!("unsupported bit-width {v}"))
    }
}

impl fmt::Display for BitWidth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.bits())
    }
}

impl FromStr for BitWidth {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "32" | "fp32" => Ok(BitWidth::Fp32),
            "8" | "int8" => Ok(BitWidth::Int8),
            "4" | "int4" => Ok(BitWidth::Int4),
            other => Err(format!("unsupported bit-width `{other}`")),
        }
    }
}

/// Parses "32,8,4" into a descending, de-duplicated bit set.
pub fn parse_bitset(s: &str) -> std::result::Result<Vec<BitWidth>, String> {
    let mut v = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(BitWidth::from_str)
        .collect::<std::result::Result<Vec<_>, _>>()?;
    v.sort_by(|a, b| b.cmp(a));
    v.dedup();
    if v.is_empty() {
        return Err("empty bit set".into());
    }
    Ok(v)
}

/// One bit-width per quantizable layer, indexed in topological order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QuantScheme(pub Vec<BitWidth>);

impl QuantScheme {
    pub fn uniform(len: usize, bits: BitWidth) -> Self {
        QuantScheme(vec![bits; len])
    }

    pub fn fp32(len: usize) -> Self {
        Self::uniform(len, BitWidth::Fp32)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn bits(&self) -> &[BitWidth] {
        &self.0
    }

    pub fn with(&self, layer: usize, bits: BitWidth) -> Self {
        let mut next = self.clone();
        next.0[layer] = bits;
        next
    }

    pub fn quantized_count(&self) -> usize {
        self.0.iter().filter(|b| **b != BitWidth::Fp32).count()
    }

    pub fn check_len(&self, expected: usize) -> Result<()> {
        if self.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                got: self.len(),
            });
        }
        Ok(())
    }
}

impl fmt::Display for QuantScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, b) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{b}")?;
        }
        Ok(())
    }
}

impl FromStr for QuantScheme {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        s.split(',')
            .filter(|p| !p.trim().is_empty())
            .map(BitWidth::from_str)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(QuantScheme)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrafficModel {
    /// Only Conv2d/Linear layers read and write activations.
    #[default]
    Fused,
    /// Every layer reads its inputs and writes its output.
    Unfused,
}

impl FromStr for TrafficModel {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "fused" => Ok(TrafficModel::Fused),
            "unfused" => Ok(TrafficModel::Unfused),
            other => Err(format!("unknown traffic model `{other}`")),
        }
    }
}

/// FLOPs and bytes moved by one layer for a given batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub flops: u64,
    pub weight_elements: u64,
    pub bias_elements: u64,
    pub act_in_bytes: u64,
    pub act_out_bytes: u64,
}

impl LayerCost {
    pub fn weight_bytes(&self, bits: BitWidth) -> u64 {
        if self.weight_elements == 0 {
            return 0;
        }
        bits.storage_bytes(self.weight_elements) + self.bias_elements * 4
    }

    pub fn act_bytes(&self) -> u64 {
        self.act_in_bytes + self.act_out_bytes
    }

    pub fn total_bytes(&self, bits: BitWidth) -> u64 {
        self.weight_bytes(bits) + self.act_bytes()
    }
}

pub fn layer_cost(layer: &Layer, batch: usize, traffic: TrafficModel) -> Result<LayerCost> {
    let (input, output) = layer.shapes()?;
    let b = batch.max(1) as u64;
    let in_elems: u64 = input.iter().product::<usize>() as u64;
    let out_elems: u64 = output.iter().product::<usize>() as u64;
    let (flops_per_sample, weight_elements, bias_elements, inputs_read) = match layer.kind {
        LayerKind::Conv2d {
            kernel_h,
            kernel_w,
            in_channels,
            groups,
            ..
        } => {
            let macs = (kernel_h * kernel_w * (in_channels / groups)) as u64 * out_elems;
            let w = layer.weight.as_ref().map_or(0, |t| t.numel() as u64);
            let bias = layer.bias.as_ref().map_or(0, |t| t.numel() as u64);
            (2 * macs, w, bias, 1)
        }
        LayerKind::Linear {
            in_features,
            out_features,
        } => {
            let w = layer.weight.as_ref().map_or(0, |t| t.numel() as u64);
            let bias = layer.bias.as_ref().map_or(0, |t| t.numel() as u64);
            (2 * (in_features * out_features) as u64, w, bias, 1)
        }
        LayerKind::BatchNorm2d { .. } => (2 * out_elems, 0, 0, 1),
        LayerKind::ReLU => (out_elems, 0, 0, 1),
        LayerKind::Add { .. } => (out_elems, 0, 0, 2),
        LayerKind::AvgPool2d { kernel, .. } => (out_elems * (kernel * kernel) as u64, 0, 0, 1),
        LayerKind::GlobalAvgPool => (in_elems, 0, 0, 1),
        LayerKind::Flatten => (0, 0, 0, 1),
    };
    let moves_activations = traffic == TrafficModel::Unfused || layer.kind.is_quantizable();
    let (act_in_bytes, act_out_bytes) = if moves_activations {
        (inputs_read * in_elems * 4 * b, out_elems * 4 * b)
    } else {
        (0, 0)
    };
    Ok(LayerCost {
        flops: flops_per_sample * b,
        weight_elements,
        bias_elements,
        act_in_bytes,
        act_out_bytes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Bound {
    MemoryBound,
    ComputeBound,
}

impl fmt::Display for Bound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Bound::MemoryBound => "memory",
            Bound::ComputeBound => "compute",
        })
    }
}

/// Roofline parameters of a machine.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MachineModel {
    pub peak_flops: f64,
    #[serde(rename = "mem_bandwidth_bytes_per_s")]
    pub mem_bandwidth: f64,
}

impl MachineModel {
    pub fn new(peak_flops: f64, mem_bandwidth: f64) -> Result<Self> {
        let m = Self {
            peak_flops,
            mem_bandwidth,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak_flops > 0.0 && self.mem_bandwidth > 0.0)
            || !self.peak_flops.is_finite()
            || !self.mem_bandwidth.is_finite()
        {
            return Err(Error::ConfigInvalid(
                "machine model needs positive peak_flops and bandwidth".into(),
            ));
        }
        Ok(())
    }

    pub fn ridge_point(&self) -> f64 {
        self.peak_flops / self.mem_bandwidth
    }

    /// `min(peak, ai * bandwidth)`; an infinite AI reaches the compute roof.
    pub fn attainable_flops(&self, ai: f64) -> f64 {
        if ai.is_infinite() {
            return self.peak_flops;
        }
        self.peak_flops.min(ai * self.mem_bandwidth)
    }

    /// Layers at exactly the ridge point count as compute-bound.
    pub fn classify(&self, ai: f64) -> Bound {
        if ai < self.ridge_point() {
            Bound::MemoryBound
        } else {
            Bound::ComputeBound
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerCostRow {
    pub layer_id: String,
    pub kind: &'static str,
    pub bits: Option<BitWidth>,
    pub cost: LayerCost,
    pub weight_bytes: u64,
    pub total_bytes: u64,
}

impl LayerCostRow {
    /// Layer AI; layers that move no bytes report infinity.
    pub fn ai(&self) -> f64 {
        if self.total_bytes == 0 {
            f64::INFINITY
        } else {
            self.cost.flops as f64 / self.total_bytes as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub batch: usize,
    pub traffic: TrafficModel,
    pub layers: Vec<LayerCostRow>,
    pub global_flops: u64,
    pub global_bytes: u64,
    pub ai: f64,
}

impl CostReport {
    pub fn flops_per_image(&self) -> f64 {
        self.global_flops as f64 / self.batch as f64
    }

    pub fn weight_bytes(&self) -> u64 {
        self.layers.iter().map(|l| l.weight_bytes).sum()
    }

    pub fn to_csv(&self, machine: Option<&MachineModel>) -> String {
        let mut out = String::from("layer_id,kind,flops,weight_bytes,act_bytes,ai,bound\n");
        for row in &self.layers {
            let ai = row.ai();
            let bound = machine.map_or_else(|| "-".to_string(), |m| m.classify(ai).to_string());
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                row.layer_id,
                row.kind,
                row.cost.flops,
                row.weight_bytes,
                row.cost.act_bytes(),
                fmt_ai(ai),
                bound
            ));
        }
        out
    }
}

fn fmt_ai(ai: f64) -> String {
    if ai.is_infinite() {
        "inf".into()
    } else {
        format!("{ai:.6}")
    }
}

/// Per-layer costs of a graph at a batch size; independent of the scheme.
#[derive(Debug, Clone)]
pub struct CostTable {
    batch: usize,
    traffic: TrafficModel,
    rows: Vec<(String, &'static str, LayerCost)>,
    quantizable: Vec<usize>,
}

impl CostTable {
    pub fn new(graph: &ModelGraph, batch: usize, traffic: TrafficModel) -> Result<Self> {
        if graph.layers.is_empty() {
            return Err(Error::EmptyModel);
        }
        let rows = graph
            .layers
            .iter()
            .map(|l| Ok((l.id.clone(), l.kind.name(), layer_cost(l, batch, traffic)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            batch: batch.max(1),
            traffic,
            rows,
            quantizable: graph.quantizable_indices(),
        })
    }

    pub fn num_quantizable(&self) -> usize {
        self.quantizable.len()
    }

    pub fn layer(&self, idx: usize) -> &LayerCost {
        &self.rows[idx].2
    }

    /// Cost of quantizable layer `i` (scheme coordinate).
    pub fn quantizable(&self, i: usize) -> &LayerCost {
        &self.rows[self.quantizable[i]].2
    }

    fn bits_per_layer(&self, scheme: &QuantScheme) -> Result<Vec<Option<BitWidth>>> {
        scheme.check_len(self.quantizable.len())?;
        let mut bits = vec![None; self.rows.len()];
        for (q, &idx) in self.quantizable.iter().enumerate() {
            bits[idx] = Some(scheme.0[q]);
        }
        Ok(bits)
    }

    /// Global AI without building the per-layer report.
    pub fn ai(&self, scheme: &QuantScheme) -> Result<f64> {
        let bits = self.bits_per_layer(scheme)?;
        let (mut flops, mut bytes) = (0u64, 0u64);
        for ((_, _, c), b) in self.rows.iter().zip(&bits) {
            flops += c.flops;
            bytes += c.total_bytes(b.unwrap_or(BitWidth::Fp32));
        }
        Ok(flops as f64 / bytes as f64)
    }

    pub fn report(&self, scheme: &QuantScheme) -> Result<CostReport> {
        let bits = self.bits_per_layer(scheme)?;
        let layers: Vec<LayerCostRow> = self
            .rows
            .iter()
            .zip(&bits)
            .map(|((id, kind, c), b)| {
                let eff = b.unwrap_or(BitWidth::Fp32);
                LayerCostRow {
                    layer_id: id.clone(),
                    kind,
                    bits: *b,
                    cost: *c,
                    weight_bytes: c.weight_bytes(eff),
                    total_bytes: c.total_bytes(eff),
                }
            })
            .collect();
        let global_flops = layers.iter().map(|l| l.cost.flops).sum();
        let global_bytes: u64 = layers.iter().map(|l| l.total_bytes).sum();
        Ok(CostReport {
            batch: self.batch,
            traffic: self.traffic,
            global_flops,
            global_bytes,
            ai: global_flops as f64 / global_bytes as f64,
            layers,
        })
    }
}

/// Global arithmetic intensity of `graph` under `scheme`.
pub fn global_ai(
    graph: &ModelGraph,
    scheme: &QuantScheme,
    batch: usize,
    traffic: TrafficModel,
) -> Result<CostReport> {
    if graph.layers.is_empty() {
        return Err(Error::EmptyModel);
    }
    CostTable::new(graph, batch, traffic)?.report(scheme)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RooflineLayer {
    pub layer_id: String,
    pub ai: f64,
    pub bound: Bound,
    pub attainable_flops: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RooflineReport {
    pub layers: Vec<RooflineLayer>,
    pub model_bound: Bound,
    pub attainable_flops: f64,
    pub attainable_images_per_s: f64,
}

pub fn roofline_classify(report: &CostReport, machine: &MachineModel) -> RooflineReport {
    let layers = report
        .layers
        .iter()
        .map(|l| {
            let ai = l.ai();
            RooflineLayer {
                layer_id: l.layer_id.clone(),
                ai,
                bound: machine.classify(ai),
                attainable_flops: machine.attainable_flops(ai),
            }
        })
        .collect();
    let attainable = machine.attainable_flops(report.ai);
    RooflineReport {
        layers,
        model_bound: machine.classify(report.ai),
        attainable_flops: attainable,
        attainable_images_per_s: attainable / report.flops_per_image(),
    }
}
