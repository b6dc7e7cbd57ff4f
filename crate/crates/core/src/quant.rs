//! Per-tensor symmetric weight quantization, INT4 nibble packing and
//! scheme application.
//!
//! Codes use the restricted range `[-qmax, qmax]` (127 for INT8, 7 for INT4)
//! with `scale = max|w| / qmax` and round-half-away-from-zero, so negating a
//! tensor negates its codes.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cost::{BitWidth, QuantScheme};
use crate::error::{Error, Result};
use crate::graph::ModelGraph;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f32,
    pub bits: BitWidth,
}

impl QuantParams {
    pub fn qmax(&self) -> i32 {
        qmax(self.bits)
    }

    pub fn qmin(&self) -> i32 {
        -self.qmax()
    }
}

fn qmax(bits: BitWidth) -> i32 {
    match bits {
        BitWidth::Int8 => 127,
        BitWidth::Int4 => 7,
        BitWidth::Fp32 => unreachable!("fp32 has no integer range"),
    }
}

/// Low-precision codes in their physical storage layout.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedTensor {
    pub shape: Vec<usize>,
    pub params: QuantParams,
    /// INT8: one two's-complement byte per code. INT4: two codes per byte,
    /// even index in the low nibble.
    pub data: Vec<u8>,
}

impl PackedTensor {
    pub fn from_codes(shape: Vec<usize>, params: QuantParams, codes: &[i8]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != codes.len() {
            return Err(Error::shape("packed", &shape, &[codes.len()]));
        }
        let q = params.qmax() as i8;
        if codes.iter().any(|c| *c < -q || *c > q) {
            return Err(Error::MalformedFile("code outside quantization range".into()));
        }
        let data = match params.bits {
            BitWidth::Int8 => codes.iter().map(|c| *c as u8).collect(),
            BitWidth::Int4 => pack_int4(codes),
            BitWidth::Fp32 => return Err(Error::ConfigInvalid("fp32 is not a packed format".into())),
        };
        Ok(Self {
            shape,
            params,
            data,
        })
    }

    /// Wraps raw storage bytes, validating length and code range.
    pub fn from_raw(shape: Vec<usize>, params: QuantParams, data: Vec<u8>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() as u64 != params.bits.storage_bytes(n as u64) {
            return Err(Error::MalformedFile(format!(
                "packed tensor of {n} elements at {} bits needs {} bytes, got {}",
                params.bits,
                params.bits.storage_bytes(n as u64),
                data.len()
            )));
        }
        let t = Self {
            shape,
            params,
            data,
        };
        let q = params.qmax() as i8;
        if t.codes().iter().any(|c| *c < -q || *c > q) {
            return Err(Error::MalformedFile("code outside quantization range".into()));
        }
        Ok(t)
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn byte_len(&self) -> usize {
        self.data.len()
    }

    pub fn codes(&self) -> Vec<i8> {
        match self.params.bits {
            BitWidth::Int8 => self.data.iter().map(|b| *b as i8).collect(),
            BitWidth::Int4 => unpack_int4(&self.data, self.numel()),
            BitWidth::Fp32 => unreachable!(),
        }
    }

    /// Dequantizes elements `[start, start + out.len())` into `out`.
    #[inline]
    pub fn dequantize_into(&self, start: usize, out: &mut [f32]) {
        let scale = self.params.scale;
        match self.params.bits {
            BitWidth::Int8 => {
                let src = &self.data[start..start + out.len()];
                for (o, c) in out.iter_mut().zip(src) {
                    *o = (*c as i8) as f32 * scale;
                }
            }
            BitWidth::Int4 => {
                let mut i = 0;
                let mut idx = start;
                if idx % 2 == 1 && i < out.len() {
                    out[i] = nibble(self.data[idx / 2] >> 4) as f32 * scale;
                    i += 1;
                    idx += 1;
                }
                let pairs = (out.len() - i) / 2;
                let bytes = &self.data[idx / 2..idx / 2 + pairs];
                for (pair, byte) in out[i..i + 2 * pairs].chunks_exact_mut(2).zip(bytes) {
                    pair[0] = nibble(*byte) as f32 * scale;
                    pair[1] = nibble(*byte >> 4) as f32 * scale;
                }
                i += 2 * pairs;
                idx += 2 * pairs;
                if i < out.len() {
                    out[i] = nibble(self.data[idx / 2]) as f32 * scale;
                }
            }
            BitWidth::Fp32 => unreachable!(),
        }
    }
}

#[inline(always)]
fn nibble(b: u8) -> i8 {
    // sign-extend the low 4 bits
    ((b << 4) as i8) >> 4
}

pub fn pack_int4(codes: &[i8]) -> Vec<u8> {
    codes
        .chunks(2)
        .map(|pair| {
            let lo = pair[0] as u8 & 0x0f;
            let hi = pair.get(1).map_or(0, |c| *c as u8 & 0x0f);
            lo | (hi << 4)
        })
        .collect()
}

pub fn unpack_int4(bytes: &[u8], n: usize) -> Vec<i8> {
    let mut out = Vec::with_capacity(n);
    for b in bytes {
        out.push(nibble(*b));
        out.push(nibble(*b >> 4));
    }
    out.truncate(n);
    out
}

pub fn quant_params(weight: &Tensor, bits: BitWidth) -> Result<QuantParams> {
    if bits == BitWidth::Fp32 {
        return Err(Error::ConfigInvalid("fp32 weights are not quantized".into()));
    }
    let max = weight.max_abs();
    let scale = if max > 0.0 { max / qmax(bits) as f32 } else { 1.0 };
    Ok(QuantParams { scale, bits })
}

/// `clamp(round(w / scale), -qmax, qmax)` with `f32::round` (half away from zero).
pub fn quantize(weight: &Tensor, bits: BitWidth) -> Result<PackedTensor> {
    let params = quant_params(weight, bits)?;
    let q = params.qmax() as f32;
    let codes: Vec<i8> = weight
        .data()
        .iter()
        .map(|w| (w / params.scale).round().clamp(-q, q) as i8)
        .collect();
    PackedTensor::from_codes(weight.shape().to_vec(), params, &codes)
}

pub fn dequantize(packed: &PackedTensor) -> Tensor {
    let mut data = vec![0.0; packed.numel()];
    packed.dequantize_into(0, &mut data);
    Tensor::new(packed.shape.clone(), data).expect("shape matches element count")
}

/// Effective weights of one quantizable layer.
#[derive(Debug, Clone)]
pub enum LayerWeights {
    /// FP32 weights, either original or fake-quantized.
    Dense(Arc<Tensor>),
    /// Packed codes dequantized on the fly by the kernels.
    Packed(Arc<PackedTensor>),
}

impl LayerWeights {
    /// Bytes a kernel reads to stream these weights once.
    pub fn stored_bytes(&self) -> u64 {
        match self {
            LayerWeights::Dense(t) => t.numel() as u64 * 4,
            LayerWeights::Packed(p) => p.byte_len() as u64,
        }
    }

    pub fn numel(&self) -> usize {
        match self {
            LayerWeights::Dense(t) => t.numel(),
            LayerWeights::Packed(p) => p.numel(),
        }
    }

    /// Writes elements `[start, start + out.len())` as f32.
    #[inline]
    pub fn read_into(&self, start: usize, out: &mut [f32]) {
        match self {
            LayerWeights::Dense(t) => out.copy_from_slice(&t.data()[start..start + out.len()]),
            LayerWeights::Packed(p) => p.dequantize_into(start, out),
        }
    }
}

/// A read-only view of a graph with per-layer effective weights.
#[derive(Debug, Clone)]
pub struct QuantizedModel<'g> {
    pub graph: &'g ModelGraph,
    pub scheme: QuantScheme,
    /// Indexed by scheme coordinate.
    pub weights: Vec<LayerWeights>,
}

impl<'g> QuantizedModel<'g> {
    pub fn from_parts(graph: &'g ModelGraph, scheme: QuantScheme, weights: Vec<LayerWeights>) -> Result<Self> {
        scheme.check_len(graph.num_quantizable())?;
        scheme.check_len(weights.len())?;
        Ok(Self {
            graph,
            scheme,
            weights,
        })
    }

    /// Weights of the quantizable layer at graph index `layer_idx`.
    pub fn weights_for(&self, coord: usize) -> &LayerWeights {
        &self.weights[coord]
    }
}

fn original(graph: &ModelGraph, idx: usize) -> Arc<Tensor> {
    graph.layers[idx]
        .weight
        .clone()
        .expect("quantizable layers carry weights")
}

/// Fake-quantized view: `dequantize(quantize(w, q_i))` for `q_i < 32`, the
/// original tensor otherwise.
pub fn apply_scheme<'g>(graph: &'g ModelGraph, scheme: &QuantScheme) -> Result<QuantizedModel<'g>> {
    scheme.check_len(graph.num_quantizable())?;
    let weights = graph
        .quantizable_indices()
        .into_iter()
        .zip(scheme.bits())
        .map(|(idx, &b)| {
            let w = original(graph, idx);
            Ok(match b {
                BitWidth::Fp32 => LayerWeights::Dense(w),
                _ => LayerWeights::Dense(Arc::new(dequantize(&quantize(&w, b)?))),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    QuantizedModel::from_parts(graph, scheme.clone(), weights)
}

/// Packed-storage view: low-precision layers keep only their codes.
pub fn pack_scheme<'g>(graph: &'g ModelGraph, scheme: &QuantScheme) -> Result<QuantizedModel<'g>> {
    let cache = PackCache::new(graph);
    cache.model(scheme)
}

/// Lazily quantized per-(layer, bit-width) packed tensors, shared between
/// schemes so repeated evaluation never re-quantizes or copies weights.
#[derive(Debug)]
pub struct PackCache<'g> {
    graph: &'g ModelGraph,
    indices: Vec<usize>,
    slots: Vec<[std::sync::OnceLock<Arc<PackedTensor>>; 2]>,
}

impl<'g> PackCache<'g> {
    pub fn new(graph: &'g ModelGraph) -> Self {
        let indices = graph.quantizable_indices();
        let slots = indices.iter().map(|_| Default::default()).collect();
        Self {
            graph,
            indices,
            slots,
        }
    }

    pub fn graph(&self) -> &'g ModelGraph {
        self.graph
    }

    pub fn weights(&self, coord: usize, bits: BitWidth) -> Result<LayerWeights> {
        let idx = self.indices[coord];
        let slot = match bits {
            BitWidth::Fp32 => return Ok(LayerWeights::Dense(original(self.graph, idx))),
            BitWidth::Int8 => &self.slots[coord][0],
            BitWidth::Int4 => &self.slots[coord][1],
        };
        if let Some(p) = slot.get() {
            return Ok(LayerWeights::Packed(p.clone()));
        }
        let packed = Arc::new(quantize(&original(self.graph, idx), bits)?);
        Ok(LayerWeights::Packed(slot.get_or_init(|| packed).clone()))
    }

    pub fn model(&self, scheme: &QuantScheme) -> Result<QuantizedModel<'g>> {
        scheme.check_len(self.indices.len())?;
        let weights = scheme
            .bits()
            .iter()
            .enumerate()
            .map(|(i, &b)| self.weights(i, b))
            .collect::<Result<Vec<_>>>()?;
        QuantizedModel::from_parts(self.graph, scheme.clone(), weights)
    }
}
