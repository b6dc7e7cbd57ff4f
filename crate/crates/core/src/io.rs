//! JSON model manifests and the `AIQW` weights container.
//!
//! Container layout: magic `AIQW`, a little-endian u32 header length, a UTF-8
//! JSON header mapping tensor id to `{offset, shape, dtype[, scale]}`, then
//! the raw little-endian blobs. The data section starts at the first 64-byte
//! boundary after the header; offsets are relative to it and 64-byte aligned.
//! Dtypes are `f32`, `i8` (one code per byte) and `i4p` (two codes per byte,
//! even index in the low nibble).

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Cursor, Read, Seek, SeekFrom, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::cost::{BitWidth, QuantScheme};
use crate::error::{Error, Result};
use crate::graph::{Layer, LayerKind, ModelGraph, Normalization};
use crate::quant::{dequantize, LayerWeights, PackedTensor, QuantParams, QuantizedModel};
use crate::tensor::Tensor;

pub const AIQW_MAGIC: &[u8; 4] = b"AIQW";
const ALIGN: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub input_shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<Normalization>,
    pub layers: Vec<LayerEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub id: String,
    pub kind: String,
    #[serde(default)]
    pub params: Map<String, Value>,
    #[serde(default)]
    pub weight: Option<String>,
    #[serde(default)]
    pub bias: Option<String>,
    #[serde(default)]
    pub residual_from: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_shape: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_shape: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    F32(Arc<Tensor>),
    Packed(Arc<PackedTensor>),
}

impl From<Tensor> for StoredTensor {
    fn from(t: Tensor) -> Self {
        StoredTensor::F32(Arc::new(t))
    }
}

impl StoredTensor {
    fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::Packed(p) => &p.shape,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct HeaderEntry {
    offset: u64,
    shape: Vec<usize>,
    dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scale: Option<f32>,
}

fn align(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

pub fn write_weights(tensors: &BTreeMap<String, StoredTensor>) -> Vec<u8> {
    let mut out = Vec::new();
    write_weights_to(&mut out, tensors).expect("writing to memory cannot fail");
    out
}

/// Streams a container, so writing never holds a second copy of the weights.
pub fn write_weights_to<W: Write>(out: &mut W, tensors: &BTreeMap<String, StoredTensor>) -> std::io::Result<()> {
    let mut header = BTreeMap::new();
    let mut offset = 0usize;
    for (id, t) in tensors {
        let (dtype, scale, len) = match t {
            StoredTensor::F32(t) => ("f32", None, 4 * t.numel()),
            StoredTensor::Packed(p) => {
                let dtype = if p.params.bits == BitWidth::Int8 { "i8" } else { "i4p" };
                (dtype, Some(p.params.scale), p.data.len())
            }
        };
        header.insert(
            id.clone(),
            HeaderEntry {
                offset: offset as u64,
                shape: t.shape().to_vec(),
                dtype: dtype.into(),
                scale,
            },
        );
        offset = align(offset + len);
    }
    let header = serde_json::to_vec(&header).expect("header serializes");
    let data_start = align(8 + header.len());
    out.write_all(AIQW_MAGIC)?;
    out.write_all(&(header.len() as u32).to_le_bytes())?;
    out.write_all(&header)?;
    let mut written = 8 + header.len();
    let zeros = [0u8; ALIGN];
    let pad_to = |out: &mut W, written: &mut usize, target: usize| -> std::io::Result<()> {
        out.write_all(&zeros[..target - *written])?;
        *written = target;
        Ok(())
    };
    pad_to(out, &mut written, data_start)?;
    for t in tensors.values() {
        let start = align(written);
        pad_to(out, &mut written, start)?;
        match t {
            StoredTensor::F32(t) => {
                let mut buf = Vec::with_capacity(4 * 4096);
                for chunk in t.data().chunks(4096) {
                    buf.clear();
                    buf.extend(chunk.iter().flat_map(|v| v.to_le_bytes()));
                    out.write_all(&buf)?;
                }
                written += 4 * t.numel();
            }
            StoredTensor::Packed(p) => {
                out.write_all(&p.data)?;
                written += p.data.len();
            }
        }
    }
    let end = align(written);
    pad_to(out, &mut written, end)
}

pub fn read_weights(bytes: &[u8]) -> Result<BTreeMap<String, StoredTensor>> {
    read_weights_from(&mut Cursor::new(bytes))
}

/// Reads a container blob by blob, without buffering the whole file.
pub fn read_weights_from<R: Read + Seek>(r: &mut R) -> Result<BTreeMap<String, StoredTensor>> {
    let bad = |m: &str| Error::MalformedFile(format!("AIQW: {m}"));
    let mut head = [0u8; 8];
    r.read_exact(&mut head).map_err(|_| bad("bad magic"))?;
    if &head[..4] != AIQW_MAGIC {
        return Err(bad("bad magic"));
    }
    let hlen = u32::from_le_bytes(head[4..8].try_into().unwrap()) as usize;
    let mut header_bytes = vec![0u8; hlen];
    r.read_exact(&mut header_bytes).map_err(|_| bad("truncated header"))?;
    let header: BTreeMap<String, HeaderEntry> =
        serde_json::from_slice(&header_bytes).map_err(|e| bad(&format!("header json: {e}")))?;
    let data_start = align(8 + hlen) as u64;
    let mut out = BTreeMap::new();
    for (id, e) in header {
        if !(e.offset as usize).is_multiple_of(ALIGN) {
            return Err(bad(&format!("`{id}` is not 64-byte aligned")));
        }
        let n: usize = e.shape.iter().product();
        let len = match e.dtype.as_str() {
            "f32" => 4 * n,
            "i8" => n,
            "i4p" => n.div_ceil(2),
            other => return Err(bad(&format!("unknown dtype `{other}`"))),
        };
        let mut raw = vec![0u8; len];
        r.seek(SeekFrom::Start(data_start + e.offset))
            .and_then(|_| r.read_exact(&mut raw))
            .map_err(|_| bad(&format!("`{id}` truncated")))?;
        let t = if e.dtype == "f32" {
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            drop(raw);
            StoredTensor::F32(Arc::new(Tensor::new(e.shape, data)?))
        } else {
            let bits = if e.dtype == "i8" { BitWidth::Int8 } else { BitWidth::Int4 };
            let scale = e.scale.filter(|s| *s > 0.0 && s.is_finite()).ok_or_else(|| bad(&format!("`{id}` needs a positive scale")))?;
            StoredTensor::Packed(Arc::new(PackedTensor::from_raw(e.shape, QuantParams { scale, bits }, raw)?))
        };
        out.insert(id, t);
    }
    Ok(out)
}

fn param(entry: &LayerEntry, key: &str) -> Result<usize> {
    entry
        .params
        .get(key)
        .and_then(Value::as_u64)
        .map(|v| v as usize)
        .ok_or_else(|| Error::MalformedManifest(format!("`{}` needs integer param `{key}`", entry.id)))
}

fn param_or(entry: &LayerEntry, key: &str, default: usize) -> Result<usize> {
    if entry.params.contains_key(key) {
        param(entry, key)
    } else {
        Ok(default)
    }
}

fn str_param<'a>(entry: &'a LayerEntry, key: &str) -> Result<&'a str> {
    entry
        .params
        .get(key)
        .and_then(Value::as_str)
        .ok_or_else(|| Error::MalformedManifest(format!("`{}` needs tensor-id param `{key}`", entry.id)))
}

fn parse_kind(entry: &LayerEntry, index_of: &BTreeMap<&str, usize>) -> Result<LayerKind> {
    Ok(match entry.kind.as_str() {
        "conv2d" => {
            let k = param_or(entry, "kernel", 0)?;
            LayerKind::Conv2d {
                kernel_h: param_or(entry, "kernel_h", k)?,
                kernel_w: param_or(entry, "kernel_w", k)?,
                stride: param_or(entry, "stride", 1)?,
                padding: param_or(entry, "padding", 0)?,
                in_channels: param(entry, "in_channels")?,
                out_channels: param(entry, "out_channels")?,
                groups: param_or(entry, "groups", 1)?,
            }
        }
        "linear" => LayerKind::Linear {
            in_features: param(entry, "in_features")?,
            out_features: param(entry, "out_features")?,
        },
        "batchnorm2d" => LayerKind::BatchNorm2d {
            channels: param(entry, "channels")?,
        },
        "relu" => LayerKind::ReLU,
        "avgpool2d" => {
            let kernel = param(entry, "kernel")?;
            LayerKind::AvgPool2d {
                kernel,
                stride: param_or(entry, "stride", kernel)?,
            }
        }
        "global_avg_pool" => LayerKind::GlobalAvgPool,
        "flatten" => LayerKind::Flatten,
        "add" => {
            let src = entry
                .residual_from
                .as_deref()
                .ok_or_else(|| Error::MalformedManifest(format!("`{}` needs residual_from", entry.id)))?;
            let from = *index_of
                .get(src)
                .ok_or_else(|| Error::MalformedManifest(format!("`{}` adds from unknown or later layer `{src}`", entry.id)))?;
            LayerKind::Add { from }
        }
        other => return Err(Error::MalformedManifest(format!("unknown layer kind `{other}`"))),
    })
}

fn kind_params(layer: &Layer) -> Map<String, Value> {
    let v = match layer.kind {
        LayerKind::Conv2d {
            kernel_h,
            kernel_w,
            stride,
            padding,
            in_channels,
            out_channels,
            groups,
        } => json!({
            "kernel_h": kernel_h, "kernel_w": kernel_w, "stride": stride, "padding": padding,
            "in_channels": in_channels, "out_channels": out_channels, "groups": groups
        }),
        LayerKind::Linear {
            in_features,
            out_features,
        } => json!({"in_features": in_features, "out_features": out_features}),
        LayerKind::BatchNorm2d { channels } => json!({
            "channels": channels,
            "running_mean": format!("{}.running_mean", layer.id),
            "running_var": format!("{}.running_var", layer.id),
        }),
        LayerKind::AvgPool2d { kernel, stride } => json!({"kernel": kernel, "stride": stride}),
        _ => json!({}),
    };
    match v {
        Value::Object(m) => m,
        _ => unreachable!(),
    }
}

/// Builds a validated graph from a manifest and its tensors. Packed tensors
/// are accepted and dequantized; see [`load_packed_model`] to keep them packed.
pub fn build_graph(manifest: &Manifest, tensors: &BTreeMap<String, StoredTensor>) -> Result<ModelGraph> {
    let mut index_of = BTreeMap::new();
    let mut layers = Vec::with_capacity(manifest.layers.len());
    let fetch = |id: &str| -> Result<Arc<Tensor>> {
        match tensors.get(id) {
            Some(StoredTensor::F32(t)) => Ok(Arc::clone(t)),
            Some(StoredTensor::Packed(p)) => Ok(Arc::new(dequantize(p))),
            None => Err(Error::MissingTensor(id.to_string())),
        }
    };
    for (i, entry) in manifest.layers.iter().enumerate() {
        let kind = parse_kind(entry, &index_of)?;
        let mut layer = Layer::new(entry.id.clone(), kind);
        if let Some(w) = &entry.weight {
            layer.weight = Some(fetch(w)?);
        }
        if let Some(b) = &entry.bias {
            layer.bias = Some(fetch(b)?);
        }
        if matches!(kind, LayerKind::BatchNorm2d { .. }) {
            layer = layer.with_stats(
                (*fetch(str_param(entry, "running_mean")?)?).clone(),
                (*fetch(str_param(entry, "running_var")?)?).clone(),
            );
        }
        layer.input_shape = entry.input_shape.clone();
        layer.output_shape = entry.output_shape.clone();
        index_of.insert(entry.id.as_str(), i);
        layers.push(layer);
    }
    let mut g = ModelGraph::new(manifest.name.clone(), manifest.input_shape.clone(), layers)?;
    g.normalization = manifest.normalization.clone();
    Ok(g)
}

fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::MalformedManifest(e.to_string()))
}

fn read_container(path: &Path) -> Result<BTreeMap<String, StoredTensor>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_weights_from(&mut BufReader::new(file))
}

pub fn load_model(manifest_path: &Path, weights_path: &Path) -> Result<ModelGraph> {
    build_graph(&read_manifest(manifest_path)?, &read_container(weights_path)?)
}

/// Manifest and tensor map for a graph. Quantizable layers listed in
/// `packed` (by scheme coordinate) are stored packed.
pub fn to_manifest(graph: &ModelGraph, packed: Option<&[LayerWeights]>) -> (Manifest, BTreeMap<String, StoredTensor>) {
    let mut tensors = BTreeMap::new();
    let mut entries = Vec::with_capacity(graph.layers.len());
    let mut coord = 0;
    for layer in &graph.layers {
        let mut entry = LayerEntry {
            id: layer.id.clone(),
            kind: layer.kind.name().into(),
            params: kind_params(layer),
            weight: None,
            bias: None,
            residual_from: match layer.kind {
                LayerKind::Add { from } => Some(graph.layers[from].id.clone()),
                _ => None,
            },
            input_shape: layer.input_shape.clone(),
            output_shape: layer.output_shape.clone(),
        };
        if let Some(w) = &layer.weight {
            let id = format!("{}.weight", layer.id);
            let stored = match (layer.kind.is_quantizable(), packed) {
                (true, Some(p)) => match &p[coord] {
                    LayerWeights::Packed(pt) => StoredTensor::Packed(Arc::clone(pt)),
                    LayerWeights::Dense(t) => StoredTensor::F32(Arc::clone(t)),
                },
                _ => StoredTensor::F32(Arc::clone(w)),
            };
            tensors.insert(id.clone(), stored);
            entry.weight = Some(id);
        }
        if layer.kind.is_quantizable() {
            coord += 1;
        }
        if let Some(b) = &layer.bias {
            let id = format!("{}.bias", layer.id);
            tensors.insert(id.clone(), StoredTensor::F32(Arc::clone(b)));
            entry.bias = Some(id);
        }
        if let Some(stats) = &layer.stats {
            tensors.insert(format!("{}.running_mean", layer.id), StoredTensor::F32(Arc::clone(&stats.mean)));
            tensors.insert(format!("{}.running_var", layer.id), StoredTensor::F32(Arc::clone(&stats.var)));
        }
        entries.push(entry);
    }
    let manifest = Manifest {
        name: graph.name.clone(),
        input_shape: graph.input_shape.clone(),
        normalization: graph.normalization.clone(),
        layers: entries,
    };
    (manifest, tensors)
}

fn write_pair(manifest: &Manifest, tensors: &BTreeMap<String, StoredTensor>, manifest_path: &Path, weights_path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(manifest_path, text + "\n").map_err(|e| Error::io(manifest_path, e))?;
    let file = fs::File::create(weights_path).map_err(|e| Error::io(weights_path, e))?;
    let mut w = BufWriter::new(file);
    write_weights_to(&mut w, tensors)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(weights_path, e))
}

pub fn save_model(graph: &ModelGraph, manifest_path: &Path, weights_path: &Path) -> Result<()> {
    let (m, t) = to_manifest(graph, None);
    write_pair(&m, &t, manifest_path, weights_path)
}

/// Saves a quantized view with its low-precision layers physically packed.
pub fn save_packed_model(model: &QuantizedModel<'_>, manifest_path: &Path, weights_path: &Path) -> Result<()> {
    let (m, t) = to_manifest(model.graph, Some(&model.weights));
    write_pair(&m, &t, manifest_path, weights_path)
}

/// A model loaded from a container that may hold packed weights.
#[derive(Debug, Clone)]
pub struct PackedModel {
    /// Graph whose quantized weights are the dequantized values.
    pub graph: ModelGraph,
    pub scheme: QuantScheme,
    pub weights: Vec<LayerWeights>,
}

impl PackedModel {
    pub fn view(&self) -> QuantizedModel<'_> {
        QuantizedModel::from_parts(&self.graph, self.scheme.clone(), self.weights.clone()).expect("consistent at load")
    }
}

pub fn load_packed_model(manifest_path: &Path, weights_path: &Path) -> Result<PackedModel> {
    let manifest = read_manifest(manifest_path)?;
    let tensors = read_container(weights_path)?;
    let graph = build_graph(&manifest, &tensors)?;
    let mut bits = Vec::new();
    let mut weights = Vec::new();
    for (layer, entry) in graph.layers.iter().zip(&manifest.layers) {
        if !layer.kind.is_quantizable() {
            continue;
        }
        let id = entry.weight.as_deref().expect("validated weight");
        match &tensors[id] {
            StoredTensor::Packed(p) => {
                bits.push(p.params.bits);
                weights.push(LayerWeights::Packed(Arc::clone(p)));
            }
            StoredTensor::F32(_) => {
                bits.push(BitWidth::Fp32);
                weights.push(LayerWeights::Dense(layer.weight.clone().expect("validated weight")));
            }
        }
    }
    Ok(PackedModel {
        graph,
        scheme: QuantScheme(bits),
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, manifest: &str, tensors: &BTreeMap<String, StoredTensor>) -> (std::path::PathBuf, std::path::PathBuf) {
        let m = dir.join("m.json");
        let w = dir.join("m.aiqw");
        fs::write(&m, manifest).unwrap();
        fs::write(&w, write_weights(tensors)).unwrap();
        (m, w)
    }

    fn linear_tensors() -> BTreeMap<String, StoredTensor> {
        let mut t = BTreeMap::new();
        t.insert(
            "fc.w".to_string(),
            StoredTensor::from(Tensor::new(vec![2, 4], (0..8).map(|v| v as f32).collect()).unwrap()),
        );
        t
    }

    const LINEAR: &str = r#"{"name": "tiny", "input_shape": [4], "layers": [
        {"id": "fc", "kind": "linear", "params": {"in_features": 4, "out_features": 2}, "weight": "fc.w", "bias": null, "residual_from": null}
    ]}"#;

    #[test]
    fn minimal_linear_model() {
        let dir = tempfile::tempdir().unwrap();
        let (m, w) = write(dir.path(), LINEAR, &linear_tensors());
        let g = load_model(&m, &w).unwrap();
        assert_eq!(g.num_quantizable(), 1);
        assert_eq!(g.layers[0].weight.as_ref().unwrap().data()[7], 7.0);
    }

    #[test]
    fn missing_and_misshaped_tensors() {
        let dir = tempfile::tempdir().unwrap();
        let (m, w) = write(dir.path(), LINEAR, &BTreeMap::new());
        assert!(matches!(load_model(&m, &w), Err(Error::MissingTensor(_))));

        let mut t = BTreeMap::new();
        t.insert("fc.w".to_string(), StoredTensor::from(Tensor::zeros(vec![4, 2])));
        let (m, w) = write(dir.path(), LINEAR, &t);
        assert!(matches!(load_model(&m, &w), Err(Error::ShapeMismatch { .. })));

        let mut t = BTreeMap::new();
        t.insert("fc.w".to_string(), StoredTensor::from(Tensor::new(vec![2, 4], vec![f32::NAN; 8]).unwrap()));
        let (m, w) = write(dir.path(), LINEAR, &t);
        assert!(matches!(load_model(&m, &w), Err(Error::NonFiniteWeight(_))));

        let (m, w) = write(dir.path(), "{\"name\": 1}", &linear_tensors());
        assert!(matches!(load_model(&m, &w), Err(Error::MalformedManifest(_))));
    }

    #[test]
    fn add_from_differently_shaped_layer() {
        let manifest = r#"{"name": "bad", "input_shape": [4], "layers": [
            {"id": "fc", "kind": "linear", "params": {"in_features": 4, "out_features": 2}, "weight": "fc.w"},
            {"id": "r", "kind": "relu"},
            {"id": "add", "kind": "add", "residual_from": "fc"},
            {"id": "fc2", "kind": "linear", "params": {"in_features": 2, "out_features": 4}, "weight": "fc.w2"},
            {"id": "add2", "kind": "add", "residual_from": "fc"}
        ]}"#;
        let mut t = linear_tensors();
        t.insert("fc.w2".into(), StoredTensor::from(Tensor::zeros(vec![4, 2])));
        let dir = tempfile::tempdir().unwrap();
        let (m, w) = write(dir.path(), manifest, &t);
        assert!(matches!(load_model(&m, &w), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn container_blobs_are_aligned() {
        let mut t = linear_tensors();
        t.insert("a".into(), StoredTensor::from(Tensor::zeros(vec![3])));
        let bytes = write_weights(&t);
        assert_eq!(&bytes[..4], AIQW_MAGIC);
        assert_eq!(bytes.len() % 64, 0);
        assert_eq!(read_weights(&bytes).unwrap(), t);
        assert!(read_weights(&bytes[..bytes.len() - 64]).is_err());
        assert!(read_weights(b"NOPE0000").is_err());
    }
}
