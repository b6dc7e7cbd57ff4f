//! Model representation: an ordered list of layers with implicit sequential
//! edges and explicit residual `Add` sources.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BATCHNORM_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv2d {
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
        in_channels: usize,
        out_channels: usize,
        groups: usize,
    },
    Linear {
        in_features: usize,
        out_features: usize,
    },
    BatchNorm2d {
        channels: usize,
    },
    ReLU,
    AvgPool2d {
        kernel: usize,
        stride: usize,
    },
    GlobalAvgPool,
    /// Adds the output of layer `from` (an index into the graph) to the
    /// incoming activation.
    Add {
        from: usize,
    },
    Flatten,
}

impl LayerKind {
    pub fn is_quantizable(&self) -> bool {
        matches!(self, LayerKind::Conv2d { .. } | LayerKind::Linear { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::Linear { .. } => "linear",
            LayerKind::BatchNorm2d { .. } => "batchnorm2d",
            LayerKind::ReLU => "relu",
            LayerKind::AvgPool2d { .. } => "avgpool2d",
            LayerKind::GlobalAvgPool => "global_avg_pool",
            LayerKind::Add { .. } => "add",
            LayerKind::Flatten => "flatten",
        }
    }

    /// Expected weight shape for kinds that own weights.
    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match *self {
            LayerKind::Conv2d {
                kernel_h,
                kernel_w,
                in_channels,
                out_channels,
                groups,
                ..
            } => Some(vec![out_channels, in_channels / groups, kernel_h, kernel_w]),
            LayerKind::Linear {
                in_features,
                out_features,
            } => Some(vec![out_features, in_features]),
            LayerKind::BatchNorm2d { channels } => Some(vec![channels]),
            _ => None,
        }
    }

    pub fn bias_len(&self) -> Option<usize> {
        match *self {
            LayerKind::Conv2d { out_channels, .. } => Some(out_channels),
            LayerKind::Linear { out_features, .. } => Some(out_features),
            LayerKind::BatchNorm2d { channels } => Some(channels),
            _ => None,
        }
    }

    /// Output shape for a given per-sample input shape.
    pub fn output_shape(&self, id: &str, input: &[usize]) -> Result<Vec<usize>> {
        let chw = |input: &[usize]| -> Result<(usize, usize, usize)> {
            match *input {
                [c, h, w] => Ok((c, h, w)),
                _ => Err(Error::shape(id, &[0, 0, 0], input)),
            }
        };
        match *self {
            LayerKind::Conv2d {
                kernel_h,
                kernel_w,
                stride,
                padding,
                in_channels,
                out_channels,
                ..
            } => {
                let (c, h, w) = chw(input)?;
                if c != in_channels {
                    return Err(Error::shape(id, &[in_channels, h, w], input));
                }
                if h + 2 * padding < kernel_h || w + 2 * padding < kernel_w || stride == 0 {
                    return Err(Error::shape(id, &[in_channels, kernel_h, kernel_w], input));
                }
                let oh = (h + 2 * padding - kernel_h) / stride + 1;
                let ow = (w + 2 * padding - kernel_w) / stride + 1;
                Ok(vec![out_channels, oh, ow])
            }
            LayerKind::Linear {
                in_features,
                out_features,
            } => {
                if input != [in_features] {
                    return Err(Error::shape(id, &[in_features], input));
                }
                Ok(vec![out_features])
            }
            LayerKind::BatchNorm2d { channels } => {
                let (c, _, _) = chw(input)?;
                if c != channels {
                    return Err(Error::shape(id, &[channels], &[c]));
                }
                Ok(input.to_vec())
            }
            LayerKind::ReLU | LayerKind::Add { .. } => Ok(input.to_vec()),
            LayerKind::AvgPool2d { kernel, stride } => {
                let (c, h, w) = chw(input)?;
                if kernel == 0 || stride == 0 || h < kernel || w < kernel {
                    return Err(Error::shape(id, &[c, kernel, kernel], input));
                }
                Ok(vec![c, (h - kernel) / stride + 1, (w - kernel) / stride + 1])
            }
            LayerKind::GlobalAvgPool => {
                let (c, _, _) = chw(input)?;
                Ok(vec![c, 1, 1])
            }
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

/// Inference-mode batch-norm statistics.
#[derive(Debug, Clone)]
pub struct NormStats {
    pub mean: Arc<Tensor>,
    pub var: Arc<Tensor>,
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub id: String,
    pub kind: LayerKind,
    pub weight: Option<Arc<Tensor>>,
    pub bias: Option<Arc<Tensor>>,
    /// Only present for `BatchNorm2d`.
    pub stats: Option<NormStats>,
    pub input_shape: Option<Vec<usize>>,
    pub output_shape: Option<Vec<usize>>,
}

impl Layer {
    pub fn new(id: impl Into<String>, kind: LayerKind) -> Self {
        Self {
            id: id.into(),
            kind,
            weight: None,
            bias: None,
            stats: None,
            input_shape: None,
            output_shape: None,
        }
    }

    pub fn with_weight(mut self, weight: Tensor) -> Self {
        self.weight = Some(Arc::new(weight));
        self
    }

    pub fn with_bias(mut self, bias: Tensor) -> Self {
        self.bias = Some(Arc::new(bias));
        self
    }

    pub fn with_stats(mut self, mean: Tensor, var: Tensor) -> Self {
        self.stats = Some(NormStats {
            mean: Arc::new(mean),
            var: Arc::new(var),
        });
        self
    }

    pub fn shapes(&self) -> Result<(&[usize], &[usize])> {
        match (&self.input_shape, &self.output_shape) {
            (Some(i), Some(o)) => Ok((i, o)),
            _ => Err(Error::ShapeMissing(self.id.clone())),
        }
    }

    /// Output channel (or feature) count, the "width" of a weighted layer.
    pub fn width(&self) -> usize {
        match self.kind {
            LayerKind::Conv2d { out_channels, .. } => out_channels,
            LayerKind::Linear { out_features, .. } => out_features,
            LayerKind::BatchNorm2d { channels } => channels,
            _ => self.output_shape.as_ref().map_or(0, |s| s[0]),
        }
    }
}

/// Optional per-channel input normalization carried by a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct ModelGraph {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
    pub normalization: Option<Normalization>,
}

impl ModelGraph {
    /// Builds a graph, checks structural invariants and infers shapes.
    pub fn new(name: impl Into<String>, input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        let mut g = Self {
            name: name.into(),
            input_shape: input_shape.clone(),
            layers,
            normalization: None,
        };
        g.validate_tensors()?;
        g.infer_shapes(&input_shape)?;
        Ok(g)
    }

    pub fn num_quantizable(&self) -> usize {
        self.layers.iter().filter(|l| l.kind.is_quantizable()).count()
    }

    /// Layer ids of all Conv2d/Linear layers in topological order. The
    /// position of an id is its coordinate in every `QuantScheme`.
    pub fn quantizable_layers(&self) -> Vec<&str> {
        self.layers
            .iter()
            .filter(|l| l.kind.is_quantizable())
            .map(|l| l.id.as_str())
            .collect()
    }

    /// Graph indices of the quantizable layers, in scheme order.
    pub fn quantizable_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.kind.is_quantizable())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn output_shape(&self) -> Result<&[usize]> {
        match self.layers.last() {
            Some(l) => Ok(l.shapes()?.1),
            None => Ok(&self.input_shape),
        }
    }

    /// Populates every layer's input and output shape from `input_shape`.
    /// Stored shapes that disagree with the derived ones are rejected.
    pub fn infer_shapes(&mut self, input_shape: &[usize]) -> Result<()> {
        if !self.input_shape.is_empty() && self.input_shape != input_shape {
            return Err(Error::shape(&self.name, &self.input_shape, input_shape));
        }
        self.input_shape = input_shape.to_vec();
        let mut current = input_shape.to_vec();
        let mut outputs: Vec<Vec<usize>> = Vec::with_capacity(self.layers.len());
        for (idx, layer) in self.layers.iter_mut().enumerate() {
            if let LayerKind::Add { from } = layer.kind {
                if from >= idx {
                    return Err(Error::MalformedManifest(format!(
                        "`{}` adds from a later layer",
                        layer.id
                    )));
                }
                if outputs[from] != current {
                    return Err(Error::shape(&layer.id, &current, &outputs[from]));
                }
            }
            if let LayerKind::Conv2d {
                in_channels,
                groups,
                ..
            } = layer.kind
            {
                if groups != 1 && groups != in_channels {
                    return Err(Error::MalformedManifest(format!(
                        "`{}`: groups must be 1 or in_channels",
                        layer.id
                    )));
                }
                if let LayerKind::Conv2d { out_channels, .. } = layer.kind {
                    if groups != 1 && out_channels != in_channels {
                        return Err(Error::MalformedManifest(format!(
                            "`{}`: depthwise conv must keep channel count",
                            layer.id
                        )));
                    }
                }
            }
            let out = layer.kind.output_shape(&layer.id, &current)?;
            if let Some(stored) = &layer.input_shape {
                if *stored != current {
                    return Err(Error::shape(&layer.id, &current, stored));
                }
            }
            if let Some(stored) = &layer.output_shape {
                if *stored != out {
                    return Err(Error::shape(&layer.id, &out, stored));
                }
            }
            layer.input_shape = Some(current.clone());
            layer.output_shape = Some(out.clone());
            outputs.push(out.clone());
            current = out;
        }
        Ok(())
    }

    fn validate_tensors(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for layer in &self.layers {
            if !seen.insert(layer.id.as_str()) {
                return Err(Error::MalformedManifest(format!("duplicate layer id `{}`", layer.id)));
            }
            let check = |t: &Tensor, expected: &[usize], what: &str| -> Result<()> {
                if t.shape() != expected {
                    return Err(Error::shape(format!("{}.{what}", layer.id), expected, t.shape()));
                }
                if !t.is_finite() {
                    return Err(Error::NonFiniteWeight(format!("{}.{what}", layer.id)));
                }
                Ok(())
            };
            match (layer.kind.weight_shape(), &layer.weight) {
                (Some(shape), Some(w)) => check(w, &shape, "weight")?,
                (Some(_), None) => {
                    return Err(Error::MissingTensor(format!("{}.weight", layer.id)));
                }
                (None, Some(_)) => {
                    return Err(Error::MalformedManifest(format!(
                        "`{}` ({}) cannot carry a weight",
                        layer.id,
                        layer.kind.name()
                    )));
                }
                (None, None) => {}
            }
            match (layer.kind.bias_len(), &layer.bias) {
                (Some(n), Some(b)) => check(b, &[n], "bias")?,
                (None, Some(_)) => {
                    return Err(Error::MalformedManifest(format!(
                        "`{}` cannot carry a bias",
                        layer.id
                    )));
                }
                (Some(_), None) if matches!(layer.kind, LayerKind::BatchNorm2d { .. }) => {
                    return Err(Error::MissingTensor(format!("{}.bias", layer.id)));
                }
                _ => {}
            }
            if let LayerKind::BatchNorm2d { channels } = layer.kind {
                let stats = layer
                    .stats
                    .as_ref()
                    .ok_or_else(|| Error::MissingTensor(format!("{}.running_mean", layer.id)))?;
                check(&stats.mean, &[channels], "running_mean")?;
                check(&stats.var, &[channels], "running_var")?;
                if stats.var.data().iter().any(|v| *v < 0.0) {
                    return Err(Error::MalformedManifest(format!(
                        "`{}` has negative running variance",
                        layer.id
                    )));
                }
            }
        }
        Ok(())
    }
}
