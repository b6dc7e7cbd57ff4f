//! Programmatic model fixtures: ResNet-20-style networks and their width
//! variants, a plain conv stack, and a wide linear stack for memory-bound
//! throughput runs. Weights are seeded He-uniform initializations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cost::QuantScheme;
use crate::dataset::Dataset;
use crate::engine::{argmax, forward_with, ForwardOptions};
use crate::error::Result;
use crate::graph::{Layer, LayerKind, ModelGraph};
use crate::quant::apply_scheme;
use crate::tensor::Tensor;

struct Builder {
    rng: ChaCha8Rng,
    layers: Vec<Layer>,
}

impl Builder {
    fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            layers: Vec::new(),
        }
    }

    fn uniform(&mut self, n: usize, bound: f32) -> Vec<f32> {
        (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect()
    }

    fn last(&self) -> usize {
        self.layers.len() - 1
    }

    fn conv(&mut self, id: &str, cin: usize, cout: usize, k: usize, stride: usize, depthwise: bool) {
        let per = if depthwise { 1 } else { cin };
        let fan_in = per * k * k;
        let bound = (6.0 / fan_in as f32).sqrt();
        let w = self.uniform(cout * fan_in, bound);
        let kind = LayerKind::Conv2d {
            kernel_h: k,
            kernel_w: k,
            stride,
            padding: k / 2,
            in_channels: cin,
            out_channels: cout,
            groups: if depthwise { cin } else { 1 },
        };
        let layer = Layer::new(id, kind).with_weight(Tensor::new(vec![cout, per, k, k], w).expect("sized"));
        self.layers.push(layer);
    }

    fn bn(&mut self, id: &str, c: usize) {
        let layer = Layer::new(id, LayerKind::BatchNorm2d { channels: c })
            .with_weight(Tensor::new(vec![c], vec![1.0; c]).expect("sized"))
            .with_bias(Tensor::zeros(vec![c]))
            .with_stats(Tensor::zeros(vec![c]), Tensor::new(vec![c], vec![1.0; c]).expect("sized"));
        self.layers.push(layer);
    }

    fn relu(&mut self, id: &str) {
        self.layers.push(Layer::new(id, LayerKind::ReLU));
    }

    fn linear(&mut self, id: &str, i: usize, o: usize) {
        let bound = (6.0 / i as f32).sqrt();
        let w = self.uniform(i * o, bound);
        let b = self.uniform(o, 0.01);
        let layer = Layer::new(
            id,
            LayerKind::Linear {
                in_features: i,
                out_features: o,
            },
        )
        .with_weight(Tensor::new(vec![o, i], w).expect("sized"))
        .with_bias(Tensor::new(vec![o], b).expect("sized"));
        self.layers.push(layer);
    }
}

/// ResNet-20 topology: a stem conv, three stages of three basic blocks, global
/// pooling and a linear classifier (19 convs + 1 linear). `widths` gives the
/// stem width followed by the three stage widths, e.g. `[16, 16, 32, 64]`.
/// Blocks that change resolution or width have no residual connection, so
/// every quantizable layer is a main-path conv.
pub fn resnet20(name: &str, widths: [usize; 4], input: [usize; 3], classes: usize, seed: u64) -> Result<ModelGraph> {
    let mut b = Builder::new(seed);
    b.conv("conv1", input[0], widths[0], 3, 1, false);
    b.bn("bn1", widths[0]);
    b.relu("relu1");
    let mut c = widths[0];
    for (s, &w) in widths[1..].iter().enumerate() {
        for blk in 0..3 {
            let stride = if s > 0 && blk == 0 { 2 } else { 1 };
            let p = format!("layer{}.{}", s + 1, blk);
            let block_in = b.last();
            b.conv(&format!("{p}.conv1"), c, w, 3, stride, false);
            b.bn(&format!("{p}.bn1"), w);
            b.relu(&format!("{p}.relu1"));
            b.conv(&format!("{p}.conv2"), w, w, 3, 1, false);
            b.bn(&format!("{p}.bn2"), w);
            if stride == 1 && c == w {
                b.layers.push(Layer::new(format!("{p}.add"), LayerKind::Add { from: block_in }));
            }
            b.relu(&format!("{p}.relu2"));
            c = w;
        }
    }
    b.layers.push(Layer::new("pool", LayerKind::GlobalAvgPool));
    b.layers.push(Layer::new("flatten", LayerKind::Flatten));
    b.linear("fc", c, classes);
    ModelGraph::new(name, input.to_vec(), b.layers)
}

/// Standard CIFAR ResNet-20 shape: 3x32x32 input, widths 16/16/32/64.
pub fn resnet20_cifar(seed: u64) -> Result<ModelGraph> {
    resnet20("resnet20", [16, 16, 32, 64], [3, 32, 32], 10, seed)
}

/// Reversed channel progression of ResNet-20 (wide early, narrow late).
pub fn heavy_early_resnet20(scale_div: usize, input: [usize; 3], seed: u64) -> Result<ModelGraph> {
    let w = [64, 32, 16, 16].map(|c| (c / scale_div).max(1));
    resnet20("heavy-early-resnet20", w, input, 10, seed)
}

/// 19 same-width 3x3 convs with BN/ReLU, pooled into a linear classifier.
pub fn plain_convnet20(width: usize, input: [usize; 3], seed: u64) -> Result<ModelGraph> {
    let mut b = Builder::new(seed);
    let mut c = input[0];
    for i in 0..19 {
        b.conv(&format!("features.{}", 3 * i), c, width, 3, 1, false);
        b.bn(&format!("features.{}", 3 * i + 1), width);
        b.relu(&format!("features.{}", 3 * i + 2));
        c = width;
    }
    b.layers.push(Layer::new("pool", LayerKind::GlobalAvgPool));
    b.layers.push(Layer::new("flatten", LayerKind::Flatten));
    b.linear("classifier", width, 10);
    ModelGraph::new("plain-convnet20", input.to_vec(), b.layers)
}

/// Multilayer perceptron with ReLU between its linear layers; `dims` lists
/// the input width followed by every layer's output width.
pub fn mlp(name: &str, dims: &[usize], seed: u64) -> Result<ModelGraph> {
    let mut b = Builder::new(seed);
    for (i, pair) in dims.windows(2).enumerate() {
        b.linear(&format!("fc{i}"), pair[0], pair[1]);
        if i + 2 < dims.len() {
            b.relu(&format!("relu{i}"));
        }
    }
    ModelGraph::new(name, vec![dims[0]], b.layers)
}

/// Four-layer MLP with randomized hidden widths in `8..=48`.
pub fn toy4(seed: u64) -> Result<ModelGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x70_4F);
    let mut dims = vec![16];
    dims.extend((0..3).map(|_| rng.gen_range(8..=48)));
    dims.push(6);
    mlp(&format!("toy4-{seed}"), &dims, seed)
}

/// Sizing of the memory-bound linear stack.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StackConfig {
    pub input: usize,
    pub wide: usize,
    pub narrow: usize,
    pub classes: usize,
    /// Entries per narrow layer replaced by large-magnitude outliers.
    pub outliers: usize,
    /// Outlier magnitude in units of the layer's initial weight std.
    pub outlier_gain: f32,
    pub seed: u64,
}

impl StackConfig {
    /// Picks the wide dimension so that FP32 weights occupy at least
    /// `min_weight_bytes`.
    pub fn for_weight_bytes(min_weight_bytes: u64, seed: u64) -> Self {
        let (input, narrow, classes) = (256usize, 256usize, 10usize);
        // 4 wide x wide layers dominate; round up to a multiple of 64.
        let mut wide = ((min_weight_bytes as f64 / 16.0).sqrt() as usize).div_ceil(64) * 64;
        loop {
            let cfg = Self {
                input,
                wide,
                narrow,
                classes,
                outliers: 4,
                outlier_gain: 1000.0,
                seed,
            };
            if cfg.weight_bytes() >= min_weight_bytes {
                return cfg;
            }
            wide += 64;
        }
    }

    pub fn weight_bytes(&self) -> u64 {
        let (i, w, n, c) = (self.input as u64, self.wide as u64, self.narrow as u64, self.classes as u64);
        4 * (i * w + 2 * w * w + w * n + n * w + 2 * w * w + w * c)
    }
}

/// Linear stack alternating narrow bottleneck layers with pairs of wide
/// square layers: `in->W, W->W, W->W, W->n, n->W, W->W, W->W, W->classes`.
/// The narrow layers carry a few large-magnitude outlier weights, which makes
/// their per-tensor quantization lossy while contributing little traffic.
pub fn memory_bound_stack(cfg: &StackConfig) -> Result<ModelGraph> {
    let mut b = Builder::new(cfg.seed);
    let dims = [
        (cfg.input, cfg.wide, false),
        (cfg.wide, cfg.wide, true),
        (cfg.wide, cfg.wide, true),
        (cfg.wide, cfg.narrow, false),
        (cfg.narrow, cfg.wide, false),
        (cfg.wide, cfg.wide, true),
        (cfg.wide, cfg.wide, true),
        (cfg.wide, cfg.classes, false),
    ];
    for (i, &(din, dout, wide)) in dims.iter().enumerate() {
        let id = format!("{}{}", if wide { "wide" } else { "narrow" }, i);
        b.linear(&id, din, dout);
        if !wide && cfg.outliers > 0 {
            let layer = b.layers.last_mut().expect("just pushed");
            let mut w = (**layer.weight.as_ref().expect("linear weight")).clone();
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0x0071_1E55 + i as u64));
            let n = w.numel();
            let std = (w.data().iter().map(|v| v * v).sum::<f32>() / n as f32).sqrt();
            for idx in rand::seq::index::sample(&mut rng, n, cfg.outliers.min(n)) {
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                w.data_mut()[idx] = sign * cfg.outlier_gain * std;
            }
            layer.weight = Some(std::sync::Arc::new(w));
        }
        if i + 1 < dims.len() {
            b.relu(&format!("relu{i}"));
        }
    }
    ModelGraph::new("memory-bound-stack", vec![cfg.input], b.layers)
}

/// Labels random Gaussian inputs with the FP32 model's own predictions and
/// keeps the `keep` samples with the widest top-1/top-2 logit margin.
pub fn teacher_dataset(graph: &ModelGraph, candidates: usize, keep: usize, seed: u64, threads: usize) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per: usize = graph.input_shape.iter().product();
    let normal = rand_distr::StandardNormal;
    let data: Vec<f32> = (0..candidates * per).map(|_| rng.sample::<f32, _>(normal)).collect();
    let mut shape = vec![candidates];
    shape.extend(&graph.input_shape);
    let inputs = Tensor::new(shape, data)?;
    let model = apply_scheme(graph, &QuantScheme::fp32(graph.num_quantizable()))?;
    let logits = forward_with(&model, &inputs, ForwardOptions { threads, traffic: None })?;
    let classes = logits.numel() / candidates;
    let mut scored: Vec<(usize, usize, f32)> = logits
        .data()
        .chunks(classes)
        .enumerate()
        .map(|(i, row)| {
            let top = argmax(row);
            let second = row
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != top)
                .map(|(_, v)| *v)
                .fold(f32::NEG_INFINITY, f32::max);
            (i, top, row[top] - second)
        })
        .collect();
    scored.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    scored.truncate(keep.min(candidates));
    scored.sort_by_key(|s| s.0);
    let mut images = Vec::with_capacity(scored.len() * per);
    for (i, _, _) in &scored {
        images.extend_from_slice(&inputs.data()[i * per..(i + 1) * per]);
    }
    let mut shape = vec![scored.len()];
    shape.extend(&graph.input_shape);
    Dataset::new(Tensor::new(shape, images)?, scored.iter().map(|s| s.1).collect(), Some(classes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resnet20_has_twenty_quantizable_layers() {
        let g = resnet20_cifar(0).unwrap();
        assert_eq!(g.num_quantizable(), 20);
        assert_eq!(g.output_shape().unwrap(), &[10]);
        let g = heavy_early_resnet20(4, [3, 16, 16], 0).unwrap();
        assert_eq!(g.num_quantizable(), 20);
        let g = plain_convnet20(8, [3, 8, 8], 0).unwrap();
        assert_eq!(g.num_quantizable(), 20);
    }

    #[test]
    fn stack_sizing_meets_target() {
        let cfg = StackConfig::for_weight_bytes(64 << 20, 1);
        assert!(cfg.weight_bytes() >= 64 << 20);
        assert_eq!(cfg.wide % 64, 0);
        let small = StackConfig {
            wide: 64,
            ..cfg
        };
        let g = memory_bound_stack(&small).unwrap();
        assert_eq!(g.num_quantizable(), 8);
        let bytes: usize = g.layers.iter().filter_map(|l| l.weight.as_ref()).map(|w| w.numel() * 4).sum();
        assert_eq!(bytes as u64, small.weight_bytes());
    }

    #[test]
    fn teacher_labels_match_fp32_predictions() {
        let cfg = StackConfig {
            input: 16,
            wide: 32,
            narrow: 8,
            classes: 5,
            outliers: 0,
            outlier_gain: 1.0,
            seed: 2,
        };
        let g = memory_bound_stack(&cfg).unwrap();
        let d = teacher_dataset(&g, 40, 10, 3, 1).unwrap();
        assert_eq!(d.len(), 10);
        let m = apply_scheme(&g, &QuantScheme::fp32(8)).unwrap();
        let idx: Vec<usize> = (0..10).collect();
        let logits = crate::engine::forward(&m, &d.batch(&idx, &[16]).unwrap()).unwrap();
        for (row, label) in logits.data().chunks(5).zip(&d.labels) {
            assert_eq!(argmax(row), *label);
        }
    }
}
