//! Deterministic CPU forward pass.
//!
//! Every output element is produced by one worker with a fixed summation
//! order, so results do not depend on the thread count. Quantized weights are
//! dequantized one output-channel (or output-row) tile at a time inside the
//! kernels; dense and packed storage of the same values therefore produce
//! bit-identical activations.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::cost::BitWidth;
use crate::error::{Error, Result};
use crate::graph::{LayerKind, BATCHNORM_EPS};
use crate::quant::{LayerWeights, QuantizedModel};
use crate::tensor::Tensor;

const LANES: usize = 8;

/// Counts weight and bias elements streamed by the kernels, per quantizable
/// layer.
#[derive(Debug)]
pub struct WeightTraffic {
    elements: Vec<AtomicU64>,
    bias_elements: Vec<AtomicU64>,
}

impl WeightTraffic {
    pub fn new(layers: usize) -> Self {
        Self {
            elements: (0..layers).map(|_| AtomicU64::new(0)).collect(),
            bias_elements: (0..layers).map(|_| AtomicU64::new(0)).collect(),
        }
    }

    fn add(&self, coord: usize, weights: u64, bias: u64) {
        self.elements[coord].fetch_add(weights, Ordering::Relaxed);
        self.bias_elements[coord].fetch_add(bias, Ordering::Relaxed);
    }

    pub fn elements(&self, coord: usize) -> u64 {
        self.elements[coord].load(Ordering::Relaxed)
    }

    /// Bytes read from storage for layer `coord` at precision `bits`.
    pub fn bytes(&self, coord: usize, bits: BitWidth) -> u64 {
        bits.storage_bytes(self.elements(coord)) + 4 * self.bias_elements[coord].load(Ordering::Relaxed)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions<'a> {
    pub threads: usize,
    pub traffic: Option<&'a WeightTraffic>,
}

impl Default for ForwardOptions<'_> {
    fn default() -> Self {
        Self {
            threads: 1,
            traffic: None,
        }
    }
}

/// Runs `batch` (shape `[N, ..input_shape]`) through the model.
pub fn forward(model: &QuantizedModel<'_>, batch: &Tensor) -> Result<Tensor> {
    forward_with(model, batch, ForwardOptions::default())
}

pub fn forward_with(model: &QuantizedModel<'_>, batch: &Tensor, opts: ForwardOptions<'_>) -> Result<Tensor> {
    resume(model, ForwardState::start(model, batch)?, opts, |_| {})
}

/// Activations entering graph layer `next_layer`, together with the residual
/// sources still needed downstream. Resuming from a state captured under one
/// scheme is valid for any scheme that agrees on all earlier layers.
#[derive(Debug, Clone)]
pub struct ForwardState {
    pub next_layer: usize,
    pub coord: usize,
    pub current: Tensor,
    kept: Vec<(usize, Tensor)>,
}

impl ForwardState {
    pub fn start(model: &QuantizedModel<'_>, batch: &Tensor) -> Result<Self> {
        let graph = model.graph;
        if batch.shape().len() != graph.input_shape.len() + 1 || batch.shape()[1..] != graph.input_shape[..] {
            let mut expected = vec![batch.shape().first().copied().unwrap_or(0)];
            expected.extend(&graph.input_shape);
            return Err(Error::shape("input", &expected, batch.shape()));
        }
        Ok(Self {
            next_layer: 0,
            coord: 0,
            current: batch.clone(),
            kept: Vec::new(),
        })
    }
}

/// Continues a forward pass from `state`, calling `capture` with the state in
/// front of every quantizable layer.
pub fn resume(
    model: &QuantizedModel<'_>,
    state: ForwardState,
    opts: ForwardOptions<'_>,
    mut capture: impl FnMut(&ForwardState),
) -> Result<Tensor> {
    let graph = model.graph;
    let n = state.current.shape()[0];
    let mut last_use = vec![None; graph.layers.len()];
    for (i, layer) in graph.layers.iter().enumerate() {
        if let LayerKind::Add { from } = layer.kind {
            last_use[from] = Some(i);
        }
    }
    let ForwardState {
        next_layer,
        mut coord,
        mut current,
        mut kept,
    } = state;
    for (idx, layer) in graph.layers.iter().enumerate().skip(next_layer) {
        if layer.kind.is_quantizable() {
            let snapshot = ForwardState {
                next_layer: idx,
                coord,
                current,
                kept,
            };
            capture(&snapshot);
            (current, kept) = (snapshot.current, snapshot.kept);
        }
        let (_, out_shape) = layer.shapes()?;
        let mut shape = vec![n];
        shape.extend(out_shape);
        let next = match layer.kind {
            LayerKind::Conv2d {
                kernel_h,
                kernel_w,
                stride,
                padding,
                in_channels,
                out_channels,
                groups,
            } => {
                let geom = ConvGeometry {
                    n,
                    in_c: in_channels,
                    in_h: current.shape()[2],
                    in_w: current.shape()[3],
                    out_c: out_channels,
                    out_h: out_shape[1],
                    out_w: out_shape[2],
                    kh: kernel_h,
                    kw: kernel_w,
                    stride,
                    padding,
                    depthwise: groups != 1,
                };
                let w = model.weights_for(coord);
                let bias = layer.bias.as_ref().map(|b| b.data());
                let out = conv2d(&geom, current.data(), w, bias, opts.threads);
                if let Some(t) = opts.traffic {
                    t.add(coord, w.numel() as u64, bias.map_or(0, |b| b.len()) as u64);
                }
                coord += 1;
                Tensor::new(shape, out)?
            }
            LayerKind::Linear {
                in_features,
                out_features,
            } => {
                let w = model.weights_for(coord);
                let bias = layer.bias.as_ref().map(|b| b.data());
                let out = linear(n, in_features, out_features, current.data(), w, bias, opts.threads);
                if let Some(t) = opts.traffic {
                    t.add(coord, w.numel() as u64, bias.map_or(0, |b| b.len()) as u64);
                }
                coord += 1;
                Tensor::new(shape, out)?
            }
            LayerKind::BatchNorm2d { channels } => {
                let stats = layer.stats.as_ref().ok_or_else(|| Error::MissingTensor(layer.id.clone()))?;
                let gamma = layer.weight.as_ref().map(|t| t.data());
                let beta = layer.bias.as_ref().map(|t| t.data());
                let plane = current.numel() / (n * channels);
                let mut out = current.into_data();
                for (i, chunk) in out.chunks_mut(plane).enumerate() {
                    let c = i % channels;
                    let mean = stats.mean.data()[c];
                    let denom = (stats.var.data()[c] + BATCHNORM_EPS).sqrt();
                    let g = gamma.map_or(1.0, |g| g[c]);
                    let b = beta.map_or(0.0, |b| b[c]);
                    for v in chunk {
                        *v = (*v - mean) / denom * g + b;
                    }
                }
                Tensor::new(shape, out)?
            }
            LayerKind::ReLU => {
                let mut out = current.into_data();
                for v in &mut out {
                    *v = v.max(0.0);
                }
                Tensor::new(shape, out)?
            }
            LayerKind::Add { from } => {
                let pos = kept.iter().position(|(i, _)| *i == from).expect("residual source retained");
                let src = if last_use[from] == Some(idx) {
                    kept.swap_remove(pos).1
                } else {
                    kept[pos].1.clone()
                };
                let src = &src;
                let mut out = current.into_data();
                for (v, s) in out.iter_mut().zip(src.data()) {
                    *v += *s;
                }
                Tensor::new(shape, out)?
            }
            LayerKind::AvgPool2d { kernel, stride } => {
                let (c, h, w) = (current.shape()[1], current.shape()[2], current.shape()[3]);
                let (oh, ow) = (out_shape[1], out_shape[2]);
                let inv = 1.0 / (kernel * kernel) as f32;
                let mut out = vec![0.0; n * c * oh * ow];
                for (plane_out, plane_in) in out.chunks_mut(oh * ow).zip(current.data().chunks(h * w)) {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut s = 0.0;
                            for ky in 0..kernel {
                                let row = (oy * stride + ky) * w + ox * stride;
                                for v in &plane_in[row..row + kernel] {
                                    s += *v;
                                }
                            }
                            plane_out[oy * ow + ox] = s * inv;
                        }
                    }
                }
                Tensor::new(shape, out)?
            }
            LayerKind::GlobalAvgPool => {
                let plane = current.shape()[2] * current.shape()[3];
                let inv = 1.0 / plane as f32;
                let out = current
                    .data()
                    .chunks(plane)
                    .map(|p| p.iter().fold(0.0f32, |s, v| s + v) * inv)
                    .collect();
                Tensor::new(shape, out)?
            }
            LayerKind::Flatten => current.reshape(shape)?,
        };
        if last_use[idx].is_some() {
            kept.push((idx, next.clone()));
        }
        current = next;
    }
    Ok(current)
}

/// Adds `w[k] * x[k]` into `acc[k % 8]` for full lane groups, then the tail
/// into the leading lanes.
#[inline(always)]
fn accumulate(acc: &mut [f32; LANES], w: &[f32], x: &[f32]) {
    let wc = w.chunks_exact(LANES);
    let xc = x.chunks_exact(LANES);
    let (wt, xt) = (wc.remainder(), xc.remainder());
    for (wl, xl) in wc.zip(xc) {
        for j in 0..LANES {
            acc[j] += wl[j] * xl[j];
        }
    }
    for j in 0..wt.len() {
        acc[j] += wt[j] * xt[j];
    }
}

#[inline(always)]
fn reduce(acc: &[f32; LANES]) -> f32 {
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))
}

/// Fixed-order dot product shared by every linear kernel.
#[inline]
pub fn dot(w: &[f32], x: &[f32]) -> f32 {
    let mut acc = [0.0f32; LANES];
    accumulate(&mut acc, w, x);
    reduce(&acc)
}

/// Samples sharing one pass over a weight row in [`linear`].
const SAMPLE_TILE: usize = 4;

/// [`dot`] of one weight row against [`SAMPLE_TILE`] consecutive inputs,
/// reading the row once. Each sample keeps its own lane accumulators, so the
/// results equal per-sample [`dot`] calls bit for bit.
#[inline]
fn dot_samples(w: &[f32], xs: &[f32]) -> [f32; SAMPLE_TILE] {
    let k = w.len();
    let mut acc = [[0.0f32; LANES]; SAMPLE_TILE];
    let full = k / LANES * LANES;
    let mut i = 0;
    while i < full {
        let wl: &[f32; LANES] = w[i..i + LANES].try_into().expect("lane group");
        for (t, a) in acc.iter_mut().enumerate() {
            let xl: &[f32; LANES] = xs[t * k + i..t * k + i + LANES].try_into().expect("lane group");
            for j in 0..LANES {
                a[j] += wl[j] * xl[j];
            }
        }
        i += LANES;
    }
    for j in 0..k - full {
        let wv = w[full + j];
        for (t, a) in acc.iter_mut().enumerate() {
            a[j] += wv * xs[t * k + full + j];
        }
    }
    acc.map(|a| reduce(&a))
}

/// Calls `f` with the f32 values of weight elements `[start, start + len)`,
/// borrowing dense storage and dequantizing packed storage into `tile`.
#[inline]
fn with_tile<R>(w: &LayerWeights, start: usize, len: usize, tile: &mut Vec<f32>, f: impl FnOnce(&[f32]) -> R) -> R {
    match w {
        LayerWeights::Dense(t) => f(&t.data()[start..start + len]),
        LayerWeights::Packed(p) => {
            tile.resize(len, 0.0);
            p.dequantize_into(start, tile);
            f(tile)
        }
    }
}

/// Splits `0..total` into at most `threads` contiguous ranges and runs `work`
/// on each, returning the per-range outputs in order.
fn parallel_ranges<T: Send>(total: usize, threads: usize, work: impl Fn(usize, usize) -> T + Sync) -> Vec<(usize, usize, T)> {
    let threads = threads.clamp(1, total.max(1));
    let per = total.div_ceil(threads);
    let ranges: Vec<(usize, usize)> = (0..threads)
        .map(|t| (t * per, ((t + 1) * per).min(total)))
        .filter(|(a, b)| a < b)
        .collect();
    if ranges.len() <= 1 {
        return ranges.into_iter().map(|(a, b)| (a, b, work(a, b))).collect();
    }
    std::thread::scope(|s| {
        let handles: Vec<_> = ranges
            .iter()
            .map(|&(a, b)| {
                let work = &work;
                s.spawn(move || (a, b, work(a, b)))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("kernel worker panicked")).collect()
    })
}

fn linear(
    n: usize,
    in_f: usize,
    out_f: usize,
    x: &[f32],
    w: &LayerWeights,
    bias: Option<&[f32]>,
    threads: usize,
) -> Vec<f32> {
    let parts = parallel_ranges(out_f, threads, |lo, hi| {
        let mut local = vec![0.0f32; n * (hi - lo)];
        let mut tile = Vec::new();
        let width = hi - lo;
        for o in lo..hi {
            with_tile(w, o * in_f, in_f, &mut tile, |row| {
                let mut s = 0;
                while s < n {
                    let group = SAMPLE_TILE.min(n - s);
                    let mut vals = [0.0f32; SAMPLE_TILE];
                    if group == SAMPLE_TILE {
                        vals = dot_samples(row, &x[s * in_f..(s + SAMPLE_TILE) * in_f]);
                    } else {
                        for (g, v) in vals.iter_mut().take(group).enumerate() {
                            *v = dot(row, &x[(s + g) * in_f..(s + g + 1) * in_f]);
                        }
                    }
                    for (g, v) in vals.iter().take(group).enumerate() {
                        local[(s + g) * width + (o - lo)] = bias.map_or(*v, |b| *v + b[o]);
                    }
                    s += group;
                }
            });
        }
        local
    });
    if parts.len() == 1 {
        return parts.into_iter().next().unwrap().2;
    }
    let mut out = vec![0.0f32; n * out_f];
    for (lo, hi, local) in parts {
        let width = hi - lo;
        for s in 0..n {
            out[s * out_f + lo..s * out_f + hi].copy_from_slice(&local[s * width..(s + 1) * width]);
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    n: usize,
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    out_h: usize,
    out_w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    depthwise: bool,
}

/// Output positions `[lo, hi)` along one axis whose input index
/// `o * stride + k - padding` falls inside `0..len`.
#[inline]
fn valid_range(k: usize, stride: usize, padding: usize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = if k >= padding { 0 } else { (padding - k).div_ceil(stride) };
    if len + padding <= k {
        return (0, 0);
    }
    let hi = ((len - 1 + padding - k) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

/// Output positions per microkernel tile.
const POS_TILE: usize = 16;
/// Output channels per microkernel tile.
const OC_TILE: usize = 4;

fn conv2d(g: &ConvGeometry, x: &[f32], w: &LayerWeights, bias: Option<&[f32]>, threads: usize) -> Vec<f32> {
    if g.depthwise {
        return conv2d_direct(g, x, w, bias, threads);
    }
    let k_len = g.in_c * g.kh * g.kw;
    let out_plane = g.out_h * g.out_w;
    let pp = out_plane.next_multiple_of(POS_TILE);
    let cols = im2col(g, x, pp);
    let parts = parallel_ranges(g.out_c, threads, |lo, hi| {
        let count = hi - lo;
        let mut local = vec![0.0f32; g.n * count * out_plane];
        let mut tile = Vec::new();
        let mut oc = lo;
        while oc < hi {
            let rows = OC_TILE.min(hi - oc);
            with_tile(w, oc * k_len, rows * k_len, &mut tile, |wt| {
                for s in 0..g.n {
                    let col = &cols[s * k_len * pp..(s + 1) * k_len * pp];
                    for p0 in (0..out_plane).step_by(POS_TILE) {
                        let width = POS_TILE.min(out_plane - p0);
                        let mut emit = |r: usize, acc: &[f32; POS_TILE]| {
                            let b = bias.map_or(0.0, |b| b[oc + r]);
                            let base = (s * count + oc + r - lo) * out_plane + p0;
                            for (d, a) in local[base..base + width].iter_mut().zip(acc) {
                                *d = if bias.is_some() { *a + b } else { *a };
                            }
                        };
                        if rows == OC_TILE {
                            let acc = microkernel::<OC_TILE>(wt, col, k_len, pp, p0);
                            for (r, a) in acc.iter().enumerate() {
                                emit(r, a);
                            }
                        } else {
                            for r in 0..rows {
                                let [a] = microkernel::<1>(&wt[r * k_len..(r + 1) * k_len], col, k_len, pp, p0);
                                emit(r, &a);
                            }
                        }
                    }
                }
            });
            oc += rows;
        }
        local
    });
    scatter_channels(g, parts)
}

/// `R` output channels by [`POS_TILE`] positions. Every output accumulates
/// its taps one at a time in `(ic, ky, kx)` order starting from zero, so the
/// value does not depend on the tile it was computed in.
#[inline(always)]
fn microkernel<const R: usize>(wt: &[f32], col: &[f32], k_len: usize, pp: usize, p0: usize) -> [[f32; POS_TILE]; R] {
    let mut acc = [[0.0f32; POS_TILE]; R];
    for k in 0..k_len {
        let x: &[f32; POS_TILE] = col[k * pp + p0..k * pp + p0 + POS_TILE].try_into().expect("tile width");
        for (r, a) in acc.iter_mut().enumerate() {
            let wv = wt[r * k_len + k];
            for j in 0..POS_TILE {
                a[j] += wv * x[j];
            }
        }
    }
    acc
}

/// Tap-major patch matrix `[n, in_c * kh * kw, pp]`: row `k` holds tap `k`
/// for every output position, zero where the window overlaps padding and in
/// the `pp - out_h * out_w` tail.
fn im2col(g: &ConvGeometry, x: &[f32], pp: usize) -> Vec<f32> {
    let k_len = g.in_c * g.kh * g.kw;
    let in_plane = g.in_h * g.in_w;
    let mut cols = vec![0.0f32; g.n * k_len * pp];
    for s in 0..g.n {
        let sample = &x[s * g.in_c * in_plane..(s + 1) * g.in_c * in_plane];
        for ic in 0..g.in_c {
            let src = &sample[ic * in_plane..(ic + 1) * in_plane];
            for ky in 0..g.kh {
                let (oy_lo, oy_hi) = valid_range(ky, g.stride, g.padding, g.in_h, g.out_h);
                for kx in 0..g.kw {
                    let (ox_lo, ox_hi) = valid_range(kx, g.stride, g.padding, g.in_w, g.out_w);
                    let k = (ic * g.kh + ky) * g.kw + kx;
                    let row = &mut cols[(s * k_len + k) * pp..(s * k_len + k + 1) * pp];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.padding;
                        let src_row = &src[iy * g.in_w..(iy + 1) * g.in_w];
                        let dst = &mut row[oy * g.out_w..(oy + 1) * g.out_w];
                        for ox in ox_lo..ox_hi {
                            dst[ox] = src_row[ox * g.stride + kx - g.padding];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn scatter_channels(g: &ConvGeometry, parts: Vec<(usize, usize, Vec<f32>)>) -> Vec<f32> {
    let out_plane = g.out_h * g.out_w;
    if parts.len() == 1 {
        return parts.into_iter().next().expect("one part").2;
    }
    let mut out = vec![0.0f32; g.n * g.out_c * out_plane];
    for (lo, hi, local) in parts {
        let count = hi - lo;
        for s in 0..g.n {
            let dst = &mut out[(s * g.out_c + lo) * out_plane..(s * g.out_c + hi) * out_plane];
            dst.copy_from_slice(&local[s * count * out_plane..(s + 1) * count * out_plane]);
        }
    }
    out
}

/// Depthwise convolution, accumulating taps in (ky, kx) order.
fn conv2d_direct(g: &ConvGeometry, x: &[f32], w: &LayerWeights, bias: Option<&[f32]>, threads: usize) -> Vec<f32> {
    let cin_per = if g.depthwise { 1 } else { g.in_c };
    let per_oc = cin_per * g.kh * g.kw;
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let parts = parallel_ranges(g.out_c, threads, |lo, hi| {
        let count = hi - lo;
        let mut local = vec![0.0f32; g.n * count * out_plane];
        let mut tile = Vec::new();
        for oc in lo..hi {
            with_tile(w, oc * per_oc, per_oc, &mut tile, |wt| {
                for s in 0..g.n {
                    let sample = &x[s * g.in_c * in_plane..(s + 1) * g.in_c * in_plane];
                    let dst = &mut local[(s * count + oc - lo) * out_plane..(s * count + oc - lo + 1) * out_plane];
                    for icg in 0..cin_per {
                        let ic = if g.depthwise { oc } else { icg };
                        let src = &sample[ic * in_plane..(ic + 1) * in_plane];
                        for ky in 0..g.kh {
                            let (oy_lo, oy_hi) = valid_range(ky, g.stride, g.padding, g.in_h, g.out_h);
                            for kx in 0..g.kw {
                                let wv = wt[(icg * g.kh + ky) * g.kw + kx];
                                let (ox_lo, ox_hi) = valid_range(kx, g.stride, g.padding, g.in_w, g.out_w);
                                for oy in oy_lo..oy_hi {
                                    let iy = oy * g.stride + ky - g.padding;
                                    let row_in = &src[iy * g.in_w..(iy + 1) * g.in_w];
                                    let row_out = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                                    if g.stride == 1 {
                                        let off = kx as isize - g.padding as isize;
                                        let a = (ox_lo as isize + off) as usize;
                                        let b = (ox_hi as isize + off) as usize;
                                        for (o, i) in row_out[ox_lo..ox_hi].iter_mut().zip(&row_in[a..b]) {
                                            *o += wv * *i;
                                        }
                                    } else {
                                        for ox in ox_lo..ox_hi {
                                            row_out[ox] += wv * row_in[ox * g.stride + kx - g.padding];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    if let Some(b) = bias {
                        for v in dst.iter_mut() {
                            *v += b[oc];
                        }
                    }
                }
            });
        }
        local
    });
    scatter_channels(g, parts)
}

/// Index of the largest logit; ties go to the lowest class index.
pub fn argmax(logits: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in logits.iter().enumerate() {
        if *v > logits[best] {
            best = i;
        }
    }
    best
}
