//! Shared inputs for the benchmarks.

use std::path::PathBuf;

use aiq_core::{io, ModelGraph, Tensor};

pub fn fixture_model(stem: &str) -> ModelGraph {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures");
    io::load_model(&dir.join(format!("{stem}.json")), &dir.join(format!("{stem}.aiqw"))).expect("fixture loads")
}

/// Deterministic batch of `n` inputs for `graph`, values in [-1, 1).
pub fn input_batch(graph: &ModelGraph, n: usize) -> Tensor {
    let mut shape = vec![n];
    shape.extend_from_slice(&graph.input_shape);
    let len: usize = shape.iter().product();
    let data = (0..len).map(|i| ((i * 7919 % 2000) as f32) / 1000.0 - 1.0).collect();
    Tensor::new(shape, data).expect("shape matches data")
}
