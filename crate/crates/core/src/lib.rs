//! Arithmetic-intensity-aware mixed-precision quantization: model graphs,
//! an analytic cost model, weight quantizers, a CPU inference engine and
//! searches that trade arithmetic intensity against accuracy.

pub mod cost;
pub mod dataset;
pub mod engine;
pub mod error;
pub mod eval;
pub mod graph;
pub mod harness;
pub mod io;
pub mod profile;
pub mod quant;
pub mod report;
pub mod search;
pub mod tensor;
pub mod zoo;

pub use cost::{BitWidth, CostReport, CostTable, LayerCost, MachineModel, QuantScheme, TrafficModel};
pub use dataset::Dataset;
pub use error::{Error, Result};
pub use eval::{evaluate, AccuracyResult};
pub use graph::{Layer, LayerKind, ModelGraph};
pub use quant::{PackCache, PackedTensor, QuantParams, QuantizedModel};
pub use search::{
    coordinate_descent, exhaustive_search, greedy_search, pareto_sweep, AiNormalization, Algorithm, EvalRecord,
    ModelEvaluator, Objective, SchemeEvaluator, SearchConfig, SearchTrace,
};
pub use tensor::Tensor;
