//! The `aiq` command line: argument definitions, exit-code mapping and the
//! subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use aiq_core::dataset::{load_dataset, synthetic_blobs, DatasetFormat, LoadOptions, SyntheticConfig};
use aiq_core::harness::{self, BenchConfig, CalibrationConfig};
use aiq_core::profile::{layerwise_profile, scheme_statistics, sensitivity_table, sensitivity_csv};
use aiq_core::report::{pareto_svg, profile_svg, Reference};
use aiq_core::search::{
    coordinate_descent, exhaustive_search, greedy_search, mark_dominated, AiNormalization, Algorithm, EvalRecord,
    EvaluatorConfig, GreedyMoves, ModelEvaluator, SchemeEvaluator, SearchConfig,
};
use aiq_core::{io, zoo, BitWidth, CostTable, Dataset, MachineModel, ModelGraph, PackCache, QuantScheme, TrafficModel};

mod commands;

pub use commands::run;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] aiq_core::Error),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    /// 2 for usage or configuration errors, 3 for bad data or models, 4 for
    /// anything else.
    pub fn exit_code(&self) -> i32 {
        use aiq_core::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Internal(_) => 4,
            CliError::Core(e) => match e {
                E::ConfigInvalid(_) | E::SpaceTooLarge { .. } | E::KTooLarge { .. } | E::LengthMismatch { .. } => 2,
                E::MalformedManifest(_)
                | E::MissingTensor(_)
                | E::ShapeMismatch { .. }
                | E::NonFiniteWeight(_)
                | E::ShapeMissing(_)
                | E::EmptyModel
                | E::EmptySubset
                | E::MalformedFile(_)
                | E::LabelOutOfRange { .. }
                | E::Io { .. } => 3,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "aiq", version, about = "Arithmetic-intensity-aware mixed-precision quantization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Search per-layer bit-widths minimizing the AI/accuracy objective.
    Search(SearchArgs),
    /// Quantize one layer at a time and report AI and accuracy deltas.
    Profile(ProfileArgs),
    /// Run the search over several lambdas and emit the Pareto frontier.
    Sweep(SweepArgs),
    /// Measure inference throughput of a scheme with packed weights.
    Bench(BenchArgs),
    /// Per-layer FLOPs, bytes and arithmetic intensity of a scheme.
    Cost(CostArgs),
    /// Measure peak FLOP/s and memory bandwidth of this machine.
    Calibrate(CalibrateArgs),
    /// Write a model with its low-precision layers physically packed.
    Quantize(QuantizeArgs),
    /// Generate a synthetic or teacher-labelled dataset.
    GenData(GenDataArgs),
    /// Write a built-in model architecture with seeded weights.
    Zoo(ZooArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ModelArgs {
    /// Model manifest (JSON).
    #[arg(long)]
    pub model: PathBuf,
    /// Weights container (AIQW). Defaults to the manifest path with `.aiqw`.
    #[arg(long)]
    pub weights: Option<PathBuf>,
}

impl ModelArgs {
    fn weights_path(&self) -> PathBuf {
        self.weights.clone().unwrap_or_else(|| self.model.with_extension("aiqw"))
    }

    pub fn load(&self) -> CliResult<ModelGraph> {
        Ok(io::load_model(&self.model, &self.weights_path())?)
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DataArgs {
    /// Dataset file (AIQD, or IDX images).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "aiqd", value_parser = parse_format)]
    #[serde(serialize_with = "ser_format")]
    pub format: DatasetFormat,
    /// IDX label file, when it cannot be derived from the image file name.
    #[arg(long)]
    pub labels: Option<PathBuf>,
}

fn parse_format(s: &str) -> Result<DatasetFormat, String> {
    s.parse()
}

fn ser_format<S: serde::Serializer>(f: &DatasetFormat, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(match f {
        DatasetFormat::Aiqd => "aiqd",
        DatasetFormat::Idx => "idx",
    })
}

impl DataArgs {
    pub fn load(&self, graph: &ModelGraph) -> CliResult<Dataset> {
        let classes = graph.output_shape()?.iter().product();
        let opts = LoadOptions {
            normalization: graph.normalization.clone(),
            num_classes: Some(classes),
            labels_path: self.labels.clone(),
        };
        Ok(load_dataset(&self.data, self.format, &opts)?)
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CommonArgs {
    /// Output directory; created if missing.
    #[arg(long, default_value = "aiq-out")]
    pub out: PathBuf,
    /// Worker threads for kernels.
    #[arg(long, env = "AIQ_THREADS", default_value_t = 1)]
    pub threads: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ObjectiveArgs {
    #[arg(long, default_value_t = 0.9)]
    pub lambda: f64,
    /// Allowed bit-widths, e.g. `32,8,4`.
    #[arg(long, default_value = "32,8,4", value_delimiter = ',')]
    pub bits: Vec<BitWidth>,
    #[arg(long, default_value = "greedy")]
    pub algo: Algorithm,
    #[arg(long, default_value = "none")]
    pub ai_normalization: AiNormalization,
    #[arg(long, default_value = "any-lower")]
    pub greedy_moves: GreedyMoves,
    /// Samples drawn (with the run seed) for search-time accuracy.
    #[arg(long, default_value_t = 1000)]
    pub subset_size: usize,
    /// Batch size for the analytic AI.
    #[arg(long, default_value_t = 1)]
    pub ai_batch: usize,
    #[arg(long, default_value = "fused")]
    pub traffic: TrafficModel,
    /// Largest scheme space the exhaustive search may enumerate.
    #[arg(long, default_value_t = 10_000)]
    pub exhaustive_cap: u128,
    /// Disable the scheme-to-accuracy cache.
    #[arg(long)]
    pub no_cache: bool,
}

impl ObjectiveArgs {
    pub fn search_config(&self, seed: u64) -> SearchConfig {
        SearchConfig {
            lambda: self.lambda,
            normalization: self.ai_normalization,
            bits: self.bits.clone(),
            greedy_moves: self.greedy_moves,
            exhaustive_cap: self.exhaustive_cap,
            seed,
        }
    }

    pub fn evaluator_config(&self, common: &CommonArgs) -> EvaluatorConfig {
        EvaluatorConfig {
            batch: self.ai_batch,
            traffic: self.traffic,
            subset_size: self.subset_size,
            seed: common.seed,
            threads: common.threads,
            cache: !self.no_cache,
            prefix_reuse: true,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SearchArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub objective: ObjectiveArgs,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ProfileArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Bit-widths to profile.
    #[arg(long, default_value = "8,4", value_delimiter = ',')]
    pub bits: Vec<BitWidth>,
    /// Searched scheme whose bit-widths fill the `final_bits` column.
    #[arg(long)]
    pub scheme: Option<String>,
    #[arg(long, default_value_t = 1000)]
    pub subset_size: usize,
    #[arg(long, default_value_t = 1)]
    pub ai_batch: usize,
    #[arg(long, default_value = "fused")]
    pub traffic: TrafficModel,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SweepArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Comma-separated lambdas.
    #[arg(long, default_value = "0,0.25,0.5,0.75,0.9,1.0", value_delimiter = ',')]
    pub lambdas: Vec<f64>,
    #[command(flatten)]
    pub objective: ObjectiveArgs,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct BenchArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Dataset for inputs and packed-path accuracy; random inputs if absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// `fp32`, `uniform:int8`, `uniform:int4`, a scheme file, or `32,8,...`.
    #[arg(long, default_value = "fp32")]
    pub scheme: String,
    #[arg(long, default_value_t = 10)]
    pub runs: usize,
    #[arg(long, default_value_t = 2)]
    pub warmup: usize,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    #[arg(long, default_value_t = 1)]
    pub iters_per_run: usize,
    /// Also time this many random schemes with the same quantized-layer count.
    #[arg(long, default_value_t = 0)]
    pub compare_random: usize,
    #[arg(long, default_value = "8")]
    pub random_bits: BitWidth,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CostArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value = "fp32")]
    pub scheme: String,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    #[arg(long, default_value = "fused")]
    pub traffic: TrafficModel,
    /// Machine model JSON for roofline classification.
    #[arg(long)]
    pub machine: Option<PathBuf>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CalibrateArgs {
    /// Copy-kernel buffer sizes in MiB; defaults to 8x the last-level cache.
    #[arg(long, value_delimiter = ',')]
    pub copy_mib: Vec<u64>,
    #[arg(long, default_value_t = 5)]
    pub runs: usize,
    #[arg(long, default_value_t = 20_000_000)]
    pub flop_iters: u64,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct QuantizeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub scheme: String,
    /// File stem of the written manifest and weights inside `--out`.
    #[arg(long, default_value = "model")]
    pub name: String,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenDataArgs {
    /// File stem of the written dataset inside `--out`.
    #[arg(long, default_value = "data")]
    pub name: String,
    #[arg(long, default_value_t = 512)]
    pub n: usize,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 3)]
    pub channels: usize,
    #[arg(long, default_value_t = 16)]
    pub height: usize,
    #[arg(long, default_value_t = 16)]
    pub width: usize,
    #[arg(long, default_value_t = 1.5)]
    pub jitter: f64,
    #[arg(long, default_value_t = 0.5)]
    pub pixel_noise: f64,
    #[arg(long, default_value_t = 2)]
    pub distractors: usize,
    /// Label random inputs with this model's predictions instead.
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    /// Teacher mode: random candidates scored before keeping the `n` most
    /// confident.
    #[arg(long, default_value_t = 0)]
    pub candidates: usize,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    /// CIFAR-shape ResNet-20 (3x32x32, widths 16/16/32/64).
    Resnet20,
    /// ResNet-20 topology at widths 8/8/16/32 on 3x16x16 inputs.
    MiniResnet,
    /// ResNet-20 with reversed channel progression.
    HeavyEarly,
    /// 19 equal-width convolutions.
    Plain,
    /// Wide linear stack sized from `--weight-mib`.
    MemoryStack,
    /// Four-layer MLP with seeded random widths.
    Toy4,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ZooArgs {
    #[arg(long, value_enum)]
    pub arch: Arch,
    /// File stem inside `--out`; defaults to the architecture name.
    #[arg(long)]
    pub name: Option<String>,
    /// Minimum FP32 weight size of the memory stack, in MiB.
    #[arg(long, default_value_t = 64)]
    pub weight_mib: u64,
    #[command(flatten)]
    pub common: CommonArgs,
}

pub(crate) fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| aiq_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

pub(crate) fn json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

pub(crate) fn prepare_out(common: &CommonArgs, command: &str, config: &impl Serialize) -> CliResult<PathBuf> {
    fs::create_dir_all(&common.out).map_err(|e| aiq_core::Error::Io {
        path: common.out.clone(),
        source: e,
    })?;
    #[derive(Serialize)]
    struct Resolved<'a, C> {
        command: &'a str,
        version: &'a str,
        #[serde(flatten)]
        config: &'a C,
    }
    write(
        &common.out.join("config.json"),
        json(&Resolved {
            command,
            version: env!("CARGO_PKG_VERSION"),
            config,
        }),
    )?;
    Ok(common.out.clone())
}

#[derive(Debug, Serialize, serde::Deserialize)]
pub struct SchemeFile {
    pub model: String,
    pub layers: Vec<String>,
    pub bits: QuantScheme,
}

/// Resolves `fp32`, `uniform:int8|int4`, `uniform:<bits>`, a scheme JSON file
/// or an inline comma-separated list.
pub fn resolve_scheme(spec: &str, graph: &ModelGraph) -> CliResult<QuantScheme> {
    let l = graph.num_quantizable();
    let uniform = |b: &str| -> CliResult<QuantScheme> {
        let bits = match b {
            "int8" => BitWidth::Int8,
            "int4" => BitWidth::Int4,
            "fp32" => BitWidth::Fp32,
            other => other.parse().map_err(CliError::Usage)?,
        };
        Ok(QuantScheme::uniform(l, bits))
    };
    let scheme = if spec == "fp32" {
        QuantScheme::fp32(l)
    } else if let Some(b) = spec.strip_prefix("uniform:") {
        uniform(b)?
    } else if Path::new(spec).is_file() {
        let text = fs::read_to_string(spec).map_err(|e| aiq_core::Error::Io {
            path: spec.into(),
            source: e,
        })?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| aiq_core::Error::MalformedFile(format!("{spec}: {e}")))?;
        let bits = value.get("bits").cloned().unwrap_or(value);
        serde_json::from_value(bits).map_err(|e| aiq_core::Error::MalformedFile(format!("{spec}: {e}")))?
    } else {
        spec.parse().map_err(|e: String| CliError::Usage(format!("scheme `{spec}`: {e}")))?
    };
    scheme.check_len(l)?;
    Ok(scheme)
}

pub(crate) fn scheme_file(graph: &ModelGraph, scheme: &QuantScheme) -> SchemeFile {
    SchemeFile {
        model: graph.name.clone(),
        layers: graph.quantizable_layers().into_iter().map(String::from).collect(),
        bits: scheme.clone(),
    }
}

pub(crate) fn records_csv(records: &[EvalRecord]) -> String {
    let mut out = format!("{}\n", EvalRecord::CSV_HEADER);
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}
