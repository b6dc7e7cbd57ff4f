//! The AI/accuracy objective and the searches over per-layer bit-widths:
//! greedy descent, coordinate descent, exhaustive enumeration (the test
//! oracle) and the lambda sweep.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::cost::{BitWidth, CostTable, QuantScheme, TrafficModel};
use crate::dataset::Dataset;
use crate::engine::{argmax, resume, ForwardOptions, ForwardState};
use crate::error::{Error, Result};
use crate::eval::{acc_loss_pp, evaluate, AccuracyResult, EVAL_BATCH};
use crate::graph::ModelGraph;
use crate::quant::PackCache;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AiNormalization {
    /// Raw FLOPs/byte.
    #[default]
    None,
    /// `AI(q) / AI(q_fp32)`.
    BaselineRelative,
}

impl FromStr for AiNormalization {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(AiNormalization::None),
            "baseline-relative" | "baseline_relative" => Ok(AiNormalization::BaselineRelative),
            other => Err(format!("unknown AI normalization `{other}`")),
        }
    }
}

impl fmt::Display for AiNormalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AiNormalization::None => "none",
            AiNormalization::BaselineRelative => "baseline-relative",
        })
    }
}

/// `L(q; lambda) = -lambda * AI_term(q) + (1 - lambda) * AccLoss_pp(q)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub lambda: f64,
    pub normalization: AiNormalization,
    pub baseline_ai: f64,
    pub baseline_acc: f64,
}

impl Objective {
    pub fn new(lambda: f64, normalization: AiNormalization, baseline_ai: f64, baseline_acc: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::ConfigInvalid(format!("lambda {lambda} outside [0, 1]")));
        }
        if baseline_ai.is_nan() || baseline_ai <= 0.0 {
            return Err(Error::ConfigInvalid("baseline AI must be positive".into()));
        }
        Ok(Self {
            lambda,
            normalization,
            baseline_ai,
            baseline_acc,
        })
    }

    pub fn ai_term(&self, ai: f64) -> f64 {
        match self.normalization {
            AiNormalization::None => ai,
            AiNormalization::BaselineRelative => ai / self.baseline_ai,
        }
    }

    pub fn loss(&self, ai: f64, acc_loss_pp: f64) -> f64 {
        -self.lambda * self.ai_term(ai) + (1.0 - self.lambda) * acc_loss_pp
    }
}

pub fn loss(objective: &Objective, ai: f64, acc_loss_pp: f64) -> f64 {
    objective.loss(ai, acc_loss_pp)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Greedy,
    #[serde(rename = "coord")]
    CoordinateDescent,
    Exhaustive,
}

impl FromStr for Algorithm {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "greedy" => Ok(Algorithm::Greedy),
            "coord" | "coordinate-descent" => Ok(Algorithm::CoordinateDescent),
            "exhaustive" => Ok(Algorithm::Exhaustive),
            other => Err(format!("unknown algorithm `{other}`")),
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::Greedy => "greedy",
            Algorithm::CoordinateDescent => "coord",
            Algorithm::Exhaustive => "exhaustive",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GreedyMoves {
    /// Any layer may drop to any strictly lower bit-width.
    #[default]
    AnyLower,
    /// Only layers still at FP32 may move.
    Fp32Only,
}

impl FromStr for GreedyMoves {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "any-lower" => Ok(GreedyMoves::AnyLower),
            "fp32-only" => Ok(GreedyMoves::Fp32Only),
            other => Err(format!("unknown greedy move set `{other}`")),
        }
    }
}

/// Scores schemes: analytic AI and measured accuracy (a fraction).
pub trait SchemeEvaluator {
    fn num_layers(&self) -> usize;
    fn ai(&self, scheme: &QuantScheme) -> Result<f64>;
    fn accuracy(&self, scheme: &QuantScheme) -> Result<f64>;

    /// Hint that upcoming queries are single-layer variations of `scheme`.
    /// Must not change any returned value.
    fn set_anchor(&self, _scheme: &QuantScheme) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub scheme: QuantScheme,
    pub ai: f64,
    pub accuracy: f64,
    pub acc_loss_pp: f64,
    pub loss: f64,
    pub evals_used: usize,
    pub lambda: f64,
    pub algorithm: String,
    pub seed: u64,
}

impl EvalRecord {
    pub const CSV_HEADER: &'static str = "scheme,ai,accuracy,acc_loss_pp,loss,evals_used,lambda,algorithm,seed";

    pub fn csv_row(&self) -> String {
        format!(
            "\"{}\",{:.6},{:.6},{:.4},{:.6},{},{},{},{}",
            self.scheme, self.ai, self.accuracy, self.acc_loss_pp, self.loss, self.evals_used, self.lambda, self.algorithm, self.seed
        )
    }
}

/// AI multiplied by accuracy in percent.
pub fn combined_score(record: &EvalRecord) -> f64 {
    record.ai * record.accuracy * 100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub iteration: usize,
    pub layer: usize,
    pub from: BitWidth,
    pub to: BitWidth,
    pub delta_loss: f64,
    pub accepted: bool,
    pub record: EvalRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub algorithm: Algorithm,
    pub objective: Objective,
    pub baseline: EvalRecord,
    pub steps: Vec<TraceStep>,
    pub result: EvalRecord,
}

impl SearchTrace {
    pub fn to_jsonl(&self) -> String {
        self.steps
            .iter()
            .map(|s| serde_json::to_string(s).expect("step serializes") + "\n")
            .collect()
    }

    pub fn accepted(&self) -> impl Iterator<Item = &TraceStep> {
        self.steps.iter().filter(|s| s.accepted)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchConfig {
    pub lambda: f64,
    pub normalization: AiNormalization,
    /// Allowed bit-widths.
    pub bits: Vec<BitWidth>,
    pub greedy_moves: GreedyMoves,
    pub exhaustive_cap: u128,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            lambda: 0.9,
            normalization: AiNormalization::None,
            bits: BitWidth::ALL.to_vec(),
            greedy_moves: GreedyMoves::AnyLower,
            exhaustive_cap: 10_000,
            seed: 0,
        }
    }
}

impl SearchConfig {
    fn bitset(&self) -> Vec<BitWidth> {
        let mut b = self.bits.clone();
        b.sort_by(|x, y| y.cmp(x));
        b.dedup();
        b
    }
}

struct Run<'a, E: ?Sized> {
    ev: &'a E,
    objective: Objective,
    algorithm: Algorithm,
    seed: u64,
    evals: usize,
}

impl<'a, E: SchemeEvaluator + ?Sized> Run<'a, E> {
    fn start(ev: &'a E, cfg: &SearchConfig, algorithm: Algorithm) -> Result<(Self, EvalRecord)> {
        let fp = QuantScheme::fp32(ev.num_layers());
        let objective = Objective::new(cfg.lambda, cfg.normalization, ev.ai(&fp)?, ev.accuracy(&fp)?)?;
        let mut run = Self {
            ev,
            objective,
            algorithm,
            seed: cfg.seed,
            evals: 0,
        };
        let baseline = run.make_record(fp, objective.baseline_ai, objective.baseline_acc);
        Ok((run, baseline))
    }

    fn make_record(&mut self, scheme: QuantScheme, ai: f64, accuracy: f64) -> EvalRecord {
        let acc_loss = acc_loss_pp(self.objective.baseline_acc, accuracy);
        EvalRecord {
            scheme,
            ai,
            accuracy,
            acc_loss_pp: acc_loss,
            loss: self.objective.loss(ai, acc_loss),
            evals_used: self.evals,
            lambda: self.objective.lambda,
            algorithm: self.algorithm.to_string(),
            seed: self.seed,
        }
    }

    fn eval(&mut self, scheme: QuantScheme) -> Result<EvalRecord> {
        self.evals += 1;
        let ai = self.ev.ai(&scheme)?;
        let acc = self.ev.accuracy(&scheme)?;
        Ok(self.make_record(scheme, ai, acc))
    }

    fn finish(self, baseline: EvalRecord, steps: Vec<TraceStep>, mut result: EvalRecord) -> SearchTrace {
        result.evals_used = self.evals;
        SearchTrace {
            algorithm: self.algorithm,
            objective: self.objective,
            baseline,
            steps,
            result,
        }
    }
}

/// Starting from all-FP32, repeatedly applies the single-layer bit reduction
/// with the lowest loss change, for at most one iteration per layer. Stops
/// early once no move lowers the loss. Ties go to the first candidate in
/// (layer, descending bits) order.
pub fn greedy_search<E: SchemeEvaluator + ?Sized>(ev: &E, cfg: &SearchConfig) -> Result<SearchTrace> {
    let bits = cfg.bitset();
    let (mut run, baseline) = Run::start(ev, cfg, Algorithm::Greedy)?;
    let mut current = baseline.clone();
    ev.set_anchor(&current.scheme)?;
    let mut steps = Vec::new();
    for iteration in 0..ev.num_layers() {
        let mut best: Option<(usize, BitWidth, EvalRecord)> = None;
        for layer in 0..ev.num_layers() {
            let from = current.scheme.bits()[layer];
            if cfg.greedy_moves == GreedyMoves::Fp32Only && from != BitWidth::Fp32 {
                continue;
            }
            for &b in bits.iter().filter(|b| **b < from) {
                let rec = run.eval(current.scheme.with(layer, b))?;
                if best.as_ref().is_none_or(|(_, _, r)| rec.loss < r.loss) {
                    best = Some((layer, b, rec));
                }
            }
        }
        let Some((layer, to, rec)) = best else { break };
        let delta = rec.loss - current.loss;
        let accepted = delta < 0.0;
        steps.push(TraceStep {
            iteration,
            layer,
            from: current.scheme.bits()[layer],
            to,
            delta_loss: delta,
            accepted,
            record: rec.clone(),
        });
        if !accepted {
            break;
        }
        current = rec;
        ev.set_anchor(&current.scheme)?;
    }
    Ok(run.finish(baseline, steps, current))
}

/// Sweeps layers in order, setting each to the bit-width that minimizes the
/// loss with the others fixed, until a full pass changes nothing. A layer
/// keeps its bit-width unless another strictly lowers the loss; among equal
/// alternatives the higher bit-width wins.
pub fn coordinate_descent<E: SchemeEvaluator + ?Sized>(ev: &E, cfg: &SearchConfig) -> Result<SearchTrace> {
    let bits = cfg.bitset();
    let (mut run, baseline) = Run::start(ev, cfg, Algorithm::CoordinateDescent)?;
    let mut current = baseline.clone();
    ev.set_anchor(&current.scheme)?;
    let mut steps = Vec::new();
    let mut pass = 0;
    loop {
        let mut changed = false;
        for layer in 0..ev.num_layers() {
            let from = current.scheme.bits()[layer];
            let mut best: Option<(BitWidth, EvalRecord)> = None;
            for &b in bits.iter().filter(|b| **b != from) {
                let rec = run.eval(current.scheme.with(layer, b))?;
                if best.as_ref().is_none_or(|(_, r)| rec.loss < r.loss) {
                    best = Some((b, rec));
                }
            }
            let Some((to, rec)) = best else { continue };
            let delta = rec.loss - current.loss;
            let accepted = delta < 0.0;
            steps.push(TraceStep {
                iteration: pass,
                layer,
                from,
                to,
                delta_loss: delta,
                accepted,
                record: rec.clone(),
            });
            if accepted {
                current = rec;
                ev.set_anchor(&current.scheme)?;
                changed = true;
            }
        }
        pass += 1;
        if !changed {
            break;
        }
    }
    Ok(run.finish(baseline, steps, current))
}

/// Global optimum by enumerating every scheme in lexicographic order with
/// bit-widths descending; the first minimum wins, so ties prefer higher bits.
pub fn exhaustive_search<E: SchemeEvaluator + ?Sized>(ev: &E, cfg: &SearchConfig) -> Result<EvalRecord> {
    let bits = cfg.bitset();
    let l = ev.num_layers();
    let size = (bits.len() as u128).checked_pow(l as u32).unwrap_or(u128::MAX);
    if size > cfg.exhaustive_cap {
        return Err(Error::SpaceTooLarge {
            size,
            cap: cfg.exhaustive_cap,
        });
    }
    let (mut run, _) = Run::start(ev, cfg, Algorithm::Exhaustive)?;
    let mut digits = vec![0usize; l];
    let mut best: Option<EvalRecord> = None;
    loop {
        let scheme = QuantScheme(digits.iter().map(|d| bits[*d]).collect());
        let rec = run.eval(scheme)?;
        if best.as_ref().is_none_or(|b| rec.loss < b.loss) {
            best = Some(rec);
        }
        // odometer, last coordinate fastest
        let mut pos = l;
        loop {
            if pos == 0 {
                let mut best = best.expect("at least one scheme");
                best.evals_used = run.evals;
                return Ok(best);
            }
            pos -= 1;
            digits[pos] += 1;
            if digits[pos] < bits.len() {
                break;
            }
            digits[pos] = 0;
        }
    }
}

pub fn run_search<E: SchemeEvaluator + ?Sized>(ev: &E, cfg: &SearchConfig, algorithm: Algorithm) -> Result<EvalRecord> {
    match algorithm {
        Algorithm::Greedy => Ok(greedy_search(ev, cfg)?.result),
        Algorithm::CoordinateDescent => Ok(coordinate_descent(ev, cfg)?.result),
        Algorithm::Exhaustive => exhaustive_search(ev, cfg),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub record: EvalRecord,
    pub dominated: bool,
}

/// Marks each record dominated iff another has at least its AI and accuracy
/// and is strictly better in one.
pub fn mark_dominated(records: Vec<EvalRecord>) -> Vec<ParetoPoint> {
    let flags: Vec<bool> = records
        .iter()
        .map(|r| {
            records.iter().any(|o| {
                o.ai >= r.ai && o.accuracy >= r.accuracy && (o.ai > r.ai || o.accuracy > r.accuracy)
            })
        })
        .collect();
    records
        .into_iter()
        .zip(flags)
        .map(|(record, dominated)| ParetoPoint { record, dominated })
        .collect()
}

/// One search per lambda, annotated with dominance flags.
pub fn pareto_sweep<E: SchemeEvaluator + ?Sized>(
    ev: &E,
    lambdas: &[f64],
    algorithm: Algorithm,
    cfg: &SearchConfig,
) -> Result<Vec<ParetoPoint>> {
    let records = lambdas
        .iter()
        .map(|&lambda| {
            let c = SearchConfig { lambda, ..cfg.clone() };
            run_search(ev, &c, algorithm)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(mark_dominated(records))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluatorConfig {
    pub batch: usize,
    pub traffic: TrafficModel,
    pub subset_size: usize,
    pub seed: u64,
    pub threads: usize,
    pub cache: bool,
    /// Resume candidate forward passes from the anchor scheme's activations.
    pub prefix_reuse: bool,
}

impl Default for EvaluatorConfig {
    fn default() -> Self {
        Self {
            batch: 1,
            traffic: TrafficModel::Fused,
            subset_size: 1000,
            seed: 0,
            threads: 1,
            cache: true,
            prefix_reuse: true,
        }
    }
}

/// Analytic AI plus accuracy on a fixed seeded subset, using packed weights
/// shared across schemes.
pub struct ModelEvaluator<'g> {
    costs: CostTable,
    packs: PackCache<'g>,
    data: &'g Dataset,
    subset: Vec<usize>,
    threads: usize,
    cache: Option<Mutex<HashMap<QuantScheme, f64>>>,
    evaluations: Mutex<usize>,
    prefix_reuse: bool,
    anchor: Mutex<Option<Anchor>>,
}

/// Activations of the subset under one scheme, captured in front of every
/// quantizable layer, per evaluation batch.
struct Anchor {
    scheme: QuantScheme,
    states: Vec<Vec<ForwardState>>,
}

impl<'g> ModelEvaluator<'g> {
    pub fn new(graph: &'g ModelGraph, data: &'g Dataset, cfg: &EvaluatorConfig) -> Result<Self> {
        let subset = data.subset(cfg.subset_size, cfg.seed);
        if subset.is_empty() {
            return Err(Error::EmptySubset);
        }
        Ok(Self {
            costs: CostTable::new(graph, cfg.batch, cfg.traffic)?,
            packs: PackCache::new(graph),
            data,
            subset,
            threads: cfg.threads.max(1),
            cache: cfg.cache.then(|| Mutex::new(HashMap::new())),
            evaluations: Mutex::new(0),
            prefix_reuse: cfg.prefix_reuse,
            anchor: Mutex::new(None),
        })
    }

    pub fn graph(&self) -> &'g ModelGraph {
        self.packs.graph()
    }

    pub fn subset(&self) -> &[usize] {
        &self.subset
    }

    pub fn costs(&self) -> &CostTable {
        &self.costs
    }

    pub fn packs(&self) -> &PackCache<'g> {
        &self.packs
    }

    /// Forward-pass evaluations actually executed (cache misses).
    pub fn evaluations(&self) -> usize {
        *self.evaluations.lock().expect("counter lock")
    }

    pub fn evaluate_on(&self, scheme: &QuantScheme, subset: Option<&[usize]>) -> Result<AccuracyResult> {
        let model = self.packs.model(scheme)?;
        *self.evaluations.lock().expect("counter lock") += 1;
        evaluate(
            &model,
            self.data,
            subset,
            ForwardOptions {
                threads: self.threads,
                traffic: None,
            },
        )
    }

    fn opts(&self) -> ForwardOptions<'static> {
        ForwardOptions {
            threads: self.threads,
            traffic: None,
        }
    }

    fn count_correct(&self, chunk: &[usize], logits: &Tensor) -> usize {
        let classes = logits.numel() / chunk.len();
        logits
            .data()
            .chunks(classes)
            .zip(chunk)
            .filter(|(row, &i)| argmax(row) == self.data.labels[i])
            .count()
    }

    /// Subset accuracy, resuming from the anchor where the scheme agrees
    /// with it on a prefix of layers.
    fn subset_accuracy(&self, scheme: &QuantScheme) -> Result<f64> {
        let anchor = self.anchor.lock().expect("anchor lock");
        let start = anchor
            .as_ref()
            .filter(|a| a.scheme.len() == scheme.len())
            .and_then(|a| a.scheme.bits().iter().zip(scheme.bits()).position(|(x, y)| x != y).map(|c| (a, c)));
        let Some((anchor, coord)) = start else {
            drop(anchor);
            return Ok(self.evaluate_on(scheme, Some(&self.subset))?.accuracy);
        };
        let model = self.packs.model(scheme)?;
        *self.evaluations.lock().expect("counter lock") += 1;
        let mut correct = 0;
        for (chunk, states) in self.subset.chunks(EVAL_BATCH).zip(&anchor.states) {
            let logits = resume(&model, states[coord].clone(), self.opts(), |_| {})?;
            correct += self.count_correct(chunk, &logits);
        }
        Ok(AccuracyResult::new(correct, self.subset.len()).accuracy)
    }

    /// Re-scores a search result on the full dataset against the full-set
    /// FP32 baseline.
    pub fn final_record(&self, record: &EvalRecord, normalization: AiNormalization) -> Result<EvalRecord> {
        let fp = QuantScheme::fp32(self.num_layers());
        let base = self.evaluate_on(&fp, None)?;
        let acc = if record.scheme == fp { base } else { self.evaluate_on(&record.scheme, None)? };
        let objective = Objective::new(record.lambda, normalization, self.ai(&fp)?, base.accuracy)?;
        let acc_loss = acc.loss_pp(&base);
        Ok(EvalRecord {
            accuracy: acc.accuracy,
            acc_loss_pp: acc_loss,
            loss: objective.loss(record.ai, acc_loss),
            ..record.clone()
        })
    }
}

impl SchemeEvaluator for ModelEvaluator<'_> {
    fn num_layers(&self) -> usize {
        self.costs.num_quantizable()
    }

    fn ai(&self, scheme: &QuantScheme) -> Result<f64> {
        self.costs.ai(scheme)
    }

    fn accuracy(&self, scheme: &QuantScheme) -> Result<f64> {
        if let Some(cache) = &self.cache {
            if let Some(v) = cache.lock().expect("cache lock").get(scheme) {
                return Ok(*v);
            }
        }
        let acc = self.subset_accuracy(scheme)?;
        if let Some(cache) = &self.cache {
            cache.lock().expect("cache lock").insert(scheme.clone(), acc);
        }
        Ok(acc)
    }

    fn set_anchor(&self, scheme: &QuantScheme) -> Result<()> {
        if !self.prefix_reuse {
            return Ok(());
        }
        if self.anchor.lock().expect("anchor lock").as_ref().is_some_and(|a| &a.scheme == scheme) {
            return Ok(());
        }
        let model = self.packs.model(scheme)?;
        *self.evaluations.lock().expect("counter lock") += 1;
        // keep the previous anchor's states up to the first changed layer
        let mut previous = self.anchor.lock().expect("anchor lock").take();
        let keep = previous
            .as_ref()
            .filter(|a| a.scheme.len() == scheme.len())
            .and_then(|a| a.scheme.bits().iter().zip(scheme.bits()).position(|(x, y)| x != y))
            .unwrap_or(0);
        let mut states = Vec::new();
        let mut correct = 0;
        for (ci, chunk) in self.subset.chunks(EVAL_BATCH).enumerate() {
            let (mut captured, start) = match previous.as_mut() {
                Some(prev) if keep > 0 => {
                    let mut old = std::mem::take(&mut prev.states[ci]);
                    old.truncate(keep + 1);
                    let start = old.pop().expect("state in front of the changed layer");
                    (old, start)
                }
                _ => {
                    let batch = self.data.batch(chunk, &self.graph().input_shape)?;
                    (Vec::with_capacity(scheme.len()), ForwardState::start(&model, &batch)?)
                }
            };
            let logits = resume(&model, start, self.opts(), |st| captured.push(st.clone()))?;
            correct += self.count_correct(chunk, &logits);
            states.push(captured);
        }
        let acc = AccuracyResult::new(correct, self.subset.len()).accuracy;
        if let Some(cache) = &self.cache {
            cache.lock().expect("cache lock").insert(scheme.clone(), acc);
        }
        *self.anchor.lock().expect("anchor lock") = Some(Anchor {
            scheme: scheme.clone(),
            states,
        });
        Ok(())
    }
}
