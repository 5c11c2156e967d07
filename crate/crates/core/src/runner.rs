//! End-to-end orchestration behind the command-line subcommands.
//!
//! Every failure is reported as a [`RunError`] naming the stage and the
//! artifact involved, and classified into a process exit code.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig, Scheme};
use crate::cost::{
    dynamic_energy, estimate_graph_latency, frame_energy_at, sliding_window_energy,
    trace_from_base, warmup_frames, CostError, LatencyTrace, SpikeRule, SpikeTrigger,
};
use crate::fixtures::uniad_like;
use crate::ir::{parse_graph, serialize_graph, CalibrationSet, Graph, IrError};
use crate::metrics::{
    compute_dc, compute_de, compute_ds, evaluate, evaluate_joint, segment_outcomes,
    EvaluationReport, MetricsError, RouteMetrics,
};
use crate::passes::{optimize_pipeline, Pass, PassError, PassReport, PruneSpec};
use crate::quant::{apply_plan, calibrate, plan_with, QuantError, QuantScheme, QuantizationPlan};
use crate::sim::{
    builtin_policy, generate_suite, run_route, LatencySource, Scenario, SimError, TrajectoryLog,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Config,
    LoadGraph,
    Optimize,
    Calibrate,
    Quantize,
    LoadSuite,
    Trace,
    Simulate,
    Metrics,
    Compare,
    Write,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("stage serializes");
        f.write_str(s.as_str().unwrap_or("unknown"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureKind {
    Validation,
    Runtime,
    Infeasible,
}

#[derive(Debug, Clone, Error, PartialEq)]
#[error("{stage} failed on `{artifact}`: {message}")]
pub struct RunError {
    pub stage: Stage,
    pub artifact: String,
    pub kind: FailureKind,
    pub message: String,
}

impl RunError {
    pub fn new(
        stage: Stage,
        artifact: impl Into<String>,
        kind: FailureKind,
        message: impl fmt::Display,
    ) -> Self {
        Self {
            stage,
            artifact: artifact.into(),
            kind,
            message: message.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            FailureKind::Validation => 1,
            FailureKind::Runtime => 2,
            FailureKind::Infeasible => 3,
        }
    }

    fn config(artifact: &str, e: ConfigError) -> Self {
        Self::new(Stage::Config, artifact, FailureKind::Validation, e)
    }

    fn ir(stage: Stage, artifact: &str, e: IrError) -> Self {
        let kind = match e {
            IrError::Eval { .. } | IrError::MissingInput(_) => FailureKind::Runtime,
            _ => FailureKind::Validation,
        };
        Self::new(stage, artifact, kind, e)
    }

    fn pass(artifact: &str, e: PassError) -> Self {
        let kind = match e {
            PassError::ProtectedModule(_) | PassError::Infeasible { .. } | PassError::NoOutputs => {
                FailureKind::Infeasible
            }
            PassError::UnknownPass(_) => FailureKind::Validation,
            PassError::Ir(_) => FailureKind::Runtime,
        };
        Self::new(Stage::Optimize, artifact, kind, e)
    }

    fn quant(stage: Stage, artifact: &str, e: QuantError) -> Self {
        let kind = match e {
            QuantError::Ir(IrError::Eval { .. }) => FailureKind::Runtime,
            _ => FailureKind::Validation,
        };
        Self::new(stage, artifact, kind, e)
    }

    fn cost(artifact: &str, e: CostError) -> Self {
        let kind = match e {
            CostError::InvalidProfile(_) | CostError::InvalidRule(_) => FailureKind::Validation,
            _ => FailureKind::Runtime,
        };
        Self::new(Stage::Trace, artifact, kind, e)
    }

    fn sim(artifact: &str, e: SimError) -> Self {
        let kind = match e {
            SimError::TraceExhausted { .. } => FailureKind::Runtime,
            _ => FailureKind::Validation,
        };
        Self::new(Stage::Simulate, artifact, kind, e)
    }

    fn metrics(artifact: &str, e: MetricsError) -> Self {
        let kind = match e {
            MetricsError::InvalidPenalty(_)
            | MetricsError::InvalidThresholds(_)
            | MetricsError::InvalidWeights(_) => FailureKind::Validation,
            _ => FailureKind::Runtime,
        };
        Self::new(Stage::Metrics, artifact, kind, e)
    }

    fn read(stage: Stage, path: &Path, e: impl fmt::Display) -> Self {
        Self::new(
            stage,
            path.display().to_string(),
            FailureKind::Validation,
            e,
        )
    }

    fn write(path: &Path, e: impl fmt::Display) -> Self {
        Self::new(
            Stage::Write,
            path.display().to_string(),
            FailureKind::Runtime,
            e,
        )
    }
}

pub type RunResult<T> = Result<T, RunError>;

const BUILTIN_GRAPH: &str = "<builtin:uniad_like>";

fn graph_name(cfg: &RunConfig) -> String {
    cfg.graph_path
        .as_ref()
        .map_or(BUILTIN_GRAPH.to_string(), |p| p.display().to_string())
}

pub fn load_config(path: &Path) -> RunResult<RunConfig> {
    RunConfig::load(path).map_err(|e| RunError::config(&path.display().to_string(), e))
}

/// The source graph and its serialized bytes.
pub fn load_graph(cfg: &RunConfig) -> RunResult<(Graph, String)> {
    match &cfg.graph_path {
        None => {
            let g = uniad_like();
            let text = serialize_graph(&g);
            Ok((g, text))
        }
        Some(path) => {
            let text =
                fs::read_to_string(path).map_err(|e| RunError::read(Stage::LoadGraph, path, e))?;
            let g = parse_graph(&text)
                .map_err(|e| RunError::ir(Stage::LoadGraph, &path.display().to_string(), e))?;
            Ok((g, text))
        }
    }
}

/// Calibration file contents: explicit frames, or a seeded generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CalibrationFile {
    Random { random: RandomCalibration },
    Frames(CalibrationSet),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomCalibration {
    pub frames: usize,
    pub seed: u64,
}

impl CalibrationFile {
    pub fn resolve(&self, g: &Graph) -> CalibrationSet {
        match self {
            CalibrationFile::Random { random } => {
                CalibrationSet::random(g, random.frames, random.seed)
            }
            CalibrationFile::Frames(set) => set.clone(),
        }
    }
}

/// Calibration frames from the configured file, or seeded random frames.
pub fn load_calibration(cfg: &RunConfig, g: &Graph) -> RunResult<CalibrationSet> {
    let set = match &cfg.calibration_path {
        Some(path) => {
            let text =
                fs::read_to_string(path).map_err(|e| RunError::read(Stage::Calibrate, path, e))?;
            let file: CalibrationFile = serde_json::from_str(&text)
                .map_err(|e| RunError::read(Stage::Calibrate, path, e))?;
            file.resolve(g)
        }
        None => CalibrationSet::random(g, cfg.quant.calibration_frames, cfg.seed),
    };
    let artifact = cfg
        .calibration_path
        .as_ref()
        .map_or("<random>".to_string(), |p| p.display().to_string());
    if set.frames.is_empty() {
        return Err(RunError::new(
            Stage::Calibrate,
            artifact,
            FailureKind::Validation,
            "no calibration frames",
        ));
    }
    set.check(g)
        .map_err(|e| RunError::ir(Stage::Calibrate, &artifact, e))?;
    Ok(set)
}

/// Graph and side products of building one scheme.
#[derive(Debug, Clone)]
pub struct SchemeArtifacts {
    pub graph: Graph,
    pub reports: Vec<PassReport>,
    pub plan: Option<QuantizationPlan>,
    pub warnings: Vec<String>,
}

fn run_passes(g: &Graph, passes: &[Pass], artifact: &str) -> RunResult<(Graph, Vec<PassReport>)> {
    optimize_pipeline(g, passes).map_err(|e| RunError::pass(artifact, e))
}

/// Default pipeline, calibration, planning, rewriting and clean-up.
pub fn quantize_graph(
    cfg: &RunConfig,
    source: &Graph,
    scheme: QuantScheme,
    calibration: &CalibrationSet,
) -> RunResult<SchemeArtifacts> {
    let name = graph_name(cfg);
    let (opt, mut reports) = run_passes(source, &Pass::default_pipeline(), &name)?;
    let calib_name = cfg
        .calibration_path
        .as_ref()
        .map_or("<random>".to_string(), |p| p.display().to_string());
    let ranges = calibrate(&opt, calibration)
        .map_err(|e| RunError::quant(Stage::Calibrate, &calib_name, e))?;
    let plan = plan_with(&opt, scheme, &ranges, cfg.quant.long_sequence_threshold)
        .map_err(|e| RunError::quant(Stage::Quantize, &name, e))?;
    let mut warnings = Vec::new();
    if plan.quantized_nodes.is_empty() {
        warnings.push(format!(
            "scheme {scheme:?} selects no quantizable nodes in `{name}`; the graph stays in float"
        ));
    }
    let rewritten =
        apply_plan(&opt, &plan).map_err(|e| RunError::quant(Stage::Quantize, &name, e))?;
    let (graph, tail) = run_passes(&rewritten, &[Pass::Fold, Pass::Dce], &name)?;
    reports.extend(tail);
    Ok(SchemeArtifacts {
        graph,
        reports,
        plan: Some(plan),
        warnings,
    })
}

/// Builds the graph evaluated under `cfg.scheme`.
pub fn build_scheme(cfg: &RunConfig, source: &Graph) -> RunResult<SchemeArtifacts> {
    let name = graph_name(cfg);
    let plain = |(graph, reports): (Graph, Vec<PassReport>)| SchemeArtifacts {
        graph,
        reports,
        plan: None,
        warnings: Vec::new(),
    };
    match &cfg.scheme {
        Scheme::Baseline => Ok(plain((source.clone(), Vec::new()))),
        Scheme::Pruned(tags) => Ok(plain(run_passes(
            source,
            &[Pass::Prune(PruneSpec::new(tags.iter().copied()))],
            &name,
        )?)),
        Scheme::HardwareOpt | Scheme::FpsCap(_) => {
            Ok(plain(run_passes(source, &Pass::default_pipeline(), &name)?))
        }
        Scheme::Quant(q) => {
            let calibration = load_calibration(cfg, source)?;
            quantize_graph(cfg, source, *q, &calibration)
        }
    }
}

fn write_file(path: &Path, contents: &str) -> RunResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| RunError::write(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| RunError::write(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeSummary {
    pub scheme: String,
    pub nodes_before: usize,
    pub nodes_after: usize,
    pub latency_before_s: f64,
    pub latency_after_s: f64,
    pub bytes_before: usize,
    pub bytes_after: usize,
}

#[derive(Debug, Clone)]
pub struct OptimizeOutcome {
    pub summary: OptimizeSummary,
    pub artifacts: SchemeArtifacts,
    pub graph_path: PathBuf,
}

fn latency(cfg: &RunConfig, g: &Graph, artifact: &str) -> RunResult<f64> {
    estimate_graph_latency(g, &cfg.hardware).map_err(|e| RunError::ir(Stage::Trace, artifact, e))
}

/// Writes `optimized.json`, `optimize.json` and, when requested,
/// `pass_report.json` into the output directory. A baseline run copies the
/// input bytes unchanged.
pub fn cmd_optimize(cfg: &RunConfig) -> RunResult<OptimizeOutcome> {
    let (source, text) = load_graph(cfg)?;
    let artifacts = build_scheme(cfg, &source)?;
    let out_text = if cfg.scheme == Scheme::Baseline {
        text.clone()
    } else {
        serialize_graph(&artifacts.graph)
    };
    let name = graph_name(cfg);
    let summary = OptimizeSummary {
        scheme: cfg.scheme.to_string(),
        nodes_before: source.nodes.len(),
        nodes_after: artifacts.graph.nodes.len(),
        latency_before_s: latency(cfg, &source, &name)?,
        latency_after_s: latency(cfg, &artifacts.graph, &name)?,
        bytes_before: text.len(),
        bytes_after: out_text.len(),
    };
    let graph_path = cfg.output_dir.join("optimized.json");
    write_file(&graph_path, &out_text)?;
    write_file(&cfg.output_dir.join("optimize.json"), &to_json(&summary))?;
    if cfg.emit_pass_report {
        write_file(
            &cfg.output_dir.join("pass_report.json"),
            &to_json(&artifacts.reports),
        )?;
    }
    Ok(OptimizeOutcome {
        summary,
        artifacts,
        graph_path,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizeSummary {
    pub scheme: QuantScheme,
    pub quantized: usize,
    pub excluded: usize,
    pub fp32_bytes: usize,
    pub quantized_bytes: usize,
    pub fp32_weight_bytes: usize,
    pub quantized_weight_bytes: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct QuantizeOutcome {
    pub summary: QuantizeSummary,
    pub plan: QuantizationPlan,
    pub graph: Graph,
}

/// Bytes of all constant tensors at their declared precision.
pub fn weight_bytes(g: &Graph) -> usize {
    g.constants
        .keys()
        .filter_map(|k| g.tensors.get(k))
        .map(|s| s.bytes())
        .sum()
}

/// Writes `plan.json`, `quantized.json` and `quantize.json`. Requires a
/// calibration file and a `quant` scheme.
pub fn cmd_quantize(cfg: &RunConfig) -> RunResult<QuantizeOutcome> {
    let Scheme::Quant(scheme) = cfg.scheme else {
        return Err(RunError::new(
            Stage::Config,
            "scheme",
            FailureKind::Validation,
            format!("quantize needs a quant scheme, got {}", cfg.scheme),
        ));
    };
    if cfg.calibration_path.is_none() {
        return Err(RunError::new(
            Stage::Calibrate,
            "calibration_path",
            FailureKind::Validation,
            "missing calibration file",
        ));
    }
    let (source, _) = load_graph(cfg)?;
    let calibration = load_calibration(cfg, &source)?;
    let artifacts = quantize_graph(cfg, &source, scheme, &calibration)?;
    let plan = artifacts
        .plan
        .clone()
        .expect("quantization produces a plan");
    let fp32 = run_passes(&source, &Pass::default_pipeline(), &graph_name(cfg))?.0;
    let quantized_text = serialize_graph(&artifacts.graph);
    let summary = QuantizeSummary {
        scheme,
        quantized: plan.quantized_nodes.len(),
        excluded: plan.excluded_nodes.len(),
        fp32_bytes: serialize_graph(&fp32).len(),
        quantized_bytes: quantized_text.len(),
        fp32_weight_bytes: weight_bytes(&fp32),
        quantized_weight_bytes: weight_bytes(&artifacts.graph),
        warnings: artifacts.warnings.clone(),
    };
    write_file(&cfg.output_dir.join("plan.json"), &to_json(&plan))?;
    write_file(&cfg.output_dir.join("quantized.json"), &quantized_text)?;
    write_file(&cfg.output_dir.join("quantize.json"), &to_json(&summary))?;
    if cfg.emit_pass_report {
        write_file(
            &cfg.output_dir.join("pass_report.json"),
            &to_json(&artifacts.reports),
        )?;
    }
    Ok(QuantizeOutcome {
        summary,
        plan,
        graph: artifacts.graph,
    })
}

fn read_scenarios(path: &Path) -> RunResult<Vec<Scenario>> {
    let text = fs::read_to_string(path).map_err(|e| RunError::read(Stage::LoadSuite, path, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| RunError::read(Stage::LoadSuite, path, e))?;
    let parsed = if value.is_array() {
        serde_json::from_value::<Vec<Scenario>>(value)
    } else {
        serde_json::from_value::<Scenario>(value).map(|s| vec![s])
    };
    parsed.map_err(|e| RunError::read(Stage::LoadSuite, path, e))
}

/// Scenarios from a file or directory of JSON files, or a generated suite;
/// sorted by id.
pub fn load_suite(cfg: &RunConfig) -> RunResult<Vec<Scenario>> {
    let mut suite = match &cfg.scenario_suite_path {
        None => generate_suite(cfg.seed, &cfg.suite),
        Some(path) if path.is_dir() => {
            let mut files: Vec<PathBuf> = fs::read_dir(path)
                .map_err(|e| RunError::read(Stage::LoadSuite, path, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "json"))
                .collect();
            files.sort();
            let mut all = Vec::new();
            for f in files {
                all.extend(read_scenarios(&f)?);
            }
            all
        }
        Some(path) => read_scenarios(path)?,
    };
    suite.sort_by(|a, b| a.id.cmp(&b.id));
    let mut seen = BTreeSet::new();
    for sc in &suite {
        if !seen.insert(sc.id.clone()) {
            return Err(RunError::new(
                Stage::LoadSuite,
                &sc.id,
                FailureKind::Validation,
                "duplicate scenario id",
            ));
        }
        sc.validate()
            .map_err(|e| RunError::new(Stage::LoadSuite, &sc.id, FailureKind::Validation, e))?;
    }
    if suite.is_empty() {
        return Err(RunError::new(
            Stage::LoadSuite,
            "suite",
            FailureKind::Validation,
            "no scenarios",
        ));
    }
    Ok(suite)
}

/// Writes one JSON file per scenario into `<output_dir>/suite`.
pub fn cmd_gen_suite(cfg: &RunConfig) -> RunResult<Vec<PathBuf>> {
    let dir = cfg.output_dir.join("suite");
    let mut paths = Vec::new();
    for sc in generate_suite(cfg.seed, &cfg.suite) {
        let path = dir.join(format!("{}.json", sc.id));
        write_file(&path, &to_json(&sc))?;
        paths.push(path);
    }
    Ok(paths)
}

/// Writes `<output_dir>/calibration.json` with `frames` explicit frames for
/// the configured graph.
pub fn cmd_gen_calibration(cfg: &RunConfig, frames: usize) -> RunResult<PathBuf> {
    let (g, _) = load_graph(cfg)?;
    let path = cfg.output_dir.join("calibration.json");
    let set = CalibrationSet::random(&g, frames, cfg.seed);
    write_file(
        &path,
        &serde_json::to_string(&set).expect("calibration serializes"),
    )?;
    Ok(path)
}

/// Latency and energy inputs shared by every route of one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    /// Per-inference latency before throttling.
    pub base_latency_s: f64,
    /// Lower bound imposed by an FPS cap.
    pub min_latency_s: Option<f64>,
    pub dynamic_energy_j: f64,
    pub spike_rules: Vec<SpikeRule>,
}

impl LatencyModel {
    pub fn for_graph(cfg: &RunConfig, g: &Graph) -> RunResult<Self> {
        let name = graph_name(cfg);
        let base = match cfg.sim.fixed_latency_s {
            Some(t) => t,
            None => latency(cfg, g, &name)?,
        };
        let min_latency_s = match cfg.scheme {
            Scheme::FpsCap(fps) => Some(1.0 / fps),
            _ => None,
        };
        let spike_rules = cfg
            .spike_rules
            .iter()
            .filter(|r| r.requires_module.is_none_or(|tag| g.count_by_tag(tag) > 0))
            .cloned()
            .collect();
        Ok(Self {
            base_latency_s: base,
            min_latency_s,
            dynamic_energy_j: dynamic_energy(g, &cfg.hardware)
                .map_err(|e| RunError::ir(Stage::Trace, &name, e))?,
            spike_rules,
        })
    }

    fn cap(&self, t: f64) -> f64 {
        self.min_latency_s.map_or(t, |m| t.max(m))
    }
}

/// FNV-1a, used to derive per-route seeds independent of execution order.
fn stable_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn drive(cfg: &RunConfig, sc: &Scenario, source: LatencySource) -> RunResult<TrajectoryLog> {
    let rts = cfg.sim.rts(source);
    let (policy, vehicle) = (cfg.policy.clone(), cfg.sim.vehicle.clone());
    run_route(sc, |o| builtin_policy(o, &policy, &vehicle), &rts)
        .map_err(|e| RunError::sim(&sc.id, e))
}

/// Per-decision-frame obstacle signal of a run, padded with `false`.
pub fn obstacle_signal(log: &TrajectoryLog, n_frames: usize) -> Vec<bool> {
    (0..n_frames)
        .map(|k| k > 0 && log.frames.get(k - 1).is_some_and(|f| f.obstacle_ahead))
        .collect()
}

/// Frames covering the route's time budget.
pub fn trace_frames(sc: &Scenario, dt: f64) -> usize {
    (sc.timeout_s / dt).ceil() as usize + 1
}

/// Latency trace of one route. Obstacle-triggered spikes follow the signal
/// of a reference run at the unspiked latency.
pub fn route_trace(
    cfg: &RunConfig,
    sc: &Scenario,
    model: &LatencyModel,
) -> RunResult<LatencyTrace> {
    let n = trace_frames(sc, cfg.sim.dt);
    let needs_signal = model
        .spike_rules
        .iter()
        .any(|r| r.trigger == SpikeTrigger::ObstacleAhead);
    let signal = if needs_signal {
        let reference = drive(
            cfg,
            sc,
            LatencySource::Fixed(model.cap(model.base_latency_s)),
        )?;
        Some(obstacle_signal(&reference, n))
    } else {
        None
    };
    let seed = cfg.seed ^ stable_hash(&sc.id);
    let mut trace = trace_from_base(
        model.base_latency_s,
        n,
        &model.spike_rules,
        signal.as_deref(),
        seed,
    )
    .map_err(|e| RunError::cost(&sc.id, e))?;
    for t in &mut trace.frame_latencies_s {
        *t = model.cap(*t);
    }
    Ok(trace)
}

/// Sliding-window energy per frame over the trace, or the plain mean when
/// the trace is shorter than warm-up plus one window.
pub fn route_energy(cfg: &RunConfig, trace: &LatencyTrace, dynamic_j: f64) -> f64 {
    let per_frame: Vec<f64> = trace
        .frame_latencies_s
        .iter()
        .map(|&t| frame_energy_at(dynamic_j, t, &cfg.hardware))
        .collect();
    sliding_window_energy(
        &per_frame,
        cfg.energy.window,
        cfg.energy.warmup_s,
        cfg.sim.dt,
    )
    .unwrap_or_else(|_| per_frame.iter().sum::<f64>() / per_frame.len().max(1) as f64)
}

/// Mean latency over frames after the warm-up period (all frames when the
/// trace is shorter).
pub fn mean_latency_after_warmup(cfg: &RunConfig, trace: &LatencyTrace) -> f64 {
    let skip = warmup_frames(cfg.energy.warmup_s, cfg.sim.dt);
    let t = &trace.frame_latencies_s;
    let tail = if skip < t.len() { &t[skip..] } else { &t[..] };
    tail.iter().sum::<f64>() / tail.len().max(1) as f64
}

#[derive(Debug, Clone)]
pub struct RouteRun {
    pub metrics: RouteMetrics,
    pub log: TrajectoryLog,
    pub trace: LatencyTrace,
}

pub fn run_scenario(cfg: &RunConfig, sc: &Scenario, model: &LatencyModel) -> RunResult<RouteRun> {
    let trace = route_trace(cfg, sc, model)?;
    let log = drive(cfg, sc, LatencySource::Trace(trace.clone()))?;
    let ds = compute_ds(&segment_outcomes(&log), &cfg.penalties)
        .map_err(|e| RunError::metrics(&sc.id, e))?;
    let metrics = RouteMetrics {
        route: sc.id.clone(),
        ds,
        de: compute_de(&log, &cfg.de),
        dc: compute_dc(&log, &cfg.thresholds, cfg.dc_segment_len),
        energy_per_frame_j: route_energy(cfg, &trace, model.dynamic_energy_j),
        crashed: log.crashed(),
        mean_latency_s: mean_latency_after_warmup(cfg, &trace),
    };
    Ok(RouteRun {
        metrics,
        log,
        trace,
    })
}

/// Runs every scenario (in parallel) and returns results sorted by id.
pub fn run_suite(
    cfg: &RunConfig,
    suite: &[Scenario],
    model: &LatencyModel,
) -> RunResult<Vec<RouteRun>> {
    let mut runs: Vec<RouteRun> = suite
        .par_iter()
        .map(|sc| run_scenario(cfg, sc, model))
        .collect::<RunResult<_>>()?;
    runs.sort_by(|a, b| a.metrics.route.cmp(&b.metrics.route));
    Ok(runs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSummary {
    pub source: String,
    pub nodes: usize,
    pub serialized_bytes: usize,
    pub latency: LatencyModel,
}

/// Everything `evaluate` writes to `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scheme: String,
    /// Digest of the evaluated scenarios; reports are comparable only when
    /// their digests match.
    pub suite_digest: String,
    pub graph: GraphSummary,
    pub evaluation: EvaluationReport,
    pub config: RunConfig,
}

/// Hex FNV-1a digest of the serialized suite.
pub fn suite_digest(suite: &[Scenario]) -> String {
    format!(
        "{:016x}",
        stable_hash(&serde_json::to_string(suite).expect("scenarios serialize"))
    )
}

#[derive(Debug, Clone)]
pub struct EvaluateOutcome {
    pub report: RunReport,
    pub runs: Vec<RouteRun>,
    pub warnings: Vec<String>,
}

/// Builds the scheme, runs the suite and scores it, without writing files.
pub fn evaluate_config(cfg: &RunConfig) -> RunResult<EvaluateOutcome> {
    cfg.validate().map_err(|e| RunError::config("config", e))?;
    let (source, _) = load_graph(cfg)?;
    let artifacts = build_scheme(cfg, &source)?;
    let suite = load_suite(cfg)?;
    let model = LatencyModel::for_graph(cfg, &artifacts.graph)?;
    let runs = run_suite(cfg, &suite, &model)?;
    let metrics: Vec<RouteMetrics> = runs.iter().map(|r| r.metrics.clone()).collect();
    let evaluation = evaluate(metrics, &cfg.weights, cfg.energy_sign)
        .map_err(|e| RunError::metrics("suite", e))?;
    let report = RunReport {
        scheme: cfg.scheme.to_string(),
        suite_digest: suite_digest(&suite),
        graph: GraphSummary {
            source: graph_name(cfg),
            nodes: artifacts.graph.nodes.len(),
            serialized_bytes: serialize_graph(&artifacts.graph).len(),
            latency: model,
        },
        evaluation,
        config: cfg.clone(),
    };
    Ok(EvaluateOutcome {
        report,
        runs,
        warnings: artifacts.warnings,
    })
}

/// Writes `report.json`, `report.csv`, per-route `logs/<id>.csv` and
/// `traces/<id>.csv`, and optionally `pass_report.json`.
pub fn cmd_evaluate(cfg: &RunConfig) -> RunResult<EvaluateOutcome> {
    let outcome = evaluate_config(cfg)?;
    let out = &cfg.output_dir;
    write_file(&out.join("report.json"), &to_json(&outcome.report))?;
    write_file(&out.join("report.csv"), &outcome.report.evaluation.to_csv())?;
    for run in &outcome.runs {
        write_file(
            &out.join("logs").join(format!("{}.csv", run.metrics.route)),
            &run.log.to_csv(),
        )?;
        write_file(
            &out.join("traces")
                .join(format!("{}.csv", run.metrics.route)),
            &run.trace.to_csv(),
        )?;
    }
    if cfg.emit_pass_report {
        let (source, _) = load_graph(cfg)?;
        let artifacts = build_scheme(cfg, &source)?;
        write_file(&out.join("pass_report.json"), &to_json(&artifacts.reports))?;
    }
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub scheme: String,
    pub fps: f64,
    pub ds: f64,
    pub de: Option<f64>,
    pub dc: Option<f64>,
    pub energy_j: f64,
    pub eer_av: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeComparison {
    pub rows: Vec<ComparisonRow>,
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into())
}

impl SchemeComparison {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("scheme,fps,ds,de,dc,energy_j,eer_av\n");
        for r in &self.rows {
            let o = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.scheme,
                r.fps,
                r.ds,
                o(r.de),
                o(r.dc),
                r.energy_j,
                r.eer_av
            ));
        }
        s
    }

    /// Column-aligned table for terminals.
    pub fn to_text(&self) -> String {
        let header = ["scheme", "fps", "ds", "de", "dc", "energy_j", "eer_av"].map(String::from);
        let mut cells = vec![header.to_vec()];
        for r in &self.rows {
            cells.push(vec![
                r.scheme.clone(),
                format!("{:.2}", r.fps),
                format!("{:.3}", r.ds),
                opt_cell(r.de),
                opt_cell(r.dc),
                format!("{:.6}", r.energy_j),
                format!("{:.3}", r.eer_av),
            ]);
        }
        let widths: Vec<usize> = (0..header.len())
            .map(|j| cells.iter().map(|row| row[j].len()).max().unwrap_or(0))
            .collect();
        let mut s = String::new();
        for row in &cells {
            let line: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(j, c)| {
                    if j == 0 {
                        format!("{c:<w$}", w = widths[j])
                    } else {
                        format!("{c:>w$}", w = widths[j])
                    }
                })
                .collect();
            s.push_str(line.join("  ").trim_end());
            s.push('\n');
        }
        s
    }
}

/// Rescores several reports on a joint normalization population, using the
/// weighting and energy sign of the first report.
pub fn compare_reports(reports: &[RunReport]) -> RunResult<SchemeComparison> {
    if reports.len() < 2 {
        return Err(RunError::new(
            Stage::Compare,
            "reports",
            FailureKind::Validation,
            "need at least two reports",
        ));
    }
    for r in &reports[1..] {
        if r.suite_digest != reports[0].suite_digest {
            return Err(RunError::new(
                Stage::Compare,
                &r.scheme,
                FailureKind::Validation,
                "scenario suite differs from the first report",
            ));
        }
    }
    let groups: Vec<Vec<RouteMetrics>> = reports
        .iter()
        .map(|r| r.evaluation.routes.clone())
        .collect();
    let first = &reports[0].config;
    let joint = evaluate_joint(&groups, &first.weights, first.energy_sign)
        .map_err(|e| RunError::metrics("compare", e))?;
    let rows = reports
        .iter()
        .zip(joint)
        .map(|(r, e)| ComparisonRow {
            scheme: r.scheme.clone(),
            fps: e.summary.fps,
            ds: e.summary.mean_ds,
            de: e.summary.mean_de,
            dc: e.summary.mean_dc,
            energy_j: e.summary.mean_energy_per_frame_j,
            eer_av: e.eer_av,
        })
        .collect();
    Ok(SchemeComparison { rows })
}

/// Loads a `report.json`, or evaluates a `.toml` config in memory.
pub fn load_report(path: &Path) -> RunResult<RunReport> {
    if path.extension().is_some_and(|x| x == "toml") {
        let cfg = load_config(path)?;
        return Ok(evaluate_config(&cfg)?.report);
    }
    let text = fs::read_to_string(path).map_err(|e| RunError::read(Stage::Compare, path, e))?;
    serde_json::from_str(&text).map_err(|e| RunError::read(Stage::Compare, path, e))
}

/// Writes `comparison.csv`, `comparison.txt` and `comparison.json` into
/// `out_dir`.
pub fn cmd_compare(inputs: &[PathBuf], out_dir: &Path) -> RunResult<SchemeComparison> {
    let reports: Vec<RunReport> = inputs
        .iter()
        .map(|p| load_report(p))
        .collect::<RunResult<_>>()?;
    let cmp = compare_reports(&reports)?;
    write_file(&out_dir.join("comparison.csv"), &cmp.to_csv())?;
    write_file(&out_dir.join("comparison.txt"), &cmp.to_text())?;
    write_file(&out_dir.join("comparison.json"), &to_json(&cmp))?;
    Ok(cmp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::ModuleTag;
    use crate::sim::SuiteParams;

    fn small() -> RunConfig {
        RunConfig {
            suite: SuiteParams {
                count: 3,
                route_length_m: 60.0,
            },
            ..RunConfig::default()
        }
    }

    #[test]
    fn exit_codes() {
        let e = RunError::pass("g", PassError::ProtectedModule(ModuleTag::Planner));
        assert_eq!(e.exit_code(), 3);
        assert_eq!(
            RunError::config("c", ConfigError::Parse("x".into())).exit_code(),
            1
        );
        assert_eq!(
            RunError::sim("r", SimError::TraceExhausted { frame: 3, len: 2 }).exit_code(),
            2
        );
        assert!(e.to_string().starts_with("optimize failed on `g`"));
    }

    #[test]
    fn evaluation_is_deterministic_and_sorted() {
        let cfg = small();
        let a = evaluate_config(&cfg).unwrap();
        let b = evaluate_config(&cfg).unwrap();
        assert_eq!(to_json(&a.report), to_json(&b.report));
        let ids: Vec<&str> = a
            .report
            .evaluation
            .routes
            .iter()
            .map(|r| r.route.as_str())
            .collect();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted);
        assert_eq!(a.report.config, cfg);
    }

    #[test]
    fn fps_cap_inflates_latency() {
        let cfg = RunConfig {
            scheme: Scheme::FpsCap(10.0),
            ..small()
        };
        let rep = evaluate_config(&cfg).unwrap().report;
        assert!(rep
            .evaluation
            .routes
            .iter()
            .all(|r| (r.mean_latency_s - 0.1).abs() < 1e-12));
        assert!((rep.evaluation.summary.fps - 10.0).abs() < 1e-9);
    }

    #[test]
    fn obstacle_spikes_follow_reference_run() {
        let cfg = RunConfig {
            spike_rules: vec![SpikeRule::obstacle_ahead()],
            suite: SuiteParams {
                count: 3,
                route_length_m: 150.0,
            },
            ..RunConfig::default()
        };
        let suite = load_suite(&cfg).unwrap();
        let (g, _) = load_graph(&cfg).unwrap();
        let model = LatencyModel::for_graph(&cfg, &g).unwrap();
        let stopped = suite.iter().find(|s| s.has_stopped_obstacle()).unwrap();
        let trace = route_trace(&cfg, stopped, &model).unwrap();
        assert!(!trace.spike_frames.is_empty());
        assert_eq!(trace.len(), trace_frames(stopped, cfg.sim.dt));
    }

    #[test]
    fn comparing_a_report_with_itself_gives_identical_rows() {
        let rep = evaluate_config(&small()).unwrap().report;
        let cmp = compare_reports(&[rep.clone(), rep.clone()]).unwrap();
        assert_eq!(cmp.rows.len(), 2);
        assert_eq!(cmp.rows[0], cmp.rows[1]);
        assert!(compare_reports(std::slice::from_ref(&rep)).is_err());
        let other = evaluate_config(&RunConfig { seed: 1, ..small() })
            .unwrap()
            .report;
        assert_eq!(compare_reports(&[rep, other]).unwrap_err().exit_code(), 1);
        assert_eq!(cmp.to_text().lines().count(), 3);
    }

    #[test]
    fn calibration_file_forms() {
        let g = uniad_like();
        let f: CalibrationFile =
            serde_json::from_str(r#"{"random": {"frames": 2, "seed": 5}}"#).unwrap();
        assert_eq!(f.resolve(&g), CalibrationSet::random(&g, 2, 5));
        let explicit = serde_json::to_string(&CalibrationSet::random(&g, 1, 0)).unwrap();
        assert!(matches!(
            serde_json::from_str::<CalibrationFile>(&explicit).unwrap(),
            CalibrationFile::Frames(_)
        ));
    }
}
