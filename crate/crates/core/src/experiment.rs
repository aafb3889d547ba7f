//! Experiment configuration and multi-run orchestration.
//!
//! An experiment is one JSON document naming a catalog, a workload (generated
//! or read from a trace), the server, AoC and cost settings, the policies to
//! run and the replication seeds. Each seed regenerates the workload with that
//! seed and also seeds the random policy.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::catalog::{
    calibrate_accuracy, load_catalog, parse_catalog, AccuracyModel, CalibrationError, Catalog,
    CatalogError,
};
use crate::context::AoCConfig;
use crate::edgecache::EdgeServerConfig;
use crate::policy::{PolicyError, PolicyKind, PolicyRegistry};
use crate::simcost::{
    run_simulation, write_request_log_to, CostWeights, MeanMetrics, RunMetrics, Scenario, SimError,
    SimOptions, SimOutput,
};
use crate::workload::{
    generate_trace, read_trace, write_trace, Request, WorkloadConfig, WorkloadError,
};

pub const DEFAULT_CONFIG_JSON: &str = include_str!("../../../default.json");

pub const THREADS_ENV: &str = "EDGESERVE_SIM_THREADS";

pub const COMPARISON_HEADER: &str = "policy,seed,system_cost,switching_cost,total_accuracy_cost,average_accuracy_cost,edge_inference_latency_cost,edge_offloading_latency_cost,cloud_cost,edge_execution_ratio,request_count,edge_executions,cloud_executions,model_loads";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error at {path}: {message}")]
    Config { path: String, message: String },
    #[error("unknown policy {name:?} (known: {known})")]
    UnknownPolicy { name: String, known: String },
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Sim(#[from] SimError),
}

impl ExperimentError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config { .. } => 2,
            ExperimentError::UnknownPolicy { .. } => 3,
            ExperimentError::Io { .. } | ExperimentError::Sim(_) => 1,
        }
    }
}

fn config_error(path: impl Into<String>, message: impl Into<String>) -> ExperimentError {
    ExperimentError::Config {
        path: path.into(),
        message: message.into(),
    }
}

fn join_path(prefix: &str, rest: &str) -> String {
    match (prefix.is_empty(), rest.is_empty() || rest == ".") {
        (true, _) => rest.to_string(),
        (false, true) => prefix.to_string(),
        (false, false) if rest.starts_with('[') => format!("{prefix}{rest}"),
        (false, false) => format!("{prefix}.{rest}"),
    }
}

/// Turns a serde error into a config error whose path points at the fault,
/// including the name of a missing field.
fn schema_error(
    prefix: &str,
    err: serde_path_to_error::Error<serde_json::Error>,
) -> ExperimentError {
    let mut path = join_path(prefix, &err.path().to_string());
    let message = err.inner().to_string();
    if let Some(field) = message
        .strip_prefix("missing field `")
        .and_then(|rest| rest.split('`').next())
    {
        path = join_path(&path, field);
    }
    if path.is_empty() {
        path = ".".into();
    }
    config_error(path, message)
}

fn from_value<T: serde::de::DeserializeOwned>(
    prefix: &str,
    value: Value,
) -> Result<T, ExperimentError> {
    serde_path_to_error::deserialize(value).map_err(|e| schema_error(prefix, e))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    catalog: Option<Value>,
    #[serde(default)]
    workload: Option<Value>,
    #[serde(default)]
    trace: Option<PathBuf>,
    server: EdgeServerConfig,
    aoc: AoCConfig,
    weights: CostWeights,
    #[serde(default)]
    options: SimOptions,
    #[serde(default)]
    policy: Option<String>,
    #[serde(default)]
    policies: Option<Vec<String>>,
    #[serde(default)]
    seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum WorkloadSource {
    Generated(WorkloadConfig),
    Trace(PathBuf),
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub workload: WorkloadSource,
    /// Canonical policy names, in run and report order.
    pub policies: Vec<String>,
    pub seeds: Vec<u64>,
}

impl ExperimentConfig {
    /// Reads a config file. Relative catalog and trace paths resolve against
    /// the file's directory.
    pub fn load(
        path: impl AsRef<Path>,
        registry: &PolicyRegistry,
    ) -> Result<Self, ExperimentError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| config_error(path.display().to_string(), e.to_string()))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse(&text, base, registry)
    }

    /// The shipped default experiment.
    pub fn default_config() -> Self {
        Self::parse(
            DEFAULT_CONFIG_JSON,
            Path::new("."),
            &PolicyRegistry::builtin(),
        )
        .expect("shipped default config is valid")
    }

    pub fn parse(
        text: &str,
        base_dir: &Path,
        registry: &PolicyRegistry,
    ) -> Result<Self, ExperimentError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let raw: RawConfig =
            serde_path_to_error::deserialize(de).map_err(|e| schema_error("", e))?;

        let catalog = resolve_catalog(raw.catalog, base_dir)?;

        let workload = match (raw.workload, raw.trace) {
            (Some(_), Some(_)) => {
                return Err(config_error(
                    "trace",
                    "give either workload or trace, not both",
                ))
            }
            (None, None) => {
                return Err(config_error(
                    "workload",
                    "a workload or a trace path is required",
                ))
            }
            (Some(w), None) => {
                let w: WorkloadConfig = from_value("workload", w)?;
                w.validate(&catalog).map_err(|e| match e {
                    WorkloadError::Config { path, message } => {
                        config_error(join_path("workload", &path), message)
                    }
                    other => config_error("workload", other.to_string()),
                })?;
                WorkloadSource::Generated(w)
            }
            (None, Some(p)) => WorkloadSource::Trace(base_dir.join(p)),
        };

        let seeds = match (&workload, raw.seeds.is_empty()) {
            (WorkloadSource::Generated(_), true) => {
                return Err(config_error(
                    "seeds",
                    "at least one seed is required for a generated workload",
                ))
            }
            (WorkloadSource::Trace(_), true) => vec![0],
            (_, false) => raw.seeds,
        };

        let names = match (raw.policy, raw.policies) {
            (Some(_), Some(_)) => {
                return Err(config_error(
                    "policies",
                    "give either policy or policies, not both",
                ))
            }
            (Some(p), None) => vec![p],
            (None, Some(list)) if list.is_empty() => {
                return Err(config_error("policies", "list is empty"))
            }
            (None, Some(list)) => list,
            (None, None) => PolicyKind::ALL
                .iter()
                .map(|k| k.as_str().to_string())
                .collect(),
        };
        let mut policies: Vec<String> = Vec::with_capacity(names.len());
        for name in &names {
            let canonical = canonical_policy(registry, name)?;
            if !policies.contains(&canonical) {
                policies.push(canonical);
            }
        }

        let scenario = Scenario {
            catalog,
            server: raw.server,
            aoc: raw.aoc,
            weights: raw.weights,
            options: raw.options,
        };
        scenario
            .check()
            .map_err(|e| config_error(e.field, e.message))?;

        Ok(Self {
            scenario,
            workload,
            policies,
            seeds,
        })
    }

    /// The trace one seed runs against.
    pub fn trace_for_seed(&self, seed: u64) -> Result<Vec<Request>, ExperimentError> {
        match &self.workload {
            WorkloadSource::Generated(w) => {
                let cfg = WorkloadConfig { seed, ..w.clone() };
                generate_trace(&cfg, &self.scenario.catalog)
                    .map_err(|e| config_error("workload", e.to_string()))
            }
            WorkloadSource::Trace(path) => {
                read_trace(path, &self.scenario.catalog).map_err(|e| match e {
                    WorkloadError::Io { .. } => config_error("trace", e.to_string()),
                    other => config_error(format!("trace ({})", path.display()), other.to_string()),
                })
            }
        }
    }
}

fn canonical_policy(registry: &PolicyRegistry, name: &str) -> Result<String, ExperimentError> {
    registry
        .canonical(name)
        .map(str::to_string)
        .map_err(|e| match e {
            PolicyError::Unknown(name) => ExperimentError::UnknownPolicy {
                name,
                known: registry.names().collect::<Vec<_>>().join(", "),
            },
            other => config_error("policy", other.to_string()),
        })
}

fn resolve_catalog(value: Option<Value>, base_dir: &Path) -> Result<Catalog, ExperimentError> {
    let value = match value {
        None => return Ok(Catalog::builtin()),
        Some(v) => v,
    };
    let catalog_error = |prefix: &str, e: CatalogError| match e {
        CatalogError::Io { path, source } => {
            config_error(prefix, format!("cannot read {path}: {source}"))
        }
        CatalogError::Schema { path, message } | CatalogError::Invariant { path, message } => {
            config_error(join_path(prefix, &path), message)
        }
    };
    match value {
        Value::String(s) if s == "builtin" => Ok(Catalog::builtin()),
        Value::String(s) => Err(config_error(
            "catalog",
            format!("unknown catalog name {s:?}; use \"builtin\""),
        )),
        Value::Object(mut map) => {
            if map.len() != 1 {
                return Err(config_error(
                    "catalog",
                    "expected exactly one of \"path\" or \"models\"",
                ));
            }
            if let Some(p) = map.remove("path") {
                let p: PathBuf = from_value("catalog.path", p)?;
                let path = base_dir.join(p);
                let models = load_catalog(&path).map_err(|e| catalog_error("catalog", e))?;
                Catalog::new(models).map_err(|e| catalog_error("catalog", e))
            } else if let Some(models) = map.remove("models") {
                let text = serde_json::json!({ "models": models }).to_string();
                let models = parse_catalog(&text).map_err(|e| catalog_error("catalog", e))?;
                Catalog::new(models).map_err(|e| catalog_error("catalog", e))
            } else {
                Err(config_error("catalog", "expected \"path\" or \"models\""))
            }
        }
        _ => Err(config_error(
            "catalog",
            "expected \"builtin\", {\"path\": ...} or {\"models\": [...]}",
        )),
    }
}

/// Thread cap from the environment; `None` means let rayon decide.
pub fn thread_cap_from_env() -> Result<Option<usize>, ExperimentError> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(0) => Ok(None),
            Ok(n) => Ok(Some(n)),
            Err(_) => Err(config_error(
                THREADS_ENV,
                format!("expected a nonnegative integer, got {v:?}"),
            )),
        },
    }
}

/// Metrics of one policy over every seed, as written to `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyReport {
    pub policy: String,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<RunMetrics>,
    pub mean: MeanMetrics,
}

impl PolicyReport {
    fn new(policy: &str, seeds: &[u64], per_seed: Vec<RunMetrics>) -> Self {
        Self {
            policy: policy.to_string(),
            seeds: seeds.to_vec(),
            mean: MeanMetrics::of(&per_seed),
            per_seed,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// One (policy, seed) run.
pub struct RunResult {
    pub policy: String,
    pub seed: u64,
    pub output: SimOutput,
}

fn run_one(
    cfg: &ExperimentConfig,
    registry: &PolicyRegistry,
    policy: &str,
    seed: u64,
    trace: &[Request],
) -> Result<RunResult, ExperimentError> {
    let mut p = registry
        .create(policy, seed)
        .map_err(|_| ExperimentError::UnknownPolicy {
            name: policy.to_string(),
            known: registry.names().collect::<Vec<_>>().join(", "),
        })?;
    let output = run_simulation(&cfg.scenario, trace, p.as_mut())?;
    Ok(RunResult {
        policy: policy.to_string(),
        seed,
        output,
    })
}

/// Runs every (policy, seed) pair, fanning out over at most `threads`
/// workers. Results come back in policy-major, seed-minor order regardless of
/// scheduling.
pub fn run_all(
    cfg: &ExperimentConfig,
    registry: &PolicyRegistry,
    policies: &[String],
    threads: Option<usize>,
) -> Result<Vec<RunResult>, ExperimentError> {
    let traces = cfg
        .seeds
        .iter()
        .map(|&s| cfg.trace_for_seed(s))
        .collect::<Result<Vec<_>, _>>()?;
    let jobs: Vec<(&str, usize)> = policies
        .iter()
        .flat_map(|p| (0..cfg.seeds.len()).map(move |i| (p.as_str(), i)))
        .collect();
    let work = || {
        jobs.par_iter()
            .map(|&(p, i)| run_one(cfg, registry, p, cfg.seeds[i], &traces[i]))
            .collect::<Result<Vec<_>, _>>()
    };
    match threads {
        None => work(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| config_error(THREADS_ENV, e.to_string()))?
            .install(work),
    }
}

/// Groups run results into one report per policy, in `policies` order.
pub fn reports(
    cfg: &ExperimentConfig,
    policies: &[String],
    runs: &[RunResult],
) -> Vec<PolicyReport> {
    policies
        .iter()
        .map(|p| {
            let per_seed = cfg
                .seeds
                .iter()
                .map(|&s| {
                    runs.iter()
                        .find(|r| r.policy == *p && r.seed == s)
                        .expect("every pair was run")
                        .output
                        .metrics
                        .clone()
                })
                .collect();
            PolicyReport::new(p, &cfg.seeds, per_seed)
        })
        .collect()
}

pub fn run_policy(
    cfg: &ExperimentConfig,
    registry: &PolicyRegistry,
    policy: &str,
    threads: Option<usize>,
) -> Result<(PolicyReport, Vec<RunResult>), ExperimentError> {
    let policy = canonical_policy(registry, policy)?;
    let policies = [policy];
    let runs = run_all(cfg, registry, &policies, threads)?;
    let report = reports(cfg, &policies, &runs).remove(0);
    Ok((report, runs))
}

pub fn compare(
    cfg: &ExperimentConfig,
    registry: &PolicyRegistry,
    threads: Option<usize>,
) -> Result<Vec<PolicyReport>, ExperimentError> {
    let runs = run_all(cfg, registry, &cfg.policies, threads)?;
    Ok(reports(cfg, &cfg.policies, &runs))
}

/// Policies sorted by mean system cost, ties broken by name.
pub fn ranking(reports: &[PolicyReport]) -> Vec<(&str, f64)> {
    let mut rows: Vec<(&str, f64)> = reports
        .iter()
        .map(|r| (r.policy.as_str(), r.mean.costs.system_cost))
        .collect();
    rows.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(b.0)));
    rows
}

/// Row labels of the comparison table, top to bottom.
pub const SUMMARY_ROWS: [&str; 8] = [
    "System cost",
    "Switching cost",
    "Total accuracy cost",
    "Average accuracy cost",
    "Inference latency",
    "Offloading latency",
    "Cloud cost",
    "Edge Execution Ratio",
];

fn summary_values(m: &MeanMetrics) -> [f64; 8] {
    [
        m.costs.system_cost,
        m.costs.switching_cost,
        m.costs.total_accuracy_cost,
        m.average_accuracy_cost,
        m.costs.edge_inference_latency_cost,
        m.costs.edge_offloading_latency_cost,
        m.costs.cloud_cost,
        m.edge_execution_ratio,
    ]
}

/// Mean metrics as CSV: one row per table label, one column per policy.
pub fn summary_csv(reports: &[PolicyReport]) -> String {
    let mut out = String::from("metric");
    for r in reports {
        out.push(',');
        out.push_str(&r.policy);
    }
    out.push('\n');
    let values: Vec<[f64; 8]> = reports.iter().map(|r| summary_values(&r.mean)).collect();
    for (i, label) in SUMMARY_ROWS.iter().enumerate() {
        out.push_str(label);
        for v in &values {
            let _ = write!(out, ",{}", v[i]);
        }
        out.push('\n');
    }
    out
}

/// The same table aligned for a terminal.
pub fn summary_table(reports: &[PolicyReport]) -> String {
    let label_width = SUMMARY_ROWS.iter().map(|l| l.len()).max().unwrap_or(0);
    let mut out = format!("{:label_width$}", "");
    for r in reports {
        let _ = write!(out, "  {:>14}", r.policy);
    }
    out.push('\n');
    let values: Vec<[f64; 8]> = reports.iter().map(|r| summary_values(&r.mean)).collect();
    for (i, label) in SUMMARY_ROWS.iter().enumerate() {
        let _ = write!(out, "{label:label_width$}");
        for v in &values {
            if i == 7 {
                let _ = write!(out, "  {:>13.1}%", v[i] * 100.0);
            } else {
                let _ = write!(out, "  {:>14.4}", v[i]);
            }
        }
        out.push('\n');
    }
    out
}

pub fn comparison_csv(reports: &[PolicyReport]) -> String {
    let mut out = String::from(COMPARISON_HEADER);
    out.push('\n');
    for r in reports {
        for (seed, m) in r.seeds.iter().zip(&r.per_seed) {
            let c = &m.costs;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.policy,
                seed,
                c.system_cost,
                c.switching_cost,
                c.total_accuracy_cost,
                m.average_accuracy_cost,
                c.edge_inference_latency_cost,
                c.edge_offloading_latency_cost,
                c.cloud_cost,
                m.edge_execution_ratio,
                m.request_count,
                m.edge_executions,
                m.cloud_executions,
                m.model_loads
            );
        }
    }
    out
}

/// Writes `contents` next to `path` and renames it into place.
pub fn write_atomic(path: impl AsRef<Path>, contents: &[u8]) -> Result<(), ExperimentError> {
    let path = path.as_ref();
    let io_err = |source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    };
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{file_name}.tmp-{}", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(io_err)
}

pub fn request_log_name(policy: &str, seed: u64) -> String {
    format!("requests_{policy}_seed{seed}.csv")
}

/// Writes one request log per run that kept its records.
pub fn write_request_logs(out_dir: &Path, runs: &[RunResult]) -> Result<usize, ExperimentError> {
    let mut written = 0;
    for run in runs {
        if let Some(log) = &run.output.log {
            let mut buf = Vec::new();
            write_request_log_to(log, &mut buf).expect("writing to memory");
            write_atomic(out_dir.join(request_log_name(&run.policy, run.seed)), &buf)?;
            written += 1;
        }
    }
    Ok(written)
}

/// Writes the first seed's trace to `path` and returns the request count.
pub fn write_first_trace(cfg: &ExperimentConfig, path: &Path) -> Result<usize, ExperimentError> {
    if !matches!(cfg.workload, WorkloadSource::Generated(_)) {
        return Err(config_error(
            "workload",
            "gen-trace needs an inline workload",
        ));
    }
    let trace = cfg.trace_for_seed(cfg.seeds[0])?;
    let tmp = path.with_file_name(format!(
        ".{}.tmp-{}",
        path.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        std::process::id()
    ));
    write_trace(&trace, &tmp).map_err(|e| ExperimentError::Io {
        path: path.display().to_string(),
        source: match e {
            WorkloadError::Io { source, .. } => source,
            other => std::io::Error::other(other.to_string()),
        },
    })?;
    fs::rename(&tmp, path).map_err(|source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(trace.len())
}

/// Calibration outcome for one task of an in-context learner.
#[derive(Debug, Clone)]
pub struct CalibrationRow {
    pub model_id: String,
    pub task_id: String,
    pub k_ref: u32,
    pub result: Result<AccuracyModel, CalibrationError>,
}

impl CalibrationRow {
    /// Accuracy at K = 0, 1, 2, 4, ... up to and including `k_ref`.
    pub fn ladder(&self) -> Vec<(u32, f64)> {
        let Ok(model) = &self.result else {
            return Vec::new();
        };
        let mut ks = vec![0];
        let mut k = 1;
        while k < self.k_ref {
            ks.push(k);
            k *= 2;
        }
        if self.k_ref > 0 {
            ks.push(self.k_ref);
        }
        ks.into_iter()
            .map(|k| (k, model.accuracy_at(f64::from(k))))
            .collect()
    }
}

/// Calibrates every task that has a one-shot score.
pub fn calibration_report(catalog: &Catalog) -> Vec<CalibrationRow> {
    let mut rows = Vec::new();
    for m in catalog.models() {
        if !m.is_in_context_learner() {
            continue;
        }
        for t in m.tasks.iter().filter(|t| t.one_shot_score.is_some()) {
            let k_ref = m.context_limit_for(t);
            rows.push(CalibrationRow {
                model_id: m.id.clone(),
                task_id: t.task_id.clone(),
                k_ref,
                result: calibrate_accuracy(t, k_ref),
            });
        }
    }
    rows
}

pub fn format_calibration(rows: &[CalibrationRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<12} {:<20} {:>8} {:>8} {:>9} {:>5}  accuracy by K",
        "model", "task", "a0", "gain", "alpha", "K"
    );
    let mut failures = Vec::new();
    for row in rows {
        match &row.result {
            Ok(m) => {
                let ladder: Vec<String> = row
                    .ladder()
                    .iter()
                    .map(|(k, a)| format!("{k}:{a:.4}"))
                    .collect();
                let _ = writeln!(
                    out,
                    "{:<12} {:<20} {:>8.4} {:>8.4} {:>9.6} {:>5}  {}",
                    row.model_id,
                    row.task_id,
                    m.a0,
                    m.a1_gain,
                    m.alpha,
                    row.k_ref,
                    ladder.join(" ")
                );
            }
            Err(e) => failures.push((row, e)),
        }
    }
    if !failures.is_empty() {
        out.push_str("\nnot calibratable:\n");
        for (row, e) in failures {
            let _ = writeln!(out, "{:<12} {:<20} {}", row.model_id, row.task_id, e.reason);
        }
    }
    out
}
