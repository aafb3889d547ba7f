//! Trace-driven simulation and the five-part system cost.
//!
//! A run replays a trace in order against one [`CachePolicy`]. Each request is
//! either served at the edge (after an optional synchronous model load) or
//! offloaded to the cloud, and its cost is split into switching, accuracy,
//! edge inference latency, edge offloading latency and cloud components.
//! There is no queueing: latencies are analytic per request.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{accuracy_at, calibrate_or_fallback, AccuracyModel, Catalog, ModelProfile};
use crate::context::{AoCConfig, ContextError, ContextStore};
use crate::edgecache::{CacheError, CacheState, EdgeServerConfig};
use crate::policy::{decide, CachePolicy, Decision};
use crate::workload::{validate_trace, Request, WorkloadError};
use crate::FieldError;

pub const LOG_HEADER: &str = "request_id,arrival_time_s,model_id,task_id,decision,load_latency_s,inference_latency_s,k_eff,accuracy,accuracy_cost,cloud";

pub const DEFAULT_CONTEXT_OVERHEAD_GAMMA: f64 = 0.01;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Trace(#[from] WorkloadError),
    #[error("invalid simulation input: {0}")]
    Config(String),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error("cannot write request log {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostWeights {
    /// Per second of model-load latency.
    pub w_switch: f64,
    /// Per unit of accuracy loss (0..1) per request.
    pub w_acc: f64,
    /// Per second of edge inference latency.
    pub w_inf: f64,
    /// Per second of access-network latency.
    pub w_off: f64,
    /// Flat price of one cloud execution.
    pub w_cloud: f64,
    pub access_latency_s: f64,
    pub core_latency_s: f64,
    pub cloud_throughput_gflops: f64,
}

impl CostWeights {
    pub fn zero() -> Self {
        Self {
            w_switch: 0.0,
            w_acc: 0.0,
            w_inf: 0.0,
            w_off: 0.0,
            w_cloud: 0.0,
            access_latency_s: 0.0,
            core_latency_s: 0.0,
            cloud_throughput_gflops: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), FieldError> {
        let fields = [
            ("w_switch", self.w_switch),
            ("w_acc", self.w_acc),
            ("w_inf", self.w_inf),
            ("w_off", self.w_off),
            ("w_cloud", self.w_cloud),
            ("access_latency_s", self.access_latency_s),
            ("core_latency_s", self.core_latency_s),
            ("cloud_throughput_gflops", self.cloud_throughput_gflops),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v >= 0.0) {
                return Err(FieldError::new(
                    name,
                    format!("must be a nonnegative number, got {v}"),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimOptions {
    #[serde(default)]
    pub offload_on_miss: bool,
    #[serde(default = "default_gamma")]
    pub context_overhead_gamma: f64,
    #[serde(default)]
    pub log: bool,
}

fn default_gamma() -> f64 {
    DEFAULT_CONTEXT_OVERHEAD_GAMMA
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            offload_on_miss: false,
            context_overhead_gamma: DEFAULT_CONTEXT_OVERHEAD_GAMMA,
            log: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub switching_cost: f64,
    pub total_accuracy_cost: f64,
    pub edge_inference_latency_cost: f64,
    pub edge_offloading_latency_cost: f64,
    pub cloud_cost: f64,
    pub system_cost: f64,
}

impl CostBreakdown {
    pub fn new(switching: f64, accuracy: f64, inference: f64, offloading: f64, cloud: f64) -> Self {
        Self {
            switching_cost: switching,
            total_accuracy_cost: accuracy,
            edge_inference_latency_cost: inference,
            edge_offloading_latency_cost: offloading,
            cloud_cost: cloud,
            system_cost: switching + accuracy + inference + offloading + cloud,
        }
    }

    pub fn component_sum(&self) -> f64 {
        self.switching_cost
            + self.total_accuracy_cost
            + self.edge_inference_latency_cost
            + self.edge_offloading_latency_cost
            + self.cloud_cost
    }

    fn add(&mut self, other: &CostBreakdown) {
        *self = CostBreakdown::new(
            self.switching_cost + other.switching_cost,
            self.total_accuracy_cost + other.total_accuracy_cost,
            self.edge_inference_latency_cost + other.edge_inference_latency_cost,
            self.edge_offloading_latency_cost + other.edge_offloading_latency_cost,
            self.cloud_cost + other.cloud_cost,
        );
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    #[serde(flatten)]
    pub costs: CostBreakdown,
    pub request_count: u64,
    pub edge_executions: u64,
    pub cloud_executions: u64,
    pub model_loads: u64,
    pub average_accuracy_cost: f64,
    pub edge_execution_ratio: f64,
}

/// Field-wise mean of several runs; counts become fractional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    #[serde(flatten)]
    pub costs: CostBreakdown,
    pub request_count: f64,
    pub edge_executions: f64,
    pub cloud_executions: f64,
    pub model_loads: f64,
    pub average_accuracy_cost: f64,
    pub edge_execution_ratio: f64,
}

impl MeanMetrics {
    pub fn of(runs: &[RunMetrics]) -> Self {
        let n = runs.len().max(1) as f64;
        let mean = |f: &dyn Fn(&RunMetrics) -> f64| runs.iter().map(f).sum::<f64>() / n;
        Self {
            costs: CostBreakdown::new(
                mean(&|r| r.costs.switching_cost),
                mean(&|r| r.costs.total_accuracy_cost),
                mean(&|r| r.costs.edge_inference_latency_cost),
                mean(&|r| r.costs.edge_offloading_latency_cost),
                mean(&|r| r.costs.cloud_cost),
            ),
            request_count: mean(&|r| r.request_count as f64),
            edge_executions: mean(&|r| r.edge_executions as f64),
            cloud_executions: mean(&|r| r.cloud_executions as f64),
            model_loads: mean(&|r| r.model_loads as f64),
            average_accuracy_cost: mean(&|r| r.average_accuracy_cost),
            edge_execution_ratio: mean(&|r| r.edge_execution_ratio),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    EdgeHit,
    EdgeLoad,
    Cloud,
}

impl Outcome {
    pub fn as_str(&self) -> &'static str {
        match self {
            Outcome::EdgeHit => "edge_hit",
            Outcome::EdgeLoad => "edge_load",
            Outcome::Cloud => "cloud",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub request_id: u64,
    pub arrival_time_s: f64,
    pub model_id: String,
    pub task_id: String,
    pub decision: Outcome,
    pub load_latency_s: f64,
    /// Edge inference time, or cloud compute time for offloaded requests.
    pub inference_latency_s: f64,
    pub k_eff: f64,
    pub accuracy: f64,
    pub accuracy_cost: f64,
    pub costs: CostBreakdown,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeCost {
    pub inference_latency_s: f64,
    pub offload_latency_s: f64,
    pub accuracy: f64,
    /// Unweighted loss in [0, 1].
    pub accuracy_cost: f64,
    pub weighted_accuracy_cost: f64,
    pub inference_cost: f64,
    pub offloading_cost: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CloudCost {
    pub cloud_cost: f64,
    pub offloading_cost: f64,
    pub compute_time_s: f64,
}

/// Cost of one edge execution with `k_eff` effective examples in context.
pub fn request_cost_edge(
    profile: &ModelProfile,
    task_id: &str,
    accuracy_model: &AccuracyModel,
    k_eff: f64,
    server: &EdgeServerConfig,
    weights: &CostWeights,
    gamma: f64,
) -> EdgeCost {
    let inference_latency_s =
        profile.gflops_for(task_id) * (1.0 + gamma * k_eff) / server.edge_throughput_gflops;
    let offload_latency_s = weights.access_latency_s;
    let accuracy = accuracy_at(accuracy_model, k_eff);
    let accuracy_cost = (100.0 - accuracy) / 100.0;
    EdgeCost {
        inference_latency_s,
        offload_latency_s,
        accuracy,
        accuracy_cost,
        weighted_accuracy_cost: weights.w_acc * accuracy_cost,
        inference_cost: weights.w_inf * inference_latency_s,
        offloading_cost: weights.w_off * offload_latency_s,
    }
}

/// Cost of one cloud execution. The cloud serves at reference accuracy, so
/// there is no accuracy cost; compute time is priced inside `w_cloud`.
pub fn request_cost_cloud(
    profile: &ModelProfile,
    task_id: &str,
    weights: &CostWeights,
) -> CloudCost {
    let compute_time_s = if weights.cloud_throughput_gflops > 0.0 {
        profile.gflops_for(task_id) / weights.cloud_throughput_gflops
    } else {
        0.0
    };
    CloudCost {
        cloud_cost: weights.w_cloud + weights.w_off * weights.core_latency_s,
        offloading_cost: weights.w_off * weights.access_latency_s,
        compute_time_s,
    }
}

pub fn aggregate_metrics(records: &[RequestRecord]) -> RunMetrics {
    let mut costs = CostBreakdown::default();
    let (mut edge, mut cloud, mut loads) = (0u64, 0u64, 0u64);
    for r in records {
        costs.add(&r.costs);
        match r.decision {
            Outcome::EdgeHit => edge += 1,
            Outcome::EdgeLoad => {
                edge += 1;
                loads += 1;
            }
            Outcome::Cloud => cloud += 1,
        }
    }
    let n = records.len() as u64;
    let (average_accuracy_cost, edge_execution_ratio) = if n == 0 {
        (0.0, 0.0)
    } else {
        (costs.total_accuracy_cost / n as f64, edge as f64 / n as f64)
    };
    RunMetrics {
        costs,
        request_count: n,
        edge_executions: edge,
        cloud_executions: cloud,
        model_loads: loads,
        average_accuracy_cost,
        edge_execution_ratio,
    }
}

/// Everything a run needs besides the trace and the policy.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub catalog: Catalog,
    pub server: EdgeServerConfig,
    pub aoc: AoCConfig,
    pub weights: CostWeights,
    pub options: SimOptions,
}

impl Scenario {
    /// Checks every section; the error field is prefixed with its section name.
    pub fn check(&self) -> Result<(), FieldError> {
        let within = |section: &str, e: FieldError| {
            FieldError::new(format!("{section}.{}", e.field), e.message)
        };
        self.server.validate().map_err(|e| within("server", e))?;
        self.weights.validate().map_err(|e| within("weights", e))?;
        self.aoc.validate().map_err(|e| match e {
            ContextError::Config { path, message } => {
                FieldError::new(format!("aoc.{path}"), message)
            }
            other => FieldError::new("aoc", other.to_string()),
        })?;
        let g = self.options.context_overhead_gamma;
        if !(g.is_finite() && g >= 0.0) {
            return Err(FieldError::new(
                "options.context_overhead_gamma",
                format!("must be nonnegative, got {g}"),
            ));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.check().map_err(|e| SimError::Config(e.to_string()))
    }
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub metrics: RunMetrics,
    /// Present when `SimOptions::log` is set.
    pub log: Option<Vec<RequestRecord>>,
}

/// Mutable state of one run, observable between requests.
pub struct Simulator<'a> {
    scenario: &'a Scenario,
    policy: &'a mut dyn CachePolicy,
    cache: CacheState,
    store: ContextStore,
    accuracy: HashMap<(String, String), AccuracyModel>,
}

impl<'a> Simulator<'a> {
    pub fn new(scenario: &'a Scenario, policy: &'a mut dyn CachePolicy) -> Result<Self, SimError> {
        scenario.validate()?;
        let accuracy = scenario
            .catalog
            .models()
            .iter()
            .flat_map(|m| {
                m.tasks.iter().map(move |t| {
                    (
                        (m.id.clone(), t.task_id.clone()),
                        calibrate_or_fallback(m, t),
                    )
                })
            })
            .collect();
        Ok(Self {
            scenario,
            policy,
            cache: CacheState::new(),
            store: ContextStore::new(scenario.aoc.store_capacity),
            accuracy,
        })
    }

    pub fn cache(&self) -> &CacheState {
        &self.cache
    }

    pub fn store(&self) -> &ContextStore {
        &self.store
    }

    /// Serves one request and returns its record. Requests must be fed in
    /// trace order.
    pub fn step(&mut self, request: &Request) -> Result<RequestRecord, SimError> {
        let sc = self.scenario;
        let profile = sc.catalog.get(&request.model_id).ok_or_else(|| {
            SimError::Config(format!(
                "request {} names unknown model {}",
                request.request_id, request.model_id
            ))
        })?;
        let now = request.arrival_time_s;
        let decision = decide(
            self.policy,
            &self.cache,
            &sc.server,
            &self.store,
            &sc.aoc,
            profile,
            now,
            sc.options.offload_on_miss,
        );

        let (record, completed_at) = match decision {
            Decision::OffloadToCloud => {
                let c = request_cost_cloud(profile, &request.task_id, &sc.weights);
                let k_eff =
                    self.store
                        .effective_context(&profile.id, &request.task_id, &sc.aoc, now);
                let done = now
                    + sc.weights.access_latency_s
                    + sc.weights.core_latency_s
                    + c.compute_time_s;
                let record = RequestRecord {
                    request_id: request.request_id,
                    arrival_time_s: now,
                    model_id: request.model_id.clone(),
                    task_id: request.task_id.clone(),
                    decision: Outcome::Cloud,
                    load_latency_s: 0.0,
                    inference_latency_s: c.compute_time_s,
                    k_eff,
                    accuracy: 100.0,
                    accuracy_cost: 0.0,
                    costs: CostBreakdown::new(0.0, 0.0, 0.0, c.offloading_cost, c.cloud_cost),
                };
                (record, done)
            }
            Decision::ServeAtEdge {
                evictions,
                load_required,
            } => {
                for victim in &evictions {
                    self.cache.evict_model(victim)?;
                }
                let load_latency = if load_required {
                    self.cache.load_model(&sc.server, profile, now)?
                } else {
                    0.0
                };
                let ready_at = self.cache.entry(&profile.id).map_or(now, |e| e.loaded_at_s);
                let start = (now + load_latency).max(ready_at);
                let k_eff =
                    self.store
                        .effective_context(&profile.id, &request.task_id, &sc.aoc, start);
                let acc_model = self.accuracy[&(profile.id.clone(), request.task_id.clone())];
                let e = request_cost_edge(
                    profile,
                    &request.task_id,
                    &acc_model,
                    k_eff,
                    &sc.server,
                    &sc.weights,
                    sc.options.context_overhead_gamma,
                );
                self.cache.touch(&profile.id, start)?;
                let record = RequestRecord {
                    request_id: request.request_id,
                    arrival_time_s: now,
                    model_id: request.model_id.clone(),
                    task_id: request.task_id.clone(),
                    decision: if load_required {
                        Outcome::EdgeLoad
                    } else {
                        Outcome::EdgeHit
                    },
                    load_latency_s: load_latency,
                    inference_latency_s: e.inference_latency_s,
                    k_eff,
                    accuracy: e.accuracy,
                    accuracy_cost: e.accuracy_cost,
                    costs: CostBreakdown::new(
                        sc.weights.w_switch * load_latency,
                        e.weighted_accuracy_cost,
                        e.inference_cost,
                        e.offloading_cost,
                        0.0,
                    ),
                };
                (record, start + e.inference_latency_s)
            }
        };

        // completions can finish out of arrival order; the example joins the
        // history no earlier than the model's latest one
        let stamp = self
            .store
            .latest(&profile.id)
            .map_or(completed_at, |t| t.max(completed_at));
        self.store
            .record_example(&profile.id, &request.task_id, stamp)?;

        debug_assert!(
            self.cache.check_invariants(&sc.server).is_ok(),
            "{:?}",
            self.cache.check_invariants(&sc.server)
        );
        Ok(record)
    }
}

pub fn run_simulation(
    scenario: &Scenario,
    trace: &[Request],
    policy: &mut dyn CachePolicy,
) -> Result<SimOutput, SimError> {
    validate_trace(trace, &scenario.catalog)?;
    let mut sim = Simulator::new(scenario, policy)?;
    let mut records = Vec::with_capacity(trace.len());
    for request in trace {
        records.push(sim.step(request)?);
    }
    let metrics = aggregate_metrics(&records);
    Ok(SimOutput {
        metrics,
        log: scenario.options.log.then_some(records),
    })
}

pub fn write_request_log(
    records: &[RequestRecord],
    path: impl AsRef<Path>,
) -> Result<(), SimError> {
    let path = path.as_ref();
    let io_err = |source| SimError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    write_request_log_to(records, &mut out).map_err(io_err)?;
    out.flush().map_err(io_err)
}

pub fn write_request_log_to(
    records: &[RequestRecord],
    out: &mut impl Write,
) -> std::io::Result<()> {
    writeln!(out, "{LOG_HEADER}")?;
    for r in records {
        writeln!(
            out,
            "{},{:.6},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            r.request_id,
            r.arrival_time_s,
            r.model_id,
            r.task_id,
            r.decision.as_str(),
            r.load_latency_s,
            r.inference_latency_s,
            r.k_eff,
            r.accuracy,
            r.accuracy_cost,
            u8::from(r.decision == Outcome::Cloud)
        )?;
    }
    Ok(())
}
