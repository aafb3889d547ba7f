//! Deterministic request traces.
//!
//! Arrivals form a Poisson process (exponential gaps by inverse CDF), the
//! requested model follows a Zipf law over a popularity ranking and the task
//! is drawn from a per-model categorical distribution. All randomness comes
//! from one `Xoshiro256**` stream seeded with [`WorkloadConfig::seed`], drawn
//! in the fixed order gap, model, task for every request.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::Catalog;

pub const TRACE_HEADER: &str = "arrival_time_s,request_id,model_id,task_id";

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("invalid workload at {path}: {message}")]
    Config { path: String, message: String },
    #[error("trace i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("trace format error at line {line}, column {column}: {message}")]
    Format {
        line: u64,
        column: String,
        message: String,
    },
    #[error("invalid trace at line {line}: {message}")]
    Validation { line: u64, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadConfig {
    #[serde(default)]
    pub seed: u64,
    pub duration_s: f64,
    pub arrival_rate_hz: f64,
    pub zipf_exponent: f64,
    /// Popularity ranking; index 0 is rank 1.
    pub model_ids: Vec<String>,
    /// Per-model task mix. Models without an entry draw their tasks uniformly.
    #[serde(default)]
    pub task_weights: BTreeMap<String, BTreeMap<String, f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub arrival_time_s: f64,
    pub request_id: u64,
    pub model_id: String,
    pub task_id: String,
}

fn config_error(path: impl Into<String>, message: impl Into<String>) -> WorkloadError {
    WorkloadError::Config {
        path: path.into(),
        message: message.into(),
    }
}

/// Resolved sampling tables for one workload.
struct Sampler {
    models: WeightedIndex<f64>,
    tasks: Vec<(WeightedIndex<f64>, Vec<String>)>,
}

impl WorkloadConfig {
    pub fn validate(&self, catalog: &Catalog) -> Result<(), WorkloadError> {
        self.sampler(catalog).map(|_| ())
    }

    fn sampler(&self, catalog: &Catalog) -> Result<Sampler, WorkloadError> {
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return Err(config_error("duration_s", "must be positive"));
        }
        if !(self.arrival_rate_hz.is_finite() && self.arrival_rate_hz > 0.0) {
            return Err(config_error("arrival_rate_hz", "must be positive"));
        }
        if !(self.zipf_exponent.is_finite() && self.zipf_exponent >= 0.0) {
            return Err(config_error("zipf_exponent", "must be nonnegative"));
        }
        if self.model_ids.is_empty() {
            return Err(config_error("model_ids", "at least one model is required"));
        }
        for model_id in self.task_weights.keys() {
            if !self.model_ids.contains(model_id) {
                return Err(config_error(
                    format!("task_weights.{model_id}"),
                    "model is not in model_ids",
                ));
            }
        }

        let rank_weights: Vec<f64> = (1..=self.model_ids.len())
            .map(|r| (r as f64).powf(-self.zipf_exponent))
            .collect();
        let models = WeightedIndex::new(&rank_weights)
            .map_err(|e| config_error("zipf_exponent", e.to_string()))?;

        let mut tasks = Vec::with_capacity(self.model_ids.len());
        for (i, model_id) in self.model_ids.iter().enumerate() {
            let profile = catalog.get(model_id).ok_or_else(|| {
                config_error(
                    format!("model_ids[{i}]"),
                    format!("unknown model {model_id:?}"),
                )
            })?;
            let ids: Vec<String> = profile.tasks.iter().map(|t| t.task_id.clone()).collect();
            let weights: Vec<f64> = match self.task_weights.get(model_id) {
                None => vec![1.0; ids.len()],
                Some(w) => {
                    for (task_id, &weight) in w {
                        let path = format!("task_weights.{model_id}.{task_id}");
                        if profile.task(task_id).is_none() {
                            return Err(config_error(
                                path,
                                format!("unknown task for model {model_id:?}"),
                            ));
                        }
                        if !(weight.is_finite() && weight >= 0.0) {
                            return Err(config_error(path, "weights must be nonnegative"));
                        }
                    }
                    ids.iter()
                        .map(|t| w.get(t).copied().unwrap_or(0.0))
                        .collect()
                }
            };
            let index = WeightedIndex::new(&weights).map_err(|_| {
                config_error(
                    format!("task_weights.{model_id}"),
                    "task weights must have a positive sum",
                )
            })?;
            tasks.push((index, ids));
        }
        Ok(Sampler { models, tasks })
    }
}

/// Round to whole microseconds so that a written trace reads back exactly.
fn quantize_time(t: f64) -> f64 {
    (t * 1e6).round() / 1e6
}

pub fn generate_trace(
    cfg: &WorkloadConfig,
    catalog: &Catalog,
) -> Result<Vec<Request>, WorkloadError> {
    let sampler = cfg.sampler(catalog)?;
    let mut rng = Xoshiro256StarStar::seed_from_u64(cfg.seed);
    let mut trace = Vec::new();
    let mut clock = 0.0f64;
    loop {
        let u: f64 = rng.gen();
        clock += -(1.0 - u).ln() / cfg.arrival_rate_hz;
        let arrival = quantize_time(clock);
        if arrival > cfg.duration_s {
            break;
        }
        let m = sampler.models.sample(&mut rng);
        let (task_index, task_ids) = &sampler.tasks[m];
        let t = task_index.sample(&mut rng);
        trace.push(Request {
            arrival_time_s: arrival,
            request_id: trace.len() as u64,
            model_id: cfg.model_ids[m].clone(),
            task_id: task_ids[t].clone(),
        });
    }
    Ok(trace)
}

pub fn write_trace(trace: &[Request], path: impl AsRef<Path>) -> Result<(), WorkloadError> {
    let path = path.as_ref();
    let io_err = |source| WorkloadError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    writeln!(out, "{TRACE_HEADER}").map_err(io_err)?;
    for r in trace {
        writeln!(
            out,
            "{:.6},{},{},{}",
            r.arrival_time_s, r.request_id, r.model_id, r.task_id
        )
        .map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

pub fn read_trace(
    path: impl AsRef<Path>,
    catalog: &Catalog,
) -> Result<Vec<Request>, WorkloadError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| WorkloadError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_trace(file, catalog)
}

pub fn parse_trace(
    input: impl std::io::Read,
    catalog: &Catalog,
) -> Result<Vec<Request>, WorkloadError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(input);
    let columns: Vec<&str> = TRACE_HEADER.split(',').collect();
    let mut trace: Vec<Request> = Vec::new();
    let mut seen_header = false;
    for row in reader.records() {
        let row = row.map_err(|e| WorkloadError::Format {
            line: e.position().map_or(0, |p| p.line()),
            column: String::new(),
            message: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line());
        if !seen_header {
            if row.iter().collect::<Vec<_>>() != columns {
                return Err(WorkloadError::Format {
                    line,
                    column: "header".into(),
                    message: format!("expected header `{TRACE_HEADER}`"),
                });
            }
            seen_header = true;
            continue;
        }
        if row.len() != columns.len() {
            return Err(WorkloadError::Format {
                line,
                column: columns.get(row.len()).unwrap_or(&"").to_string(),
                message: format!("expected {} fields, found {}", columns.len(), row.len()),
            });
        }
        let format_err = |column: &str, message: String| WorkloadError::Format {
            line,
            column: column.to_string(),
            message,
        };
        let arrival: f64 = row[0]
            .parse()
            .map_err(|e| format_err("arrival_time_s", format!("{e}")))?;
        if !(arrival.is_finite() && arrival >= 0.0) {
            return Err(format_err(
                "arrival_time_s",
                "must be a nonnegative number".into(),
            ));
        }
        let request_id: u64 = row[1]
            .parse()
            .map_err(|e| format_err("request_id", format!("{e}")))?;
        let model_id = row[2].to_string();
        let task_id = row[3].to_string();

        let validation = |message: String| WorkloadError::Validation { line, message };
        if let Some(prev) = trace.last() {
            if arrival < prev.arrival_time_s {
                return Err(validation(format!(
                    "arrival time {arrival} precedes previous arrival {}",
                    prev.arrival_time_s
                )));
            }
        }
        if request_id != trace.len() as u64 {
            return Err(validation(format!(
                "request_id {request_id} out of sequence, expected {}",
                trace.len()
            )));
        }
        let profile = catalog
            .get(&model_id)
            .ok_or_else(|| validation(format!("unknown model {model_id:?}")))?;
        if profile.task(&task_id).is_none() {
            return Err(validation(format!(
                "unknown task {task_id:?} for model {model_id:?}"
            )));
        }
        trace.push(Request {
            arrival_time_s: arrival,
            request_id,
            model_id,
            task_id,
        });
    }
    if !seen_header {
        return Err(WorkloadError::Format {
            line: 1,
            column: "header".into(),
            message: "empty file".into(),
        });
    }
    Ok(trace)
}

/// Checks an in-memory trace the same way [`read_trace`] checks a file.
pub fn validate_trace(trace: &[Request], catalog: &Catalog) -> Result<(), WorkloadError> {
    for (i, r) in trace.iter().enumerate() {
        let line = i as u64 + 2;
        let validation = |message: String| WorkloadError::Validation { line, message };
        if i > 0 && r.arrival_time_s < trace[i - 1].arrival_time_s {
            return Err(validation("arrival times must be nondecreasing".into()));
        }
        if r.request_id != i as u64 {
            return Err(validation(format!(
                "request_id {} out of sequence",
                r.request_id
            )));
        }
        match catalog.get(&r.model_id) {
            None => return Err(validation(format!("unknown model {:?}", r.model_id))),
            Some(p) if p.task(&r.task_id).is_none() => {
                return Err(validation(format!("unknown task {:?}", r.task_id)))
            }
            Some(_) => {}
        }
    }
    Ok(())
}
