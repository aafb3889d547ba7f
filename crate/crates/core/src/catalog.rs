//! Static model/task catalog and the context-dependent accuracy curve.
//!
//! Each [`ModelProfile`] describes one pretrained foundation model: its
//! parameter count (which fixes its GPU footprint), its per-inference compute,
//! its in-context window, and the downstream tasks it serves with their
//! zero-, one- and few-shot scores. [`calibrate_accuracy`] turns those scores
//! into an [`AccuracyModel`] of the form
//! `a0 + gain * log2(1 + k^alpha)`, clamped to the context window and to 100.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Bytes per parameter used when a profile does not say otherwise (fp16).
pub const DEFAULT_BYTES_PER_PARAM: f64 = 2.0;

const ALPHA_LOWER: f64 = 1e-6;
const ALPHA_UPPER: f64 = 10.0;
const ALPHA_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("cannot read catalog {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("catalog schema error at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("catalog invariant violated at {path}: {message}")]
    Invariant { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("cannot calibrate task {task_id}: {reason}")]
pub struct CalibrationError {
    pub task_id: String,
    pub reason: String,
}

fn default_bytes_per_param() -> f64 {
    DEFAULT_BYTES_PER_PARAM
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskProfile {
    pub task_id: String,
    pub zero_shot_score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub one_shot_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub few_shot_score: Option<f64>,
    /// Example count at which `few_shot_score` was measured.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub few_shot_k: Option<u32>,
    /// Task-specific backbone size where a model family publishes one per task.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params_millions: Option<f64>,
    /// Task-specific compute per inference; falls back to the model's value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gflops_per_inference: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelProfile {
    pub id: String,
    pub params_millions: f64,
    pub gflops_per_inference: f64,
    #[serde(default = "default_bytes_per_param")]
    pub bytes_per_param: f64,
    /// Largest number of demonstration examples usable in one inference.
    /// Zero means the model has no in-context learning.
    pub context_window: u32,
    /// Overrides the server's default model-loading bandwidth (bytes/s).
    #[serde(
        default,
        alias = "load_bandwidth_class",
        skip_serializing_if = "Option::is_none"
    )]
    pub load_bandwidth_bytes_per_s: Option<f64>,
    pub tasks: Vec<TaskProfile>,
}

impl ModelProfile {
    pub fn task(&self, task_id: &str) -> Option<&TaskProfile> {
        self.tasks.iter().find(|t| t.task_id == task_id)
    }

    /// Compute per inference for `task_id`, using the task override if any.
    pub fn gflops_for(&self, task_id: &str) -> f64 {
        self.task(task_id)
            .and_then(|t| t.gflops_per_inference)
            .unwrap_or(self.gflops_per_inference)
    }

    /// Context bound that applies to one task: the model window, further
    /// limited by the example count the task's few-shot score was measured at.
    pub fn context_limit_for(&self, task: &TaskProfile) -> u32 {
        match task.few_shot_k {
            Some(k) => k.min(self.context_window),
            None => self.context_window,
        }
    }

    pub fn is_in_context_learner(&self) -> bool {
        self.context_window > 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CatalogDocument {
    models: Vec<ModelProfile>,
}

/// Validated, immutable set of model profiles with lookup by id.
#[derive(Debug, Clone, PartialEq)]
pub struct Catalog {
    models: Vec<ModelProfile>,
    index: BTreeMap<String, usize>,
}

impl Catalog {
    pub fn new(models: Vec<ModelProfile>) -> Result<Self, CatalogError> {
        validate_models(&models)?;
        let index = models
            .iter()
            .enumerate()
            .map(|(i, m)| (m.id.clone(), i))
            .collect();
        Ok(Self { models, index })
    }

    pub fn builtin() -> Self {
        Self::new(builtin_catalog()).expect("builtin catalog is valid")
    }

    pub fn get(&self, id: &str) -> Option<&ModelProfile> {
        self.index.get(id).map(|&i| &self.models[i])
    }

    pub fn models(&self) -> &[ModelProfile] {
        &self.models
    }

    pub fn into_models(self) -> Vec<ModelProfile> {
        self.models
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }
}

/// Zero/one/few-shot accuracy surface for one (model, task) pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyModel {
    pub a0: f64,
    pub a1_gain: f64,
    pub alpha: f64,
    pub k_max: f64,
}

impl AccuracyModel {
    pub fn constant(a0: f64) -> Self {
        Self {
            a0,
            a1_gain: 0.0,
            alpha: 1.0,
            k_max: 0.0,
        }
    }

    pub fn accuracy_at(&self, k_eff: f64) -> f64 {
        accuracy_at(self, k_eff)
    }
}

fn lfm(id: &str, params: f64, gflops: f64, tasks: &[(&str, f64, f64, f64, u32)]) -> ModelProfile {
    ModelProfile {
        id: id.to_string(),
        params_millions: params,
        gflops_per_inference: gflops,
        bytes_per_param: DEFAULT_BYTES_PER_PARAM,
        context_window: tasks.iter().map(|t| t.4).max().unwrap_or(0),
        load_bandwidth_bytes_per_s: None,
        tasks: tasks
            .iter()
            .map(|&(task_id, zero, one, few, k)| TaskProfile {
                task_id: task_id.to_string(),
                zero_shot_score: zero,
                one_shot_score: Some(one),
                few_shot_score: Some(few),
                few_shot_k: Some(k),
                params_millions: None,
                gflops_per_inference: None,
            })
            .collect(),
    }
}

/// Vision models publish a backbone size and compute per task; the resident
/// footprint is the largest of them.
fn vfm(id: &str, tasks: &[(&str, f64, f64, f64)]) -> ModelProfile {
    let params = tasks.iter().map(|t| t.1).fold(0.0, f64::max);
    let gflops = tasks.iter().map(|t| t.2).fold(0.0, f64::max);
    ModelProfile {
        id: id.to_string(),
        params_millions: params,
        gflops_per_inference: gflops,
        bytes_per_param: DEFAULT_BYTES_PER_PARAM,
        context_window: 0,
        load_bandwidth_bytes_per_s: None,
        tasks: tasks
            .iter()
            .map(|&(task_id, p, g, zero)| TaskProfile {
                task_id: task_id.to_string(),
                zero_shot_score: zero,
                one_shot_score: None,
                few_shot_score: None,
                few_shot_k: None,
                params_millions: Some(p),
                gflops_per_inference: Some(g),
            })
            .collect(),
    }
}

fn mfm(id: &str, params: f64, gflops: f64, tasks: &[(&str, f64)]) -> ModelProfile {
    ModelProfile {
        id: id.to_string(),
        params_millions: params,
        gflops_per_inference: gflops,
        bytes_per_param: DEFAULT_BYTES_PER_PARAM,
        context_window: 0,
        load_bandwidth_bytes_per_s: None,
        tasks: tasks
            .iter()
            .map(|&(task_id, zero)| TaskProfile {
                task_id: task_id.to_string(),
                zero_shot_score: zero,
                one_shot_score: None,
                few_shot_score: None,
                few_shot_k: None,
                params_millions: None,
                gflops_per_inference: None,
            })
            .collect(),
    }
}

/// The six reference models: two GPT-3 sizes, two UniFormer sizes and two
/// CLIP ViT sizes, with their published sizes, compute and task scores.
pub fn builtin_catalog() -> Vec<ModelProfile> {
    vec![
        lfm(
            "gpt3-13b",
            12850.0,
            26.54,
            &[
                ("translation", 15.45, 26.12, 30.83, 64),
                ("basic-arithmetic", 3.79, 15.98, 14.34, 50),
                ("superglue", 54.4, 64.3, 66.9, 32),
            ],
        ),
        lfm(
            "gpt3-175b",
            174600.0,
            354.03,
            &[
                ("translation", 22.03, 29.63, 33.77, 64),
                ("basic-arithmetic", 25.99, 40.71, 49.55, 50),
                ("superglue", 58.2, 68.9, 73.2, 32),
            ],
        ),
        vfm(
            "uniformer-s",
            &[
                ("image-classification", 22.0, 3.6, 82.9),
                ("video-classification", 22.0, 167.0, 82.8),
                ("object-detection", 41.0, 269.0, 45.6),
                ("semantic-segmentation", 25.0, 247.0, 46.6),
                ("pose-estimation", 25.0, 4.7, 74.0),
            ],
        ),
        vfm(
            "uniformer-b",
            &[
                ("image-classification", 50.0, 8.3, 83.9),
                ("video-classification", 22.0, 389.0, 84.0),
                ("object-detection", 69.0, 399.0, 47.4),
                ("semantic-segmentation", 54.0, 471.0, 48.0),
                ("pose-estimation", 54.0, 9.2, 75.0),
            ],
        ),
        mfm(
            "clip-vit-l14",
            428.0,
            175.5,
            &[
                ("classification", 75.20),
                ("image-retrieval", 71.08),
                ("text-retrieval", 84.00),
            ],
        ),
        mfm(
            "clip-vit-h14",
            986.0,
            381.9,
            &[
                ("classification", 77.97),
                ("image-retrieval", 73.43),
                ("text-retrieval", 86.04),
            ],
        ),
    ]
}

/// GPU bytes needed to hold the model's weights.
pub fn memory_footprint(profile: &ModelProfile) -> u64 {
    let bytes = profile.params_millions * 1e6 * profile.bytes_per_param;
    let nearest = bytes.round();
    // products like 22e6 * 2 are exact, but 8.3-style inputs can land a hair
    // above an integer; only a genuine fraction rounds up.
    if (bytes - nearest).abs() <= 1e-9 * nearest.max(1.0) {
        nearest as u64
    } else {
        bytes.ceil() as u64
    }
}

pub fn load_catalog(path: impl AsRef<Path>) -> Result<Vec<ModelProfile>, CatalogError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| CatalogError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_catalog(&text)
}

pub fn parse_catalog(text: &str) -> Result<Vec<ModelProfile>, CatalogError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let doc: CatalogDocument =
        serde_path_to_error::deserialize(de).map_err(|e| CatalogError::Schema {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
    validate_models(&doc.models)?;
    Ok(doc.models)
}

pub fn catalog_to_json(models: &[ModelProfile]) -> String {
    let doc = CatalogDocument {
        models: models.to_vec(),
    };
    serde_json::to_string_pretty(&doc).expect("catalog serializes")
}

pub fn write_catalog(path: impl AsRef<Path>, models: &[ModelProfile]) -> Result<(), CatalogError> {
    let path = path.as_ref();
    fs::write(path, catalog_to_json(models)).map_err(|source| CatalogError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub(crate) fn is_valid_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-' || b == b'_')
}

fn invariant(path: String, message: impl Into<String>) -> CatalogError {
    CatalogError::Invariant {
        path,
        message: message.into(),
    }
}

fn check_positive(path: String, value: f64) -> Result<(), CatalogError> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(invariant(
            path,
            format!("must be a positive number, got {value}"),
        ))
    }
}

fn check_score(path: String, value: f64) -> Result<(), CatalogError> {
    if (0.0..=100.0).contains(&value) {
        Ok(())
    } else {
        Err(invariant(
            path,
            format!("score must lie in [0, 100], got {value}"),
        ))
    }
}

fn validate_models(models: &[ModelProfile]) -> Result<(), CatalogError> {
    let mut seen = HashSet::new();
    for (i, m) in models.iter().enumerate() {
        let at = |field: &str| format!("models[{i}].{field}");
        if !seen.insert(m.id.as_str()) {
            return Err(CatalogError::Schema {
                path: at("id"),
                message: format!("duplicate model id {:?}", m.id),
            });
        }
        if !is_valid_id(&m.id) {
            return Err(invariant(
                at("id"),
                format!("id {:?} must match [a-z0-9-_]+", m.id),
            ));
        }
        check_positive(at("params_millions"), m.params_millions)?;
        check_positive(at("gflops_per_inference"), m.gflops_per_inference)?;
        check_positive(at("bytes_per_param"), m.bytes_per_param)?;
        if let Some(bw) = m.load_bandwidth_bytes_per_s {
            check_positive(at("load_bandwidth_bytes_per_s"), bw)?;
        }
        if m.tasks.is_empty() {
            return Err(invariant(at("tasks"), "a model needs at least one task"));
        }
        let mut task_ids = HashSet::new();
        for (j, t) in m.tasks.iter().enumerate() {
            let at_task = |field: &str| format!("models[{i}].tasks[{j}].{field}");
            if !task_ids.insert(t.task_id.as_str()) {
                return Err(invariant(
                    at_task("task_id"),
                    format!("duplicate task id {:?}", t.task_id),
                ));
            }
            if !is_valid_id(&t.task_id) {
                return Err(invariant(
                    at_task("task_id"),
                    format!("task id {:?} must match [a-z0-9-_]+", t.task_id),
                ));
            }
            check_score(at_task("zero_shot_score"), t.zero_shot_score)?;
            if let Some(s) = t.one_shot_score {
                check_score(at_task("one_shot_score"), s)?;
            }
            if let Some(s) = t.few_shot_score {
                check_score(at_task("few_shot_score"), s)?;
                if t.one_shot_score.is_none() {
                    return Err(invariant(
                        at_task("one_shot_score"),
                        "required when few_shot_score is present",
                    ));
                }
                match t.few_shot_k {
                    None => {
                        return Err(invariant(
                            at_task("few_shot_k"),
                            "required when few_shot_score is present",
                        ))
                    }
                    Some(k) if k < 2 => {
                        return Err(invariant(at_task("few_shot_k"), "must be at least 2"))
                    }
                    Some(_) => {}
                }
            }
            if m.context_window == 0 && (t.one_shot_score.is_some() || t.few_shot_score.is_some()) {
                return Err(invariant(
                    at_task("one_shot_score"),
                    "models with context_window 0 cannot carry one- or few-shot scores",
                ));
            }
            if let Some(p) = t.params_millions {
                check_positive(at_task("params_millions"), p)?;
            }
            if let Some(g) = t.gflops_per_inference {
                check_positive(at_task("gflops_per_inference"), g)?;
            }
        }
    }
    Ok(())
}

/// Fits the accuracy curve through the task's published scores.
///
/// The one-shot score fixes the gain (since `log2(1 + 1^alpha) = 1` for any
/// alpha); the few-shot score then fixes alpha by bisection.
pub fn calibrate_accuracy(
    task: &TaskProfile,
    k_max: u32,
) -> Result<AccuracyModel, CalibrationError> {
    let fail = |reason: String| CalibrationError {
        task_id: task.task_id.clone(),
        reason,
    };
    let a0 = task.zero_shot_score;
    let k_max = f64::from(k_max);
    let Some(one) = task.one_shot_score else {
        return Ok(AccuracyModel {
            a0,
            a1_gain: 0.0,
            alpha: 1.0,
            k_max,
        });
    };
    let gain = (one - a0).max(0.0);
    let Some(few) = task.few_shot_score else {
        return Ok(AccuracyModel {
            a0,
            a1_gain: gain,
            alpha: 1.0,
            k_max,
        });
    };
    let k_ref = f64::from(
        task.few_shot_k
            .ok_or_else(|| fail("few_shot_k missing".to_string()))?,
    );
    let residual = |alpha: f64| a0 + gain * (1.0 + k_ref.powf(alpha)).log2() - few;

    let lo_res = residual(ALPHA_LOWER);
    let hi_res = residual(ALPHA_UPPER);
    if gain == 0.0 {
        if lo_res.abs() <= ALPHA_TOLERANCE {
            return Ok(AccuracyModel {
                a0,
                a1_gain: 0.0,
                alpha: 1.0,
                k_max,
            });
        }
        return Err(fail(format!(
            "few-shot score {few} differs from zero-shot {a0} but the one-shot gain is zero"
        )));
    }
    if lo_res > 0.0 || hi_res < 0.0 {
        return Err(fail(format!(
            "few-shot score {few} is outside the reachable range [{:.6}, {:.6}] (one-shot {one})",
            lo_res + few,
            hi_res + few
        )));
    }
    let (mut lo, mut hi) = (ALPHA_LOWER, ALPHA_UPPER);
    while hi - lo > ALPHA_TOLERANCE {
        let mid = 0.5 * (lo + hi);
        if residual(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(AccuracyModel {
        a0,
        a1_gain: gain,
        alpha: 0.5 * (lo + hi),
        k_max,
    })
}

/// Calibrates a task, dropping an unusable few-shot point instead of failing.
///
/// Used by the simulator, which needs an accuracy surface for every task the
/// trace can request.
pub fn calibrate_or_fallback(profile: &ModelProfile, task: &TaskProfile) -> AccuracyModel {
    let k_max = profile.context_limit_for(task);
    calibrate_accuracy(task, k_max).unwrap_or_else(|_| {
        let reduced = TaskProfile {
            few_shot_score: None,
            few_shot_k: None,
            ..task.clone()
        };
        calibrate_accuracy(&reduced, k_max).expect("zero/one-shot calibration cannot fail")
    })
}

pub fn accuracy_at(model: &AccuracyModel, k_eff: f64) -> f64 {
    let k = k_eff.max(0.0).min(model.k_max);
    let acc = model.a0 + model.a1_gain * (1.0 + k.powf(model.alpha)).log2();
    acc.min(100.0)
}
