//! Age of Context.
//!
//! Every served request leaves a demonstration example behind for its model.
//! An example's weight is a non-increasing utility of its age, scaled by how
//! relevant the task that produced it is to the task being served. The sum of
//! those weights is the effective context count `k_eff` that drives the
//! accuracy curve, and (unscaled by relevance) the eviction key of the
//! least-context policy.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ContextError {
    #[error(
        "example for {model_id} recorded at {now_s}s, before the latest example at {latest_s}s"
    )]
    TimeRegression {
        model_id: String,
        now_s: f64,
        latest_s: f64,
    },
    #[error("invalid AoC config at {path}: {message}")]
    Config { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UtilityKind {
    /// `exp(-decay_rate * age)`
    Exponential,
    /// `max(0, 1 - decay_rate * age)`; reaches zero at `1 / decay_rate` seconds.
    Linear,
    /// 1 up to and including `decay_rate` seconds of age, 0 afterwards.
    Step,
}

/// Symmetric task-to-task relevance. Unlisted pairs are 1 on the diagonal
/// and 0 elsewhere.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Relevance(BTreeMap<String, BTreeMap<String, f64>>);

impl Relevance {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn set(&mut self, a: &str, b: &str, weight: f64) {
        self.0
            .entry(a.to_string())
            .or_default()
            .insert(b.to_string(), weight);
    }

    pub fn get(&self, from: &str, to: &str) -> f64 {
        if from == to {
            return 1.0;
        }
        self.0
            .get(from)
            .and_then(|row| row.get(to))
            .or_else(|| self.0.get(to).and_then(|row| row.get(from)))
            .copied()
            .unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<(), ContextError> {
        for (a, row) in &self.0 {
            for (b, &w) in row {
                let path = format!("relevance.{a}.{b}");
                let err = |message: &str| ContextError::Config {
                    path: path.clone(),
                    message: message.to_string(),
                };
                if !(0.0..=1.0).contains(&w) {
                    return Err(err("weights must lie in [0, 1]"));
                }
                if a == b && w != 1.0 {
                    return Err(err("diagonal entries must be 1"));
                }
                if let Some(&back) = self.0.get(b).and_then(|r| r.get(a)) {
                    if back != w {
                        return Err(err("relevance must be symmetric"));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AoCConfig {
    pub utility_kind: UtilityKind,
    /// Exponential: rate in 1/s. Linear: slope in 1/s. Step: cutoff age in s.
    pub decay_rate: f64,
    #[serde(default)]
    pub relevance: Relevance,
    pub store_capacity: usize,
}

impl AoCConfig {
    pub fn exponential(rate_per_s: f64, store_capacity: usize) -> Self {
        Self {
            utility_kind: UtilityKind::Exponential,
            decay_rate: rate_per_s,
            relevance: Relevance::identity(),
            store_capacity,
        }
    }

    pub fn validate(&self) -> Result<(), ContextError> {
        let ok = match self.utility_kind {
            UtilityKind::Exponential | UtilityKind::Linear => self.decay_rate > 0.0,
            UtilityKind::Step => self.decay_rate >= 0.0,
        };
        if !ok || !self.decay_rate.is_finite() {
            return Err(ContextError::Config {
                path: "decay_rate".into(),
                message: format!(
                    "invalid value {} for {:?} utility",
                    self.decay_rate, self.utility_kind
                ),
            });
        }
        if self.store_capacity == 0 {
            return Err(ContextError::Config {
                path: "store_capacity".into(),
                message: "must be at least 1".into(),
            });
        }
        self.relevance.validate()
    }
}

pub fn age_utility(cfg: &AoCConfig, age_s: f64) -> f64 {
    let age = age_s.max(0.0);
    match cfg.utility_kind {
        UtilityKind::Exponential => (-cfg.decay_rate * age).exp(),
        UtilityKind::Linear => (1.0 - cfg.decay_rate * age).max(0.0),
        UtilityKind::Step => {
            if age <= cfg.decay_rate {
                1.0
            } else {
                0.0
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemonstrationExample {
    pub created_at_s: f64,
    pub task_id: String,
}

/// Per-model demonstration history. Independent of cache residency: a model
/// that is evicted and later reloaded finds its (aged) examples again.
#[derive(Debug, Clone, Default)]
pub struct ContextStore {
    capacity: usize,
    per_model: BTreeMap<String, VecDeque<DemonstrationExample>>,
}

impl ContextStore {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            per_model: BTreeMap::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn examples(&self, model_id: &str) -> impl Iterator<Item = &DemonstrationExample> {
        self.per_model.get(model_id).into_iter().flatten()
    }

    pub fn len(&self, model_id: &str) -> usize {
        self.per_model.get(model_id).map_or(0, VecDeque::len)
    }

    pub fn latest(&self, model_id: &str) -> Option<f64> {
        self.per_model
            .get(model_id)
            .and_then(|q| q.back())
            .map(|e| e.created_at_s)
    }

    pub fn record_example(
        &mut self,
        model_id: &str,
        task_id: &str,
        now_s: f64,
    ) -> Result<(), ContextError> {
        if let Some(latest) = self.latest(model_id) {
            if now_s < latest {
                return Err(ContextError::TimeRegression {
                    model_id: model_id.to_string(),
                    now_s,
                    latest_s: latest,
                });
            }
        }
        let queue = self.per_model.entry(model_id.to_string()).or_default();
        queue.push_back(DemonstrationExample {
            created_at_s: now_s.max(0.0),
            task_id: task_id.to_string(),
        });
        while queue.len() > self.capacity {
            queue.pop_front();
        }
        Ok(())
    }

    /// AoC-weighted count of `model_id`'s examples as seen by `task_id`.
    ///
    /// Examples stamped after `now_s` (still in flight) do not count yet.
    pub fn effective_context(
        &self,
        model_id: &str,
        task_id: &str,
        cfg: &AoCConfig,
        now_s: f64,
    ) -> f64 {
        self.examples(model_id)
            .filter(|e| e.created_at_s <= now_s)
            .map(|e| {
                age_utility(cfg, now_s - e.created_at_s) * cfg.relevance.get(&e.task_id, task_id)
            })
            .fold(0.0, |acc, w| acc + w)
    }

    /// AoC-weighted count of all of `model_id`'s examples, each taken at
    /// full relevance to its own task.
    ///
    /// Folds from `+0.0`: an empty `f64` sum is `-0.0`, which `total_cmp`
    /// would rank below a model whose context has fully decayed.
    pub fn context_mass(&self, model_id: &str, cfg: &AoCConfig, now_s: f64) -> f64 {
        self.examples(model_id)
            .filter(|e| e.created_at_s <= now_s)
            .map(|e| age_utility(cfg, now_s - e.created_at_s))
            .fold(0.0, |acc, w| acc + w)
    }
}

pub fn effective_context(
    store: &ContextStore,
    model_id: &str,
    task_id: &str,
    cfg: &AoCConfig,
    now_s: f64,
) -> f64 {
    store.effective_context(model_id, task_id, cfg, now_s)
}
