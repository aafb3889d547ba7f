//! GPU-memory accounting for the edge server.
//!
//! Models are cached whole (binary caching) and only on demand. Loading is
//! refused unless the caller has already evicted enough to make room.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{memory_footprint, ModelProfile};
use crate::FieldError;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CacheError {
    #[error("model needs {footprint} bytes but the GPU only has {capacity}")]
    ModelTooLarge { footprint: u64, capacity: u64 },
    #[error("model {0} is not cached")]
    NotCached(String),
    #[error("model {0} is already cached")]
    AlreadyCached(String),
    #[error("loading {model_id} needs {short_by} more free bytes")]
    InsufficientMemory { model_id: String, short_by: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeServerConfig {
    pub gpu_memory_bytes: u64,
    pub load_bandwidth_bytes_per_s: f64,
    pub edge_throughput_gflops: f64,
}

impl EdgeServerConfig {
    pub fn validate(&self) -> Result<(), FieldError> {
        if self.gpu_memory_bytes == 0 {
            return Err(FieldError::new("gpu_memory_bytes", "must be positive"));
        }
        if !(self.load_bandwidth_bytes_per_s.is_finite() && self.load_bandwidth_bytes_per_s > 0.0) {
            return Err(FieldError::new(
                "load_bandwidth_bytes_per_s",
                "must be positive",
            ));
        }
        if !(self.edge_throughput_gflops.is_finite() && self.edge_throughput_gflops > 0.0) {
            return Err(FieldError::new(
                "edge_throughput_gflops",
                "must be positive",
            ));
        }
        Ok(())
    }

    /// Seconds to move `profile`'s weights into GPU memory.
    pub fn load_latency(&self, profile: &ModelProfile) -> f64 {
        let bandwidth = profile
            .load_bandwidth_bytes_per_s
            .unwrap_or(self.load_bandwidth_bytes_per_s);
        memory_footprint(profile) as f64 / bandwidth
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedModelEntry {
    pub model_id: String,
    pub footprint_bytes: u64,
    pub loaded_at_s: f64,
    pub last_used_s: f64,
    pub use_count: u64,
    pub fifo_seq: u64,
}

#[derive(Debug, Clone, Default)]
pub struct CacheState {
    entries: BTreeMap<String, CachedModelEntry>,
    used_bytes: u64,
    next_fifo_seq: u64,
}

impl CacheState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_cached(&self, model_id: &str) -> bool {
        self.entries.contains_key(model_id)
    }

    pub fn entry(&self, model_id: &str) -> Option<&CachedModelEntry> {
        self.entries.get(model_id)
    }

    /// Cached entries in model-id order.
    pub fn entries(&self) -> impl Iterator<Item = &CachedModelEntry> {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn used_bytes(&self) -> u64 {
        self.used_bytes
    }

    pub fn next_fifo_seq(&self) -> u64 {
        self.next_fifo_seq
    }

    pub fn bytes_to_free(
        &self,
        cfg: &EdgeServerConfig,
        footprint_bytes: u64,
    ) -> Result<u64, CacheError> {
        if footprint_bytes > cfg.gpu_memory_bytes {
            return Err(CacheError::ModelTooLarge {
                footprint: footprint_bytes,
                capacity: cfg.gpu_memory_bytes,
            });
        }
        Ok((self.used_bytes + footprint_bytes).saturating_sub(cfg.gpu_memory_bytes))
    }

    pub fn evict_model(&mut self, model_id: &str) -> Result<u64, CacheError> {
        let entry = self
            .entries
            .remove(model_id)
            .ok_or_else(|| CacheError::NotCached(model_id.to_string()))?;
        self.used_bytes -= entry.footprint_bytes;
        Ok(entry.footprint_bytes)
    }

    /// Inserts `profile` and returns the load latency in seconds. The entry
    /// becomes usable at `now_s + latency`.
    pub fn load_model(
        &mut self,
        cfg: &EdgeServerConfig,
        profile: &ModelProfile,
        now_s: f64,
    ) -> Result<f64, CacheError> {
        if self.is_cached(&profile.id) {
            return Err(CacheError::AlreadyCached(profile.id.clone()));
        }
        let footprint = memory_footprint(profile);
        let short_by = self.bytes_to_free(cfg, footprint)?;
        if short_by > 0 {
            return Err(CacheError::InsufficientMemory {
                model_id: profile.id.clone(),
                short_by,
            });
        }
        let latency = cfg.load_latency(profile);
        let loaded_at = now_s + latency;
        self.entries.insert(
            profile.id.clone(),
            CachedModelEntry {
                model_id: profile.id.clone(),
                footprint_bytes: footprint,
                loaded_at_s: loaded_at,
                last_used_s: loaded_at,
                use_count: 0,
                fifo_seq: self.next_fifo_seq,
            },
        );
        self.next_fifo_seq += 1;
        self.used_bytes += footprint;
        Ok(latency)
    }

    pub fn touch(&mut self, model_id: &str, now_s: f64) -> Result<(), CacheError> {
        let entry = self
            .entries
            .get_mut(model_id)
            .ok_or_else(|| CacheError::NotCached(model_id.to_string()))?;
        entry.use_count += 1;
        entry.last_used_s = now_s;
        Ok(())
    }

    /// Recomputes the accounting from scratch and compares.
    pub fn check_invariants(&self, cfg: &EdgeServerConfig) -> Result<(), String> {
        let sum: u64 = self.entries.values().map(|e| e.footprint_bytes).sum();
        if sum != self.used_bytes {
            return Err(format!(
                "used_bytes {} != footprint sum {}",
                self.used_bytes, sum
            ));
        }
        if self.used_bytes > cfg.gpu_memory_bytes {
            return Err(format!(
                "used_bytes {} exceeds capacity {}",
                self.used_bytes, cfg.gpu_memory_bytes
            ));
        }
        for e in self.entries.values() {
            if e.use_count > 0 && e.last_used_s < e.loaded_at_s {
                return Err(format!("{} used before it finished loading", e.model_id));
            }
            if e.fifo_seq >= self.next_fifo_seq {
                return Err(format!("{} has a fifo_seq from the future", e.model_id));
            }
        }
        Ok(())
    }
}
