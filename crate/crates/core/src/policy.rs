//! Cache-decision strategies.
//!
//! Every strategy implements [`CachePolicy`] and is constructed by name
//! through a [`PolicyRegistry`]. The shared [`decide`] routine handles the
//! hit / miss / infeasible cases; strategies only differ in which cached
//! model they give up when memory is needed ([`CachePolicy::pick_victim`]),
//! and in whether they use the edge at all.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{memory_footprint, ModelProfile};
use crate::context::{AoCConfig, ContextStore};
use crate::edgecache::{CacheState, CachedModelEntry, EdgeServerConfig};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error("unknown policy {0:?}")]
    Unknown(String),
    #[error("cached models hold {available} bytes, cannot free {needed}")]
    Infeasible { needed: u64, available: u64 },
}

/// The built-in strategies, in the column order of the comparison table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Random,
    #[serde(rename = "cloud", alias = "cloud_only")]
    CloudOnly,
    Fifo,
    Lfu,
    Lc,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] = [
        PolicyKind::Random,
        PolicyKind::CloudOnly,
        PolicyKind::Fifo,
        PolicyKind::Lfu,
        PolicyKind::Lc,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PolicyKind::Random => "random",
            PolicyKind::CloudOnly => "cloud",
            PolicyKind::Fifo => "fifo",
            PolicyKind::Lfu => "lfu",
            PolicyKind::Lc => "lc",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyKind {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random" => Ok(PolicyKind::Random),
            "cloud" | "cloud_only" | "cloud-only" => Ok(PolicyKind::CloudOnly),
            "fifo" => Ok(PolicyKind::Fifo),
            "lfu" => Ok(PolicyKind::Lfu),
            "lc" => Ok(PolicyKind::Lc),
            other => Err(PolicyError::Unknown(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decision {
    ServeAtEdge {
        evictions: Vec<String>,
        load_required: bool,
    },
    OffloadToCloud,
}

/// Read-only view a strategy may consult when ranking victims.
#[derive(Clone, Copy)]
pub struct VictimContext<'a> {
    pub store: &'a ContextStore,
    pub aoc: &'a AoCConfig,
    pub now_s: f64,
}

pub trait CachePolicy: Send {
    fn name(&self) -> &str;

    /// `false` sends every request to the cloud.
    fn uses_edge(&self) -> bool {
        true
    }

    /// Index into `candidates` (nonempty, model-id order) of the next model
    /// to evict.
    fn pick_victim(&mut self, candidates: &[&CachedModelEntry], ctx: &VictimContext<'_>) -> usize;
}

fn argmin_by<F>(candidates: &[&CachedModelEntry], mut cmp: F) -> usize
where
    F: FnMut(&CachedModelEntry, &CachedModelEntry) -> Ordering,
{
    let mut best = 0;
    for i in 1..candidates.len() {
        if cmp(candidates[i], candidates[best]) == Ordering::Less {
            best = i;
        }
    }
    best
}

fn lru_then_id(a: &CachedModelEntry, b: &CachedModelEntry) -> Ordering {
    a.last_used_s
        .total_cmp(&b.last_used_s)
        .then_with(|| a.model_id.cmp(&b.model_id))
}

pub struct CloudOnlyPolicy;

impl CachePolicy for CloudOnlyPolicy {
    fn name(&self) -> &str {
        "cloud"
    }

    fn uses_edge(&self) -> bool {
        false
    }

    fn pick_victim(&mut self, _: &[&CachedModelEntry], _: &VictimContext<'_>) -> usize {
        0
    }
}

/// Evicts the model loaded longest ago.
pub struct FifoPolicy;

impl CachePolicy for FifoPolicy {
    fn name(&self) -> &str {
        "fifo"
    }

    fn pick_victim(&mut self, candidates: &[&CachedModelEntry], _: &VictimContext<'_>) -> usize {
        argmin_by(candidates, |a, b| a.fifo_seq.cmp(&b.fifo_seq))
    }
}

/// Evicts the model with the fewest edge executions since it was loaded.
pub struct LfuPolicy;

impl CachePolicy for LfuPolicy {
    fn name(&self) -> &str {
        "lfu"
    }

    fn pick_victim(&mut self, candidates: &[&CachedModelEntry], _: &VictimContext<'_>) -> usize {
        argmin_by(candidates, |a, b| {
            a.use_count
                .cmp(&b.use_count)
                .then_with(|| lru_then_id(a, b))
        })
    }
}

/// Least Context: evicts the model whose stored demonstrations carry the
/// smallest age-weighted count.
pub struct LeastContextPolicy;

impl CachePolicy for LeastContextPolicy {
    fn name(&self) -> &str {
        "lc"
    }

    fn pick_victim(&mut self, candidates: &[&CachedModelEntry], ctx: &VictimContext<'_>) -> usize {
        let mass: Vec<f64> = candidates
            .iter()
            .map(|e| ctx.store.context_mass(&e.model_id, ctx.aoc, ctx.now_s))
            .collect();
        let mut best = 0;
        for i in 1..candidates.len() {
            let ord = mass[i]
                .total_cmp(&mass[best])
                .then_with(|| lru_then_id(candidates[i], candidates[best]));
            if ord == Ordering::Less {
                best = i;
            }
        }
        best
    }
}

/// Evicts uniformly at random from its own seeded stream.
pub struct RandomPolicy {
    rng: Xoshiro256StarStar,
}

impl RandomPolicy {
    /// Salt keeping the eviction stream apart from a workload using the same seed.
    const STREAM_SALT: u64 = 0x5851_f42d_4c95_7f2d;

    pub fn new(seed: u64) -> Self {
        Self {
            rng: Xoshiro256StarStar::seed_from_u64(seed ^ Self::STREAM_SALT),
        }
    }
}

impl CachePolicy for RandomPolicy {
    fn name(&self) -> &str {
        "random"
    }

    fn pick_victim(&mut self, candidates: &[&CachedModelEntry], _: &VictimContext<'_>) -> usize {
        self.rng.gen_range(0..candidates.len())
    }
}

pub type PolicyFactory = fn(seed: u64) -> Box<dyn CachePolicy>;

/// Name-indexed constructors for cache policies.
#[derive(Clone)]
pub struct PolicyRegistry {
    factories: BTreeMap<String, PolicyFactory>,
    aliases: BTreeMap<String, String>,
}

impl Default for PolicyRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl PolicyRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
            aliases: BTreeMap::new(),
        }
    }

    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register("random", |seed| Box::new(RandomPolicy::new(seed)));
        r.register("cloud", |_| Box::new(CloudOnlyPolicy));
        r.register("fifo", |_| Box::new(FifoPolicy));
        r.register("lfu", |_| Box::new(LfuPolicy));
        r.register("lc", |_| Box::new(LeastContextPolicy));
        r.alias("cloud_only", "cloud");
        r.alias("cloud-only", "cloud");
        r
    }

    pub fn register(&mut self, name: &str, factory: PolicyFactory) {
        self.factories.insert(name.to_string(), factory);
    }

    pub fn alias(&mut self, alias: &str, target: &str) {
        self.aliases.insert(alias.to_string(), target.to_string());
    }

    /// Resolves aliases to the registered name.
    pub fn canonical<'a>(&'a self, name: &'a str) -> Result<&'a str, PolicyError> {
        let name = self.aliases.get(name).map_or(name, String::as_str);
        self.factories
            .get_key_value(name)
            .map(|(k, _)| k.as_str())
            .ok_or_else(|| PolicyError::Unknown(name.to_string()))
    }

    pub fn create(&self, name: &str, seed: u64) -> Result<Box<dyn CachePolicy>, PolicyError> {
        let name = self.canonical(name)?;
        Ok((self.factories[name])(seed))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.canonical(name).is_ok()
    }
}

pub fn create_policy(kind: PolicyKind, seed: u64) -> Box<dyn CachePolicy> {
    PolicyRegistry::builtin()
        .create(kind.as_str(), seed)
        .expect("builtin policies are registered")
}

/// Greedily evicts by the policy's key until at least `bytes_needed` would
/// be freed. Victims are returned in eviction order.
pub fn select_victims(
    policy: &mut dyn CachePolicy,
    cache: &CacheState,
    ctx: &VictimContext<'_>,
    bytes_needed: u64,
) -> Result<Vec<String>, PolicyError> {
    let available = cache.used_bytes();
    if available < bytes_needed {
        return Err(PolicyError::Infeasible {
            needed: bytes_needed,
            available,
        });
    }
    let mut remaining: Vec<&CachedModelEntry> = cache.entries().collect();
    let mut victims = Vec::new();
    let mut freed = 0u64;
    while freed < bytes_needed {
        let i = policy.pick_victim(&remaining, ctx);
        let entry = remaining.remove(i);
        freed += entry.footprint_bytes;
        victims.push(entry.model_id.clone());
    }
    Ok(victims)
}

/// Where to serve a request for `profile`, and what to evict first.
#[allow(clippy::too_many_arguments)]
pub fn decide(
    policy: &mut dyn CachePolicy,
    cache: &CacheState,
    server: &EdgeServerConfig,
    store: &ContextStore,
    aoc: &AoCConfig,
    profile: &ModelProfile,
    now_s: f64,
    offload_on_miss: bool,
) -> Decision {
    if !policy.uses_edge() {
        return Decision::OffloadToCloud;
    }
    if cache.is_cached(&profile.id) {
        return Decision::ServeAtEdge {
            evictions: Vec::new(),
            load_required: false,
        };
    }
    if offload_on_miss {
        return Decision::OffloadToCloud;
    }
    let needed = match cache.bytes_to_free(server, memory_footprint(profile)) {
        Ok(n) => n,
        Err(_) => return Decision::OffloadToCloud,
    };
    if needed == 0 {
        return Decision::ServeAtEdge {
            evictions: Vec::new(),
            load_required: true,
        };
    }
    let ctx = VictimContext { store, aoc, now_s };
    match select_victims(policy, cache, &ctx, needed) {
        Ok(evictions) => Decision::ServeAtEdge {
            evictions,
            load_required: true,
        },
        Err(_) => Decision::OffloadToCloud,
    }
}
