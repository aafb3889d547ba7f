//! Random small instances and brute-force reference implementations shared
//! by the integration suites. Nothing here calls the library's ranking code.

#![allow(dead_code)]

use edgeserve_core::context::{Relevance, UtilityKind};
use edgeserve_core::edgecache::CachedModelEntry;
use edgeserve_core::policy::{create_policy, decide, Decision, PolicyKind};
use edgeserve_core::simcost::Simulator;
use edgeserve_core::{
    AoCConfig, CacheState, Catalog, ContextStore, CostWeights, EdgeServerConfig, ModelProfile,
    Request, Scenario, SimOptions,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

pub type TestRng = Xoshiro256StarStar;

pub fn rng(seed: u64) -> TestRng {
    TestRng::seed_from_u64(seed)
}

/// Footprint in bytes at the test models' 1 byte per parameter.
pub fn footprint(p: &ModelProfile) -> u64 {
    (p.params_millions * 1e6).round() as u64
}

/// Up to `max_models` synthetic models cloned from the builtin ones, with
/// whole-megabyte sizes so footprints are exact.
pub fn random_models(rng: &mut TestRng, max_models: usize) -> Vec<ModelProfile> {
    let builtin = Catalog::builtin();
    let n = rng.gen_range(1..=max_models);
    (0..n)
        .map(|i| {
            let mut p = builtin.models()[rng.gen_range(0..builtin.len())].clone();
            p.id = format!("m{i}");
            p.bytes_per_param = 1.0;
            p.params_millions = rng.gen_range(1..=50) as f64 * 10.0;
            p.load_bandwidth_bytes_per_s = None;
            for t in &mut p.tasks {
                t.params_millions = None;
            }
            p
        })
        .collect()
}

pub fn random_aoc(rng: &mut TestRng) -> AoCConfig {
    let kind = *[
        UtilityKind::Exponential,
        UtilityKind::Linear,
        UtilityKind::Step,
    ]
    .choose(rng)
    .unwrap();
    let decay_rate = match kind {
        UtilityKind::Exponential => rng.gen_range(0.001..1.0),
        UtilityKind::Linear => rng.gen_range(0.001..0.2),
        UtilityKind::Step => rng.gen_range(0.0..50.0),
    };
    AoCConfig {
        utility_kind: kind,
        decay_rate,
        relevance: Relevance::identity(),
        store_capacity: rng.gen_range(1..=32),
    }
}

pub fn random_weights(rng: &mut TestRng) -> CostWeights {
    CostWeights {
        w_switch: rng.gen_range(0.0..2.0),
        w_acc: rng.gen_range(0.0..10.0),
        w_inf: rng.gen_range(0.0..2.0),
        w_off: rng.gen_range(0.0..2.0),
        w_cloud: rng.gen_range(0.0..2.0),
        access_latency_s: rng.gen_range(0.0..0.1),
        core_latency_s: rng.gen_range(0.0..0.3),
        cloud_throughput_gflops: rng.gen_range(0.0..20000.0),
    }
}

/// Requests with nondecreasing arrivals (ties allowed) over `models`.
pub fn random_requests(
    rng: &mut TestRng,
    models: &[ModelProfile],
    max_requests: usize,
) -> Vec<Request> {
    let n = rng.gen_range(1..=max_requests);
    let mut t = 0.0;
    (0..n as u64)
        .map(|request_id| {
            if rng.gen_bool(0.9) {
                t += rng.gen_range(0.0..5.0);
            }
            let m = &models[rng.gen_range(0..models.len())];
            Request {
                arrival_time_s: t,
                request_id,
                model_id: m.id.clone(),
                task_id: m.tasks[rng.gen_range(0..m.tasks.len())].task_id.clone(),
            }
        })
        .collect()
}

pub struct Instance {
    pub scenario: Scenario,
    pub trace: Vec<Request>,
}

/// A random scenario (≤ `max_models` models, ≤ `max_requests` requests)
/// whose capacity forces evictions but fits every model on its own most of
/// the time.
pub fn random_instance(rng: &mut TestRng, max_models: usize, max_requests: usize) -> Instance {
    let models = random_models(rng, max_models);
    let sizes: Vec<u64> = models.iter().map(footprint).collect();
    let largest = *sizes.iter().max().unwrap();
    let total: u64 = sizes.iter().sum();
    let capacity = if rng.gen_bool(0.1) {
        rng.gen_range(1..=largest)
    } else {
        rng.gen_range(largest..=total)
    };
    let trace = random_requests(rng, &models, max_requests);
    let scenario = Scenario {
        catalog: Catalog::new(models).unwrap(),
        server: EdgeServerConfig {
            gpu_memory_bytes: capacity,
            load_bandwidth_bytes_per_s: rng.gen_range(1e8..1e10),
            edge_throughput_gflops: rng.gen_range(100.0..5000.0),
        },
        aoc: random_aoc(rng),
        weights: random_weights(rng),
        options: SimOptions {
            offload_on_miss: rng.gen_bool(0.05),
            context_overhead_gamma: rng.gen_range(0.0..0.05),
            log: true,
        },
    };
    Instance { scenario, trace }
}

/// Age utility written from the definitions.
pub fn reference_utility(aoc: &AoCConfig, age: f64) -> f64 {
    match aoc.utility_kind {
        UtilityKind::Exponential => (-aoc.decay_rate * age).exp(),
        UtilityKind::Linear => {
            let v = 1.0 - aoc.decay_rate * age;
            if v > 0.0 {
                v
            } else {
                0.0
            }
        }
        UtilityKind::Step => {
            if age > aoc.decay_rate {
                0.0
            } else {
                1.0
            }
        }
    }
}

/// Σ u(age) over the model's examples that already exist at `now`.
pub fn reference_mass(store: &ContextStore, aoc: &AoCConfig, model_id: &str, now: f64) -> f64 {
    let mut sum = 0.0;
    for e in store.examples(model_id) {
        if e.created_at_s <= now {
            sum += reference_utility(aoc, now - e.created_at_s);
        }
    }
    sum
}

/// Brute-force victim list: sort every cached model by the policy key, then
/// take the shortest prefix that frees enough.
pub fn oracle_victims(
    kind: PolicyKind,
    cache: &CacheState,
    store: &ContextStore,
    aoc: &AoCConfig,
    now: f64,
    needed: u64,
) -> Vec<String> {
    let mut all: Vec<CachedModelEntry> = cache.entries().cloned().collect();
    match kind {
        PolicyKind::Fifo => all.sort_by_key(|e| e.fifo_seq),
        PolicyKind::Lfu => all.sort_by(|a, b| {
            (a.use_count, a.last_used_s, &a.model_id)
                .partial_cmp(&(b.use_count, b.last_used_s, &b.model_id))
                .unwrap()
        }),
        PolicyKind::Lc => {
            let key = |e: &CachedModelEntry| {
                (reference_mass(store, aoc, &e.model_id, now), e.last_used_s)
            };
            all.sort_by(|a, b| {
                let (ka, kb) = (key(a), key(b));
                ka.partial_cmp(&kb)
                    .unwrap()
                    .then_with(|| a.model_id.cmp(&b.model_id))
            })
        }
        PolicyKind::Random | PolicyKind::CloudOnly => panic!("no deterministic order for {kind:?}"),
    }
    let mut freed = 0;
    let mut out = Vec::new();
    for e in all {
        if freed >= needed {
            break;
        }
        freed += e.footprint_bytes;
        out.push(e.model_id);
    }
    out
}

/// LRU victim list, for checking that LC falls back to recency.
pub fn lru_victims(cache: &CacheState, needed: u64) -> Vec<String> {
    let mut all: Vec<CachedModelEntry> = cache.entries().cloned().collect();
    all.sort_by(|a, b| {
        a.last_used_s
            .partial_cmp(&b.last_used_s)
            .unwrap()
            .then_with(|| a.model_id.cmp(&b.model_id))
    });
    let mut freed = 0;
    let mut out = Vec::new();
    for e in all {
        if freed >= needed {
            break;
        }
        freed += e.footprint_bytes;
        out.push(e.model_id);
    }
    out
}

/// Replays `inst` under `kind` and compares every eviction decision with the
/// brute-force oracle. Returns the number of eviction decisions checked.
pub fn check_against_oracle(kind: PolicyKind, inst: &Instance) -> Result<usize, String> {
    let sc = &inst.scenario;
    let mut policy = create_policy(kind, 0);
    let mut probe = create_policy(kind, 0);
    let mut sim = Simulator::new(sc, policy.as_mut()).map_err(|e| e.to_string())?;
    let mut checked = 0;
    for r in &inst.trace {
        let profile = sc.catalog.get(&r.model_id).unwrap();
        let decision = decide(
            probe.as_mut(),
            sim.cache(),
            &sc.server,
            sim.store(),
            &sc.aoc,
            profile,
            r.arrival_time_s,
            sc.options.offload_on_miss,
        );
        let before: Vec<String> = sim.cache().entries().map(|e| e.model_id.clone()).collect();
        let cached = sim.cache().is_cached(&r.model_id);
        let fp = footprint(profile);
        let over = (sim.cache().used_bytes() + fp).saturating_sub(sc.server.gpu_memory_bytes);
        let expected = if cached || sc.options.offload_on_miss || fp > sc.server.gpu_memory_bytes {
            None
        } else {
            Some(oracle_victims(
                kind,
                sim.cache(),
                sim.store(),
                &sc.aoc,
                r.arrival_time_s,
                over,
            ))
        };
        match (&decision, &expected) {
            (Decision::OffloadToCloud, None) => {}
            (Decision::ServeAtEdge { evictions, .. }, None) if evictions.is_empty() => {}
            (Decision::ServeAtEdge { evictions, .. }, Some(want)) => {
                if evictions != want {
                    return Err(format!(
                        "request {}: {kind:?} evicted {evictions:?}, oracle says {want:?}",
                        r.request_id
                    ));
                }
                if !want.is_empty() {
                    checked += 1;
                }
            }
            _ => {
                return Err(format!(
                    "request {}: decision {decision:?} but oracle expected {expected:?}",
                    r.request_id
                ))
            }
        }
        sim.step(r).map_err(|e| e.to_string())?;
        if let Some(want) = expected {
            for id in &before {
                let gone = !sim.cache().is_cached(id);
                if gone != want.contains(id) {
                    return Err(format!(
                        "request {}: simulator eviction set differs at {id}",
                        r.request_id
                    ));
                }
            }
        }
    }
    Ok(checked)
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

/// Random load/evict/touch sequences against one cache.
pub fn check_cache_ops(rng: &mut TestRng, steps: usize) -> Result<(), String> {
    let models = random_models(rng, 8);
    let largest = models.iter().map(footprint).max().unwrap();
    let cfg = EdgeServerConfig {
        gpu_memory_bytes: rng.gen_range(largest..=largest * 3),
        load_bandwidth_bytes_per_s: 1e9,
        edge_throughput_gflops: 1000.0,
    };
    let mut cache = CacheState::new();
    let mut now = 0.0;
    let mut last_seq: Option<u64> = None;
    for _ in 0..steps {
        now += rng.gen_range(0.0..3.0);
        let m = &models[rng.gen_range(0..models.len())];
        match rng.gen_range(0..3) {
            0 if !cache.is_cached(&m.id) => {
                let needed = cache
                    .bytes_to_free(&cfg, footprint(m))
                    .map_err(|e| e.to_string())?;
                let mut cached: Vec<String> = cache.entries().map(|e| e.model_id.clone()).collect();
                cached.shuffle(rng);
                let mut freed = 0;
                for id in cached {
                    if freed >= needed {
                        break;
                    }
                    freed += cache.evict_model(&id).map_err(|e| e.to_string())?;
                }
                let before = cache.used_bytes();
                cache.load_model(&cfg, m, now).map_err(|e| e.to_string())?;
                let seq = cache.entry(&m.id).unwrap().fifo_seq;
                if last_seq.is_some_and(|s| seq <= s) {
                    return Err(format!("fifo_seq {seq} did not increase"));
                }
                last_seq = Some(seq);
                if rng.gen_bool(0.2) {
                    cache.evict_model(&m.id).map_err(|e| e.to_string())?;
                    if cache.used_bytes() != before {
                        return Err("evict after load changed used_bytes".into());
                    }
                }
            }
            0 => {
                if cache.load_model(&cfg, m, now).is_ok() {
                    return Err(format!("{} loaded twice", m.id));
                }
            }
            1 => {
                let was_cached = cache.is_cached(&m.id);
                let res = cache.evict_model(&m.id);
                if res.is_ok() != was_cached || cache.is_cached(&m.id) {
                    return Err("evict result disagrees with residency".into());
                }
            }
            _ => {
                let _ = cache.touch(&m.id, now);
            }
        }
        let sum: u64 = cache.entries().map(|e| e.footprint_bytes).sum();
        if sum != cache.used_bytes() {
            return Err(format!(
                "used_bytes {} but entries sum to {sum}",
                cache.used_bytes()
            ));
        }
        if cache.used_bytes() > cfg.gpu_memory_bytes {
            return Err("capacity exceeded".into());
        }
    }
    Ok(())
}

/// Runs `inst` under `kind` request by request, checking capacity after
/// every step, then cost additivity and execution-count conservation.
pub fn check_run(
    kind: PolicyKind,
    inst: &Instance,
    seed: u64,
) -> Result<edgeserve_core::RunMetrics, String> {
    let sc = &inst.scenario;
    let mut policy = create_policy(kind, seed);
    let mut sim = Simulator::new(sc, policy.as_mut()).map_err(|e| e.to_string())?;
    let mut records = Vec::new();
    for r in &inst.trace {
        records.push(sim.step(r).map_err(|e| e.to_string())?);
        sim.cache()
            .check_invariants(&sc.server)
            .map_err(|e| format!("after request {}: {e}", r.request_id))?;
    }
    drop(sim);

    let mut policy = create_policy(kind, seed);
    let out = edgeserve_core::simcost::run_simulation(sc, &inst.trace, policy.as_mut())
        .map_err(|e| e.to_string())?;
    let m = out.metrics;
    if out.log.as_deref() != Some(records.as_slice()) {
        return Err("run_simulation disagrees with stepping".into());
    }

    let mut parts = [0.0f64; 5];
    for r in &records {
        let c = &r.costs;
        let comps = [
            c.switching_cost,
            c.total_accuracy_cost,
            c.edge_inference_latency_cost,
            c.edge_offloading_latency_cost,
            c.cloud_cost,
        ];
        if !rel_close(c.system_cost, comps.iter().sum(), 1e-9) {
            return Err(format!(
                "request {}: system cost is not the component sum",
                r.request_id
            ));
        }
        for (p, v) in parts.iter_mut().zip(comps) {
            *p += v;
        }
    }
    let c = &m.costs;
    let totals = [
        c.switching_cost,
        c.total_accuracy_cost,
        c.edge_inference_latency_cost,
        c.edge_offloading_latency_cost,
        c.cloud_cost,
    ];
    for (i, (t, p)) in totals.iter().zip(parts).enumerate() {
        if !rel_close(*t, p, 1e-9) {
            return Err(format!("component {i}: total {t} vs per-request sum {p}"));
        }
    }
    if !rel_close(c.system_cost, totals.iter().sum(), 1e-9) {
        return Err("run system cost is not the component sum".into());
    }
    if m.edge_executions + m.cloud_executions != m.request_count
        || m.request_count != inst.trace.len() as u64
    {
        return Err("execution counts do not add up".into());
    }
    if m.model_loads > m.edge_executions {
        return Err("more loads than edge executions".into());
    }
    if kind == PolicyKind::CloudOnly {
        check_cloud_identities(&m)?;
    }
    Ok(m)
}

pub fn check_cloud_identities(m: &edgeserve_core::RunMetrics) -> Result<(), String> {
    let c = &m.costs;
    if c.switching_cost != 0.0
        || c.edge_inference_latency_cost != 0.0
        || c.total_accuracy_cost != 0.0
        || m.average_accuracy_cost != 0.0
        || m.edge_execution_ratio != 0.0
        || m.edge_executions != 0
    {
        return Err(format!("cloud-only run has edge activity: {m:?}"));
    }
    Ok(())
}

/// u(0) = 1, nonincreasing and nonnegative over random ages.
pub fn check_utility(rng: &mut TestRng) -> Result<(), String> {
    let aoc = random_aoc(rng);
    let u = |age| edgeserve_core::context::age_utility(&aoc, age);
    if u(0.0) != 1.0 {
        return Err(format!("u(0) = {} for {aoc:?}", u(0.0)));
    }
    let mut ages: Vec<f64> = (0..50).map(|_| rng.gen_range(0.0..1000.0)).collect();
    ages.sort_by(f64::total_cmp);
    let mut prev = 1.0;
    for a in ages {
        let v = u(a);
        if !(0.0..=prev).contains(&v) {
            return Err(format!("u({a}) = {v} after {prev} for {aoc:?}"));
        }
        if (v - reference_utility(&aoc, a)).abs() > 1e-12 {
            return Err(format!("u({a}) = {v} disagrees with the definition"));
        }
        prev = v;
    }
    Ok(())
}

/// Staleness, upper bound and additivity of effective context.
pub fn check_effective_context(rng: &mut TestRng) -> Result<(), String> {
    let aoc = random_aoc(rng);
    let n = rng.gen_range(0..40);
    let mut times: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..100.0)).collect();
    times.sort_by(f64::total_cmp);
    let mut all = ContextStore::new(1000);
    let mut left = ContextStore::new(1000);
    let mut right = ContextStore::new(1000);
    for &t in &times {
        all.record_example("m", "t", t).unwrap();
        if rng.gen_bool(0.5) {
            left.record_example("m", "t", t).unwrap();
        } else {
            right.record_example("m", "t", t).unwrap();
        }
    }
    let mut now = times.last().copied().unwrap_or(0.0);
    let mut prev = f64::INFINITY;
    for step in 0..30 {
        if step > 0 {
            now += rng.gen_range(0.0..10.0);
        }
        let k = all.effective_context("m", "t", &aoc, now);
        if k > n as f64 + 1e-9 {
            return Err(format!("k_eff {k} exceeds {n} stored examples"));
        }
        let parts = left.effective_context("m", "t", &aoc, now)
            + right.effective_context("m", "t", &aoc, now);
        if !rel_close(k, parts, 1e-9) {
            return Err(format!("k_eff {k} is not the sum of its halves {parts}"));
        }
        if !rel_close(k, reference_mass(&all, &aoc, "m", now), 1e-9) {
            return Err("k_eff disagrees with the reference sum".into());
        }
        if step > 0 && k > prev + 1e-12 {
            return Err(format!(
                "k_eff grew from {prev} to {k} with no new examples"
            ));
        }
        prev = k;
    }
    Ok(())
}

/// Curves through random calibratable points: monotone, clamped at k_max,
/// capped at 100, and alpha matching the closed form.
pub fn check_accuracy_curve(rng: &mut TestRng) -> Result<(), String> {
    use edgeserve_core::catalog::calibrate_accuracy;
    let a0 = rng.gen_range(0.0..60.0);
    let gain = rng.gen_range(0.5..20.0);
    let alpha = rng.gen_range(0.05..1.5);
    let k_ref = rng.gen_range(2..=64u32);
    let few = a0 + gain * (1.0 + f64::from(k_ref).powf(alpha)).log2();
    if few > 100.0 {
        return Ok(());
    }
    let task = edgeserve_core::TaskProfile {
        task_id: "t".into(),
        zero_shot_score: a0,
        one_shot_score: Some(a0 + gain),
        few_shot_score: Some(few),
        few_shot_k: Some(k_ref),
        params_millions: None,
        gflops_per_inference: None,
    };
    let model = calibrate_accuracy(&task, k_ref).map_err(|e| e.reason)?;
    let closed = ((2f64).powf((few - a0) / gain) - 1.0).ln() / f64::from(k_ref).ln();
    if (model.alpha - closed).abs() > 1e-6 {
        return Err(format!("alpha {} vs closed form {closed}", model.alpha));
    }
    let mut ks: Vec<f64> = (0..40).map(|_| rng.gen_range(0.0..200.0)).collect();
    ks.sort_by(f64::total_cmp);
    let mut prev = f64::NEG_INFINITY;
    let at_max = model.accuracy_at(f64::from(k_ref));
    for k in ks {
        let a = model.accuracy_at(k);
        if a < prev || a > 100.0 {
            return Err(format!("accuracy {a} at k={k} after {prev}"));
        }
        if k >= f64::from(k_ref) && a != at_max {
            return Err(format!("accuracy at k={k} not clamped to {at_max}"));
        }
        prev = a;
    }
    Ok(())
}

/// Same seed, same trace; trace and catalog files read back unchanged.
pub fn check_round_trips(rng: &mut TestRng, dir: &std::path::Path) -> Result<(), String> {
    use edgeserve_core::catalog::{load_catalog, write_catalog};
    use edgeserve_core::workload::{generate_trace, read_trace, write_trace};
    let models = random_models(rng, 6);
    let catalog = Catalog::new(models.clone()).unwrap();
    let cfg = edgeserve_core::WorkloadConfig {
        seed: rng.gen(),
        duration_s: rng.gen_range(1.0..200.0),
        arrival_rate_hz: rng.gen_range(0.1..5.0),
        zipf_exponent: rng.gen_range(0.0..2.0),
        model_ids: models.iter().map(|m| m.id.clone()).collect(),
        task_weights: Default::default(),
    };
    let a = generate_trace(&cfg, &catalog).map_err(|e| e.to_string())?;
    let b = generate_trace(&cfg, &catalog).map_err(|e| e.to_string())?;
    if a != b {
        return Err("trace generation is not deterministic".into());
    }
    for (i, w) in a.windows(2).enumerate() {
        if w[1].arrival_time_s < w[0].arrival_time_s || w[1].request_id != w[0].request_id + 1 {
            return Err(format!("trace out of order at {i}"));
        }
    }
    let trace_path = dir.join("trace.csv");
    write_trace(&a, &trace_path).map_err(|e| e.to_string())?;
    let back = read_trace(&trace_path, &catalog).map_err(|e| e.to_string())?;
    if back != a {
        return Err("trace did not round-trip".into());
    }
    let catalog_path = dir.join("catalog.json");
    write_catalog(&catalog_path, &models).map_err(|e| e.to_string())?;
    let loaded = load_catalog(&catalog_path).map_err(|e| e.to_string())?;
    if loaded != models {
        return Err("catalog did not round-trip".into());
    }
    Ok(())
}

/// Requests generated for `models` at `rate_hz` over `duration_s`.
pub fn generated(
    models: &[&str],
    rate_hz: f64,
    duration_s: f64,
    zipf: f64,
    seed: u64,
) -> Vec<Request> {
    let cfg = edgeserve_core::WorkloadConfig {
        seed,
        duration_s,
        arrival_rate_hz: rate_hz,
        zipf_exponent: zipf,
        model_ids: models.iter().map(|m| m.to_string()).collect(),
        task_weights: Default::default(),
    };
    edgeserve_core::workload::generate_trace(&cfg, &Catalog::builtin()).unwrap()
}

/// Rank-1 and rank-2 counts among the first `draws` requests of a two-model
/// Zipf workload.
pub fn zipf_pair_counts(zipf: f64, draws: usize, seed: u64) -> (usize, usize) {
    let trace = generated(
        &["clip-vit-l14", "clip-vit-h14"],
        100.0,
        draws as f64 / 100.0 * 1.2,
        zipf,
        seed,
    );
    assert!(
        trace.len() >= draws,
        "only {} requests generated",
        trace.len()
    );
    let first = trace[..draws]
        .iter()
        .filter(|r| r.model_id == "clip-vit-l14")
        .count();
    (first, draws - first)
}

/// Independent inverse-CDF Zipf sampler over `n` ranks (1-based).
pub fn reference_zipf_counts(n: usize, zipf: f64, draws: usize, seed: u64) -> Vec<usize> {
    let weights: Vec<f64> = (1..=n).map(|r| 1.0 / (r as f64).powf(zipf)).collect();
    let total: f64 = weights.iter().sum();
    let mut cdf = Vec::with_capacity(n);
    let mut acc = 0.0;
    for w in &weights {
        acc += w / total;
        cdf.push(acc);
    }
    let mut r = rng(seed);
    let mut counts = vec![0; n];
    for _ in 0..draws {
        let u: f64 = r.gen();
        let rank = cdf.iter().position(|&c| u < c).unwrap_or(n - 1);
        counts[rank] += 1;
    }
    counts
}
