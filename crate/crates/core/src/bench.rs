//! Workload generation and the reference-versus-materialization harness.
//!
//! Claims are checked with exact operation counters first; wall-clock timings
//! are secondary evidence. Workloads are fully determined by their seed.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::time::Instant;

use rand::distr::{Alphanumeric, SampleString};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::canonical::to_canonical_string;
use crate::counters::CounterReading;
use crate::error::{Error, Result};
use crate::ids::{InstanceId, LayerId};
use crate::memory::ScopeLevel;
use crate::registry::{CapabilitySet, DefinitionContent, DefinitionPin};
use crate::resolver::{precedence_order, Provenance};
use crate::store::Store;
use crate::value::Value;

/// Capabilities named in each spawn's restriction. Fixed so the subset check
/// does not scale with the definition's capability count.
const RESTRICTION_SIZE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchWorkloadSpec {
    /// Definition instruction size in bytes.
    pub d: u64,
    /// Total inherited layer entries.
    pub m: u64,
    /// Capability count.
    pub b: u64,
    pub n_descendants: u64,
    pub writes_per_descendant: u64,
    pub seed: u64,
}

impl Default for BenchWorkloadSpec {
    fn default() -> Self {
        BenchWorkloadSpec { d: 1024, m: 1000, b: 16, n_descendants: 1, writes_per_descendant: 0, seed: 7 }
    }
}

/// A detached, fully copied instance: the eager-construction baseline.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaterializedInstance {
    pub instance_id: InstanceId,
    pub definition_pin: DefinitionPin,
    pub role_instructions: String,
    pub interface_contracts: BTreeMap<String, String>,
    pub capabilities: Vec<String>,
    pub context_bindings: BTreeMap<String, Value>,
    pub memory: BTreeMap<String, (Value, Provenance)>,
}

/// Copies definition body, every inherited entry and the capability list into
/// a standalone object. Θ(d + m + b) by construction; each source entry is
/// counted as one copy, shadowed or not.
pub fn materialize_baseline(store: &Store, instance: &InstanceId) -> Result<MaterializedInstance> {
    let state = store.read();
    let reference = state.refs.get(instance)?;
    let definition = state.registry.get_pin(&reference.definition_pin)?;
    let counters = state.memory.counters();

    let body = definition.content.body_bytes();
    counters.definition_read(body);
    counters.bytes_copied(body);
    let role_instructions = definition.content.role_instructions.clone();
    let interface_contracts = definition.content.interface_contracts.clone();

    let caps = state.refs.effective_capabilities(&state.registry, instance)?;
    counters.bytes_copied(caps.iter().map(|c| c.len() as u64).sum());
    let capabilities: Vec<String> = caps.into_iter().collect();

    let mut memory = BTreeMap::new();
    for layer_id in precedence_order(&state.memory, &reference.layer_bindings)?.into_iter().rev() {
        for (k, v) in &state.memory.layer(layer_id)?.entries {
            counters.entry_copied(k.len() as u64 + v.byte_size());
            memory.insert(k.clone(), (v.clone(), Provenance::Layer(layer_id.clone())));
        }
    }
    for overlay in state.memory.chain(&reference.overlay)?.into_iter().rev() {
        for (k, v) in &overlay.writes {
            counters.entry_copied(k.len() as u64 + v.byte_size());
            memory.insert(k.clone(), (v.clone(), Provenance::Overlay(overlay.overlay_id.clone())));
        }
        for k in &overlay.tombstones {
            memory.remove(k);
        }
    }

    Ok(MaterializedInstance {
        instance_id: instance.clone(),
        definition_pin: reference.definition_pin.clone(),
        role_instructions,
        interface_contracts,
        capabilities,
        context_bindings: state.refs.effective_context(instance)?,
        memory,
    })
}

/// A generated store: one definition, one layer per scope level, all bound.
pub struct World {
    pub store: Store,
    pub pin: DefinitionPin,
    pub layers: Vec<LayerId>,
    pub restriction: CapabilitySet,
}

impl World {
    pub fn generate(spec: &BenchWorkloadSpec) -> Result<World> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let store = Store::new();

        let instructions = if spec.d == 0 {
            // Empty instructions are rejected; a single byte stands in.
            "x".to_string()
        } else {
            Alphanumeric.sample_string(&mut rng, spec.d as usize)
        };
        let capabilities: CapabilitySet = (0..spec.b).map(|i| format!("cap.{i:07}")).collect();
        let restriction = capabilities.iter().take(RESTRICTION_SIZE).cloned().collect();
        let pin = store.register_definition(DefinitionContent {
            role_instructions: instructions,
            capabilities,
            ..Default::default()
        })?;

        let scopes = ScopeLevel::ALL;
        let per_layer = spec.m / scopes.len() as u64;
        let extra = spec.m % scopes.len() as u64;
        let mut layers = Vec::with_capacity(scopes.len());
        for (i, scope) in scopes.into_iter().enumerate() {
            let count = per_layer + u64::from((i as u64) < extra);
            let mut entries = BTreeMap::new();
            for n in 0..count {
                let value = if rng.random_bool(0.5) {
                    Value::Integer(rng.random_range(0..1_000_000))
                } else {
                    Value::Text(Alphanumeric.sample_string(&mut rng, 12))
                };
                entries.insert(format!("mem.{scope}.{n:07}"), value);
            }
            layers.push(store.create_layer(scope, entries)?);
        }
        Ok(World { store, pin, layers, restriction })
    }

    pub fn spawn_root(&self) -> Result<InstanceId> {
        Ok(self
            .store
            .spawn(self.pin.clone(), self.layers.clone(), self.restriction.clone(), bench_context())?
            .instance_id)
    }
}

fn bench_context() -> BTreeMap<String, Value> {
    BTreeMap::from([("task".to_string(), Value::Text("bench".into()))])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMode {
    Reference,
    Materialize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct WallTime {
    pub median_ns: u64,
    pub p90_ns: u64,
    pub samples: u64,
}

impl WallTime {
    pub fn from_samples(mut samples: Vec<u64>) -> WallTime {
        if samples.is_empty() {
            return WallTime::default();
        }
        samples.sort_unstable();
        let n = samples.len();
        let rank = |q: f64| samples[((q * n as f64).ceil() as usize).clamp(1, n) - 1];
        WallTime { median_ns: rank(0.5), p90_ns: rank(0.9), samples: n as u64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub spec: BenchWorkloadSpec,
    pub mode: BenchMode,
    /// Counters for one spawn (reference mode) or one materialization.
    pub spawn_ops: CounterReading,
    /// Counters for one derive from a fresh root (reference mode only).
    pub derive_ops: Option<CounterReading>,
    /// False if any repetition's counters differed from the first one's.
    pub counters_constant: bool,
    pub wall_time: WallTime,
    pub derive_wall_time: Option<WallTime>,
    pub overlay_entries_total: u64,
    pub shared_entries_total: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    /// One canonical JSON record per row, newline-terminated.
    pub fn to_lines(&self) -> String {
        self.rows.iter().map(|r| to_canonical_string(r) + "\n").collect()
    }

    pub fn from_lines(text: &str) -> Result<BenchReport> {
        let rows = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::MalformedRecord(e.to_string())))
            .collect::<Result<_>>()?;
        Ok(BenchReport { rows })
    }

    pub fn rows(&self, mode: BenchMode) -> impl Iterator<Item = &BenchRow> {
        self.rows.iter().filter(move |r| r.mode == mode)
    }

    /// Column-aligned summary for people.
    pub fn human_summary(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<12} {:>8} {:>8} {:>6} {:>7} {:>3} | {:>11} {:>11} {:>11} {:>9} | {:>12} {:>12} | {:>10} {:>10}",
            "mode",
            "d",
            "m",
            "b",
            "N",
            "k",
            "entry_reads",
            "entry_copy",
            "bytes_copy",
            "def_bytes",
            "median_ns",
            "p90_ns",
            "overlay",
            "shared"
        );
        for r in &self.rows {
            let mode = match r.mode {
                BenchMode::Reference => "reference",
                BenchMode::Materialize => "materialize",
            };
            let _ = writeln!(
                out,
                "{:<12} {:>8} {:>8} {:>6} {:>7} {:>3} | {:>11} {:>11} {:>11} {:>9} | {:>12} {:>12} | {:>10} {:>10}",
                mode,
                r.spec.d,
                r.spec.m,
                r.spec.b,
                r.spec.n_descendants,
                r.spec.writes_per_descendant,
                r.spawn_ops.entry_reads,
                r.spawn_ops.entry_copies,
                r.spawn_ops.bytes_copied,
                r.spawn_ops.definition_bytes_read,
                r.wall_time.median_ns,
                r.wall_time.p90_ns,
                r.overlay_entries_total,
                r.shared_entries_total,
            );
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScalingConfig {
    /// Reference-mode spawn/derive repetitions per spec.
    pub repetitions: usize,
    /// Materialization repetitions per spec; kept separate because each one
    /// is Θ(m).
    pub baseline_repetitions: usize,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        ScalingConfig { repetitions: 1000, baseline_repetitions: 15 }
    }
}

/// Which workload dimension a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    D,
    M,
    B,
}

/// Checks that `specs` vary exactly one of d, m, b by at least three orders of
/// magnitude and agree on everything else.
pub fn validate_sweep(specs: &[BenchWorkloadSpec]) -> Result<SweepParameter> {
    let first = specs.first().ok_or_else(|| Error::InvalidSpec("empty sweep".into()))?;
    let distinct = |f: fn(&BenchWorkloadSpec) -> u64| specs.iter().map(f).collect::<BTreeSet<_>>();
    let dims: [(SweepParameter, BTreeSet<u64>); 3] = [
        (SweepParameter::D, distinct(|s| s.d)),
        (SweepParameter::M, distinct(|s| s.m)),
        (SweepParameter::B, distinct(|s| s.b)),
    ];
    let varied: Vec<_> = dims.iter().filter(|(_, v)| v.len() > 1).collect();
    let [(param, values)] = varied.as_slice() else {
        return Err(Error::InvalidSpec(format!("exactly one of d, m, b must vary; {} do", varied.len())));
    };
    let others_fixed = specs.iter().all(|s| {
        s.n_descendants == first.n_descendants
            && s.writes_per_descendant == first.writes_per_descendant
            && s.seed == first.seed
    });
    if !others_fixed {
        return Err(Error::InvalidSpec("n_descendants, writes_per_descendant and seed must be fixed".into()));
    }
    let lo = (*values.first().expect("non-empty")).max(1);
    let hi = *values.last().expect("non-empty");
    if hi < lo.saturating_mul(1000) {
        return Err(Error::InvalidSpec(format!("sweep {lo}..{hi} spans fewer than three orders of magnitude")));
    }
    Ok(*param)
}

/// Runs each spec in reference mode (spawn, then derive from the new root)
/// and in materialization mode.
pub fn run_spawn_scaling(specs: &[BenchWorkloadSpec], config: ScalingConfig) -> Result<BenchReport> {
    validate_sweep(specs)?;
    if config.repetitions == 0 || config.baseline_repetitions == 0 {
        return Err(Error::InvalidSpec("repetitions must be positive".into()));
    }
    let mut rows = Vec::with_capacity(specs.len() * 2);
    for spec in specs {
        let world = World::generate(spec)?;
        rows.push(reference_row(&world, spec, config.repetitions)?);
        rows.push(materialize_row(&world, spec, config.baseline_repetitions)?);
    }
    Ok(BenchReport { rows })
}

fn reference_row(world: &World, spec: &BenchWorkloadSpec, reps: usize) -> Result<BenchRow> {
    let store = &world.store;
    let mut spawn_times = Vec::with_capacity(reps);
    let mut derive_times = Vec::with_capacity(reps);
    let mut spawn_ops: Option<CounterReading> = None;
    let mut derive_ops: Option<CounterReading> = None;
    let mut constant = true;
    for _ in 0..reps {
        let c0 = store.counters();
        let t0 = Instant::now();
        let root = store.spawn(world.pin.clone(), world.layers.clone(), world.restriction.clone(), bench_context())?;
        let t1 = Instant::now();
        let c1 = store.counters();
        store.derive(&root.instance_id, Vec::new(), world.restriction.clone(), BTreeMap::new())?;
        let t2 = Instant::now();
        let c2 = store.counters();

        spawn_times.push((t1 - t0).as_nanos() as u64);
        derive_times.push((t2 - t1).as_nanos() as u64);
        let (s, d) = (c1.since(&c0), c2.since(&c1));
        constant &= *spawn_ops.get_or_insert(s) == s;
        constant &= *derive_ops.get_or_insert(d) == d;
    }
    Ok(BenchRow {
        spec: *spec,
        mode: BenchMode::Reference,
        spawn_ops: spawn_ops.unwrap_or_default(),
        derive_ops,
        counters_constant: constant,
        wall_time: WallTime::from_samples(spawn_times),
        derive_wall_time: Some(WallTime::from_samples(derive_times)),
        overlay_entries_total: store.overlay_entries_total(),
        shared_entries_total: store.shared_entries_total(),
    })
}

fn materialize_row(world: &World, spec: &BenchWorkloadSpec, reps: usize) -> Result<BenchRow> {
    let store = &world.store;
    let root = world.spawn_root()?;
    let mut times = Vec::with_capacity(reps);
    let mut ops: Option<CounterReading> = None;
    let mut constant = true;
    for _ in 0..reps {
        let c0 = store.counters();
        let t0 = Instant::now();
        let copy = materialize_baseline(store, &root)?;
        let elapsed = t0.elapsed();
        let c = store.counters().since(&c0);
        drop(copy);
        times.push(elapsed.as_nanos() as u64);
        constant &= *ops.get_or_insert(c) == c;
    }
    Ok(BenchRow {
        spec: *spec,
        mode: BenchMode::Materialize,
        spawn_ops: ops.unwrap_or_default(),
        derive_ops: None,
        counters_constant: constant,
        wall_time: WallTime::from_samples(times),
        derive_wall_time: None,
        overlay_entries_total: store.overlay_entries_total(),
        shared_entries_total: store.shared_entries_total(),
    })
}

/// Fans out `n_descendants` derives from one root, each writing
/// `writes_per_descendant` distinct keys to its own overlay. With `parallel`
/// the fan-out runs on all cores; timings are then not meaningful.
pub fn run_memory_divergence(spec: &BenchWorkloadSpec, parallel: bool) -> Result<BenchReport> {
    if spec.n_descendants == 0 {
        return Err(Error::InvalidSpec("n_descendants must be at least 1".into()));
    }
    let world = World::generate(spec)?;
    let store = &world.store;
    let root = world.spawn_root()?;

    let fan_out = |count: u64| -> Result<Vec<u64>> {
        let mut times = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let t0 = Instant::now();
            let child = store.derive(&root, Vec::new(), world.restriction.clone(), BTreeMap::new())?;
            times.push(t0.elapsed().as_nanos() as u64);
            for j in 0..spec.writes_per_descendant {
                store.write(&child.instance_id, &format!("local.{j}"), Some(Value::Integer(j as i64)))?;
            }
        }
        Ok(times)
    };

    let c0 = store.counters();
    let times = if parallel {
        let threads = std::thread::available_parallelism().map_or(4, |n| n.get()) as u64;
        let share = spec.n_descendants.div_ceil(threads);
        let counts: Vec<u64> =
            (0..threads).map(|t| share.min(spec.n_descendants.saturating_sub(t * share))).filter(|&c| c > 0).collect();
        let results: Vec<Result<Vec<u64>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = counts.iter().map(|&c| scope.spawn(move || fan_out(c))).collect();
            handles.into_iter().map(|h| h.join().expect("fan-out worker panicked")).collect()
        });
        let mut all = Vec::new();
        for r in results {
            all.extend(r?);
        }
        all
    } else {
        fan_out(spec.n_descendants)?
    };
    let ops = store.counters().since(&c0);

    Ok(BenchReport {
        rows: vec![BenchRow {
            spec: *spec,
            mode: BenchMode::Reference,
            spawn_ops: ops,
            derive_ops: None,
            counters_constant: true,
            wall_time: WallTime::from_samples(times),
            derive_wall_time: None,
            overlay_entries_total: store.overlay_entries_total(),
            shared_entries_total: store.shared_entries_total(),
        }],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sweep_m(values: &[u64]) -> Vec<BenchWorkloadSpec> {
        values.iter().map(|&m| BenchWorkloadSpec { m, ..Default::default() }).collect()
    }

    #[test]
    fn sweep_validation() {
        assert_eq!(validate_sweep(&[]).unwrap_err().code(), "INVALID_SPEC");
        assert_eq!(validate_sweep(&sweep_m(&[100, 100_000])).unwrap(), SweepParameter::M);
        assert!(validate_sweep(&sweep_m(&[100, 1000])).is_err());
        assert!(validate_sweep(&sweep_m(&[100])).is_err());
        let mut two = sweep_m(&[100, 100_000]);
        two[1].b = 99;
        assert!(validate_sweep(&two).is_err());
        let mut seeds = sweep_m(&[100, 100_000]);
        seeds[1].seed = 8;
        assert!(validate_sweep(&seeds).is_err());
    }

    #[test]
    fn wall_time_ranks() {
        let w = WallTime::from_samples((1..=10).rev().collect());
        assert_eq!((w.median_ns, w.p90_ns, w.samples), (5, 9, 10));
        assert_eq!(WallTime::from_samples(vec![]), WallTime::default());
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let spec = BenchWorkloadSpec { m: 203, d: 50, b: 9, ..Default::default() };
        let (a, b) = (World::generate(&spec).unwrap(), World::generate(&spec).unwrap());
        assert_eq!(a.store.state_hash(), b.store.state_hash());
        assert_eq!(a.store.shared_entries_total(), 203);
        let other = World::generate(&BenchWorkloadSpec { seed: 8, ..spec }).unwrap();
        assert_ne!(a.store.state_hash(), other.store.state_hash());
    }

    #[test]
    fn empty_world_baseline_copies_nothing() {
        let spec = BenchWorkloadSpec { m: 0, ..Default::default() };
        let world = World::generate(&spec).unwrap();
        let root = world.spawn_root().unwrap();
        let c0 = world.store.counters();
        let copy = materialize_baseline(&world.store, &root).unwrap();
        assert_eq!(world.store.counters().since(&c0).entry_copies, 0);
        assert!(copy.memory.is_empty());
    }

    #[test]
    fn report_lines_round_trip() {
        let report = run_memory_divergence(
            &BenchWorkloadSpec { m: 10, n_descendants: 3, writes_per_descendant: 2, ..Default::default() },
            false,
        )
        .unwrap();
        let text = report.to_lines();
        assert_eq!(text.lines().count(), 1);
        assert_eq!(BenchReport::from_lines(&text).unwrap(), report);
        assert!(report.human_summary().contains("reference"));
    }

    #[test]
    fn divergence_rejects_zero_descendants() {
        let spec = BenchWorkloadSpec { n_descendants: 0, ..Default::default() };
        assert_eq!(run_memory_divergence(&spec, false).unwrap_err().code(), "INVALID_SPEC");
    }
}
