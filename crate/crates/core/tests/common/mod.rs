//! Test-only oracles and random world builders. Nothing here calls the
//! resolver; the oracle reads raw layer and overlay contents directly.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;
use rand::{Rng, RngCore};
use refspawn::{DefinitionContent, InstanceId, LayerId, OverlayId, Provenance, ScopeLevel, Store, Value};

/// Brute-force composition: layers applied shared→local (equal scope in
/// binding order), then overlays root→leaf. Tombstoned keys stay in the map
/// as `(None, Tombstone)` so callers can check them too.
pub fn oracle_flatten(store: &Store, instance: &InstanceId) -> BTreeMap<String, (Option<Value>, Provenance)> {
    let state = store.read();
    let reference = state.refs.get(instance).unwrap();
    let mut out: BTreeMap<String, (Option<Value>, Provenance)> = BTreeMap::new();

    for scope in ScopeLevel::ALL {
        for layer_id in &reference.layer_bindings {
            let layer = state.memory.layer(layer_id).unwrap();
            if layer.scope != scope {
                continue;
            }
            for (k, v) in &layer.entries {
                out.insert(k.clone(), (Some(v.clone()), Provenance::Layer(layer_id.clone())));
            }
        }
    }

    let mut chain: Vec<OverlayId> = Vec::new();
    let mut cursor = Some(reference.overlay.clone());
    while let Some(id) = cursor {
        cursor = state.memory.overlay(&id).unwrap().parent_overlay.clone();
        chain.push(id);
    }
    for id in chain.iter().rev() {
        let overlay = state.memory.overlay(id).unwrap();
        for (k, v) in &overlay.writes {
            out.insert(k.clone(), (Some(v.clone()), Provenance::Overlay(id.clone())));
        }
        for k in &overlay.tombstones {
            out.insert(k.clone(), (None, Provenance::Tombstone(id.clone())));
        }
    }
    out
}

pub fn caps<const N: usize>(names: [&str; N]) -> BTreeSet<String> {
    names.iter().map(|s| s.to_string()).collect()
}

pub fn no_ctx() -> BTreeMap<String, Value> {
    BTreeMap::new()
}

pub fn key_pool(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("k.{i}")).collect()
}

/// A randomized small world: up to 5 layers, instance trees whose overlay
/// chains are at most `max_depth` deep, keys drawn from a pool of `n_keys`.
pub struct SmallWorld {
    pub store: Store,
    pub layers: Vec<LayerId>,
    pub instances: Vec<InstanceId>,
    pub keys: Vec<String>,
}

pub fn random_value(rng: &mut impl Rng) -> Value {
    match rng.random_range(0..4) {
        0 => Value::Integer(rng.random_range(-50..50)),
        1 => Value::Text(format!("t{}", rng.random_range(0..20))),
        2 => Value::Boolean(rng.random_bool(0.5)),
        _ => Value::Decimal(rng.random_range(0..100) as f64 / 4.0),
    }
}

pub fn small_world(rng: &mut impl RngCore, max_depth: usize, n_keys: usize) -> SmallWorld {
    let store = Store::new();
    let keys = key_pool(n_keys.max(1));
    let pin = store
        .register_definition(DefinitionContent::new("small world").with_capabilities(["read", "write", "exec"]))
        .unwrap();

    let n_layers = rng.random_range(0..=5);
    let mut layers = Vec::new();
    for _ in 0..n_layers {
        let scope = ScopeLevel::ALL[rng.random_range(0..5)];
        let mut entries = BTreeMap::new();
        for _ in 0..rng.random_range(0..=n_keys) {
            entries.insert(keys.choose(rng).unwrap().clone(), random_value(rng));
        }
        layers.push(store.create_layer(scope, entries).unwrap());
    }

    let mut instances = Vec::new();
    let mut depth: BTreeMap<InstanceId, usize> = BTreeMap::new();
    let roots = rng.random_range(1..=2);
    for _ in 0..roots {
        let bound: Vec<LayerId> = layers.iter().filter(|_| rng.random_bool(0.7)).cloned().collect();
        let r = store.spawn(pin.clone(), bound, caps(["read", "write", "exec"]), no_ctx()).unwrap();
        depth.insert(r.instance_id.clone(), 1);
        instances.push(r.instance_id);
    }
    for _ in 0..rng.random_range(0..6) {
        let parent = instances.choose(rng).unwrap().clone();
        if depth[&parent] >= max_depth {
            continue;
        }
        let extra: Vec<LayerId> = layers.iter().filter(|_| rng.random_bool(0.2)).cloned().collect();
        let parent_caps = store.effective_capabilities(&parent).unwrap();
        let narrowed: BTreeSet<String> = parent_caps.into_iter().filter(|_| rng.random_bool(0.7)).collect();
        let child = store.derive(&parent, extra, narrowed, no_ctx()).unwrap();
        depth.insert(child.instance_id.clone(), depth[&parent] + 1);
        instances.push(child.instance_id);
    }

    for _ in 0..rng.random_range(0..(3 * n_keys).max(1)) {
        let target = instances.choose(rng).unwrap();
        let key = keys.choose(rng).unwrap();
        let value = rng.random_bool(0.7).then(|| random_value(rng));
        store.write(target, key, value).unwrap();
    }
    for _ in 0..rng.random_range(0..4) {
        if let Some(layer) = layers.choose(rng) {
            let value = rng.random_bool(0.8).then(|| random_value(rng));
            store.layer_write(layer, keys.choose(rng).unwrap(), value).unwrap();
        }
    }
    SmallWorld { store, layers, instances, keys }
}

/// Minimal JSON string escaping for the independent definition hasher.
pub fn json_str(s: &str) -> String {
    let mut out = String::from("\"");
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            c if (c as u32) < 0x20 => out.push_str(&format!("\\u{:04x}", c as u32)),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}
