mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::{caps, no_ctx, oracle_flatten, small_world};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use refspawn::{CacheStatus, DefinitionContent, DefinitionPin, Provenance, ScopeLevel, Store, Value};

fn setup() -> (Store, DefinitionPin) {
    let store = Store::new();
    let pin = store.register_definition(DefinitionContent::new("assist").with_capabilities(["read", "write"])).unwrap();
    (store, pin)
}

fn entries(pairs: &[(&str, i64)]) -> BTreeMap<String, Value> {
    pairs.iter().map(|(k, v)| (k.to_string(), Value::Integer(*v))).collect()
}

#[test]
fn single_source_and_overlay_precedence() {
    let (store, pin) = setup();
    let org = store.create_layer(ScopeLevel::Organization, entries(&[("policy", 1), ("shared", 1)])).unwrap();
    let task = store.create_layer(ScopeLevel::Task, entries(&[("masked", 3)])).unwrap();
    let i = store.spawn(pin, vec![org.clone(), task], caps(["read"]), no_ctx()).unwrap().instance_id;

    let r = store.resolve_key(&i, "policy").unwrap();
    assert_eq!((r.value, r.provenance), (Some(Value::Integer(1)), Provenance::Layer(org)));

    store.write(&i, "shared", Some(2.into())).unwrap();
    let r = store.resolve_key(&i, "shared").unwrap();
    assert_eq!(r.value, Some(Value::Integer(2)));
    assert!(matches!(r.provenance, Provenance::Overlay(_)));

    store.write(&i, "masked", None).unwrap();
    let r = store.resolve_key(&i, "masked").unwrap();
    assert_eq!(r.value, None);
    assert!(matches!(r.provenance, Provenance::Tombstone(_)));

    let r = store.resolve_key(&i, "nowhere").unwrap();
    assert_eq!((r.value, r.provenance), (None, Provenance::Absent));
    assert_eq!(store.resolve_key(&i, "bad key").unwrap_err().code(), "INVALID_KEY");
}

#[test]
fn local_scope_beats_shared_regardless_of_binding_order() {
    let (store, pin) = setup();
    let task = store.create_layer(ScopeLevel::Task, entries(&[("k", 5)])).unwrap();
    let org = store.create_layer(ScopeLevel::Organization, entries(&[("k", 1)])).unwrap();
    let i = store.spawn(pin, vec![task.clone(), org], caps([]), no_ctx()).unwrap().instance_id;
    assert_eq!(store.resolve_key(&i, "k").unwrap().provenance, Provenance::Layer(task));
}

#[test]
fn later_binding_shadows_within_equal_scope() {
    let (store, pin) = setup();
    let first = store.create_layer(ScopeLevel::Session, entries(&[("k", 1), ("only_first", 1)])).unwrap();
    let second = store.create_layer(ScopeLevel::Session, entries(&[("k", 2)])).unwrap();
    let i = store.spawn(pin, vec![first.clone(), second.clone()], caps([]), no_ctx()).unwrap().instance_id;
    let flat = store.flatten(&i).unwrap();
    assert_eq!(flat["k"], (Value::Integer(2), Provenance::Layer(second)));
    assert_eq!(flat["only_first"], (Value::Integer(1), Provenance::Layer(first)));
    assert_eq!(flat.len(), 2);
}

#[test]
fn flatten_of_empty_instance_is_empty() {
    let (store, pin) = setup();
    let empty = store.create_layer(ScopeLevel::Organization, BTreeMap::new()).unwrap();
    let i = store.spawn(pin, vec![empty], caps([]), no_ctx()).unwrap().instance_id;
    assert!(store.flatten(&i).unwrap().is_empty());
}

#[test]
fn view_capabilities_fold_along_chain() {
    let (store, pin) = setup();
    let root = store.spawn(pin, vec![], caps(["read"]), no_ctx()).unwrap().instance_id;
    assert_eq!(store.resolve_view(&root).unwrap().effective_capabilities, caps(["read"]));

    let (store, pin) = setup();
    let root = store.spawn(pin, vec![], caps(["read", "write"]), no_ctx()).unwrap().instance_id;
    let child = store.derive(&root, vec![], caps(["read", "write"]), no_ctx()).unwrap().instance_id;
    let grandchild = store.derive(&child, vec![], caps(["read"]), no_ctx()).unwrap().instance_id;
    let view = store.resolve_view(&grandchild).unwrap();
    let mut folded: BTreeSet<String> = caps(["read", "write"]);
    for r in store.lineage_chain(&grandchild).unwrap() {
        folded = folded.intersection(&r.capability_restriction).cloned().collect();
    }
    assert_eq!(view.effective_capabilities, folded);
    assert_eq!(view.effective_capabilities, caps(["read"]));
}

#[test]
fn view_does_not_flatten_memory() {
    let (store, pin) = setup();
    let big: BTreeMap<String, Value> = (0..10_000).map(|i| (format!("k.{i}"), Value::Integer(i))).collect();
    let layer = store.create_layer(ScopeLevel::Account, big).unwrap();
    let i = store.spawn(pin, vec![layer], caps([]), no_ctx()).unwrap().instance_id;
    let before = store.counters();
    store.resolve_view(&i).unwrap();
    let delta = store.counters().since(&before);
    assert_eq!(delta.entry_reads, 0);
    assert_eq!(delta.entry_copies, 0);
}

#[test]
fn cache_status_lifecycle() {
    let (store, pin) = setup();
    let bound = store.create_layer(ScopeLevel::Organization, BTreeMap::new()).unwrap();
    let also_bound = store.create_layer(ScopeLevel::Task, BTreeMap::new()).unwrap();
    let unbound = store.create_layer(ScopeLevel::Organization, BTreeMap::new()).unwrap();
    let i = store.spawn(pin, vec![bound.clone(), also_bound.clone()], caps([]), no_ctx()).unwrap().instance_id;

    assert_eq!(store.cache_status(&i), CacheStatus::Uncached);
    let first = store.resolve_view(&i).unwrap();
    assert_eq!(store.cache_status(&i), CacheStatus::Fresh);
    assert_eq!(first.version_vector.keys().cloned().collect::<Vec<_>>(), vec![bound.clone(), also_bound.clone()]);
    assert_eq!(store.resolve_view(&i).unwrap().version_vector, first.version_vector);

    store.layer_write(&unbound, "x", Some(1.into())).unwrap();
    assert_eq!(store.cache_status(&i), CacheStatus::Fresh);

    store.layer_write(&bound, "x", Some(1.into())).unwrap();
    assert_eq!(store.cache_status(&i), CacheStatus::Stale(vec![bound.clone()]));

    let refreshed = store.resolve_view(&i).unwrap();
    assert_eq!(refreshed.version_vector[&bound], 1);
    assert!(refreshed.resolved_at_seq > first.resolved_at_seq);
    assert_eq!(store.cache_status(&i), CacheStatus::Fresh);
    assert_eq!(store.cache_status(&"I99999999".into()), CacheStatus::Uncached);
}

#[test]
fn resolution_is_deterministic_and_read_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let world = small_world(&mut rng, 4, 20);
    let hash = world.store.state_hash();
    let seq = world.store.last_seq();
    let snapshot = |s: &Store| -> Vec<_> {
        world
            .instances
            .iter()
            .flat_map(|i| world.keys.iter().map(move |k| (i.clone(), k.clone())))
            .map(|(i, k)| s.resolve_key(&i, &k).unwrap())
            .collect()
    };
    let first = snapshot(&world.store);
    for i in &world.instances {
        world.store.resolve_view(i).unwrap();
        world.store.flatten(i).unwrap();
    }
    assert_eq!(snapshot(&world.store), first);
    assert_eq!(world.store.state_hash(), hash);
    assert_eq!(world.store.last_seq(), seq);
}

fn check_world_against_oracle(seed: u64) -> Result<(), TestCaseError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let world = small_world(&mut rng, 4, 50);
    for instance in &world.instances {
        let oracle = oracle_flatten(&world.store, instance);
        let flat = world.store.flatten(instance).unwrap();
        for key in &world.keys {
            let got = world.store.resolve_key(instance, key).unwrap();
            let (want_value, want_prov) = oracle.get(key).cloned().unwrap_or((None, Provenance::Absent));
            prop_assert_eq!(&got.value, &want_value, "key {}", key);
            prop_assert_eq!(&got.provenance, &want_prov, "key {}", key);
            match &want_value {
                Some(v) => prop_assert_eq!(flat.get(key), Some(&(v.clone(), want_prov.clone()))),
                None => prop_assert!(!flat.contains_key(key)),
            }
        }
        prop_assert!(flat.keys().all(|k| world.keys.contains(k)));
    }
    Ok(())
}

proptest! {
    #[test]
    fn resolve_matches_brute_force_oracle(seed in any::<u64>()) {
        check_world_against_oracle(seed)?;
    }

    #[test]
    fn sibling_resolution_is_independent(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let world = small_world(&mut rng, 3, 10);
        let before: Vec<_> = world.instances.iter()
            .map(|i| world.keys.iter().map(|k| world.store.resolve_key(i, k).unwrap()).collect::<Vec<_>>())
            .collect();
        for i in world.instances.iter().rev() {
            for k in &world.keys {
                world.store.resolve_key(i, k).unwrap();
            }
            let _ = world.store.resolve_view(i);
        }
        let after: Vec<_> = world.instances.iter()
            .map(|i| world.keys.iter().map(|k| world.store.resolve_key(i, k).unwrap()).collect::<Vec<_>>())
            .collect();
        prop_assert_eq!(before, after);
    }
}
