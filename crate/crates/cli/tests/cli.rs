use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value as Json;

fn refspawn(store: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_refspawn"))
        .env_remove("AETHON_STORE")
        .arg("--store")
        .arg(store)
        .args(args)
        .output()
        .expect("binary runs")
}

/// Runs a command that must succeed and parses its stdout.
fn ok(store: &Path, args: &[&str]) -> Json {
    let out = refspawn(store, args);
    assert_eq!(out.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("json output")
}

fn journal_len(store: &Path) -> usize {
    std::fs::read_to_string(store.join("journal.ndjson")).map_or(0, |t| t.lines().count())
}

/// A definition, one layer and a root instance; returns the root's id.
fn seeded(store: &Path) -> String {
    ok(store, &["def", "register", "--instructions", "helper", "--cap", "read", "--cap", "write"]);
    ok(store, &["layer", "create", "--scope", "organization", "--entry", "policy=strict"]);
    let root = ok(store, &["instance", "spawn", "--def", "D00000001@1", "--layer", "L00000001"]);
    root["instance_id"].as_str().unwrap().to_string()
}

#[test]
fn spawn_prints_new_instance() {
    let tmp = tempfile::tempdir().unwrap();
    let root = seeded(tmp.path());
    assert_eq!(root, "I00000001");
    assert_eq!(journal_len(tmp.path()), 3);
}

#[test]
fn absent_key_is_not_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let root = seeded(tmp.path());
    let out = refspawn(tmp.path(), &["resolve", "key", "--instance", &root, "--key", "a.b"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), r#"{"provenance":"ABSENT","value":null}"#);
}

#[test]
fn retired_parent_maps_to_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let root = seeded(tmp.path());
    let child = ok(tmp.path(), &["instance", "derive", "--parent", &root, "--cap", "read"]);
    let child = child["instance_id"].as_str().unwrap();
    ok(tmp.path(), &["instance", "retire", "--instance", child]);
    let before = journal_len(tmp.path());
    let out = refspawn(tmp.path(), &["instance", "derive", "--parent", child]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("RETIRED_PARENT"));
    assert_eq!(journal_len(tmp.path()), before);
}

#[test]
fn widening_is_a_domain_error() {
    let tmp = tempfile::tempdir().unwrap();
    let root = seeded(tmp.path());
    let child = ok(tmp.path(), &["instance", "derive", "--parent", &root, "--cap", "read"]);
    let out = refspawn(
        tmp.path(),
        &["instance", "derive", "--parent", child["instance_id"].as_str().unwrap(), "--cap", "write"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("CAPABILITY_WIDENING"));
}

#[test]
fn usage_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [
        &["frobnicate"][..],
        &["instance", "spawn", "--bogus"],
        &["instance", "spawn", "--def", "not-a-pin"],
        &["layer", "create", "--scope", "galaxy"],
    ] {
        assert_eq!(refspawn(tmp.path(), args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn reads_leave_the_journal_untouched() {
    let tmp = tempfile::tempdir().unwrap();
    let root = seeded(tmp.path());
    ok(tmp.path(), &["instance", "write", "--instance", &root, "--key", "policy", "--delete"]);
    let child = ok(tmp.path(), &["instance", "derive", "--parent", &root]);
    let child = child["instance_id"].as_str().unwrap();
    let before = std::fs::read(tmp.path().join("journal.ndjson")).unwrap();
    for args in [
        &["resolve", "key", "--instance", child, "--key", "policy"][..],
        &["resolve", "view", "--instance", child],
        &["resolve", "flatten", "--instance", child],
        &["lineage", "show", "--instance", child],
        &["lineage", "diff", "--instance", child, "--ancestor", &root],
        &["def", "show", "--def", "D00000001"],
        &["layer", "show", "--layer", "L00000001"],
    ] {
        ok(tmp.path(), args);
    }
    assert_eq!(std::fs::read(tmp.path().join("journal.ndjson")).unwrap(), before);
}

#[test]
fn resolution_through_the_cli() {
    let tmp = tempfile::tempdir().unwrap();
    let root = seeded(tmp.path());
    ok(tmp.path(), &["instance", "write", "--instance", &root, "--key", "limit", "--value", "5"]);
    let child = ok(tmp.path(), &["instance", "derive", "--parent", &root, "--ctx", "task=review"]);
    let child = child["instance_id"].as_str().unwrap();
    let flat = ok(tmp.path(), &["resolve", "flatten", "--instance", child]);
    assert_eq!(flat["limit"]["value"], 5);
    assert_eq!(flat["policy"]["provenance"], "layer:L00000001");
    let view = ok(tmp.path(), &["resolve", "view", "--instance", child]);
    assert_eq!(view["role_instructions"], "helper");
    assert_eq!(view["context_bindings"]["task"], "review");
    let chain = ok(tmp.path(), &["lineage", "show", "--instance", child]);
    assert_eq!(chain.as_array().unwrap().len(), 2);
}

#[test]
fn snapshot_then_replay_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let store = tmp.path().join("live");
    let root = seeded(&store);
    ok(&store, &["instance", "write", "--instance", &root, "--key", "k", "--value", "[1,2]"]);
    ok(&store, &["layer", "write", "--layer", "L00000001", "--key", "policy", "--value", "lax"]);
    ok(&store, &["def", "publish", "--def", "D00000001", "--instructions", "helper v2"]);
    let snap = ok(&store, &["store", "snapshot"]);
    assert!(Path::new(snap["path"].as_str().unwrap()).exists());

    let copy = tmp.path().join("copy");
    let replayed = ok(&store, &["store", "replay", "--into", copy.to_str().unwrap()]);
    assert_eq!(replayed["state_hash"], snap["state_hash"]);
    let again = ok(&copy, &["store", "snapshot"]);
    assert_eq!(again["state_hash"], snap["state_hash"]);

    let prefix = tmp.path().join("prefix");
    let early = ok(&store, &["store", "replay", "--into", prefix.to_str().unwrap(), "--up-to", "3"]);
    assert_eq!(early["as_of_seq"], 3);
    assert_eq!(journal_len(&prefix), 3);

    let out = refspawn(&store, &["store", "replay", "--into", prefix.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn environment_selects_the_store() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_refspawn"))
        .env("AETHON_STORE", tmp.path())
        .args(["def", "register", "--instructions", "env"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(journal_len(tmp.path()), 1);
}

#[test]
fn a_held_store_is_locked() {
    let tmp = tempfile::tempdir().unwrap();
    let _held = refspawn::persistence::StoreDir::open(tmp.path()).unwrap();
    let out = refspawn(tmp.path(), &["def", "register", "--instructions", "x"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("STORE_LOCKED"));
}

#[test]
fn bench_writes_a_report() {
    let tmp = tempfile::tempdir().unwrap();
    let out_path = tmp.path().join("div.ndjson");
    let summary = ok(
        tmp.path(),
        &["bench", "memory-divergence", "--m", "50", "--n", "20", "--k", "3", "--out", out_path.to_str().unwrap()],
    );
    assert_eq!(summary["rows"], 1);
    let row: Json = serde_json::from_str(std::fs::read_to_string(&out_path).unwrap().trim()).unwrap();
    assert_eq!(row["overlay_entries_total"], 60);

    let scaling = tmp.path().join("scaling.ndjson");
    ok(
        tmp.path(),
        &[
            "bench",
            "spawn-scaling",
            "--values",
            "1,1000",
            "--repetitions",
            "10",
            "--baseline-repetitions",
            "2",
            "--out",
            scaling.to_str().unwrap(),
        ],
    );
    assert_eq!(std::fs::read_to_string(&scaling).unwrap().lines().count(), 4);
    let bad = refspawn(tmp.path(), &["bench", "spawn-scaling", "--values", "1,10", "--out", scaling.to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(1));
}
