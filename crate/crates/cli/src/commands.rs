use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use refspawn::bench::{run_memory_divergence, run_spawn_scaling, BenchReport, BenchWorkloadSpec, ScalingConfig};
use refspawn::canonical::to_canonical_string;
use refspawn::persistence::StoreDir;
use refspawn::{DefinitionContent, DefinitionId, DefinitionPin, Error, InstanceId, LayerId, Result, Store, Value};
use serde_json::json;

use crate::{
    BenchCommand, Cli, Command, DefCommand, DefinitionArgs, InstanceCommand, LayerCommand, LineageCommand,
    ResolveCommand, ScopeArgs, StoreCommand, Sweep, WorkloadArgs,
};

/// Renders any serializable value in the selected output style.
macro_rules! render {
    ($cli:expr, $value:expr) => {
        if $cli.human {
            serde_json::to_string_pretty($value).expect("serializable")
        } else {
            to_canonical_string($value)
        }
    };
}

/// An opened store. The directory lock is held until this is dropped.
struct Opened {
    dir: StoreDir,
    store: Store,
}

fn open(path: &Path) -> Result<Opened> {
    let dir = StoreDir::open(path)?;
    let store = Store::replay(dir.read_journal()?, None)?.with_sink(Box::new(dir.sink()?));
    Ok(Opened { dir, store })
}

pub fn run(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::Bench(cmd) => bench(cli, cmd),
        command => {
            let opened = open(&cli.store)?;
            match command {
                Command::Def(cmd) => def(cli, &opened.store, cmd),
                Command::Layer(cmd) => layer(cli, &opened.store, cmd),
                Command::Instance(cmd) => instance(cli, &opened.store, cmd),
                Command::Resolve(cmd) => resolve(cli, &opened.store, cmd),
                Command::Lineage(cmd) => lineage(cli, &opened.store, cmd),
                Command::Store(cmd) => store_cmd(cli, &opened, cmd),
                Command::Bench(_) => unreachable!("handled above"),
            }
        }
    }
}

fn content(args: &DefinitionArgs) -> DefinitionContent {
    DefinitionContent {
        role_instructions: args.instructions.clone(),
        capabilities: args.caps.iter().cloned().collect(),
        interface_contracts: args.contracts.iter().cloned().collect(),
        metadata: args.metadata.iter().cloned().collect(),
    }
}

fn parse_value(raw: &str) -> Result<Value> {
    Value::parse_lenient(raw)
}

fn value_map(pairs: &[(String, String)]) -> Result<BTreeMap<String, Value>> {
    pairs.iter().map(|(k, v)| Ok((k.clone(), parse_value(v)?))).collect()
}

fn write_value(value: &Option<String>, delete: bool) -> Result<Option<Value>> {
    match (value, delete) {
        (_, true) => Ok(None),
        (Some(raw), false) => parse_value(raw).map(Some),
        (None, false) => Err(Error::InvalidValue("a value or --delete is required".into())),
    }
}

fn def(cli: &Cli, store: &Store, cmd: &DefCommand) -> Result<String> {
    match cmd {
        DefCommand::Register(args) => {
            let pin = store.register_definition(content(args))?;
            Ok(render!(cli, &pin))
        }
        DefCommand::Publish { definition, content: args } => {
            let id = DefinitionId::from(definition.as_str());
            let version = store.publish_version(&id, content(args))?;
            Ok(render!(cli, &DefinitionPin { definition_id: id, version }))
        }
        DefCommand::Show { definition } => {
            let pin = match definition.parse::<DefinitionPin>() {
                Ok(pin) => pin,
                Err(_) if !definition.contains('@') => {
                    let id = DefinitionId::from(definition.as_str());
                    let version = store.read().registry.latest_version(&id)?;
                    DefinitionPin { definition_id: id, version }
                }
                Err(e) => return Err(Error::UnknownDefinition(e)),
            };
            let record = store.get_definition(&pin.definition_id, pin.version)?;
            Ok(render!(cli, &record))
        }
    }
}

fn layer(cli: &Cli, store: &Store, cmd: &LayerCommand) -> Result<String> {
    match cmd {
        LayerCommand::Create { scope, entries } => {
            let id = store.create_layer(*scope, value_map(entries)?)?;
            Ok(render!(cli, &json!({ "layer_id": id })))
        }
        LayerCommand::Write { layer, key, value, delete } => {
            let id = LayerId::from(layer.as_str());
            let version = store.layer_write(&id, key, write_value(value, *delete)?)?;
            Ok(render!(cli, &json!({ "layer_id": id, "layer_version": version })))
        }
        LayerCommand::Show { layer } => Ok(render!(cli, &store.layer(&LayerId::from(layer.as_str()))?)),
    }
}

/// `None` when no `--cap` was given, meaning "inherit the allowed set".
fn restriction(scope: &ScopeArgs) -> Option<BTreeSet<String>> {
    if scope.no_caps {
        Some(BTreeSet::new())
    } else if scope.caps.is_empty() {
        None
    } else {
        Some(scope.caps.iter().cloned().collect())
    }
}

fn layers(scope: &ScopeArgs) -> Vec<LayerId> {
    scope.layers.iter().map(|l| LayerId::from(l.as_str())).collect()
}

fn instance(cli: &Cli, store: &Store, cmd: &InstanceCommand) -> Result<String> {
    match cmd {
        InstanceCommand::Spawn { pin, scope } => {
            let caps = match restriction(scope) {
                Some(c) => c,
                None => store.get_definition(&pin.definition_id, pin.version)?.content.capabilities,
            };
            let r = store.spawn(pin.clone(), layers(scope), caps, value_map(&scope.context)?)?;
            Ok(render!(cli, &r))
        }
        InstanceCommand::Derive { parent, scope } => {
            let parent = InstanceId::from(parent.as_str());
            let caps = match restriction(scope) {
                Some(c) => c,
                None => store.instance(&parent)?.capability_restriction,
            };
            let r = store.derive(&parent, layers(scope), caps, value_map(&scope.context)?)?;
            Ok(render!(cli, &r))
        }
        InstanceCommand::Retire { instance } => {
            let id = InstanceId::from(instance.as_str());
            store.retire(&id)?;
            Ok(render!(cli, &json!({ "instance_id": id, "retired": true })))
        }
        InstanceCommand::Write { instance, key, value, delete } => {
            let id = InstanceId::from(instance.as_str());
            store.write(&id, key, write_value(value, *delete)?)?;
            Ok(render!(cli, &store.resolve_key(&id, key)?))
        }
        InstanceCommand::Compact { instance } => {
            let id = InstanceId::from(instance.as_str());
            let folded = store.compact(&id)?;
            Ok(render!(cli, &json!({ "instance_id": id, "folded": folded })))
        }
    }
}

fn resolve(cli: &Cli, store: &Store, cmd: &ResolveCommand) -> Result<String> {
    match cmd {
        ResolveCommand::Key { instance, key } => {
            Ok(render!(cli, &store.resolve_key(&InstanceId::from(instance.as_str()), key)?))
        }
        ResolveCommand::View { instance } => {
            Ok(render!(cli, &store.resolve_view(&InstanceId::from(instance.as_str()))?))
        }
        ResolveCommand::Flatten { instance } => {
            let flat = store.flatten(&InstanceId::from(instance.as_str()))?;
            let out: BTreeMap<String, serde_json::Value> = flat
                .into_iter()
                .map(|(k, (value, provenance))| (k, json!({ "value": value, "provenance": provenance })))
                .collect();
            Ok(render!(cli, &out))
        }
    }
}

fn lineage(cli: &Cli, store: &Store, cmd: &LineageCommand) -> Result<String> {
    match cmd {
        LineageCommand::Show { instance } => {
            Ok(render!(cli, &store.lineage_chain(&InstanceId::from(instance.as_str()))?))
        }
        LineageCommand::Diff { instance, ancestor } => {
            let report =
                store.diff_from_ancestor(&InstanceId::from(instance.as_str()), &InstanceId::from(ancestor.as_str()))?;
            Ok(render!(cli, &report))
        }
    }
}

fn store_cmd(cli: &Cli, opened: &Opened, cmd: &StoreCommand) -> Result<String> {
    match cmd {
        StoreCommand::Snapshot => {
            let snapshot = opened.store.snapshot();
            let path = opened.dir.write_snapshot(&snapshot)?;
            Ok(render!(
                cli,
                &json!({
                    "as_of_seq": snapshot.as_of_seq,
                    "path": path.display().to_string(),
                    "state_hash": snapshot.state_hash,
                })
            ))
        }
        StoreCommand::Replay { into, up_to } => {
            let target = StoreDir::open(into)?;
            if !target.is_fresh()? {
                return Err(Error::StorageFailure(format!("{} already holds a journal", into.display())));
            }
            let mut records = opened.store.journal_records();
            let replayed = Store::replay(records.clone(), *up_to)?;
            records.truncate(replayed.last_seq() as usize);
            target.write_journal(&records)?;
            let snapshot = replayed.snapshot();
            target.write_snapshot(&snapshot)?;
            Ok(render!(
                cli,
                &json!({
                    "as_of_seq": snapshot.as_of_seq,
                    "into": into.display().to_string(),
                    "state_hash": snapshot.state_hash,
                })
            ))
        }
    }
}

fn workload(args: &WorkloadArgs) -> BenchWorkloadSpec {
    BenchWorkloadSpec { d: args.d, m: args.m, b: args.b, seed: args.seed, ..Default::default() }
}

fn write_report(cli: &Cli, report: &BenchReport, out: &Path) -> Result<String> {
    std::fs::write(out, report.to_lines()).map_err(|e| Error::StorageFailure(format!("{}: {e}", out.display())))?;
    if cli.human {
        Ok(report.human_summary())
    } else {
        Ok(to_canonical_string(&json!({ "out": out.display().to_string(), "rows": report.rows.len() })))
    }
}

fn bench(cli: &Cli, cmd: &BenchCommand) -> Result<String> {
    match cmd {
        BenchCommand::SpawnScaling { workload: args, sweep, values, repetitions, baseline_repetitions } => {
            let base = workload(args);
            let specs: Vec<BenchWorkloadSpec> = values
                .iter()
                .map(|&v| match sweep {
                    Sweep::D => BenchWorkloadSpec { d: v, ..base },
                    Sweep::M => BenchWorkloadSpec { m: v, ..base },
                    Sweep::B => BenchWorkloadSpec { b: v, ..base },
                })
                .collect();
            let config = ScalingConfig { repetitions: *repetitions, baseline_repetitions: *baseline_repetitions };
            write_report(cli, &run_spawn_scaling(&specs, config)?, &args.out)
        }
        BenchCommand::MemoryDivergence { workload: args, n, k, parallel } => {
            let spec = BenchWorkloadSpec { n_descendants: *n, writes_per_descendant: *k, ..workload(args) };
            write_report(cli, &run_memory_divergence(&spec, *parallel)?, &args.out)
        }
    }
}
