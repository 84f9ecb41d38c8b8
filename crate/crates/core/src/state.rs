//! The complete mutable state of a store and the operations that change it.
//!
//! Every mutation is an [`Op`]. Live calls and journal replay go through the
//! same [`State::apply`], so a journal reproduces the state exactly.
//! Identifiers are carried in the payloads and reused on replay.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::canonical::canonical_hash;
use crate::counters::Counters;
use crate::error::{Error, Result};
use crate::ids::{DefinitionId, IdCounters, InstanceId, LayerId, OverlayId};
use crate::memory::{MemoryLayer, MemoryStore, Overlay, ScopeLevel};
use crate::reference::{InstanceReference, ReferenceTable};
use crate::registry::{CapabilitySet, DefinitionContent, DefinitionPin, DefinitionRegistry, DefinitionVersionRecord};
use crate::value::Value;

/// A journaled mutation. Serialized adjacently tagged as `op` + `payload`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", content = "payload", rename_all = "snake_case")]
pub enum Op {
    DefRegister {
        definition_id: DefinitionId,
        content: DefinitionContent,
    },
    DefPublish {
        definition_id: DefinitionId,
        version: u64,
        content: DefinitionContent,
    },
    LayerCreate {
        layer_id: LayerId,
        scope: ScopeLevel,
        entries: BTreeMap<String, Value>,
    },
    LayerWrite {
        layer_id: LayerId,
        key: String,
        value: Option<Value>,
        layer_version: u64,
    },
    InstanceSpawn {
        instance_id: InstanceId,
        overlay_id: OverlayId,
        definition_pin: DefinitionPin,
        layer_bindings: Vec<LayerId>,
        capability_restriction: CapabilitySet,
        context_bindings: BTreeMap<String, Value>,
    },
    InstanceDerive {
        instance_id: InstanceId,
        overlay_id: OverlayId,
        parent: InstanceId,
        extra_layers: Vec<LayerId>,
        capability_restriction: CapabilitySet,
        context_bindings: BTreeMap<String, Value>,
    },
    OverlayApply {
        instance_id: InstanceId,
        overlay_id: OverlayId,
        key: String,
        value: Option<Value>,
    },
    InstanceRetire {
        instance_id: InstanceId,
    },
    OverlayCompact {
        instance_id: InstanceId,
        overlay_id: OverlayId,
        folded: Vec<OverlayId>,
    },
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::DefRegister { .. } => "def_register",
            Op::DefPublish { .. } => "def_publish",
            Op::LayerCreate { .. } => "layer_create",
            Op::LayerWrite { .. } => "layer_write",
            Op::InstanceSpawn { .. } => "instance_spawn",
            Op::InstanceDerive { .. } => "instance_derive",
            Op::OverlayApply { .. } => "overlay_apply",
            Op::InstanceRetire { .. } => "instance_retire",
            Op::OverlayCompact { .. } => "overlay_compact",
        }
    }
}

/// Result of applying an op.
#[derive(Debug, Clone, PartialEq)]
pub enum Applied {
    Definition(DefinitionPin),
    Layer(LayerId),
    LayerVersion(u64),
    Instance(InstanceReference),
    Done,
    Compacted(Vec<OverlayId>),
}

#[derive(Debug)]
pub struct State {
    pub registry: DefinitionRegistry,
    pub memory: MemoryStore,
    pub refs: ReferenceTable,
    pub ids: IdCounters,
}

impl State {
    pub fn new(counters: Arc<Counters>) -> Self {
        State {
            registry: DefinitionRegistry::new(),
            memory: MemoryStore::new(counters),
            refs: ReferenceTable::new(),
            ids: IdCounters::default(),
        }
    }

    /// Validates `op` against the current state without changing it.
    pub fn check(&self, op: &Op) -> Result<()> {
        match op {
            Op::DefRegister { definition_id, content } => {
                content.validate()?;
                if self.registry.contains(definition_id) {
                    return Err(Error::MalformedRecord(format!("definition {definition_id} already exists")));
                }
            }
            Op::DefPublish { definition_id, version, content } => {
                content.validate()?;
                let next = self.registry.next_version(definition_id)?;
                if *version != next {
                    return Err(Error::MalformedRecord(format!(
                        "publish of {definition_id} claims version {version}, next is {next}"
                    )));
                }
            }
            Op::LayerCreate { layer_id, entries, .. } => {
                MemoryStore::check_entries(entries)?;
                if self.memory.has_layer(layer_id) {
                    return Err(Error::MalformedRecord(format!("layer {layer_id} already exists")));
                }
            }
            Op::LayerWrite { layer_id, key, value, layer_version } => {
                self.memory.check_layer_write(layer_id, key, value.as_ref())?;
                let next = self.memory.layer_version(layer_id)? + 1;
                if *layer_version != next {
                    return Err(Error::MalformedRecord(format!(
                        "write to {layer_id} claims version {layer_version}, next is {next}"
                    )));
                }
            }
            Op::InstanceSpawn { .. } | Op::InstanceDerive { .. } => {
                let planned = self.plan_instance(op)?;
                if self.refs.contains(&planned.instance_id) {
                    return Err(Error::MalformedRecord(format!("instance {} already exists", planned.instance_id)));
                }
                if self.memory.overlay(&planned.overlay).is_ok()
                    || self.memory.compacted().contains_key(&planned.overlay)
                {
                    return Err(Error::MalformedRecord(format!("overlay {} already exists", planned.overlay)));
                }
            }
            Op::OverlayApply { instance_id, overlay_id, key, value } => {
                let r = self.refs.get(instance_id)?;
                if r.retired {
                    return Err(Error::RetiredInstance(instance_id.to_string()));
                }
                if &r.overlay != overlay_id {
                    return Err(Error::MalformedRecord(format!("{overlay_id} is not the overlay of {instance_id}")));
                }
                self.memory.check_overlay_apply(overlay_id, key, value.as_ref())?;
            }
            Op::InstanceRetire { instance_id } => self.refs.check_retire(instance_id)?,
            Op::OverlayCompact { instance_id, overlay_id, folded } => {
                let r = self.refs.get(instance_id)?;
                if &r.overlay != overlay_id {
                    return Err(Error::MalformedRecord(format!("{overlay_id} is not the overlay of {instance_id}")));
                }
                let eligible = self.memory.compactable(overlay_id, |i| self.refs.is_retired(i))?;
                if !folded.is_empty() && eligible.starts_with(folded) {
                    return Ok(());
                }
                return Err(Error::MalformedRecord(format!("overlays {folded:?} cannot be folded into {overlay_id}")));
            }
        }
        Ok(())
    }

    fn plan_instance(&self, op: &Op) -> Result<InstanceReference> {
        match op {
            Op::InstanceSpawn {
                instance_id,
                overlay_id,
                definition_pin,
                layer_bindings,
                capability_restriction,
                context_bindings,
            } => self.refs.plan_spawn(
                &self.registry,
                &self.memory,
                (instance_id.clone(), overlay_id.clone()),
                definition_pin.clone(),
                layer_bindings.clone(),
                capability_restriction.clone(),
                context_bindings.clone(),
            ),
            Op::InstanceDerive {
                instance_id,
                overlay_id,
                parent,
                extra_layers,
                capability_restriction,
                context_bindings,
            } => self.refs.plan_derive(
                &self.memory,
                (instance_id.clone(), overlay_id.clone()),
                parent,
                extra_layers.clone(),
                capability_restriction.clone(),
                context_bindings.clone(),
            ),
            _ => unreachable!("not an instance-creating op"),
        }
    }

    /// Validates and applies `op`, recorded at journal position `seq`.
    pub fn apply(&mut self, op: &Op, seq: u64) -> Result<Applied> {
        self.check(op)?;
        let applied = match op {
            Op::DefRegister { definition_id, content } => {
                self.ids.observe_definition(definition_id);
                Applied::Definition(self.registry.register(definition_id.clone(), content.clone())?)
            }
            Op::DefPublish { definition_id, content, .. } => {
                let version = self.registry.publish(definition_id, content.clone())?;
                Applied::Definition(DefinitionPin { definition_id: definition_id.clone(), version })
            }
            Op::LayerCreate { layer_id, scope, entries } => {
                self.ids.observe_layer(layer_id);
                self.memory.create_layer(layer_id.clone(), *scope, entries.clone())?;
                Applied::Layer(layer_id.clone())
            }
            Op::LayerWrite { layer_id, key, value, .. } => {
                Applied::LayerVersion(self.memory.layer_write(layer_id, key, value.clone())?)
            }
            Op::InstanceSpawn { .. } | Op::InstanceDerive { .. } => {
                let mut reference = self.plan_instance(op)?;
                reference.created_seq = seq;
                self.ids.observe_instance(&reference.instance_id);
                self.ids.observe_overlay(&reference.overlay);
                self.refs.insert(&mut self.memory, reference.clone())?;
                Applied::Instance(reference)
            }
            Op::OverlayApply { overlay_id, key, value, .. } => {
                self.memory.overlay_apply(overlay_id, key, value.clone())?;
                Applied::Done
            }
            Op::InstanceRetire { instance_id } => {
                self.refs.retire(instance_id)?;
                Applied::Done
            }
            Op::OverlayCompact { overlay_id, folded, .. } => {
                self.memory.compact(overlay_id, folded)?;
                Applied::Compacted(folded.clone())
            }
        };
        Ok(applied)
    }

    /// Canonical full-state document, every collection sorted by identifier.
    pub fn to_doc(&self) -> StateDoc {
        let definitions = self.registry.records().map(|r| (**r).clone()).collect();
        let mut layers: Vec<MemoryLayer> = self.memory.layers().cloned().collect();
        layers.sort_by(|a, b| a.layer_id.cmp(&b.layer_id));
        let mut overlays: Vec<Overlay> = self.memory.overlays().cloned().collect();
        overlays.sort_by(|a, b| a.overlay_id.cmp(&b.overlay_id));
        let mut instances: Vec<InstanceReference> = self.refs.iter().cloned().collect();
        instances.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
        let lineage = instances.iter().filter_map(|r| r.parent.clone().map(|p| (r.instance_id.clone(), p))).collect();
        StateDoc {
            definitions,
            layers,
            overlays,
            compacted: self.memory.compacted().clone(),
            instances,
            lineage,
            ids: self.ids.clone(),
        }
    }

    pub fn state_hash(&self) -> String {
        self.to_doc().hash()
    }

    pub fn from_doc(doc: StateDoc, counters: Arc<Counters>) -> Result<Self> {
        let derived: Vec<(InstanceId, InstanceId)> =
            doc.instances.iter().filter_map(|r| r.parent.clone().map(|p| (r.instance_id.clone(), p))).collect();
        if derived != doc.lineage {
            return Err(Error::MalformedRecord("lineage edges disagree with instance parents".into()));
        }
        Ok(State {
            registry: DefinitionRegistry::from_records(doc.definitions)?,
            memory: MemoryStore::from_parts(counters, doc.layers, doc.overlays, doc.compacted)?,
            refs: ReferenceTable::from_references(doc.instances)?,
            ids: doc.ids,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateDoc {
    pub definitions: Vec<DefinitionVersionRecord>,
    pub layers: Vec<MemoryLayer>,
    pub overlays: Vec<Overlay>,
    pub compacted: BTreeMap<OverlayId, OverlayId>,
    pub instances: Vec<InstanceReference>,
    /// child -> parent
    pub lineage: Vec<(InstanceId, InstanceId)>,
    pub ids: IdCounters,
}

impl StateDoc {
    pub fn hash(&self) -> String {
        canonical_hash(self)
    }
}
