//! Execution-time composition of a reference into an effective view.
//!
//! Precedence for a key, first match wins:
//!
//! 1. the overlay chain, most-derived overlay first (a tombstone yields absence);
//! 2. bound layers from the most local scope to the most shared; among layers
//!    of equal scope the later binding shadows the earlier one;
//! 3. absent.
//!
//! [`resolve_view`] does not flatten memory. Keys are resolved lazily through
//! [`resolve_key`]; [`flatten`] is the eager, Θ(entries) path.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::ids::{InstanceId, LayerId, OverlayId};
use crate::memory::{ChainHit, MemoryStore};
use crate::reference::InstanceReference;
use crate::registry::{CapabilitySet, DefinitionPin};
use crate::state::State;
use crate::value::{validate_key, Value};

/// Which source decided a key.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Provenance {
    Overlay(OverlayId),
    Tombstone(OverlayId),
    Layer(LayerId),
    Absent,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Overlay(o) => write!(f, "overlay:{o}"),
            Provenance::Tombstone(o) => write!(f, "tombstone:{o}"),
            Provenance::Layer(l) => write!(f, "layer:{l}"),
            Provenance::Absent => f.write_str("ABSENT"),
        }
    }
}

impl FromStr for Provenance {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        if s == "ABSENT" {
            return Ok(Provenance::Absent);
        }
        match s.split_once(':') {
            Some(("overlay", id)) => Ok(Provenance::Overlay(id.into())),
            Some(("tombstone", id)) => Ok(Provenance::Tombstone(id.into())),
            Some(("layer", id)) => Ok(Provenance::Layer(id.into())),
            _ => Err(format!("bad provenance {s:?}")),
        }
    }
}

impl Serialize for Provenance {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Provenance {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyResolution {
    pub value: Option<Value>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectiveView {
    pub instance_id: InstanceId,
    pub definition_pin: DefinitionPin,
    pub role_instructions: String,
    pub effective_capabilities: CapabilitySet,
    pub context_bindings: BTreeMap<String, Value>,
    /// Version of each bound layer observed while resolving.
    pub version_vector: BTreeMap<LayerId, u64>,
    pub resolved_at_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "changed_layers", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CacheStatus {
    Fresh,
    Stale(Vec<LayerId>),
    Uncached,
}

/// Bound layers in lookup order: most local scope first, later binding first
/// within a scope.
pub fn precedence_order<'a>(memory: &MemoryStore, bindings: &'a [LayerId]) -> Result<Vec<&'a LayerId>> {
    let mut ranked = Vec::with_capacity(bindings.len());
    for (pos, id) in bindings.iter().enumerate() {
        ranked.push((memory.layer(id)?.scope, pos, id));
    }
    ranked.sort_by_key(|&(scope, pos, _)| std::cmp::Reverse((scope, pos)));
    Ok(ranked.into_iter().map(|(_, _, id)| id).collect())
}

pub fn resolve_key(state: &State, instance: &InstanceId, key: &str) -> Result<KeyResolution> {
    let reference = state.refs.get(instance)?;
    validate_key(key)?;
    resolve_in(&state.memory, reference, key)
}

fn resolve_in(memory: &MemoryStore, reference: &InstanceReference, key: &str) -> Result<KeyResolution> {
    match memory.chain_read(&reference.overlay, key)? {
        ChainHit::Write { value, overlay } => {
            return Ok(KeyResolution { value: Some(value), provenance: Provenance::Overlay(overlay) })
        }
        ChainHit::Tombstone { overlay } => {
            return Ok(KeyResolution { value: None, provenance: Provenance::Tombstone(overlay) })
        }
        ChainHit::Miss => {}
    }
    for layer in precedence_order(memory, &reference.layer_bindings)? {
        if let Some(v) = memory.layer_get(layer, key)? {
            return Ok(KeyResolution { value: Some(v.clone()), provenance: Provenance::Layer(layer.clone()) });
        }
    }
    Ok(KeyResolution { value: None, provenance: Provenance::Absent })
}

/// Builds the effective view. `resolved_at_seq` is the journal position the
/// state reflects.
pub fn resolve_view(state: &State, instance: &InstanceId, resolved_at_seq: u64) -> Result<EffectiveView> {
    let reference = state.refs.get(instance)?;
    if reference.retired {
        return Err(Error::RetiredInstance(instance.to_string()));
    }
    let definition = state.registry.get_pin(&reference.definition_pin)?;
    state.memory.counters().definition_read(definition.content.role_instructions.len() as u64);
    let effective_capabilities = state.refs.effective_capabilities(&state.registry, instance)?;
    let context_bindings = state.refs.effective_context(instance)?;
    let mut version_vector = BTreeMap::new();
    for layer in &reference.layer_bindings {
        version_vector.insert(layer.clone(), state.memory.layer_version(layer)?);
    }
    Ok(EffectiveView {
        instance_id: instance.clone(),
        definition_pin: reference.definition_pin.clone(),
        role_instructions: definition.content.role_instructions.clone(),
        effective_capabilities,
        context_bindings,
        version_vector,
        resolved_at_seq,
    })
}

/// Every visible key with its value and provenance. Cost is proportional to
/// the number of inherited entries.
pub fn flatten(state: &State, instance: &InstanceId) -> Result<BTreeMap<String, (Value, Provenance)>> {
    let reference = state.refs.get(instance)?;
    let memory = &state.memory;
    let mut out = BTreeMap::new();
    for layer_id in precedence_order(memory, &reference.layer_bindings)?.into_iter().rev() {
        for (k, v) in &memory.layer(layer_id)?.entries {
            memory.counters().entry_read();
            out.insert(k.clone(), (v.clone(), Provenance::Layer(layer_id.clone())));
        }
    }
    for overlay in memory.chain(&reference.overlay)?.into_iter().rev() {
        for (k, v) in &overlay.writes {
            memory.counters().entry_read();
            out.insert(k.clone(), (v.clone(), Provenance::Overlay(overlay.overlay_id.clone())));
        }
        for k in &overlay.tombstones {
            memory.counters().entry_read();
            out.remove(k);
        }
    }
    Ok(out)
}

/// Compares a cached view's version vector against current layer versions.
pub fn cache_status(state: &State, cached: Option<&EffectiveView>) -> CacheStatus {
    let Some(view) = cached else {
        return CacheStatus::Uncached;
    };
    let changed: Vec<LayerId> = view
        .version_vector
        .iter()
        .filter(|(layer, seen)| state.memory.layer_version(layer).map_or(true, |now| now > **seen))
        .map(|(layer, _)| layer.clone())
        .collect();
    if changed.is_empty() {
        CacheStatus::Fresh
    } else {
        CacheStatus::Stale(changed)
    }
}

/// Whole-view cache keyed by instance.
#[derive(Debug, Default)]
pub struct ViewCache {
    views: HashMap<InstanceId, EffectiveView>,
}

impl ViewCache {
    pub fn get(&self, id: &InstanceId) -> Option<&EffectiveView> {
        self.views.get(id)
    }

    pub fn put(&mut self, view: EffectiveView) {
        self.views.insert(view.instance_id.clone(), view);
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }
}
