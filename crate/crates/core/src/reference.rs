//! Instance references and their lineage.
//!
//! A reference is a handful of identifiers: a definition pin, an ordered list
//! of bound layers, an overlay, an allow-list of capabilities and a few
//! context bindings. Creating one validates the arguments it was given and
//! allocates an empty overlay; it never reads layer entries or definition
//! bodies.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::{InstanceId, LayerId, OverlayId};
use crate::memory::MemoryStore;
use crate::registry::{CapabilitySet, DefinitionPin, DefinitionRegistry};
use crate::value::{validate_key, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceReference {
    pub instance_id: InstanceId,
    pub definition_pin: DefinitionPin,
    pub parent: Option<InstanceId>,
    /// Binding order is shadowing order among layers of equal scope.
    pub layer_bindings: Vec<LayerId>,
    pub overlay: OverlayId,
    pub capability_restriction: CapabilitySet,
    pub context_bindings: BTreeMap<String, Value>,
    pub created_seq: u64,
    pub retired: bool,
}

/// What an instance changed relative to one of its ancestors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub ancestor: Option<InstanceId>,
    pub instance: Option<InstanceId>,
    /// Net overlay writes introduced between the ancestor and the instance.
    pub writes: BTreeMap<String, Value>,
    /// Net overlay tombstones introduced between the ancestor and the instance.
    pub tombstones: BTreeSet<String>,
    pub extra_layers: Vec<LayerId>,
    /// Capabilities the ancestor held that the instance no longer holds.
    pub capability_narrowings: CapabilitySet,
    /// Context bindings that are new or changed relative to the ancestor.
    pub context_additions: BTreeMap<String, Value>,
}

impl DivergenceReport {
    pub fn is_empty(&self) -> bool {
        self.writes.is_empty()
            && self.tombstones.is_empty()
            && self.extra_layers.is_empty()
            && self.capability_narrowings.is_empty()
            && self.context_additions.is_empty()
    }
}

#[derive(Debug, Default, Clone)]
pub struct ReferenceTable {
    instances: HashMap<InstanceId, InstanceReference>,
    live_children: HashMap<InstanceId, u64>,
}

impl ReferenceTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: &InstanceId) -> Result<&InstanceReference> {
        self.instances.get(id).ok_or_else(|| Error::UnknownInstance(id.to_string()))
    }

    pub fn contains(&self, id: &InstanceId) -> bool {
        self.instances.contains_key(id)
    }

    pub fn is_retired(&self, id: &InstanceId) -> bool {
        self.instances.get(id).is_some_and(|r| r.retired)
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &InstanceReference> {
        self.instances.values()
    }

    /// Validates a root reference and returns it, unassigned to any table.
    #[allow(clippy::too_many_arguments)]
    pub fn plan_spawn(
        &self,
        registry: &DefinitionRegistry,
        memory: &MemoryStore,
        ids: (InstanceId, OverlayId),
        pin: DefinitionPin,
        layer_bindings: Vec<LayerId>,
        capability_restriction: CapabilitySet,
        context_bindings: BTreeMap<String, Value>,
    ) -> Result<InstanceReference> {
        let definition = registry.get_pin(&pin)?;
        check_layers(memory, &layer_bindings)?;
        check_context(&context_bindings)?;
        let widened: Vec<String> =
            capability_restriction.iter().filter(|c| !definition.content.capabilities.contains(*c)).cloned().collect();
        if !widened.is_empty() {
            return Err(Error::CapabilityWidening(widened));
        }
        let (instance_id, overlay) = ids;
        Ok(InstanceReference {
            instance_id,
            definition_pin: pin,
            parent: None,
            layer_bindings,
            overlay,
            capability_restriction,
            context_bindings,
            created_seq: 0,
            retired: false,
        })
    }

    /// Validates a child of `parent`. The child pins the parent's definition
    /// version and appends `extra_layers` after the parent's bindings.
    pub fn plan_derive(
        &self,
        memory: &MemoryStore,
        ids: (InstanceId, OverlayId),
        parent: &InstanceId,
        extra_layers: Vec<LayerId>,
        capability_restriction: CapabilitySet,
        context_bindings: BTreeMap<String, Value>,
    ) -> Result<InstanceReference> {
        let p = self.get(parent)?;
        if p.retired {
            return Err(Error::RetiredParent(parent.to_string()));
        }
        check_layers(memory, &extra_layers)?;
        check_context(&context_bindings)?;
        // The parent's own restriction is its effective set: every reference
        // is validated against its parent's at creation.
        let widened: Vec<String> =
            capability_restriction.iter().filter(|c| !p.capability_restriction.contains(*c)).cloned().collect();
        if !widened.is_empty() {
            return Err(Error::CapabilityWidening(widened));
        }
        let mut layer_bindings = Vec::with_capacity(p.layer_bindings.len() + extra_layers.len());
        layer_bindings.extend(p.layer_bindings.iter().cloned());
        layer_bindings.extend(extra_layers);
        let (instance_id, overlay) = ids;
        Ok(InstanceReference {
            instance_id,
            definition_pin: p.definition_pin.clone(),
            parent: Some(parent.clone()),
            layer_bindings,
            overlay,
            capability_restriction,
            context_bindings,
            created_seq: 0,
            retired: false,
        })
    }

    /// Inserts a planned reference and creates its empty overlay, chained to
    /// the parent's overlay for derived instances.
    pub fn insert(&mut self, memory: &mut MemoryStore, reference: InstanceReference) -> Result<()> {
        if self.instances.contains_key(&reference.instance_id) {
            return Err(Error::MalformedRecord(format!("instance {} already exists", reference.instance_id)));
        }
        let parent_overlay = match &reference.parent {
            Some(p) => Some(self.get(p)?.overlay.clone()),
            None => None,
        };
        memory.create_overlay(reference.overlay.clone(), reference.instance_id.clone(), parent_overlay)?;
        if let Some(p) = &reference.parent {
            *self.live_children.entry(p.clone()).or_default() += 1;
        }
        self.instances.insert(reference.instance_id.clone(), reference);
        Ok(())
    }

    pub fn check_retire(&self, id: &InstanceId) -> Result<()> {
        let r = self.get(id)?;
        if r.retired {
            return Err(Error::RetiredInstance(id.to_string()));
        }
        if self.live_children.get(id).copied().unwrap_or(0) > 0 {
            return Err(Error::HasLiveChildren(id.to_string()));
        }
        Ok(())
    }

    /// Marks an instance retired. The reference and its lineage edge stay.
    pub fn retire(&mut self, id: &InstanceId) -> Result<()> {
        self.check_retire(id)?;
        let r = self.instances.get_mut(id).expect("checked above");
        r.retired = true;
        if let Some(p) = r.parent.clone() {
            if let Some(n) = self.live_children.get_mut(&p) {
                *n -= 1;
            }
        }
        Ok(())
    }

    /// Self, parent, ..., root.
    pub fn lineage_chain(&self, id: &InstanceId) -> Result<Vec<&InstanceReference>> {
        let mut out = vec![self.get(id)?];
        while let Some(parent) = &out.last().expect("non-empty").parent {
            if out.len() > self.instances.len() {
                return Err(Error::MalformedRecord(format!("lineage cycle through {id}")));
            }
            out.push(self.get(parent)?);
        }
        Ok(out)
    }

    /// Definition capabilities intersected with every restriction on the chain.
    pub fn effective_capabilities(&self, registry: &DefinitionRegistry, id: &InstanceId) -> Result<CapabilitySet> {
        let chain = self.lineage_chain(id)?;
        let root = chain.last().expect("non-empty");
        let mut caps = registry.get_pin(&root.definition_pin)?.content.capabilities.clone();
        for r in &chain {
            caps.retain(|c| r.capability_restriction.contains(c));
        }
        Ok(caps)
    }

    /// Context bindings folded root to leaf; nearer bindings override.
    pub fn effective_context(&self, id: &InstanceId) -> Result<BTreeMap<String, Value>> {
        let mut ctx = BTreeMap::new();
        for r in self.lineage_chain(id)?.into_iter().rev() {
            ctx.extend(r.context_bindings.iter().map(|(k, v)| (k.clone(), v.clone())));
        }
        Ok(ctx)
    }

    pub fn diff_from_ancestor(
        &self,
        registry: &DefinitionRegistry,
        memory: &MemoryStore,
        id: &InstanceId,
        ancestor: &InstanceId,
    ) -> Result<DivergenceReport> {
        let chain = self.lineage_chain(id)?;
        self.get(ancestor)?;
        if !chain.iter().any(|r| &r.instance_id == ancestor) {
            return Err(Error::NotAnAncestor(ancestor.to_string(), id.to_string()));
        }
        let instance = chain[0];
        let anc = self.get(ancestor)?;

        let mut writes = BTreeMap::new();
        let mut tombstones = BTreeSet::new();
        let mut decided = BTreeSet::new();
        let stop = &anc.overlay;
        let mut reached = instance.instance_id == anc.instance_id;
        if !reached {
            memory.overlay(stop)?;
            for overlay in memory.chain(&instance.overlay)? {
                if &overlay.overlay_id == stop {
                    reached = true;
                    break;
                }
                for (k, v) in &overlay.writes {
                    if decided.insert(k.clone()) {
                        writes.insert(k.clone(), v.clone());
                    }
                }
                for k in &overlay.tombstones {
                    if decided.insert(k.clone()) {
                        tombstones.insert(k.clone());
                    }
                }
            }
        }
        if !reached {
            return Err(Error::MalformedRecord(format!("overlay chain of {id} does not pass through {stop}")));
        }

        let extra_layers = instance.layer_bindings[anc.layer_bindings.len()..].to_vec();
        let anc_caps = self.effective_capabilities(registry, ancestor)?;
        let caps = self.effective_capabilities(registry, id)?;
        let capability_narrowings = anc_caps.difference(&caps).cloned().collect();
        let anc_ctx = self.effective_context(ancestor)?;
        let context_additions =
            self.effective_context(id)?.into_iter().filter(|(k, v)| anc_ctx.get(k) != Some(v)).collect();

        Ok(DivergenceReport {
            ancestor: Some(ancestor.clone()),
            instance: Some(id.clone()),
            writes,
            tombstones,
            extra_layers,
            capability_narrowings,
            context_additions,
        })
    }

    /// Rebuilds a table from persisted references.
    pub fn from_references(references: Vec<InstanceReference>) -> Result<Self> {
        let mut table = ReferenceTable::new();
        for r in references {
            if let Some(p) = &r.parent {
                if !r.retired {
                    *table.live_children.entry(p.clone()).or_default() += 1;
                }
            }
            table.instances.insert(r.instance_id.clone(), r);
        }
        for r in table.instances.values() {
            if let Some(p) = &r.parent {
                if !table.instances.contains_key(p) {
                    return Err(Error::MalformedRecord(format!("dangling parent {p}")));
                }
            }
        }
        for id in table.instances.keys() {
            table.lineage_chain(id)?;
        }
        Ok(table)
    }
}

fn check_layers(memory: &MemoryStore, layers: &[LayerId]) -> Result<()> {
    match layers.iter().find(|l| !memory.has_layer(l)) {
        Some(missing) => Err(Error::UnknownLayer(missing.to_string())),
        None => Ok(()),
    }
}

fn check_context(ctx: &BTreeMap<String, Value>) -> Result<()> {
    for (k, v) in ctx {
        validate_key(k)?;
        v.validate()?;
    }
    Ok(())
}
