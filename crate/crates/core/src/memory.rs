//! Shared memory layers and per-instance copy-on-write overlays.
//!
//! Layers hold context shared by many instances and are stored exactly once.
//! Overlays hold the local delta of one instance: writes plus tombstones that
//! mask inherited keys. Overlays chain toward the root through their parents;
//! creating one copies nothing, so storage grows only with divergence.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::counters::Counters;
use crate::error::{Error, Result};
use crate::ids::{InstanceId, LayerId, OverlayId};
use crate::value::{validate_key, Value};

/// Semantic scope of a layer, ordered from most shared to most local.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScopeLevel {
    Organization,
    Lineage,
    Account,
    Session,
    Task,
}

impl ScopeLevel {
    pub const ALL: [ScopeLevel; 5] =
        [ScopeLevel::Organization, ScopeLevel::Lineage, ScopeLevel::Account, ScopeLevel::Session, ScopeLevel::Task];

    pub fn as_str(self) -> &'static str {
        match self {
            ScopeLevel::Organization => "organization",
            ScopeLevel::Lineage => "lineage",
            ScopeLevel::Account => "account",
            ScopeLevel::Session => "session",
            ScopeLevel::Task => "task",
        }
    }
}

impl fmt::Display for ScopeLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScopeLevel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        ScopeLevel::ALL.into_iter().find(|l| l.as_str() == s).ok_or_else(|| format!("unknown scope level {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryLayer {
    pub layer_id: LayerId,
    pub scope: ScopeLevel,
    pub entries: BTreeMap<String, Value>,
    pub layer_version: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Overlay {
    pub overlay_id: OverlayId,
    pub parent_overlay: Option<OverlayId>,
    pub writes: BTreeMap<String, Value>,
    pub tombstones: BTreeSet<String>,
    pub owner_instance: InstanceId,
    /// Number of overlays whose parent is this one. Derived; rebuilt on load.
    #[serde(skip)]
    pub child_count: u64,
}

// `child_count` is derived, so it takes no part in equality.
impl PartialEq for Overlay {
    fn eq(&self, other: &Self) -> bool {
        self.overlay_id == other.overlay_id
            && self.parent_overlay == other.parent_overlay
            && self.writes == other.writes
            && self.tombstones == other.tombstones
            && self.owner_instance == other.owner_instance
    }
}

impl Overlay {
    pub fn entry_count(&self) -> u64 {
        (self.writes.len() + self.tombstones.len()) as u64
    }
}

/// Outcome of walking an overlay chain for one key.
#[derive(Debug, Clone, PartialEq)]
pub enum ChainHit {
    Write {
        value: Value,
        overlay: OverlayId,
    },
    Tombstone {
        overlay: OverlayId,
    },
    /// Nothing in the chain decided the key; the caller falls through to layers.
    Miss,
}

#[derive(Debug, Default)]
pub struct MemoryStore {
    layers: HashMap<LayerId, MemoryLayer>,
    overlays: HashMap<OverlayId, Overlay>,
    /// Overlays removed by compaction, mapped to the overlay that absorbed them.
    compacted: BTreeMap<OverlayId, OverlayId>,
    counters: Arc<Counters>,
}

impl MemoryStore {
    pub fn new(counters: Arc<Counters>) -> Self {
        MemoryStore { counters, ..Default::default() }
    }

    pub fn counters(&self) -> &Arc<Counters> {
        &self.counters
    }

    // ----- layers -----

    /// Validates a prospective layer without creating it.
    pub fn check_entries(entries: &BTreeMap<String, Value>) -> Result<()> {
        for (k, v) in entries {
            validate_key(k)?;
            v.validate()?;
        }
        Ok(())
    }

    pub fn create_layer(
        &mut self,
        layer_id: LayerId,
        scope: ScopeLevel,
        entries: BTreeMap<String, Value>,
    ) -> Result<()> {
        Self::check_entries(&entries)?;
        if self.layers.contains_key(&layer_id) {
            return Err(Error::MalformedRecord(format!("layer {layer_id} already exists")));
        }
        self.layers.insert(layer_id.clone(), MemoryLayer { layer_id, scope, entries, layer_version: 0 });
        Ok(())
    }

    pub fn check_layer_write(&self, layer_id: &LayerId, key: &str, value: Option<&Value>) -> Result<()> {
        self.layer(layer_id)?;
        validate_key(key)?;
        value.map_or(Ok(()), Value::validate)
    }

    /// Sets (`Some`) or removes (`None`) a key and bumps the layer version by one.
    pub fn layer_write(&mut self, layer_id: &LayerId, key: &str, value: Option<Value>) -> Result<u64> {
        self.check_layer_write(layer_id, key, value.as_ref())?;
        let layer = self.layers.get_mut(layer_id).expect("checked above");
        match value {
            Some(v) => {
                layer.entries.insert(key.to_string(), v);
            }
            None => {
                layer.entries.remove(key);
            }
        }
        layer.layer_version += 1;
        Ok(layer.layer_version)
    }

    pub fn layer(&self, layer_id: &LayerId) -> Result<&MemoryLayer> {
        self.layers.get(layer_id).ok_or_else(|| Error::UnknownLayer(layer_id.to_string()))
    }

    pub fn has_layer(&self, layer_id: &LayerId) -> bool {
        self.layers.contains_key(layer_id)
    }

    pub fn layer_version(&self, layer_id: &LayerId) -> Result<u64> {
        self.layer(layer_id).map(|l| l.layer_version)
    }

    /// Reads one key from one layer, counting the probe.
    pub fn layer_get(&self, layer_id: &LayerId, key: &str) -> Result<Option<&Value>> {
        let layer = self.layer(layer_id)?;
        self.counters.entry_read();
        Ok(layer.entries.get(key))
    }

    pub fn layers(&self) -> impl Iterator<Item = &MemoryLayer> {
        self.layers.values()
    }

    // ----- overlays -----

    /// Creates an empty overlay chained to `parent`. Touches no entries of the
    /// parent chain.
    pub fn create_overlay(
        &mut self,
        overlay_id: OverlayId,
        owner_instance: InstanceId,
        parent: Option<OverlayId>,
    ) -> Result<()> {
        if let Some(p) = &parent {
            self.overlay(p)?;
        }
        if self.overlays.contains_key(&overlay_id) || self.compacted.contains_key(&overlay_id) {
            return Err(Error::MalformedRecord(format!("overlay {overlay_id} already exists")));
        }
        if let Some(p) = &parent {
            self.overlays.get_mut(p).expect("checked above").child_count += 1;
        }
        self.overlays.insert(
            overlay_id.clone(),
            Overlay {
                overlay_id,
                parent_overlay: parent,
                writes: BTreeMap::new(),
                tombstones: BTreeSet::new(),
                owner_instance,
                child_count: 0,
            },
        );
        Ok(())
    }

    pub fn overlay(&self, overlay_id: &OverlayId) -> Result<&Overlay> {
        match self.overlays.get(overlay_id) {
            Some(o) => Ok(o),
            None => Err(match self.compacted.get(overlay_id) {
                Some(into) => Error::OverlayCompacted(overlay_id.to_string(), into.to_string()),
                None => Error::UnknownOverlay(overlay_id.to_string()),
            }),
        }
    }

    pub fn check_overlay_apply(&self, overlay_id: &OverlayId, key: &str, value: Option<&Value>) -> Result<()> {
        self.overlay(overlay_id)?;
        validate_key(key)?;
        value.map_or(Ok(()), Value::validate)
    }

    /// Writes (`Some`) or tombstones (`None`) a key in one overlay. Keeps the
    /// write and tombstone sets disjoint; never touches ancestors or layers.
    pub fn overlay_apply(&mut self, overlay_id: &OverlayId, key: &str, value: Option<Value>) -> Result<()> {
        self.check_overlay_apply(overlay_id, key, value.as_ref())?;
        let overlay = self.overlays.get_mut(overlay_id).expect("checked above");
        match value {
            Some(v) => {
                overlay.tombstones.remove(key);
                overlay.writes.insert(key.to_string(), v);
            }
            None => {
                overlay.writes.remove(key);
                overlay.tombstones.insert(key.to_string());
            }
        }
        Ok(())
    }

    /// Walks the chain from `overlay_id` toward the root; the nearest overlay
    /// that writes or tombstones `key` decides.
    pub fn chain_read(&self, overlay_id: &OverlayId, key: &str) -> Result<ChainHit> {
        let mut cursor = Some(self.overlay(overlay_id)?);
        while let Some(overlay) = cursor {
            self.counters.entry_read();
            if let Some(v) = overlay.writes.get(key) {
                return Ok(ChainHit::Write { value: v.clone(), overlay: overlay.overlay_id.clone() });
            }
            if overlay.tombstones.contains(key) {
                return Ok(ChainHit::Tombstone { overlay: overlay.overlay_id.clone() });
            }
            cursor = match &overlay.parent_overlay {
                Some(p) => Some(self.overlay(p)?),
                None => None,
            };
        }
        Ok(ChainHit::Miss)
    }

    /// The chain from `overlay_id` to the root, most-derived first.
    pub fn chain(&self, overlay_id: &OverlayId) -> Result<Vec<&Overlay>> {
        let mut out = Vec::new();
        let mut cursor = Some(overlay_id.clone());
        while let Some(id) = cursor {
            let overlay = self.overlay(&id)?;
            cursor = overlay.parent_overlay.clone();
            out.push(overlay);
        }
        Ok(out)
    }

    pub fn overlays(&self) -> impl Iterator<Item = &Overlay> {
        self.overlays.values()
    }

    pub fn compacted(&self) -> &BTreeMap<OverlayId, OverlayId> {
        &self.compacted
    }

    /// Ancestors of `overlay_id` that [`compact`](Self::compact) would fold:
    /// the maximal run of parents that have exactly one child overlay and whose
    /// owner satisfies `retired`.
    pub fn compactable(&self, overlay_id: &OverlayId, retired: impl Fn(&InstanceId) -> bool) -> Result<Vec<OverlayId>> {
        let mut folded = Vec::new();
        let mut parent = self.overlay(overlay_id)?.parent_overlay.clone();
        while let Some(pid) = parent {
            let p = self.overlay(&pid)?;
            if p.child_count != 1 || !retired(&p.owner_instance) {
                break;
            }
            parent = p.parent_overlay.clone();
            folded.push(pid);
        }
        Ok(folded)
    }

    /// Folds the given ancestor run (as returned by [`compactable`](Self::compactable))
    /// into `overlay_id`. Keys already decided by a nearer overlay are kept.
    pub fn compact(&mut self, overlay_id: &OverlayId, folded: &[OverlayId]) -> Result<()> {
        let mut expected = self.overlay(overlay_id)?.parent_overlay.clone();
        for pid in folded {
            if expected.as_ref() != Some(pid) {
                return Err(Error::MalformedRecord(format!("{pid} is not next in the chain of {overlay_id}")));
            }
            let p = self.overlay(pid)?;
            if p.child_count != 1 {
                return Err(Error::MalformedRecord(format!("{pid} has other children")));
            }
            expected = p.parent_overlay.clone();
        }
        for pid in folded {
            let parent = self.overlays.remove(pid).expect("validated above");
            let leaf = self.overlays.get_mut(overlay_id).expect("validated above");
            for (k, v) in parent.writes {
                if !leaf.writes.contains_key(&k) && !leaf.tombstones.contains(&k) {
                    leaf.writes.insert(k, v);
                }
            }
            for k in parent.tombstones {
                if !leaf.writes.contains_key(&k) {
                    leaf.tombstones.insert(k);
                }
            }
            leaf.parent_overlay = parent.parent_overlay;
            self.compacted.insert(pid.clone(), overlay_id.clone());
        }
        Ok(())
    }

    // ----- accounting -----

    pub fn shared_entries_total(&self) -> u64 {
        self.layers.values().map(|l| l.entries.len() as u64).sum()
    }

    pub fn overlay_entries_total(&self) -> u64 {
        self.overlays.values().map(Overlay::entry_count).sum()
    }

    /// Rebuilds a store from persisted parts, recomputing child counts.
    pub fn from_parts(
        counters: Arc<Counters>,
        layers: Vec<MemoryLayer>,
        overlays: Vec<Overlay>,
        compacted: BTreeMap<OverlayId, OverlayId>,
    ) -> Result<Self> {
        let mut store = MemoryStore::new(counters);
        for layer in layers {
            Self::check_entries(&layer.entries)?;
            store.layers.insert(layer.layer_id.clone(), layer);
        }
        for mut overlay in overlays {
            overlay.child_count = 0;
            store.overlays.insert(overlay.overlay_id.clone(), overlay);
        }
        let parents: Vec<OverlayId> = store.overlays.values().filter_map(|o| o.parent_overlay.clone()).collect();
        for p in parents {
            store
                .overlays
                .get_mut(&p)
                .ok_or_else(|| Error::MalformedRecord(format!("dangling parent overlay {p}")))?
                .child_count += 1;
        }
        for id in store.overlays.keys() {
            // Parent links must terminate at a root.
            let mut steps = 0usize;
            let mut cursor = Some(id.clone());
            while let Some(c) = cursor {
                steps += 1;
                if steps > store.overlays.len() {
                    return Err(Error::MalformedRecord(format!("overlay cycle through {id}")));
                }
                cursor = store.overlays[&c].parent_overlay.clone();
            }
        }
        store.compacted = compacted;
        Ok(store)
    }
}
