//! The store: thread-safe facade over state, journal and view cache.
//!
//! Mutations serialize on the journal lock: validate against a read view of
//! the state, append the record, then apply under the state write lock.
//! A mutation that fails validation or cannot be journaled changes nothing.
//! Reads take only the state read lock and never touch the journal.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock, RwLockReadGuard};

use crate::counters::{CounterReading, Counters};
use crate::error::{Error, Result};
use crate::ids::{DefinitionId, InstanceId, LayerId, OverlayId};
use crate::memory::{MemoryLayer, ScopeLevel};
use crate::persistence::{check_contiguous, Journal, JournalRecord, JournalSink, Snapshot};
use crate::reference::{DivergenceReport, InstanceReference};
use crate::registry::{CapabilitySet, DefinitionContent, DefinitionPin, DefinitionVersionRecord};
use crate::resolver::{self, CacheStatus, EffectiveView, KeyResolution, Provenance, ViewCache};
use crate::state::{Applied, Op, State};
use crate::value::Value;

pub struct Store {
    state: RwLock<State>,
    journal: Mutex<Journal>,
    cache: RwLock<ViewCache>,
    last_seq: AtomicU64,
    counters: Arc<Counters>,
}

impl Default for Store {
    fn default() -> Self {
        Self::new()
    }
}

impl Store {
    /// An empty in-memory store.
    pub fn new() -> Self {
        let counters = Arc::new(Counters::default());
        Store {
            state: RwLock::new(State::new(counters.clone())),
            journal: Mutex::new(Journal::new()),
            cache: RwLock::new(ViewCache::default()),
            last_seq: AtomicU64::new(0),
            counters,
        }
    }

    /// Routes future journal records through `sink` as well.
    pub fn with_sink(self, sink: Box<dyn JournalSink>) -> Self {
        self.journal.lock().set_sink(sink);
        self
    }

    pub fn counters(&self) -> CounterReading {
        self.counters.read()
    }

    /// Direct read access for inspection and tests.
    pub fn read(&self) -> RwLockReadGuard<'_, State> {
        self.state.read()
    }

    pub fn last_seq(&self) -> u64 {
        self.last_seq.load(Ordering::Acquire)
    }

    pub fn journal_records(&self) -> Vec<JournalRecord> {
        self.journal.lock().records().to_vec()
    }

    fn commit(&self, plan: impl FnOnce(&State) -> Result<Op>) -> Result<Applied> {
        let mut journal = self.journal.lock();
        let op = {
            let state = self.state.read();
            let op = plan(&state)?;
            state.check(&op)?;
            op
        };
        let seq = journal.append(op.clone())?;
        let mut state = self.state.write();
        let applied =
            state.apply(&op, seq).expect("validated op must apply; journal and state would diverge otherwise");
        self.last_seq.store(seq, Ordering::Release);
        Ok(applied)
    }

    // ----- definitions -----

    pub fn register_definition(&self, content: DefinitionContent) -> Result<DefinitionPin> {
        match self.commit(|s| Ok(Op::DefRegister { definition_id: s.ids.peek_definition(), content }))? {
            Applied::Definition(pin) => Ok(pin),
            other => unreachable!("{other:?}"),
        }
    }

    pub fn publish_version(&self, definition_id: &DefinitionId, content: DefinitionContent) -> Result<u64> {
        let applied = self.commit(|s| {
            Ok(Op::DefPublish {
                definition_id: definition_id.clone(),
                version: s.registry.next_version(definition_id)?,
                content,
            })
        })?;
        match applied {
            Applied::Definition(pin) => Ok(pin.version),
            other => unreachable!("{other:?}"),
        }
    }

    pub fn get_definition(&self, definition_id: &DefinitionId, version: u64) -> Result<DefinitionVersionRecord> {
        let state = self.state.read();
        let record = state.registry.get(definition_id, version)?;
        self.counters.definition_read(record.content.body_bytes());
        Ok((**record).clone())
    }

    // ----- layers -----

    pub fn create_layer(&self, scope: ScopeLevel, entries: BTreeMap<String, Value>) -> Result<LayerId> {
        match self.commit(|s| Ok(Op::LayerCreate { layer_id: s.ids.peek_layer(), scope, entries }))? {
            Applied::Layer(id) => Ok(id),
            other => unreachable!("{other:?}"),
        }
    }

    /// Sets or (with `None`) deletes a key; returns the new layer version.
    pub fn layer_write(&self, layer_id: &LayerId, key: &str, value: Option<Value>) -> Result<u64> {
        let applied = self.commit(|s| {
            Ok(Op::LayerWrite {
                layer_id: layer_id.clone(),
                key: key.to_string(),
                value,
                layer_version: s.memory.layer_version(layer_id)? + 1,
            })
        })?;
        match applied {
            Applied::LayerVersion(v) => Ok(v),
            other => unreachable!("{other:?}"),
        }
    }

    pub fn layer(&self, layer_id: &LayerId) -> Result<MemoryLayer> {
        self.state.read().memory.layer(layer_id).cloned()
    }

    // ----- instances -----

    pub fn spawn(
        &self,
        definition_pin: DefinitionPin,
        layer_bindings: Vec<LayerId>,
        capability_restriction: CapabilitySet,
        context_bindings: BTreeMap<String, Value>,
    ) -> Result<InstanceReference> {
        let applied = self.commit(|s| {
            Ok(Op::InstanceSpawn {
                instance_id: s.ids.peek_instance(),
                overlay_id: s.ids.peek_overlay(),
                definition_pin,
                layer_bindings,
                capability_restriction,
                context_bindings,
            })
        })?;
        match applied {
            Applied::Instance(r) => Ok(r),
            other => unreachable!("{other:?}"),
        }
    }

    pub fn derive(
        &self,
        parent: &InstanceId,
        extra_layers: Vec<LayerId>,
        capability_restriction: CapabilitySet,
        context_bindings: BTreeMap<String, Value>,
    ) -> Result<InstanceReference> {
        let applied = self.commit(|s| {
            Ok(Op::InstanceDerive {
                instance_id: s.ids.peek_instance(),
                overlay_id: s.ids.peek_overlay(),
                parent: parent.clone(),
                extra_layers,
                capability_restriction,
                context_bindings,
            })
        })?;
        match applied {
            Applied::Instance(r) => Ok(r),
            other => unreachable!("{other:?}"),
        }
    }

    /// Writes (`Some`) or tombstones (`None`) a key in the instance's own overlay.
    pub fn write(&self, instance: &InstanceId, key: &str, value: Option<Value>) -> Result<()> {
        self.commit(|s| {
            Ok(Op::OverlayApply {
                instance_id: instance.clone(),
                overlay_id: s.refs.get(instance)?.overlay.clone(),
                key: key.to_string(),
                value,
            })
        })
        .map(|_| ())
    }

    pub fn retire(&self, instance: &InstanceId) -> Result<()> {
        self.commit(|_| Ok(Op::InstanceRetire { instance_id: instance.clone() })).map(|_| ())
    }

    /// Folds retired, single-child ancestor overlays into the instance's
    /// overlay. Returns the folded overlay ids; nothing is journaled when
    /// there is nothing to fold.
    pub fn compact(&self, instance: &InstanceId) -> Result<Vec<OverlayId>> {
        {
            let state = self.state.read();
            let overlay = &state.refs.get(instance)?.overlay;
            if state.memory.compactable(overlay, |i| state.refs.is_retired(i))?.is_empty() {
                return Ok(Vec::new());
            }
        }
        let applied = self.commit(|s| {
            let overlay_id = s.refs.get(instance)?.overlay.clone();
            let folded = s.memory.compactable(&overlay_id, |i| s.refs.is_retired(i))?;
            Ok(Op::OverlayCompact { instance_id: instance.clone(), overlay_id, folded })
        });
        match applied {
            Ok(Applied::Compacted(folded)) => Ok(folded),
            // Lost a race with another compaction.
            Err(Error::MalformedRecord(_)) => Ok(Vec::new()),
            Err(e) => Err(e),
            Ok(other) => unreachable!("{other:?}"),
        }
    }

    pub fn instance(&self, instance: &InstanceId) -> Result<InstanceReference> {
        self.state.read().refs.get(instance).cloned()
    }

    pub fn lineage_chain(&self, instance: &InstanceId) -> Result<Vec<InstanceReference>> {
        Ok(self.state.read().refs.lineage_chain(instance)?.into_iter().cloned().collect())
    }

    pub fn diff_from_ancestor(&self, instance: &InstanceId, ancestor: &InstanceId) -> Result<DivergenceReport> {
        let state = self.state.read();
        state.refs.diff_from_ancestor(&state.registry, &state.memory, instance, ancestor)
    }

    pub fn effective_capabilities(&self, instance: &InstanceId) -> Result<CapabilitySet> {
        let state = self.state.read();
        state.refs.effective_capabilities(&state.registry, instance)
    }

    // ----- resolution -----

    pub fn resolve_key(&self, instance: &InstanceId, key: &str) -> Result<KeyResolution> {
        resolver::resolve_key(&self.state.read(), instance, key)
    }

    /// Returns the cached view when every bound layer is unchanged, otherwise
    /// recomputes and refreshes the cache.
    pub fn resolve_view(&self, instance: &InstanceId) -> Result<EffectiveView> {
        let state = self.state.read();
        let reference = state.refs.get(instance)?;
        if reference.retired {
            return Err(Error::RetiredInstance(instance.to_string()));
        }
        if let Some(cached) = self.cache.read().get(instance) {
            if resolver::cache_status(&state, Some(cached)) == CacheStatus::Fresh {
                return Ok(cached.clone());
            }
        }
        let view = resolver::resolve_view(&state, instance, self.last_seq())?;
        self.cache.write().put(view.clone());
        Ok(view)
    }

    pub fn flatten(&self, instance: &InstanceId) -> Result<BTreeMap<String, (Value, Provenance)>> {
        resolver::flatten(&self.state.read(), instance)
    }

    pub fn cache_status(&self, instance: &InstanceId) -> CacheStatus {
        let state = self.state.read();
        let cache = self.cache.read();
        resolver::cache_status(&state, cache.get(instance))
    }

    // ----- accounting -----

    pub fn shared_entries_total(&self) -> u64 {
        self.state.read().memory.shared_entries_total()
    }

    pub fn overlay_entries_total(&self) -> u64 {
        self.state.read().memory.overlay_entries_total()
    }

    // ----- persistence -----

    /// A consistent cut: no mutation can commit while the snapshot is taken.
    pub fn snapshot(&self) -> Snapshot {
        let journal = self.journal.lock();
        let state = self.state.read();
        Snapshot::new(journal.last_seq(), state.to_doc())
    }

    pub fn state_hash(&self) -> String {
        self.state.read().state_hash()
    }

    /// Rebuilds a store from a journal, optionally stopping after `up_to`.
    /// The new store's journal holds exactly the replayed records.
    pub fn replay(records: Vec<JournalRecord>, up_to: Option<u64>) -> Result<Store> {
        check_contiguous(&records)?;
        let max = records.len() as u64;
        let end = match up_to {
            Some(k) if k > max => return Err(Error::SeqOutOfRange(k, max)),
            Some(k) => k,
            None => max,
        };
        let mut records = records;
        records.truncate(end as usize);
        let store = Store::new();
        {
            let mut state = store.state.write();
            for r in &records {
                state
                    .apply(&r.op, r.seq)
                    .map_err(|e| Error::MalformedRecord(format!("seq {} ({}): {e}", r.seq, e.code())))?;
            }
        }
        store.last_seq.store(end, Ordering::Release);
        *store.journal.lock() = Journal::from_records(0, records);
        Ok(store)
    }

    /// Rebuilds a store from a snapshot plus the journal records after it.
    pub fn from_snapshot(snapshot: Snapshot, tail: Vec<JournalRecord>) -> Result<Store> {
        let counters = Arc::new(Counters::default());
        let mut state = State::from_doc(snapshot.state, counters.clone())?;
        let mut seq = snapshot.as_of_seq;
        for r in &tail {
            if r.seq != seq + 1 {
                return Err(Error::GapInJournal { expected: seq + 1, found: r.seq });
            }
            state
                .apply(&r.op, r.seq)
                .map_err(|e| Error::MalformedRecord(format!("seq {} ({}): {e}", r.seq, e.code())))?;
            seq = r.seq;
        }
        Ok(Store {
            state: RwLock::new(state),
            journal: Mutex::new(Journal::from_records(snapshot.as_of_seq, tail)),
            cache: RwLock::new(ViewCache::default()),
            last_seq: AtomicU64::new(seq),
            counters,
        })
    }
}
