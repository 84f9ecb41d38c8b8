//! Immutable, versioned definitions.
//!
//! A definition version is the inheritance anchor every descendant reference
//! pins. Versions of one definition advance linearly (1, 2, 3, ...); branching
//! version trees are not supported. Published records are never mutated or
//! removed; retirement is expressed by publishing a version whose metadata
//! carries `retired = "true"`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::canonical::canonical_hash;
use crate::error::{Error, Result};
use crate::ids::DefinitionId;

pub type CapabilitySet = BTreeSet<String>;

/// The authored body of a definition version.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DefinitionContent {
    pub role_instructions: String,
    pub capabilities: CapabilitySet,
    pub interface_contracts: BTreeMap<String, String>,
    pub metadata: BTreeMap<String, String>,
}

impl DefinitionContent {
    pub fn new(role_instructions: impl Into<String>) -> Self {
        DefinitionContent { role_instructions: role_instructions.into(), ..Default::default() }
    }

    pub fn with_capabilities<I, S>(mut self, caps: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.capabilities = caps.into_iter().map(Into::into).collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.role_instructions.is_empty() {
            return Err(Error::EmptyInstructions);
        }
        if let Some(bad) = self.capabilities.iter().find(|c| !valid_capability(c)) {
            return Err(Error::InvalidCapability(bad.clone()));
        }
        Ok(())
    }

    /// Digest of the canonical serialization of the content. Identity fields
    /// (definition id and version) are excluded, so identical content always
    /// hashes identically.
    pub fn content_hash(&self) -> String {
        canonical_hash(self)
    }

    /// Size of the body in bytes: instructions plus contract texts.
    pub fn body_bytes(&self) -> u64 {
        let contracts: usize = self.interface_contracts.iter().map(|(k, v)| k.len() + v.len()).sum();
        (self.role_instructions.len() + contracts) as u64
    }
}

pub fn valid_capability(name: &str) -> bool {
    !name.is_empty() && !name.chars().any(|c| c.is_whitespace() || c.is_control())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DefinitionVersionRecord {
    pub definition_id: DefinitionId,
    pub version: u64,
    #[serde(flatten)]
    pub content: DefinitionContent,
    pub content_hash: String,
}

impl DefinitionVersionRecord {
    pub fn pin(&self) -> DefinitionPin {
        DefinitionPin { definition_id: self.definition_id.clone(), version: self.version }
    }

    pub fn verify_hash(&self) -> bool {
        self.content.content_hash() == self.content_hash
    }
}

/// A `(definition, version)` pair, written `ID@VERSION`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DefinitionPin {
    pub definition_id: DefinitionId,
    pub version: u64,
}

impl DefinitionPin {
    pub fn new(definition_id: impl Into<DefinitionId>, version: u64) -> Self {
        DefinitionPin { definition_id: definition_id.into(), version }
    }
}

impl fmt::Display for DefinitionPin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.definition_id, self.version)
    }
}

impl FromStr for DefinitionPin {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let (id, version) = s.rsplit_once('@').ok_or_else(|| format!("expected ID@VERSION, got {s:?}"))?;
        let version: u64 = version.parse().map_err(|_| format!("bad version in {s:?}"))?;
        if id.is_empty() || version == 0 {
            return Err(format!("expected ID@VERSION with version >= 1, got {s:?}"));
        }
        Ok(DefinitionPin::new(id, version))
    }
}

/// All definitions, keyed by id; each entry holds versions 1..=n in order.
#[derive(Debug, Clone, Default)]
pub struct DefinitionRegistry {
    definitions: BTreeMap<DefinitionId, Vec<Arc<DefinitionVersionRecord>>>,
}

impl DefinitionRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts version 1 of a new definition under a caller-assigned id.
    pub fn register(&mut self, id: DefinitionId, content: DefinitionContent) -> Result<DefinitionPin> {
        content.validate()?;
        if self.definitions.contains_key(&id) {
            return Err(Error::MalformedRecord(format!("definition {id} already exists")));
        }
        let record = seal(id.clone(), 1, content);
        self.definitions.insert(id.clone(), vec![Arc::new(record)]);
        Ok(DefinitionPin { definition_id: id, version: 1 })
    }

    /// Appends the next version of an existing definition.
    pub fn publish(&mut self, id: &DefinitionId, content: DefinitionContent) -> Result<u64> {
        content.validate()?;
        let versions = self.definitions.get_mut(id).ok_or_else(|| Error::UnknownDefinition(id.to_string()))?;
        let version = versions.len() as u64 + 1;
        versions.push(Arc::new(seal(id.clone(), version, content)));
        Ok(version)
    }

    /// The next version number `publish` would assign.
    pub fn next_version(&self, id: &DefinitionId) -> Result<u64> {
        self.definitions.get(id).map(|v| v.len() as u64 + 1).ok_or_else(|| Error::UnknownDefinition(id.to_string()))
    }

    pub fn contains(&self, id: &DefinitionId) -> bool {
        self.definitions.contains_key(id)
    }

    /// Returns exactly the requested version, never a substitute.
    pub fn get(&self, id: &DefinitionId, version: u64) -> Result<&Arc<DefinitionVersionRecord>> {
        let versions = self.definitions.get(id).ok_or_else(|| Error::UnknownDefinition(id.to_string()))?;
        version
            .checked_sub(1)
            .and_then(|i| versions.get(i as usize))
            .ok_or_else(|| Error::UnknownVersion(id.to_string(), version))
    }

    pub fn get_pin(&self, pin: &DefinitionPin) -> Result<&Arc<DefinitionVersionRecord>> {
        self.get(&pin.definition_id, pin.version)
    }

    pub fn latest_version(&self, id: &DefinitionId) -> Result<u64> {
        self.next_version(id).map(|v| v - 1)
    }

    pub fn len(&self) -> usize {
        self.definitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.definitions.is_empty()
    }

    /// Every record, ordered by (id, version).
    pub fn records(&self) -> impl Iterator<Item = &Arc<DefinitionVersionRecord>> {
        self.definitions.values().flatten()
    }

    /// Rebuilds a registry from records, checking contiguity and hashes.
    pub fn from_records(records: Vec<DefinitionVersionRecord>) -> Result<Self> {
        let mut registry = DefinitionRegistry::new();
        for record in records {
            let versions = registry.definitions.entry(record.definition_id.clone()).or_default();
            if record.version != versions.len() as u64 + 1 {
                return Err(Error::MalformedRecord(format!(
                    "definition {} version {} out of sequence",
                    record.definition_id, record.version
                )));
            }
            if !record.verify_hash() {
                return Err(Error::MalformedRecord(format!("content hash mismatch for {}", record.pin())));
            }
            versions.push(Arc::new(record));
        }
        Ok(registry)
    }
}

fn seal(definition_id: DefinitionId, version: u64, content: DefinitionContent) -> DefinitionVersionRecord {
    let content_hash = content.content_hash();
    DefinitionVersionRecord { definition_id, version, content, content_hash }
}
