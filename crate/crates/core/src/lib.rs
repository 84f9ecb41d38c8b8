//! Reference-based instance replication.
//!
//! An instance is not a materialized object but a small reference over shared,
//! versioned structures:
//!
//! - [`registry`]: immutable, versioned definitions that instances pin;
//! - [`memory`]: scope-leveled shared layers plus per-instance copy-on-write
//!   overlays;
//! - [`reference`]: instance references, lineage, capability narrowing;
//! - [`resolver`]: execution-time composition of a reference into a view;
//! - [`persistence`]: append-only journal, snapshots, replay;
//! - [`bench`]: workloads comparing reference creation against eager
//!   materialization.
//!
//! [`Store`] ties these together behind a thread-safe API in which every
//! mutation is journaled.

pub mod bench;
pub mod canonical;
pub mod counters;
pub mod error;
pub mod ids;
pub mod memory;
pub mod persistence;
pub mod reference;
pub mod registry;
pub mod resolver;
pub mod state;
pub mod store;
pub mod value;

pub use counters::CounterReading;
pub use error::{Error, Result};
pub use ids::{DefinitionId, InstanceId, LayerId, OverlayId};
pub use memory::ScopeLevel;
pub use reference::{DivergenceReport, InstanceReference};
pub use registry::{CapabilitySet, DefinitionContent, DefinitionPin, DefinitionVersionRecord};
pub use resolver::{CacheStatus, EffectiveView, KeyResolution, Provenance};
pub use store::Store;
pub use value::Value;
