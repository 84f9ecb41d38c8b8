//! Identifier newtypes.
//!
//! Identifiers are runtime-generated, fixed-width and therefore sortable:
//! a one-letter kind prefix followed by a zero-padded sequence number. Each kind
//! has its own counter; numbers are never reused.

use std::fmt;

use serde::{Deserialize, Serialize};

const WIDTH: usize = 8;

macro_rules! id_type {
    ($name:ident, $prefix:literal) => {
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(String);

        impl $name {
            pub const PREFIX: char = $prefix;

            pub fn from_counter(n: u64) -> Self {
                $name(format!("{}{:0width$}", $prefix, n, width = WIDTH))
            }

            /// Recovers the counter value, if the id has the canonical shape.
            pub fn counter(&self) -> Option<u64> {
                let digits = self.0.strip_prefix($prefix)?;
                if digits.len() != WIDTH {
                    return None;
                }
                digits.parse().ok()
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                $name(s.to_string())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                $name(s)
            }
        }
    };
}

id_type!(DefinitionId, 'D');
id_type!(LayerId, 'L');
id_type!(OverlayId, 'O');
id_type!(InstanceId, 'I');

/// Per-kind id counters. `next_*` hands out the next fresh id; `observe_*`
/// advances a counter past an id seen during replay or snapshot loading.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdCounters {
    pub definitions: u64,
    pub layers: u64,
    pub overlays: u64,
    pub instances: u64,
}

impl IdCounters {
    pub fn peek_definition(&self) -> DefinitionId {
        DefinitionId::from_counter(self.definitions + 1)
    }
    pub fn peek_layer(&self) -> LayerId {
        LayerId::from_counter(self.layers + 1)
    }
    pub fn peek_overlay(&self) -> OverlayId {
        OverlayId::from_counter(self.overlays + 1)
    }
    pub fn peek_instance(&self) -> InstanceId {
        InstanceId::from_counter(self.instances + 1)
    }

    pub fn observe_definition(&mut self, id: &DefinitionId) {
        bump(&mut self.definitions, id.counter());
    }
    pub fn observe_layer(&mut self, id: &LayerId) {
        bump(&mut self.layers, id.counter());
    }
    pub fn observe_overlay(&mut self, id: &OverlayId) {
        bump(&mut self.overlays, id.counter());
    }
    pub fn observe_instance(&mut self, id: &InstanceId) {
        bump(&mut self.instances, id.counter());
    }
}

fn bump(counter: &mut u64, seen: Option<u64>) {
    if let Some(n) = seen {
        *counter = (*counter).max(n);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_sort_in_creation_order() {
        let ids: Vec<_> = [9u64, 10, 100, 2].iter().map(|&n| InstanceId::from_counter(n)).collect();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(sorted.iter().map(|i| i.counter().unwrap()).collect::<Vec<_>>(), vec![2, 9, 10, 100]);
        assert_eq!(ids[0].as_str(), "I00000009");
    }

    #[test]
    fn observe_never_moves_backwards() {
        let mut c = IdCounters::default();
        c.observe_layer(&LayerId::from_counter(5));
        c.observe_layer(&LayerId::from_counter(3));
        c.observe_layer(&LayerId::from("bogus"));
        assert_eq!(c.peek_layer(), LayerId::from_counter(6));
    }
}
