//! Canonical text encoding and digests.
//!
//! Canonical form is compact JSON: UTF-8, no insignificant whitespace, object
//! keys sorted lexicographically. Everything that is hashed or journaled goes
//! through [`to_canonical_string`].

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Serializes `value` into canonical JSON.
///
/// Routing through `serde_json::Value` sorts every object's keys, including
/// those of structs whose fields are declared in a different order.
pub fn to_canonical_string<T: Serialize + ?Sized>(value: &T) -> String {
    let tree = serde_json::to_value(value).expect("canonical values are always representable");
    serde_json::to_string(&tree).expect("serializing a json tree cannot fail")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest of the canonical encoding of `value`.
pub fn canonical_hash<T: Serialize + ?Sized>(value: &T) -> String {
    sha256_hex(to_canonical_string(value).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Serialize;

    #[derive(Serialize)]
    struct Unsorted {
        zeta: u32,
        alpha: &'static str,
        mid: Vec<u8>,
    }

    #[test]
    fn keys_are_sorted_and_compact() {
        let s = to_canonical_string(&Unsorted { zeta: 1, alpha: "a b", mid: vec![1, 2] });
        assert_eq!(s, r#"{"alpha":"a b","mid":[1,2],"zeta":1}"#);
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
