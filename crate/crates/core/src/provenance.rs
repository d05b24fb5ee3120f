//! Config hashing and artifact provenance.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Stamp embedded in every artifact the toolkit writes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub toolkit_version: String,
    pub config_hash: String,
    pub command: String,
}

impl Provenance {
    pub fn new(command: impl Into<String>, config: &impl Serialize) -> Self {
        Self {
            toolkit_version: TOOLKIT_VERSION.to_string(),
            config_hash: config_hash(config),
            command: command.into(),
        }
    }
}

/// SHA-256 over the canonical JSON form of `config`.
///
/// `serde_json::Value` objects are backed by a sorted map, so round-tripping
/// through `Value` gives a key order independent of struct field order.
pub fn config_hash(config: &impl Serialize) -> String {
    let value = serde_json::to_value(config).unwrap_or(serde_json::Value::Null);
    let canonical = serde_json::to_string(&value).unwrap_or_default();
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn hash_ignores_key_order() {
        let a = json!({"b": 1, "a": [1, 2]});
        let b = json!({"a": [1, 2], "b": 1});
        assert_eq!(config_hash(&a), config_hash(&b));
        assert_ne!(config_hash(&a), config_hash(&json!({"a": [2, 1], "b": 1})));
    }
}
