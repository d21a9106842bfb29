//! Object store contract shared by executors and the data layer.
//!
//! Concrete backends (in-memory, on-disk) live in the `kaas` crate. This
//! module only defines keys, errors and the operation set, plus a
//! single-threaded [`LocalStore`] for embedded use and tests.

use alloc::borrow::ToOwned;
use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::cell::RefCell;
use core::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_KEY_LEN: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StoreError {
    #[error("invalid store key {0:?}")]
    InvalidKey(String),
    #[error("object {0} not found")]
    NotFound(String),
    #[error("store I/O failure: {0}")]
    Io(String),
}

/// A validated object-store key: 1..=256 characters from `[A-Za-z0-9._/-]`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct StoreKey(String);

impl StoreKey {
    pub fn new(key: impl Into<String>) -> Result<Self, StoreError> {
        let key = key.into();
        if is_valid_key(&key) {
            Ok(StoreKey(key))
        } else {
            Err(StoreError::InvalidKey(key))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

pub fn is_valid_key(key: &str) -> bool {
    !key.is_empty()
        && key.len() <= MAX_KEY_LEN
        && key
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'/' | b'-'))
}

impl TryFrom<String> for StoreKey {
    type Error = StoreError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        StoreKey::new(value)
    }
}

impl TryFrom<&str> for StoreKey {
    type Error = StoreError;

    fn try_from(value: &str) -> Result<Self, Self::Error> {
        StoreKey::new(value.to_owned())
    }
}

impl From<StoreKey> for String {
    fn from(key: StoreKey) -> String {
        key.0
    }
}

impl AsRef<str> for StoreKey {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for StoreKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Key-value store of binary objects, last writer wins.
///
/// Operations take `&self`; implementations provide their own per-key
/// synchronization. Cross-key operations carry no ordering guarantee.
pub trait ObjectStore {
    fn put(&self, key: &StoreKey, payload: &[u8]) -> Result<(), StoreError>;

    fn get(&self, key: &StoreKey) -> Result<Vec<u8>, StoreError>;

    /// Idempotent: deleting an absent key succeeds.
    fn delete(&self, key: &StoreKey) -> Result<(), StoreError>;

    fn exists(&self, key: &StoreKey) -> Result<bool, StoreError>;

    fn size_of(&self, key: &StoreKey) -> Result<u64, StoreError>;

    /// All keys currently present, in ascending order.
    fn keys(&self) -> Result<Vec<StoreKey>, StoreError>;
}

impl<S: ObjectStore + ?Sized> ObjectStore for &S {
    fn put(&self, key: &StoreKey, payload: &[u8]) -> Result<(), StoreError> {
        (**self).put(key, payload)
    }
    fn get(&self, key: &StoreKey) -> Result<Vec<u8>, StoreError> {
        (**self).get(key)
    }
    fn delete(&self, key: &StoreKey) -> Result<(), StoreError> {
        (**self).delete(key)
    }
    fn exists(&self, key: &StoreKey) -> Result<bool, StoreError> {
        (**self).exists(key)
    }
    fn size_of(&self, key: &StoreKey) -> Result<u64, StoreError> {
        (**self).size_of(key)
    }
    fn keys(&self) -> Result<Vec<StoreKey>, StoreError> {
        (**self).keys()
    }
}

impl<S: ObjectStore + ?Sized> ObjectStore for alloc::sync::Arc<S> {
    fn put(&self, key: &StoreKey, payload: &[u8]) -> Result<(), StoreError> {
        (**self).put(key, payload)
    }
    fn get(&self, key: &StoreKey) -> Result<Vec<u8>, StoreError> {
        (**self).get(key)
    }
    fn delete(&self, key: &StoreKey) -> Result<(), StoreError> {
        (**self).delete(key)
    }
    fn exists(&self, key: &StoreKey) -> Result<bool, StoreError> {
        (**self).exists(key)
    }
    fn size_of(&self, key: &StoreKey) -> Result<u64, StoreError> {
        (**self).size_of(key)
    }
    fn keys(&self) -> Result<Vec<StoreKey>, StoreError> {
        (**self).keys()
    }
}

/// Single-threaded in-memory store.
#[derive(Debug, Default)]
pub struct LocalStore {
    objects: RefCell<BTreeMap<StoreKey, Vec<u8>>>,
}

impl LocalStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Copy of every object, for before/after comparisons.
    pub fn snapshot(&self) -> BTreeMap<StoreKey, Vec<u8>> {
        self.objects.borrow().clone()
    }
}

impl ObjectStore for LocalStore {
    fn put(&self, key: &StoreKey, payload: &[u8]) -> Result<(), StoreError> {
        self.objects.borrow_mut().insert(key.clone(), payload.to_vec());
        Ok(())
    }

    fn get(&self, key: &StoreKey) -> Result<Vec<u8>, StoreError> {
        self.objects
            .borrow()
            .get(key)
            .cloned()
            .ok_or_else(|| StoreError::NotFound(key.as_str().to_owned()))
    }

    fn delete(&self, key: &StoreKey) -> Result<(), StoreError> {
        self.objects.borrow_mut().remove(key);
        Ok(())
    }

    fn exists(&self, key: &StoreKey) -> Result<bool, StoreError> {
        Ok(self.objects.borrow().contains_key(key))
    }

    fn size_of(&self, key: &StoreKey) -> Result<u64, StoreError> {
        self.objects
            .borrow()
            .get(key)
            .map(|p| p.len() as u64)
            .ok_or_else(|| StoreError::NotFound(key.as_str().to_owned()))
    }

    fn keys(&self) -> Result<Vec<StoreKey>, StoreError> {
        Ok(self.objects.borrow().keys().cloned().collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(s: &str) -> StoreKey {
        StoreKey::new(s).unwrap()
    }

    #[test]
    fn key_charset_and_length() {
        assert!(StoreKey::new("weights/layer-0.bin_v2").is_ok());
        assert!(StoreKey::new("a".repeat(MAX_KEY_LEN)).is_ok());
        assert_eq!(
            StoreKey::new("a".repeat(MAX_KEY_LEN + 1)),
            Err(StoreError::InvalidKey("a".repeat(MAX_KEY_LEN + 1)))
        );
        assert!(StoreKey::new("").is_err());
        assert!(StoreKey::new("bad key!").is_err());
        assert!(StoreKey::new("caf\u{e9}").is_err());
    }

    #[test]
    fn local_store_semantics() {
        let s = LocalStore::new();
        assert_eq!(s.get(&key("a")), Err(StoreError::NotFound("a".into())));
        s.put(&key("a"), &[1, 2, 3]).unwrap();
        assert_eq!(s.get(&key("a")).unwrap(), [1, 2, 3]);
        s.put(&key("a"), &[9]).unwrap();
        assert_eq!(s.get(&key("a")).unwrap(), [9]);
        assert_eq!(s.size_of(&key("a")).unwrap(), 1);
        assert!(s.exists(&key("a")).unwrap());
        s.delete(&key("a")).unwrap();
        s.delete(&key("a")).unwrap();
        assert!(!s.exists(&key("a")).unwrap());
        assert!(s.size_of(&key("a")).is_err());
    }
}
