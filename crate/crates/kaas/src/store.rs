//! Object store backends: an in-memory map and a directory with one file
//! per key.
//!
//! Both give per-key atomicity with no global lock. The directory backend
//! writes to a temporary file and renames it into place, so readers never
//! observe a torn payload.

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use dashmap::DashMap;
use kaas_core::store::{ObjectStore, StoreError, StoreKey};
use percent_encoding::{percent_decode_str, utf8_percent_encode, AsciiSet, NON_ALPHANUMERIC};

/// Thread-safe store shared by the service, executors and HTTP handlers.
pub type SharedStore = Arc<dyn ObjectStore + Send + Sync>;

#[derive(Debug, Default)]
pub struct MemStore {
    objects: DashMap<StoreKey, Arc<[u8]>>,
}

impl MemStore {
    pub fn new() -> Self {
        Self::default()
    }
}

impl ObjectStore for MemStore {
    fn put(&self, key: &StoreKey, payload: &[u8]) -> Result<(), StoreError> {
        self.objects.insert(key.clone(), Arc::from(payload));
        Ok(())
    }

    fn get(&self, key: &StoreKey) -> Result<Vec<u8>, StoreError> {
        self.objects
            .get(key)
            .map(|p| p.to_vec())
            .ok_or_else(|| StoreError::NotFound(key.to_string()))
    }

    fn delete(&self, key: &StoreKey) -> Result<(), StoreError> {
        self.objects.remove(key);
        Ok(())
    }

    fn exists(&self, key: &StoreKey) -> Result<bool, StoreError> {
        Ok(self.objects.contains_key(key))
    }

    fn size_of(&self, key: &StoreKey) -> Result<u64, StoreError> {
        self.objects
            .get(key)
            .map(|p| p.len() as u64)
            .ok_or_else(|| StoreError::NotFound(key.to_string()))
    }

    fn keys(&self) -> Result<Vec<StoreKey>, StoreError> {
        let mut keys: Vec<_> = self.objects.iter().map(|e| e.key().clone()).collect();
        keys.sort();
        Ok(keys)
    }
}

/// Everything but `[A-Za-z0-9_-]` is escaped, so `/` and `.` never reach the
/// filesystem raw and names starting with `.` are free for temp files.
const FILENAME: &AsciiSet = &NON_ALPHANUMERIC.remove(b'_').remove(b'-');

/// Longest path component written. Encoded keys longer than this are split
/// across nested directories whose names end in `+`, a byte the encoding
/// never emits.
const SEGMENT: usize = 200;
const DIR_MARK: char = '+';

#[derive(Debug)]
pub struct DirStore {
    root: PathBuf,
    locks: DashMap<StoreKey, Arc<Mutex<()>>>,
}

fn io_err(e: io::Error) -> StoreError {
    StoreError::Io(e.to_string())
}

impl DirStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io_err)?;
        Ok(DirStore {
            root,
            locks: DashMap::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// `<root>/<percent-encoded key>`, split into components of at most
    /// 200 bytes.
    pub fn path_for(&self, key: &StoreKey) -> PathBuf {
        let encoded = utf8_percent_encode(key.as_str(), FILENAME).to_string();
        let mut path = self.root.clone();
        let mut rest = encoded.as_str();
        while rest.len() > SEGMENT {
            let (head, tail) = rest.split_at(SEGMENT);
            path.push(format!("{head}{DIR_MARK}"));
            rest = tail;
        }
        path.push(rest);
        path
    }

    fn lock(&self, key: &StoreKey) -> Arc<Mutex<()>> {
        self.locks.entry(key.clone()).or_default().clone()
    }

    fn collect(&self, dir: &Path, prefix: &str, out: &mut Vec<StoreKey>) -> io::Result<()> {
        for entry in fs::read_dir(dir)? {
            let entry = entry?;
            let name = entry.file_name();
            let Some(name) = name.to_str() else { continue };
            if name.starts_with('.') {
                continue;
            }
            if entry.file_type()?.is_dir() {
                if let Some(seg) = name.strip_suffix(DIR_MARK) {
                    self.collect(&entry.path(), &format!("{prefix}{seg}"), out)?;
                }
            } else {
                let encoded = format!("{prefix}{name}");
                let decoded = percent_decode_str(&encoded).decode_utf8_lossy();
                if let Ok(key) = StoreKey::new(decoded.into_owned()) {
                    out.push(key);
                }
            }
        }
        Ok(())
    }
}

impl ObjectStore for DirStore {
    fn put(&self, key: &StoreKey, payload: &[u8]) -> Result<(), StoreError> {
        let lock = self.lock(key);
        let _guard = lock.lock().unwrap_or_else(|e| e.into_inner());
        let path = self.path_for(key);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err)?;
        }
        let mut tmp = tempfile::Builder::new()
            .prefix(".tmp-")
            .tempfile_in(&self.root)
            .map_err(io_err)?;
        tmp.write_all(payload).map_err(io_err)?;
        tmp.as_file().sync_data().map_err(io_err)?;
        tmp.persist(&path).map_err(|e| io_err(e.error))?;
        Ok(())
    }

    fn get(&self, key: &StoreKey) -> Result<Vec<u8>, StoreError> {
        let lock = self.lock(key);
        let _guard = lock.lock().unwrap_or_else(|e| e.into_inner());
        match fs::read(self.path_for(key)) {
            Ok(bytes) => Ok(bytes),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Err(StoreError::NotFound(key.to_string())),
            Err(e) => Err(io_err(e)),
        }
    }

    fn delete(&self, key: &StoreKey) -> Result<(), StoreError> {
        let lock = self.lock(key);
        let _guard = lock.lock().unwrap_or_else(|e| e.into_inner());
        match fs::remove_file(self.path_for(key)) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(io_err(e)),
        }
    }

    fn exists(&self, key: &StoreKey) -> Result<bool, StoreError> {
        self.path_for(key).try_exists().map_err(io_err)
    }

    fn size_of(&self, key: &StoreKey) -> Result<u64, StoreError> {
        match fs::metadata(self.path_for(key)) {
            Ok(m) => Ok(m.len()),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Err(StoreError::NotFound(key.to_string())),
            Err(e) => Err(io_err(e)),
        }
    }

    fn keys(&self) -> Result<Vec<StoreKey>, StoreError> {
        let mut keys = Vec::new();
        self.collect(&self.root, "", &mut keys).map_err(io_err)?;
        keys.sort();
        Ok(keys)
    }
}

/// Store selection: `mem` or `dir:<path>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StoreSpec {
    Mem,
    Dir(PathBuf),
}

impl FromStr for StoreSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once(':') {
            None if s == "mem" => Ok(StoreSpec::Mem),
            Some(("dir", path)) if !path.is_empty() => Ok(StoreSpec::Dir(PathBuf::from(path))),
            _ => Err(format!("invalid store {s:?}, expected mem or dir:<path>")),
        }
    }
}

impl fmt::Display for StoreSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StoreSpec::Mem => f.write_str("mem"),
            StoreSpec::Dir(p) => write!(f, "dir:{}", p.display()),
        }
    }
}

impl StoreSpec {
    pub fn open(&self) -> Result<SharedStore, StoreError> {
        Ok(match self {
            StoreSpec::Mem => Arc::new(MemStore::new()),
            StoreSpec::Dir(root) => Arc::new(DirStore::open(root)?),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(s: &str) -> StoreKey {
        StoreKey::new(s).unwrap()
    }

    #[test]
    fn dir_layout_is_percent_encoded() {
        let dir = tempfile::tempdir().unwrap();
        let store = DirStore::open(dir.path()).unwrap();
        store.put(&key("w/layer.0"), b"abc").unwrap();
        assert!(dir.path().join("w%2Flayer%2E0").is_file());
        assert_eq!(store.get(&key("w/layer.0")).unwrap(), b"abc");
        store.put(&key(".."), b"x").unwrap();
        assert!(dir.path().join("%2E%2E").is_file());
        assert_eq!(store.keys().unwrap(), [key(".."), key("w/layer.0")]);
    }

    #[test]
    fn long_keys_nest() {
        let dir = tempfile::tempdir().unwrap();
        let store = DirStore::open(dir.path()).unwrap();
        let long = key(&"/".repeat(256));
        store.put(&long, b"deep").unwrap();
        assert_eq!(store.get(&long).unwrap(), b"deep");
        assert_eq!(store.size_of(&long).unwrap(), 4);
        assert_eq!(store.keys().unwrap(), std::slice::from_ref(&long));
        store.delete(&long).unwrap();
        assert!(store.keys().unwrap().is_empty());
    }

    #[test]
    fn store_spec_parsing() {
        assert_eq!("mem".parse(), Ok(StoreSpec::Mem));
        assert_eq!("dir:/tmp/x".parse(), Ok(StoreSpec::Dir("/tmp/x".into())));
        assert!("dir:".parse::<StoreSpec>().is_err());
        assert!("s3:bucket".parse::<StoreSpec>().is_err());
    }
}
