use std::collections::BTreeMap;

use crate::error::Result;

/// Artifact storage keyed by relative paths such as `iter2/ckpt`.
pub trait RunStore {
    fn get(&self, path: &str) -> Result<Option<Vec<u8>>>;
    fn put(&mut self, path: &str, bytes: &[u8]) -> Result<()>;
}

/// In-memory store for tests and dry runs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MemoryStore {
    pub files: BTreeMap<String, Vec<u8>>,
}

impl RunStore for MemoryStore {
    fn get(&self, path: &str) -> Result<Option<Vec<u8>>> {
        Ok(self.files.get(path).cloned())
    }

    fn put(&mut self, path: &str, bytes: &[u8]) -> Result<()> {
        self.files.insert(path.to_string(), bytes.to_vec());
        Ok(())
    }
}
