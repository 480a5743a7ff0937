use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{ensure, Error, Result};
use crate::solver::Pass;
use crate::tensorio::{write_tensor, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CacheKey {
    /// Upper grid index of the shared interval.
    pub interval: usize,
    pub block: usize,
    pub pass: Pass,
}

/// Value tensors captured during inversion, replayed during denoising.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureCache {
    entries: BTreeMap<CacheKey, Tensor>,
}

impl FeatureCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores a value tensor; each key may be written once.
    pub fn insert(&mut self, key: CacheKey, value: Tensor) -> Result<()> {
        ensure!(
            !self.entries.contains_key(&key),
            "feature cache key {key:?} written twice"
        );
        self.entries.insert(key, value);
        Ok(())
    }

    pub fn get(&self, key: &CacheKey) -> Option<&Tensor> {
        self.entries.get(key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &CacheKey> {
        self.entries.keys()
    }

    /// Drops every entry whose pass is not listed.
    pub fn retain_passes(&mut self, passes: &[Pass]) {
        self.entries.retain(|k, _| passes.contains(&k.pass));
    }

    /// Writes each entry as `k{interval}-b{block}-{pass}.rft` under `dir`.
    pub fn dump(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (k, v) in &self.entries {
            let name = format!("k{}-b{}-{}.rft", k.interval, k.block, k.pass.as_str());
            write_tensor(v, dir.join(name))?;
        }
        Ok(())
    }
}
