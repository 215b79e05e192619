//! Per-node cache contents: `{id, access count, size}` per resident item.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ContentId = u32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CachedItem {
    pub id: ContentId,
    pub hits: u64,
    pub size_bytes: u64,
    pub last_access: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheState {
    capacity_bytes: u64,
    items: BTreeMap<ContentId, CachedItem>,
}

impl CacheState {
    pub fn new(capacity_bytes: u64) -> Self {
        Self {
            capacity_bytes,
            items: BTreeMap::new(),
        }
    }

    pub fn capacity_bytes(&self) -> u64 {
        self.capacity_bytes
    }

    pub fn used_bytes(&self) -> u64 {
        self.items.values().map(|i| i.size_bytes).sum()
    }

    pub fn free_bytes(&self) -> u64 {
        self.capacity_bytes.saturating_sub(self.used_bytes())
    }

    /// Fraction of capacity in use, in `[0, 1]`.
    pub fn utilization(&self) -> f64 {
        if self.capacity_bytes == 0 {
            return 0.0;
        }
        (self.used_bytes() as f64 / self.capacity_bytes as f64).min(1.0)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn contains(&self, id: ContentId) -> bool {
        self.items.contains_key(&id)
    }

    pub fn get(&self, id: ContentId) -> Option<&CachedItem> {
        self.items.get(&id)
    }

    /// Items in ascending id order.
    pub fn items(&self) -> impl Iterator<Item = &CachedItem> {
        self.items.values()
    }

    pub fn ids(&self) -> Vec<ContentId> {
        self.items.keys().copied().collect()
    }

    /// Inserts a new item if it fits; an already-resident id is left as is.
    pub fn insert(&mut self, id: ContentId, size_bytes: u64, slot: u64) -> Result<()> {
        if self.items.contains_key(&id) {
            return Ok(());
        }
        if size_bytes > self.free_bytes() {
            return Err(Error::invalid(format!(
                "content {id} ({size_bytes} B) does not fit in {} free bytes",
                self.free_bytes()
            )));
        }
        self.items.insert(
            id,
            CachedItem {
                id,
                hits: 0,
                size_bytes,
                last_access: slot,
            },
        );
        Ok(())
    }

    pub fn remove(&mut self, id: ContentId) -> Option<CachedItem> {
        self.items.remove(&id)
    }

    pub fn record_access(&mut self, id: ContentId, slot: u64) -> bool {
        match self.items.get_mut(&id) {
            Some(it) => {
                it.hits += 1;
                it.last_access = slot;
                true
            }
            None => false,
        }
    }

    pub fn set_capacity(&mut self, capacity_bytes: u64) {
        self.capacity_bytes = capacity_bytes;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insert_respects_capacity() {
        let mut c = CacheState::new(10);
        c.insert(1, 6, 0).unwrap();
        assert!(c.insert(2, 5, 0).is_err());
        c.insert(2, 4, 0).unwrap();
        assert_eq!(c.used_bytes(), 10);
        assert_eq!(c.utilization(), 1.0);
        c.insert(1, 6, 3).unwrap();
        assert_eq!(c.len(), 2);
    }

    #[test]
    fn access_counts() {
        let mut c = CacheState::new(10);
        c.insert(3, 1, 0).unwrap();
        assert!(c.record_access(3, 5));
        assert!(!c.record_access(4, 5));
        let it = c.get(3).unwrap();
        assert_eq!((it.hits, it.last_access), (1, 5));
    }
}
