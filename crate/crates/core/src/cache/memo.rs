use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;
use std::sync::Arc;

pub const DEFAULT_MEMO_CAPACITY: usize = 500;

/// Key of one node result: the node's canonical text over an index range.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MemoKey {
    pub expr: String,
    pub instrument: String,
    pub lo: usize,
    pub hi: usize,
}

/// Bounded least-recently-used map of computed node results.
///
/// Recency is a monotone tick; `order` maps tick -> key so the oldest entry
/// is always the first one.
#[derive(Debug)]
pub struct MemoCache<K = MemoKey, V = Arc<Vec<f64>>> {
    capacity: usize,
    tick: u64,
    entries: HashMap<K, (V, u64)>,
    order: BTreeMap<u64, K>,
    hits: u64,
    misses: u64,
}

impl<K: Clone + Eq + Hash, V: Clone> MemoCache<K, V> {
    /// A capacity of 0 disables storage; every call computes.
    pub fn new(capacity: usize) -> Self {
        MemoCache {
            capacity,
            tick: 0,
            entries: HashMap::new(),
            order: BTreeMap::new(),
            hits: 0,
            misses: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn hits(&self) -> u64 {
        self.hits
    }

    pub fn misses(&self) -> u64 {
        self.misses
    }

    pub fn contains(&self, key: &K) -> bool {
        self.entries.contains_key(key)
    }

    pub fn get(&mut self, key: &K) -> Option<V> {
        self.tick += 1;
        let tick = self.tick;
        let Some((value, stamp)) = self.entries.get_mut(key) else {
            self.misses += 1;
            return None;
        };
        self.hits += 1;
        let old = std::mem::replace(stamp, tick);
        let value = value.clone();
        let k = self.order.remove(&old).expect("order tracks every entry");
        self.order.insert(tick, k);
        Some(value)
    }

    pub fn insert(&mut self, key: K, value: V) {
        if self.capacity == 0 {
            return;
        }
        self.tick += 1;
        if let Some((_, old)) = self.entries.insert(key.clone(), (value, self.tick)) {
            self.order.remove(&old);
        }
        self.order.insert(self.tick, key);
        while self.entries.len() > self.capacity {
            let (_, oldest) = self.order.pop_first().expect("non-empty");
            self.entries.remove(&oldest);
        }
    }

    /// Returns the cached value, or runs `compute` once and stores its
    /// result. Errors propagate and leave the cache untouched.
    pub fn get_or_compute<E>(&mut self, key: K, compute: impl FnOnce() -> Result<V, E>) -> Result<V, E> {
        if let Some(v) = self.get(&key) {
            return Ok(v);
        }
        let v = compute()?;
        self.insert(key, v.clone());
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn capacity_one_evicts() {
        let mut memo: MemoCache<&str, u32> = MemoCache::new(1);
        let mut runs = 0;
        let mut compute = |v| {
            runs += 1;
            Ok::<_, ()>(v)
        };
        memo.get_or_compute("a", || compute(1)).unwrap();
        memo.get_or_compute("b", || compute(2)).unwrap();
        memo.get_or_compute("a", || compute(1)).unwrap();
        assert_eq!(runs, 3);
        assert_eq!(memo.len(), 1);
    }

    #[test]
    fn eviction_is_least_recently_used() {
        let mut memo: MemoCache<u32, u32> = MemoCache::new(2);
        memo.insert(1, 10);
        memo.insert(2, 20);
        assert_eq!(memo.get(&1), Some(10));
        memo.insert(3, 30);
        assert!(memo.contains(&1));
        assert!(!memo.contains(&2));
        assert!(memo.contains(&3));
    }

    #[test]
    fn errors_store_nothing() {
        let mut memo: MemoCache<u32, u32> = MemoCache::new(4);
        let r: Result<u32, &str> = memo.get_or_compute(1, || Err("boom"));
        assert_eq!(r, Err("boom"));
        assert!(memo.is_empty());
        let r: Result<u32, &str> = memo.get_or_compute(1, || Err("boom"));
        assert_eq!(r, Err("boom"));
        assert_eq!(memo.get_or_compute::<&str>(1, || Ok(5)), Ok(5));
        assert_eq!(memo.get_or_compute::<&str>(1, || Ok(6)), Ok(5));
    }

    #[test]
    fn zero_capacity_never_stores() {
        let mut memo: MemoCache<u32, u32> = MemoCache::new(0);
        memo.insert(1, 1);
        assert!(memo.is_empty());
    }

    #[test]
    fn reinsert_replaces_value() {
        let mut memo: MemoCache<u32, u32> = MemoCache::new(2);
        memo.insert(1, 1);
        memo.insert(1, 2);
        assert_eq!(memo.len(), 1);
        assert_eq!(memo.get(&1), Some(2));
    }
}
