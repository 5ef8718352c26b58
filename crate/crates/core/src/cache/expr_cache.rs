use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use super::{now_secs, CacheError, EntryDir, EntryMeta, KeyLocks, Slot};
use crate::expr::CanonicalKey;
use crate::storage::{encode_series, encode_values, decode_values, write_atomic, HEADER_BYTES, VALUE_BYTES};

/// One expression evaluated for one instrument at one frequency.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ExprCacheKey {
    pub expr: CanonicalKey,
    pub instrument: String,
    pub frequency: String,
}

impl ExprCacheKey {
    pub fn new(expr: CanonicalKey, instrument: &str, frequency: &str) -> Self {
        ExprCacheKey {
            expr,
            instrument: instrument.to_string(),
            frequency: frequency.to_string(),
        }
    }

    pub fn text(&self) -> String {
        format!("{}\t{}\t{}", self.expr, self.instrument, self.frequency)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExprLookup {
    /// The entry covers the whole query.
    Hit(Vec<f32>),
    /// The entry starts at or before the query but ends at `covered_last`,
    /// before its end. `prefix` holds the values for `lo..=covered_last`
    /// (empty when `covered_last < lo`).
    PartialTail { covered_last: usize, prefix: Vec<f32> },
    Miss,
}

/// On-disk cache of computed expression values, one file per key, in the
/// same layout as a stored attribute series.
#[derive(Debug)]
pub struct ExprCache {
    entries: EntryDir,
    locks: KeyLocks,
}

impl ExprCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, CacheError> {
        Ok(ExprCache {
            entries: EntryDir::open(dir.into(), &["bin"])?,
            locks: KeyLocks::default(),
        })
    }

    pub fn dir(&self) -> &Path {
        self.entries.dir()
    }

    pub fn lookup(&self, key: &ExprCacheKey, lo: usize, hi: usize) -> Result<ExprLookup, CacheError> {
        let text = key.text();
        let _guard = self.locks.lock(&text);
        self.lookup_locked(&text, lo, hi)
    }

    fn lookup_locked(&self, text: &str, lo: usize, hi: usize) -> Result<ExprLookup, CacheError> {
        let Slot::Found(stem, meta) = self.entries.slot(text)? else {
            return Ok(ExprLookup::Miss);
        };
        if meta.first > lo {
            return Ok(ExprLookup::Miss);
        }
        let end = hi.min(meta.last);
        let values = if lo <= end {
            match read_range(&stem, &meta, lo, end) {
                Ok(v) => v,
                Err(CacheError::CorruptEntry { .. }) => {
                    self.entries.quarantine(&stem);
                    return Ok(ExprLookup::Miss);
                }
                Err(e) => return Err(e),
            }
        } else {
            Vec::new()
        };
        self.entries.touch(&stem, &meta);
        if meta.last >= hi {
            Ok(ExprLookup::Hit(values))
        } else {
            Ok(ExprLookup::PartialTail {
                covered_last: meta.last,
                prefix: values,
            })
        }
    }

    pub fn meta(&self, key: &ExprCacheKey) -> Result<Option<EntryMeta>, CacheError> {
        Ok(match self.entries.slot(&key.text())? {
            Slot::Found(_, meta) => Some(meta),
            Slot::Free(_) => None,
        })
    }

    /// Writes a fresh entry covering `first..first + values.len()`,
    /// replacing any previous entry for the key.
    pub fn write(&self, key: &ExprCacheKey, first: usize, values: &[f32], version: usize) -> Result<(), CacheError> {
        let text = key.text();
        let _guard = self.locks.lock(&text);
        self.write_locked(&text, first, values, version)
    }

    fn write_locked(&self, text: &str, first: usize, values: &[f32], version: usize) -> Result<(), CacheError> {
        if values.is_empty() {
            return Ok(());
        }
        let stem = match self.entries.slot(text)? {
            Slot::Found(stem, _) => {
                self.entries.remove(&stem)?;
                stem
            }
            Slot::Free(stem) => stem,
        };
        let first32 = u32::try_from(first).map_err(|_| CacheError::CorruptEntry {
            path: stem.clone(),
            detail: format!("start index {first} exceeds u32"),
        })?;
        write_atomic(&EntryDir::with_ext(&stem, "bin"), &encode_series(first32, values))?;
        let meta = EntryMeta {
            key: text.to_string(),
            first,
            last: first + values.len() - 1,
            version,
            last_visit: now_secs(),
        };
        self.entries.write_meta(&stem, &meta)?;
        Ok(())
    }

    /// Extends an entry so that it ends at `new_last`. The new values must
    /// start right after the covered tail.
    pub fn append(&self, key: &ExprCacheKey, new_values: &[f32], new_last: usize, version: usize) -> Result<(), CacheError> {
        let text = key.text();
        let _guard = self.locks.lock(&text);
        self.append_locked(&text, new_values, new_last, version)
    }

    fn append_locked(&self, text: &str, new_values: &[f32], new_last: usize, version: usize) -> Result<(), CacheError> {
        let Slot::Found(stem, meta) = self.entries.slot(text)? else {
            return Err(CacheError::MissingEntry(text.to_string()));
        };
        if new_values.is_empty() {
            return Ok(());
        }
        let first = (new_last + 1).checked_sub(new_values.len()).ok_or(CacheError::NonContiguousAppend {
            covered_last: meta.last,
            first: 0,
        })?;
        if first != meta.last + 1 {
            return Err(CacheError::NonContiguousAppend {
                covered_last: meta.last,
                first,
            });
        }
        let bin = EntryDir::with_ext(&stem, "bin");
        let mut f = OpenOptions::new().write(true).open(&bin)?;
        let whole = (HEADER_BYTES + VALUE_BYTES * meta.len()) as u64;
        // bytes past the sidecar's range are leftovers of an interrupted append
        f.set_len(whole)?;
        f.seek(SeekFrom::Start(whole))?;
        f.write_all(&encode_values(new_values))?;
        drop(f);
        let meta = EntryMeta {
            last: new_last,
            version,
            last_visit: now_secs(),
            ..meta
        };
        self.entries.write_meta(&stem, &meta)?;
        Ok(())
    }

    /// Returns values for `lo..=hi`, computing and persisting only what the
    /// entry lacks. Holds the key for the duration, so concurrent callers
    /// for the same key wait and then read the finished entry.
    ///
    /// Values past `settled_last` are returned but not persisted (they may
    /// still change when lagging raw data arrives).
    pub fn get_or_compute<E: From<CacheError>>(
        &self,
        key: &ExprCacheKey,
        lo: usize,
        hi: usize,
        settled_last: Option<usize>,
        version: usize,
        compute: impl FnOnce(usize, usize) -> Result<Vec<f32>, E>,
    ) -> Result<(Vec<f32>, ExprLookup), E> {
        let text = key.text();
        let _guard = self.locks.lock(&text);
        let state = self.lookup_locked(&text, lo, hi)?;
        let out = match &state {
            ExprLookup::Hit(v) => v.clone(),
            ExprLookup::PartialTail { covered_last, prefix } => {
                let from = covered_last + 1;
                let fresh = compute(from, hi)?;
                if let Some(keep) = persisted_len(from, hi, settled_last) {
                    self.append_locked(&text, &fresh[..keep], from + keep - 1, version)?;
                }
                // prefix covers lo..=covered_last only when covered_last >= lo
                let skip = lo.saturating_sub(from);
                let mut v = prefix.clone();
                v.extend_from_slice(&fresh[skip..]);
                v
            }
            ExprLookup::Miss => {
                let fresh = compute(lo, hi)?;
                if let Some(keep) = persisted_len(lo, hi, settled_last) {
                    self.write_locked(&text, lo, &fresh[..keep], version)?;
                }
                fresh
            }
        };
        Ok((out, state))
    }

    pub fn list(&self) -> Result<Vec<EntryMeta>, CacheError> {
        Ok(self.entries.entries()?.into_iter().map(|e| e.1).collect())
    }

    pub fn footprint(&self) -> Result<u64, CacheError> {
        Ok(self.entries.entries()?.iter().map(|e| e.2).sum())
    }

    pub fn clear(&self) -> Result<(), CacheError> {
        Ok(self.entries.clear()?)
    }

    pub fn evict_to_budget(&self, max_bytes: u64) -> Result<usize, CacheError> {
        self.entries.evict_to_budget(max_bytes)
    }
}

/// How many of the values `from..=hi` may be persisted.
fn persisted_len(from: usize, hi: usize, settled_last: Option<usize>) -> Option<usize> {
    let last = settled_last.map_or(hi, |s| s.min(hi));
    (last >= from).then(|| last - from + 1)
}

/// Reads `lo..=hi` (inside the covered range) by seeking into the payload.
fn read_range(stem: &Path, meta: &EntryMeta, lo: usize, hi: usize) -> Result<Vec<f32>, CacheError> {
    let path = EntryDir::with_ext(stem, "bin");
    let corrupt = |detail: String| CacheError::CorruptEntry {
        path: path.clone(),
        detail,
    };
    let mut f = match File::open(&path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(corrupt("payload missing".into())),
        Err(e) => return Err(e.into()),
    };
    let size = f.metadata()?.len();
    let need = (HEADER_BYTES + VALUE_BYTES * meta.len()) as u64;
    if size < need {
        return Err(corrupt(format!("{size} bytes, sidecar implies {need}")));
    }
    let mut header = [0u8; HEADER_BYTES];
    f.read_exact(&mut header)?;
    let start = u32::from_le_bytes(header) as usize;
    if start != meta.first {
        return Err(corrupt(format!("header start {start} != sidecar first {}", meta.first)));
    }
    f.seek(SeekFrom::Start((HEADER_BYTES + VALUE_BYTES * (lo - meta.first)) as u64))?;
    let mut buf = vec![0u8; VALUE_BYTES * (hi - lo + 1)];
    f.read_exact(&mut buf)?;
    Ok(decode_values(&buf))
}

#[cfg(test)]
mod tests {
    use std::fs;

    use super::*;
    use crate::expr::parse;

    fn key(inst: &str) -> ExprCacheKey {
        ExprCacheKey::new(parse("MEAN($close,5)").unwrap().canonical_key(), inst, "day")
    }

    fn ramp(lo: usize, hi: usize) -> Vec<f32> {
        (lo..=hi).map(|i| i as f32 * 0.5).collect()
    }

    fn setup() -> (tempfile::TempDir, ExprCache) {
        let dir = tempfile::tempdir().unwrap();
        let cache = ExprCache::open(dir.path().join("expr")).unwrap();
        (dir, cache)
    }

    #[test]
    fn containment_hit_slices() {
        let (_d, cache) = setup();
        cache.write(&key("A"), 0, &ramp(0, 99), 100).unwrap();
        assert_eq!(cache.lookup(&key("A"), 10, 50).unwrap(), ExprLookup::Hit(ramp(10, 50)));
    }

    #[test]
    fn partial_tail_reports_covered_end() {
        let (_d, cache) = setup();
        cache.write(&key("A"), 0, &ramp(0, 99), 100).unwrap();
        match cache.lookup(&key("A"), 50, 120).unwrap() {
            ExprLookup::PartialTail { covered_last, prefix } => {
                assert_eq!(covered_last, 99);
                assert_eq!(prefix, ramp(50, 99));
            }
            other => panic!("{other:?}"),
        }
        cache.append(&key("A"), &ramp(100, 120), 120, 121).unwrap();
        assert_eq!(cache.lookup(&key("A"), 50, 120).unwrap(), ExprLookup::Hit(ramp(50, 120)));
        assert_eq!(cache.meta(&key("A")).unwrap().unwrap().last, 120);
    }

    #[test]
    fn head_extension_is_a_miss() {
        let (_d, cache) = setup();
        cache.write(&key("A"), 50, &ramp(50, 99), 100).unwrap();
        assert_eq!(cache.lookup(&key("A"), 0, 99).unwrap(), ExprLookup::Miss);
        assert_eq!(cache.lookup(&key("B"), 60, 70).unwrap(), ExprLookup::Miss);
    }

    #[test]
    fn non_contiguous_append_rejected() {
        let (_d, cache) = setup();
        cache.write(&key("A"), 0, &ramp(0, 99), 100).unwrap();
        let err = cache.append(&key("A"), &ramp(105, 120), 120, 121).unwrap_err();
        assert!(matches!(err, CacheError::NonContiguousAppend { covered_last: 99, first: 105 }));
        assert!(matches!(
            cache.append(&key("Z"), &ramp(0, 1), 1, 2),
            Err(CacheError::MissingEntry(_))
        ));
    }

    #[test]
    fn append_is_byte_identical_to_full_write() {
        let (_d, cache) = setup();
        cache.write(&key("A"), 3, &ramp(3, 99), 100).unwrap();
        cache.append(&key("A"), &ramp(100, 120), 120, 121).unwrap();
        cache.write(&key("B"), 3, &ramp(3, 120), 121).unwrap();
        let path = |k: &ExprCacheKey| match cache.entries.slot(&k.text()).unwrap() {
            Slot::Found(stem, _) => EntryDir::with_ext(&stem, "bin"),
            Slot::Free(_) => panic!("missing"),
        };
        assert_eq!(fs::read(path(&key("A"))).unwrap(), fs::read(path(&key("B"))).unwrap());
    }

    #[test]
    fn corrupt_entry_is_quarantined_as_miss() {
        let (_d, cache) = setup();
        cache.write(&key("A"), 0, &ramp(0, 9), 10).unwrap();
        let Slot::Found(stem, _) = cache.entries.slot(&key("A").text()).unwrap() else { panic!() };
        let bin = EntryDir::with_ext(&stem, "bin");
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..bytes.len() - 8]).unwrap();
        assert_eq!(cache.lookup(&key("A"), 0, 9).unwrap(), ExprLookup::Miss);
        assert!(cache.meta(&key("A")).unwrap().is_none());
        // rebuilt cleanly afterwards
        cache.write(&key("A"), 0, &ramp(0, 9), 10).unwrap();
        assert_eq!(cache.lookup(&key("A"), 0, 9).unwrap(), ExprLookup::Hit(ramp(0, 9)));
    }

    #[test]
    fn garbage_sidecar_is_a_miss() {
        let (_d, cache) = setup();
        cache.write(&key("A"), 0, &ramp(0, 9), 10).unwrap();
        let Slot::Found(stem, _) = cache.entries.slot(&key("A").text()).unwrap() else { panic!() };
        fs::write(EntryDir::with_ext(&stem, "meta"), b"\xff\xfe garbage").unwrap();
        assert_eq!(cache.lookup(&key("A"), 0, 9).unwrap(), ExprLookup::Miss);
    }

    #[test]
    fn get_or_compute_only_computes_missing_tail() {
        let (_d, cache) = setup();
        let mut calls = Vec::new();
        let mut run = |lo, hi| {
            let (v, _) = cache
                .get_or_compute::<CacheError>(&key("A"), lo, hi, None, hi + 1, |a, b| {
                    calls.push((a, b));
                    Ok(ramp(a, b))
                })
                .unwrap();
            assert_eq!(v, ramp(lo, hi));
        };
        run(0, 49);
        run(10, 40);
        run(20, 80);
        run(90, 95);
        assert_eq!(calls, vec![(0, 49), (50, 80), (81, 95)]);
    }

    #[test]
    fn unsettled_tail_is_not_persisted() {
        let (_d, cache) = setup();
        let (v, _) = cache
            .get_or_compute::<CacheError>(&key("A"), 0, 9, Some(6), 10, |a, b| Ok(ramp(a, b)))
            .unwrap();
        assert_eq!(v, ramp(0, 9));
        assert_eq!(cache.meta(&key("A")).unwrap().unwrap().last, 6);
        let (_, state) = cache
            .get_or_compute::<CacheError>(&key("B"), 5, 9, Some(3), 10, |a, b| Ok(ramp(a, b)))
            .unwrap();
        assert_eq!(state, ExprLookup::Miss);
        assert!(cache.meta(&key("B")).unwrap().is_none());
    }

    #[test]
    fn concurrent_requesters_compute_once() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        use std::sync::Arc;
        let (_d, cache) = setup();
        let cache = Arc::new(cache);
        let computed = Arc::new(AtomicUsize::new(0));
        let handles: Vec<_> = (0..6)
            .map(|_| {
                let (cache, computed) = (cache.clone(), computed.clone());
                std::thread::spawn(move || {
                    cache
                        .get_or_compute::<CacheError>(&key("A"), 0, 99, None, 100, |a, b| {
                            computed.fetch_add(1, Ordering::SeqCst);
                            std::thread::sleep(std::time::Duration::from_millis(20));
                            Ok(ramp(a, b))
                        })
                        .unwrap()
                        .0
                })
            })
            .collect();
        for h in handles {
            assert_eq!(h.join().unwrap(), ramp(0, 99));
        }
        assert_eq!(computed.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn evicts_least_recently_visited() {
        let (_d, cache) = setup();
        cache.write(&key("A"), 0, &ramp(0, 99), 100).unwrap();
        cache.write(&key("B"), 0, &ramp(0, 99), 100).unwrap();
        // age A
        let Slot::Found(stem, meta) = cache.entries.slot(&key("A").text()).unwrap() else { panic!() };
        cache.entries.write_meta(&stem, &EntryMeta { last_visit: 1, ..meta }).unwrap();
        let one = cache.footprint().unwrap() / 2;
        assert_eq!(cache.evict_to_budget(one + 10).unwrap(), 1);
        assert!(cache.meta(&key("A")).unwrap().is_none());
        assert!(cache.meta(&key("B")).unwrap().is_some());
        cache.clear().unwrap();
        assert!(cache.list().unwrap().is_empty());
    }
}
