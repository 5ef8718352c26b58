use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use super::{now_secs, CacheError, EntryDir, EntryMeta, KeyLocks, Slot};
use crate::dataset::AlignedFrame;
use crate::expr::CanonicalKey;
use crate::storage::write_atomic;

/// A combined frame: the distinct canonical expressions (sorted), the
/// instrument universe and the frequency. Query column order is not part of
/// the key; stored columns follow `expressions`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DatasetKey {
    pub expressions: Vec<CanonicalKey>,
    /// `pool:<name>` or `instruments:<a,b,...>`.
    pub universe: String,
    pub frequency: String,
}

impl DatasetKey {
    pub fn new(expressions: impl IntoIterator<Item = CanonicalKey>, universe: String, frequency: &str) -> Self {
        let mut expressions: Vec<CanonicalKey> = expressions.into_iter().collect();
        expressions.sort();
        expressions.dedup();
        DatasetKey {
            expressions,
            universe,
            frequency: frequency.to_string(),
        }
    }

    pub fn columns(&self) -> Vec<String> {
        self.expressions.iter().map(|e| e.as_str().to_string()).collect()
    }

    pub fn text(&self) -> String {
        let mut s = String::new();
        for e in &self.expressions {
            s.push_str(e.as_str());
            s.push('\t');
        }
        s.push_str(&self.universe);
        s.push('\t');
        s.push_str(&self.frequency);
        s
    }
}

#[derive(Debug, Clone)]
pub enum DatasetLookup {
    Hit(AlignedFrame),
    /// Rows for `lo..=covered_last`; the rest must be built and appended.
    PartialTail { covered_last: usize, prefix: AlignedFrame },
    Miss,
}

/// What [`DatasetCache::get_or_compute`] found before computing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Hit,
    PartialTail { covered_last: usize },
    Miss,
}

/// On-disk cache of combined frames: `<hash>.frame` (row-major payload),
/// `<hash>.index` (row spans per instrument) and `<hash>.meta`.
#[derive(Debug)]
pub struct DatasetCache {
    entries: EntryDir,
    locks: KeyLocks,
}

impl DatasetCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, CacheError> {
        Ok(DatasetCache {
            entries: EntryDir::open(dir.into(), &["frame", "index"])?,
            locks: KeyLocks::default(),
        })
    }

    pub fn dir(&self) -> &Path {
        self.entries.dir()
    }

    pub fn lookup(&self, key: &DatasetKey, lo: usize, hi: usize) -> Result<DatasetLookup, CacheError> {
        let text = key.text();
        let _guard = self.locks.lock(&text);
        Ok(match self.load_locked(key, &text)? {
            None => DatasetLookup::Miss,
            Some((meta, frame)) => classify(meta, frame, lo, hi).0,
        })
    }

    /// Reads the whole stored frame, quarantining it if unreadable.
    fn load_locked(&self, key: &DatasetKey, text: &str) -> Result<Option<(EntryMeta, AlignedFrame)>, CacheError> {
        let Slot::Found(stem, meta) = self.entries.slot(text)? else {
            return Ok(None);
        };
        match read_frame(&stem, key.columns(), &meta) {
            Ok(frame) => {
                self.entries.touch(&stem, &meta);
                Ok(Some((meta, frame)))
            }
            Err(CacheError::CorruptEntry { .. }) => {
                self.entries.quarantine(&stem);
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }

    /// Stores `frame` as the entry covering `first..=last`, replacing any
    /// previous one. Every row index must lie in that range.
    pub fn write(&self, key: &DatasetKey, frame: &AlignedFrame, first: usize, last: usize, version: usize) -> Result<(), CacheError> {
        let text = key.text();
        let _guard = self.locks.lock(&text);
        self.write_locked(&text, frame, first, last, version)
    }

    fn write_locked(&self, text: &str, frame: &AlignedFrame, first: usize, last: usize, version: usize) -> Result<(), CacheError> {
        debug_assert!(frame.rows().iter().all(|r| (first..=last).contains(&(r.index as usize))));
        let stem = match self.entries.slot(text)? {
            Slot::Found(stem, _) => {
                self.entries.remove(&stem)?;
                stem
            }
            Slot::Free(stem) => stem,
        };
        write_atomic(&EntryDir::with_ext(&stem, "frame"), &frame.encode_payload())?;
        write_atomic(&EntryDir::with_ext(&stem, "index"), frame.encode_index().as_bytes())?;
        let meta = EntryMeta {
            key: text.to_string(),
            first,
            last,
            version,
            last_visit: now_secs(),
        };
        self.entries.write_meta(&stem, &meta)?;
        Ok(())
    }

    /// Extends an entry with rows for `covered.last + 1 ..= new_last`.
    /// The files are rewritten whole: row order interleaves instruments, so
    /// new rows cannot simply be appended to the payload.
    pub fn append(&self, key: &DatasetKey, rows: &AlignedFrame, new_last: usize, version: usize) -> Result<(), CacheError> {
        let text = key.text();
        let _guard = self.locks.lock(&text);
        let Some((meta, stored)) = self.load_locked(key, &text)? else {
            return Err(CacheError::MissingEntry(text));
        };
        self.append_locked(&text, meta, stored, rows, new_last, version)
    }

    fn append_locked(
        &self,
        text: &str,
        meta: EntryMeta,
        stored: AlignedFrame,
        rows: &AlignedFrame,
        new_last: usize,
        version: usize,
    ) -> Result<(), CacheError> {
        if let Some(bad) = rows.rows().iter().map(|r| r.index as usize).find(|&i| i <= meta.last || i > new_last) {
            return Err(CacheError::NonContiguousAppend {
                covered_last: meta.last,
                first: bad,
            });
        }
        if new_last <= meta.last {
            return Ok(());
        }
        self.write_locked(text, &stored.merge(rows.clone()), meta.first, new_last, version)
    }

    /// Returns the frame for `lo..=hi` (columns in key order), building only
    /// the rows the entry lacks. `build(from, hi)` must return the rows for
    /// `from..=hi` and the last index whose rows are final (`None`: no row
    /// is). Rows past that index are returned but not persisted.
    pub fn get_or_compute<E: From<CacheError>>(
        &self,
        key: &DatasetKey,
        lo: usize,
        hi: usize,
        version: usize,
        build: impl FnOnce(usize, usize) -> Result<(AlignedFrame, Option<usize>), E>,
    ) -> Result<(AlignedFrame, Outcome), E> {
        let text = key.text();
        let _guard = self.locks.lock(&text);
        let stored = self.load_locked(key, &text)?;
        match stored {
            Some((meta, frame)) if meta.first <= lo => {
                if meta.last >= hi {
                    return Ok((frame.restrict(lo, hi), Outcome::Hit));
                }
                let covered_last = meta.last;
                let from = covered_last + 1;
                let (fresh, settled) = build(from, hi)?;
                let out = frame.clone().restrict(lo, covered_last).merge(fresh.clone());
                if let Some(keep) = settled.map(|s| s.min(hi)).filter(|&k| k >= from) {
                    self.append_locked(&text, meta, frame, &fresh.clone().restrict(from, keep), keep, version)?;
                }
                Ok((out, Outcome::PartialTail { covered_last }))
            }
            _ => {
                let (fresh, settled) = build(lo, hi)?;
                if let Some(keep) = settled.map(|s| s.min(hi)).filter(|&k| k >= lo) {
                    self.write_locked(&text, &fresh.clone().restrict(lo, keep), lo, keep, version)?;
                }
                Ok((fresh, Outcome::Miss))
            }
        }
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

fn classify(meta: EntryMeta, frame: AlignedFrame, lo: usize, hi: usize) -> (DatasetLookup, Outcome) {
    if meta.first > lo {
        (DatasetLookup::Miss, Outcome::Miss)
    } else if meta.last >= hi {
        (DatasetLookup::Hit(frame.restrict(lo, hi)), Outcome::Hit)
    } else {
        let covered_last = meta.last;
        (
            DatasetLookup::PartialTail {
                covered_last,
                prefix: frame.restrict(lo, covered_last),
            },
            Outcome::PartialTail { covered_last },
        )
    }
}

fn read_frame(stem: &Path, columns: Vec<String>, meta: &EntryMeta) -> Result<AlignedFrame, CacheError> {
    let frame_path = EntryDir::with_ext(stem, "frame");
    let read = |path: &Path| match fs::read(path) {
        Ok(b) => Ok(b),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Err(CacheError::CorruptEntry {
            path: path.to_path_buf(),
            detail: "payload missing".into(),
        }),
        Err(e) => Err(e.into()),
    };
    let payload = read(&frame_path)?;
    let index_path = EntryDir::with_ext(stem, "index");
    let index = String::from_utf8(read(&index_path)?).map_err(|_| CacheError::CorruptEntry {
        path: index_path.clone(),
        detail: "index is not UTF-8".into(),
    })?;
    let frame = AlignedFrame::decode(columns, &payload, &index).map_err(|detail| CacheError::CorruptEntry {
        path: frame_path.clone(),
        detail,
    })?;
    if let Some(r) = frame.rows().iter().find(|r| !(meta.first..=meta.last).contains(&(r.index as usize))) {
        return Err(CacheError::CorruptEntry {
            path: frame_path,
            detail: format!("row index {} outside covered [{}, {}]", r.index, meta.first, meta.last),
        });
    }
    Ok(frame)
}
