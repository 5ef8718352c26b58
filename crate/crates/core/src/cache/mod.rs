//! Result caches: an in-memory LRU of node results for one evaluation pass,
//! and two on-disk levels (per-instrument expression values and combined
//! dataset frames). Disk entries are time-indexed and grow only at the tail.
//!
//! Each disk entry is a payload plus a `.meta` sidecar. The sidecar is
//! written last, so an entry without one does not exist.

mod dataset_cache;
mod expr_cache;
mod memo;

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use thiserror::Error;

pub use dataset_cache::{DatasetCache, DatasetKey, DatasetLookup, Outcome};
pub use expr_cache::{ExprCache, ExprCacheKey, ExprLookup};
pub use memo::{MemoCache, MemoKey, DEFAULT_MEMO_CAPACITY};

use crate::hash::stable_hash64;
use crate::storage::write_atomic;

/// Hash collisions are resolved by probing this many sibling slots.
const PROBES: usize = 4;
/// A hit refreshes `last_visit` only when the stored stamp is older than this.
const VISIT_REFRESH_SECS: u64 = 60;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("append starting at {first} does not abut covered tail {covered_last}")]
    NonContiguousAppend { covered_last: usize, first: usize },
    #[error("no cache entry for {0}")]
    MissingEntry(String),
    #[error("corrupt cache entry {path}: {detail}")]
    CorruptEntry { path: PathBuf, detail: String },
    #[error("all {PROBES} slots for hash {0:016x} are taken by other keys")]
    SlotsExhausted(u64),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Sidecar metadata of a disk entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntryMeta {
    pub key: String,
    pub first: usize,
    pub last: usize,
    /// Calendar length when the entry was last written.
    pub version: usize,
    /// Seconds since the Unix epoch.
    pub last_visit: u64,
}

impl EntryMeta {
    pub fn render(&self) -> String {
        format!(
            "key={}\nfirst={}\nlast={}\nversion={}\nlast_visit={}\n",
            self.key, self.first, self.last, self.version, self.last_visit
        )
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let mut fields: [Option<&str>; 5] = [None; 5];
        const NAMES: [&str; 5] = ["key", "first", "last", "version", "last_visit"];
        // split on LF only: a key may legitimately end in CR
        for line in text.split('\n') {
            if line.is_empty() {
                continue;
            }
            let (name, value) = line.split_once('=').ok_or_else(|| format!("no '=' in {line:?}"))?;
            let slot = NAMES
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| format!("unknown field {name:?}"))?;
            if fields[slot].replace(value).is_some() {
                return Err(format!("duplicate field {name:?}"));
            }
        }
        let get = |i: usize| fields[i].ok_or_else(|| format!("missing field {:?}", NAMES[i]));
        let num = |i: usize| -> Result<u64, String> {
            get(i)?.parse::<u64>().map_err(|e| format!("{}: {e}", NAMES[i]))
        };
        let as_usize = |v: u64| usize::try_from(v).map_err(|e| e.to_string());
        let meta = EntryMeta {
            key: get(0)?.to_string(),
            first: as_usize(num(1)?)?,
            last: as_usize(num(2)?)?,
            version: as_usize(num(3)?)?,
            last_visit: num(4)?,
        };
        if meta.first > meta.last {
            return Err(format!("first {} > last {}", meta.first, meta.last));
        }
        Ok(meta)
    }

    pub fn len(&self) -> usize {
        self.last - self.first + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

pub(crate) fn now_secs() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Per-key exclusion: at most one computation or write per key at a time.
#[derive(Debug, Default)]
pub(crate) struct KeyLocks {
    locks: Mutex<HashMap<String, Arc<KeyLock>>>,
}

#[derive(Debug, Default)]
pub(crate) struct KeyLock {
    busy: Mutex<bool>,
    released: Condvar,
}

/// Holds a key until dropped.
pub(crate) struct KeyGuard(Arc<KeyLock>);

impl Drop for KeyGuard {
    fn drop(&mut self) {
        *self.0.busy.lock().unwrap_or_else(|e| e.into_inner()) = false;
        self.0.released.notify_one();
    }
}

impl KeyLocks {
    pub(crate) fn lock(&self, key: &str) -> KeyGuard {
        let lock = {
            let mut map = self.locks.lock().unwrap_or_else(|e| e.into_inner());
            map.entry(key.to_string()).or_default().clone()
        };
        let mut busy = lock.busy.lock().unwrap_or_else(|e| e.into_inner());
        while *busy {
            busy = lock.released.wait(busy).unwrap_or_else(|e| e.into_inner());
        }
        *busy = true;
        drop(busy);
        KeyGuard(lock)
    }
}

/// Directory of entries addressed by hashed key text.
#[derive(Debug)]
pub(crate) struct EntryDir {
    dir: PathBuf,
    /// Payload file extensions, written before the sidecar.
    payload_exts: &'static [&'static str],
}

pub(crate) enum Slot {
    Found(PathBuf, EntryMeta),
    Free(PathBuf),
}

impl EntryDir {
    pub(crate) fn open(dir: PathBuf, payload_exts: &'static [&'static str]) -> io::Result<Self> {
        fs::create_dir_all(&dir)?;
        Ok(EntryDir { dir, payload_exts })
    }

    pub(crate) fn dir(&self) -> &Path {
        &self.dir
    }

    pub(crate) fn with_ext(stem: &Path, ext: &str) -> PathBuf {
        let mut s = stem.as_os_str().to_owned();
        s.push(".");
        s.push(ext);
        PathBuf::from(s)
    }

    /// Finds the slot holding `key`, or the first free slot for it.
    pub(crate) fn slot(&self, key: &str) -> Result<Slot, CacheError> {
        let hash = stable_hash64(key.as_bytes());
        let mut free = None;
        for probe in 0..PROBES {
            let stem = if probe == 0 {
                self.dir.join(format!("{hash:016x}"))
            } else {
                self.dir.join(format!("{hash:016x}_{probe}"))
            };
            match self.read_meta(&stem) {
                Ok(Some(meta)) if meta.key == key => return Ok(Slot::Found(stem, meta)),
                Ok(Some(_)) => {}
                Ok(None) => {
                    free.get_or_insert(stem);
                }
                Err(CacheError::CorruptEntry { .. }) => {
                    self.quarantine(&stem);
                    free.get_or_insert(stem);
                }
                Err(e) => return Err(e),
            }
        }
        free.map(Slot::Free).ok_or(CacheError::SlotsExhausted(hash))
    }

    pub(crate) fn read_meta(&self, stem: &Path) -> Result<Option<EntryMeta>, CacheError> {
        let path = Self::with_ext(stem, "meta");
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
            Err(e) if e.kind() == io::ErrorKind::InvalidData => {
                return Err(CacheError::CorruptEntry {
                    path,
                    detail: "sidecar is not UTF-8".into(),
                })
            }
            Err(e) => return Err(e.into()),
        };
        EntryMeta::parse(&text)
            .map(Some)
            .map_err(|detail| CacheError::CorruptEntry { path, detail })
    }

    pub(crate) fn write_meta(&self, stem: &Path, meta: &EntryMeta) -> io::Result<()> {
        write_atomic(&Self::with_ext(stem, "meta"), meta.render().as_bytes())
    }

    /// Hides an entry: the sidecar goes first so readers see a miss.
    pub(crate) fn remove(&self, stem: &Path) -> io::Result<()> {
        remove_if_exists(&Self::with_ext(stem, "meta"))?;
        for ext in self.payload_exts {
            remove_if_exists(&Self::with_ext(stem, ext))?;
        }
        Ok(())
    }

    /// Moves a damaged entry aside so it is rebuilt on the next write.
    pub(crate) fn quarantine(&self, stem: &Path) {
        log::warn!("quarantining corrupt cache entry {}", stem.display());
        for ext in std::iter::once(&"meta").chain(self.payload_exts) {
            let from = Self::with_ext(stem, ext);
            if from.exists() {
                let _ = fs::rename(&from, Self::with_ext(&from, "corrupt"));
            }
        }
    }

    /// Refreshes the visit stamp if it has gone stale.
    pub(crate) fn touch(&self, stem: &Path, meta: &EntryMeta) {
        let now = now_secs();
        if now.saturating_sub(meta.last_visit) > VISIT_REFRESH_SECS {
            let meta = EntryMeta {
                last_visit: now,
                ..meta.clone()
            };
            let _ = self.write_meta(stem, &meta);
        }
    }

    /// Every readable entry with its on-disk footprint in bytes.
    pub(crate) fn entries(&self) -> Result<Vec<(PathBuf, EntryMeta, u64)>, CacheError> {
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("meta") {
                continue;
            }
            let stem = path.with_extension("");
            if let Ok(Some(meta)) = self.read_meta(&stem) {
                let mut bytes = fs::metadata(&path).map(|m| m.len()).unwrap_or(0);
                for ext in self.payload_exts {
                    bytes += fs::metadata(Self::with_ext(&stem, ext)).map(|m| m.len()).unwrap_or(0);
                }
                out.push((stem, meta, bytes));
            }
        }
        out.sort_by(|a, b| a.1.key.cmp(&b.1.key));
        Ok(out)
    }

    pub(crate) fn clear(&self) -> io::Result<()> {
        if self.dir.exists() {
            fs::remove_dir_all(&self.dir)?;
        }
        fs::create_dir_all(&self.dir)
    }

    /// Drops least-recently-visited entries until the footprint fits.
    /// Returns the number of entries removed.
    pub(crate) fn evict_to_budget(&self, max_bytes: u64) -> Result<usize, CacheError> {
        let mut entries = self.entries()?;
        let mut total: u64 = entries.iter().map(|e| e.2).sum();
        entries.sort_by_key(|e| (e.1.last_visit, e.1.key.clone()));
        let mut removed = 0;
        for (stem, _, bytes) in entries {
            if total <= max_bytes {
                break;
            }
            self.remove(&stem)?;
            total -= bytes;
            removed += 1;
        }
        Ok(removed)
    }
}

fn remove_if_exists(path: &Path) -> io::Result<()> {
    match fs::remove_file(path) {
        Err(e) if e.kind() != io::ErrorKind::NotFound => Err(e),
        _ => Ok(()),
    }
}
