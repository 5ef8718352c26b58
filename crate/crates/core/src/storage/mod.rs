//! Append-only flat-file store.
//!
//! ```text
//! <root>/calendars/<freq>.txt                      one ISO date per line
//! <root>/instruments/<pool>.txt                    SYMBOL \t ENTER \t EXIT
//! <root>/features/<symbol>/<attribute>.<freq>.bin  u32 start + f32 values
//! ```
//!
//! Every path is a pure function of its key. History is immutable: series
//! and calendars only grow at the tail.

mod calendar;
mod pool;
mod series;

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use chrono::NaiveDate;
use thiserror::Error;

pub use calendar::{Calendar, Rounding};
pub use pool::{IndexInterval, InstrumentPool};
pub use series::{decode_values, encode_series, encode_values, AttributeSeries, HEADER_BYTES, VALUE_BYTES};

pub use calendar::parse_date;

pub const DEFAULT_FREQ: &str = "day";

#[derive(Debug, Error)]
pub enum StorageError {
    #[error("calendar is not strictly increasing at line {line} ({date})")]
    NonMonotonicCalendar { line: usize, date: NaiveDate },
    #[error("existing {frequency} calendar ({existing} entries) is not a prefix of the new one")]
    PrefixMismatch { frequency: String, existing: usize },
    #[error("no calendar for frequency {0:?}")]
    MissingCalendar(String),
    #[error("{date} is outside the calendar ({rounding:?} rounding)")]
    OutOfRange { date: NaiveDate, rounding: Rounding },
    #[error("series {instrument}/{attribute}.{frequency}: index {end} exceeds calendar length {calendar_len}")]
    IndexBeyondCalendar {
        instrument: String,
        attribute: String,
        frequency: String,
        end: u64,
        calendar_len: usize,
    },
    #[error("no series {instrument}/{attribute}.{frequency}")]
    MissingSeries {
        instrument: String,
        attribute: String,
        frequency: String,
    },
    #[error("no instrument pool {0:?}")]
    MissingPool(String),
    #[error("pool update at {date} is not after the last recorded date {last}")]
    NonMonotonicUpdate { last: NaiveDate, date: NaiveDate },
    #[error("invalid pool: {0}")]
    InvalidPool(String),
    #[error("invalid name {0:?}")]
    InvalidName(String),
    #[error("invalid index range [{lo}, {hi}]")]
    InvalidRange { lo: usize, hi: usize },
    #[error("malformed {what} at line {line}: {detail}")]
    Malformed {
        what: &'static str,
        line: usize,
        detail: String,
    },
    #[error("corrupt series file: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Start index and stored length of a series, read from the file size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeriesExtent {
    pub start_index: usize,
    pub len: usize,
}

impl SeriesExtent {
    /// Last covered index, or `None` for an empty series.
    pub fn last_index(&self) -> Option<usize> {
        (self.start_index + self.len).checked_sub(1).filter(|_| self.len > 0)
    }
}

/// Handle on a store root. Cheap to clone the path out of; holds no open files.
#[derive(Debug)]
pub struct Store {
    root: PathBuf,
    reads: AtomicU64,
}

impl Store {
    /// Opens a store root, creating the directory tree if absent.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StorageError> {
        let root = root.into();
        for sub in ["calendars", "instruments", "features"] {
            fs::create_dir_all(root.join(sub))?;
        }
        Ok(Store {
            root,
            reads: AtomicU64::new(0),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Number of `read_series` calls served so far.
    pub fn read_count(&self) -> u64 {
        self.reads.load(Ordering::Relaxed)
    }

    pub fn calendar_path(&self, frequency: &str) -> PathBuf {
        self.root.join("calendars").join(format!("{frequency}.txt"))
    }

    pub fn pool_path(&self, pool: &str) -> PathBuf {
        self.root.join("instruments").join(format!("{pool}.txt"))
    }

    pub fn series_path(&self, instrument: &str, attribute: &str, frequency: &str) -> PathBuf {
        self.root
            .join("features")
            .join(instrument.to_lowercase())
            .join(format!("{attribute}.{frequency}.bin"))
    }

    // ---- calendar ----

    pub fn write_calendar(&self, frequency: &str, dates: &[NaiveDate]) -> Result<(), StorageError> {
        check_name(frequency)?;
        let new = Calendar::new(frequency, dates.to_vec())?;
        match self.read_calendar(frequency) {
            Ok(existing) => {
                if !existing.is_prefix_of(&new) {
                    return Err(StorageError::PrefixMismatch {
                        frequency: frequency.to_string(),
                        existing: existing.len(),
                    });
                }
                if existing.len() == new.len() {
                    return Ok(());
                }
                let tail = Calendar::new(frequency, new.dates()[existing.len()..].to_vec())?;
                let mut f = OpenOptions::new().append(true).open(self.calendar_path(frequency))?;
                f.write_all(tail.render().as_bytes())?;
                Ok(())
            }
            Err(StorageError::MissingCalendar(_)) => {
                write_atomic(&self.calendar_path(frequency), new.render().as_bytes())?;
                Ok(())
            }
            Err(e) => Err(e),
        }
    }

    pub fn read_calendar(&self, frequency: &str) -> Result<Calendar, StorageError> {
        let path = self.calendar_path(frequency);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(StorageError::MissingCalendar(frequency.to_string()))
            }
            Err(e) => return Err(e.into()),
        };
        Calendar::parse(frequency, &text)
    }

    fn calendar_len(&self, frequency: &str) -> Result<usize, StorageError> {
        Ok(self.read_calendar(frequency)?.len())
    }

    // ---- series ----

    pub fn write_series(
        &self,
        instrument: &str,
        attribute: &str,
        frequency: &str,
        start_index: usize,
        values: &[f32],
    ) -> Result<(), StorageError> {
        check_name(instrument)?;
        check_name(attribute)?;
        let calendar_len = self.calendar_len(frequency)?;
        let end = start_index as u64 + values.len() as u64;
        if end > calendar_len as u64 || start_index > u32::MAX as usize {
            return Err(StorageError::IndexBeyondCalendar {
                instrument: instrument.to_string(),
                attribute: attribute.to_string(),
                frequency: frequency.to_string(),
                end,
                calendar_len,
            });
        }
        let path = self.series_path(instrument, attribute, frequency);
        fs::create_dir_all(path.parent().unwrap())?;
        write_atomic(&path, &encode_series(start_index as u32, values))?;
        Ok(())
    }

    pub fn append_series(
        &self,
        instrument: &str,
        attribute: &str,
        frequency: &str,
        new_values: &[f32],
    ) -> Result<(), StorageError> {
        let extent = self.series_extent(instrument, attribute, frequency)?;
        if new_values.is_empty() {
            return Ok(());
        }
        let calendar_len = self.calendar_len(frequency)?;
        let end = (extent.start_index + extent.len + new_values.len()) as u64;
        if end > calendar_len as u64 {
            return Err(StorageError::IndexBeyondCalendar {
                instrument: instrument.to_string(),
                attribute: attribute.to_string(),
                frequency: frequency.to_string(),
                end,
                calendar_len,
            });
        }
        let path = self.series_path(instrument, attribute, frequency);
        let mut f = OpenOptions::new().write(true).open(path)?;
        // drop a torn record left by an interrupted append before extending
        let whole = (HEADER_BYTES + VALUE_BYTES * extent.len) as u64;
        if f.metadata()?.len() != whole {
            f.set_len(whole)?;
        }
        f.seek(SeekFrom::Start(whole))?;
        f.write_all(&encode_values(new_values))?;
        Ok(())
    }

    pub fn series_extent(&self, instrument: &str, attribute: &str, frequency: &str) -> Result<SeriesExtent, StorageError> {
        let path = self.series_path(instrument, attribute, frequency);
        let mut f = self.open_series(&path, instrument, attribute, frequency)?;
        series_extent_of(&mut f)
    }

    /// Values for calendar indices `lo..=hi`. Positions not covered by the
    /// stored range are NaN. Only the overlapping bytes are read.
    pub fn read_series(
        &self,
        instrument: &str,
        attribute: &str,
        frequency: &str,
        lo: usize,
        hi: usize,
    ) -> Result<Vec<f32>, StorageError> {
        if lo > hi {
            return Err(StorageError::InvalidRange { lo, hi });
        }
        self.reads.fetch_add(1, Ordering::Relaxed);
        let path = self.series_path(instrument, attribute, frequency);
        let mut f = self.open_series(&path, instrument, attribute, frequency)?;
        let extent = series_extent_of(&mut f)?;
        let mut out = vec![f32::NAN; hi - lo + 1];
        let Some(last) = extent.last_index() else {
            return Ok(out);
        };
        let (a, b) = (lo.max(extent.start_index), hi.min(last));
        if a > b {
            return Ok(out);
        }
        f.seek(SeekFrom::Start((HEADER_BYTES + VALUE_BYTES * (a - extent.start_index)) as u64))?;
        let mut buf = vec![0u8; VALUE_BYTES * (b - a + 1)];
        f.read_exact(&mut buf)?;
        for (slot, v) in out[a - lo..=b - lo].iter_mut().zip(decode_values(&buf)) {
            *slot = v;
        }
        Ok(out)
    }

    /// Reads a whole series file.
    pub fn load_series(&self, instrument: &str, attribute: &str, frequency: &str) -> Result<AttributeSeries, StorageError> {
        let path = self.series_path(instrument, attribute, frequency);
        let mut f = self.open_series(&path, instrument, attribute, frequency)?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes)?;
        let whole = HEADER_BYTES + (bytes.len().saturating_sub(HEADER_BYTES) / VALUE_BYTES) * VALUE_BYTES;
        bytes.truncate(whole);
        AttributeSeries::decode(&bytes)
    }

    fn open_series(&self, path: &Path, instrument: &str, attribute: &str, frequency: &str) -> Result<File, StorageError> {
        File::open(path).map_err(|e| {
            if e.kind() == io::ErrorKind::NotFound {
                StorageError::MissingSeries {
                    instrument: instrument.to_string(),
                    attribute: attribute.to_string(),
                    frequency: frequency.to_string(),
                }
            } else {
                e.into()
            }
        })
    }

    /// Whether any attribute file exists for the instrument.
    pub fn has_instrument(&self, instrument: &str) -> bool {
        self.root.join("features").join(instrument.to_lowercase()).is_dir()
    }

    /// Directory names under `features/` (lowercase symbols).
    pub fn list_instruments(&self) -> Result<Vec<String>, StorageError> {
        let mut out = Vec::new();
        for entry in fs::read_dir(self.root.join("features"))? {
            let entry = entry?;
            if entry.file_type()?.is_dir() {
                out.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        out.sort();
        Ok(out)
    }

    /// Total bytes and value count of every feature file.
    pub fn feature_footprint(&self) -> Result<(u64, u64), StorageError> {
        let (mut bytes, mut values) = (0u64, 0u64);
        for inst in self.list_instruments()? {
            for entry in fs::read_dir(self.root.join("features").join(inst))? {
                let len = entry?.metadata()?.len();
                bytes += len;
                values += len.saturating_sub(HEADER_BYTES as u64) / VALUE_BYTES as u64;
            }
        }
        Ok((bytes, values))
    }

    // ---- pools ----

    pub fn read_pool(&self, pool: &str) -> Result<InstrumentPool, StorageError> {
        match fs::read_to_string(self.pool_path(pool)) {
            Ok(text) => InstrumentPool::parse(pool, &text),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Err(StorageError::MissingPool(pool.to_string())),
            Err(e) => Err(e.into()),
        }
    }

    pub fn write_pool(&self, pool: &InstrumentPool) -> Result<(), StorageError> {
        check_name(pool.name())?;
        write_atomic(&self.pool_path(pool.name()), pool.render().as_bytes())?;
        Ok(())
    }

    /// Records the membership set at `date`, creating the pool if needed.
    pub fn append_pool(&self, pool: &str, date: NaiveDate, members: &BTreeSet<String>) -> Result<(), StorageError> {
        let mut p = match self.read_pool(pool) {
            Ok(p) => p,
            Err(StorageError::MissingPool(_)) => InstrumentPool::new(pool),
            Err(e) => return Err(e),
        };
        p.append(date, members)?;
        self.write_pool(&p)
    }

    pub fn resolve_pool(
        &self,
        calendar: &Calendar,
        pool: &str,
        lo: usize,
        hi: usize,
    ) -> Result<BTreeMap<String, Vec<IndexInterval>>, StorageError> {
        Ok(self.read_pool(pool)?.resolve(calendar, lo, hi))
    }
}

fn series_extent_of(f: &mut File) -> Result<SeriesExtent, StorageError> {
    let size = f.metadata()?.len() as usize;
    if size < HEADER_BYTES {
        return Err(StorageError::Corrupt(format!("{size}-byte file has no header")));
    }
    let mut header = [0u8; HEADER_BYTES];
    f.seek(SeekFrom::Start(0))?;
    f.read_exact(&mut header)?;
    Ok(SeriesExtent {
        start_index: u32::from_le_bytes(header) as usize,
        len: (size - HEADER_BYTES) / VALUE_BYTES,
    })
}

/// Names become path components; reject anything that could escape the tree.
pub(crate) fn check_name(name: &str) -> Result<(), StorageError> {
    let ok = !name.is_empty()
        && name != "."
        && name != ".."
        && !name.chars().any(|c| c == '/' || c == '\\' || c == '\0' || c.is_whitespace());
    if ok {
        Ok(())
    } else {
        Err(StorageError::InvalidName(name.to_string()))
    }
}

/// Write to a sibling temp file, then rename over the target.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
    }
    fs::rename(&tmp, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dates(n: usize) -> Vec<NaiveDate> {
        let base = NaiveDate::from_ymd_opt(2007, 1, 4).unwrap();
        (0..n).map(|k| base + chrono::Days::new(k as u64)).collect()
    }

    fn store_with_calendar(n: usize) -> (tempfile::TempDir, Store) {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        store.write_calendar("day", &dates(n)).unwrap();
        (dir, store)
    }

    #[test]
    fn calendar_round_trip_and_append() {
        let (_d, store) = store_with_calendar(2);
        assert_eq!(store.read_calendar("day").unwrap().dates(), &dates(2)[..]);
        store.write_calendar("day", &dates(3)).unwrap();
        assert_eq!(store.read_calendar("day").unwrap().dates(), &dates(3)[..]);
        let text = fs::read_to_string(store.calendar_path("day")).unwrap();
        assert_eq!(text, "2007-01-04\n2007-01-05\n2007-01-06\n");
    }

    #[test]
    fn calendar_prefix_mismatch() {
        let (_d, store) = store_with_calendar(2);
        let mut other = dates(3);
        other.remove(1);
        assert!(matches!(
            store.write_calendar("day", &other),
            Err(StorageError::PrefixMismatch { .. })
        ));
        // a shorter calendar is not a superset either
        assert!(store.write_calendar("day", &dates(1)).is_err());
    }

    #[test]
    fn series_bytes_match_layout() {
        let (_d, store) = store_with_calendar(5);
        store.write_series("AAA", "close", "day", 2, &[10.0, 11.0]).unwrap();
        let bytes = fs::read(store.series_path("AAA", "close", "day")).unwrap();
        assert_eq!(bytes, encode_series(2, &[10.0, 11.0]));
        assert!(store.series_path("AAA", "close", "day").ends_with("features/aaa/close.day.bin"));
    }

    #[test]
    fn empty_series_is_four_bytes() {
        let (_d, store) = store_with_calendar(5);
        store.write_series("AAA", "close", "day", 0, &[]).unwrap();
        assert_eq!(fs::metadata(store.series_path("AAA", "close", "day")).unwrap().len(), 4);
    }

    #[test]
    fn write_beyond_calendar() {
        let (_d, store) = store_with_calendar(3);
        assert!(matches!(
            store.write_series("AAA", "close", "day", 2, &[1.0, 2.0]),
            Err(StorageError::IndexBeyondCalendar { .. })
        ));
        assert!(store.write_series("AAA", "close", "day", 4, &[]).is_err());
    }

    #[test]
    fn read_pads_with_nan() {
        let (_d, store) = store_with_calendar(6);
        store.write_series("AAA", "close", "day", 2, &[10.0, 11.0]).unwrap();
        let v = store.read_series("AAA", "close", "day", 0, 3).unwrap();
        assert!(v[0].is_nan() && v[1].is_nan());
        assert_eq!(&v[2..], &[10.0, 11.0]);
        assert_eq!(store.read_series("AAA", "close", "day", 2, 2).unwrap(), vec![10.0]);
        let tail = store.read_series("AAA", "close", "day", 4, 5).unwrap();
        assert!(tail.iter().all(|x| x.is_nan()) && tail.len() == 2);
    }

    #[test]
    fn append_extends_and_is_byte_equivalent() {
        let (_d, store) = store_with_calendar(6);
        store.write_series("AAA", "close", "day", 1, &[10.0, 11.0]).unwrap();
        let before = fs::read(store.series_path("AAA", "close", "day")).unwrap();
        store.append_series("AAA", "close", "day", &[]).unwrap();
        assert_eq!(fs::read(store.series_path("AAA", "close", "day")).unwrap(), before);
        store.append_series("AAA", "close", "day", &[12.0]).unwrap();
        assert_eq!(store.read_series("AAA", "close", "day", 1, 3).unwrap(), vec![10.0, 11.0, 12.0]);
        store.write_series("BBB", "close", "day", 1, &[10.0, 11.0, 12.0]).unwrap();
        assert_eq!(
            fs::read(store.series_path("AAA", "close", "day")).unwrap(),
            fs::read(store.series_path("BBB", "close", "day")).unwrap()
        );
    }

    #[test]
    fn append_errors() {
        let (_d, store) = store_with_calendar(3);
        assert!(matches!(
            store.append_series("ZZZ", "close", "day", &[1.0]),
            Err(StorageError::MissingSeries { .. })
        ));
        store.write_series("AAA", "close", "day", 1, &[1.0, 2.0]).unwrap();
        assert!(matches!(
            store.append_series("AAA", "close", "day", &[3.0]),
            Err(StorageError::IndexBeyondCalendar { .. })
        ));
    }

    #[test]
    fn missing_series_and_pool() {
        let (_d, store) = store_with_calendar(3);
        assert!(matches!(
            store.read_series("AAA", "close", "day", 0, 1),
            Err(StorageError::MissingSeries { .. })
        ));
        let cal = store.read_calendar("day").unwrap();
        assert!(matches!(
            store.resolve_pool(&cal, "csi300", 0, 1),
            Err(StorageError::MissingPool(_))
        ));
    }

    #[test]
    fn pool_append_persists() {
        let (_d, store) = store_with_calendar(3);
        let ds = dates(3);
        let members: BTreeSet<String> = ["AAA".to_string()].into();
        store.append_pool("p", ds[0], &members).unwrap();
        store.append_pool("p", ds[1], &members).unwrap();
        assert!(matches!(
            store.append_pool("p", ds[0], &members),
            Err(StorageError::NonMonotonicUpdate { .. })
        ));
        let text = fs::read_to_string(store.pool_path("p")).unwrap();
        assert_eq!(text, "AAA\t2007-01-04\t2007-01-05\n");
        let cal = store.read_calendar("day").unwrap();
        assert_eq!(store.resolve_pool(&cal, "p", 0, 2).unwrap()["AAA"], vec![(0, 1)]);
    }

    #[test]
    fn names_cannot_escape_root() {
        let (_d, store) = store_with_calendar(3);
        for bad in ["..", "a/b", "", "a b"] {
            assert!(store.write_series(bad, "close", "day", 0, &[]).is_err(), "{bad}");
        }
    }
}
