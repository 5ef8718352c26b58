use std::collections::{BTreeMap, BTreeSet};

use chrono::NaiveDate;

use super::calendar::{parse_date, Calendar, Rounding};
use super::StorageError;

/// Inclusive interval of calendar indices.
pub type IndexInterval = (usize, usize);

/// Time-varying instrument membership, stored as closed date intervals.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InstrumentPool {
    name: String,
    memberships: BTreeMap<String, Vec<(NaiveDate, NaiveDate)>>,
}

impl InstrumentPool {
    pub fn new(name: impl Into<String>) -> Self {
        InstrumentPool {
            name: name.into(),
            memberships: BTreeMap::new(),
        }
    }

    /// Builds a pool from explicit intervals, validating order and overlap.
    pub fn from_intervals(
        name: impl Into<String>,
        intervals: impl IntoIterator<Item = (String, NaiveDate, NaiveDate)>,
    ) -> Result<Self, StorageError> {
        let mut memberships: BTreeMap<String, Vec<(NaiveDate, NaiveDate)>> = BTreeMap::new();
        for (symbol, enter, exit) in intervals {
            if enter > exit {
                return Err(StorageError::InvalidPool(format!(
                    "{symbol}: enter {enter} after exit {exit}"
                )));
            }
            memberships.entry(symbol).or_default().push((enter, exit));
        }
        for (symbol, spans) in memberships.iter_mut() {
            spans.sort();
            if let Some(w) = spans.windows(2).find(|w| w[1].0 <= w[0].1) {
                return Err(StorageError::InvalidPool(format!(
                    "{symbol}: intervals [{}, {}] and [{}, {}] overlap",
                    w[0].0, w[0].1, w[1].0, w[1].1
                )));
            }
        }
        Ok(InstrumentPool {
            name: name.into(),
            memberships,
        })
    }

    /// Parses `SYMBOL<TAB>ENTER<TAB>EXIT` lines.
    pub fn parse(name: impl Into<String>, text: &str) -> Result<Self, StorageError> {
        let mut rows = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let malformed = |detail: String| StorageError::Malformed {
                what: "pool",
                line: n + 1,
                detail,
            };
            let mut fields = line.split('\t');
            let (Some(symbol), Some(enter), Some(exit), None) =
                (fields.next(), fields.next(), fields.next(), fields.next())
            else {
                return Err(malformed("expected SYMBOL<TAB>ENTER<TAB>EXIT".into()));
            };
            if symbol.is_empty() {
                return Err(malformed("empty symbol".into()));
            }
            let enter = parse_date(enter.trim()).ok_or_else(|| malformed(format!("bad date {enter:?}")))?;
            let exit = parse_date(exit.trim()).ok_or_else(|| malformed(format!("bad date {exit:?}")))?;
            rows.push((symbol.to_string(), enter, exit));
        }
        InstrumentPool::from_intervals(name, rows)
    }

    /// One line per interval, grouped by symbol in ascending order.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (symbol, spans) in &self.memberships {
            for (enter, exit) in spans {
                out.push_str(&format!(
                    "{symbol}\t{}\t{}\n",
                    enter.format("%Y-%m-%d"),
                    exit.format("%Y-%m-%d")
                ));
            }
        }
        out
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn memberships(&self) -> &BTreeMap<String, Vec<(NaiveDate, NaiveDate)>> {
        &self.memberships
    }

    /// The latest date recorded anywhere in the pool.
    pub fn last_date(&self) -> Option<NaiveDate> {
        self.memberships.values().filter_map(|s| s.last().map(|iv| iv.1)).max()
    }

    /// `{ i : some interval of i contains t }`
    pub fn members_at(&self, t: NaiveDate) -> BTreeSet<&str> {
        self.memberships
            .iter()
            .filter(|(_, spans)| spans.iter().any(|&(a, b)| a <= t && t <= b))
            .map(|(s, _)| s.as_str())
            .collect()
    }

    /// Records the membership set observed at `date`. Members whose interval
    /// ended at the previous update are extended; absent members keep their
    /// interval closed at that previous update; newcomers open `[date, date]`.
    ///
    /// An empty set is rejected: the interval format cannot record a date
    /// on which nobody was a member, so a later re-entry would silently
    /// bridge the gap.
    pub fn append(&mut self, date: NaiveDate, members: &BTreeSet<String>) -> Result<(), StorageError> {
        if members.is_empty() {
            return Err(StorageError::InvalidPool(format!("empty member set at {date}")));
        }
        let last = self.last_date();
        if let Some(last) = last {
            if date <= last {
                return Err(StorageError::NonMonotonicUpdate { last, date });
            }
        }
        for symbol in members {
            let spans = self.memberships.entry(symbol.clone()).or_default();
            match spans.last_mut() {
                Some(open) if Some(open.1) == last => open.1 = date,
                _ => spans.push((date, date)),
            }
        }
        Ok(())
    }

    /// Membership intervals converted to calendar indices and intersected
    /// with `[lo, hi]`. Instruments with no overlap are omitted.
    pub fn resolve(&self, calendar: &Calendar, lo: usize, hi: usize) -> BTreeMap<String, Vec<IndexInterval>> {
        let mut out = BTreeMap::new();
        for (symbol, spans) in &self.memberships {
            let mut ivs = Vec::new();
            for &(enter, exit) in spans {
                let (Ok(a), Ok(b)) = (
                    calendar.index_of(enter, Rounding::Forward),
                    calendar.index_of(exit, Rounding::Backward),
                ) else {
                    continue;
                };
                let (a, b) = (a.max(lo), b.min(hi));
                if a <= b {
                    ivs.push((a, b));
                }
            }
            if !ivs.is_empty() {
                out.insert(symbol.clone(), ivs);
            }
        }
        out
    }
}
