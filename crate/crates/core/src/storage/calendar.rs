use chrono::NaiveDate;

use super::StorageError;

/// Direction used when a timestamp does not fall exactly on a calendar entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rounding {
    /// Round to the next listed timestamp at or after the query.
    Forward,
    /// Round to the last listed timestamp at or before the query.
    Backward,
}

/// The shared timeline of one frequency. Index `k` is the position of the
/// `k`-th timestamp; the index space is dense.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Calendar {
    frequency: String,
    dates: Vec<NaiveDate>,
}

impl Calendar {
    pub fn new(frequency: impl Into<String>, dates: Vec<NaiveDate>) -> Result<Self, StorageError> {
        if let Some(pos) = dates.windows(2).position(|w| w[0] >= w[1]) {
            return Err(StorageError::NonMonotonicCalendar {
                line: pos + 2,
                date: dates[pos + 1],
            });
        }
        Ok(Calendar {
            frequency: frequency.into(),
            dates,
        })
    }

    /// Parses the on-disk text form: one ISO-8601 date per line. Blank lines
    /// are ignored so a trailing newline is harmless.
    pub fn parse(frequency: impl Into<String>, text: &str) -> Result<Self, StorageError> {
        let mut dates = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let date = parse_date(line).ok_or_else(|| StorageError::Malformed {
                what: "calendar",
                line: n + 1,
                detail: format!("not an ISO-8601 date: {line:?}"),
            })?;
            dates.push(date);
        }
        Calendar::new(frequency, dates)
    }

    pub fn render(&self) -> String {
        let mut out = String::with_capacity(self.dates.len() * 11);
        for d in &self.dates {
            out.push_str(&d.format("%Y-%m-%d").to_string());
            out.push('\n');
        }
        out
    }

    pub fn frequency(&self) -> &str {
        &self.frequency
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn date(&self, index: usize) -> Option<NaiveDate> {
        self.dates.get(index).copied()
    }

    /// Maps a timestamp to its calendar index, rounding when it is not listed.
    pub fn index_of(&self, t: NaiveDate, rounding: Rounding) -> Result<usize, StorageError> {
        match self.dates.binary_search(&t) {
            Ok(i) => Ok(i),
            // `i` is the insertion point: dates[i-1] < t < dates[i]
            Err(i) => match rounding {
                Rounding::Forward if i < self.dates.len() => Ok(i),
                Rounding::Backward if i > 0 => Ok(i - 1),
                _ => Err(StorageError::OutOfRange { date: t, rounding }),
            },
        }
    }

    /// Whether `self` is a prefix of `other` (same frequency not checked).
    pub fn is_prefix_of(&self, other: &Calendar) -> bool {
        other.dates.len() >= self.dates.len() && other.dates[..self.dates.len()] == self.dates[..]
    }
}

pub fn parse_date(s: &str) -> Option<NaiveDate> {
    NaiveDate::parse_from_str(s, "%Y-%m-%d").ok()
}
