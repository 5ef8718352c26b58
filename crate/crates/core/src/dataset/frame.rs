use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io;

use crate::hash::Fnv64;
use crate::storage::{decode_values, Calendar, IndexInterval};

/// Row label: position in the frame's instrument list plus calendar index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RowKey {
    pub instrument: u32,
    pub index: u32,
}

/// Combined `(instrument, calendar index) x expression` table. Rows are
/// sorted by instrument symbol, then index; cells are row-major `f32`.
#[derive(Debug, Clone, Default)]
pub struct AlignedFrame {
    columns: Vec<String>,
    instruments: Vec<String>,
    rows: Vec<RowKey>,
    values: Vec<f32>,
}

/// Rows of one instrument before combination.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Block {
    pub indices: Vec<u32>,
    /// Row-major, `indices.len() * ncols`.
    pub values: Vec<f32>,
}

impl Block {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

impl AlignedFrame {
    pub fn empty(columns: Vec<String>) -> Self {
        AlignedFrame {
            columns,
            ..Default::default()
        }
    }

    /// Concatenates blocks in ascending symbol order; empty blocks are dropped.
    pub fn from_blocks(columns: Vec<String>, blocks: BTreeMap<String, Block>) -> Self {
        let ncols = columns.len();
        let mut frame = AlignedFrame::empty(columns);
        for (symbol, block) in blocks {
            debug_assert_eq!(block.values.len(), block.indices.len() * ncols);
            if block.is_empty() {
                continue;
            }
            let id = frame.instruments.len() as u32;
            frame.instruments.push(symbol);
            frame
                .rows
                .extend(block.indices.iter().map(|&index| RowKey { instrument: id, index }));
            frame.values.extend_from_slice(&block.values);
        }
        frame
    }

    /// Splits back into per-instrument blocks.
    pub fn into_blocks(self) -> BTreeMap<String, Block> {
        let ncols = self.columns.len();
        let mut out: BTreeMap<String, Block> = BTreeMap::new();
        for (r, key) in self.rows.iter().enumerate() {
            let b = out.entry(self.instruments[key.instrument as usize].clone()).or_default();
            b.indices.push(key.index);
            b.values.extend_from_slice(&self.values[r * ncols..(r + 1) * ncols]);
        }
        out
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn set_columns(&mut self, columns: Vec<String>) {
        assert_eq!(columns.len(), self.columns.len());
        self.columns = columns;
    }

    pub fn instruments(&self) -> &[String] {
        &self.instruments
    }

    pub fn ncols(&self) -> usize {
        self.columns.len()
    }

    pub fn nrows(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[RowKey] {
        &self.rows
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row_symbol(&self, row: usize) -> &str {
        &self.instruments[self.rows[row].instrument as usize]
    }

    pub fn row_values(&self, row: usize) -> &[f32] {
        let n = self.ncols();
        &self.values[row * n..(row + 1) * n]
    }

    /// `(symbol, index)` of every row.
    pub fn row_set(&self) -> Vec<(String, u32)> {
        (0..self.nrows())
            .map(|r| (self.row_symbol(r).to_string(), self.rows[r].index))
            .collect()
    }

    /// New frame with columns picked (and possibly repeated) by position.
    pub fn select_columns(&self, picks: &[usize], labels: Vec<String>) -> AlignedFrame {
        assert_eq!(picks.len(), labels.len());
        let n = self.ncols();
        let mut values = Vec::with_capacity(self.nrows() * picks.len());
        for r in 0..self.nrows() {
            let row = &self.values[r * n..(r + 1) * n];
            values.extend(picks.iter().map(|&c| row[c]));
        }
        AlignedFrame {
            columns: labels,
            instruments: self.instruments.clone(),
            rows: self.rows.clone(),
            values,
        }
    }

    /// Rows whose index lies in `lo..=hi`.
    pub fn restrict(self, lo: usize, hi: usize) -> AlignedFrame {
        let inside = |k: &RowKey| (lo..=hi).contains(&(k.index as usize));
        if self.rows.iter().all(inside) {
            return self;
        }
        let n = self.ncols();
        let mut out = AlignedFrame::empty(self.columns);
        let mut remap = vec![u32::MAX; self.instruments.len()];
        for (r, key) in self.rows.iter().enumerate() {
            if !inside(key) {
                continue;
            }
            let id = &mut remap[key.instrument as usize];
            if *id == u32::MAX {
                *id = out.instruments.len() as u32;
                out.instruments.push(self.instruments[key.instrument as usize].clone());
            }
            out.rows.push(RowKey {
                instrument: *id,
                index: key.index,
            });
            out.values.extend_from_slice(&self.values[r * n..(r + 1) * n]);
        }
        out
    }

    /// Merges two frames over disjoint index ranges, keeping sort order.
    pub fn merge(self, later: AlignedFrame) -> AlignedFrame {
        assert_eq!(self.ncols(), later.ncols());
        let columns = self.columns.clone();
        let mut blocks = self.into_blocks();
        for (s, b) in later.into_blocks() {
            let dst = blocks.entry(s).or_default();
            dst.indices.extend_from_slice(&b.indices);
            dst.values.extend_from_slice(&b.values);
        }
        AlignedFrame::from_blocks(columns, blocks)
    }

    /// Stable 64-bit digest over rows in canonical order: symbol, index and
    /// the bit pattern of every cell.
    pub fn digest(&self) -> u64 {
        let mut h = Fnv64::new();
        h.write(&(self.ncols() as u32).to_le_bytes());
        for r in 0..self.nrows() {
            h.write(self.row_symbol(r).as_bytes());
            h.write(&[0xff]);
            h.write(&self.rows[r].index.to_le_bytes());
            for v in self.row_values(r) {
                h.write(&v.to_bits().to_le_bytes());
            }
        }
        h.finish()
    }

    /// Same rows and bit-identical cells (column labels ignored).
    pub fn bitwise_eq(&self, other: &AlignedFrame) -> bool {
        self.ncols() == other.ncols()
            && self.row_set() == other.row_set()
            && self.values.len() == other.values.len()
            && self.values.iter().zip(&other.values).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// First row where the two frames differ, for diagnostics.
    pub fn first_difference(&self, other: &AlignedFrame) -> Option<String> {
        let n = self.nrows().max(other.nrows());
        for r in 0..n {
            let describe = |f: &AlignedFrame| {
                (r < f.nrows()).then(|| (f.row_symbol(r).to_string(), f.rows[r].index, f.row_values(r).to_vec()))
            };
            let (a, b) = (describe(self), describe(other));
            let same = match (&a, &b) {
                (Some(x), Some(y)) => {
                    x.0 == y.0
                        && x.1 == y.1
                        && x.2.len() == y.2.len()
                        && x.2.iter().zip(&y.2).all(|(p, q)| p.to_bits() == q.to_bits())
                }
                _ => false,
            };
            if !same {
                return Some(format!("row {r}: {a:?} vs {b:?}"));
            }
        }
        None
    }

    // ---- binary layout ----

    /// `u32` LE column count, then row-major `f32` LE cells.
    pub fn encode_payload(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 * self.values.len());
        out.extend_from_slice(&(self.ncols() as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Row index sidecar: one line per instrument,
    /// `SYMBOL<TAB>first_row<TAB>lo-hi[,lo-hi...]` with maximal index runs.
    pub fn encode_index(&self) -> String {
        let mut out = String::new();
        let mut r = 0;
        while r < self.nrows() {
            let id = self.rows[r].instrument;
            let start = r;
            let mut runs: Vec<IndexInterval> = Vec::new();
            while r < self.nrows() && self.rows[r].instrument == id {
                let i = self.rows[r].index as usize;
                match runs.last_mut() {
                    Some(run) if run.1 + 1 == i => run.1 = i,
                    _ => runs.push((i, i)),
                }
                r += 1;
            }
            let runs: Vec<String> = runs.iter().map(|(a, b)| format!("{a}-{b}")).collect();
            let _ = writeln!(out, "{}\t{start}\t{}", self.instruments[id as usize], runs.join(","));
        }
        out
    }

    /// Inverse of [`encode_payload`](Self::encode_payload) plus
    /// [`encode_index`](Self::encode_index).
    pub fn decode(columns: Vec<String>, payload: &[u8], index: &str) -> Result<AlignedFrame, String> {
        let layout = FrameIndex::parse(index)?;
        if payload.len() < 4 {
            return Err("payload has no header".into());
        }
        let ncols = u32::from_le_bytes(payload[..4].try_into().unwrap()) as usize;
        if ncols != columns.len() {
            return Err(format!("payload has {ncols} columns, expected {}", columns.len()));
        }
        // with no columns the payload would not bound the row count
        if ncols == 0 {
            return Err("frame has no columns".into());
        }
        let body = &payload[4..];
        let cells = layout.nrows().checked_mul(ncols).ok_or("row count overflow")?;
        if body.len() != cells.checked_mul(4).ok_or("size overflow")? {
            return Err(format!("payload holds {} bytes, index implies {} cells", body.len(), cells));
        }
        let mut frame = AlignedFrame::empty(columns);
        frame.values = decode_values(body);
        for (id, entry) in layout.entries.into_iter().enumerate() {
            frame
                .rows
                .extend(entry.indices().map(|index| RowKey { instrument: id as u32, index }));
            frame.instruments.push(entry.symbol);
        }
        Ok(frame)
    }

    // ---- export ----

    /// CSV with header `instrument,datetime,<columns...>`; NaN cells are empty.
    pub fn write_csv<W: io::Write>(&self, calendar: &Calendar, mut out: W) -> io::Result<()> {
        let mut line = String::from("instrument,datetime");
        for c in &self.columns {
            line.push(',');
            line.push_str(&csv_field(c));
        }
        writeln!(out, "{line}")?;
        for r in 0..self.nrows() {
            line.clear();
            line.push_str(&csv_field(self.row_symbol(r)));
            line.push(',');
            match calendar.date(self.rows[r].index as usize) {
                Some(d) => {
                    let _ = write!(line, "{}", d.format("%Y-%m-%d"));
                }
                None => {
                    let _ = write!(line, "#{}", self.rows[r].index);
                }
            }
            for v in self.row_values(r) {
                line.push(',');
                if !v.is_nan() {
                    let _ = write!(line, "{v}");
                }
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Parsed row index sidecar.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameIndex {
    pub entries: Vec<IndexEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexEntry {
    pub symbol: String,
    pub first_row: usize,
    pub runs: Vec<IndexInterval>,
}

impl IndexEntry {
    pub fn nrows(&self) -> usize {
        self.runs.iter().map(|(a, b)| b - a + 1).sum()
    }

    pub fn indices(&self) -> impl Iterator<Item = u32> + '_ {
        self.runs.iter().flat_map(|&(a, b)| (a as u32)..=(b as u32))
    }

    /// Row offsets (relative to `first_row`) of indices in `lo..=hi`.
    pub fn row_span(&self, lo: usize, hi: usize) -> (usize, usize) {
        let mut before = 0;
        let mut inside = 0;
        for &(a, b) in &self.runs {
            if b < lo {
                before += b - a + 1;
            } else if a <= hi {
                let (x, y) = (a.max(lo), b.min(hi));
                before += x - a;
                inside += y - x + 1;
            }
        }
        (before, inside)
    }
}

impl FrameIndex {
    pub fn nrows(&self) -> usize {
        self.entries.iter().map(IndexEntry::nrows).sum()
    }

    pub fn parse(text: &str) -> Result<FrameIndex, String> {
        let mut entries: Vec<IndexEntry> = Vec::new();
        let mut expected_row = 0usize;
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let err = |d: &str| format!("index line {}: {d}", n + 1);
            let mut f = line.split('\t');
            let (Some(symbol), Some(first), Some(runs), None) = (f.next(), f.next(), f.next(), f.next()) else {
                return Err(err("expected 3 tab-separated fields"));
            };
            if symbol.is_empty() {
                return Err(err("empty symbol"));
            }
            if entries.last().is_some_and(|e| e.symbol.as_str() >= symbol) {
                return Err(err("symbols not strictly ascending"));
            }
            let first_row: usize = first.parse().map_err(|_| err("bad row number"))?;
            if first_row != expected_row {
                return Err(err("row numbers not contiguous"));
            }
            let mut parsed: Vec<IndexInterval> = Vec::new();
            for run in runs.split(',') {
                let (a, b) = run.split_once('-').ok_or_else(|| err("run is not lo-hi"))?;
                let a: u32 = a.parse().map_err(|_| err("bad run start"))?;
                let b: u32 = b.parse().map_err(|_| err("bad run end"))?;
                if a > b || parsed.last().is_some_and(|p| p.1 as u64 + 1 >= a as u64) {
                    return Err(err("runs must be ordered and disjoint"));
                }
                parsed.push((a as usize, b as usize));
            }
            let entry = IndexEntry {
                symbol: symbol.to_string(),
                first_row,
                runs: parsed,
            };
            expected_row = expected_row.checked_add(entry.nrows()).ok_or_else(|| err("row overflow"))?;
            entries.push(entry);
        }
        Ok(FrameIndex { entries })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(indices: &[u32], ncols: usize, base: f32) -> Block {
        Block {
            indices: indices.to_vec(),
            values: (0..indices.len() * ncols).map(|i| base + i as f32).collect(),
        }
    }

    fn cols(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn combine_orders_by_symbol_and_drops_empty() {
        let blocks = BTreeMap::from([
            ("B".to_string(), block(&[0, 1], 1, 10.0)),
            ("A".to_string(), block(&[2], 1, 0.0)),
            ("C".to_string(), Block::default()),
        ]);
        let f = AlignedFrame::from_blocks(cols(1), blocks);
        assert_eq!(
            f.row_set(),
            vec![("A".into(), 2), ("B".into(), 0), ("B".into(), 1)]
        );
        assert_eq!(f.instruments(), &["A".to_string(), "B".to_string()]);
    }

    #[test]
    fn payload_and_index_round_trip() {
        let blocks = BTreeMap::from([
            ("AAA".to_string(), block(&[0, 1, 2, 5, 6], 2, 0.0)),
            ("BBB".to_string(), block(&[3], 2, 100.0)),
        ]);
        let f = AlignedFrame::from_blocks(cols(2), blocks);
        assert_eq!(f.encode_index(), "AAA\t0\t0-2,5-6\nBBB\t5\t3-3\n");
        let back = AlignedFrame::decode(cols(2), &f.encode_payload(), &f.encode_index()).unwrap();
        assert!(back.bitwise_eq(&f));
        assert_eq!(back.digest(), f.digest());
    }

    #[test]
    fn decode_rejects_inconsistent_sidecar() {
        let f = AlignedFrame::from_blocks(cols(1), BTreeMap::from([("A".to_string(), block(&[0, 1], 1, 0.0))]));
        assert!(AlignedFrame::decode(cols(1), &f.encode_payload(), "A\t0\t0-2\n").is_err());
        assert!(AlignedFrame::decode(cols(2), &f.encode_payload(), &f.encode_index()).is_err());
        assert!(FrameIndex::parse("B\t0\t0-0\nA\t1\t0-0\n").is_err());
        assert!(FrameIndex::parse("A\t0\t3-1\n").is_err());
        assert!(FrameIndex::parse("A\t0\t0-1,1-2\n").is_err());
        assert!(FrameIndex::parse("A\t1\t0-1\n").is_err());
        // a zero-column payload must not let the index claim any number of rows
        assert!(AlignedFrame::decode(vec![], &0u32.to_le_bytes(), "A\t0\t0-1111111111\n").is_err());
    }

    #[test]
    fn row_span_counts_runs() {
        let e = IndexEntry {
            symbol: "A".into(),
            first_row: 0,
            runs: vec![(0, 2), (5, 9)],
        };
        assert_eq!(e.row_span(0, 9), (0, 8));
        assert_eq!(e.row_span(1, 6), (1, 4));
        assert_eq!(e.row_span(3, 4), (3, 0));
        assert_eq!(e.row_span(10, 20), (8, 0));
    }

    #[test]
    fn restrict_and_merge() {
        let f = AlignedFrame::from_blocks(
            cols(1),
            BTreeMap::from([
                ("A".to_string(), block(&[0, 1, 2, 3], 1, 0.0)),
                ("B".to_string(), block(&[2, 3], 1, 10.0)),
            ]),
        );
        let head = f.clone().restrict(0, 1);
        let tail = f.clone().restrict(2, 3);
        assert_eq!(head.instruments(), &["A".to_string()]);
        assert!(head.merge(tail).bitwise_eq(&f));
    }

    #[test]
    fn digest_sees_nan_payloads_and_labels() {
        let a = AlignedFrame::from_blocks(cols(1), BTreeMap::from([("A".to_string(), block(&[0], 1, 0.0))]));
        let b = AlignedFrame::from_blocks(cols(1), BTreeMap::from([("B".to_string(), block(&[0], 1, 0.0))]));
        assert_ne!(a.digest(), b.digest());
        let mut n1 = block(&[0], 1, 0.0);
        n1.values[0] = f32::NAN;
        let mut n2 = n1.clone();
        n2.values[0] = -f32::NAN;
        let x = AlignedFrame::from_blocks(cols(1), BTreeMap::from([("A".to_string(), n1)]));
        let y = AlignedFrame::from_blocks(cols(1), BTreeMap::from([("A".to_string(), n2)]));
        assert!(!x.bitwise_eq(&y));
    }

    #[test]
    fn csv_export() {
        let cal = Calendar::parse("day", "2020-01-02\n2020-01-03\n").unwrap();
        let mut b = block(&[0, 1], 2, 1.5);
        b.values[3] = f32::NAN;
        let f = AlignedFrame::from_blocks(
            vec!["$close".into(), "MEAN($close,2)".into()],
            BTreeMap::from([("AAA".to_string(), b)]),
        );
        let mut out = Vec::new();
        f.write_csv(&cal, &mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "instrument,datetime,$close,\"MEAN($close,2)\"\nAAA,2020-01-02,1.5,2.5\nAAA,2020-01-03,3.5,\n"
        );
    }
}
