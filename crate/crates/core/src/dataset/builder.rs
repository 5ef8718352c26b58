use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::time::Instant;

use chrono::NaiveDate;
use rayon::prelude::*;

use super::{AlignedFrame, Block, BuildError};
use crate::cache::{
    DatasetCache, DatasetKey, ExprCache, ExprCacheKey, ExprLookup, Outcome, DEFAULT_MEMO_CAPACITY,
};
use crate::expr::{parse, CanonicalKey, EvalError, Evaluator, Expr, SeriesProvider, StoreProvider};
use crate::storage::{Calendar, IndexInterval, Rounding, Store, DEFAULT_FREQ};

/// Universe members with their membership intervals.
type Members = Vec<(String, Vec<IndexInterval>)>;

/// Which instruments a query covers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Universe {
    /// Time-varying membership read from the store.
    Pool(String),
    /// Fixed list, members on every day.
    Instruments(Vec<String>),
}

impl Universe {
    fn key(&self) -> String {
        match self {
            Universe::Pool(p) => format!("pool:{p}"),
            Universe::Instruments(list) => {
                let mut list = list.clone();
                list.sort();
                list.dedup();
                format!("instruments:{}", list.join(","))
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct QuerySpec {
    pub universe: Universe,
    /// Expression texts, in output column order.
    pub expressions: Vec<String>,
    pub start: NaiveDate,
    pub end: NaiveDate,
    pub frequency: String,
}

impl QuerySpec {
    pub fn new(universe: Universe, expressions: Vec<String>, start: NaiveDate, end: NaiveDate) -> Self {
        QuerySpec {
            universe,
            expressions,
            start,
            end,
            frequency: DEFAULT_FREQ.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BuildConfig {
    pub use_expr_cache: bool,
    pub use_dataset_cache: bool,
    pub workers: usize,
    pub memo_capacity: usize,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig {
            use_expr_cache: true,
            use_dataset_cache: true,
            workers: 1,
            memo_capacity: DEFAULT_MEMO_CAPACITY,
        }
    }
}

/// Wall-clock seconds spent per stage.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimings {
    pub load: f64,
    pub compute: f64,
    pub convert_index: f64,
    pub filter_pool: f64,
    pub combine: f64,
    pub total: f64,
}

impl StageTimings {
    pub const STAGES: [&'static str; 6] = ["load", "compute", "convert_index", "filter_pool", "combine", "total"];

    pub fn get(&self, stage: &str) -> Option<f64> {
        Some(match stage {
            "load" => self.load,
            "compute" => self.compute,
            "convert_index" => self.convert_index,
            "filter_pool" => self.filter_pool,
            "combine" => self.combine,
            "total" => self.total,
            _ => return None,
        })
    }
}

/// Work counters for one build.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BuildStats {
    /// Expression tree nodes actually computed (memo misses).
    pub node_evals: u64,
    /// Raw series range reads issued against the store.
    pub raw_reads: u64,
    pub expr_hits: u64,
    pub expr_partial: u64,
    pub expr_misses: u64,
    pub dataset: Option<Outcome>,
}

/// A store together with its two disk caches.
#[derive(Debug)]
pub struct Engine {
    store: Store,
    expr_cache: ExprCache,
    dataset_cache: DatasetCache,
}

impl Engine {
    /// Opens (creating if needed) the store at `root` and its caches under
    /// `root/cache`.
    pub fn open(root: impl AsRef<Path>) -> Result<Self, BuildError> {
        let root = root.as_ref();
        Ok(Engine {
            store: Store::open(root)?,
            expr_cache: ExprCache::open(root.join("cache").join("expr"))?,
            dataset_cache: DatasetCache::open(root.join("cache").join("dataset"))?,
        })
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn expr_cache(&self) -> &ExprCache {
        &self.expr_cache
    }

    pub fn dataset_cache(&self) -> &DatasetCache {
        &self.dataset_cache
    }

    pub fn build(&self, spec: &QuerySpec, config: &BuildConfig) -> Result<(AlignedFrame, StageTimings, BuildStats), BuildError> {
        let t0 = Instant::now();
        let reads0 = self.store.read_count();
        let query = Query::prepare(&self.store, spec)?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers.max(1))
            .build()
            .map_err(|e| BuildError::InvalidSpec(e.to_string()))?;
        let mut timings = StageTimings::default();
        let mut stats = BuildStats::default();

        let frame = if config.use_dataset_cache {
            let key = DatasetKey::new(query.exprs.iter().map(|(k, _)| k.clone()), spec.universe.key(), &spec.frequency);
            let version = query.calendar.len();
            let (frame, outcome) = self.dataset_cache.get_or_compute(&key, query.lo, query.hi, version, |from, hi| {
                // the lookup that led here counts as loading
                timings.load += t0.elapsed().as_secs_f64();
                pool.install(|| self.stages(&query, spec, config, from, hi, &mut timings, &mut stats))
            })?;
            if outcome == Outcome::Hit {
                timings.load = t0.elapsed().as_secs_f64();
            }
            stats.dataset = Some(outcome);
            frame
        } else {
            pool.install(|| self.stages(&query, spec, config, query.lo, query.hi, &mut timings, &mut stats))?.0
        };
        let frame = query.to_query_order(frame, spec);
        stats.raw_reads = self.store.read_count() - reads0;
        timings.total = t0.elapsed().as_secs_f64();
        Ok((frame, timings, stats))
    }

    /// Runs load → compute → convert → filter → combine for `from..=hi`.
    /// Returns the frame (columns in key order) and the last index whose
    /// rows can no longer change.
    #[allow(clippy::too_many_arguments)]
    fn stages(
        &self,
        query: &Query,
        spec: &QuerySpec,
        config: &BuildConfig,
        from: usize,
        hi: usize,
        timings: &mut StageTimings,
        stats: &mut BuildStats,
    ) -> Result<(AlignedFrame, Option<usize>), BuildError> {
        let t = Instant::now();
        let (members, pool_final) = self.resolve_universe(query, spec, from, hi)?;
        timings.filter_pool += t.elapsed().as_secs_f64();

        let t = Instant::now();
        let loaded: Vec<Loaded> = members
            .par_iter()
            .map(|(symbol, intervals)| self.load(query, config, symbol, intervals, from, hi))
            .collect::<Result<_, _>>()?;
        timings.load += t.elapsed().as_secs_f64();

        let t = Instant::now();
        let computed: Vec<Computed> = loaded
            .into_par_iter()
            .map(|l| self.compute(query, config, l, from, hi))
            .collect::<Result<_, _>>()?;
        timings.compute += t.elapsed().as_secs_f64();
        for c in &computed {
            stats.node_evals += c.node_evals;
            stats.expr_hits += c.hits;
            stats.expr_partial += c.partial;
            stats.expr_misses += c.misses;
        }

        let t = Instant::now();
        let converted: Vec<(Computed, Block)> = computed
            .into_par_iter()
            .map(|c| {
                let block = convert_index(&c.columns, from);
                (c, block)
            })
            .collect();
        timings.convert_index += t.elapsed().as_secs_f64();

        let t = Instant::now();
        let filtered: Vec<(String, Block, Option<usize>)> = converted
            .into_par_iter()
            .map(|(c, block)| {
                let block = filter_by_pool(&block, &c.intervals, query.exprs.len());
                // rows past the data tail may still change; None: none final
                let cap = match block.indices.iter().map(|&i| i as usize).find(|&i| c.data_tail.is_none_or(|d| i > d)) {
                    None => Some(usize::MAX),
                    Some(i) => i.checked_sub(1),
                };
                (c.symbol, block, cap)
            })
            .collect();
        timings.filter_pool += t.elapsed().as_secs_f64();

        let t = Instant::now();
        let mut settled = pool_final;
        let mut blocks = BTreeMap::new();
        for (symbol, block, cap) in filtered {
            settled = settled.zip(cap).map(|(a, b)| a.min(b));
            blocks.insert(symbol, block);
        }
        let frame = combine(query.columns(), blocks);
        timings.combine += t.elapsed().as_secs_f64();
        Ok((frame, settled.map(|s| s.min(hi))))
    }

    /// Member intervals over `from..=hi`, plus the last index the universe
    /// itself can no longer change at.
    fn resolve_universe(
        &self,
        query: &Query,
        spec: &QuerySpec,
        from: usize,
        hi: usize,
    ) -> Result<(Members, Option<usize>), BuildError> {
        match &spec.universe {
            Universe::Instruments(list) => {
                let mut list = list.clone();
                list.sort();
                list.dedup();
                Ok((list.into_iter().map(|s| (s, vec![(from, hi)])).collect(), Some(usize::MAX)))
            }
            Universe::Pool(name) => {
                let pool = self.store.read_pool(name)?;
                // later pool updates may add members on days after the last one recorded
                let last = pool
                    .last_date()
                    .and_then(|d| query.calendar.index_of(d, Rounding::Backward).ok());
                Ok((pool.resolve(&query.calendar, from, hi).into_iter().collect(), last))
            }
        }
    }

    fn load(
        &self,
        query: &Query,
        config: &BuildConfig,
        symbol: &str,
        intervals: &[IndexInterval],
        from: usize,
        hi: usize,
    ) -> Result<Loaded, BuildError> {
        let freq = &query.frequency;
        let mut tails: HashMap<&str, Option<usize>> = HashMap::new();
        for attr in query.exprs.iter().flat_map(|(_, e)| e.attributes()) {
            if !tails.contains_key(attr) {
                let extent = self
                    .store
                    .series_extent(symbol, attr, freq)
                    .map_err(|e| crate::expr::attribute_error(&self.store, e))?;
                tails.insert(attr, extent.last_index());
            }
        }
        let settled_for = |e: &Expr| -> Option<Option<usize>> {
            e.attributes().iter().try_fold(None, |acc: Option<usize>, a| {
                let tail = tails[a]?;
                Some(Some(acc.map_or(tail, |x| x.min(tail))))
            })
        };

        let mut cached = Vec::with_capacity(query.exprs.len());
        let mut settled = Vec::with_capacity(query.exprs.len());
        let mut need_from: HashMap<&str, usize> = HashMap::new();
        for (key, expr) in &query.exprs {
            // Some(None): no attributes, so nothing can lag
            let s = settled_for(expr);
            let lookup = match (config.use_expr_cache, s) {
                (true, Some(_)) => self
                    .expr_cache
                    .lookup(&ExprCacheKey::new(key.clone(), symbol, freq), from, hi)?,
                _ => ExprLookup::Miss,
            };
            let start = match &lookup {
                ExprLookup::Hit(_) => None,
                ExprLookup::PartialTail { covered_last, .. } => Some((covered_last + 1).max(from)),
                ExprLookup::Miss => Some(from),
            };
            if let Some(start) = start {
                let a = start.saturating_sub(expr.lookback());
                for attr in expr.attributes() {
                    let e = need_from.entry(attr).or_insert(a);
                    *e = (*e).min(a);
                }
            }
            cached.push(match lookup {
                ExprLookup::Hit(v) => Some(v),
                _ => None,
            });
            settled.push(s);
        }

        let mut raw = HashMap::new();
        for (attr, a) in need_from {
            let values = self
                .store
                .read_series(symbol, attr, freq, a, hi)
                .map_err(|e| crate::expr::attribute_error(&self.store, e))?;
            raw.insert(attr.to_string(), (a, values));
        }
        let data_tail = tails.values().try_fold(usize::MAX, |acc, t| t.map(|t| acc.min(t)));
        Ok(Loaded {
            symbol: symbol.to_string(),
            intervals: intervals.to_vec(),
            data_tail,
            cached,
            settled,
            raw,
        })
    }

    fn compute(&self, query: &Query, config: &BuildConfig, loaded: Loaded, from: usize, hi: usize) -> Result<Computed, BuildError> {
        let provider = MemProvider {
            raw: &loaded.raw,
            store: StoreProvider::new(&self.store, &query.frequency),
        };
        let version = query.calendar.len();
        let mut ev = Evaluator::new(&provider, &loaded.symbol, config.memo_capacity);
        let mut out = Computed {
            symbol: loaded.symbol.clone(),
            intervals: loaded.intervals,
            data_tail: loaded.data_tail,
            columns: Vec::with_capacity(query.exprs.len()),
            node_evals: 0,
            hits: 0,
            partial: 0,
            misses: 0,
        };
        for (((key, expr), cached), settled) in query.exprs.iter().zip(loaded.cached).zip(&loaded.settled) {
            let values = match (cached, settled) {
                (Some(v), _) => {
                    out.hits += 1;
                    v
                }
                (None, Some(settled)) if config.use_expr_cache => {
                    let ckey = ExprCacheKey::new(key.clone(), &loaded.symbol, &query.frequency);
                    let (v, state) = self.expr_cache.get_or_compute(&ckey, from, hi, *settled, version, |a, b| {
                        ev.eval(expr, a, b).map(to_f32).map_err(BuildError::from)
                    })?;
                    match state {
                        ExprLookup::Hit(_) => out.hits += 1,
                        ExprLookup::PartialTail { .. } => out.partial += 1,
                        ExprLookup::Miss => out.misses += 1,
                    }
                    v
                }
                (None, _) => to_f32(ev.eval(expr, from, hi)?),
            };
            out.columns.push(values);
        }
        out.node_evals = ev.node_evals();
        Ok(out)
    }
}

fn to_f32(v: Vec<f64>) -> Vec<f32> {
    v.into_iter().map(|x| x as f32).collect()
}

/// Turns per-expression columns over `from..` into rows labelled by index.
pub fn convert_index(columns: &[Vec<f32>], from: usize) -> Block {
    let n = columns.first().map_or(0, Vec::len);
    let mut values = Vec::with_capacity(n * columns.len());
    for r in 0..n {
        values.extend(columns.iter().map(|c| c[r]));
    }
    Block {
        indices: (from..from + n).map(|i| i as u32).collect(),
        values,
    }
}

/// Keeps exactly the rows whose index lies in one of `intervals`.
pub fn filter_by_pool(block: &Block, intervals: &[IndexInterval], ncols: usize) -> Block {
    let mut out = Block::default();
    for (r, &i) in block.indices.iter().enumerate() {
        let i = i as usize;
        if intervals.iter().any(|&(a, b)| a <= i && i <= b) {
            out.indices.push(i as u32);
            out.values.extend_from_slice(&block.values[r * ncols..(r + 1) * ncols]);
        }
    }
    out
}

/// Concatenates per-instrument blocks in ascending symbol order.
pub fn combine(columns: Vec<String>, blocks: BTreeMap<String, Block>) -> AlignedFrame {
    AlignedFrame::from_blocks(columns, blocks)
}

/// Query after parsing and date resolution. Expressions are the distinct
/// canonical forms in key order.
struct Query {
    calendar: Calendar,
    frequency: String,
    lo: usize,
    hi: usize,
    exprs: Vec<(CanonicalKey, Expr)>,
    /// For each query column, its position in `exprs`.
    picks: Vec<usize>,
}

impl Query {
    fn prepare(store: &Store, spec: &QuerySpec) -> Result<Query, BuildError> {
        if spec.expressions.is_empty() {
            return Err(BuildError::InvalidSpec("no expressions".into()));
        }
        if spec.start > spec.end {
            return Err(BuildError::InvalidSpec(format!("start {} is after end {}", spec.start, spec.end)));
        }
        if let Universe::Instruments(list) = &spec.universe {
            if list.is_empty() {
                return Err(BuildError::InvalidSpec("empty instrument list".into()));
            }
        }
        let mut parsed = Vec::with_capacity(spec.expressions.len());
        for text in &spec.expressions {
            let expr = parse(text).map_err(|source| BuildError::Parse {
                text: text.clone(),
                source,
            })?;
            parsed.push(expr);
        }
        let mut exprs: Vec<(CanonicalKey, Expr)> = parsed.iter().map(|e| (e.canonical_key(), e.clone())).collect();
        exprs.sort_by(|a, b| a.0.cmp(&b.0));
        exprs.dedup_by(|a, b| a.0 == b.0);
        let picks = parsed
            .iter()
            .map(|e| exprs.binary_search_by(|(k, _)| k.cmp(&e.canonical_key())).unwrap())
            .collect();

        let calendar = store.read_calendar(&spec.frequency)?;
        let empty = || BuildError::EmptyRange {
            start: spec.start,
            end: spec.end,
        };
        let lo = calendar.index_of(spec.start, Rounding::Forward).map_err(|_| empty())?;
        let hi = calendar.index_of(spec.end, Rounding::Backward).map_err(|_| empty())?;
        if lo > hi {
            return Err(empty());
        }
        Ok(Query {
            calendar,
            frequency: spec.frequency.clone(),
            lo,
            hi,
            exprs,
            picks,
        })
    }

    fn columns(&self) -> Vec<String> {
        self.exprs.iter().map(|(k, _)| k.as_str().to_string()).collect()
    }

    fn to_query_order(&self, frame: AlignedFrame, spec: &QuerySpec) -> AlignedFrame {
        let labels = spec.expressions.iter().map(|e| e.trim().to_string()).collect();
        if self.picks.iter().copied().eq(0..frame.ncols()) {
            let mut frame = frame;
            frame.set_columns(labels);
            return frame;
        }
        frame.select_columns(&self.picks, labels)
    }
}

struct Loaded {
    symbol: String,
    intervals: Vec<IndexInterval>,
    /// Last index with data in every attribute used; `None` if some series is empty.
    data_tail: Option<usize>,
    /// Expression-cache hits covering the whole range.
    cached: Vec<Option<Vec<f32>>>,
    /// Per expression: `None` if not cacheable, else the last settled index
    /// (`Some(None)`: no lag possible).
    settled: Vec<Option<Option<usize>>>,
    raw: HashMap<String, (usize, Vec<f32>)>,
}

struct Computed {
    symbol: String,
    intervals: Vec<IndexInterval>,
    data_tail: Option<usize>,
    columns: Vec<Vec<f32>>,
    node_evals: u64,
    hits: u64,
    partial: u64,
    misses: u64,
}

/// Raw values preloaded for one instrument, falling back to the store for
/// anything outside them.
struct MemProvider<'a> {
    raw: &'a HashMap<String, (usize, Vec<f32>)>,
    store: StoreProvider<'a>,
}

impl SeriesProvider for MemProvider<'_> {
    fn read(&self, instrument: &str, attribute: &str, lo: usize, hi: usize) -> Result<Vec<f32>, EvalError> {
        if let Some((start, values)) = self.raw.get(attribute) {
            if *start <= lo && hi < start + values.len() {
                return Ok(values[lo - start..=hi - start].to_vec());
            }
        }
        self.store.read(instrument, attribute, lo, hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filter_keeps_interval_rows() {
        let block = Block {
            indices: vec![0, 1, 2],
            values: vec![1.0, 2.0, 3.0],
        };
        assert_eq!(filter_by_pool(&block, &[(0, 1)], 1).indices, vec![0, 1]);
        assert!(filter_by_pool(&block, &[], 1).is_empty());
        let kept = filter_by_pool(&block, &[(0, 0), (2, 2)], 1);
        assert_eq!(kept.indices, vec![0, 2]);
        assert_eq!(kept.values, vec![1.0, 3.0]);
    }

    #[test]
    fn convert_transposes_columns() {
        let b = convert_index(&[vec![1.0, 2.0], vec![10.0, 20.0]], 5);
        assert_eq!(b.indices, vec![5, 6]);
        assert_eq!(b.values, vec![1.0, 10.0, 2.0, 20.0]);
    }

    #[test]
    fn combine_is_ordered_and_associative() {
        let blk = |i: u32| Block {
            indices: vec![i],
            values: vec![i as f32],
        };
        let cols = vec!["c".to_string()];
        let all = combine(
            cols.clone(),
            BTreeMap::from([("B".to_string(), blk(1)), ("A".to_string(), blk(2)), ("C".to_string(), Block::default())]),
        );
        assert_eq!(all.row_set(), vec![("A".to_string(), 2), ("B".to_string(), 1)]);
        let a = combine(cols.clone(), BTreeMap::from([("A".to_string(), blk(2))]));
        let b = combine(cols, BTreeMap::from([("B".to_string(), blk(1))]));
        assert!(a.merge(b).bitwise_eq(&all));
    }

    #[test]
    fn universe_keys() {
        assert_eq!(Universe::Pool("csi".into()).key(), "pool:csi");
        assert_eq!(
            Universe::Instruments(vec!["B".into(), "A".into(), "B".into()]).key(),
            "instruments:A,B"
        );
    }
}
