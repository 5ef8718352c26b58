//! Synthetic market data and a staged benchmark over cache configurations
//! and worker counts. Every cell's output digest must match; a mismatch is
//! an error, not a result.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataset::{AlignedFrame, BuildConfig, BuildError, Engine, QuerySpec, StageTimings, Universe};
use crate::expr::parse;
use crate::storage::{InstrumentPool, StorageError, Store, DEFAULT_FREQ};

pub const BENCH_POOL: &str = "bench";
pub const ATTRIBUTES: [&str; 5] = ["open", "high", "low", "close", "volume"];

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("target directory {0} is not empty")]
    NonEmptyTarget(PathBuf),
    #[error("invalid benchmark config: {0}")]
    InvalidConfig(String),
    #[error("output of {config} with {workers} worker(s) differs from the reference: {detail}")]
    DigestMismatch {
        config: &'static str,
        workers: usize,
        detail: String,
    },
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Fourteen OHLCV factors, including a volatility ratio and the upper
/// Bollinger band distance.
pub fn default_expressions() -> Vec<String> {
    [
        "Std($close, 5)/$close",
        "(MEAN($close, 20)+2*STD($close, 20)-$close)/MEAN($close, 20)",
        "$close/REF($close, 1)-1",
        "$close/REF($close, 5)-1",
        "MEAN($close, 5)/$close",
        "MEAN($close, 10)/$close",
        "MEAN($close, 20)/$close",
        "MAX($high, 20)/$close",
        "MIN($low, 20)/$close",
        "SUM($volume, 5)/SUM($volume, 20)",
        "MEAN($volume, 5)/($volume+1)",
        "($high-$low)/$open",
        "($close-$open)/$open",
        "STD($close/REF($close, 1), 20)",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub instruments: usize,
    pub days: usize,
    /// Members per day; the set rotates by one symbol each day.
    pub pool_size: usize,
    pub expressions: Vec<String>,
    pub workers: Vec<usize>,
    pub seed: u64,
    pub repetitions: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            instruments: 100,
            days: 2500,
            pool_size: 80,
            expressions: default_expressions(),
            workers: vec![1, 4],
            seed: 42,
            repetitions: 3,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: String| Err(BenchError::InvalidConfig(m));
        if self.instruments == 0 || self.days == 0 {
            return bad("instruments and days must be positive".into());
        }
        if self.pool_size == 0 || self.pool_size > self.instruments {
            return bad(format!("pool size {} must be in 1..={}", self.pool_size, self.instruments));
        }
        if self.expressions.is_empty() {
            return bad("no expressions".into());
        }
        if self.workers.is_empty() || self.workers.contains(&0) {
            return bad("worker counts must be positive".into());
        }
        if self.repetitions == 0 {
            return bad("need at least one repetition".into());
        }
        for e in &self.expressions {
            let lookback = parse(e).map_err(|err| BenchError::InvalidConfig(format!("{e:?}: {err}")))?.lookback();
            if self.days <= lookback {
                return bad(format!("{} days do not cover the {lookback}-day look-back of {e:?}", self.days));
            }
        }
        Ok(())
    }

    pub fn symbol(i: usize) -> String {
        format!("SYM{i:04}")
    }

    /// First listed day of instrument `i`; listings are staggered.
    pub fn listing_index(&self, i: usize) -> usize {
        (i % 5) * (self.days / 50)
    }

    /// Members on day `t`: a window of `pool_size` symbols sliding by one.
    pub fn members_at(&self, t: usize) -> BTreeSet<String> {
        (0..self.pool_size).map(|k| Self::symbol((t + k) % self.instruments)).collect()
    }
}

/// Weekdays starting at 2007-01-04.
pub fn weekday_calendar(days: usize) -> Vec<NaiveDate> {
    let mut d = NaiveDate::from_ymd_opt(2007, 1, 4).expect("valid date");
    let mut out = Vec::with_capacity(days);
    while out.len() < days {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d += Duration::days(1);
    }
    out
}

/// Deterministic OHLCV bars for one instrument, `n` days.
pub fn random_walk(seed: u64, instrument: u64, n: usize) -> [Vec<f32>; 5] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(instrument);
    let mut close = 10.0 + 90.0 * rng.random::<f64>();
    let mut bars: [Vec<f32>; 5] = Default::default();
    for _ in 0..n {
        let open = close * rng.random_range(-0.01..=0.01f64).exp();
        close *= rng.random_range(-0.05..=0.05f64).exp();
        // f32 rounding is monotone, so the ordering survives the cast
        let high = open.max(close) * (1.0 + 0.02 * rng.random::<f64>());
        let low = open.min(close) * (1.0 - 0.02 * rng.random::<f64>());
        let volume = rng.random_range(1e5..1e6f64).round();
        for (col, v) in bars.iter_mut().zip([open, high, low, close, volume]) {
            col.push(v as f32);
        }
    }
    bars
}

/// Populates an empty directory with a calendar, the rotating pool and five
/// attribute series per instrument.
pub fn generate_synthetic(root: &Path, config: &BenchConfig) -> Result<Store, BenchError> {
    config.validate()?;
    if root.exists() && fs::read_dir(root)?.next().is_some() {
        return Err(BenchError::NonEmptyTarget(root.to_path_buf()));
    }
    let store = Store::open(root)?;
    let dates = weekday_calendar(config.days);
    store.write_calendar(DEFAULT_FREQ, &dates)?;
    for i in 0..config.instruments {
        let start = config.listing_index(i);
        let bars = random_walk(config.seed, i as u64, config.days - start);
        let symbol = BenchConfig::symbol(i);
        for (attr, values) in ATTRIBUTES.iter().zip(&bars) {
            store.write_series(&symbol, attr, DEFAULT_FREQ, start, values)?;
        }
    }
    let mut pool = InstrumentPool::new(BENCH_POOL);
    for (t, d) in dates.iter().enumerate() {
        pool.append(*d, &config.members_at(t))?;
    }
    store.write_pool(&pool)?;
    Ok(store)
}

/// Cache configurations measured, in run order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheConfig {
    /// No caches.
    Baseline,
    /// Expression cache, emptied before each repetition.
    ExprCold,
    /// Expression cache, already populated.
    ExprWarm,
    /// Both caches, already populated.
    FullWarm,
}

impl CacheConfig {
    pub const ALL: [CacheConfig; 4] = [CacheConfig::Baseline, CacheConfig::ExprCold, CacheConfig::ExprWarm, CacheConfig::FullWarm];

    pub fn label(self) -> &'static str {
        match self {
            CacheConfig::Baseline => "-E -D",
            CacheConfig::ExprCold => "+E -D cold",
            CacheConfig::ExprWarm => "+E -D warm",
            CacheConfig::FullWarm => "+E +D warm",
        }
    }

    fn build_config(self, workers: usize) -> BuildConfig {
        BuildConfig {
            use_expr_cache: self != CacheConfig::Baseline,
            use_dataset_cache: self == CacheConfig::FullWarm,
            workers,
            ..BuildConfig::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct Cell {
    pub config: CacheConfig,
    pub workers: usize,
    pub runs: Vec<StageTimings>,
    /// Expression nodes computed, summed over the repetitions.
    pub node_evals: u64,
    pub digest: u64,
}

impl Cell {
    /// Mean and sample standard deviation of a stage over the repetitions.
    pub fn stat(&self, stage: &str) -> (f64, f64) {
        let xs: Vec<f64> = self.runs.iter().filter_map(|t| t.get(stage)).collect();
        mean_std(&xs)
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub cells: Vec<Cell>,
    /// Bytes of all feature files.
    pub store_bytes: u64,
    /// Bytes the raw values alone would take (4 per value).
    pub raw_bytes: u64,
    pub digest: u64,
    pub rows: usize,
}

impl BenchReport {
    pub fn cell(&self, config: CacheConfig, workers: usize) -> Option<&Cell> {
        self.cells.iter().find(|c| c.config == config && c.workers == workers)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("config,workers,stage,mean_s,std_s\n");
        for c in &self.cells {
            for stage in StageTimings::STAGES {
                let (m, s) = c.stat(stage);
                let _ = writeln!(out, "{},{},{stage},{m:.6},{s:.6}", c.config.label(), c.workers);
            }
        }
        out
    }

    /// Stages down, configurations across, cells as `mean±std` seconds.
    pub fn table(&self) -> String {
        let heads: Vec<String> = self.cells.iter().map(|c| format!("{} w={}", c.config.label(), c.workers)).collect();
        let width = heads.iter().map(String::len).max().unwrap_or(0).max(15);
        let mut out = format!("{:<14}", "stage");
        for h in &heads {
            let _ = write!(out, " {h:>width$}");
        }
        out.push('\n');
        for stage in StageTimings::STAGES {
            let _ = write!(out, "{stage:<14}");
            for c in &self.cells {
                let (m, s) = c.stat(stage);
                let _ = write!(out, " {:>width$}", format!("{m:.3}±{s:.3}"));
            }
            out.push('\n');
        }
        let _ = writeln!(
            out,
            "store {} B for {} B of values ({:.4}x); {} rows; digest {:016x} in every cell",
            self.store_bytes,
            self.raw_bytes,
            self.store_bytes as f64 / self.raw_bytes.max(1) as f64,
            self.rows,
            self.digest
        );
        out
    }
}

pub fn bench_query(config: &BenchConfig, store: &Store) -> Result<QuerySpec, BenchError> {
    let cal = store.read_calendar(DEFAULT_FREQ)?;
    let (start, end) = (cal.dates()[0], cal.dates()[cal.len() - 1]);
    Ok(QuerySpec::new(Universe::Pool(BENCH_POOL.into()), config.expressions.clone(), start, end))
}

/// Runs every configuration at every worker count against a generated
/// store at `root`.
pub fn run_benchmark(root: &Path, config: &BenchConfig) -> Result<BenchReport, BenchError> {
    config.validate()?;
    let engine = Engine::open(root)?;
    let spec = bench_query(config, engine.store())?;
    let (store_bytes, values) = engine.store().feature_footprint()?;
    let mut reference: Option<AlignedFrame> = None;
    let mut cells = Vec::new();

    let clear = |engine: &Engine| -> Result<(), BenchError> {
        engine.expr_cache().clear().map_err(BuildError::from)?;
        engine.dataset_cache().clear().map_err(BuildError::from)?;
        Ok(())
    };

    for &workers in &config.workers {
        for cache in CacheConfig::ALL {
            let build = cache.build_config(workers);
            match cache {
                CacheConfig::Baseline => clear(&engine)?,
                // cold repetitions clear below; warm ones reuse ExprCold's entries
                CacheConfig::ExprCold | CacheConfig::ExprWarm => {}
                CacheConfig::FullWarm => {
                    engine.dataset_cache().clear().map_err(BuildError::from)?;
                    engine.build(&spec, &build)?;
                }
            }
            let mut cell = Cell {
                config: cache,
                workers,
                runs: Vec::new(),
                node_evals: 0,
                digest: 0,
            };
            for _ in 0..config.repetitions {
                if cache == CacheConfig::ExprCold {
                    clear(&engine)?;
                }
                let (frame, timings, stats) = engine.build(&spec, &build)?;
                log::info!("{} workers={workers}: {:.3}s", cache.label(), timings.total);
                match &reference {
                    None => reference = Some(frame.clone()),
                    Some(r) if !r.bitwise_eq(&frame) => {
                        return Err(BenchError::DigestMismatch {
                            config: cache.label(),
                            workers,
                            detail: r.first_difference(&frame).unwrap_or_else(|| "columns differ".into()),
                        })
                    }
                    Some(_) => {}
                }
                cell.digest = frame.digest();
                cell.runs.push(timings);
                cell.node_evals += stats.node_evals;
            }
            cells.push(cell);
        }
    }
    let reference = reference.expect("at least one run");
    Ok(BenchReport {
        cells,
        store_bytes,
        raw_bytes: 4 * values,
        digest: reference.digest(),
        rows: reference.nrows(),
    })
}
