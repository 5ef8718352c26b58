use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};

use factorstore::bench::{self, BenchConfig};
use factorstore::cache::EntryMeta;
use factorstore::dataset::{BuildConfig, BuildError, Engine, QuerySpec, Universe};
use factorstore::hte::{self, ReweightSpec, SearchSpace};
use factorstore::storage::{parse_date, InstrumentPool, Rounding, StorageError, Store, DEFAULT_FREQ};

#[derive(Parser)]
#[command(name = "factorstore", version, about = "Flat-file factor store: ingest, query, cache, benchmark")]
struct Cli {
    /// Store root directory.
    #[arg(long, global = true, env = "FACTORSTORE_ROOT")]
    root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create the store layout and write (or extend) a calendar.
    Init(InitArgs),
    /// Ingest OHLCV rows from CSV; rows already stored must match exactly.
    Dump(DumpArgs),
    /// Like `dump`, but every row must lie after the stored tail.
    Append(DumpArgs),
    /// Compute expressions over a pool or instrument list.
    Query(QueryArgs),
    /// Inspect or clear the disk caches.
    Cache {
        #[command(subcommand)]
        action: CacheAction,
    },
    /// Run the staged benchmark on synthetic data.
    Bench(BenchArgs),
    /// Sample hyperparameters from a search space, optionally reweighted
    /// around a previous optimum.
    HteSample(HteArgs),
}

#[derive(Args)]
struct InitArgs {
    /// Calendar file: one ISO date per line (first CSV column; a header line is skipped).
    #[arg(long)]
    calendar: PathBuf,
    #[arg(long, default_value = DEFAULT_FREQ)]
    freq: String,
    /// Install a pool from a `SYMBOL<TAB>ENTER<TAB>EXIT` file, as NAME=PATH. Repeatable.
    #[arg(long = "pool", value_name = "NAME=PATH")]
    pools: Vec<String>,
}

#[derive(Args)]
struct DumpArgs {
    /// CSV with columns symbol,date and one column per attribute.
    csv: PathBuf,
    #[arg(long, default_value = DEFAULT_FREQ)]
    freq: String,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long, conflicts_with = "instruments", required_unless_present = "instruments")]
    pool: Option<String>,
    /// Comma-separated symbols.
    #[arg(long, value_delimiter = ',')]
    instruments: Vec<String>,
    /// Expressions separated by `;`.
    #[arg(long)]
    fields: String,
    /// First date (default: calendar start).
    #[arg(long)]
    start: Option<String>,
    /// Last date (default: calendar end).
    #[arg(long)]
    end: Option<String>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long)]
    no_expr_cache: bool,
    #[arg(long)]
    no_dataset_cache: bool,
    #[arg(long, default_value = "csv", value_parser = ["csv", "bin"])]
    format: String,
    /// Output path (csv: file instead of stdout; bin: writes PATH.frame and PATH.index).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print stage timings to stderr.
    #[arg(long)]
    timings: bool,
    #[arg(long, default_value = DEFAULT_FREQ)]
    freq: String,
}

#[derive(Subcommand)]
enum CacheAction {
    List(CacheWhich),
    Clear(CacheWhich),
}

#[derive(Args)]
struct CacheWhich {
    /// Only the expression cache.
    #[arg(long, conflicts_with = "dataset")]
    expr: bool,
    /// Only the dataset cache.
    #[arg(long)]
    dataset: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 100)]
    instruments: usize,
    #[arg(long, default_value_t = 2500)]
    days: usize,
    #[arg(long, default_value_t = 80)]
    pool_size: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,4")]
    workers: Vec<usize>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    repetitions: usize,
    /// Write the per-stage CSV report here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Empty directory for the synthetic store (default: a temporary one).
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Args)]
struct HteArgs {
    /// Space file: `name uniform|loguniform|int LO HI` or `name categorical A B ...` per line.
    #[arg(long)]
    space: PathBuf,
    /// Previous optimum, e.g. `lr=0.01,depth=6`.
    #[arg(long, requires = "sigma")]
    theta_prev: Option<String>,
    /// Kernel widths in sampling units, e.g. `lr=0.5,depth=1`.
    #[arg(long, requires = "theta_prev")]
    sigma: Option<String>,
    #[arg(long, default_value_t = 10)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Exit status plus message; 1 for data/environment errors, 2 for usage.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Failure { code: 1, error }
    }
}

fn usage(error: anyhow::Error) -> Failure {
    Failure { code: 2, error }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Outcome {
    let root = || {
        cli.root
            .clone()
            .ok_or_else(|| usage(anyhow!("no store root: pass --root or set FACTORSTORE_ROOT")))
    };
    match cli.command {
        Command::Init(args) => init(&root()?, args),
        Command::Dump(args) => dump(&root()?, args, false),
        Command::Append(args) => dump(&root()?, args, true),
        Command::Query(args) => query(&root()?, args),
        Command::Cache { action } => cache(&root()?, action),
        Command::Bench(args) => bench(args),
        Command::HteSample(args) => hte_sample(args),
    }
}

fn open_store(root: &Path) -> Result<Store, Failure> {
    Store::open(root)
        .with_context(|| format!("cannot open store at {}", root.display()))
        .map_err(Failure::from)
}

fn init(root: &Path, args: InitArgs) -> Outcome {
    let text = fs::read_to_string(&args.calendar).with_context(|| format!("cannot read {}", args.calendar.display()))?;
    let mut dates = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let field = line.split(',').next().unwrap_or("").trim();
        if field.is_empty() {
            continue;
        }
        match parse_date_field(field) {
            Some(d) => dates.push(d),
            None if n == 0 => {} // header
            None => return Err(anyhow!("{}:{}: bad date {field:?}", args.calendar.display(), n + 1).into()),
        }
    }
    let store = open_store(root)?;
    store
        .write_calendar(&args.freq, &dates)
        .with_context(|| format!("cannot write {} calendar", args.freq))?;
    for spec in &args.pools {
        let (name, path) = spec
            .split_once('=')
            .ok_or_else(|| usage(anyhow!("--pool expects NAME=PATH, got {spec:?}")))?;
        let text = fs::read_to_string(path).with_context(|| format!("cannot read {path}"))?;
        let pool = InstrumentPool::parse(name, &text).with_context(|| format!("pool file {path}"))?;
        store.write_pool(&pool).with_context(|| format!("cannot write pool {name}"))?;
    }
    Ok(())
}

fn parse_date_field(s: &str) -> Option<NaiveDate> {
    let s = s.trim();
    parse_date(s).or_else(|| parse_date(s.split(['T', ' ']).next()?))
}

/// (symbol, attribute) → calendar index → value
type Ingest = BTreeMap<(String, String), BTreeMap<usize, f32>>;

fn dump(root: &Path, args: DumpArgs, append_only: bool) -> Outcome {
    let store = open_store(root)?;
    let calendar = store.read_calendar(&args.freq).context("store has no calendar; run init first")?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(&args.csv)
        .with_context(|| format!("cannot read {}", args.csv.display()))?;
    let headers: Vec<String> = reader
        .headers()
        .context("cannot read CSV header")?
        .iter()
        .map(|h| h.to_ascii_lowercase())
        .collect();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(sym_col), Some(date_col)) = (col("symbol"), col("date")) else {
        return Err(anyhow!("CSV header needs `symbol` and `date` columns").into());
    };
    let attrs: Vec<(usize, &str)> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != sym_col && *i != date_col)
        .map(|(i, h)| (i, h.as_str()))
        .collect();

    let mut data: Ingest = BTreeMap::new();
    let mut unknown_dates = Vec::new();
    for (n, record) in reader.records().enumerate() {
        let line = n + 2;
        let record = record.with_context(|| format!("CSV line {line}"))?;
        let symbol = record.get(sym_col).unwrap_or("").to_string();
        let date_text = record.get(date_col).unwrap_or("");
        let date = parse_date_field(date_text).ok_or_else(|| anyhow!("line {line}: bad date {date_text:?}"))?;
        let index = match calendar.index_of(date, Rounding::Forward) {
            Ok(i) if calendar.date(i) == Some(date) => i,
            _ => {
                unknown_dates.push(date);
                continue;
            }
        };
        for &(i, attr) in &attrs {
            let text = record.get(i).unwrap_or("");
            let value = if text.is_empty() {
                f32::NAN
            } else {
                text.parse::<f32>()
                    .map_err(|_| anyhow!("line {line}: column {attr}: bad number {text:?}"))?
            };
            let slot = data.entry((symbol.clone(), attr.to_string())).or_default();
            if let Some(prev) = slot.insert(index, value) {
                if prev.to_bits() != value.to_bits() {
                    return Err(anyhow!("line {line}: conflicting duplicate {symbol} {attr} on {date}").into());
                }
            }
        }
    }
    if !unknown_dates.is_empty() {
        unknown_dates.sort();
        unknown_dates.dedup();
        let list: Vec<String> = unknown_dates.iter().map(|d| d.to_string()).collect();
        return Err(anyhow!("dates not in the {} calendar: {}", args.freq, list.join(", ")).into());
    }

    // validate everything before writing anything
    let mut plan = Vec::new();
    for ((symbol, attr), rows) in &data {
        let extent = match store.series_extent(symbol, attr, &args.freq) {
            Ok(e) => Some(e),
            Err(StorageError::MissingSeries { .. }) => None,
            Err(e) => return Err(anyhow::Error::new(e).context(format!("{symbol}/{attr}")).into()),
        };
        let (first, last) = (*rows.keys().next().unwrap(), *rows.keys().next_back().unwrap());
        let tail_start = match extent {
            None => first,
            Some(ext) => {
                let end = ext.start_index + ext.len;
                if append_only && ext.len > 0 && first < end {
                    return Err(anyhow!(
                        "{symbol}/{attr}: {} is not after the stored tail {}",
                        calendar.date(first).unwrap(),
                        calendar.date(end - 1).unwrap()
                    )
                    .into());
                }
                if first < ext.start_index {
                    return Err(anyhow!(
                        "{symbol}/{attr}: {} precedes the stored history",
                        calendar.date(first).unwrap()
                    )
                    .into());
                }
                if first < end {
                    let stored = store.read_series(symbol, attr, &args.freq, first, end.min(last + 1) - 1)
                        .with_context(|| format!("reading {symbol}/{attr}"))?;
                    for (k, &v) in rows.range(first..end) {
                        let old = stored[k - first];
                        if old.to_bits() != v.to_bits() && !(old.is_nan() && v.is_nan()) {
                            return Err(anyhow!(
                                "{symbol}/{attr} on {}: stored value {old} would change to {v}; history is immutable",
                                calendar.date(*k).unwrap()
                            )
                            .into());
                        }
                    }
                }
                end
            }
        };
        if last >= tail_start {
            let values: Vec<f32> = (tail_start..=last)
                .map(|t| rows.get(&t).copied().unwrap_or(f32::NAN))
                .collect();
            plan.push((symbol, attr, extent.is_some(), tail_start, values));
        }
    }
    for (symbol, attr, exists, start, values) in plan {
        if exists {
            store.append_series(symbol, attr, &args.freq, &values)
        } else {
            store.write_series(symbol, attr, &args.freq, start, &values)
        }
        .with_context(|| format!("writing {symbol}/{attr}"))?;
    }
    Ok(())
}

fn query(root: &Path, args: QueryArgs) -> Outcome {
    let expressions: Vec<String> = args
        .fields
        .split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect();
    if expressions.is_empty() {
        return Err(usage(anyhow!("--fields is empty")));
    }
    for e in &expressions {
        factorstore::expr::parse(e).map_err(|err| usage(anyhow!("in field {e:?}: {err}")))?;
    }
    if args.workers == 0 {
        return Err(usage(anyhow!("--workers must be at least 1")));
    }
    let engine = Engine::open(root).map_err(|e| Failure::from(anyhow::Error::new(e)))?;
    let calendar = engine
        .store()
        .read_calendar(&args.freq)
        .context("store has no calendar; run init first")?;
    if calendar.is_empty() {
        return Err(anyhow!("calendar is empty").into());
    }
    let date = |text: &Option<String>, default: NaiveDate| -> Result<NaiveDate, Failure> {
        match text {
            None => Ok(default),
            Some(t) => parse_date_field(t).ok_or_else(|| usage(anyhow!("bad date {t:?}; expected YYYY-MM-DD"))),
        }
    };
    let start = date(&args.start, calendar.dates()[0])?;
    let end = date(&args.end, calendar.dates()[calendar.len() - 1])?;
    let universe = match args.pool {
        Some(p) => Universe::Pool(p),
        None => Universe::Instruments(args.instruments.iter().map(|s| s.trim().to_string()).collect()),
    };
    let spec = QuerySpec {
        universe,
        expressions,
        start,
        end,
        frequency: args.freq.clone(),
    };
    let config = BuildConfig {
        use_expr_cache: !args.no_expr_cache,
        use_dataset_cache: !args.no_dataset_cache,
        workers: args.workers,
        ..BuildConfig::default()
    };
    let (frame, timings, stats) = engine.build(&spec, &config).map_err(|e| match e {
        BuildError::Parse { .. } | BuildError::InvalidSpec(_) => usage(e.into()),
        e => Failure::from(anyhow::Error::new(e)),
    })?;
    if args.timings {
        for stage in factorstore::StageTimings::STAGES {
            eprintln!("{stage:<14}{:.3}s", timings.get(stage).unwrap_or(0.0));
        }
        eprintln!("node evaluations: {}, raw reads: {}", stats.node_evals, stats.raw_reads);
    }
    match args.format.as_str() {
        "bin" => {
            let out = args.out.ok_or_else(|| usage(anyhow!("--format bin needs --out")))?;
            let with_ext = |ext: &str| {
                let mut s = out.clone().into_os_string();
                s.push(format!(".{ext}"));
                PathBuf::from(s)
            };
            fs::write(with_ext("frame"), frame.encode_payload()).context("writing frame")?;
            fs::write(with_ext("index"), frame.encode_index()).context("writing index")?;
        }
        _ => {
            let sink: Box<dyn Write> = match &args.out {
                Some(p) => Box::new(fs::File::create(p).with_context(|| format!("cannot create {}", p.display()))?),
                None => Box::new(io::stdout().lock()),
            };
            let mut sink = BufWriter::new(sink);
            frame.write_csv(&calendar, &mut sink).context("writing CSV")?;
            sink.flush().context("writing CSV")?;
        }
    }
    Ok(())
}

fn cache(root: &Path, action: CacheAction) -> Outcome {
    let engine = Engine::open(root).map_err(|e| Failure::from(anyhow::Error::new(e)))?;
    let (which, list) = match &action {
        CacheAction::List(w) => (w, true),
        CacheAction::Clear(w) => (w, false),
    };
    let expr = !which.dataset;
    let dataset = !which.expr;
    let show = |kind: &str, entries: Vec<EntryMeta>| {
        for m in entries {
            println!(
                "{kind}\t[{}, {}]\tversion={}\t{}",
                m.first,
                m.last,
                m.version,
                m.key.replace('\t', " | ")
            );
        }
    };
    if list {
        if expr {
            show("expr", engine.expr_cache().list().context("listing expression cache")?);
        }
        if dataset {
            show("dataset", engine.dataset_cache().list().context("listing dataset cache")?);
        }
    } else {
        if expr {
            engine.expr_cache().clear().context("clearing expression cache")?;
        }
        if dataset {
            engine.dataset_cache().clear().context("clearing dataset cache")?;
        }
    }
    Ok(())
}

fn bench(args: BenchArgs) -> Outcome {
    let config = BenchConfig {
        instruments: args.instruments,
        days: args.days,
        pool_size: args.pool_size,
        workers: args.workers,
        seed: args.seed,
        repetitions: args.repetitions,
        ..BenchConfig::default()
    };
    config.validate().map_err(|e| usage(e.into()))?;
    let tmp;
    let dir = match &args.data_dir {
        Some(d) => d.clone(),
        None => {
            tmp = tempfile::tempdir().context("cannot create a temporary directory")?;
            tmp.path().join("store")
        }
    };
    bench::generate_synthetic(&dir, &config).context("generating synthetic data")?;
    let report = bench::run_benchmark(&dir, &config).context("benchmark failed")?;
    print!("{}", report.table());
    if let Some(out) = args.out {
        fs::write(&out, report.to_csv()).with_context(|| format!("cannot write {}", out.display()))?;
    }
    Ok(())
}

fn hte_sample(args: HteArgs) -> Outcome {
    let text = fs::read_to_string(&args.space).with_context(|| format!("cannot read {}", args.space.display()))?;
    let space = SearchSpace::parse(&text).map_err(|e| usage(anyhow!("{}: {e}", args.space.display())))?;
    let samples = match (&args.theta_prev, &args.sigma) {
        (Some(theta), Some(sigma)) => {
            let spec = ReweightSpec {
                theta_prev: hte::parse_assignments(theta).map_err(|e| usage(e.into()))?,
                sigma: hte::parse_assignments(sigma).map_err(|e| usage(e.into()))?,
            };
            hte::sample_reweighted(&space, &spec, args.n, args.seed).map_err(|e| match e {
                hte::HteError::DegenerateAcceptance { .. } => Failure::from(anyhow::Error::new(e)),
                e => usage(e.into()),
            })?
        }
        _ => hte::sample_prior(&space, args.n, args.seed),
    };
    let mut out = BufWriter::new(io::stdout().lock());
    for s in samples {
        writeln!(out, "{s}").context("writing samples")?;
    }
    out.flush().context("writing samples")?;
    Ok(())
}
