use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn run(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_factorstore"))
        .env("FACTORSTORE_ROOT", root)
        .args(args)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).unwrap()
}

/// A store with the calendar, the `idx` pool and the price fixture loaded.
fn loaded() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let cal = fixture("calendar.csv");
    let pool = format!("idx={}", fixture("idx.tsv").display());
    let out = run(dir.path(), &["init", "--calendar", cal.to_str().unwrap(), "--pool", &pool]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = run(dir.path(), &["dump", fixture("prices.csv").to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    dir
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn init_is_idempotent_and_rejects_rewritten_history() {
    let dir = tempfile::tempdir().unwrap();
    let cal = fixture("calendar.csv");
    assert_eq!(code(&run(dir.path(), &["init", "--calendar", cal.to_str().unwrap()])), 0);
    let written = fs::read(dir.path().join("calendars/day.txt")).unwrap();
    assert_eq!(String::from_utf8(written.clone()).unwrap(), "2020-01-02\n2020-01-03\n2020-01-06\n2020-01-07\n");
    assert_eq!(code(&run(dir.path(), &["init", "--calendar", cal.to_str().unwrap()])), 0);
    assert_eq!(fs::read(dir.path().join("calendars/day.txt")).unwrap(), written);

    let other = tempfile::tempdir().unwrap();
    let conflicting = write(other.path(), "cal.csv", "2020-01-02\n2020-01-04\n");
    let out = run(dir.path(), &["init", "--calendar", &conflicting]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("prefix"), "{}", stderr(&out));
}

#[test]
fn dump_writes_one_file_per_symbol_and_attribute() {
    let dir = loaded();
    let mut files = Vec::new();
    for sym in ["aaa", "bbb"] {
        for e in fs::read_dir(dir.path().join("features").join(sym)).unwrap() {
            let p = e.unwrap().path();
            files.push((p.file_name().unwrap().to_str().unwrap().to_string(), fs::metadata(&p).unwrap().len()));
        }
    }
    files.sort();
    assert_eq!(files.len(), 10);
    assert!(files.iter().all(|(_, size)| *size == 4 + 12), "{files:?}");
    // the blank volume cell is stored as NaN
    let bytes = fs::read(dir.path().join("features/aaa/volume.day.bin")).unwrap();
    assert_eq!(u32::from_le_bytes(bytes[0..4].try_into().unwrap()), 0);
    assert!(f32::from_le_bytes(bytes[8..12].try_into().unwrap()).is_nan());
}

#[test]
fn query_matches_golden_csv() {
    let dir = loaded();
    let out = run(dir.path(), &["query", "--pool", "idx", "--fields", "$close; Mean($close, 2)"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(stdout(&out), fs::read_to_string(fixture("query_close.csv")).unwrap());
    // warm, uncached and parallel runs print the same bytes
    for extra in [&[][..], &["--no-expr-cache", "--no-dataset-cache"], &["--workers", "3"]] {
        let mut args = vec!["query", "--pool", "idx", "--fields", "$close; Mean($close, 2)"];
        args.extend_from_slice(extra);
        assert_eq!(stdout(&run(dir.path(), &args)), stdout(&out), "{extra:?}");
    }
}

#[test]
fn query_over_instruments_with_dates_and_empty_result() {
    let dir = loaded();
    let out = run(
        dir.path(),
        &["query", "--instruments", "BBB,AAA", "--fields", "$volume", "--start", "2020-01-03", "--end", "2020-01-03"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(stdout(&out), "instrument,datetime,$volume\nAAA,2020-01-03,\nBBB,2020-01-03,250\n");
    // a listed instrument keeps its row past the data tail, with NaN cells
    let out = run(dir.path(), &["query", "--instruments", "AAA", "--fields", "$close", "--start", "2020-01-07"]);
    assert_eq!(stdout(&out), "instrument,datetime,$close\nAAA,2020-01-07,\n");
    // nobody is in the pool on the last calendar day: no rows, still success
    let out = run(dir.path(), &["query", "--pool", "idx", "--fields", "$close", "--start", "2020-01-07"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(stdout(&out), "instrument,datetime,$close\n");
}

#[test]
fn query_binary_output_round_trips() {
    let dir = loaded();
    let base = dir.path().join("out");
    let out = run(dir.path(), &["query", "--pool", "idx", "--fields", "$close", "--format", "bin", "--out", base.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let payload = fs::read(dir.path().join("out.frame")).unwrap();
    let index = fs::read_to_string(dir.path().join("out.index")).unwrap();
    let frame = factorstore::AlignedFrame::decode(vec!["$close".into()], &payload, &index).unwrap();
    assert_eq!(frame.values(), [1.25, 1.75, 2.25, 10.5, 11.5]);
}

#[test]
fn exit_codes_separate_usage_from_data_errors() {
    let dir = loaded();
    let bad = run(dir.path(), &["query", "--pool", "idx", "--fields", "Mean($close, 2"]);
    assert_eq!(code(&bad), 2);
    assert!(stderr(&bad).contains("byte 14"), "{}", stderr(&bad));
    assert_eq!(code(&run(dir.path(), &["query", "--pool", "idx", "--fields", "Foo($close)"])), 2);
    assert_eq!(code(&run(dir.path(), &["query", "--pool", "nope", "--fields", "$close"])), 1);
    assert_eq!(code(&run(dir.path(), &["query", "--pool", "idx", "--fields", "$nope"])), 1);
    assert_eq!(code(&run(dir.path(), &["query", "--fields", "$close"])), 2);
    assert_eq!(code(&run(dir.path(), &["frobnicate"])), 2);
    assert_eq!(code(&run(dir.path(), &["query", "--pool", "idx", "--fields", "$close", "--start", "soon"])), 2);
    let empty = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(empty.path(), &["query", "--pool", "idx", "--fields", "$close"])), 1);
}

#[test]
fn dump_enforces_immutability_and_append_only() {
    let dir = loaded();
    let tmp = tempfile::tempdir().unwrap();
    // re-dumping identical rows is a no-op
    assert_eq!(code(&run(dir.path(), &["dump", fixture("prices.csv").to_str().unwrap()])), 0);
    let altered = write(tmp.path(), "a.csv", "symbol,date,close\nAAA,2020-01-03,9.0\n");
    let out = run(dir.path(), &["dump", &altered]);
    assert_eq!(code(&out), 1);
    assert_eq!(fs::metadata(dir.path().join("features/aaa/close.day.bin")).unwrap().len(), 16);

    let unknown = write(tmp.path(), "u.csv", "symbol,date,close\nAAA,2020-01-04,9.0\n");
    let out = run(dir.path(), &["dump", &unknown]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("2020-01-04"), "{}", stderr(&out));

    let stale = write(tmp.path(), "s.csv", "symbol,date,close\nAAA,2020-01-06,2.25\n");
    assert_eq!(code(&run(dir.path(), &["append", &stale])), 1);
    let next = write(tmp.path(), "n.csv", "symbol,date,close\nAAA,2020-01-07,2.5\n");
    assert_eq!(code(&run(dir.path(), &["append", &next])), 0);
    assert_eq!(fs::metadata(dir.path().join("features/aaa/close.day.bin")).unwrap().len(), 20);
    let out = run(dir.path(), &["query", "--instruments", "AAA", "--fields", "$close", "--start", "2020-01-07"]);
    assert_eq!(stdout(&out), "instrument,datetime,$close\nAAA,2020-01-07,2.5\n");
}

#[test]
fn cache_list_and_clear() {
    let dir = loaded();
    assert_eq!(code(&run(dir.path(), &["query", "--pool", "idx", "--fields", "Mean($close, 2)"])), 0);
    let listed = stdout(&run(dir.path(), &["cache", "list"]));
    assert!(listed.lines().any(|l| l.starts_with("expr\t[")), "{listed}");
    assert!(listed.lines().any(|l| l.starts_with("dataset\t[")), "{listed}");

    assert_eq!(code(&run(dir.path(), &["cache", "clear", "--dataset"])), 0);
    let listed = stdout(&run(dir.path(), &["cache", "list"]));
    assert!(listed.lines().any(|l| l.starts_with("expr\t")));
    assert!(!listed.lines().any(|l| l.starts_with("dataset\t")));
    assert_eq!(stdout(&run(dir.path(), &["cache", "list", "--dataset"])), "");

    assert_eq!(code(&run(dir.path(), &["cache", "clear"])), 0);
    assert_eq!(stdout(&run(dir.path(), &["cache", "list"])), "");
    assert_eq!(code(&run(dir.path(), &["cache", "clear", "--expr", "--dataset"])), 2);
}

#[test]
fn hte_sample_is_deterministic_and_validated() {
    let dir = tempfile::tempdir().unwrap();
    let space = fixture("space.txt");
    let args = ["hte-sample", "--space", space.to_str().unwrap(), "--n", "5", "--seed", "3"];
    let a = run(dir.path(), &args);
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    assert_eq!(stdout(&a), stdout(&run(dir.path(), &args)));
    let lines: Vec<String> = stdout(&a).lines().map(String::from).collect();
    assert_eq!(lines.len(), 5);
    assert!(lines.iter().all(|l| l.starts_with("x=") && l.contains(" k=") && l.contains(" c=")), "{lines:?}");

    let mut re = args.to_vec();
    re.extend(["--theta-prev", "x=0.5,k=3", "--sigma", "x=0.1,k=1"]);
    assert_eq!(code(&run(dir.path(), &re)), 0);
    let mut bad = args.to_vec();
    bad.extend(["--theta-prev", "x=0.5,k=3", "--sigma", "x=-1,k=1"]);
    assert_eq!(code(&run(dir.path(), &bad)), 2);
    let mut unpaired = args.to_vec();
    unpaired.extend(["--theta-prev", "x=0.5"]);
    assert_eq!(code(&run(dir.path(), &unpaired)), 2);
}

#[test]
fn bench_runs_a_small_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("report.csv");
    let out = run(
        dir.path(),
        &[
            "bench", "--instruments", "4", "--days", "40", "--pool-size", "3", "--workers", "1,2", "--repetitions", "1",
            "--out", csv.to_str().unwrap(),
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("-E -D"));
    assert!(fs::read_to_string(&csv).unwrap().lines().count() > 1);
    assert_eq!(code(&run(dir.path(), &["bench", "--pool-size", "0"])), 2);
}

#[test]
fn missing_root_is_a_usage_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_factorstore"))
        .env_remove("FACTORSTORE_ROOT")
        .args(["cache", "list"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
}
