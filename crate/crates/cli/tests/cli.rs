use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn qkmps(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qkmps"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn qkmps")
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("qkmps-cli-{name}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn preprocess_writes_balanced_rescaled_rows() {
    let dir = scratch("pre");
    ok(&qkmps(&dir, &["preprocess", "--n-per-class", "10", "-m", "6", "-o", "a.csv"]));
    ok(&qkmps(&dir, &["preprocess", "--n-per-class", "10", "-m", "6", "-o", "b.csv"]));
    let a = fs::read(dir.join("a.csv")).unwrap();
    assert_eq!(a, fs::read(dir.join("b.csv")).unwrap());
    let mut rdr = csv::Reader::from_reader(a.as_slice());
    let headers = rdr.headers().unwrap().clone();
    assert_eq!(headers.len(), 7);
    let rows: Vec<_> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 20);
    assert_eq!(rows.iter().filter(|r| &r[6] == "1").count(), 10);
    for r in &rows {
        for v in r.iter().take(6) {
            let v: f64 = v.parse().unwrap();
            assert!((0.0..=2.0).contains(&v));
        }
    }
}

#[test]
fn preprocess_rejects_too_few_rows() {
    let dir = scratch("few");
    ok(&qkmps(&dir, &["preprocess", "--n-per-class", "5", "-m", "3", "-o", "small.csv"]));
    let out = qkmps(&dir, &["preprocess", "--data", "small.csv", "--n-per-class", "6", "-m", "3", "-o", "x.csv"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn missing_input_is_an_io_error() {
    let dir = scratch("missing");
    let out = qkmps(&dir, &["experiment", "--data", "absent.csv"]);
    assert_eq!(out.status.code(), Some(2));
    let out = qkmps(&dir, &["--config", "absent.toml", "experiment"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_config_is_a_validation_error() {
    let dir = scratch("badcfg");
    fs::write(dir.join("unknown.toml"), "bogus = 1\n").unwrap();
    fs::write(dir.join("range.toml"), "train_fraction = 1.5\n").unwrap();
    fs::write(dir.join("geometry.toml"), "features = 3\ndistance = 3\n").unwrap();
    for file in ["unknown.toml", "range.toml", "geometry.toml"] {
        let out = qkmps(&dir, &["--config", file, "experiment"]);
        assert_eq!(out.status.code(), Some(3), "{file}");
    }
    let out = qkmps(&dir, &["experiment", "--n-per-class", "1"]);
    assert_eq!(out.status.code(), Some(3));
}

const SMALL: [&str; 10] = ["--n-per-class", "4", "-m", "4", "-d", "1", "-r", "1", "--gamma", "0.5"];

#[test]
fn experiment_reports_every_c_for_both_kernels() {
    let dir = scratch("exp");
    let mut args = vec!["experiment", "-k", "1", "--out-dir", "o"];
    args.extend(SMALL);
    ok(&qkmps(&dir, &args));
    let m = read_json(&dir.join("o/metrics.json"));
    let grid = m["config"]["c_grid"].as_array().unwrap().len();
    assert_eq!(grid, 8);
    for kernel in ["quantum", "gaussian"] {
        let block = &m[kernel];
        assert_eq!(block["per_c"].as_array().unwrap().len(), grid);
        let auc = block["best"]["metrics"]["auc"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&auc));
    }
    assert_eq!(m["quantum"]["split"], m["gaussian"]["split"]);
    let train = m["quantum"]["split"]["train_indices"].as_array().unwrap().len();
    let test = m["quantum"]["split"]["test_indices"].as_array().unwrap().len();
    assert_eq!(train + test, 8);
    let side = read_json(&dir.join("o/gram_train.json"));
    assert_eq!(side["rows"].as_u64().unwrap() as usize, train);
    assert!(!fs::read_to_string(dir.join("o/metrics.json")).unwrap().contains("wall_time"));
}

#[test]
fn gram_csvs_do_not_depend_on_workers_or_strategy() {
    let dir = scratch("gram");
    let runs = [("a", "1", "round-robin"), ("b", "4", "round-robin"), ("c", "3", "no-messaging")];
    for (out, k, strategy) in runs {
        let mut args = vec!["gram", "-k", k, "--strategy", strategy, "--out-dir", out];
        args.extend(SMALL);
        ok(&qkmps(&dir, &args));
    }
    for file in ["gram_train.csv", "gram_test.csv"] {
        let reference = fs::read(dir.join("a").join(file)).unwrap();
        for out in ["b", "c"] {
            assert_eq!(reference, fs::read(dir.join(out).join(file)).unwrap(), "{out}/{file}");
        }
    }
    let side = read_json(&dir.join("b/gram_train.json"));
    assert_eq!(side["k"], 4);
}

#[test]
fn benchmark_records_all_samples_and_pairs() {
    let dir = scratch("bench");
    let args = [
        "benchmark", "--samples", "8", "-m", "40", "-d", "1", "-r", "2", "--n-per-class", "10", "--out-dir", "b",
    ];
    ok(&qkmps(&dir, &args));
    let b = read_json(&dir.join("b/benchmark.json"));
    assert_eq!(b["simulation_seconds"].as_array().unwrap().len(), 8);
    assert_eq!(b["inner_product_seconds"].as_array().unwrap().len(), 28);
    for chi in b["max_chi"].as_array().unwrap() {
        assert!(chi.as_u64().unwrap() <= 4);
    }
    for series in b["memory_series"].as_array().unwrap() {
        let s: Vec<u64> = series.as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
        assert!(s.last().unwrap() <= s.iter().max().unwrap());
    }
    let csv = fs::read_to_string(dir.join("b/benchmark_memory.csv")).unwrap();
    assert!(csv.starts_with("sample,gate,memory_bytes\n"));
}

#[test]
fn benchmark_needs_enough_training_rows() {
    let dir = scratch("benchfew");
    let out = qkmps(&dir, &["benchmark", "--samples", "50", "--n-per-class", "5", "-m", "4"]);
    assert_eq!(out.status.code(), Some(3));
}
