use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn pgbart(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pgbart"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = pgbart(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    (header, rows)
}

/// Simulates a line dataset and fits a small single-output model to it.
fn small_run(tmp: &TempDir, chains: &str) -> (PathBuf, PathBuf) {
    let sim = tmp.path().join("sim");
    ok(&["simulate", "--kind", "line", "--n", "40", "--seed", "3", "--out", s(&sim)]);
    let run = tmp.path().join("run");
    let data = sim.join("data.csv");
    ok(&[
        "fit", "--data", s(&data), "--target", "y", "--m", "10", "--tune", "60", "--draws", "40", "--chains", chains,
        "--seed", "8", "--out", s(&run),
    ]);
    (data, run)
}

#[test]
fn predictions_on_training_rows_match_latent_mean() {
    let tmp = TempDir::new().unwrap();
    let (data, run) = small_run(&tmp, "2");
    let pred = tmp.path().join("pred.csv");
    ok(&["predict", s(&run), "--data", s(&data), "--out", s(&pred)]);

    let mut sums = vec![0.0; 40];
    let mut count = 0.0;
    for c in 0..2 {
        let (header, rows) = read_csv(&run.join(format!("latent_chain{c}.csv")));
        assert_eq!(header.len(), 41);
        for r in rows {
            for (i, v) in r[1..].iter().enumerate() {
                sums[i] += v.parse::<f64>().unwrap();
            }
            count += 1.0;
        }
    }
    let (header, rows) = read_csv(&pred);
    assert_eq!(header, ["row", "dim", "mean", "hdi_low", "hdi_high"]);
    assert_eq!(rows.len(), 40);
    for r in rows {
        let i: usize = r[0].parse().unwrap();
        let v: Vec<f64> = r[2..].iter().map(|x| x.parse().unwrap()).collect();
        assert!((v[0] - sums[i] / count).abs() <= 1e-8, "row {i}: {} vs {}", v[0], sums[i] / count);
        assert!(v[1] <= v[0] && v[0] <= v[2]);
    }
}

#[test]
fn empty_covariates_give_header_only() {
    let tmp = TempDir::new().unwrap();
    let (_, run) = small_run(&tmp, "1");
    let empty = tmp.path().join("empty.csv");
    fs::write(&empty, "x0\n").unwrap();
    let out = ok(&["predict", s(&run), "--data", s(&empty)]);
    assert_eq!(out, "row,dim,mean,hdi_low,hdi_high\n");
}

#[test]
fn interpretation_commands_write_tables_and_plots() {
    let tmp = TempDir::new().unwrap();
    let (_, run) = small_run(&tmp, "1");
    ok(&["pdp", s(&run), "--grid", "2", "--draws", "10"]);
    let (_, rows) = read_csv(&run.join("pdp/pdp.csv"));
    assert_eq!(rows.len(), 2);
    assert!(run.join("pdp/pdp.svg").exists());

    ok(&["ice", s(&run), "--grid", "3", "--rows", "4", "--draws", "10"]);
    let (header, rows) = read_csv(&run.join("ice/ice.csv"));
    assert_eq!(header, ["column", "row", "grid", "dim", "value"]);
    assert_eq!(rows.len(), 12);

    let order = ok(&["vi", s(&run), "--draws", "10"]);
    assert_eq!(order.trim(), "x0");
    let (_, rows) = read_csv(&run.join("vi/r2.csv"));
    assert_eq!(rows.len(), 1);
}

#[test]
fn single_chain_diagnostics_omit_rhat() {
    let tmp = TempDir::new().unwrap();
    let (_, run) = small_run(&tmp, "1");
    let out = pgbart(&["diagnose", s(&run)]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning:"));
    let (header, rows) = read_csv(&run.join("diagnose/diagnostics.csv"));
    assert_eq!(header, ["row", "dim", "ess"]);
    assert_eq!(rows.len(), 40);
    assert!(run.join("diagnose/convergence.svg").exists());
}

#[test]
fn multi_chain_diagnostics_report_rhat() {
    let tmp = TempDir::new().unwrap();
    let (_, run) = small_run(&tmp, "2");
    let out = ok(&["diagnose", s(&run), "--out", s(&tmp.path().join("diag"))]);
    assert!(out.contains("R-hat threshold"));
    let (header, _) = read_csv(&tmp.path().join("diag/diagnostics.csv"));
    assert_eq!(header, ["row", "dim", "ess", "rhat"]);
}

#[test]
fn exit_codes_separate_config_and_data_errors() {
    let tmp = TempDir::new().unwrap();
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"data": {"path": "x.csv", "target": "y"}, "m": 0}"#).unwrap();
    assert_eq!(pgbart(&["fit", "--config", s(&bad)]).status.code(), Some(2));

    let missing = tmp.path().join("missing.json");
    fs::write(&missing, r#"{"data": {"path": "nowhere.csv", "target": "y"}}"#).unwrap();
    assert_eq!(pgbart(&["fit", "--config", s(&missing)]).status.code(), Some(3));

    let nan = tmp.path().join("nan.csv");
    fs::write(&nan, "x,y\n1,2\n2,3\n").unwrap();
    let out = pgbart(&["fit", "--data", s(&nan), "--target", "z", "--out", s(&tmp.path().join("r"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn runs_without_manifest_are_rejected() {
    let tmp = TempDir::new().unwrap();
    let (data, run) = small_run(&tmp, "1");
    fs::remove_file(run.join("manifest.json")).unwrap();
    let out = pgbart(&["predict", s(&run), "--data", s(&data)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no manifest"));
}

#[test]
fn tampered_files_fail_the_checksum() {
    let tmp = TempDir::new().unwrap();
    let (data, run) = small_run(&tmp, "1");
    let path = run.join("latent_chain0.csv");
    let mut text = fs::read_to_string(&path).unwrap();
    text.push('\n');
    fs::write(&path, text).unwrap();
    let out = pgbart(&["predict", s(&run), "--data", s(&data)]);
    assert_eq!(out.status.code(), Some(3));
}

fn checksums(run: &Path) -> Value {
    let m: Value = serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    let mut files = m["files"].clone();
    // the config echo records the output directory
    files.as_object_mut().unwrap().remove("config.json");
    files
}

#[test]
fn rerunning_the_config_echo_reproduces_the_run() {
    let tmp = TempDir::new().unwrap();
    let (_, run) = small_run(&tmp, "2");
    let again = tmp.path().join("again");
    ok(&["fit", "--config", s(&run.join("config.json")), "--out", s(&again)]);
    assert_eq!(checksums(&run), checksums(&again));
}

#[test]
fn heteroscedastic_fit_has_two_latent_columns_per_row() {
    let tmp = TempDir::new().unwrap();
    let run = tmp.path().join("mk");
    let cfg = fixtures().join("marketing.json");
    ok(&[
        "fit", "--config", s(&cfg), "--m", "20", "--tune", "50", "--draws", "30", "--chains", "1", "--out", s(&run),
    ]);
    let (header, _) = read_csv(&run.join("latent_chain0.csv"));
    assert_eq!(header.len(), 1 + 2 * 200);
    let out = ok(&["predict", s(&run), "--data", s(&fixtures().join("marketing.csv"))]);
    assert_eq!(out.lines().count(), 1 + 2 * 200);
    assert!(out.lines().nth(2).unwrap().starts_with("0,1,"));
}

#[test]
fn bike_counts_depend_mostly_on_hour_and_temperature() {
    let tmp = TempDir::new().unwrap();
    let run = tmp.path().join("bikes");
    let cfg = fixtures().join("bikes.json");
    ok(&["fit", "--config", s(&cfg), "--tune", "300", "--draws", "300", "--chains", "2", "--out", s(&run)]);
    let order = ok(&["vi", s(&run)]);
    let names: Vec<&str> = order.trim().split(',').collect();
    assert_eq!(&names[..2], ["hour", "temperature"]);
}
