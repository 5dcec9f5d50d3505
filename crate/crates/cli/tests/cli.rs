use std::path::Path;
use std::process::{Command, Output};

fn qfdt(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qfdt"))
        .args(args)
        .current_dir(cwd)
        .env("QFDT_CACHE_DIR", cwd.join("cache"))
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn listing(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

const SMALL_RMT: &str = r#"
kind = "rmt_fdt"
[model]
n = 200
g = 0.1
observables = "sym"
[ensemble]
n_realizations = 1
n_initial_states = 2
seed = 3
[analysis]
window_samples = 500
"#;

#[test]
fn validate_names_missing_key() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), "kind = \"rmt_fdt\"\n[model]\nn = 100\n[ensemble]\nseed = 1\n").unwrap();
    let out = qfdt(&["validate", "c.toml"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("[model].g"), "{}", stderr(&out));
    assert!(stdout(&out).is_empty());
}

#[test]
fn unknown_key_is_a_validation_failure() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), format!("{SMALL_RMT}\n[budget]\nmemory_gb = 1\nspare = 2\n")).unwrap();
    let out = qfdt(&["validate", "c.toml"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("spare"), "{}", stderr(&out));
}

#[test]
fn validate_leaves_the_filesystem_alone() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), SMALL_RMT).unwrap();
    let before = listing(dir.path());
    let out = qfdt(&["validate", "c.toml", "--out-dir", "somewhere"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let summary: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert_eq!(summary["valid"], true);
    assert_eq!(summary["max_dimension"], 200);
    assert_eq!(listing(dir.path()), before);
}

#[test]
fn budget_refusal_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), SMALL_RMT.replace("n = 200", "n = 30000")).unwrap();
    let out = qfdt(&["validate", "c.toml", "--budget-gb", "1"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("budget"), "{}", stderr(&out));
}

#[test]
fn run_writes_rows_and_report() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), SMALL_RMT).unwrap();
    let out = qfdt(&["run", "c.toml", "--out-dir", "out", "--threads", "1"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let rows = std::fs::read_to_string(dir.path().join("out/rows.csv")).unwrap();
    let mut lines = rows.lines();
    assert_eq!(
        lines.next().unwrap(),
        "instance,N,g,gamma_fit,delta2_measured,delta2_diag,delta2_pred_simple,delta2_pred_general,dos,time_avg,mc_avg,flags"
    );
    assert_eq!(lines.count(), 2);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/report.json")).unwrap()).unwrap();
    assert_eq!(report["schema_version"], 1);
    assert_eq!(report["provenance"]["seed"], 3);
    assert_eq!(report["rows"].as_array().unwrap().len(), 2);

    // Same seed, same rows, bit for bit.
    let again = qfdt(&["run", "c.toml", "--out-dir", "again"], dir.path());
    assert_eq!(again.status.code(), Some(0));
    assert_eq!(std::fs::read_to_string(dir.path().join("again/rows.csv")).unwrap(), rows);
}

#[test]
fn timedep_writes_three_column_series() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("c.toml"),
        "kind = \"time_dependence\"\n[model]\nfamily = \"spin_chain\"\nn = 7\njz = 0.0\n[ensemble]\nn_initial_states = 1\nseed = 2\n",
    )
    .unwrap();
    let out = qfdt(&["timedep", "c.toml", "--out-dir", "td"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let series: Vec<String> = listing(&dir.path().join("td"))
        .into_iter()
        .filter(|f| f.starts_with("timeseries_"))
        .collect();
    assert_eq!(series.len(), 1);
    let text = std::fs::read_to_string(dir.path().join("td").join(&series[0])).unwrap();
    assert_eq!(text.lines().next().unwrap(), "t,measured,free,predicted");
    assert!(text.lines().skip(1).all(|l| l.split(',').count() == 4));
}

#[test]
fn oracle_check_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["oracle-check", "--n", "64", "--realizations", "20", "--seed", "3"];
    let a = qfdt(&args, dir.path());
    let b = qfdt(&args, dir.path());
    assert!(matches!(a.status.code(), Some(0) | Some(3)), "{}", stderr(&a));
    assert_eq!(a.status.code(), b.status.code());
    assert_eq!(stdout(&a), stdout(&b));
    assert_eq!(stdout(&a).lines().count(), 21);
}

#[test]
fn cache_stats_and_clear() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("c.toml"),
        format!("{SMALL_RMT}\n[output]\ncache = true\n"),
    )
    .unwrap();
    assert_eq!(qfdt(&["run", "c.toml", "--out-dir", "o"], dir.path()).status.code(), Some(0));
    let stats: serde_json::Value = serde_json::from_str(stdout(&qfdt(&["cache", "stats"], dir.path())).trim()).unwrap();
    assert_eq!(stats["entries"], 1);
    let cleared: serde_json::Value = serde_json::from_str(stdout(&qfdt(&["cache", "clear"], dir.path())).trim()).unwrap();
    assert_eq!(cleared["removed"], 1);
    let stats: serde_json::Value = serde_json::from_str(stdout(&qfdt(&["cache", "stats"], dir.path())).trim()).unwrap();
    assert_eq!(stats["entries"], 0);
}
