mod common;

use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sdde-optlab"));
    cmd.env_remove("SDDE_OPTLAB_SEED");
    cmd
}

fn run(args: &[&str], out: &Path) -> Output {
    bin().args(args).arg("--out").arg(out).output().expect("spawn binary")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn recipe_variant(dir: &Path, from: &str, to: &str) -> String {
    let text = std::fs::read_to_string(common::recipe_path("fig1.cfg")).unwrap();
    assert!(text.contains(from));
    let path = dir.join("variant.cfg");
    std::fs::write(&path, text.replace(from, to)).unwrap();
    path.to_string_lossy().into_owned()
}

fn manifest_value(dir: &Path, key: &str) -> String {
    let text = std::fs::read_to_string(dir.join("manifest")).unwrap();
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")).map(str::to_owned))
        .unwrap_or_else(|| panic!("no {key} in manifest:\n{text}"))
}

#[test]
fn char_root_without_delay_is_minus_a() {
    let tmp = TempDir::new().unwrap();
    let o = run(&["char-root", "--a", "1", "--tau", "0"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("V = -1"), "{}", stdout(&o));
}

#[test]
fn ou_moments_default_problem() {
    let tmp = TempDir::new().unwrap();
    let o = run(&["ou-moments", "--t", "1"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("1.471518"), "{}", stdout(&o));
    let csv = std::fs::read_to_string(tmp.path().join("ou_moments.csv")).unwrap();
    assert!(csv.starts_with("t,mean_0,cov_0_0\n"), "{csv}");
}

#[test]
fn compare_writes_artifacts_reproducibly() {
    let tmp = TempDir::new().unwrap();
    let cfg = common::recipe_path("fig1.cfg");
    let cfg = cfg.to_str().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let o = run(&["--config", cfg, "compare"], dir);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for file in ["asgd.csv", "surrogate.csv", "sdde.csv", "noise.csv", "gaps.csv", "report.csv", "manifest"] {
        let first = std::fs::read(a.join(file)).unwrap();
        assert_eq!(first, std::fs::read(b.join(file)).unwrap(), "{file} differs");
    }
    assert_eq!(manifest_value(&a, "seed"), "20190607");
    assert_eq!(manifest_value(&a, "seed_source"), "config");
    let asgd = std::fs::read_to_string(a.join("asgd.csv")).unwrap();
    assert_eq!(asgd.lines().count(), 2002);
}

#[test]
fn compare_gaps_match_golden() {
    let tmp = TempDir::new().unwrap();
    let cfg = common::recipe_path("fig1.cfg");
    let o = run(&["--config", cfg.to_str().unwrap(), "compare"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(tmp.path().join("gaps.csv")).unwrap();
    let golden = common::read_golden();
    let rows: Vec<Vec<f64>> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), golden.len());
    for (row, g) in rows.iter().zip(&golden) {
        approx::assert_abs_diff_eq!(row[1], g.max_gap, epsilon = 1e-10);
        approx::assert_abs_diff_eq!(row[2], g.terminal_gap, epsilon = 1e-10);
    }
}

#[test]
fn empty_config_lists_missing_keys() {
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("empty.cfg");
    std::fs::write(&path, "").unwrap();
    let o = run(&["--config", path.to_str().unwrap(), "validate"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("[experiment] kind"), "{err}");
    assert!(err.contains("[initial] x0"), "{err}");
}

#[test]
fn validate_prints_normalized_config() {
    let tmp = TempDir::new().unwrap();
    let cfg = common::recipe_path("fig1.cfg");
    let o = run(&["--config", cfg.to_str().unwrap(), "validate"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("warmup = true"), "{text}");
    assert!(text.contains("eta = 0.005"), "{text}");
}

#[test]
fn zero_replications_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = recipe_variant(tmp.path(), "replications = 20", "replications = 0");
    let o = run(&["--config", &cfg, "compare"], tmp.path());
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn unknown_key_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = recipe_variant(tmp.path(), "batch = 1", "batch = 1\nbatchsize = 4");
    let o = run(&["--config", &cfg, "validate"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("batchsize"), "{}", stderr(&o));
}

#[test]
fn divergence_is_a_numerical_failure() {
    let tmp = TempDir::new().unwrap();
    let text = std::fs::read_to_string(common::recipe_path("fig1.cfg")).unwrap();
    let text = text.replace("eta = 0.005", "eta = 2.5").replace("checkpoints = [1.0, 2.5, 5.0, 7.5]\n", "");
    let cfg = tmp.path().join("diverge.cfg");
    std::fs::write(&cfg, text).unwrap();
    let o = run(&["--config", cfg.to_str().unwrap(), "compare"], tmp.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"), "{}", stderr(&o));
}

#[test]
fn seed_from_environment_is_recorded() {
    let tmp = TempDir::new().unwrap();
    let cfg = recipe_variant(tmp.path(), "seed = 20190607\n", "");
    let o = bin()
        .env("SDDE_OPTLAB_SEED", "77")
        .args(["--config", &cfg, "simulate-asgd", "--out"])
        .arg(tmp.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(manifest_value(tmp.path(), "seed"), "77");
    assert_eq!(manifest_value(tmp.path(), "seed_source"), "environment");
}

#[test]
fn command_line_seed_overrides_config() {
    let tmp = TempDir::new().unwrap();
    let cfg = common::recipe_path("fig1.cfg");
    let o = bin()
        .env("SDDE_OPTLAB_SEED", "77")
        .args(["--config", cfg.to_str().unwrap(), "--seed", "5", "simulate-sdde", "--out"])
        .arg(tmp.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(manifest_value(tmp.path(), "seed"), "5");
    assert_eq!(manifest_value(tmp.path(), "seed_source"), "command line");
}

#[test]
fn missing_subcommand_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let o = run(&[], tmp.path());
    assert_eq!(o.status.code(), Some(1));
}
