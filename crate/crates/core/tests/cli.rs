use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

const BIN: &str = env!("CARGO_BIN_EXE_symblend");

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/configs")
}

fn run(sub: &[&str], config: &Path, out: &Path, extra: &[&str]) -> i32 {
    Command::new(BIN)
        .args(sub)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(extra)
        .env_remove("SYMBLEND_THREADS")
        .status()
        .unwrap()
        .code()
        .unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.toml");
    fs::write(&p, text).unwrap();
    p
}

fn table(out: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(out.join("table.csv")).unwrap().lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect()
}

fn manifest(out: &Path) -> toml::Table {
    toml::from_str(&fs::read_to_string(out.join("manifest.toml")).unwrap()).unwrap()
}

fn measured(out: &Path, key: &str) -> toml::Value {
    manifest(out)["measured"][key].clone()
}

#[test]
fn cover_check_on_the_affine_toy() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["cover-check"], &configs().join("cover_toy.toml"), dir.path(), &[]), 0);
    let rows = table(dir.path());
    assert_eq!(rows[0][2], "true");
    let a: f64 = rows[0][3].parse().unwrap();
    assert!((a - 0.25).abs() <= 0.01);
    assert_eq!(measured(dir.path(), "a").as_float().unwrap(), a);
}

#[test]
fn melnikov_series_on_the_geometric_toy() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["melnikov"], &configs().join("melnikov_series.toml"), dir.path(), &[]), 0);
    let row = &table(dir.path())[0];
    let (value, tail): (f64, f64) = (row[1].parse().unwrap(), row[3].parse().unwrap());
    assert!((value - 1.0 / 3.0).abs() <= tail);
}

#[test]
fn check_flag_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fs::read_to_string(configs().join("melnikov_b3.toml")).unwrap().replace("check = \"b3\"", "check = \"series\"");
    let path = write_config(dir.path(), &cfg);
    let out = dir.path().join("out");
    assert_eq!(run(&["melnikov"], &path, &out, &[]), 2);
    assert_eq!(run(&["melnikov", "--check", "b3"], &path, &out, &[]), 0);
    let re: f64 = table(&out)[0][1].parse().unwrap();
    assert!((re - 4.0 * std::f64::consts::PI.powi(2)).abs() < 1e-8);
    assert_eq!(measured(&out, "passes").as_bool(), Some(true));
}

#[test]
fn hormander_example_passes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["melnikov"], &configs().join("melnikov_b6.toml"), dir.path(), &[]), 0);
    assert_eq!(measured(dir.path(), "min_rank").as_integer(), Some(2));
}

#[test]
fn empty_config_is_a_schema_error() {
    let dir = tempfile::tempdir().unwrap();
    for text in ["", "  \n# nothing\n"] {
        let path = write_config(dir.path(), text);
        for sub in ["cover-check", "reach", "melnikov", "linearize"] {
            assert_eq!(run(&[sub], &path, &dir.path().join("out"), &[]), 2, "{sub}");
        }
    }
}

#[test]
fn schema_violations_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cases = [
        ("cover-check", "grid_res = 0.01\nbogus = 1\n[toy]\ntranslations = [0.0]"),
        ("reach", "eps = \"small\""),
        ("linearize", "preset = \"d9\"\nns = [1]"),
        ("cover-check", "grid_res = -1.0\n[toy]\ntranslations = [0.0]"),
    ];
    for (sub, text) in cases {
        let path = write_config(dir.path(), text);
        assert_eq!(run(&[sub], &path, &out, &[]), 2, "{text}");
    }
    assert_eq!(Command::new(BIN).arg("reach").status().unwrap().code(), Some(2));
    assert_eq!(Command::new(BIN).arg("no-such-command").status().unwrap().code(), Some(2));
}

#[test]
fn computation_failure_exits_with_one_and_records_it() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "[series]\nj_max = 5\ntol = 1e-12\npoints = [0.0]\n");
    assert_eq!(run(&["melnikov"], &path, dir.path(), &[]), 1);
    let m = manifest(dir.path());
    assert_eq!(m["run"]["status"].as_str(), Some("failed"));
    assert!(m["run"]["error"].as_str().unwrap().contains("budget"));
    assert!(!dir.path().join("table.csv").exists());
}

#[test]
fn identical_runs_give_identical_tables() {
    for (sub, cfg) in [("skew-shadow", "skew_shadow.toml"), ("reach", "reach.toml"), ("nhim-bvp", "nhim_cubic.toml")] {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        assert_eq!(run(&[sub], &configs().join(cfg), a.path(), &["--seed", "5"]), 0);
        assert_eq!(run(&[sub], &configs().join(cfg), b.path(), &["--seed", "5", "--threads", "1"]), 0);
        assert_eq!(fs::read(a.path().join("table.csv")).unwrap(), fs::read(b.path().join("table.csv")).unwrap(), "{sub}");
        assert_eq!(manifest(a.path())["measured"], manifest(b.path())["measured"]);
    }
}

#[test]
fn seed_flag_changes_random_draws() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = configs().join("skew_shadow.toml");
    assert_eq!(run(&["skew-shadow"], &cfg, a.path(), &["--seed", "1"]), 0);
    assert_eq!(run(&["skew-shadow"], &cfg, b.path(), &["--seed", "2"]), 0);
    assert_ne!(fs::read(a.path().join("table.csv")).unwrap(), fs::read(b.path().join("table.csv")).unwrap());
    assert_eq!(manifest(a.path())["run"]["seed_override"].as_integer(), Some(1));
    assert_eq!(measured(a.path(), "violations").as_integer(), Some(0));
}

#[test]
fn thread_count_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("cover_toy.toml");
    let status = |env: &str| {
        Command::new(BIN)
            .args(["cover-check", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(dir.path())
            .env("SYMBLEND_THREADS", env)
            .status()
            .unwrap()
            .code()
    };
    assert_eq!(status("1"), Some(0));
    assert_eq!(manifest(dir.path())["run"]["threads"].as_integer(), Some(1));
    assert_eq!(status("lots"), Some(2));
}

#[test]
fn linear_boundary_value_rows() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["nhim-bvp"], &configs().join("nhim_bvp.toml"), dir.path(), &[]), 0);
    let rows = table(dir.path());
    let first = &rows[0];
    assert_eq!(first[1], "3");
    let (qn, p0): (f64, f64) = (first[6].parse().unwrap(), first[7].parse().unwrap());
    assert!((qn - 0.08 / 8.0).abs() <= 1e-14 && (p0 - 0.04 / 8.0).abs() <= 1e-14);
}

#[test]
fn linearize_reports_the_derived_start_time() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["linearize"], &configs().join("linearize_d1.toml"), dir.path(), &[]), 0);
    assert_eq!(measured(dir.path(), "n_eps").as_integer(), Some(501));
    assert_eq!(table(dir.path()).len(), 7);
}
