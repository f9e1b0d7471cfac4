use std::path::Path;
use std::process::{Command, Output};

use auctioneer::Fixed;
use auctioneer_cli::report::RunReport;
use auctioneer_cli::ExperimentConfig;
use tempfile::TempDir;

fn auctioneer(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_auctioneer"))
        .args(args)
        .env_remove("AUCTIONEER_SEED")
        .env("AUCTIONEER_OUT_DIR", dir.join("out"))
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("cfg.toml");
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

const SMALL_DOUBLE: &str = r#"
[auction]
kind = "double"
m = 4
n = 12
k = 1

[run]
seed = 3
rounds = 4
"#;

#[test]
fn simulate_writes_consistent_json_and_csv() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), SMALL_DOUBLE);
    let out = auctioneer(&["simulate", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let json = std::fs::read_to_string(dir.path().join("out/simulate.json")).unwrap();
    let report: RunReport = serde_json::from_str(&json).unwrap();
    assert_eq!(report.totals.rounds, 4);
    assert!(!report.timing_note.is_empty());

    let mut rdr = csv::Reader::from_path(dir.path().join("out/simulate.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let (mut welfare, mut up, mut pp, mut rows) = (Fixed::ZERO, Fixed::ZERO, Fixed::ZERO, 0);
    for rec in rdr.records() {
        let rec = rec.unwrap();
        welfare += rec[col("welfare")].parse::<Fixed>().unwrap();
        up += rec[col("user_payments")].parse::<Fixed>().unwrap();
        pp += rec[col("provider_payments")].parse::<Fixed>().unwrap();
        rows += 1;
    }
    assert_eq!(rows, 4);
    assert_eq!(welfare, report.totals.welfare);
    assert_eq!(up, report.totals.user_payments);
    assert_eq!(pp, report.totals.provider_payments);

    for r in &report.rounds {
        assert_eq!(r.recomputed_welfare().unwrap(), r.welfare);
    }
}

#[test]
fn same_config_same_report() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), SMALL_DOUBLE);
    let read = || {
        assert_eq!(auctioneer(&["simulate", &cfg], dir.path()).status.code(), Some(0));
        let json = std::fs::read_to_string(dir.path().join("out/simulate.json")).unwrap();
        let r: RunReport = serde_json::from_str(&json).unwrap();
        r.rounds.iter().map(|r| r.fingerprint()).collect::<Vec<_>>()
    };
    assert_eq!(read(), read());
}

#[test]
fn seed_override_from_environment() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), SMALL_DOUBLE);
    let out = Command::new(env!("CARGO_BIN_EXE_auctioneer"))
        .args(["simulate", &cfg])
        .env("AUCTIONEER_SEED", "99")
        .env("AUCTIONEER_OUT_DIR", dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let json = std::fs::read_to_string(dir.path().join("out/simulate.json")).unwrap();
    let r: RunReport = serde_json::from_str(&json).unwrap();
    assert_eq!(r.config.run.seed, 99);
    assert_eq!(r.rounds[0].seed, 99);
}

#[test]
fn invalid_configs_exit_with_usage_status() {
    let dir = TempDir::new().unwrap();
    for (text, field) in [
        ("[auction]\nm = 4\nk = 2\n", "auction.m"),
        ("[run]\nrounds = 0\n", "run.rounds"),
        ("[auction]\nm = 8\nk = 1\nparallelism = 2\n", "auction.parallelism"),
        ("[auction]\nnope = true\n", "config"),
    ] {
        let cfg = write_config(dir.path(), text);
        let out = auctioneer(&["simulate", &cfg], dir.path());
        assert_eq!(out.status.code(), Some(2), "{text}");
        assert!(String::from_utf8_lossy(&out.stderr).contains(field), "{text}");
    }
    let out = auctioneer(&["simulate", "/nonexistent/cfg.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(auctioneer(&["frobnicate"], dir.path()).status.code(), Some(2));
}

#[test]
fn default_config_round_trips() {
    let dir = TempDir::new().unwrap();
    let out = auctioneer(&["default-config"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let cfg = ExperimentConfig::from_toml(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(cfg, ExperimentConfig::default());
}

#[test]
fn oracle_compare_matches_and_dumps_instances() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "[auction]\nkind = \"standard\"\nm = 4\nn = 5\nk = 1\ngroups = 2\n[run]\nrounds = 3\n",
    );
    let out = auctioneer(&["oracle-compare", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("3/3"));
    assert!(dir.path().join("out/oracle.json").exists());
    assert!(std::fs::read_dir(dir.path().join("out/instances")).unwrap().count() >= 3);
}

#[test]
fn check_exits_one_on_a_violation() {
    // demand misreports pay off in the standard auction, so the
    // truthfulness sweep reports a violation
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"
[auction]
kind = "standard"
m = 4
n = 3
k = 1
groups = 1

[run]
rounds = 2

[check]
samples = 30
mutations = false
truthfulness = true
lattice_users = 2
"#,
    );
    let out = auctioneer(&["check", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("out/check.txt")).unwrap();
    assert!(text.contains("truthfulness"));
    assert!(text.ends_with("FAIL\n"));
}

#[test]
fn check_passes_on_a_small_double_auction() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "[auction]\nm = 4\nn = 4\nk = 1\n[run]\nrounds = 2\n[check]\nsamples = 30\ntruthfulness = false\n",
    );
    let out = auctioneer(&["check", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(dir.path().join("out/check.json").exists());
}
