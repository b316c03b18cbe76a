use std::fs;
use std::process::Command;

fn snmm() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_snmm"));
    c.env("RUST_LOG", "warn");
    c
}

#[test]
fn replicate_writes_tables_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let status = snmm()
        .args(["replicate", "study1", "--replicates", "3", "--seed", "4", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    for f in ["raw.csv", "ml_means.csv", "ml_variances.csv", "reml_variances.csv", "report.json", "manifest.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn malformed_config_reports_parse_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "seed = 3\n[saem]\niterations = \"many\n").unwrap();
    let out = snmm().arg("fit").arg("--config").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "[saem]\niteratons = 10\n").unwrap();
    let out = snmm().arg("fit").arg("--config").arg(&cfg).output().unwrap();
    assert!(matches!(out.status.code(), Some(2) | Some(3)));
}

#[test]
fn auction_rejects_non_monotone_bids() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("bids.csv");
    fs::write(&data, "auction_id,bid_time,live_bid\na,0.5,10\na,1.0,12\na,2.0,11\n").unwrap();
    let out = snmm()
        .args(["auction", "fit", "--no-validate-totals", "--data"])
        .arg(&data)
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn dictionary_describe_lists_atoms() {
    let out = snmm().args(["dict", "describe"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("haar"));
}
