use std::collections::HashMap;
use std::path::Path;

use snmm::harness::{replicate_study, Preset, RunConfig};

fn read_columns(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

#[test]
fn summary_tables_match_raw_replicates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::for_study(Preset::Study1);
    let report = replicate_study(Preset::Study1, 6, 17, Some(dir.path()), &cfg).unwrap();
    assert_eq!(report.successes, 6);

    let (header, rows) = read_columns(&dir.path().join("raw.csv"));
    let mut raw: HashMap<String, Vec<f64>> = HashMap::new();
    for row in &rows {
        for (h, v) in header.iter().zip(row) {
            if let Ok(x) = v.parse::<f64>() {
                raw.entry(h.clone()).or_default().push(x);
            }
        }
    }

    let z = 1.959_963_984_540_054;
    let mut checked = 0;
    for table in &report.tables {
        let (cols, rows) = read_columns(&dir.path().join(format!("{}.csv", table.name)));
        let cell = |row: &str, col: usize| -> f64 {
            rows.iter().find(|r| r[0] == row).unwrap()[col].parse().unwrap()
        };
        for (c, name) in cols.iter().enumerate().skip(1) {
            let xs = &raw[name];
            let r = xs.len() as f64;
            let truth = cell("true", c);
            let mean = xs.iter().sum::<f64>() / r;
            let mse = xs.iter().map(|x| (x - truth).powi(2)).sum::<f64>() / r;
            let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (r - 1.0)).sqrt();
            let half = z * sd / r.sqrt();
            for (row, expect) in [("mean", mean), ("mse", mse), ("ci_lower", mean - half), ("ci_upper", mean + half)] {
                let got = cell(row, c);
                assert!((got - expect).abs() <= 1e-12, "{}:{name}:{row} {got} vs {expect}", table.name);
            }
            checked += 1;
        }
    }
    assert!(checked >= 3 * 3);

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 17);
    assert!(manifest["config"].is_object());
    assert_eq!(std::fs::read_dir(dir.path().join("replicates")).unwrap().count(), 6);
}

#[test]
fn run_config_round_trips_through_toml() {
    for cfg in [RunConfig::for_study(Preset::Study1), RunConfig::for_study(Preset::Study2), RunConfig::for_auction()] {
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(back.to_toml().unwrap(), text);
    }
    assert!(RunConfig::from_toml_str("bogus_key = 1").is_err());
}
