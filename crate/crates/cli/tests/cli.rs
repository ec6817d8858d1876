use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use svib_cli::plot::{self, PlotSeries};
use svib_cli::Manifest;
use svib_core::metrics::{MetricsRecord, MetricsWriter, RecordType};

fn svib(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_svib"))
        .args(args)
        .env_remove("SVIB_RUNS_DIR")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny() -> String {
    format!("{}/../../configs/tiny.json", env!("CARGO_MANIFEST_DIR"))
}

fn only_run_dir(root: &Path) -> PathBuf {
    let hash: Vec<_> = std::fs::read_dir(root).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(hash.len(), 1, "{hash:?}");
    let seeds: Vec<_> = std::fs::read_dir(&hash[0]).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(seeds.len(), 1, "{seeds:?}");
    seeds[0].clone()
}

/// Relative path -> bytes for every file under `dir`.
fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn missing_beta_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let mut doc: Value = serde_json::from_str(&std::fs::read_to_string(tiny()).unwrap()).unwrap();
    doc["svgd"].as_object_mut().unwrap().remove("beta");
    let path = dir.path().join("c.json");
    std::fs::write(&path, doc.to_string()).unwrap();
    let o = svib(&["train", "--config", path.to_str().unwrap(), "--runs-dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("svgd.beta"), "{}", stderr(&o));
}

#[test]
fn invalid_override_is_rejected() {
    let o = svib(&["train", "--config", &tiny(), "--set", "svgd.particles=0", "--print-config"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("svgd.particles"), "{}", stderr(&o));
}

#[test]
fn flags_override_config_values() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path().to_str().unwrap();
    let o = svib(&["train", "--config", &tiny(), "--seed", "7", "--variant", "svib_gaussian", "--set", "schedule.total_updates=2", "--runs-dir", r]);
    assert!(o.status.success(), "{}", stderr(&o));
    let dir = only_run_dir(root.path());
    assert_eq!(dir.file_name().unwrap(), "7");
    let m = Manifest::read(&dir).unwrap();
    assert_eq!((m.seed, m.config.variant.name()), (7, "svib_gaussian"));
    assert_eq!(m.config.schedule.total_updates, 2);
    let metrics = std::fs::read_to_string(dir.join("metrics.jsonl")).unwrap();
    assert!(metrics.lines().all(|l| l.contains("\"svib_gaussian\"") && l.contains("\"seed\":7")));
}

#[test]
fn runs_dir_env_var_is_honoured() {
    let root = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_svib"))
        .args(["train", "--config", &tiny(), "--set", "schedule.total_updates=1"])
        .env("SVIB_RUNS_DIR", root.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(only_run_dir(root.path()).join("metrics.jsonl").is_file());
}

#[test]
fn repeated_run_is_byte_identical_apart_from_start_time() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path().to_str().unwrap();
    let run = || {
        let o = svib(&["train", "--config", &tiny(), "--runs-dir", r]);
        assert!(o.status.success(), "{}", stderr(&o));
        let dir = only_run_dir(root.path());
        let mut m = Manifest::read(&dir).unwrap();
        m.started_unix = 0;
        let files: Vec<_> = tree(&dir).into_iter().filter(|(p, _)| p != "manifest.json").collect();
        (files, m)
    };
    let (a, ma) = run();
    let (b, mb) = run();
    assert!(a.iter().any(|(p, _)| p.starts_with("checkpoints")));
    assert_eq!(a, b);
    assert_eq!(ma, mb);
}

fn verify(args: &[&str]) -> (Option<i32>, Value) {
    let mut full = vec!["verify-oracle"];
    full.extend_from_slice(args);
    let o = svib(&full);
    (o.status.code(), serde_json::from_slice(&o.stdout).unwrap())
}

#[test]
fn verify_oracle_default_counts_pass() {
    let (code, rep) = verify(&[]);
    assert_eq!(code, Some(0));
    assert_eq!(rep["passed"], true);
    assert!(rep["checks"].as_u64().unwrap() >= 150, "{rep}");
    assert_eq!(rep["failures"].as_array().unwrap().len(), 0);
}

#[test]
fn verify_oracle_zero_counts_is_vacuous() {
    let (code, rep) = verify(&["--count", "0"]);
    assert_eq!(code, Some(0));
    assert_eq!((rep["passed"].clone(), rep["checks"].as_u64()), (Value::Bool(true), Some(0)));
}

#[test]
fn verify_oracle_catches_off_by_beta_target() {
    let (code, rep) = verify(&["--count", "10", "--inject-fault", "off-by-beta"]);
    assert_eq!(code, Some(1));
    assert_eq!(rep["passed"], false);
    let failures = rep["failures"].as_array().unwrap();
    assert!(!failures.is_empty());
    assert!(failures.iter().all(|f| f["sweep"] == "theorem2" && f["seed"].is_u64()), "{rep}");
}

#[test]
fn probe_mi_reads_pair_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pairs.jsonl");
    let lines: Vec<String> = (0..32)
        .map(|i| {
            let x = (i as f64 * 0.37).sin();
            format!("{{\"x\":[{x}],\"z\":[{}]}}", 2.0 * x)
        })
        .collect();
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    let o = svib(&["probe-mi", path.to_str().unwrap(), "--steps", "200", "--hidden", "16", "--learning-rate", "0.01"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rep: Value = serde_json::from_slice(&o.stdout).unwrap();
    let mi = rep["mi_nats"].as_f64().unwrap();
    assert_eq!(rep["pairs"], 32);
    // z = 2x is fully dependent; the shuffle estimate is capped near ln 32.
    assert!(mi > 0.5 && mi < (32f64).ln() + 0.1, "{mi}");
}

fn write_metrics(dir: &Path, variant: &str, seed: u64, ys: &[f64]) {
    std::fs::create_dir_all(dir).unwrap();
    let mut w = MetricsWriter::create(&dir.join("metrics.jsonl")).unwrap();
    for (i, &y) in ys.iter().enumerate() {
        w.write(&MetricsRecord::new(RecordType::Train, 10 * i as u64, seed, variant).with("mean_return", y))
            .unwrap();
    }
}

#[test]
fn plot_median_matches_sorted_values() {
    let root = tempfile::tempdir().unwrap();
    let seeds = [[0.1, 0.9, 0.5], [0.3, 0.2, 0.4], [0.2, 0.6, 0.8]];
    for (s, ys) in seeds.iter().enumerate() {
        write_metrics(&root.path().join(s.to_string()), "vanilla_a2c", s as u64, ys);
    }
    let out = root.path().join("plots");
    let o = svib(&["plot", root.path().to_str().unwrap(), "--out", out.to_str().unwrap(), "--svg"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = plot::read_csv(&out.join("mean_return_vanilla_a2c_median.csv"), "m").unwrap();
    let expected: Vec<f64> = (0..3)
        .map(|t| {
            let mut col: Vec<f64> = seeds.iter().map(|s| s[t]).collect();
            col.sort_by(|a, b| a.partial_cmp(b).unwrap());
            col[1]
        })
        .collect();
    assert_eq!((m.x, m.y), (vec![0, 10, 20], expected));
    let per_run = plot::read_csv(&out.join("mean_return_vanilla_a2c_seed1.csv"), "r").unwrap();
    assert_eq!(per_run.y, seeds[1].to_vec());
    assert!(std::fs::read_to_string(out.join("mean_return.svg")).unwrap().contains("<polyline"));
}

#[test]
fn plot_reports_available_fields() {
    let root = tempfile::tempdir().unwrap();
    write_metrics(root.path(), "a2c_noise", 0, &[0.5]);
    let out = root.path().join("plots");
    let o = svib(&["plot", root.path().to_str().unwrap(), "--field", "mi_nats", "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("available fields: mean_return"), "{}", stderr(&o));
}

#[test]
fn plot_rejects_truncated_metrics() {
    let root = tempfile::tempdir().unwrap();
    write_metrics(root.path(), "a2c_noise", 0, &[0.5, 0.6]);
    let p = root.path().join("metrics.jsonl");
    let text = std::fs::read_to_string(&p).unwrap();
    std::fs::write(&p, &text[..text.len() - 10]).unwrap();
    let o = svib(&["plot", root.path().to_str().unwrap(), "--out", root.path().join("o").to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("truncated"), "{}", stderr(&o));
}

#[test]
fn csv_round_trips_full_precision() {
    let dir = tempfile::tempdir().unwrap();
    let y = vec![0.1 + 0.2, 1.0 / 3.0, -2.5e-300, 6.02214076e23, f64::MIN_POSITIVE];
    let s = PlotSeries::new("s", vec![0, 3, 9, 27, 81], y).unwrap();
    let p = dir.path().join("s.csv");
    plot::write_csv(&p, &s).unwrap();
    let back = plot::read_csv(&p, "s").unwrap();
    assert_eq!((back.x, back.y), (s.x, s.y));
}
