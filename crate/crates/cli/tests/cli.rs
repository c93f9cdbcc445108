use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command as Process;

use cdr_cli::ingest::{ingest, write_table};
use cdr_cli::{execute, Command, RunConfig};
use cdr_core::simulate::{simulate_hsm, CovariateSampler, HsmParams};

fn sample_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/synthetic")
}

fn config(name: &str, out: &Path, extra: &[&str]) -> RunConfig {
    let dir = sample_dir();
    let text = fs::read_to_string(dir.join(name)).unwrap();
    let mut overrides = vec![format!("output={}", out.display())];
    overrides.extend(extra.iter().map(|s| s.to_string()));
    RunConfig::parse(&text, &dir, &overrides).unwrap()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

#[test]
fn fit_on_bundled_sample() {
    let out = tempfile::tempdir().unwrap();
    assert_eq!(execute(Command::Fit, &config("fit.cfg", out.path(), &[]), None), 0);
    let m = manifest(out.path());
    assert_eq!(m["status"], "ok");
    assert_eq!(m["fits"][0]["failed_cells"], 0);
    assert_eq!(m["outputs"], serde_json::json!(["coefficients.csv"]));

    let mut rdr = csv::Reader::from_path(out.path().join("coefficients.csv")).unwrap();
    assert_eq!(rdr.headers().unwrap(), vec!["block", "s", "y", "coefficient", "estimate", "se"]);
    let mut blocks = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.unwrap();
        *blocks.entry(rec[0].to_string()).or_insert(0) += 1;
        rec[4].parse::<f64>().unwrap();
        assert!(rec[5].parse::<f64>().unwrap() >= 0.0);
    }
    // 3 selection points × 3 covariates, 9 outcome points × 2 covariates,
    // 9 censoring-point cells × 1, 18 interior cells × 2 sorting covariates.
    assert_eq!(blocks, BTreeMap::from([("mu".into(), 9), ("nu".into(), 18), ("rho0".into(), 9), ("rho".into(), 36)]));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let extra = ["bootstrap=50"];
    assert_eq!(execute(Command::Bands, &config("bands.cfg", a.path(), &extra), Some(1)), 0);
    // The output path is part of the config echo, so run the second copy
    // with the same output entry after moving the first one away.
    let first = files(a.path());
    fs::remove_dir_all(a.path()).unwrap();
    assert_eq!(execute(Command::Bands, &config("bands.cfg", a.path(), &extra), Some(4)), 0);
    assert_eq!(first, files(a.path()));
    assert!(first.contains_key("bands.csv") && first.contains_key("plot_sorting.csv"));
    drop(b);
}

#[test]
fn bands_with_two_draws() {
    let out = tempfile::tempdir().unwrap();
    assert_eq!(execute(Command::Bands, &config("bands.cfg", out.path(), &["bootstrap=2"]), None), 0);
    let mut rdr = csv::Reader::from_path(out.path().join("bands.csv")).unwrap();
    assert_eq!(rdr.headers().unwrap(), vec!["s", "y", "estimate", "lower", "upper", "cv", "level"]);
    for rec in rdr.records() {
        let rec = rec.unwrap();
        let v: Vec<f64> = rec.iter().map(|x| x.parse().unwrap()).collect();
        assert!(v[5].is_finite());
        assert!(v[3] <= v[2] && v[2] <= v[4]);
        assert!(((v[4] - v[2]) - (v[2] - v[3])).abs() < 1e-12);
    }
}

#[test]
fn decomposition_outputs_telescope() {
    let out = tempfile::tempdir().unwrap();
    assert_eq!(execute(Command::Decompose, &config("decompose.cfg", out.path(), &["bootstrap=20"]), None), 0);
    let mut rdr = csv::Reader::from_path(out.path().join("decomposition.csv")).unwrap();
    let head = rdr.headers().unwrap().clone();
    assert_eq!(&head[0], "tau");
    assert!(head.iter().any(|h| h == "wage_structure_lower"));
    assert!(head.iter().any(|h| h == "composition_share"));
    for rec in rdr.records() {
        let rec = rec.unwrap();
        let v: Vec<f64> = (1..6).map(|i| rec[i].parse().unwrap()).collect();
        assert!((v[1] + v[2] + v[3] + v[4] - v[0]).abs() <= 1e-12);
    }
    let mut rdr = csv::Reader::from_path(out.path().join("hours.csv")).unwrap();
    for rec in rdr.records() {
        let v: Vec<f64> = rec.unwrap().iter().map(|x| x.parse().unwrap()).collect();
        assert!((v[2] + v[3] - v[1]).abs() <= 1e-12);
    }
    assert_eq!(manifest(out.path())["fits"].as_array().unwrap().len(), 2);
}

#[test]
fn simulate_write_ingest_round_trip() {
    let p = HsmParams {
        nu: vec![1.0, 0.5],
        mu: vec![-5.0, 5.0, 40.0],
        sigma_u: 1.0,
        sigma_v: 20.0,
        rho: 0.5,
        sampler: CovariateSampler::default_design(),
    };
    let (table, _) = simulate_hsm(500, &p, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.csv");
    write_table(fs::File::create(&path).unwrap(), &table, &p.sampler.names, Some(0), None).unwrap();
    let cfg = RunConfig::parse("covariates = x1\ninstruments = z1", dir.path(), &[]).unwrap();
    let back = ingest(&path, &cfg).unwrap();
    assert_eq!(back.table, table);
    assert_eq!(back.filled_at_censoring, 0);
}

#[test]
fn simulate_command_matches_the_bundled_sample() {
    let out = tempfile::tempdir().unwrap();
    let cfg = config("simulate.cfg", out.path(), &[]);
    assert_eq!(execute(Command::Simulate, &cfg, None), 0);
    assert_eq!(fs::read(out.path().join("data.csv")).unwrap(), fs::read(sample_dir().join("data.csv")).unwrap());
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn run_binary(args: &[&str], workers: Option<&str>) -> (i32, String) {
    let mut cmd = Process::new(env!("CARGO_BIN_EXE_cdr"));
    cmd.args(args);
    match workers {
        Some(w) => cmd.env("CDR_WORKERS", w),
        None => cmd.env_remove("CDR_WORKERS"),
    };
    let out = cmd.output().unwrap();
    (out.status.code().unwrap(), String::from_utf8(out.stderr).unwrap())
}

#[test]
fn exit_codes_and_error_payloads() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (code, _) = run_binary(&["frobnicate", "x.cfg"], None);
    assert_eq!(code, 2);

    let cfg = write(d, "bad.cfg", "input = data.csv\noutput = out_bad\nlevel = 2\n");
    let (code, err) = run_binary(&["fit", cfg.to_str().unwrap()], None);
    assert_eq!(code, 2);
    let payload: serde_json::Value = serde_json::from_str(err.trim()).unwrap();
    assert_eq!(payload["kind"], "config");

    write(d, "broken.csv", "s,y,x1,z1\n1,1,0,0\n2,,0,1\n");
    let cfg = write(d, "data.cfg", "input = broken.csv\noutput = out_data\ncovariates = x1\ninstruments = z1\n");
    let (code, err) = run_binary(&["fit", cfg.to_str().unwrap()], None);
    assert_eq!(code, 3);
    let payload: serde_json::Value = serde_json::from_str(err.trim()).unwrap();
    assert_eq!(payload["row"], 3);
    let m = manifest(&d.join("out_data"));
    assert_eq!(m["status"], "error");
    assert_eq!(m["error"]["exit_code"], 3);

    // Nobody exceeds s = 10, so the selection probit at 10 is separated.
    let mut csv = String::from("s,y,x1,z1\n");
    for i in 0..60 {
        let s = if i % 3 == 0 { 0.0 } else { 1.0 + (i % 7) as f64 };
        let y = if s > 0.0 { format!("{}", (i % 5) as f64 * 0.3) } else { String::new() };
        csv.push_str(&format!("{s},{y},{},{}\n", (i % 11) as f64 / 5.0 - 1.0, i % 2));
    }
    write(d, "sep.csv", &csv);
    let cfg = write(
        d,
        "sep.cfg",
        "input = sep.csv\noutput = out_sep\ncovariates = x1\ninstruments = z1\ns_points = 0, 10\ny_quantiles = 0.5\n",
    );
    let (code, err) = run_binary(&["fit", cfg.to_str().unwrap()], None);
    assert_eq!(code, 4, "{err}");
    let m = manifest(&d.join("out_sep"));
    assert_eq!(m["error"]["kind"], "numerical");
    assert!(m["error"]["cell"].as_str().unwrap().contains("s=10"));

    let (code, _) = run_binary(&["fit", cfg.to_str().unwrap()], Some("zero"));
    assert_eq!(code, 2);
}

#[test]
fn worker_count_does_not_change_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let sample = sample_dir();
    let text = fs::read_to_string(sample.join("fit.cfg"))
        .unwrap()
        .replace("input = data.csv", &format!("input = {}", sample.join("data.csv").display()))
        .replace("output = out/fit", "output = out");
    let cfg = write(dir.path(), "fit.cfg", &text);
    let (code, err) = run_binary(&["fit", cfg.to_str().unwrap()], Some("1"));
    assert_eq!(code, 0, "{err}");
    let one = files(&dir.path().join("out"));
    fs::remove_dir_all(dir.path().join("out")).unwrap();
    let (code, _) = run_binary(&["fit", cfg.to_str().unwrap()], Some("6"));
    assert_eq!(code, 0);
    assert_eq!(one, files(&dir.path().join("out")));
}
