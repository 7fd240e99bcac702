use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use geoflow::config::RunConfig;
use geoflow::experiments::{run_flow, run_uniqueness};

fn geoflow(args: &[&str], out_dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geoflow"))
        .args(args)
        .env("GFLOW_OUT_DIR", out_dir)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn symbol_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bach = geoflow(
        &[
            "symbol",
            "--n",
            "4",
            "--k",
            "1",
            "--a",
            "-0.1666666667",
            "--b",
            "0.3333333333",
            "--c",
            "0.5",
        ],
        tmp.path(),
    );
    assert_eq!(bach.status.code(), Some(2));
    assert!(stdout(&bach).contains("verdict=critical"));

    let shifted = geoflow(
        &["symbol", "--n", "4", "--bach", "--obstruction-shift", "0.05"],
        tmp.path(),
    );
    assert_eq!(shifted.status.code(), Some(0));
    assert!(stdout(&shifted).contains("verdict=strongly_elliptic"));

    let plain = geoflow(
        &["symbol", "--n", "3", "--k", "1", "--a", "0", "--b", "0", "--c", "1"],
        tmp.path(),
    );
    assert_eq!(plain.status.code(), Some(0));
    assert!(stdout(&plain).contains("lambda=0.5 "));

    let unstable = geoflow(
        &["symbol", "--n", "3", "--a", "-0.3", "--b", "0", "--c", "1"],
        tmp.path(),
    );
    assert_eq!(unstable.status.code(), Some(3));
    assert!(stdout(&unstable).contains("witness_xi=[1,0,0]"));

    let invalid = geoflow(&["symbol", "--n", "3", "--a", "0", "--b", "0", "--c", "-1"], tmp.path());
    assert_eq!(invalid.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&invalid.stderr).contains("c must be positive"));
}

#[test]
fn verify_default_and_order_budget() {
    let tmp = tempfile::tempdir().unwrap();
    let full = geoflow(&["verify"], tmp.path());
    assert_eq!(full.status.code(), Some(0), "{}", stdout(&full));
    assert!(stdout(&full).contains("result=pass"));
    assert!(!stdout(&full).contains("insufficient"));

    let low = geoflow(&["verify", "--order", "3"], tmp.path());
    assert_eq!(low.status.code(), Some(0));
    let text = stdout(&low);
    let z_line = text
        .lines()
        .find(|l| l.starts_with("z_relation_free_of_fourth_derivatives"))
        .unwrap();
    assert!(z_line.contains("insufficient order"));
    let lie_line = text
        .lines()
        .find(|l| l.starts_with("commutator_vanishes_flat_affine"))
        .unwrap();
    assert!(!lie_line.contains("insufficient"));
}

#[test]
fn verify_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let args = ["verify", "--trials", "1000", "--seed", "7"];
    let first = geoflow(&args, tmp.path());
    let second = geoflow(&args, tmp.path());
    assert_eq!(first.status.code(), Some(0));
    assert_eq!(first.stdout, second.stdout);
}

#[test]
fn flat_flow_is_a_fixed_point() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "flat.toml",
        "n = 3\npoints = 8\npreset = \"bach\"\nperturbation = \"flat\"\ndt = 0.01\nhorizon = 0.1\nreconstruct = true\n",
    );
    let out = geoflow(&["flow", &cfg], tmp.path());
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("verdict=fixed-point"));

    let run_dir = fs::read_dir(tmp.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.is_dir() && p.file_name().unwrap().to_string_lossy().starts_with("flow-"))
        .unwrap();
    let csv = fs::read_to_string(run_dir.join("record.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "t,l2_norm,sup_norm,energy_e,pure_residual");
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|c| c.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 11);
    assert!(rows.windows(2).all(|w| w[1][0] > w[0][0]));
    assert!(rows.iter().all(|r| r[1] <= 1e-12 && r[2] <= 1e-12));
    let manifest = fs::read_to_string(run_dir.join("manifest.toml")).unwrap();
    assert!(manifest.contains("verdict = \"fixed-point\""));
    assert!(run_dir.join("snap_00010.gflo").exists());
}

#[test]
fn unstable_flow_halts_and_records_it() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "blowup.toml",
        "n = 3\npoints = 8\npreset = \"custom\"\nk = 1\na = -0.3\nb = 0.0\nc = 1.0\n\
         perturbation = \"modes\"\nmodes = [[2, 2, 2]]\namplitudes = [1e-3]\n\
         dt = 0.02\nhorizon = 3.0\nallow_unstable = true\n",
    );
    let out = geoflow(&["flow", &cfg], tmp.path());
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert!(text.contains("verdict=halted"), "{text}");
    assert!(text.contains("halt_reason="));
}

#[test]
fn non_elliptic_flow_needs_the_override() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "bad.toml",
        "n = 3\npoints = 8\npreset = \"custom\"\nk = 1\na = -0.3\nb = 0.0\nc = 1.0\ndt = 0.01\nhorizon = 0.1\n",
    );
    assert_eq!(geoflow(&["flow", &cfg], tmp.path()).status.code(), Some(1));
    assert_eq!(geoflow(&["garding", &cfg], tmp.path()).status.code(), Some(3));
}

#[test]
fn garding_command_reports_the_margin() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "garding.toml",
        "n = 3\npoints = 8\npreset = \"custom\"\nk = 1\na = 0.0\nb = 0.0\nc = 1.0\nhorizon = 1.0\nsamples = 20\nband = 2\n",
    );
    let out = geoflow(&["garding", &cfg], tmp.path());
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("verdict=holds lambda=0.5 samples=20"));
}

#[test]
fn missing_config_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = geoflow(&["flow", "/nonexistent/config.toml"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn identical_config_gives_identical_csv() {
    let text = "n = 3\npoints = 8\npreset = \"bach\"\nperturbation = \"random\"\namplitude = 1e-4\n\
                seed = 5\ndt = 0.01\nhorizon = 0.05\nreconstruct = true\n";
    let cfg = RunConfig::from_toml(text).unwrap();
    assert_eq!(cfg.hash(), RunConfig::from_toml(text).unwrap().hash());
    let tmp = tempfile::tempdir().unwrap();
    let a = run_flow(&cfg, &tmp.path().join("a")).unwrap();
    let b = run_flow(&cfg, &tmp.path().join("b")).unwrap();
    assert_eq!(a.record, b.record);
    let read = |p: &Path| fs::read(p.join("record.csv")).unwrap();
    assert_eq!(read(&a.dir), read(&b.dir));
    assert!(a.record.column("pure_residual").unwrap().iter().all(|v| v.is_some()));
}

#[test]
fn identical_uniqueness_variants_agree_exactly() {
    let text = "n = 3\npoints = 8\npreset = \"bach\"\nperturbation = \"random\"\namplitude = 1e-4\n\
                seed = 2\ndt = 0.02\nhorizon = 0.1\nuniqueness_variant = \"identical\"\n";
    let cfg = RunConfig::from_toml(text).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let out = run_uniqueness(&cfg, tmp.path()).unwrap();
    assert_eq!(out.report.sup_difference, 0.0);
    assert_eq!(out.report.verdict, "consistent-with-uniqueness");
}
