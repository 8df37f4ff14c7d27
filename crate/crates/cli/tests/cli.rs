//! End-to-end behaviour of the `sqr` binary: exit codes, settings
//! precedence and artifact layout.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn sqr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sqr")).args(args).env_remove("SQR_THREADS").output().unwrap()
}

fn simulate(dir: &Path) -> PathBuf {
    let out = dir.join("data");
    let o = sqr(&["simulate", "--design", "sim1", "--n", "15", "--m", "10", "--seed", "1", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn fit_args<'a>(data: &'a str, out: &'a str) -> Vec<String> {
    ["fit", "--x", &format!("{data}/X.csv"), "--y", &format!("{data}/Y.csv"), "--grid", &format!("{data}/grid.csv"), "--out", out]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

fn run(args: &[String]) -> Output {
    sqr(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn help_exits_zero_and_bad_flags_exit_one() {
    assert_eq!(sqr(&["--help"]).status.code(), Some(0));
    assert_eq!(sqr(&["fit", "--no-such-flag", "1"]).status.code(), Some(1));
}

#[test]
fn fit_writes_artifacts_and_no_partials() {
    let tmp = tempfile::tempdir().unwrap();
    let data = simulate(tmp.path());
    let out = tmp.path().join("fit");
    let o = run(&fit_args(data.to_str().unwrap(), out.to_str().unwrap()));
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let mut names: Vec<String> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    names.sort();
    assert_eq!(names, ["coefficients.csv", "dual.csv", "manifest.json", "timing.json"]);
    let coef = fs::read_to_string(out.join("coefficients.csv")).unwrap();
    assert!(coef.starts_with("dim1,beta_x0,beta_x1,beta_x2\n"));
    assert_eq!(coef.lines().count(), 11);
    assert!(!coef.contains('\r'));
    let m = manifest(&out);
    assert_eq!(m["command"], "fit");
    assert!(m.get("wall_seconds").is_none());
}

#[test]
fn flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let data = simulate(tmp.path());
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "# settings\ntau = 0.3\nlambda=2\n").unwrap();
    let out = tmp.path().join("fit");
    let mut args = fit_args(data.to_str().unwrap(), out.to_str().unwrap());
    args.extend(["--config".into(), cfg.to_string_lossy().into_owned(), "--tau".into(), "0.7".into()]);
    assert_eq!(run(&args).status.code(), Some(0));
    let m = manifest(&out);
    assert_eq!(m["config"]["tau"], "0.7");
    assert_eq!(m["config"]["lambda"], "2");

    fs::write(&cfg, "tua=0.3\n").unwrap();
    let o = run(&args);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown key 'tua'"));
}

#[test]
fn input_errors_exit_one_with_locations() {
    let tmp = tempfile::tempdir().unwrap();
    let data = simulate(tmp.path());
    let d = data.to_str().unwrap();
    let out = tmp.path().join("fit");

    let mut args = fit_args(d, out.to_str().unwrap());
    args.extend(["--tau".into(), "1.5".into()]);
    assert_eq!(run(&args).status.code(), Some(1));

    let missing = fit_args(&format!("{d}/nowhere"), out.to_str().unwrap());
    assert_eq!(run(&missing).status.code(), Some(1));

    let y = fs::read_to_string(data.join("Y.csv")).unwrap();
    let mut lines: Vec<String> = y.lines().map(String::from).collect();
    let mut cells: Vec<String> = lines[2].split(',').map(String::from).collect();
    cells[3] = "NaN".into();
    lines[2] = cells.join(",");
    fs::write(data.join("Y.csv"), lines.join("\n") + "\n").unwrap();
    let o = run(&fit_args(d, out.to_str().unwrap()));
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 3, column 4"), "{err}");
}

#[test]
fn threads_setting_is_validated() {
    let tmp = tempfile::tempdir().unwrap();
    let data = simulate(tmp.path());
    let out = tmp.path().join("fit");
    let mut args = fit_args(data.to_str().unwrap(), out.to_str().unwrap());
    args.extend(["--threads".into(), "0".into()]);
    assert_eq!(run(&args).status.code(), Some(1));
    let o = Command::new(env!("CARGO_BIN_EXE_sqr"))
        .args(fit_args(data.to_str().unwrap(), out.to_str().unwrap()))
        .env("SQR_THREADS", "3")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(manifest(&out)["config"]["threads"], "3");
}

#[test]
fn pipeline_then_sample_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("sim2");
    let o = sqr(&["simulate", "--design", "sim2", "--n", "25", "--m", "10", "--seed", "2", "--out", data.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let d = data.to_str().unwrap();
    let model = tmp.path().join("model");
    let o = sqr(&[
        "pipeline", "--x", &format!("{d}/X.csv"), "--y", &format!("{d}/Y.csv"), "--grid", &format!("{d}/grid.csv"),
        "--taus", "0.1:0.9:0.1", "--n-samples", "4", "--out", model.to_str().unwrap(),
    ]);
    assert!(matches!(o.status.code(), Some(0) | Some(2)), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["surface.csv", "grid.csv", "pseudo.csv", "copula.json", "samples.csv", "pvalues.csv"] {
        assert!(model.join(f).exists(), "missing {f}");
    }
    let samples = tmp.path().join("samples");
    let o = sqr(&[
        "sample", "--model", model.to_str().unwrap(), "--covariates", &format!("{d}/X.csv"), "--n-samples", "3",
        "--out", samples.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(samples.join("samples.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 25 * 3);
}
