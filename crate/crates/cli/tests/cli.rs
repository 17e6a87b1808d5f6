use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn models() -> PathBuf {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../models")).to_path_buf()
}

fn run(out_dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vlaplace"))
        .env("VLAPLACE_OUT_DIR", out_dir)
        .args(args)
        .output()
        .unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn model(name: &str) -> String {
    models().join(name).to_string_lossy().into_owned()
}

fn value(text: &str, key: &str) -> f64 {
    let line = text.lines().find(|l| l.starts_with(key)).unwrap_or_else(|| panic!("no {key} in {text}"));
    line.rsplit('=').next().unwrap().trim().parse().unwrap()
}

#[test]
fn fit_writes_report_with_golden_free_energy() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        dir.path(),
        &["fit", "--model", &model("linear_gaussian.toml"), "--data", &model("linear_gaussian.csv")],
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("linear_gaussian.fit.json")).unwrap()).unwrap();
    let f = report["free_energy"].as_f64().unwrap();
    assert!((f - -7.365402822101559).abs() <= 1e-8, "{f}");
    assert_eq!(report["converged"], true);
}

#[test]
fn explicit_out_path_and_initial_vector() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/report.json");
    let out = run(
        dir.path(),
        &[
            "fit",
            "--model",
            &model("logistic.toml"),
            "--data",
            &model("logistic.csv"),
            "--init",
            "[0.5, -0.5]",
            "--out",
            path.to_str().unwrap(),
        ],
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(path.exists());
}

#[test]
fn malformed_data_row_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("bad.csv");
    std::fs::write(&data, "0.1\n0.2\nnot-a-number\n0.4\n0.5\n0.6\n").unwrap();
    let out = run(
        dir.path(),
        &["fit", "--model", &model("linear_gaussian.toml"), "--data", data.to_str().unwrap()],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("row 3"), "{}", stderr(&out));
}

#[test]
fn missing_model_file_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["fit", "--model", "/nonexistent.toml", "--data", &model("logistic.csv")]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn non_convergence_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        dir.path(),
        &[
            "fit",
            "--model",
            &model("hard_logistic.toml"),
            "--data",
            &model("hard_logistic.csv"),
            "--max-iter",
            "1",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("hard_logistic.fit.json")).unwrap()).unwrap();
    assert_eq!(report["converged"], false);
}

#[test]
fn evidence_matches_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["evidence", "--problem", &model("intercept_glm.toml"), "--quadrature"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    assert!((value(&text, "log_evidence =") - -2.3871832107434003).abs() <= 1e-6);
    assert!((value(&text, "log_evidence_quadrature") - -2.3871832107434003).abs() <= 1e-6);
    let gap = value(&text, "f_infinity =") - value(&text, "log_evidence =");
    assert!((gap - value(&text, "f_infinity_minus_log_evidence")).abs() <= 1e-10);
}

#[test]
fn gradient_check_passes_and_fails() {
    let dir = tempfile::tempdir().unwrap();
    let good = run(
        dir.path(),
        &["check-gradients", "--model", &model("logistic.toml"), "--data", &model("logistic.csv")],
    );
    assert_eq!(good.status.code(), Some(0), "{}", stderr(&good));
    let bad = run(dir.path(), &["check-gradients", "--model", &model("wrong_jacobian.toml")]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(value(&stdout(&bad), "max_jacobian_error") > 1e-4);
}

#[test]
fn simulation_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for path in [&a, &b] {
        let out = run(
            dir.path(),
            &["simulate", "--model", &model("logistic.toml"), "--seed", "7", "--out", path.to_str().unwrap()],
        );
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let glm = dir.path().join("glm.toml");
    let out = run(
        dir.path(),
        &["simulate", "--n-theta", "2", "--n-y", "9", "--seed", "7", "--out", glm.to_str().unwrap()],
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let evidence = run(dir.path(), &["evidence", "--problem", glm.to_str().unwrap()]);
    assert_eq!(evidence.status.code(), Some(0), "{}", stderr(&evidence));
}

#[test]
fn figure1_writes_rows_and_slopes() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["figure1", "--config", &model("figure1.toml")]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    let slope = |prefix: &str| -> f64 {
        let line = text.lines().find(|l| l.starts_with(prefix)).unwrap();
        line.split("slope = ").nth(1).unwrap().split_whitespace().next().unwrap().parse().unwrap()
    };
    assert!((0.85..=0.95).contains(&slope("big")), "{text}");
    assert!(slope("small") > slope("big"));
    assert!(dir.path().join("figure1/rows.csv").exists());
    assert!(dir.path().join("figure1/summary.txt").exists());
}
