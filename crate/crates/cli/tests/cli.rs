use std::path::Path;
use std::process::{Command, Output};

fn gasnorm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gasnorm"))
        .arg("--output-dir")
        .arg(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn generate_fit_normalize_train_forecast_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&gasnorm(d, &["--seed", "3", "gen", "ar", "--length", "300"]));
    let sidecar: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("ar.json")).unwrap()).unwrap();
    assert_eq!(sidecar["seed"], 3);
    assert_eq!(std::fs::read_to_string(d.join("ar.csv")).unwrap().lines().count(), 301);

    let data = path(d, "ar.csv");
    ok(&gasnorm(d, &["--dist", "gaussian", "--gamma", "0.2", "fit", &data, "--max-iters", "80", "--restarts", "1"]));
    let fit: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("fit.json")).unwrap()).unwrap();
    assert_eq!(fit["ar"]["params"]["family"], "gaussian");
    assert_eq!(fit["ar"]["params"]["gamma"], 0.2);

    let params = path(d, "fit.json");
    ok(&gasnorm(d, &["normalize", &data, "--params", &params, "--context-length", "40", "--horizon", "5"]));
    let stats = std::fs::read_to_string(d.join("normalized_horizon_stats.csv")).unwrap();
    assert_eq!(stats.lines().next(), Some("ar_mu,ar_scale"));
    assert_eq!(stats.lines().count(), 6);

    let mlp = d.join("mlp.json");
    std::fs::write(
        &mlp,
        r#"{"layer_widths":[8],"activation":"relu","learning_rate":0.01,"epochs":3,"batch_size":32,"seed":0}"#,
    )
    .unwrap();
    let mlp = mlp.to_str().unwrap();
    ok(&gasnorm(d, &["--config", mlp, "train", &data, "--params", &params, "--context-length", "40", "--horizon", "5"]));
    ok(&gasnorm(
        d,
        &[
            "forecast",
            "--model",
            &path(d, "model.json"),
            "--context",
            &path(d, "normalized_normalized.csv"),
            "--stats",
            &path(d, "normalized_horizon_stats.csv"),
        ],
    ));
    let forecast = path(d, "forecast.csv");
    assert_eq!(std::fs::read_to_string(&forecast).unwrap().lines().count(), 6);

    let out = gasnorm(d, &["eval", "--actual", &forecast, "--forecast", &forecast, "--train", &data]);
    ok(&out);
    assert_eq!(String::from_utf8_lossy(&out.stdout), "ar\n0\n");
}

#[test]
fn zero_strength_normalization_equals_global() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&gasnorm(d, &["gen", "ar", "--length", "200"]));
    let data = path(d, "ar.csv");
    ok(&gasnorm(d, &["--gamma", "0", "normalize", &data, "--train-rows", "150", "--start", "150", "--prefix", "gas"]));
    ok(&gasnorm(d, &["normalize", &data, "--method", "global", "--train-rows", "150", "--start", "150", "--prefix", "glob"]));
    let read = |f: &str| -> Vec<f64> {
        std::fs::read_to_string(d.join(f))
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| l.parse().unwrap())
            .collect()
    };
    let (a, b) = (read("gas_normalized.csv"), read("glob_normalized.csv"));
    assert_eq!(a.len(), 50);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn experiment_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let spec = d.join("exp.json");
    std::fs::write(
        &spec,
        r#"{
        "dataset": {"kind": "ar", "length": 300, "ar_coeffs": [0.8], "noise_std": 1.0,
                    "season_amplitude": 1.0, "season_period": 20, "trend_slope": 0.02, "seed": 1},
        "normalizers": [{"kind": "gas_norm"}, {"kind": "global_norm"}],
        "forecaster": {"layer_widths": [8], "activation": "relu", "learning_rate": 0.01,
                       "epochs": 3, "batch_size": 32, "seed": 0},
        "split": {"train_fraction": 0.6, "val_fraction": 0.2, "context_length": 20, "horizon": 5},
        "gammas": [0.0, 0.5, 0.9],
        "seeds": [0, 1, 2],
        "fit": {"max_iters": 40, "restarts": 1, "seed": 0}
    }"#,
    )
    .unwrap();
    ok(&gasnorm(d, &["--seed", "4", "--gamma", "0.5", "--dist", "gaussian", "--config", spec.to_str().unwrap(), "experiment"]));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["normalizer"], "gas_norm_gaussian");
    assert_eq!(rows[0]["gamma"], 0.5);
    assert_eq!(rows[0]["seeds"], serde_json::json!([4]));
    let csv = std::fs::read_to_string(d.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn exit_codes_separate_bad_input_from_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(gasnorm(d, &["no-such-command"]).status.code(), Some(1));
    assert_eq!(gasnorm(d, &["--dist", "cauchy", "gen", "ar"]).status.code(), Some(1));
    assert_eq!(gasnorm(d, &["fit", &path(d, "missing.csv")]).status.code(), Some(1));

    std::fs::write(d.join("bad.csv"), "y\n1\nx\n").unwrap();
    let out = gasnorm(d, &["fit", &path(d, "bad.csv")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("row 2"));

    ok(&gasnorm(d, &["gen", "ar", "--length", "100"]));
    let data = path(d, "ar.csv");
    assert_eq!(gasnorm(d, &["--gamma", "1.0", "fit", &data]).status.code(), Some(1));

    let mlp = d.join("hot.json");
    std::fs::write(
        &mlp,
        r#"{"layer_widths":[8],"activation":"relu","learning_rate":1e6,"epochs":5,"batch_size":8,"seed":0}"#,
    )
    .unwrap();
    let out = gasnorm(
        d,
        &["--config", mlp.to_str().unwrap(), "train", &data, "--method", "local", "--context-length", "10"],
    );
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = gasnorm(dir.path(), &["--help"]);
    ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["gen", "fit", "normalize", "forecast", "eval", "experiment"] {
        assert!(text.contains(sub));
    }
}
